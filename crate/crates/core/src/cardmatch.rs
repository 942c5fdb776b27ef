//! Step 2: cardinality matching of high-low (treated) to high-high (control)
//! cluster pairs under mean-balance constraints.
//!
//! With the pooled standard deviations `s_k` frozen at their before-matching
//! values, the balance constraint on covariate `k` is linear in the 0/1
//! selection indicators once multiplied through by the matched count `N`:
//!
//! ```text
//! | Σ_T t_i z_ik − Σ_C c_j z_jk | ≤ δ N,   N = Σ t_i = Σ c_j,   z = (x − m) / s
//! ```
//!
//! so the largest balanced selection is a 0/1 integer program. An LP dive
//! polished by local search supplies the first incumbent; depth-first
//! branch-and-bound over the LP relaxation then proves optimality, with a
//! small node budget once either side exceeds `exact_limit`.

use std::rc::Rc;

use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem, Solution, Variable};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::error::{Error, Result};
use crate::model::{balance_covariate_names, ClusterPair, PairCategory, Quadruple};
use crate::stats::{mean, sample_variance};

/// `sqrt((var_T + var_C) / 2)` with sample variances.
pub fn pooled_sd(treated: &[f64], control: &[f64]) -> f64 {
    ((sample_variance(treated) + sample_variance(control)) / 2.0).sqrt()
}

/// Absolute standardized difference with the pooled sd of these same groups.
pub fn std_diff(treated: &[f64], control: &[f64]) -> f64 {
    std_diff_with_sd(treated, control, pooled_sd(treated, control))
}

/// Absolute standardized difference against a given pooled sd.
pub fn std_diff_with_sd(treated: &[f64], control: &[f64], s_pool: f64) -> f64 {
    let d = (mean(treated) - mean(control)).abs();
    if s_pool > 0.0 {
        d / s_pool
    } else if d == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Largest side solved by exact branch-and-bound alone.
    pub exact_limit: usize,
    /// Node budget of the exact search.
    pub exact_node_limit: usize,
    /// Node budget of the search that follows the heuristic on large instances.
    pub heuristic_node_limit: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            exact_limit: 60,
            exact_node_limit: 200_000,
            heuristic_node_limit: 20_000,
        }
    }
}

/// Indices of the selected treated and control units.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub treated: Vec<usize>,
    pub control: Vec<usize>,
    /// False when a node budget ran out before optimality was proven.
    pub proven_optimal: bool,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.treated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treated.is_empty()
    }
}

/// Feature rows: one `Vec<f64>` of equal length per unit.
struct Instance<'a> {
    treated: &'a [Vec<f64>],
    control: &'a [Vec<f64>],
    /// Pooled sd per covariate, from the full groups.
    s_pool: Vec<f64>,
    threshold: f64,
    /// Covariates that carry a constraint (s_pool > 0).
    active: Vec<usize>,
    /// Standardized, centered features for the active covariates.
    zt: Vec<Vec<f64>>,
    zc: Vec<Vec<f64>>,
}

impl<'a> Instance<'a> {
    /// `None` when some covariate is constant within each group at different
    /// values, so that no nonempty selection can balance it.
    fn new(treated: &'a [Vec<f64>], control: &'a [Vec<f64>], threshold: f64) -> Option<Self> {
        let k = treated.first().or(control.first()).map_or(0, Vec::len);
        let column = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).collect::<Vec<_>>();
        let mut s_pool = Vec::with_capacity(k);
        let mut active = Vec::new();
        let mut centers = Vec::new();
        for j in 0..k {
            let (t, c) = (column(treated, j), column(control, j));
            let s = pooled_sd(&t, &c);
            s_pool.push(s);
            if s > 0.0 {
                active.push(j);
                let all: Vec<f64> = t.iter().chain(&c).copied().collect();
                centers.push(mean(&all));
            } else if mean(&t) != mean(&c) {
                return None;
            }
        }
        let standardize = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    active
                        .iter()
                        .zip(&centers)
                        .map(|(&j, m)| (r[j] - m) / s_pool[j])
                        .collect()
                })
                .collect()
        };
        let zt = standardize(treated);
        let zc = standardize(control);
        Some(Self {
            treated,
            control,
            s_pool,
            threshold,
            active,
            zt,
            zc,
        })
    }

    /// Exact check on the raw features.
    fn balanced(&self, t: &[usize], c: &[usize]) -> bool {
        if t.len() != c.len() {
            return false;
        }
        if t.is_empty() {
            return true;
        }
        let k = self.s_pool.len();
        (0..k).all(|j| {
            let tv: Vec<f64> = t.iter().map(|&i| self.treated[i][j]).collect();
            let cv: Vec<f64> = c.iter().map(|&i| self.control[i][j]).collect();
            std_diff_with_sd(&tv, &cv, self.s_pool[j]) <= self.threshold
        })
    }
}

/// Largest selection of equal numbers of treated and control rows whose
/// absolute standardized mean differences are all at most `threshold`, with
/// the denominators taken from the full groups.
pub fn cardinality_select(
    treated: &[Vec<f64>],
    control: &[Vec<f64>],
    threshold: f64,
    opts: &SolverOptions,
) -> Selection {
    let empty = |proven| Selection {
        treated: Vec::new(),
        control: Vec::new(),
        proven_optimal: proven,
    };
    if treated.is_empty() || control.is_empty() {
        return empty(true);
    }
    let Some(inst) = Instance::new(treated, control, threshold) else {
        return empty(true);
    };
    if inst.active.is_empty() {
        // Nothing to balance: every pairing of min(|T|, |C|) units works.
        let n = treated.len().min(control.len());
        return Selection {
            treated: (0..n).collect(),
            control: (0..n).collect(),
            proven_optimal: true,
        };
    }

    let large = treated.len().max(control.len()) > opts.exact_limit;
    let mut incumbent = heuristic(&inst).unwrap_or_default();
    let node_limit = if large { opts.heuristic_node_limit } else { opts.exact_node_limit };
    let proven = branch_and_bound(&inst, &mut incumbent, node_limit);
    let (mut t, mut c) = incumbent;
    t.sort_unstable();
    c.sort_unstable();
    debug_assert!(inst.balanced(&t, &c));
    Selection {
        treated: t,
        control: c,
        proven_optimal: proven,
    }
}

struct Relaxation {
    problem: Problem,
    vars: Vec<Variable>,
    n_treated: usize,
}

fn relaxation(inst: &Instance) -> Relaxation {
    let nt = inst.zt.len();
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let mut vars = Vec::with_capacity(nt + inst.zc.len());
    for _ in 0..nt {
        vars.push(problem.add_var(1.0, (0.0, 1.0)));
    }
    for _ in 0..inst.zc.len() {
        vars.push(problem.add_var(0.0, (0.0, 1.0)));
    }
    // Slightly loosened so that no integer-feasible point is cut off by
    // rounding; integral candidates are re-checked exactly.
    let delta = inst.threshold * (1.0 + 1e-7) + 1e-9;
    for a in 0..inst.active.len() {
        let mut upper = LinearExpr::empty();
        let mut lower = LinearExpr::empty();
        for i in 0..nt {
            upper.add(vars[i], inst.zt[i][a] - delta);
            lower.add(vars[i], inst.zt[i][a] + delta);
        }
        for (j, row) in inst.zc.iter().enumerate() {
            upper.add(vars[nt + j], -row[a]);
            lower.add(vars[nt + j], -row[a]);
        }
        problem.add_constraint(upper, ComparisonOp::Le, 0.0);
        problem.add_constraint(lower, ComparisonOp::Ge, 0.0);
    }
    let mut count = LinearExpr::empty();
    for (idx, v) in vars.iter().enumerate() {
        count.add(*v, if idx < nt { 1.0 } else { -1.0 });
    }
    problem.add_constraint(count, ComparisonOp::Eq, 0.0);
    Relaxation {
        problem,
        vars,
        n_treated: nt,
    }
}

const INTEGRALITY_TOL: f64 = 1e-6;

fn split(values: &[f64], n_treated: usize) -> (Vec<usize>, Vec<usize>) {
    let t = (0..n_treated).filter(|&i| values[i] > 0.5).collect();
    let c = (n_treated..values.len()).filter(|&i| values[i] > 0.5).map(|i| i - n_treated).collect();
    (t, c)
}

/// Most fractional variable, lowest index on ties.
fn most_fractional(values: &[f64]) -> Option<usize> {
    let mut pick = None;
    let mut best = INTEGRALITY_TOL;
    for (idx, &v) in values.iter().enumerate() {
        let frac = v.min(1.0 - v);
        if frac > best {
            best = frac;
            pick = Some(idx);
        }
    }
    pick
}

/// Depth-first search, up-branch first. Children are solved only when
/// popped, so pruned subtrees cost no LP work. Updates `incumbent` in place
/// and returns whether the search finished within `node_limit`.
fn branch_and_bound(inst: &Instance, incumbent: &mut (Vec<usize>, Vec<usize>), node_limit: usize) -> bool {
    let relax = relaxation(inst);
    let root = match relax.problem.solve() {
        Ok(s) => s,
        Err(_) => return true,
    };
    let nv = relax.vars.len();
    struct Node {
        parent: Rc<Solution>,
        fixed: Rc<Vec<bool>>,
        branch: Option<(usize, f64)>,
    }
    let mut stack = vec![Node {
        parent: Rc::new(root),
        fixed: Rc::new(vec![false; nv]),
        branch: None,
    }];
    let mut nodes = 0usize;
    while let Some(node) = stack.pop() {
        if (node.parent.objective() + INTEGRALITY_TOL).floor() as usize <= incumbent.0.len() {
            continue;
        }
        nodes += 1;
        if nodes > node_limit {
            return false;
        }
        let (sol, fixed) = match node.branch {
            None => (node.parent, node.fixed),
            Some((var, val)) => {
                let Ok(s) = Rc::unwrap_or_clone(node.parent).fix_var(relax.vars[var], val) else {
                    continue;
                };
                let mut f = Rc::unwrap_or_clone(node.fixed);
                f[var] = true;
                (Rc::new(s), Rc::new(f))
            }
        };
        if (sol.objective() + INTEGRALITY_TOL).floor() as usize <= incumbent.0.len() {
            continue;
        }
        let values: Vec<f64> = relax.vars.iter().map(|v| sol[*v]).collect();
        let mut branch_var = most_fractional(&values);
        if branch_var.is_none() {
            let (t, c) = split(&values, relax.n_treated);
            if inst.balanced(&t, &c) {
                if t.len() > incumbent.0.len() {
                    *incumbent = (t, c);
                }
                continue;
            }
            // Integral only within the loosened tolerance: keep splitting.
            branch_var = fixed.iter().position(|f| !f);
        }
        let Some(var) = branch_var else { continue };
        for val in [0.0, 1.0] {
            stack.push(Node {
                parent: Rc::clone(&sol),
                fixed: Rc::clone(&fixed),
                branch: Some((var, val)),
            });
        }
    }
    true
}

/// Per-covariate imbalance bookkeeping in standardized units.
struct Tally<'a> {
    inst: &'a Instance<'a>,
    in_t: Vec<bool>,
    in_c: Vec<bool>,
    /// Σ_T z − Σ_C z per active covariate.
    diff: Vec<f64>,
    n_t: usize,
    n_c: usize,
}

impl<'a> Tally<'a> {
    fn new(inst: &'a Instance<'a>) -> Self {
        Self {
            inst,
            in_t: vec![false; inst.zt.len()],
            in_c: vec![false; inst.zc.len()],
            diff: vec![0.0; inst.active.len()],
            n_t: 0,
            n_c: 0,
        }
    }

    fn toggle_t(&mut self, i: usize) {
        let sign = if self.in_t[i] { -1.0 } else { 1.0 };
        self.in_t[i] = !self.in_t[i];
        if self.in_t[i] { self.n_t += 1 } else { self.n_t -= 1 }
        for (d, z) in self.diff.iter_mut().zip(&self.inst.zt[i]) {
            *d += sign * z;
        }
    }

    fn toggle_c(&mut self, j: usize) {
        let sign = if self.in_c[j] { 1.0 } else { -1.0 };
        self.in_c[j] = !self.in_c[j];
        if self.in_c[j] { self.n_c += 1 } else { self.n_c -= 1 }
        for (d, z) in self.diff.iter_mut().zip(&self.inst.zc[j]) {
            *d += sign * z;
        }
    }

    /// Largest constraint excess `|diff_k| − δ N` (≤ 0 when feasible).
    fn worst(&self, diff: &[f64], n: usize) -> f64 {
        let cap = self.inst.threshold * n as f64;
        diff.iter().fold(f64::NEG_INFINITY, |w, d| w.max(d.abs() - cap))
    }

    fn selection(&self) -> (Vec<usize>, Vec<usize>) {
        (
            (0..self.in_t.len()).filter(|&i| self.in_t[i]).collect(),
            (0..self.in_c.len()).filter(|&j| self.in_c[j]).collect(),
        )
    }
}

/// For each target size from the LP bound downwards, starts from the units
/// with the largest LP values and swaps units in and out to drive the
/// constraint excess to zero; the first balanced selection is then grown by
/// insertion and swap moves.
fn heuristic(inst: &Instance) -> Option<(Vec<usize>, Vec<usize>)> {
    let relax = relaxation(inst);
    let sol = relax.problem.solve().ok()?;
    let nt = relax.n_treated;
    let values: Vec<f64> = relax.vars.iter().map(|v| sol[*v]).collect();
    let rank = |range: std::ops::Range<usize>| -> Vec<usize> {
        let offset = range.start;
        let mut idx: Vec<usize> = range.collect();
        idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        idx.into_iter().map(|i| i - offset).collect()
    };
    let order_t = rank(0..nt);
    let order_c = rank(nt..values.len());
    let bound = ((sol.objective() + INTEGRALITY_TOL).floor() as usize).min(inst.zt.len()).min(inst.zc.len());

    let mut tally = Tally::new(inst);
    for n in (1..=bound).rev() {
        let mut trial = Tally::new(inst);
        order_t.iter().take(n).for_each(|&i| trial.toggle_t(i));
        order_c.iter().take(n).for_each(|&j| trial.toggle_c(j));
        if descend_to_balance(&mut trial) {
            tally = trial;
            break;
        }
    }
    // Grow: add the best-ranked unused unit on each side and rebalance.
    while tally.n_t > 0 && tally.n_t < bound {
        let mut trial = Tally {
            inst,
            in_t: tally.in_t.clone(),
            in_c: tally.in_c.clone(),
            diff: tally.diff.clone(),
            n_t: tally.n_t,
            n_c: tally.n_c,
        };
        let (Some(&i), Some(&j)) = (
            order_t.iter().find(|&&i| !trial.in_t[i]),
            order_c.iter().find(|&&j| !trial.in_c[j]),
        ) else {
            break;
        };
        trial.toggle_t(i);
        trial.toggle_c(j);
        if !descend_to_balance(&mut trial) {
            break;
        }
        tally = trial;
    }

    // Insertion and swap moves until neither helps.
    for _round in 0..1000 {
        if try_insert(&mut tally) {
            continue;
        }
        if !try_swap(&mut tally) {
            break;
        }
    }
    let (t, c) = tally.selection();
    if inst.balanced(&t, &c) {
        Some((t, c))
    } else {
        None
    }
}

/// Squared excess over a slightly tightened cap, so that a zero score
/// survives the exact check.
fn excess(diff: &[f64], cap: f64) -> f64 {
    diff.iter().map(|d| (d.abs() - cap).max(0.0).powi(2)).sum()
}

/// Best-improvement swaps at fixed size until the excess vanishes.
fn descend_to_balance(tally: &mut Tally) -> bool {
    let inst = tally.inst;
    let cap = 0.999 * inst.threshold * tally.n_t as f64;
    let mut score = excess(&tally.diff, cap);
    let mut scratch = vec![0.0; tally.diff.len()];
    for _ in 0..(50 * (inst.zt.len() + inst.zc.len()) + 100) {
        if score == 0.0 {
            let (t, c) = tally.selection();
            return inst.balanced(&t, &c);
        }
        let mut best: Option<(f64, bool, usize, usize)> = None;
        for side_t in [true, false] {
            let (rows, chosen, sign) = if side_t {
                (&inst.zt, &tally.in_t, 1.0)
            } else {
                (&inst.zc, &tally.in_c, -1.0)
            };
            for out in (0..rows.len()).filter(|&a| chosen[a]) {
                for inn in (0..rows.len()).filter(|&b| !chosen[b]) {
                    for (k, slot) in scratch.iter_mut().enumerate() {
                        *slot = tally.diff[k] + sign * (rows[inn][k] - rows[out][k]);
                    }
                    let s = excess(&scratch, cap);
                    if s < score - 1e-15 && best.is_none_or(|(b, ..)| s < b) {
                        best = Some((s, side_t, out, inn));
                    }
                }
            }
        }
        let Some((s, side_t, out, inn)) = best else {
            return false;
        };
        if side_t {
            tally.toggle_t(out);
            tally.toggle_t(inn);
        } else {
            tally.toggle_c(out);
            tally.toggle_c(inn);
        }
        score = s;
    }
    false
}

/// Adds one treated and one control unit if feasibility is kept.
fn try_insert(tally: &mut Tally) -> bool {
    let inst = tally.inst;
    let n = tally.n_t + 1;
    let cap = inst.threshold * n as f64;
    for i in 0..inst.zt.len() {
        if tally.in_t[i] {
            continue;
        }
        let after_t: Vec<f64> = tally.diff.iter().zip(&inst.zt[i]).map(|(d, z)| d + z).collect();
        for j in 0..inst.zc.len() {
            if tally.in_c[j] {
                continue;
            }
            if after_t.iter().zip(&inst.zc[j]).all(|(d, z)| (d - z).abs() <= cap) {
                tally.toggle_t(i);
                tally.toggle_c(j);
                let (t, c) = tally.selection();
                if inst.balanced(&t, &c) {
                    return true;
                }
                tally.toggle_t(i);
                tally.toggle_c(j);
            }
        }
    }
    false
}

/// Swaps one selected unit for an unselected one on the same side when that
/// strictly reduces the total absolute imbalance while staying feasible.
fn try_swap(tally: &mut Tally) -> bool {
    let inst = tally.inst;
    let n = tally.n_t;
    if n == 0 {
        return false;
    }
    let total = |d: &[f64]| d.iter().map(|v| v.abs()).sum::<f64>();
    let current = total(&tally.diff);
    let mut best: Option<(f64, bool, usize, usize)> = None;
    for side_t in [true, false] {
        let (rows, chosen, sign) = if side_t {
            (&inst.zt, &tally.in_t, 1.0)
        } else {
            (&inst.zc, &tally.in_c, -1.0)
        };
        for out in (0..rows.len()).filter(|&a| chosen[a]) {
            for inn in (0..rows.len()).filter(|&b| !chosen[b]) {
                let d: Vec<f64> = tally
                    .diff
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v + sign * (rows[inn][k] - rows[out][k]))
                    .collect();
                if tally.worst(&d, n) > 0.0 {
                    continue;
                }
                let score = total(&d);
                if score < current - 1e-12 && best.is_none_or(|(b, ..)| score < b) {
                    best = Some((score, side_t, out, inn));
                }
            }
        }
    }
    let Some((_, side_t, out, inn)) = best else {
        return false;
    };
    if side_t {
        tally.toggle_t(out);
        tally.toggle_t(inn);
    } else {
        tally.toggle_c(out);
        tally.toggle_c(inn);
    }
    true
}

/// Min-cost one-to-one pairing of equal-size sets on squared Mahalanobis
/// distance, using the covariance of all selected rows.
pub fn pair_within_selection(treated: &[Vec<f64>], control: &[Vec<f64>]) -> Vec<(usize, usize)> {
    assert_eq!(treated.len(), control.len(), "pairing needs equal-size sets");
    let n = treated.len();
    if n == 0 {
        return Vec::new();
    }
    let k = treated[0].len();
    let all: Vec<&Vec<f64>> = treated.iter().chain(control).collect();
    let centers: Vec<f64> = (0..k).map(|j| all.iter().map(|r| r[j]).sum::<f64>() / all.len() as f64).collect();
    let denom = (all.len().max(2) - 1) as f64;
    let mut cov = DMatrix::from_fn(k, k, |a, b| {
        all.iter().map(|r| (r[a] - centers[a]) * (r[b] - centers[b])).sum::<f64>() / denom
    });
    let scale = 1.0 + cov.diagonal().mean();
    for j in 0..k {
        cov[(j, j)] += 1e-8 * scale;
    }
    let inv = cov.clone().cholesky().map(|c| c.inverse()).unwrap_or_else(|| {
        DMatrix::from_fn(k, k, |a, b| if a == b { 1.0 / cov[(a, a)] } else { 0.0 })
    });
    let cost: Vec<Vec<f64>> = treated
        .iter()
        .map(|t| {
            control
                .iter()
                .map(|c| {
                    let d: Vec<f64> = t.iter().zip(c).map(|(a, b)| a - b).collect();
                    let mut q = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            q += d[a] * inv[(a, b)] * d[b];
                        }
                    }
                    q.max(0.0)
                })
                .collect()
        })
        .collect();
    assignment::solve(&cost).pairs
}

/// One balance row: means and absolute standardized differences before and
/// after matching. After-matching fields are `None` for an empty match.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRow {
    pub covariate: String,
    pub treated_mean_before: f64,
    pub control_mean_before: f64,
    pub std_diff_before: f64,
    pub treated_mean_after: Option<f64>,
    pub control_mean_after: Option<f64>,
    pub std_diff_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
}

impl BalanceReport {
    pub fn max_std_diff_after(&self) -> Option<f64> {
        self.rows
            .iter()
            .map(|r| r.std_diff_after)
            .try_fold(0.0f64, |m, v| v.map(|v| m.max(v)))
    }
}

pub fn balance_report(
    names: &[String],
    treated: &[Vec<f64>],
    control: &[Vec<f64>],
    selection: &Selection,
) -> BalanceReport {
    let rows = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let t: Vec<f64> = treated.iter().map(|r| r[j]).collect();
            let c: Vec<f64> = control.iter().map(|r| r[j]).collect();
            let s = pooled_sd(&t, &c);
            let (mut ta, mut ca, mut sa) = (None, None, None);
            if !selection.is_empty() {
                let ts: Vec<f64> = selection.treated.iter().map(|&i| t[i]).collect();
                let cs: Vec<f64> = selection.control.iter().map(|&i| c[i]).collect();
                ta = Some(mean(&ts));
                ca = Some(mean(&cs));
                sa = Some(std_diff_with_sd(&ts, &cs, s));
            }
            BalanceRow {
                covariate: name.clone(),
                treated_mean_before: mean(&t),
                control_mean_before: mean(&c),
                std_diff_before: std_diff_with_sd(&t, &c, s),
                treated_mean_after: ta,
                control_mean_after: ca,
                std_diff_after: sa,
            }
        })
        .collect();
    BalanceReport { rows }
}

#[derive(Debug, Clone)]
pub struct CardMatch {
    pub quadruples: Vec<Quadruple>,
    pub balance: BalanceReport,
    pub proven_optimal: bool,
}

/// Selects and pairs high-low (treated) with high-high (control) pairs.
/// Cross-country quadruples are allowed.
pub fn cardinality_match(
    treated: &[ClusterPair],
    control: &[ClusterPair],
    threshold: f64,
    opts: &SolverOptions,
) -> Result<CardMatch> {
    let features = |pairs: &[ClusterPair], want: PairCategory| -> Result<Vec<Vec<f64>>> {
        pairs
            .iter()
            .map(|p| {
                if p.category != want {
                    return Err(Error::Validation(format!(
                        "pair ({}, {}) is {} but {} was expected",
                        p.early.cluster_id, p.late.cluster_id, p.category, want
                    )));
                }
                p.balance_vector().map(|v| v.to_vec()).ok_or_else(|| {
                    Error::Validation(format!(
                        "pair ({}, {}) has undefined cluster covariates",
                        p.early.cluster_id, p.late.cluster_id
                    ))
                })
            })
            .collect()
    };
    let xt = features(treated, PairCategory::HighLow)?;
    let xc = features(control, PairCategory::HighHigh)?;
    let selection = cardinality_select(&xt, &xc, threshold, opts);
    let balance = balance_report(&balance_covariate_names(), &xt, &xc, &selection);

    let st: Vec<Vec<f64>> = selection.treated.iter().map(|&i| xt[i].clone()).collect();
    let sc: Vec<Vec<f64>> = selection.control.iter().map(|&j| xc[j].clone()).collect();
    let quadruples = pair_within_selection(&st, &sc)
        .into_iter()
        .map(|(a, b)| {
            Quadruple::new(
                treated[selection.treated[a]].clone(),
                control[selection.control[b]].clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CardMatch {
        quadruples,
        balance,
        proven_optimal: selection.proven_optimal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_diff_hand_values() {
        assert_eq!(std_diff(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        // Means 0.5 and 1.5, variances 0.5 each, pooled sd sqrt(0.5).
        assert!((std_diff(&[0.0, 1.0], &[1.0, 2.0]) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(std_diff(&[1.0, 1.0], &[2.0, 2.0]), f64::INFINITY);
        assert_eq!(std_diff(&[2.0, 2.0], &[2.0, 2.0]), 0.0);
    }

    #[test]
    fn identical_groups_match_fully() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let sel = cardinality_select(&rows, &rows, 0.1, &SolverOptions::default());
        assert_eq!(sel.len(), 5);
        assert!(sel.proven_optimal);
    }

    #[test]
    fn far_apart_singletons_do_not_match() {
        let t = vec![vec![0.0, 0.0], vec![0.1, 1.0]];
        let c = vec![vec![10.0, 0.0], vec![10.1, 1.0]];
        let sel = cardinality_select(&t, &c, 0.1, &SolverOptions::default());
        assert!(sel.is_empty());
    }

    #[test]
    fn constant_unequal_covariate_gives_empty() {
        let t = vec![vec![1.0, 0.3], vec![1.0, 0.5]];
        let c = vec![vec![2.0, 0.3], vec![2.0, 0.5]];
        assert!(cardinality_select(&t, &c, 0.1, &SolverOptions::default()).is_empty());
    }

    #[test]
    fn constant_equal_covariate_is_ignored() {
        let t = vec![vec![1.0, 0.3], vec![1.0, 0.5]];
        let c = vec![vec![1.0, 0.3], vec![1.0, 0.5]];
        assert_eq!(cardinality_select(&t, &c, 0.1, &SolverOptions::default()).len(), 2);
    }

    #[test]
    fn heuristic_path_returns_balanced_selection() {
        let t: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()]).collect();
        let c: Vec<Vec<f64>> = (0..9).map(|i| vec![(i as f64 * 1.3).sin() + 0.2, (i as f64).cos()]).collect();
        let opts = SolverOptions { exact_limit: 3, ..SolverOptions::default() };
        let heur = cardinality_select(&t, &c, 0.1, &opts);
        let exact = cardinality_select(&t, &c, 0.1, &SolverOptions::default());
        assert!(heur.len() <= exact.len());
        let inst = Instance::new(&t, &c, 0.1).unwrap();
        assert!(inst.balanced(&heur.treated, &heur.control));
    }

    #[test]
    fn identical_units_pair_lexicographically() {
        let rows = vec![vec![1.0, 2.0]; 3];
        assert_eq!(pair_within_selection(&rows, &rows), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn singleton_pairing() {
        assert_eq!(pair_within_selection(&[vec![0.0]], &[vec![5.0]]), vec![(0, 0)]);
    }
}
