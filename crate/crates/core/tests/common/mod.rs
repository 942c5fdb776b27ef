//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use pairdid::cardmatch::{pooled_sd, std_diff_with_sd};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Largest balanced cardinality by enumerating every pair of equal-size subsets.
pub fn card_brute_force(t: &[Vec<f64>], c: &[Vec<f64>], delta: f64) -> usize {
    let k = t[0].len();
    let s: Vec<f64> = (0..k)
        .map(|j| {
            let tv: Vec<f64> = t.iter().map(|r| r[j]).collect();
            let cv: Vec<f64> = c.iter().map(|r| r[j]).collect();
            pooled_sd(&tv, &cv)
        })
        .collect();
    let sums = |rows: &[Vec<f64>]| -> Vec<(u32, Vec<f64>)> {
        (0u32..(1 << rows.len()))
            .map(|mask| {
                let mut acc = vec![0.0; k];
                for (i, r) in rows.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        for j in 0..k {
                            acc[j] += r[j];
                        }
                    }
                }
                (mask.count_ones(), acc)
            })
            .collect()
    };
    let st = sums(t);
    let sc = sums(c);
    let mut best = 0;
    for (nt, a) in &st {
        if (*nt as usize) <= best {
            continue;
        }
        for (nc, b) in &sc {
            if nc != nt {
                continue;
            }
            let n = *nt as f64;
            let ok = (0..k).all(|j| {
                let d = (a[j] / n - b[j] / n).abs();
                if s[j] > 0.0 { d / s[j] <= delta } else { d == 0.0 }
            });
            if ok {
                best = *nt as usize;
                break;
            }
        }
    }
    best
}

pub fn random_card_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let nt = rng.random_range(1..=10);
    let nc = rng.random_range(1..=10);
    let k = [1, 2, 3, 4, 12][rng.random_range(0..5)];
    let shift = rng.random_range(0.0..1.0);
    let t = (0..nt).map(|_| (0..k).map(|_| rng.random::<f64>()).collect()).collect();
    let c = (0..nc).map(|_| (0..k).map(|_| rng.random::<f64>() + shift * 0.3).collect()).collect();
    (t, c)
}

pub fn card_verify(t: &[Vec<f64>], c: &[Vec<f64>], ti: &[usize], ci: &[usize], delta: f64) -> bool {
    if ti.len() != ci.len() {
        return false;
    }
    if ti.is_empty() {
        return true;
    }
    (0..t[0].len()).all(|j| {
        let tv: Vec<f64> = t.iter().map(|r| r[j]).collect();
        let cv: Vec<f64> = c.iter().map(|r| r[j]).collect();
        let s = pooled_sd(&tv, &cv);
        let ts: Vec<f64> = ti.iter().map(|&i| t[i][j]).collect();
        let cs: Vec<f64> = ci.iter().map(|&i| c[i][j]).collect();
        std_diff_with_sd(&ts, &cs, s) <= delta
    })
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum over injective maps from the smaller side into the larger.
pub fn assignment_brute_force(cost: &[Vec<f64>]) -> f64 {
    let (r, c) = (cost.len(), cost[0].len());
    let (small, large) = (r.min(c), r.max(c));
    let at = |i: usize, j: usize| if r <= c { cost[i][j] } else { cost[j][i] };
    let mut best = f64::INFINITY;
    // Choose which `small` of the `large` indices are used, then permute.
    for mask in 0u32..(1 << large) {
        if mask.count_ones() as usize != small {
            continue;
        }
        let chosen: Vec<usize> = (0..large).filter(|k| mask & (1 << k) != 0).collect();
        for p in permutations(small) {
            let total: f64 = (0..small).map(|i| at(i, chosen[p[i]])).sum();
            best = best.min(total);
        }
    }
    best
}
