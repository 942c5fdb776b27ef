//! Acceptance criteria 1-10. Prints one line per criterion and exits non-zero
//! if any fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{assignment_brute_force, card_brute_force, card_verify, random_card_instance};
use nalgebra::DVector;
use pairdid::assignment;
use pairdid::cardmatch::{cardinality_select, SolverOptions};
use pairdid::config::Config;
use pairdid::geomatch::haversine_km;
use pairdid::impute::{draw_imputations, fit_imputation_model};
use pairdid::infer::{build_design, did_contrasts, rubin_combine, run_primary_analysis, MixedModel};
use pairdid::model::{GeoPoint, Regressor, SensitivityParams};
use pairdid::pipeline::{read_k1_pp, run_pipeline, run_stage, simulate, Stage, Workspace};
use pairdid::sensan::{default_grid, sensitivity_fit, sensitivity_grid};
use pairdid::synth::{gen_binary_data, gen_mixed_data, Missingness, MixedDataConfig, OutcomeEffects};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "naive DiD contrast algebra", c1_contrasts),
        (2, "Rubin's rules", c2_rubin),
        (3, "assignment optimality", c3_assignment),
        (4, "cardinality matching", c4_cardinality),
        (5, "mixed model", c5_mixed_model),
        (6, "imputation bias under 47% MAR", c6_imputation),
        (7, "end-to-end CI coverage", c7_coverage),
        (8, "sensitivity consistency", c8_sensitivity),
        (9, "haversine closed forms", c9_geometry),
        (10, "stage determinism", c10_determinism),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        println!(
            "criterion {n:>2} {} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn c1_contrasts() -> Outcome {
    let k = did_contrasts(9.33, 7.52, 9.18, 9.06);
    outcome((k.k1 - -1.69).abs() < 1e-10, format!("k1 = {} pp", k.k1))
}

fn c2_rubin() -> Outcome {
    let p = rubin_combine(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
    let hand = (p.estimate - 1.0).abs() < 1e-12
        && (p.between - 2.0).abs() < 1e-12
        && (p.total - 4.0).abs() < 1e-12
        && (p.df - 16.0 / 9.0).abs() < 1e-12;
    let flat = rubin_combine(&[0.5, 0.5, 0.5], &[0.04, 0.04, 0.04]).unwrap();
    let z = Normal::standard().inverse_cdf(0.975);
    let normal = flat.between == 0.0
        && flat.df.is_infinite()
        && flat.total == flat.within
        && (flat.ci_high - (0.5 + z * 0.2)).abs() < 1e-12
        && (flat.ci_low - (0.5 - z * 0.2)).abs() < 1e-12;
    outcome(
        hand && normal,
        format!(
            "M=2: mean {} B {} T {} df {}; B=0: df {} CI [{:.6}, {:.6}]",
            p.estimate, p.between, p.total, p.df, flat.df, flat.ci_low, flat.ci_high
        ),
    )
}

fn c3_assignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..200 {
        let rows = rng.random_range(1..=7);
        let cols = rng.random_range(1..=7);
        // Integer costs keep both sums exact, so equality is meaningful.
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.random_range(0..100) as f64).collect())
            .collect();
        let a = assignment::solve(&cost);
        if a.pairs.len() != rows.min(cols) || a.total_cost != assignment_brute_force(&cost) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches}/200 instances differ from brute force"))
}

fn c4_cardinality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut wrong, mut unbalanced, mut total) = (0, 0, 0);
    for _ in 0..100 {
        let (t, c) = random_card_instance(&mut rng);
        let sel = cardinality_select(&t, &c, 0.1, &SolverOptions::default());
        if sel.len() != card_brute_force(&t, &c, 0.1) {
            wrong += 1;
        }
        if !card_verify(&t, &c, &sel.treated, &sel.control, 0.1) {
            unbalanced += 1;
        }
        total += sel.len();
    }
    outcome(
        wrong == 0 && unbalanced == 0,
        format!("{wrong}/100 wrong cardinality, {unbalanced}/100 fail std-diff check, {total} units selected"),
    )
}

fn c5_mixed_model() -> Outcome {
    // (a) No between-cluster variance: GLS must collapse to OLS.
    let cfg = MixedDataConfig {
        clusters: 80,
        births_per_cluster: 25,
        effects: OutcomeEffects {
            sigma0: 0.0,
            ..OutcomeEffects::default()
        },
        sigma1: 0.3,
        unobserved: None,
    };
    let (data, raw) = gen_mixed_data(&cfg, 50);
    let lin: Vec<f64> = data.records.iter().map(|r| cfg.effects.linear(r)).collect();
    let mut sums = vec![(0.0, 0.0); data.cluster_ids.len()];
    for (r, (y, l)) in data.records.iter().zip(raw.iter().zip(&lin)) {
        sums[r.cluster].0 += y - l;
        sums[r.cluster].1 += 1.0;
    }
    let y: Vec<f64> = data
        .records
        .iter()
        .zip(raw.iter().zip(&lin))
        .map(|(r, (y, _))| y - sums[r.cluster].0 / sums[r.cluster].1)
        .collect();
    let design = build_design(&data, None);
    let fit = MixedModel::new(&design).unwrap().fit(&y).unwrap();
    let x = &design.x;
    let ols: DVector<f64> = (x.transpose() * x)
        .cholesky()
        .unwrap()
        .solve(&(x.transpose() * DVector::from_column_slice(&y)));
    let ols_gap = fit
        .coefficients
        .iter()
        .zip(ols.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    // (b) 3-SE coverage of every coefficient over 100 replications.
    let cfg = MixedDataConfig {
        clusters: 200,
        births_per_cluster: 30,
        effects: OutcomeEffects {
            sigma0: 0.05,
            ..OutcomeEffects::default()
        },
        sigma1: 0.3,
        unobserved: None,
    };
    let hits: Vec<BTreeMap<Regressor, bool>> = (0..100u64)
        .into_par_iter()
        .map(|rep| {
            let (data, y) = gen_mixed_data(&cfg, 5_000 + rep);
            let fit = MixedModel::new(&build_design(&data, None)).unwrap().fit(&y).unwrap();
            fit.columns
                .iter()
                .enumerate()
                .map(|(j, &r)| {
                    let truth = cfg.effects.coefficient(r);
                    (r, (fit.coefficients[j] - truth).abs() <= 3.0 * fit.std_errors[j])
                })
                .collect()
        })
        .collect();
    let mut rates: BTreeMap<Regressor, f64> = BTreeMap::new();
    for h in &hits {
        for (r, ok) in h {
            *rates.entry(*r).or_default() += f64::from(u8::from(*ok)) / hits.len() as f64;
        }
    }
    let (worst, worst_rate) = rates
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(r, v)| (r.name(), *v))
        .unwrap();
    outcome(
        ols_gap < 1e-6 && worst_rate >= 0.95,
        format!(
            "max |GLS - OLS| = {ols_gap:.2e}; lowest 3-SE coverage {:.0}% ({worst})",
            100.0 * worst_rate
        ),
    )
}

fn c6_imputation() -> Outcome {
    let cfg = MixedDataConfig {
        clusters: 1000,
        births_per_cluster: 40,
        ..MixedDataConfig::default()
    };
    let truth = cfg.effects.k1;
    let reps = 100u64;
    let results: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let data = gen_binary_data(&cfg, &Missingness::covariate(0.47), 6_000 + rep).data;
            let missing = data.missing_count() as f64 / data.records.len() as f64;
            let model = fit_imputation_model(&data, true).unwrap();
            let sets = draw_imputations(&model, &data, 50, rep).unwrap();
            let k1 = run_primary_analysis(&data, &sets).unwrap().pooled.k1().unwrap().estimate;
            (k1, missing)
        })
        .collect();
    let errors: Vec<f64> = results.iter().map(|(k, _)| 100.0 * (k - truth)).collect();
    let bias = errors.iter().sum::<f64>() / reps as f64;
    let sd = (errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let missing = results.iter().map(|r| r.1).sum::<f64>() / reps as f64;
    outcome(
        bias.abs() < 0.3,
        format!(
            "bias {bias:+.3} pp (Monte-Carlo se {:.3}), mean missing {:.1}%",
            sd / (reps as f64).sqrt(),
            100.0 * missing
        ),
    )
}

fn coverage_config(seed: u64) -> Config {
    let mut cfg = Config::preset("quickstart").unwrap();
    cfg.seed = seed;
    cfg.model.imputations = 20;
    cfg.model.impute_with_design_indicators = true;
    cfg.scenario.missingness = Missingness::covariate(0.3);
    cfg.sensitivity.grid = vec![[0.0, 0.0]];
    cfg
}

fn c7_coverage() -> Outcome {
    let reps = 200u64;
    let truth_pp = 100.0 * OutcomeEffects::default().k1;
    let runs: Vec<Result<(f64, f64, f64), String>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let cfg = coverage_config(7_000 + rep);
            simulate(&cfg, &dir.path().join("data")).map_err(|e| e.to_string())?;
            let ws = Workspace::new(dir.path().join("data"), dir.path().join("run"));
            for s in [Stage::Ingest, Stage::MatchGeo, Stage::Classify, Stage::MatchCard, Stage::Impute, Stage::Fit] {
                run_stage(s, &cfg, &ws).map_err(|e| format!("{}: {e}", s.name()))?;
            }
            read_k1_pp(&ws.out(pairdid::pipeline::artifact::RESULTS)).map_err(|e| e.to_string())
        })
        .collect();
    let errors: Vec<&String> = runs.iter().filter_map(|r| r.as_ref().err()).collect();
    let ok: Vec<(f64, f64, f64)> = runs.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    let covered = ok.iter().filter(|(_, lo, hi)| *lo <= truth_pp && truth_pp <= *hi).count();
    let rate = covered as f64 / reps as f64;
    let mean = ok.iter().map(|r| r.0).sum::<f64>() / ok.len().max(1) as f64;
    let mut detail = format!(
        "coverage {:.1}% ({covered}/{reps}), mean k1 {mean:.2} pp vs {truth_pp} pp",
        100.0 * rate
    );
    if let Some(e) = errors.first() {
        detail += &format!("; {} runs failed, first: {e}", errors.len());
    }
    outcome(errors.is_empty() && (0.90..=0.98).contains(&rate), detail)
}

fn c8_sensitivity() -> Outcome {
    let cfg = MixedDataConfig {
        clusters: 160,
        births_per_cluster: 25,
        ..MixedDataConfig::default()
    };
    let data = gen_binary_data(&cfg, &Missingness::covariate(0.47), 8).data;
    let model = fit_imputation_model(&data, true).unwrap();
    let sets = draw_imputations(&model, &data, 20, 8).unwrap();
    let primary = *run_primary_analysis(&data, &sets).unwrap().pooled.k1().unwrap();
    let null = sensitivity_fit(&data, &sets, SensitivityParams::new(0.0, 0.0).unwrap(), 8).unwrap();
    let gap = (null.k1.estimate - primary.estimate).abs();
    let se = null.k1.std_error();

    let grid = default_grid();
    let a = sensitivity_grid(&data, &sets, &grid, 8).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(2)
        .build()
        .unwrap()
        .install(|| sensitivity_grid(&data, &sets, &grid, 8).unwrap());
    let complete = a.len() == 32 && a.iter().all(|r| r.fit.is_ok());
    outcome(
        gap <= 3.0 * se && complete && a == b,
        format!(
            "(0,0) vs primary: |{:.3} - {:.3}| pp = {:.3} pp <= 3 x {:.3}; grid rows {}, repeat identical: {}",
            100.0 * null.k1.estimate,
            100.0 * primary.estimate,
            100.0 * gap,
            100.0 * se,
            a.len(),
            a == b
        ),
    )
}

fn c9_geometry() -> Outcome {
    let p = |lat, lon| GeoPoint::new(lat, lon).unwrap();
    let o = p(0.0, 0.0);
    let d = [haversine_km(o, o), haversine_km(o, p(0.0, 180.0)), haversine_km(o, p(0.0, 1.0))];
    let want = [0.0, 20015.09, 111.19];
    let pass = d.iter().zip(want).all(|(a, b)| (a - b).abs() < 0.01);
    outcome(pass, format!("{:.4}, {:.4}, {:.4} km", d[0], d[1], d[2]))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = coverage_config(10);
    cfg.sensitivity.grid = default_grid().into_iter().map(|(a, b)| [a, b]).collect();
    cfg.scenario.sites_per_country = 20;
    simulate(&cfg, &dir.path().join("data")).unwrap();
    let mut snaps = Vec::new();
    for (k, threads) in [1usize, 4, 4, 7].into_iter().enumerate() {
        let ws = Workspace::new(dir.path().join("data"), dir.path().join(format!("run{k}")));
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_pipeline(&cfg, &ws))
            .unwrap();
        snaps.push(snapshot(&ws.out_dir));
    }
    let differing: Vec<&String> = snaps[0]
        .iter()
        .filter(|(name, bytes)| snaps[1..].iter().any(|s| s.get(*name) != Some(bytes)))
        .map(|(name, _)| name)
        .collect();
    let same_files = snaps.iter().all(|s| s.keys().eq(snaps[0].keys()));
    outcome(
        differing.is_empty() && same_files,
        format!(
            "{} artifacts compared across 1/4/4/7 threads, {} differ",
            snaps[0].len(),
            differing.len()
        ),
    )
}
