use nalgebra::{DMatrix, DVector};
use pairdid::infer::{build_design, cell_means, did_contrasts, rubin_combine, Contrasts, MixedModel};
use pairdid::model::Regressor;
use pairdid::synth::{gen_mixed_data, MixedDataConfig, OutcomeEffects};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn mixed_cfg(clusters: usize, births: usize, sigma0: f64, sigma1: f64) -> MixedDataConfig {
    MixedDataConfig {
        clusters,
        births_per_cluster: births,
        effects: OutcomeEffects {
            sigma0,
            ..OutcomeEffects::default()
        },
        sigma1,
        unobserved: None,
    }
}

#[test]
fn no_cluster_effect_reduces_to_ols() {
    let cfg = mixed_cfg(60, 20, 0.0, 0.1);
    let (data, raw) = gen_mixed_data(&cfg, 3);
    // Centre the noise within clusters so the data carry no between-cluster
    // variance at all.
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
        .map(|(r, (y, l))| l + (y - l) - sums[r.cluster].0 / sums[r.cluster].1)
        .collect();

    let design = build_design(&data, None);
    let fit = MixedModel::new(&design).unwrap().fit(&y).unwrap();
    assert_eq!(fit.sigma0_sq, 0.0);

    let x: &DMatrix<f64> = &design.x;
    let ols = (x.transpose() * x)
        .cholesky()
        .unwrap()
        .solve(&(x.transpose() * DVector::from_column_slice(&y)));
    for (j, col) in design.columns.iter().enumerate() {
        assert!(
            (fit.coefficients[j] - ols[j]).abs() < 1e-6,
            "{}: {} vs {}",
            col.name(),
            fit.coefficients[j],
            ols[j]
        );
    }
}

#[test]
fn noiseless_cell_means_recover_the_contrasts() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    for trial in 0..5 {
        let cfg = mixed_cfg(40, 10, 0.0, 0.0);
        let (data, _) = gen_mixed_data(&cfg, trial);
        let cells: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.02..0.2));
        let y: Vec<f64> = data
            .records
            .iter()
            .map(|r| {
                let cell = match (r.high_low_group, r.late) {
                    (true, false) => cells[0],
                    (true, true) => cells[1],
                    (false, false) => cells[2],
                    (false, true) => cells[3],
                };
                cell + 0.001 * r.birth.mother_age_years as f64 - 0.01 * r.birth.married as f64
            })
            .collect();
        let design = build_design(&data, None);
        let fit = MixedModel::new(&design).unwrap().fit(&y).unwrap();
        let want = did_contrasts(cells[0], cells[1], cells[2], cells[3]);
        for (r, k) in [
            (Regressor::LowPrevalence, want.k1),
            (Regressor::Late, want.k2),
            (Regressor::HighLowGroup, want.k3),
        ] {
            let (est, _) = fit.coefficient(r).unwrap();
            assert!((est - k).abs() < 1e-9, "{}: {est} vs {k}", r.name());
        }
        let (age, _) = fit.coefficient(Regressor::MotherAge).unwrap();
        assert!((age - 0.001).abs() < 1e-9);
    }
}

#[test]
fn identically_zero_outcome() {
    let (data, _) = gen_mixed_data(&mixed_cfg(12, 5, 0.0, 0.0), 1);
    let design = build_design(&data, None);
    let fit = MixedModel::new(&design).unwrap().fit(&vec![0.0; data.records.len()]).unwrap();
    assert!(fit.coefficients.iter().all(|&c| c == 0.0));
    assert_eq!(fit.sigma0_sq, 0.0);
}

#[test]
fn reml_optimum_beats_random_probes() {
    let (data, y) = gen_mixed_data(&mixed_cfg(80, 15, 0.05, 0.2), 9);
    let model = MixedModel::new(&build_design(&data, None)).unwrap();
    let fit = model.fit(&y).unwrap();
    assert!(fit.converged);
    assert!(fit.sigma0_sq > 0.0 && fit.sigma1_sq > 0.0);
    assert!(fit.std_errors.iter().all(|&s| s > 0.0));
    let best = fit.reml_loglik;
    assert!((model.reml_loglik(&y, fit.sigma0_sq, fit.sigma1_sq) - best).abs() < 1e-8 * best.abs());

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100);
    for k in 0..100 {
        // Half the probes are wide, half hug the optimum.
        let (s0, s1) = if k % 2 == 0 {
            (10f64.powf(rng.random_range(-6.0..-1.0)), 10f64.powf(rng.random_range(-2.5..-0.5)))
        } else {
            (
                fit.sigma0_sq * rng.random_range(0.8..1.25),
                fit.sigma1_sq * rng.random_range(0.98..1.02),
            )
        };
        let ll = model.reml_loglik(&y, s0, s1);
        assert!(ll <= best + 1e-9 * best.abs(), "probe ({s0}, {s1}) gives {ll} > {best}");
    }
}

#[test]
fn collinear_columns_are_named() {
    let (mut data, _) = gen_mixed_data(&mixed_cfg(16, 6, 0.0, 0.1), 2);
    // Make `late` coincide with the group indicator.
    for r in &mut data.records {
        r.late = r.high_low_group;
        r.low_prevalence = false;
    }
    let design = build_design(&data, None);
    let err = MixedModel::new(&design).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let msg = err.to_string();
    assert!(msg.contains("late_year") || msg.contains("high_low_group"), "{msg}");
}

#[test]
fn naive_rates_example() {
    let k = did_contrasts(9.33, 7.52, 9.18, 9.06);
    assert!((k.k1 - -1.69).abs() < 1e-10);
    assert!((k.k2 - -0.12).abs() < 1e-10);
    assert!((k.k3 - 0.15).abs() < 1e-10);
    assert_eq!(did_contrasts(4.0, 4.0, 4.0, 4.0), Contrasts { k1: 0.0, k2: 0.0, k3: 0.0 });
}

proptest! {
    #[test]
    fn contrasts_round_trip(k0 in -1.0f64..1.0, k1 in -1.0f64..1.0, k2 in -1.0f64..1.0, k3 in -1.0f64..1.0) {
        let (a, b, c, d) = cell_means(k0, Contrasts { k1, k2, k3 });
        let back = did_contrasts(a, b, c, d);
        prop_assert!((back.k1 - k1).abs() < 1e-12);
        prop_assert!((back.k2 - k2).abs() < 1e-12);
        prop_assert!((back.k3 - k3).abs() < 1e-12);
    }

    #[test]
    fn rubin_invariants(
        pairs in prop::collection::vec((-5.0f64..5.0, 0.01f64..4.0), 2..30),
    ) {
        let est: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let var: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let p = rubin_combine(&est, &var).unwrap();
        prop_assert_eq!(p.estimate, est.iter().sum::<f64>() / est.len() as f64);
        prop_assert!(p.total >= p.within);
        prop_assert_eq!(p.total == p.within, p.between == 0.0);
        prop_assert!(p.ci_low <= p.estimate && p.estimate <= p.ci_high);
        prop_assert!(p.var_ratio() >= 0.0);
        prop_assert!(p.df >= (est.len() - 1) as f64);
        prop_assert!((0.0..=1.0).contains(&p.p_value));
    }
}
