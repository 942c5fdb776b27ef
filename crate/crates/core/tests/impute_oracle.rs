use nalgebra::{DMatrix, DVector};
use pairdid::impute::{draw_imputations, fit_imputation_model, ImputationTerm};
use pairdid::logistic::{fit, NewtonOptions};
use pairdid::model::ReportedSize;
use pairdid::stats::{log1p_exp, logistic};
use pairdid::synth::{gen_binary_data, BinaryData, Missingness, MixedDataConfig, OutcomeEffects};
use rand::{Rng, SeedableRng};

fn binary_cfg(clusters: usize, births: usize) -> MixedDataConfig {
    MixedDataConfig {
        clusters,
        births_per_cluster: births,
        effects: OutcomeEffects::default(),
        ..MixedDataConfig::default()
    }
}

#[test]
fn one_predictor_mode_matches_grid_search() {
    let xs = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0];
    let ys = [0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
    let s = 2.5;
    let objective = |b: f64| -> f64 {
        xs.iter().zip(&ys).map(|(x, y)| y * x * b - log1p_exp(x * b)).sum::<f64>() - (b / s).powi(2).ln_1p()
    };
    let search = |lo: f64, hi: f64, step: f64| -> f64 {
        let n = ((hi - lo) / step) as usize;
        (0..=n)
            .map(|i| lo + i as f64 * step)
            .fold((f64::NAN, f64::NEG_INFINITY), |(bb, bv), b| {
                let v = objective(b);
                if v > bv { (b, v) } else { (bb, bv) }
            })
            .0
    };
    let coarse = search(-10.0, 10.0, 1e-3);
    let grid = search(coarse - 2e-3, coarse + 2e-3, 1e-7);

    let x = DMatrix::from_column_slice(xs.len(), 1, &xs);
    let f = fit(&x, &ys, &[s], NewtonOptions::default()).unwrap();
    assert!((f.coefficients[0] - grid).abs() < 1e-4, "{} vs {grid}", f.coefficients[0]);
}

#[test]
fn separated_data_stay_finite() {
    let x = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0]);
    let f = fit(&x, &[0.0, 0.0, 1.0, 1.0], &[10.0, 2.5], NewtonOptions::default()).unwrap();
    assert!(f.coefficients.iter().all(|c| c.is_finite()));
    assert!(f.coefficients[1] > 0.0);
}

#[test]
fn no_data_gives_prior_mode() {
    let x = DMatrix::<f64>::zeros(0, 3);
    let f = fit(&x, &[], &[10.0, 2.5, 2.5], NewtonOptions::default()).unwrap();
    assert!(f.coefficients.iter().all(|&c| c == 0.0));
}

#[test]
fn monte_carlo_matches_posterior_mean_probability() {
    let data = gen_binary_data(&binary_cfg(12, 25), &Missingness::Mcar { rate: 0.3 }, 4).data;
    let model = fit_imputation_model(&data, false).unwrap();
    let draws = 10_000;
    let sets = draw_imputations(&model, &data, draws, 99).unwrap();
    let missing: Vec<usize> = (0..data.records.len()).filter(|&i| data.records[i].birth.lbw.is_none()).collect();
    for &i in missing.iter().take(5) {
        let ones = sets.iter().filter(|s| s.lbw[i] == 1).count() as f64;
        let frac = ones / draws as f64;
        let p = model.mean_probability(&data.records[i]);
        let sd = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((frac - p).abs() < 3.0 * sd, "record {i}: {frac} vs {p} (sd {sd})");
    }
}

#[test]
fn observed_outcomes_are_untouched_and_draws_are_binary() {
    let BinaryData { data, complete, .. } = gen_binary_data(&binary_cfg(16, 15), &Missingness::covariate(0.4), 5);
    let model = fit_imputation_model(&data, true).unwrap();
    for set in draw_imputations(&model, &data, 20, 1).unwrap() {
        for (i, r) in data.records.iter().enumerate() {
            assert!(set.lbw[i] <= 1);
            if let Some(v) = r.birth.lbw {
                assert_eq!(set.lbw[i], v);
                assert_eq!(v, complete[i]);
            }
        }
    }
}

#[test]
fn draws_do_not_depend_on_thread_count() {
    let data = gen_binary_data(&binary_cfg(16, 15), &Missingness::covariate(0.4), 6).data;
    let model = fit_imputation_model(&data, false).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| draw_imputations(&model, &data, 30, 8).unwrap())
    };
    assert_eq!(run(1), run(5));
}

#[test]
fn small_size_raises_the_probability() {
    let data = gen_binary_data(&binary_cfg(60, 30), &Missingness::Mcar { rate: 0.2 }, 7).data;
    let model = fit_imputation_model(&data, false).unwrap();
    let j = model.terms.iter().position(|&t| t == ImputationTerm::SmallSize).unwrap();
    // The generator makes small reported size far more common among lbw = 1.
    assert!(model.coefficients[j] > 0.0);

    let mut avg = data.records[0].clone();
    avg.birth.reported_size = Some(ReportedSize::Average);
    let mut small = avg.clone();
    small.birth.reported_size = Some(ReportedSize::Small);
    assert!(model.mean_probability(&small) > model.mean_probability(&avg));

    let (xa, xs) = (model.row(&avg), model.row(&small));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let sd = model.std_errors();
    for _ in 0..200 {
        let mut beta =
            DVector::from_fn(model.terms.len(), |k, _| model.coefficients[k] + 3.0 * sd[k] * rng.random_range(-1.0..1.0));
        beta[j] = rng.random_range(1e-3..3.0);
        assert!(logistic(xs.dot(&beta)) > logistic(xa.dot(&beta)));
    }
}

#[test]
fn one_outcome_class_is_rejected() {
    let mut data = gen_binary_data(&binary_cfg(8, 5), &Missingness::None, 1).data;
    for r in &mut data.records {
        r.birth.lbw = Some(0);
    }
    let err = fit_imputation_model(&data, false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
