use std::path::Path;

use pairdid::config::Config;
use pairdid::pipeline::{artifact, run_pipeline, run_stage, sha256_file, simulate, Manifest, Stage, Workspace};
use pairdid::synth::Missingness;
use pairdid::Error;

fn small_config() -> Config {
    let mut cfg = Config::preset("quickstart").unwrap();
    cfg.seed = 11;
    cfg.model.imputations = 6;
    cfg.scenario.sites_per_country = 16;
    cfg.scenario.births_per_cluster = 20;
    cfg.scenario.missingness = Missingness::covariate(0.3);
    cfg.sensitivity.grid = vec![[0.0, 0.0], [5.0, 10.0], [40.0, 20.0]];
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn pipeline_on_synthetic_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("data");
    let cfg = small_config();
    simulate(&cfg, &input).unwrap();
    let ws = Workspace::new(&input, dir.path().join("run"));
    let manifests = run_pipeline(&cfg, &ws).unwrap();
    assert_eq!(manifests.len(), Stage::ALL.len());

    for m in &manifests {
        for (name, hash) in &m.outputs {
            assert_eq!(&sha256_file(&ws.out(name)).unwrap(), hash, "{name}");
        }
    }
    // Every stage's inputs match the hashes recorded when they were produced.
    let produced: std::collections::BTreeMap<_, _> =
        manifests.iter().flat_map(|m| m.outputs.clone()).collect();
    for m in &manifests {
        for (name, hash) in &m.inputs {
            if let Some(h) = produced.get(name) {
                assert_eq!(h, hash, "{} input {name}", m.stage);
            }
        }
    }
    for name in [artifact::RESULTS, artifact::TABLE3, artifact::TABLE7, artifact::SENSITIVITY] {
        assert!(ws.out(name).exists(), "{name}");
    }
    let on_disk = Manifest::read(&ws.out(&Stage::Fit.manifest_file())).unwrap();
    assert_eq!(on_disk, manifests[5]);

    let sens = std::fs::read_to_string(ws.out(artifact::SENSITIVITY)).unwrap();
    assert_eq!(sens.lines().count(), 4);
    assert!(sens.contains("skipped"));

    // Same seed, fresh directory: identical bytes.
    let ws2 = Workspace::new(&input, dir.path().join("run2"));
    run_pipeline(&cfg, &ws2).unwrap();
    for name in [artifact::PAIRS, artifact::QUADRUPLES, artifact::IMPUTATIONS, artifact::RESULTS, artifact::SENSITIVITY] {
        assert_eq!(read(&ws.out(name)), read(&ws2.out(name)), "{name}");
    }
}

#[test]
fn fit_without_imputations_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("data");
    let cfg = small_config();
    simulate(&cfg, &input).unwrap();
    let ws = Workspace::new(&input, dir.path().join("run"));
    for s in [Stage::Ingest, Stage::MatchGeo, Stage::Classify, Stage::MatchCard] {
        run_stage(s, &cfg, &ws).unwrap();
    }
    let err = run_stage(Stage::Fit, &cfg, &ws).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains(artifact::IMPUTATIONS), "{err}");
    assert!(matches!(err, Error::MissingArtifact(_)));
}

#[test]
fn replicate_count_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("data");
    let mut cfg = small_config();
    simulate(&cfg, &input).unwrap();
    let ws = Workspace::new(&input, dir.path().join("run"));
    for s in [Stage::Ingest, Stage::MatchGeo, Stage::Classify, Stage::MatchCard, Stage::Impute] {
        run_stage(s, &cfg, &ws).unwrap();
    }
    cfg.model.imputations = 4;
    let err = run_stage(Stage::Fit, &cfg, &ws).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}
