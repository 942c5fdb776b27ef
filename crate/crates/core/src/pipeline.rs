//! Stage runner. Each stage reads its inputs from disk, writes its artifacts
//! to the output directory and records a manifest with the SHA-256 of every
//! input and output, the seed and the configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cardmatch::cardinality_match;
use crate::classify::{category_counts, pair_category};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geomatch::match_all_countries;
use crate::impute::{draw_imputations, fit_imputation_model, ImputedSet};
use crate::infer::{build_analysis_data, run_primary_analysis, AnalysisData};
use crate::ingest::{aggregate_cluster_covariates, filter_births, select_study_years, YearSelection};
use crate::io::{self, fmt_f64, parse_cell, write_csv, Issue, Table};
use crate::model::{ClusterPair, ClusterRecord, PairCategory, Quadruple, Regressor, Role};
use crate::sensan::sensitivity_grid;
use crate::stats::{correlation, mean};
use crate::synth::gen_scenario;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    MatchGeo,
    Classify,
    MatchCard,
    Impute,
    Fit,
    Sensitivity,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::MatchGeo,
        Stage::Classify,
        Stage::MatchCard,
        Stage::Impute,
        Stage::Fit,
        Stage::Sensitivity,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::MatchGeo => "match-geo",
            Stage::Classify => "classify",
            Stage::MatchCard => "match-card",
            Stage::Impute => "impute",
            Stage::Fit => "fit",
            Stage::Sensitivity => "sensitivity",
            Stage::Report => "report",
        }
    }

    pub fn manifest_file(self) -> String {
        format!("manifest_{}.json", self.name().replace('-', "_"))
    }
}

pub mod artifact {
    pub const CLUSTERS: &str = "ingested_clusters.csv";
    pub const PREVALENCE: &str = "ingested_prevalence.csv";
    pub const BIRTHS: &str = "ingested_births.csv";
    pub const INGEST_REPORT: &str = "ingest_report.csv";
    pub const PAIRS: &str = "pairs.csv";
    pub const CLASSIFIED: &str = "classified_pairs.csv";
    pub const QUADRUPLES: &str = "quadruples.csv";
    pub const BALANCE: &str = "balance.csv";
    pub const IMPUTATION_MODEL: &str = "imputation_model.csv";
    pub const IMPUTATIONS: &str = "imputations.csv";
    pub const RESULTS: &str = "results.csv";
    pub const DIAGNOSTICS: &str = "diagnostics.csv";
    pub const DID_SUMMARY: &str = "did_summary.csv";
    pub const SENSITIVITY: &str = "sensitivity.csv";
    pub const TABLE3: &str = "table3.csv";
    pub const TABLE4: &str = "table4.csv";
    pub const TABLE5: &str = "table5.csv";
    pub const TABLE7: &str = "table7.csv";
}

#[derive(Debug, Clone)]
pub struct Workspace {
    /// Directory with clusters.csv, prevalence.csv, births.csv and the
    /// optional availability.csv and individuals.csv.
    pub input_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Workspace {
    pub fn new(input_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            input_dir: input_dir.into(),
            out_dir: out_dir.into(),
        }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn input(&self, name: &str) -> PathBuf {
        self.input_dir.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stage: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// File name → SHA-256 (hex).
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub notes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn file_key(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned())
}

fn write_manifest(
    stage: &str,
    cfg: &Config,
    dir: &Path,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    notes: BTreeMap<String, String>,
) -> Result<Manifest> {
    let hash_all = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
        paths.iter().map(|p| Ok((file_key(p), sha256_file(p)?))).collect()
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        stage: stage.to_string(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
        inputs: hash_all(inputs)?,
        outputs: hash_all(outputs)?,
        notes,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))? + "\n";
    let name = format!("manifest_{}.json", stage.replace('-', "_"));
    io::write_text(&dir.join(name), &text)?;
    Ok(manifest)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn cell<T: std::str::FromStr>(t: &Table, line: u64, row: &csv::StringRecord, column: &str) -> Result<T> {
    parse_cell(t.get(row, column), column).map_err(|m| Error::Validation(format!("{}:{line}: {m}", t.file)))
}

pub fn run_stage(stage: Stage, cfg: &Config, ws: &Workspace) -> Result<Manifest> {
    log::info!("stage {}", stage.name());
    match stage {
        Stage::Ingest => ingest(cfg, ws),
        Stage::MatchGeo => match_geo(cfg, ws),
        Stage::Classify => classify(cfg, ws),
        Stage::MatchCard => match_card(cfg, ws),
        Stage::Impute => impute(cfg, ws),
        Stage::Fit => fit(cfg, ws),
        Stage::Sensitivity => sensitivity(cfg, ws),
        Stage::Report => report(cfg, ws),
    }
}

/// Runs every stage in order.
pub fn run_pipeline(cfg: &Config, ws: &Workspace) -> Result<Vec<Manifest>> {
    Stage::ALL.iter().map(|&s| run_stage(s, cfg, ws)).collect()
}

/// Writes a synthetic scenario (from `cfg.scenario` and `cfg.seed`) to `dir`.
pub fn simulate(cfg: &Config, dir: &Path) -> Result<Manifest> {
    let scenario = gen_scenario(&cfg.scenario, cfg.seed)?;
    scenario.write(dir)?;
    let outputs: Vec<PathBuf> = ["clusters.csv", "prevalence.csv", "births.csv", "truth.json"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    let notes = BTreeMap::from([
        ("births".to_string(), scenario.truth.births.to_string()),
        ("missing_outcomes".to_string(), scenario.truth.missing_outcomes.to_string()),
    ]);
    write_manifest("simulate", cfg, dir, &[], &outputs, notes)
}

fn ingest(cfg: &Config, ws: &Workspace) -> Result<Manifest> {
    let clusters_in = require(ws.input("clusters.csv"))?;
    let prevalence_in = require(ws.input("prevalence.csv"))?;
    let births_in = require(ws.input("births.csv"))?;
    let mut inputs = vec![clusters_in.clone(), prevalence_in.clone(), births_in.clone()];

    let parsed = io::read_cluster_tables(&clusters_in, &prevalence_in)?;
    let mut issues: Vec<Issue> = parsed.issues;
    let mut clusters = parsed.records;

    let individuals_in = ws.input("individuals.csv");
    if individuals_in.exists() {
        inputs.push(individuals_in.clone());
        let ind = io::read_individuals(&individuals_in)?;
        issues.extend(ind.issues);
        let mut rows: BTreeMap<String, Vec<crate::ingest::IndividualRow>> = BTreeMap::new();
        for (id, row) in ind.records {
            rows.entry(id).or_default().push(row);
        }
        for c in &mut clusters {
            if let Some(r) = rows.get(&c.cluster_id) {
                c.covariates = aggregate_cluster_covariates(&c.cluster_id, r)?;
            }
        }
    }

    let availability_in = ws.input("availability.csv");
    if availability_in.exists() {
        inputs.push(availability_in.clone());
        let selection = select_study_years(&io::read_availability(&availability_in)?);
        clusters.retain(|c| {
            let keep = match selection.get(&c.country) {
                Some(YearSelection::Selected(y)) => match c.role {
                    Role::Early => c.survey_year == y.early_year,
                    Role::Late => c.survey_year == y.late_year,
                },
                _ => false,
            };
            if !keep {
                issues.push(Issue {
                    file: "availability.csv".into(),
                    line: 0,
                    entity: c.cluster_id.clone(),
                    message: format!("survey year {} not selected for {}; cluster dropped", c.survey_year, c.country),
                });
            }
            keep
        });
    }

    if clusters.is_empty() {
        let first = issues.first().map_or(String::new(), |i| format!("; first issue: {}:{}: {}", i.file, i.line, i.message));
        return Err(Error::Validation(format!("no usable clusters after ingest{first}")));
    }
    clusters.sort_by(|a, b| a.cluster_id.cmp(&b.cluster_id));
    let ids: std::collections::BTreeSet<&str> = clusters.iter().map(|c| c.cluster_id.as_str()).collect();
    let births_parsed = io::read_births(&births_in)?;
    issues.extend(births_parsed.issues);
    let mut orphans = 0;
    let births: Vec<_> = births_parsed
        .records
        .into_iter()
        .filter(|b| {
            let known = ids.contains(b.cluster_id.as_str());
            if !known {
                orphans += 1;
            }
            known
        })
        .collect();
    let (mut births, counts) = filter_births(&births, cfg.model.birth_filter);
    births.sort_by(|a, b| (&a.cluster_id, &a.child_id).cmp(&(&b.cluster_id, &b.child_id)));

    let out_clusters = ws.out(artifact::CLUSTERS);
    let out_prev = ws.out(artifact::PREVALENCE);
    let out_births = ws.out(artifact::BIRTHS);
    let out_report = ws.out(artifact::INGEST_REPORT);
    io::write_clusters(&out_clusters, &clusters)?;
    io::write_prevalence(&out_prev, &clusters)?;
    io::write_births(&out_births, &births)?;

    issues.sort();
    let mut rows: Vec<Vec<String>> = vec![
        count_row("clusters_kept", clusters.len()),
        count_row("births_outside_clusters", orphans),
        count_row("births_input", counts.input),
        count_row("births_multiple", counts.multiple_births),
        count_row("births_missing_reported_size", counts.missing_reported_size),
        count_row("births_analysis_filter", counts.analysis_filter),
        count_row("births_kept", counts.kept),
        count_row("births_missing_lbw", births.iter().filter(|b| b.lbw.is_none()).count()),
    ];
    for i in &issues {
        rows.push(vec![
            "issue".into(),
            i.file.clone(),
            i.line.to_string(),
            i.entity.clone(),
            i.message.clone(),
        ]);
    }
    write_csv(&out_report, &["kind", "file", "line", "entity", "message"], rows)?;
    let notes = BTreeMap::from([
        ("issues".to_string(), issues.len().to_string()),
        ("clusters".to_string(), clusters.len().to_string()),
        ("births".to_string(), births.len().to_string()),
    ]);
    write_manifest(
        Stage::Ingest.name(),
        cfg,
        &ws.out_dir,
        &inputs,
        &[out_clusters, out_prev, out_births, out_report],
        notes,
    )
}

fn count_row(name: &str, n: usize) -> Vec<String> {
    vec!["count".into(), String::new(), String::new(), name.into(), n.to_string()]
}

fn load_clusters(ws: &Workspace) -> Result<(BTreeMap<String, ClusterRecord>, Vec<PathBuf>)> {
    let c = require(ws.out(artifact::CLUSTERS))?;
    let p = require(ws.out(artifact::PREVALENCE))?;
    let parsed = io::read_cluster_tables(&c, &p)?;
    if let Some(i) = parsed.issues.iter().find(|i| !i.message.contains("kept")) {
        return Err(Error::Validation(format!(
            "{}:{}: {} ({}); rerun ingest",
            i.file, i.line, i.message, i.entity
        )));
    }
    Ok((
        parsed.records.into_iter().map(|r| (r.cluster_id.clone(), r)).collect(),
        vec![c, p],
    ))
}

fn lookup<'a>(clusters: &'a BTreeMap<String, ClusterRecord>, id: &str, file: &str) -> Result<&'a ClusterRecord> {
    clusters
        .get(id)
        .ok_or_else(|| Error::Validation(format!("{file}: cluster {id} is not in {}", artifact::CLUSTERS)))
}

fn match_geo(cfg: &Config, ws: &Workspace) -> Result<Manifest> {
    let (clusters, inputs) = load_clusters(ws)?;
    let records: Vec<ClusterRecord> = clusters.into_values().collect();
    let pairs = match_all_countries(&records, &cfg.caliper);
    let out = ws.out(artifact::PAIRS);
    write_csv(
        &out,
        &["country", "early_id", "late_id", "rank_distance", "haversine_km"],
        pairs.iter().map(|p| {
            vec![
                p.country.clone(),
                p.early_id.clone(),
                p.late_id.clone(),
                fmt_f64(p.rank_distance),
                fmt_f64(p.haversine_km),
            ]
        }),
    )?;
    let notes = BTreeMap::from([("pairs".to_string(), pairs.len().to_string())]);
    write_manifest(Stage::MatchGeo.name(), cfg, &ws.out_dir, &inputs, &[out], notes)
}

fn classify(cfg: &Config, ws: &Workspace) -> Result<Manifest> {
    let (clusters, mut inputs) = load_clusters(ws)?;
    let pairs_in = require(ws.out(artifact::PAIRS))?;
    inputs.push(pairs_in.clone());
    let t = Table::read(&pairs_in)?;
    t.require(&["country", "early_id", "late_id", "rank_distance", "haversine_km"])?;
    let mut rows = Vec::new();
    let mut categories = Vec::new();
    for (line, row) in &t.rows {
        let early = lookup(&clusters, t.get(row, "early_id"), &t.file)?;
        let late = lookup(&clusters, t.get(row, "late_id"), &t.file)?;
        let cat = pair_category(early, late, &cfg.model)?;
        let rank: f64 = cell(&t, *line, row, "rank_distance")?;
        let km: f64 = cell(&t, *line, row, "haversine_km")?;
        categories.push(cat);
        rows.push(vec![
            t.get(row, "country").to_string(),
            early.cluster_id.clone(),
            late.cluster_id.clone(),
            fmt_f64(rank),
            fmt_f64(km),
            io::fmt_opt(early.assigned_pfpr()),
            io::fmt_opt(late.assigned_pfpr()),
            cat.as_str().to_string(),
        ]);
    }
    let out = ws.out(artifact::CLASSIFIED);
    write_csv(
        &out,
        &[
            "country",
            "early_id",
            "late_id",
            "rank_distance",
            "haversine_km",
            "early_pfpr",
            "late_pfpr",
            "category",
        ],
        rows,
    )?;
    let notes = category_counts(&categories)
        .into_iter()
        .map(|(c, n)| (c.as_str().to_string(), n.to_string()))
        .collect();
    write_manifest(Stage::Classify.name(), cfg, &ws.out_dir, &inputs, &[out], notes)
}

fn load_pairs(ws: &Workspace, clusters: &BTreeMap<String, ClusterRecord>) -> Result<(Vec<ClusterPair>, PathBuf)> {
    let path = require(ws.out(artifact::CLASSIFIED))?;
    let t = Table::read(&path)?;
    t.require(&["early_id", "late_id", "haversine_km", "category"])?;
    let mut pairs = Vec::new();
    for (line, row) in &t.rows {
        let early = lookup(clusters, t.get(row, "early_id"), &t.file)?.clone();
        let late = lookup(clusters, t.get(row, "late_id"), &t.file)?.clone();
        let category = PairCategory::parse(t.get(row, "category"))
            .ok_or_else(|| Error::Validation(format!("{}:{line}: unknown category '{}'", t.file, t.get(row, "category"))))?;
        let km: f64 = cell(&t, *line, row, "haversine_km")?;
        pairs.push(ClusterPair::new(early, late, category, km)?);
    }
    Ok((pairs, path))
}

fn match_card(cfg: &Config, ws: &Workspace) -> Result<Manifest> {
    let (clusters, mut inputs) = load_clusters(ws)?;
    let (pairs, path) = load_pairs(ws, &clusters)?;
    inputs.push(path);
    let treated: Vec<ClusterPair> = pairs.iter().filter(|p| p.category == PairCategory::HighLow).cloned().collect();
    let control: Vec<ClusterPair> = pairs.iter().filter(|p| p.category == PairCategory::HighHigh).cloned().collect();
    let m = cardinality_match(&treated, &control, cfg.model.balance_threshold, &cfg.solver)?;

    let out_q = ws.out(artifact::QUADRUPLES);
    write_csv(
        &out_q,
        &["quadruple", "treated_early_id", "treated_late_id", "control_early_id", "control_late_id"],
        m.quadruples.iter().enumerate().map(|(k, q)| {
            vec![
                (k + 1).to_string(),
                q.treated.early.cluster_id.clone(),
                q.treated.late.cluster_id.clone(),
                q.control.early.cluster_id.clone(),
                q.control.late.cluster_id.clone(),
            ]
        }),
    )?;
    let out_b = ws.out(artifact::BALANCE);
    write_csv(
        &out_b,
        &[
            "covariate",
            "treated_mean_before",
            "control_mean_before",
            "treated_mean_after",
            "control_mean_after",
            "std_diff_before",
            "std_diff_after",
        ],
        m.balance.rows.iter().map(|r| {
            vec![
                r.covariate.clone(),
                fmt_f64(r.treated_mean_before),
                fmt_f64(r.control_mean_before),
                io::fmt_opt(r.treated_mean_after),
                io::fmt_opt(r.control_mean_after),
                fmt_f64(r.std_diff_before),
                io::fmt_opt(r.std_diff_after),
            ]
        }),
    )?;
    let notes = BTreeMap::from([
        ("treated_pairs".to_string(), treated.len().to_string()),
        ("control_pairs".to_string(), control.len().to_string()),
        ("quadruples".to_string(), m.quadruples.len().to_string()),
        ("proven_optimal".to_string(), m.proven_optimal.to_string()),
    ]);
    if !m.proven_optimal {
        log::warn!("cardinality match is feasible but not proven optimal within the node budget");
    }
    write_manifest(Stage::MatchCard.name(), cfg, &ws.out_dir, &inputs, &[out_q, out_b], notes)
}

fn load_quadruples(
    ws: &Workspace,
    clusters: &BTreeMap<String, ClusterRecord>,
) -> Result<(Vec<Quadruple>, Vec<PathBuf>)> {
    let (pairs, pairs_path) = load_pairs(ws, clusters)?;
    let by_early: BTreeMap<&str, &ClusterPair> = pairs.iter().map(|p| (p.early.cluster_id.as_str(), p)).collect();
    let path = require(ws.out(artifact::QUADRUPLES))?;
    let t = Table::read(&path)?;
    t.require(&["treated_early_id", "treated_late_id", "control_early_id", "control_late_id"])?;
    let find = |early: &str, late: &str| -> Result<ClusterPair> {
        match by_early.get(early) {
            Some(p) if p.late.cluster_id == late => Ok((*p).clone()),
            _ => Err(Error::Validation(format!(
                "{}: pair ({early}, {late}) is not in {}",
                t.file,
                artifact::CLASSIFIED
            ))),
        }
    };
    let mut quads = Vec::new();
    for (_, row) in &t.rows {
        let treated = find(t.get(row, "treated_early_id"), t.get(row, "treated_late_id"))?;
        let control = find(t.get(row, "control_early_id"), t.get(row, "control_late_id"))?;
        quads.push(Quadruple::new(treated, control)?);
    }
    Ok((quads, vec![pairs_path, path]))
}

/// Analysis records of the matched clusters plus the files they came from.
fn load_analysis(cfg: &Config, ws: &Workspace) -> Result<(AnalysisData, Vec<Quadruple>, Vec<PathBuf>)> {
    let (clusters, mut inputs) = load_clusters(ws)?;
    let (quads, more) = load_quadruples(ws, &clusters)?;
    inputs.extend(more);
    let births_path = require(ws.out(artifact::BIRTHS))?;
    let births = io::read_births(&births_path)?;
    if let Some(i) = births.issues.first() {
        return Err(Error::Validation(format!("{}:{}: {} ({})", i.file, i.line, i.message, i.entity)));
    }
    inputs.push(births_path);
    if quads.is_empty() {
        return Err(Error::Validation("no matched quadruples; nothing to analyse".into()));
    }
    let data = build_analysis_data(&quads, &births.records, cfg.model.cutoff_low)?;
    Ok((data, quads, inputs))
}

fn impute(cfg: &Config, ws: &Workspace) -> Result<Manifest> {
    let (data, _, inputs) = load_analysis(cfg, ws)?;
    let model = fit_imputation_model(&data, cfg.model.impute_with_design_indicators)?;
    let sets = draw_imputations(&model, &data, cfg.model.imputations, cfg.seed)?;

    let out_model = ws.out(artifact::IMPUTATION_MODEL);
    let se = model.std_errors();
    write_csv(
        &out_model,
        &["term", "estimate", "std_error", "prior_scale"],
        model.terms.iter().enumerate().map(|(j, t)| {
            vec![
                t.name().to_string(),
                fmt_f64(model.coefficients[j]),
                fmt_f64(se[j]),
                fmt_f64(model.prior_scales[j]),
            ]
        }),
    )?;
    let missing: Vec<usize> = (0..data.records.len()).filter(|&i| data.records[i].birth.lbw.is_none()).collect();
    let out_imp = ws.out(artifact::IMPUTATIONS);
    let records = &data.records;
    write_csv(
        &out_imp,
        &["replicate", "child_id", "lbw"],
        sets.iter().flat_map(|s| {
            missing.iter().map(move |&i| {
                vec![
                    s.replicate.to_string(),
                    records[i].birth.child_id.clone(),
                    s.lbw[i].to_string(),
                ]
            })
        }),
    )?;
    let notes = BTreeMap::from([
        ("records".to_string(), data.records.len().to_string()),
        ("missing".to_string(), missing.len().to_string()),
        ("replicates".to_string(), sets.len().to_string()),
        (
            "dropped_terms".to_string(),
            model.dropped.iter().map(|t| t.name()).collect::<Vec<_>>().join(" "),
        ),
    ]);
    write_manifest(Stage::Impute.name(), cfg, &ws.out_dir, &inputs, &[out_model, out_imp], notes)
}

fn load_imputations(cfg: &Config, ws: &Workspace, data: &AnalysisData) -> Result<(Vec<ImputedSet>, PathBuf)> {
    let path = require(ws.out(artifact::IMPUTATIONS))?;
    let t = Table::read(&path)?;
    t.require(&["replicate", "child_id", "lbw"])?;
    let m = cfg.model.imputations;
    let index: BTreeMap<&str, usize> = data
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.birth.child_id.as_str(), i))
        .collect();
    let base: Vec<u8> = data.records.iter().map(|r| r.birth.lbw.unwrap_or(0)).collect();
    let mut sets: Vec<ImputedSet> = (1..=m).map(|k| ImputedSet { replicate: k, lbw: base.clone() }).collect();
    let mut filled = vec![0usize; m];
    for (line, row) in &t.rows {
        let k: usize = cell(&t, *line, row, "replicate")?;
        if k == 0 || k > m {
            return Err(Error::Validation(format!(
                "{}:{line}: replicate {k} outside 1..={m}; rerun impute with the current config",
                t.file
            )));
        }
        let id = t.get(row, "child_id");
        let &i = index
            .get(id)
            .ok_or_else(|| Error::Validation(format!("{}:{line}: child {id} is not in the analysis records", t.file)))?;
        if data.records[i].birth.lbw.is_some() {
            return Err(Error::Validation(format!("{}:{line}: child {id} has an observed outcome", t.file)));
        }
        let v: u8 = cell(&t, *line, row, "lbw")?;
        if v > 1 {
            return Err(Error::Validation(format!("{}:{line}: lbw {v} is not 0/1", t.file)));
        }
        sets[k - 1].lbw[i] = v;
        filled[k - 1] += 1;
    }
    let missing = data.missing_count();
    if let Some(k) = filled.iter().position(|&f| f != missing) {
        return Err(Error::Validation(format!(
            "{}: replicate {} fills {} of {missing} missing outcomes; rerun impute",
            t.file,
            k + 1,
            filled[k]
        )));
    }
    Ok((sets, path))
}

fn fit(cfg: &Config, ws: &Workspace) -> Result<Manifest> {
    let (data, _, mut inputs) = load_analysis(cfg, ws)?;
    let (sets, path) = load_imputations(cfg, ws, &data)?;
    inputs.push(path);
    let analysis = run_primary_analysis(&data, &sets)?;

    let out_results = ws.out(artifact::RESULTS);
    write_csv(
        &out_results,
        &["regressor", "label", "estimate_pp", "ci_low_pp", "ci_high_pp", "p_value", "df"],
        analysis.pooled.rows.iter().map(|r| {
            let p = &r.pooled;
            vec![
                r.regressor.name().to_string(),
                r.regressor.label().to_string(),
                fmt_f64(100.0 * p.estimate),
                fmt_f64(100.0 * p.ci_low),
                fmt_f64(100.0 * p.ci_high),
                fmt_f64(p.p_value),
                fmt_f64(p.df),
            ]
        }),
    )?;
    let out_diag = ws.out(artifact::DIAGNOSTICS);
    write_csv(
        &out_diag,
        &["regressor", "estimate", "between_var", "within_var", "total_var", "var_ratio", "df"],
        analysis.pooled.rows.iter().map(|r| {
            let p = &r.pooled;
            vec![
                r.regressor.name().to_string(),
                fmt_f64(p.estimate),
                fmt_f64(p.between),
                fmt_f64(p.within),
                fmt_f64(p.total),
                fmt_f64(p.var_ratio()),
                fmt_f64(p.df),
            ]
        }),
    )?;
    let out_did = ws.out(artifact::DID_SUMMARY);
    let n = &analysis.naive;
    let k1 = analysis.pooled.k1()?;
    let mut rows = vec![
        vec!["rate_high_low_early_pct".into(), fmt_f64(n.rates_pct[0])],
        vec!["rate_high_low_late_pct".into(), fmt_f64(n.rates_pct[1])],
        vec!["rate_high_high_early_pct".into(), fmt_f64(n.rates_pct[2])],
        vec!["rate_high_high_late_pct".into(), fmt_f64(n.rates_pct[3])],
        vec!["observed_high_low_early".into(), n.counts[0].to_string()],
        vec!["observed_high_low_late".into(), n.counts[1].to_string()],
        vec!["observed_high_high_early".into(), n.counts[2].to_string()],
        vec!["observed_high_high_late".into(), n.counts[3].to_string()],
        vec!["naive_k1_pp".into(), fmt_f64(n.contrasts.k1)],
        vec!["naive_k2_pp".into(), fmt_f64(n.contrasts.k2)],
        vec!["naive_k3_pp".into(), fmt_f64(n.contrasts.k3)],
        vec!["model_k1_pp".into(), fmt_f64(100.0 * k1.estimate)],
        vec!["covariate_drift_pp".into(), fmt_f64(analysis.drift.total_pp)],
    ];
    for (r, v) in &analysis.drift.terms {
        rows.push(vec![format!("covariate_drift_pp:{}", r.name()), fmt_f64(*v)]);
    }
    write_csv(&out_did, &["quantity", "value"], rows)?;
    let notes = BTreeMap::from([
        ("replicates".to_string(), sets.len().to_string()),
        (
            "dropped_regressors".to_string(),
            analysis.dropped.iter().map(|r| r.name()).collect::<Vec<_>>().join(" "),
        ),
    ]);
    write_manifest(
        Stage::Fit.name(),
        cfg,
        &ws.out_dir,
        &inputs,
        &[out_results, out_diag, out_did],
        notes,
    )
}

fn sensitivity(cfg: &Config, ws: &Workspace) -> Result<Manifest> {
    let (data, _, mut inputs) = load_analysis(cfg, ws)?;
    let (sets, path) = load_imputations(cfg, ws, &data)?;
    inputs.push(path);
    let rows = sensitivity_grid(&data, &sets, &cfg.sensitivity_grid(), cfg.seed)?;
    let out = ws.out(artifact::SENSITIVITY);
    let mut skipped = 0;
    write_csv(
        &out,
        &[
            "case",
            "p1",
            "p2",
            "estimate_pp",
            "ci_low_pp",
            "ci_high_pp",
            "p_value",
            "lambda_pp",
            "lambda_p_value",
            "status",
        ],
        rows.iter().map(|r| {
            let case = r.case.map_or(String::new(), |c| c.to_string());
            match &r.fit {
                Ok(f) => vec![
                    case,
                    fmt_f64(r.p1),
                    fmt_f64(r.p2),
                    fmt_f64(100.0 * f.k1.estimate),
                    fmt_f64(100.0 * f.k1.ci_low),
                    fmt_f64(100.0 * f.k1.ci_high),
                    fmt_f64(f.k1.p_value),
                    fmt_f64(100.0 * f.lambda.estimate),
                    fmt_f64(f.lambda.p_value),
                    "ok".into(),
                ],
                Err(msg) => {
                    skipped += 1;
                    let mut v = vec![case, fmt_f64(r.p1), fmt_f64(r.p2)];
                    v.extend(std::iter::repeat_n(String::new(), 6));
                    v.push(format!("skipped: {msg}"));
                    v
                }
            }
        }),
    )?;
    let notes = BTreeMap::from([
        ("grid_points".to_string(), rows.len().to_string()),
        ("skipped".to_string(), skipped.to_string()),
    ]);
    write_manifest(Stage::Sensitivity.name(), cfg, &ws.out_dir, &inputs, &[out], notes)
}

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

fn fmt_p(p: f64) -> String {
    let stars = if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    };
    if p < 0.001 {
        format!("<0.001{stars}")
    } else {
        format!("{p:.3}{stars}")
    }
}

fn read_f64(t: &Table, line: u64, row: &csv::StringRecord, column: &str) -> Result<Option<f64>> {
    io::parse_opt(t.get(row, column), column).map_err(|m| Error::Validation(format!("{}:{line}: {m}", t.file)))
}

/// Regenerates the table-format CSVs from stage artifacts.
fn report(cfg: &Config, ws: &Workspace) -> Result<Manifest> {
    let (clusters, mut inputs) = load_clusters(ws)?;
    let (quads, more) = load_quadruples(ws, &clusters)?;
    inputs.extend(more);
    let results_in = require(ws.out(artifact::RESULTS))?;
    let balance_in = require(ws.out(artifact::BALANCE))?;
    inputs.push(results_in.clone());
    inputs.push(balance_in.clone());
    let mut outputs = Vec::new();

    // Table 3: estimates with CI and p-value.
    let t = Table::read(&results_in)?;
    t.require(&["regressor", "estimate_pp", "ci_low_pp", "ci_high_pp", "p_value"])?;
    let mut rows = Vec::new();
    for (line, row) in &t.rows {
        let reg = t.get(row, "regressor");
        if reg == Regressor::Intercept.name() {
            continue;
        }
        let label = Regressor::from_name(reg).map_or(reg, |r| r.label());
        let est: f64 = cell(&t, *line, row, "estimate_pp")?;
        let lo: f64 = cell(&t, *line, row, "ci_low_pp")?;
        let hi: f64 = cell(&t, *line, row, "ci_high_pp")?;
        let p: f64 = cell(&t, *line, row, "p_value")?;
        rows.push(vec![label.to_string(), fmt2(est), format!("[{}, {}]", fmt2(lo), fmt2(hi)), fmt_p(p)]);
    }
    let out = ws.out(artifact::TABLE3);
    write_csv(&out, &["Regressor", "Estimate", "95% CI", "p-value"], rows)?;
    outputs.push(out);

    // Table 4: geography and prevalence of the matched pairs.
    let mut rows = Vec::new();
    for (group, pick) in [("high-low", 0usize), ("high-high", 1usize)] {
        let pairs: Vec<&ClusterPair> = quads.iter().map(|q| if pick == 0 { &q.treated } else { &q.control }).collect();
        let km: Vec<f64> = pairs.iter().map(|p| p.geo_distance_km).collect();
        let col = |f: &dyn Fn(&ClusterRecord) -> f64, early: bool| -> Vec<f64> {
            pairs.iter().map(|p| f(if early { &p.early } else { &p.late })).collect()
        };
        let lon = |c: &ClusterRecord| c.location.longitude_deg;
        let lat = |c: &ClusterRecord| c.location.latitude_deg;
        rows.push(vec![group.into(), "mean_haversine_km".into(), fmt2(mean(&km))]);
        rows.push(vec![
            group.into(),
            "corr_longitude".into(),
            format!("{:.4}", correlation(&col(&lon, true), &col(&lon, false))),
        ]);
        rows.push(vec![
            group.into(),
            "corr_latitude".into(),
            format!("{:.4}", correlation(&col(&lat, true), &col(&lat, false))),
        ]);
        for (early, tag) in [(true, "early_clusters"), (false, "late_clusters")] {
            let pfpr_at = |year_of_early: bool| -> Vec<f64> {
                pairs
                    .iter()
                    .filter_map(|p| {
                        let c = if early { &p.early } else { &p.late };
                        let year = if year_of_early { p.early.prevalence_year } else { p.late.prevalence_year };
                        c.pfpr_at(year)
                    })
                    .collect()
            };
            rows.push(vec![group.into(), format!("{tag}_mean_longitude"), fmt2(mean(&col(&lon, early)))]);
            rows.push(vec![group.into(), format!("{tag}_mean_latitude"), fmt2(mean(&col(&lat, early)))]);
            rows.push(vec![group.into(), format!("{tag}_mean_pfpr_early_year"), fmt2(mean(&pfpr_at(true)))]);
            rows.push(vec![group.into(), format!("{tag}_mean_pfpr_late_year"), fmt2(mean(&pfpr_at(false)))]);
        }
    }
    let out = ws.out(artifact::TABLE4);
    write_csv(&out, &["group", "statistic", "value"], rows)?;
    outputs.push(out);

    // Table 5: covariate balance.
    let t = Table::read(&balance_in)?;
    let mut rows = Vec::new();
    for (line, row) in &t.rows {
        let g = |c: &str| read_f64(&t, *line, row, c).map(|v| v.map_or_else(|| "NA".to_string(), fmt2));
        rows.push(vec![
            t.get(row, "covariate").to_string(),
            g("treated_mean_before")?,
            g("control_mean_before")?,
            g("treated_mean_after")?,
            g("control_mean_after")?,
            g("std_diff_before")?,
            g("std_diff_after")?,
        ]);
    }
    let out = ws.out(artifact::TABLE5);
    write_csv(
        &out,
        &["Covariate", "High-low BM", "High-high BM", "High-low AM", "High-high AM", "Std.dif BM", "Std.dif AM"],
        rows,
    )?;
    outputs.push(out);

    // Table 7: sensitivity grid, when that stage has run.
    let sens_in = ws.out(artifact::SENSITIVITY);
    if sens_in.exists() {
        inputs.push(sens_in.clone());
        let t = Table::read(&sens_in)?;
        let mut rows = Vec::new();
        for (line, row) in &t.rows {
            let est = read_f64(&t, *line, row, "estimate_pp")?;
            let lo = read_f64(&t, *line, row, "ci_low_pp")?;
            let hi = read_f64(&t, *line, row, "ci_high_pp")?;
            let p = read_f64(&t, *line, row, "p_value")?;
            let (e, ci, pv) = match (est, lo, hi, p) {
                (Some(e), Some(lo), Some(hi), Some(p)) => (fmt2(e), format!("[{}, {}]", fmt2(lo), fmt2(hi)), fmt_p(p)),
                _ => ("NA".into(), "NA".into(), t.get(row, "status").to_string()),
            };
            rows.push(vec![
                t.get(row, "case").to_string(),
                t.get(row, "p1").to_string(),
                t.get(row, "p2").to_string(),
                e,
                ci,
                pv,
            ]);
        }
        let out = ws.out(artifact::TABLE7);
        write_csv(&out, &["Case", "p1", "p2", "Estimate", "95% CI", "p-value"], rows)?;
        outputs.push(out);
    }
    write_manifest(Stage::Report.name(), cfg, &ws.out_dir, &inputs, &outputs, BTreeMap::new())
}

/// Pooled low-prevalence estimate read back from results.csv, in pp.
pub fn read_k1_pp(results: &Path) -> Result<(f64, f64, f64)> {
    let t = Table::read(results)?;
    for (line, row) in &t.rows {
        if t.get(row, "regressor") == Regressor::LowPrevalence.name() {
            return Ok((
                cell(&t, *line, row, "estimate_pp")?,
                cell(&t, *line, row, "ci_low_pp")?,
                cell(&t, *line, row, "ci_high_pp")?,
            ));
        }
    }
    Err(Error::Validation(format!("{}: no low_prevalence row", t.file)))
}
