//! CSV readers and writers for the input tables and stage artifacts.
//!
//! Readers locate columns by header name, skip rows that fail to parse and
//! report each skipped row as an [`Issue`]. Writers format floats with the
//! shortest representation that parses back to the same value, so every
//! artifact round-trips exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::{prevalence_year_for, AvailabilityTable, IndividualRow};
use crate::model::{BirthRecord, ClusterRecord, Covariate, CovariateMeans, GeoPoint, ReportedSize, Role};

/// A row that was skipped or flagged while reading.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Issue {
    pub file: String,
    pub line: u64,
    pub entity: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub issues: Vec<Issue>,
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub struct Table {
    pub file: String,
    headers: BTreeMap<String, usize>,
    pub rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let file = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned());
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Csv { path: path.to_path_buf(), message: e.to_string() })?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Csv { path: path.to_path_buf(), message: e.to_string() })?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Csv { path: path.to_path_buf(), message: e.to_string() })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self { file, headers, rows })
    }

    pub fn has(&self, column: &str) -> bool {
        self.headers.contains_key(column)
    }

    pub fn require(&self, columns: &[&str]) -> Result<()> {
        for c in columns {
            if !self.has(c) {
                return Err(Error::Validation(format!("{}: missing required column '{c}'", self.file)));
            }
        }
        Ok(())
    }

    /// Trimmed cell, or `""` when the column is absent.
    pub fn get<'r>(&self, row: &'r csv::StringRecord, column: &str) -> &'r str {
        self.headers
            .get(column)
            .and_then(|&i| row.get(i))
            .map_or("", str::trim)
    }
}

/// Cell parsing with a message naming the column.
pub fn parse_cell<T: std::str::FromStr>(value: &str, column: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{column}: cannot parse '{value}'"))
}

pub fn parse_opt<T: std::str::FromStr>(value: &str, column: &str) -> std::result::Result<Option<T>, String> {
    if value.is_empty() || value.eq_ignore_ascii_case("na") {
        Ok(None)
    } else {
        parse_cell(value, column).map(Some)
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    let csv_err = |e: csv::Error| Error::Csv { path: path.to_path_buf(), message: e.to_string() };
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub const CLUSTER_COLUMNS: [&str; 13] = [
    "cluster_id",
    "country",
    "survey_year",
    "role",
    "lat",
    "lon",
    "urban",
    "electricity",
    "floor",
    "toilet",
    "mother_education",
    "contraception",
    "prevalence_year",
];

fn covariate_column(c: Covariate) -> &'static str {
    c.name()
}

/// Reads clusters.csv. `prevalence_year` is optional; when absent it follows
/// the survey-year rule, when present it is kept and mismatches are flagged.
pub fn read_clusters(path: &Path) -> Result<Parsed<ClusterRecord>> {
    let t = Table::read(path)?;
    t.require(&CLUSTER_COLUMNS[..12])?;
    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, row) in &t.rows {
        let id = t.get(row, "cluster_id").to_string();
        let parsed = (|| -> std::result::Result<ClusterRecord, String> {
            if id.is_empty() {
                return Err("empty cluster_id".into());
            }
            let survey_year: i32 = parse_cell(t.get(row, "survey_year"), "survey_year")?;
            let role = Role::parse(t.get(row, "role")).ok_or_else(|| format!("role: unknown '{}'", t.get(row, "role")))?;
            let location = GeoPoint::new(parse_cell(t.get(row, "lat"), "lat")?, parse_cell(t.get(row, "lon"), "lon")?)
                .map_err(|e| e.to_string())?;
            let mut means = [None; 6];
            for cov in Covariate::ALL {
                means[cov.index()] = parse_opt(t.get(row, covariate_column(cov)), cov.name())?;
            }
            let covariates = CovariateMeans(means);
            covariates.validate().map_err(|e| e.to_string())?;
            let prevalence_year = match parse_opt::<i32>(t.get(row, "prevalence_year"), "prevalence_year")? {
                Some(y) => y,
                None => prevalence_year_for(survey_year),
            };
            Ok(ClusterRecord {
                cluster_id: id.clone(),
                country: t.get(row, "country").to_string(),
                survey_year,
                role,
                location,
                covariates,
                prevalence_year,
                pfpr_by_year: BTreeMap::new(),
            })
        })();
        match parsed {
            Ok(c) => {
                if !seen.insert(c.cluster_id.clone()) {
                    issues.push(issue(&t.file, *line, &id, "duplicate cluster_id; row skipped"));
                    continue;
                }
                if c.prevalence_year != prevalence_year_for(c.survey_year) {
                    log::warn!(
                        "cluster {}: prevalence_year {} differs from the survey-year rule ({}); keeping the file value",
                        c.cluster_id,
                        c.prevalence_year,
                        prevalence_year_for(c.survey_year)
                    );
                    issues.push(issue(
                        &t.file,
                        *line,
                        &id,
                        &format!("prevalence_year {} differs from survey-year rule; kept", c.prevalence_year),
                    ));
                }
                records.push(c);
            }
            Err(msg) => issues.push(issue(&t.file, *line, &id, &format!("{msg}; row skipped"))),
        }
    }
    Ok(Parsed { records, issues })
}

fn issue(file: &str, line: u64, entity: &str, message: &str) -> Issue {
    Issue {
        file: file.to_string(),
        line,
        entity: entity.to_string(),
        message: message.to_string(),
    }
}

/// Reads prevalence.csv and attaches each row to its cluster.
pub fn attach_prevalence(path: &Path, clusters: &mut [ClusterRecord]) -> Result<Vec<Issue>> {
    let t = Table::read(path)?;
    t.require(&["cluster_id", "year", "pfpr"])?;
    let index: BTreeMap<String, usize> = clusters.iter().enumerate().map(|(i, c)| (c.cluster_id.clone(), i)).collect();
    let mut issues = Vec::new();
    for (line, row) in &t.rows {
        let id = t.get(row, "cluster_id");
        let parsed = (|| -> std::result::Result<(i32, f64), String> {
            let year: i32 = parse_cell(t.get(row, "year"), "year")?;
            let pfpr: f64 = parse_cell(t.get(row, "pfpr"), "pfpr")?;
            if !(0.0..=1.0).contains(&pfpr) {
                return Err(format!("pfpr {pfpr} outside [0, 1]"));
            }
            Ok((year, pfpr))
        })();
        match (parsed, index.get(id)) {
            (Ok((year, pfpr)), Some(&i)) => {
                clusters[i].pfpr_by_year.insert(year, pfpr);
            }
            (Ok(_), None) => issues.push(issue(&t.file, *line, id, "unknown cluster_id; row skipped")),
            (Err(msg), _) => issues.push(issue(&t.file, *line, id, &format!("{msg}; row skipped"))),
        }
    }
    Ok(issues)
}

pub const BIRTH_COLUMNS: [&str; 14] = [
    "child_id",
    "cluster_id",
    "mother_age_years",
    "birth_order_code",
    "wealth_index",
    "urban",
    "mother_education",
    "child_is_boy",
    "married",
    "antenatal",
    "reported_size",
    "multiple_birth",
    "child_age_years",
    "lbw",
];

pub fn read_births(path: &Path) -> Result<Parsed<BirthRecord>> {
    let t = Table::read(path)?;
    t.require(&BIRTH_COLUMNS)?;
    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, row) in &t.rows {
        let id = t.get(row, "child_id").to_string();
        let parsed = (|| -> std::result::Result<BirthRecord, String> {
            if id.is_empty() {
                return Err("empty child_id".into());
            }
            let g = |c: &str| t.get(row, c);
            let size = g("reported_size");
            let reported_size = if size.is_empty() {
                None
            } else {
                Some(ReportedSize::parse(size).ok_or_else(|| format!("reported_size: unknown '{size}'"))?)
            };
            let b = BirthRecord {
                child_id: id.clone(),
                cluster_id: g("cluster_id").to_string(),
                mother_age_years: parse_cell(g("mother_age_years"), "mother_age_years")?,
                birth_order_code: parse_cell(g("birth_order_code"), "birth_order_code")?,
                wealth_index: parse_cell(g("wealth_index"), "wealth_index")?,
                urban: parse_cell(g("urban"), "urban")?,
                mother_education: parse_cell(g("mother_education"), "mother_education")?,
                child_is_boy: parse_cell(g("child_is_boy"), "child_is_boy")?,
                married: parse_cell(g("married"), "married")?,
                antenatal: parse_cell(g("antenatal"), "antenatal")?,
                reported_size,
                multiple_birth: parse_cell(g("multiple_birth"), "multiple_birth")?,
                child_age_years: parse_cell(g("child_age_years"), "child_age_years")?,
                lbw: parse_opt(g("lbw"), "lbw")?,
            };
            b.validate().map_err(|e| e.to_string())?;
            Ok(b)
        })();
        match parsed {
            Ok(b) => {
                if seen.insert(b.child_id.clone()) {
                    records.push(b);
                } else {
                    issues.push(issue(&t.file, *line, &id, "duplicate child_id; row skipped"));
                }
            }
            Err(msg) => issues.push(issue(&t.file, *line, &id, &format!("{msg}; row skipped"))),
        }
    }
    Ok(Parsed { records, issues })
}

/// availability.csv: country, source (`survey` or `prevalence`), year.
pub fn read_availability(path: &Path) -> Result<AvailabilityTable> {
    let t = Table::read(path)?;
    t.require(&["country", "source", "year"])?;
    let mut table = AvailabilityTable::default();
    for (line, row) in &t.rows {
        let country = t.get(row, "country").to_string();
        let year: i32 = parse_cell(t.get(row, "year"), "year")
            .map_err(|m| Error::Validation(format!("{}:{line}: {m}", t.file)))?;
        let entry = table.countries.entry(country).or_default();
        match t.get(row, "source") {
            "survey" | "dhs_gps" => entry.survey_years.insert(year),
            "prevalence" => entry.prevalence_years.insert(year),
            other => {
                return Err(Error::Validation(format!("{}:{line}: unknown source '{other}'", t.file)));
            }
        };
    }
    table.validate()?;
    Ok(table)
}

/// individuals.csv: cluster_id plus the six covariates, one row per person.
pub fn read_individuals(path: &Path) -> Result<Parsed<(String, IndividualRow)>> {
    let t = Table::read(path)?;
    let mut cols = vec!["cluster_id"];
    cols.extend(Covariate::ALL.iter().map(|c| c.name()));
    t.require(&cols)?;
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (line, row) in &t.rows {
        let id = t.get(row, "cluster_id").to_string();
        let mut values = [None; 6];
        let mut bad = None;
        for cov in Covariate::ALL {
            match parse_opt::<f64>(t.get(row, cov.name()), cov.name()) {
                Ok(v) => values[cov.index()] = v,
                Err(m) => bad = Some(m),
            }
        }
        match bad {
            None => records.push((id, values)),
            Some(m) => issues.push(issue(&t.file, *line, &id, &format!("{m}; row skipped"))),
        }
    }
    Ok(Parsed { records, issues })
}

pub fn write_clusters(path: &Path, clusters: &[ClusterRecord]) -> Result<()> {
    write_csv(
        path,
        &CLUSTER_COLUMNS,
        clusters.iter().map(|c| {
            let mut row = vec![
                c.cluster_id.clone(),
                c.country.clone(),
                c.survey_year.to_string(),
                c.role.as_str().to_string(),
                fmt_f64(c.location.latitude_deg),
                fmt_f64(c.location.longitude_deg),
            ];
            for name in &CLUSTER_COLUMNS[6..12] {
                let cov = Covariate::ALL.iter().find(|cov| covariate_column(**cov) == *name).unwrap();
                row.push(fmt_opt(c.covariates.get(*cov)));
            }
            row.push(c.prevalence_year.to_string());
            row
        }),
    )
}

pub fn write_prevalence(path: &Path, clusters: &[ClusterRecord]) -> Result<()> {
    write_csv(
        path,
        &["cluster_id", "year", "pfpr"],
        clusters.iter().flat_map(|c| {
            c.pfpr_by_year
                .iter()
                .map(|(y, v)| vec![c.cluster_id.clone(), y.to_string(), fmt_f64(*v)])
        }),
    )
}

pub fn write_births(path: &Path, births: &[BirthRecord]) -> Result<()> {
    write_csv(
        path,
        &BIRTH_COLUMNS,
        births.iter().map(|b| {
            vec![
                b.child_id.clone(),
                b.cluster_id.clone(),
                b.mother_age_years.to_string(),
                b.birth_order_code.to_string(),
                b.wealth_index.to_string(),
                b.urban.to_string(),
                b.mother_education.to_string(),
                b.child_is_boy.to_string(),
                b.married.to_string(),
                b.antenatal.to_string(),
                b.reported_size.map_or(String::new(), |s| s.as_str().to_string()),
                b.multiple_birth.to_string(),
                fmt_f64(b.child_age_years),
                b.lbw.map_or(String::new(), |v| v.to_string()),
            ]
        }),
    )
}

/// Reads clusters.csv and prevalence.csv together.
pub fn read_cluster_tables(clusters: &Path, prevalence: &Path) -> Result<Parsed<ClusterRecord>> {
    let mut parsed = read_clusters(clusters)?;
    let more = attach_prevalence(prevalence, &mut parsed.records)?;
    parsed.issues.extend(more);
    Ok(parsed)
}
