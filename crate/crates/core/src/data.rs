//! Longitudinal dataset representation, structural validation and CSV I/O.
//!
//! A [`Subject`] holds the observations of one individual at its own
//! (irregular) observation times. Covariates are stored only at those times.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Observation times, strictly increasing.
    pub times: Vec<f64>,
    pub y: DVector<f64>,
    /// n_i × p_beta fixed-effect design.
    pub x: DMatrix<f64>,
    /// n_i × p_b random-effect design.
    pub z: DMatrix<f64>,
}

impl Subject {
    pub fn n_obs(&self) -> usize {
        self.times.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    /// Time horizon T; every observation time lies in (0, T].
    pub horizon: f64,
    pub p_beta: usize,
    pub p_b: usize,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with horizon set to the latest observation time and
    /// covariate dimensions taken from the first subject.
    pub fn new(subjects: Vec<Subject>) -> Self {
        let p_beta = subjects.first().map_or(0, |s| s.x.ncols());
        let p_b = subjects.first().map_or(0, |s| s.z.ncols());
        let horizon = subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .fold(0.0_f64, f64::max);
        Dataset {
            subjects,
            horizon,
            p_beta,
            p_b,
            x_names: (1..=p_beta).map(|k| format!("x{k}")).collect(),
            z_names: (1..=p_b).map(|k| format!("z{k}")).collect(),
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(Subject::n_obs).sum()
    }

    pub fn max_points(&self) -> usize {
        self.subjects.iter().map(Subject::n_obs).max().unwrap_or(0)
    }
}

/// Tunable bounds used by [`validate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    pub max_abs_covariate: f64,
    pub max_points_per_subject: usize,
    pub allow_ties: bool,
    pub allow_zero_time: bool,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            max_abs_covariate: 1e6,
            max_points_per_subject: 10_000,
            allow_ties: false,
            allow_zero_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub subject: String,
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "subject `{}`, {}: {}", self.subject, self.field, self.message)
    }
}

/// Returns every structural violation in `dataset`; an empty list means the
/// dataset satisfies all model assumptions.
pub fn validate(dataset: &Dataset, config: &ValidationConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject: &str, field: &'static str, message: String| {
        out.push(Violation {
            subject: subject.to_string(),
            field,
            message,
        })
    };

    if dataset.subjects.is_empty() {
        push("", "subjects", "dataset has no subjects".into());
    }
    for s in &dataset.subjects {
        let n = s.times.len();
        if n == 0 {
            push(&s.id, "times", "subject has no observations".into());
        }
        if n > config.max_points_per_subject {
            push(
                &s.id,
                "times",
                format!(
                    "{n} observations exceed the cap of {}",
                    config.max_points_per_subject
                ),
            );
        }
        if s.y.len() != n || s.x.nrows() != n || s.z.nrows() != n {
            push(
                &s.id,
                "rows",
                format!(
                    "row count mismatch: times {n}, y {}, x_design {}, z_design {}",
                    s.y.len(),
                    s.x.nrows(),
                    s.z.nrows()
                ),
            );
        }
        if s.x.ncols() != dataset.p_beta {
            push(
                &s.id,
                "x_design",
                format!("expected {} columns, found {}", dataset.p_beta, s.x.ncols()),
            );
        }
        if s.z.ncols() != dataset.p_b {
            push(
                &s.id,
                "z_design",
                format!("expected {} columns, found {}", dataset.p_b, s.z.ncols()),
            );
        }
        let ordered = s.times.windows(2).all(|w| {
            if config.allow_ties {
                w[0] <= w[1]
            } else {
                w[0] < w[1]
            }
        });
        if !ordered {
            push(&s.id, "times", "times not strictly increasing".into());
        }
        for &t in &s.times {
            let lower_ok = if config.allow_zero_time { t >= 0.0 } else { t > 0.0 };
            if !t.is_finite() || !lower_ok || t > dataset.horizon {
                push(
                    &s.id,
                    "times",
                    format!("time {t} outside (0, {}]", dataset.horizon),
                );
                break;
            }
        }
        if s.y.iter().any(|v| !v.is_finite()) {
            push(&s.id, "y", "non-finite response".into());
        }
        for (field, m) in [("x_design", &s.x), ("z_design", &s.z)] {
            if m.iter().any(|v| !v.is_finite()) {
                push(&s.id, field, "non-finite covariate".into());
            } else if m.iter().any(|v| v.abs() > config.max_abs_covariate) {
                push(
                    &s.id,
                    field,
                    format!("covariate exceeds bound {}", config.max_abs_covariate),
                );
            }
        }
    }
    out
}

/// Column mapping for CSV ingestion, read from a JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub id_col: String,
    pub time_col: String,
    pub y_col: String,
    pub x_cols: Vec<String>,
    pub z_cols: Vec<String>,
    #[serde(default)]
    pub allow_ties: bool,
    /// Accept observations at t = 0, which carry no system-noise variance.
    #[serde(default)]
    pub allow_zero_time: bool,
}

impl SchemaConfig {
    /// Schema matching the layout produced by [`write_csv`].
    pub fn for_dataset(dataset: &Dataset) -> Self {
        SchemaConfig {
            id_col: "id".into(),
            time_col: "t".into(),
            y_col: "y".into(),
            x_cols: dataset.x_names.clone(),
            z_cols: dataset.z_names.clone(),
            allow_ties: false,
            allow_zero_time: false,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct CsvLoad {
    pub dataset: Dataset,
    /// Rows skipped because the response cell was empty or NA.
    pub dropped_rows: usize,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | "null")
}

/// Reads one row per observation and groups rows by subject id, in order of
/// first appearance. Rows are sorted by time within each subject.
pub fn read_csv(path: &Path, schema: &SchemaConfig) -> Result<CsvLoad> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(file, schema).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path, message),
        other => other,
    })
}

pub fn read_csv_from<R: std::io::Read>(reader: R, schema: &SchemaConfig) -> Result<CsvLoad> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse("<csv>", e))?
        .clone();
    let find = |key: &'static str, name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                key,
                column: name.to_string(),
            })
    };
    let id_idx = find("id_col", &schema.id_col)?;
    let t_idx = find("time_col", &schema.time_col)?;
    let y_idx = find("y_col", &schema.y_col)?;
    let x_idx = schema
        .x_cols
        .iter()
        .map(|c| find("x_cols", c))
        .collect::<Result<Vec<_>>>()?;
    let z_idx = schema
        .z_cols
        .iter()
        .map(|c| find("z_cols", c))
        .collect::<Result<Vec<_>>>()?;

    struct Row {
        t: f64,
        y: f64,
        x: Vec<f64>,
        z: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    let mut dropped_rows = 0;

    for record in rdr.records() {
        let record = record.map_err(|e| Error::parse("<csv>", e))?;
        let line = record.position().map_or(0, |p| p.line());
        let number = |idx: usize, column: &str| -> Result<f64> {
            let cell = record.get(idx).unwrap_or("").trim();
            cell.parse::<f64>().map_err(|_| Error::NonNumeric {
                column: column.to_string(),
                line,
                value: cell.to_string(),
            })
        };
        let y_cell = record.get(y_idx).unwrap_or("");
        if is_missing(y_cell) {
            dropped_rows += 1;
            continue;
        }
        let id = record.get(id_idx).unwrap_or("").trim().to_string();
        let row = Row {
            t: number(t_idx, &schema.time_col)?,
            y: number(y_idx, &schema.y_col)?,
            x: x_idx
                .iter()
                .zip(&schema.x_cols)
                .map(|(&i, c)| number(i, c))
                .collect::<Result<_>>()?,
            z: z_idx
                .iter()
                .zip(&schema.z_cols)
                .map(|(&i, c)| number(i, c))
                .collect::<Result<_>>()?,
        };
        let positive = if schema.allow_zero_time { row.t >= 0.0 } else { row.t > 0.0 };
        if !(row.t.is_finite() && positive) {
            return Err(Error::InvalidDataset(format!(
                "subject `{id}` has time {} at line {line}; times must be {}",
                row.t,
                if schema.allow_zero_time { "non-negative" } else { "positive" }
            )));
        }
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(row);
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by(|a, b| a.t.total_cmp(&b.t));
        if !schema.allow_ties {
            if let Some(w) = rows.windows(2).find(|w| w[0].t == w[1].t) {
                return Err(Error::DuplicateTime {
                    subject: id,
                    time: w[0].t,
                });
            }
        }
        let n = rows.len();
        let px = schema.x_cols.len();
        let pz = schema.z_cols.len();
        subjects.push(Subject {
            times: rows.iter().map(|r| r.t).collect(),
            y: DVector::from_iterator(n, rows.iter().map(|r| r.y)),
            x: DMatrix::from_fn(n, px, |i, j| rows[i].x[j]),
            z: DMatrix::from_fn(n, pz, |i, j| rows[i].z[j]),
            id,
        });
    }
    let mut dataset = Dataset::new(subjects);
    dataset.p_beta = schema.x_cols.len();
    dataset.p_b = schema.z_cols.len();
    dataset.x_names = schema.x_cols.clone();
    dataset.z_names = schema.z_cols.clone();
    Ok(CsvLoad {
        dataset,
        dropped_rows,
    })
}

/// Writes the layout described by [`SchemaConfig::for_dataset`]. Floats use
/// the shortest representation that round-trips exactly.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(dataset, file).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path, message),
        other => other,
    })
}

pub fn write_csv_to<W: std::io::Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let err = |e: csv::Error| Error::parse("<csv>", e);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "t".to_string(), "y".to_string()];
    header.extend(dataset.x_names.iter().cloned());
    header.extend(dataset.z_names.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for s in &dataset.subjects {
        for j in 0..s.n_obs() {
            let mut rec = vec![s.id.clone(), s.times[j].to_string(), s.y[j].to_string()];
            rec.extend(s.x.row(j).iter().map(f64::to_string));
            rec.extend(s.z.row(j).iter().map(f64::to_string));
            w.write_record(&rec).map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
