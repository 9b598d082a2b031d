//! Recorded runs and their CSV/JSON serialization.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::FamilyParams;
use crate::linalg::{row_from, Mat, Row};

use super::config::RunConfig;

/// `bwflow-core <version>`, stamped into every output header.
pub fn provenance() -> String {
    format!("bwflow-core {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub label: String,
    pub provenance: String,
    pub config: RunConfig,
    /// Names of the parameter summary columns, in row order.
    pub param_columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    /// Flow time `step * learning_rate`.
    pub t: f64,
    pub params: Vec<f64>,
    pub w2_to_target: Option<f64>,
    pub divergence: Option<f64>,
    pub surrogate: Option<f64>,
    pub grad_norm: Option<f64>,
    pub log_r_shift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    pub rows: Vec<TrajectoryRow>,
    pub final_params: Option<FamilyParams>,
}

const METRIC_COLUMNS: [&str; 5] = [
    "w2_to_target",
    "divergence",
    "surrogate",
    "grad_norm",
    "log_r_shift",
];

impl Trajectory {
    pub fn new(label: impl Into<String>, config: RunConfig, param_columns: Vec<String>) -> Self {
        Self {
            header: TrajectoryHeader {
                label: label.into(),
                provenance: provenance(),
                config,
                param_columns,
                notes: Vec::new(),
            },
            rows: Vec::new(),
            final_params: None,
        }
    }

    /// Appends a row; steps must increase and non-finite metrics become empty.
    pub fn push(&mut self, mut row: TrajectoryRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::InvalidArgument(format!(
                    "trajectory steps must increase: {} after {}",
                    row.step, last.step
                )));
            }
        }
        crate::linalg::check_len(row.params.len(), self.header.param_columns.len(), "row params")?;
        if let Some(i) = row.params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "trajectory parameters",
                index: i,
            });
        }
        for m in [
            &mut row.w2_to_target,
            &mut row.divergence,
            &mut row.surrogate,
            &mut row.grad_norm,
            &mut row.log_r_shift,
        ] {
            *m = m.filter(|v| v.is_finite());
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&TrajectoryRow> {
        self.rows.last()
    }

    pub fn w2_series(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.w2_to_target.map(|w| (r.step, w)))
            .collect()
    }

    /// Mean and covariance recorded in a row of a single-Gaussian run.
    pub fn gaussian_at(&self, index: usize) -> Option<(Row, Mat)> {
        gaussian_from_summary(&self.header.param_columns, &self.rows.get(index)?.params)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Column names for the summary of `params`.
pub fn param_columns(params: &FamilyParams) -> Vec<String> {
    let n = params.dim();
    let gaussian = |prefix: &str, out: &mut Vec<String>| {
        out.extend((0..n).map(|i| format!("{prefix}mean_{i}")));
        for i in 0..n {
            out.extend((i..n).map(|j| format!("{prefix}cov_{i}{j}")));
        }
    };
    let mut out = Vec::new();
    match params {
        FamilyParams::Gaussian(_) => gaussian("", &mut out),
        FamilyParams::Diag(_) => {
            out.extend((0..n).map(|i| format!("mean_{i}")));
            out.extend((0..n).map(|i| format!("log_std_{i}")));
        }
        FamilyParams::Mixture(m) => {
            out.extend((0..m.k()).map(|k| format!("w_{k}")));
            for k in 0..m.k() {
                gaussian(&format!("c{k}_"), &mut out);
            }
        }
    }
    out
}

/// Summary values matching [`param_columns`].
pub fn param_values(params: &FamilyParams) -> Vec<f64> {
    let gaussian = |mean: &Row, cov: &Mat, out: &mut Vec<f64>| {
        out.extend(mean.iter());
        for i in 0..mean.len() {
            out.extend((i..mean.len()).map(|j| cov[(i, j)]));
        }
    };
    let mut out = Vec::new();
    match params {
        FamilyParams::Gaussian(p) => gaussian(&p.mean, &p.covariance(), &mut out),
        FamilyParams::Diag(p) => {
            out.extend(p.mean.iter());
            out.extend(p.log_std.iter());
        }
        FamilyParams::Mixture(m) => {
            out.extend(m.weights().iter());
            for c in &m.components {
                gaussian(&c.mean, &c.covariance(), &mut out);
            }
        }
    }
    out
}

/// Summary values of a Gaussian given by its moments.
pub fn moment_values(mean: &Row, cov: &Mat) -> Vec<f64> {
    let mut out: Vec<f64> = mean.iter().copied().collect();
    for i in 0..mean.len() {
        out.extend((i..mean.len()).map(|j| cov[(i, j)]));
    }
    out
}

fn gaussian_from_summary(columns: &[String], values: &[f64]) -> Option<(Row, Mat)> {
    let n = columns.iter().filter(|c| c.starts_with("mean_")).count();
    if n == 0 || columns.len() != n + n * (n + 1) / 2 || columns[n] != "cov_00" {
        return None;
    }
    let mean = row_from(&values[..n]);
    let mut cov = Mat::zeros(n, n);
    let mut k = n;
    for i in 0..n {
        for j in i..n {
            cov[(i, j)] = values[k];
            cov[(j, i)] = values[k];
            k += 1;
        }
    }
    Some((mean, cov))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotFormat {
    Csv,
    Json,
}

impl PlotFormat {
    /// JSON for `.json` paths, CSV otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => PlotFormat::Json,
            _ => PlotFormat::Csv,
        }
    }
}

/// Tabular data that can be written for plotting.
pub trait PlotData: Serialize {
    /// One-line description for the `#` header of CSV output.
    fn schema(&self) -> String;
    fn columns(&self) -> Vec<String>;
    /// Rows of cells; `None` is written as an empty field.
    fn table(&self) -> Vec<Vec<Option<f64>>>;
}

impl PlotData for Trajectory {
    fn schema(&self) -> String {
        format!(
            "bwflow trajectory; label={}; provenance={}; config={}",
            self.header.label,
            self.header.provenance,
            self.header.config.to_json()
        )
    }

    fn columns(&self) -> Vec<String> {
        let mut c = vec!["step".to_string(), "t".to_string()];
        c.extend(self.header.param_columns.iter().cloned());
        c.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
        c
    }

    fn table(&self) -> Vec<Vec<Option<f64>>> {
        self.rows
            .iter()
            .map(|r| {
                let mut v = vec![Some(r.step as f64), Some(r.t)];
                v.extend(r.params.iter().map(|p| Some(*p)));
                v.extend([
                    r.w2_to_target,
                    r.divergence,
                    r.surrogate,
                    r.grad_norm,
                    r.log_r_shift,
                ]);
                v
            })
            .collect()
    }
}

fn format_cell(v: Option<f64>) -> String {
    // `Display` for f64 is the shortest string that parses back exactly.
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv<D: PlotData + ?Sized, W: Write>(data: &D, out: W) -> Result<()> {
    let mut out = out;
    let schema = data.schema().replace(['\n', '\r'], " ");
    writeln!(out, "# {schema}").map_err(|e| Error::io("<csv>", e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(data.columns())?;
    for row in data.table() {
        w.write_record(row.into_iter().map(format_cell))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Writes `data` to `path` as CSV or pretty JSON; errors name the path.
pub fn emit_plot_data<D: PlotData + ?Sized>(data: &D, path: &Path, format: PlotFormat) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    match format {
        PlotFormat::Csv => write_csv(data, &mut buf).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })?,
        PlotFormat::Json => {
            serde_json::to_writer_pretty(&mut buf, data)?;
            buf.push(b'\n');
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads the numeric table back from a CSV written by [`write_csv`].
pub fn read_csv_table(text: &str) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let columns = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|_| Error::Data {
                        row: i + 2,
                        column: c,
                        message: format!("cannot parse {s:?}"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((columns, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{GaussianParams, MixtureParams};

    fn traj() -> Trajectory {
        let p = FamilyParams::Gaussian(GaussianParams::standard(2));
        let mut t = Trajectory::new("demo", RunConfig::default(), param_columns(&p));
        for step in 0..3 {
            t.push(TrajectoryRow {
                step,
                t: step as f64 * 0.01,
                params: param_values(&p).iter().map(|v| v + 0.1 / 3.0 * step as f64).collect(),
                w2_to_target: Some(1.0 / (1.0 + step as f64)),
                divergence: None,
                surrogate: Some(f64::NAN),
                grad_norm: Some(std::f64::consts::PI),
                log_r_shift: None,
            })
            .unwrap();
        }
        t.final_params = Some(p);
        t
    }

    #[test]
    fn columns_match_values() {
        let m = FamilyParams::Mixture(MixtureParams::random_init(3, 2, 1).unwrap());
        assert_eq!(param_columns(&m).len(), param_values(&m).len());
        assert_eq!(param_columns(&m).len(), 3 + 3 * 5);
    }

    #[test]
    fn gaussian_summary_round_trip() {
        let p = GaussianParams::new(row_from(&[1.0, 2.0]), Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 2.0]))
            .unwrap();
        let f = FamilyParams::Gaussian(p.clone());
        let mut t = Trajectory::new("x", RunConfig::default(), param_columns(&f));
        t.push(TrajectoryRow {
            step: 0,
            t: 0.0,
            params: param_values(&f),
            w2_to_target: None,
            divergence: None,
            surrogate: None,
            grad_norm: None,
            log_r_shift: None,
        })
        .unwrap();
        let (m, c) = t.gaussian_at(0).unwrap();
        assert_eq!(m, p.mean);
        assert!((c - p.covariance()).abs().max() < 1e-15);
    }

    #[test]
    fn steps_must_increase_and_nan_becomes_empty() {
        let mut t = traj();
        assert!(t.rows[1].surrogate.is_none());
        let dup = t.rows[2].clone();
        assert!(t.push(dup).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let t = traj();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        emit_plot_data(&t, &path, PlotFormat::Json).unwrap();
        let back = Trajectory::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn csv_shape_and_values() {
        let t = traj();
        let mut buf = Vec::new();
        write_csv(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# bwflow trajectory"));
        assert!(!text.contains('\r'));
        let (cols, rows) = read_csv_table(&text).unwrap();
        assert_eq!(cols, t.columns());
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.len() == cols.len()));
        assert_eq!(rows, t.table());
    }

    #[test]
    fn empty_trajectory_is_header_only() {
        let p = FamilyParams::Gaussian(GaussianParams::standard(1));
        let t = Trajectory::new("empty", RunConfig::default(), param_columns(&p));
        let mut buf = Vec::new();
        write_csv(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn io_errors_carry_the_path() {
        let t = traj();
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let bad = blocker.join("sub").join("t.csv");
        let e = emit_plot_data(&t, &bad, PlotFormat::Csv).unwrap_err();
        assert!(e.to_string().contains("file"));
    }
}
