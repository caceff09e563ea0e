//! Coverage aggregation and CSV output.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::MethodKind;

/// Outcome of one method at one checkpoint of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRow {
    pub rep: usize,
    pub method: MethodKind,
    pub checkpoint: usize,
    pub covered: bool,
    /// `‖B(θ̂ − θ*)‖²`
    pub statistic: f64,
    /// Singular region or failed fit; excluded from coverage.
    pub flagged: bool,
    pub error: Option<String>,
    /// Per-coordinate pointwise coverage and width.
    pub contrast_covered: Vec<bool>,
    pub widths: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub n_obs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub method: MethodKind,
    pub policy: String,
    pub scenario: String,
    #[serde(rename = "checkpoint_T")]
    pub checkpoint_t: usize,
    pub alpha: f64,
    pub coverage: f64,
    pub mc_se: f64,
    pub n_reps: usize,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthRow {
    pub method: MethodKind,
    pub policy: String,
    pub scenario: String,
    #[serde(rename = "checkpoint_T")]
    pub checkpoint_t: usize,
    pub contrast_index: usize,
    pub mean_width: f64,
    pub sd_width: f64,
}

/// Long-format rows for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub method: MethodKind,
    pub policy: String,
    pub scenario: String,
    #[serde(rename = "checkpoint_T")]
    pub checkpoint_t: usize,
    pub metric: String,
    pub contrast_index: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoverageTable {
    pub coverage: Vec<CoverageRow>,
    pub widths: Vec<WidthRow>,
    /// Pointwise coverage of each coordinate, keyed like `widths`.
    pub contrast_coverage: Vec<WidthRow>,
}

/// Monte Carlo standard error of a proportion.
pub fn mc_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CoverageTable {
    /// Aggregates rows by `(method, checkpoint)`, in method then checkpoint
    /// order. Flagged rows are counted but not used.
    pub fn aggregate(rows: &[ReplicationRow], policy: &str, scenario: &str, alpha: f64) -> Self {
        let mut keys: Vec<(MethodKind, usize)> = rows.iter().map(|r| (r.method, r.checkpoint)).collect();
        keys.sort();
        keys.dedup();
        let mut table = Self::default();
        for (method, checkpoint) in keys {
            let group: Vec<&ReplicationRow> =
                rows.iter().filter(|r| r.method == method && r.checkpoint == checkpoint).collect();
            let used: Vec<&&ReplicationRow> = group.iter().filter(|r| !r.flagged).collect();
            let n = used.len();
            let coverage = if n == 0 { 0.0 } else { used.iter().filter(|r| r.covered).count() as f64 / n as f64 };
            table.coverage.push(CoverageRow {
                method,
                policy: policy.to_string(),
                scenario: scenario.to_string(),
                checkpoint_t: checkpoint,
                alpha,
                coverage,
                mc_se: mc_se(coverage, n),
                n_reps: n,
                flagged: group.len() - n,
            });
            let d = used.iter().map(|r| r.widths.len()).max().unwrap_or(0);
            for j in 0..d {
                let w: Vec<f64> = used.iter().filter_map(|r| r.widths.get(j).copied()).collect();
                let (mean_width, sd_width) = mean_sd(&w);
                let row = |mean_width, sd_width| WidthRow {
                    method,
                    policy: policy.to_string(),
                    scenario: scenario.to_string(),
                    checkpoint_t: checkpoint,
                    contrast_index: j,
                    mean_width,
                    sd_width,
                };
                table.widths.push(row(mean_width, sd_width));
                let c: Vec<f64> =
                    used.iter().filter_map(|r| r.contrast_covered.get(j).map(|b| f64::from(u8::from(*b)))).collect();
                let (p, _) = mean_sd(&c);
                table.contrast_coverage.push(row(p, mc_se(p, c.len())));
            }
        }
        table
    }

    pub fn get(&self, method: MethodKind, checkpoint: usize) -> Option<&CoverageRow> {
        self.coverage.iter().find(|r| r.method == method && r.checkpoint_t == checkpoint)
    }

    /// Mean width across coordinates.
    pub fn mean_width(&self, method: MethodKind, checkpoint: usize) -> Option<f64> {
        let w: Vec<f64> = self
            .widths
            .iter()
            .filter(|r| r.method == method && r.checkpoint_t == checkpoint)
            .map(|r| r.mean_width)
            .collect();
        (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
    }

    fn plot_rows(&self) -> Vec<PlotRow> {
        let mut out = Vec::new();
        for r in &self.coverage {
            for (metric, value) in [("coverage", r.coverage), ("mc_se", r.mc_se)] {
                out.push(PlotRow {
                    method: r.method,
                    policy: r.policy.clone(),
                    scenario: r.scenario.clone(),
                    checkpoint_t: r.checkpoint_t,
                    metric: metric.into(),
                    contrast_index: None,
                    value,
                });
            }
        }
        for (metric, rows) in [("mean_width", &self.widths), ("contrast_coverage", &self.contrast_coverage)] {
            for r in rows {
                out.push(PlotRow {
                    method: r.method,
                    policy: r.policy.clone(),
                    scenario: r.scenario.clone(),
                    checkpoint_t: r.checkpoint_t,
                    metric: metric.into(),
                    contrast_index: Some(r.contrast_index),
                    value: r.mean_width,
                });
            }
        }
        out
    }
}

pub const COVERAGE_HEADER: &str = "method,policy,scenario,checkpoint_T,alpha,coverage,mc_se,n_reps,flagged";
pub const WIDTHS_HEADER: &str = "method,policy,scenario,checkpoint_T,contrast_index,mean_width,sd_width";
pub const PLOTDATA_HEADER: &str = "method,policy,scenario,checkpoint_T,metric,contrast_index,value";
pub const REPLICATIONS_HEADER: &str =
    "rep,method,checkpoint_T,covered,statistic,flagged,n_obs,widths,contrast_covered,theta_hat,error";

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv { path: path.to_path_buf(), source }
}

fn write_csv<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header.split(',')).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let found = r.headers().map_err(csv_err(path))?.iter().collect::<Vec<_>>().join(",");
    if found != header {
        return Err(Error::Ingestion(format!("{}: unexpected header {found:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

/// Writes `coverage.csv`, `widths.csv` and `plotdata.csv` into `dir`.
pub fn write_results(table: &CoverageTable, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let files = [dir.join("coverage.csv"), dir.join("widths.csv"), dir.join("plotdata.csv")];
    write_csv(&files[0], COVERAGE_HEADER, &table.coverage)?;
    write_csv(&files[1], WIDTHS_HEADER, &table.widths)?;
    write_csv(&files[2], PLOTDATA_HEADER, &table.plot_rows())?;
    Ok(files.to_vec())
}

/// Reads back the files written by [`write_results`].
pub fn read_results(dir: &Path) -> Result<CoverageTable> {
    let coverage = read_csv(&dir.join("coverage.csv"), COVERAGE_HEADER)?;
    let widths = read_csv(&dir.join("widths.csv"), WIDTHS_HEADER)?;
    let plot: Vec<PlotRow> = read_csv(&dir.join("plotdata.csv"), PLOTDATA_HEADER)?;
    let contrast_coverage = plot
        .into_iter()
        .filter(|p| p.metric == "contrast_coverage")
        .map(|p| {
            let n = coverage
                .iter()
                .find(|c: &&CoverageRow| c.method == p.method && c.checkpoint_t == p.checkpoint_t)
                .map_or(0, |c| c.n_reps);
            WidthRow {
                method: p.method,
                policy: p.policy,
                scenario: p.scenario,
                checkpoint_t: p.checkpoint_t,
                contrast_index: p.contrast_index.unwrap_or(0),
                mean_width: p.value,
                sd_width: mc_se(p.value, n),
            }
        })
        .collect();
    Ok(CoverageTable { coverage, widths, contrast_coverage })
}

#[derive(Debug, Serialize, Deserialize)]
struct RawReplication {
    rep: usize,
    method: MethodKind,
    #[serde(rename = "checkpoint_T")]
    checkpoint_t: usize,
    covered: bool,
    statistic: f64,
    flagged: bool,
    n_obs: usize,
    widths: String,
    contrast_covered: String,
    theta_hat: String,
    error: String,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn split<T: std::str::FromStr>(s: &str, path: &Path) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| x.parse().map_err(|_| Error::Ingestion(format!("{}: bad list entry {x:?}", path.display()))))
        .collect()
}

pub fn write_replications(rows: &[ReplicationRow], path: &Path) -> Result<()> {
    let raw: Vec<RawReplication> = rows
        .iter()
        .map(|r| RawReplication {
            rep: r.rep,
            method: r.method,
            checkpoint_t: r.checkpoint,
            covered: r.covered,
            statistic: r.statistic,
            flagged: r.flagged,
            n_obs: r.n_obs,
            widths: join(&r.widths),
            contrast_covered: join(&r.contrast_covered.iter().map(|b| u8::from(*b)).collect::<Vec<_>>()),
            theta_hat: join(&r.theta_hat),
            error: r.error.clone().unwrap_or_default(),
        })
        .collect();
    write_csv(path, REPLICATIONS_HEADER, &raw)
}

pub fn read_replications(path: &Path) -> Result<Vec<ReplicationRow>> {
    let raw: Vec<RawReplication> = read_csv(path, REPLICATIONS_HEADER)?;
    raw.into_iter()
        .map(|r| {
            Ok(ReplicationRow {
                rep: r.rep,
                method: r.method,
                checkpoint: r.checkpoint_t,
                covered: r.covered,
                statistic: r.statistic,
                flagged: r.flagged,
                error: (!r.error.is_empty()).then_some(r.error),
                contrast_covered: split::<u8>(&r.contrast_covered, path)?.into_iter().map(|b| b == 1).collect(),
                widths: split(&r.widths, path)?,
                theta_hat: split(&r.theta_hat, path)?,
                n_obs: r.n_obs,
            })
        })
        .collect()
}
