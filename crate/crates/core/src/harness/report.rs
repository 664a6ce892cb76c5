//! Report files: `report.csv`, `report.json` and `curves_t<k>.csv`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::run::{Abort, Curve, ExperimentOutcome};
use crate::error::{GpError, Result};

pub const VERSION: &str = concat!("continual-gp ", env!("CARGO_PKG_VERSION"));

/// Column set of `report.csv`, in order.
pub const REPORT_COLUMNS: [&str; 9] = [
    "step",
    "region",
    "channel",
    "n_test",
    "nlpd_mean",
    "nlpd_std",
    "error_rate_mean",
    "error_rate_std",
    "num_inducing",
];

/// Which test points a row scores: one step's region, or all visited regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Region {
    Step(usize),
    /// Sum of the per-region NLPDs.
    GlobalSum,
    /// NLPD and error rate pooled over every visited test point.
    GlobalMean,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Step(t) => write!(f, "{t}"),
            Region::GlobalSum => f.write_str("global_sum"),
            Region::GlobalMean => f.write_str("global_mean"),
        }
    }
}

impl FromStr for Region {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "global_sum" => Ok(Region::GlobalSum),
            "global_mean" => Ok(Region::GlobalMean),
            _ => s.parse().map(Region::Step).map_err(|_| format!("bad region {s:?}")),
        }
    }
}

impl Serialize for Region {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Region {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Mean ± standard deviation across replicas for one (step, region, channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: usize,
    pub region: Region,
    pub channel: usize,
    pub n_test: usize,
    pub nlpd_mean: f64,
    pub nlpd_std: f64,
    pub error_rate_mean: Option<f64>,
    pub error_rate_std: Option<f64>,
    pub num_inducing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub num_inducing: usize,
    /// Bound trace of the first successful replica.
    pub elbo_trace: Vec<f64>,
    /// Final bound value averaged over replicas.
    pub final_elbo: f64,
    pub wall_time_s: f64,
    pub rows: Vec<ReportRow>,
}

impl StepReport {
    pub fn row(&self, region: Region, channel: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.region == region && r.channel == channel)
    }
}

#[derive(Debug, Serialize)]
struct ReportJson<'a> {
    version: &'a str,
    config: &'a super::config::ExperimentConfig,
    replicas_ok: usize,
    aborted: &'a [Abort],
    steps: &'a [StepReport],
}

fn csv_error(path: &Path, e: csv::Error) -> GpError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GpError::io(path, io),
        other => GpError::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `report.csv` contents. Floats use the shortest text that parses back to the same value.
pub fn report_csv(steps: &[StepReport]) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in steps.iter().flat_map(|s| &s.rows) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.region,
            r.channel,
            r.n_test,
            r.nlpd_mean,
            r.nlpd_std,
            opt(r.error_rate_mean),
            opt(r.error_rate_std),
            r.num_inducing
        ));
    }
    out
}

pub fn load_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().ne(REPORT_COLUMNS.iter().copied()) {
        return Err(GpError::Ingestion {
            row: 1,
            column: "<header>".into(),
            message: format!("unexpected columns {headers:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = |c: usize| -> Result<&str> { Ok(rec.get(c).unwrap_or("")) };
        let bad = |c: usize, m: String| GpError::Ingestion {
            row: line,
            column: REPORT_COLUMNS[c].into(),
            message: m,
        };
        let int = |c: usize| -> Result<usize> { field(c)?.parse().map_err(|e| bad(c, format!("{e}"))) };
        let float = |c: usize| -> Result<f64> { field(c)?.parse().map_err(|e| bad(c, format!("{e}"))) };
        let maybe = |c: usize| -> Result<Option<f64>> {
            let s = field(c)?;
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| bad(c, format!("{e}")))
            }
        };
        rows.push(ReportRow {
            step: int(0)?,
            region: field(1)?.parse().map_err(|e| bad(1, e))?,
            channel: int(2)?,
            n_test: int(3)?,
            nlpd_mean: float(4)?,
            nlpd_std: float(5)?,
            error_rate_mean: maybe(6)?,
            error_rate_std: maybe(7)?,
            num_inducing: int(8)?,
        });
    }
    Ok(rows)
}

/// Curve file contents: `x_0..x_{p-1}`, then `mean_d, lower_d, upper_d` per channel.
pub fn curve_csv(curve: &Curve) -> String {
    let p = curve.x.ncols();
    let mut header: Vec<String> = (0..p).map(|j| format!("x_{j}")).collect();
    for d in 0..curve.bands.len() {
        header.extend([format!("mean_{d}"), format!("lower_{d}"), format!("upper_{d}")]);
    }
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..curve.x.nrows() {
        let mut cells: Vec<String> = (0..p).map(|j| curve.x[(i, j)].to_string()).collect();
        for b in &curve.bands {
            cells.extend(b.iter().map(|v| v[i].to_string()));
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| GpError::io(path, e))
}

/// Write `report.csv`, `report.json` and one `curves_t<k>.csv` per step into `outdir`.
pub fn emit_reports(outcome: &ExperimentOutcome, outdir: impl AsRef<Path>) -> Result<()> {
    let outdir = outdir.as_ref();
    std::fs::create_dir_all(outdir).map_err(|e| GpError::io(outdir, e))?;
    write(&outdir.join("report.csv"), &report_csv(&outcome.steps))?;
    let json = ReportJson {
        version: VERSION,
        config: &outcome.config,
        replicas_ok: outcome.replicas_ok,
        aborted: &outcome.aborted,
        steps: &outcome.steps,
    };
    let text = serde_json::to_string_pretty(&json).map_err(|e| GpError::Config(e.to_string()))?;
    write(&outdir.join("report.json"), &text)?;
    for (k, curve) in outcome.curves.iter().enumerate() {
        if let Some(c) = curve {
            write(&outdir.join(format!("curves_t{}.csv", k + 1)), &curve_csv(c))?;
        }
    }
    Ok(())
}
