//! Config-driven experiment runs: seeded sweeps fanned out over a worker
//! pool, merged in a fixed order, and written as CSV plus a JSON summary.

mod compare;
mod config;
mod experiments;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use compare::{compare, load_curves, CompareSummary, SeedCurve, CURVE_METRICS};
pub use config::{load_json, parse_json, ExperimentConfig, Experiment, ExploreSweep, RlExperiment, TheoryBound};

use crate::error::{Error, Result};
use crate::optimizers::TrainRecord;
use crate::stats::{median, quantile};

/// Worker-count variable; unset means one worker per core.
pub const WORKERS_ENV: &str = "RTOLAB_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub seed: u64,
    /// `key=value` pairs joined by `;`.
    pub group: String,
    /// Tree index, instance seed, or 0 when there is a single unit per seed.
    pub replicate: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub group: String,
    pub seed: u64,
    pub replicate: u64,
    pub iter: usize,
    pub episodes: usize,
    pub mean_return_rmle: f64,
    pub mean_return_true: f64,
    pub subopt_exact: f64,
    pub kl_to_ref: f64,
}

impl CurveRow {
    fn from_record(group: &str, seed: u64, replicate: u64, r: &TrainRecord) -> Self {
        CurveRow {
            group: group.to_string(),
            seed,
            replicate,
            iter: r.iter,
            episodes: r.episodes,
            mean_return_rmle: r.mean_return_rmle,
            mean_return_true: r.mean_return_true,
            subopt_exact: r.subopt_exact,
            kl_to_ref: r.kl_to_ref,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedError {
    pub seed: u64,
    pub group: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub metric: String,
    pub count: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultTable {
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ResultRow>,
    pub curves: Vec<CurveRow>,
    pub errors: Vec<SeedError>,
}

/// What one task hands back to the merge.
#[derive(Debug, Default)]
struct Shard {
    rows: Vec<ResultRow>,
    curves: Vec<CurveRow>,
    errors: Vec<SeedError>,
}

impl Shard {
    fn failed(kind: &str, seed: u64, group: String, err: &Error) -> Self {
        Shard {
            rows: vec![ResultRow {
                experiment: kind.to_string(),
                seed,
                group: group.clone(),
                replicate: 0,
                metric: "error".into(),
                value: f64::NAN,
            }],
            curves: Vec::new(),
            errors: vec![SeedError { seed, group, message: err.to_string() }],
        }
    }
}

/// Independent RNG stream `tag` under `seed`.
pub(crate) fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Worker count from the environment, or `None` to let rayon decide.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{WORKERS_ENV}: expected a positive integer, got {v:?}"))),
        },
    }
}

/// Runs every seed of `cfg`. Per-seed failures become error rows; the
/// run itself fails only on setup problems.
pub fn run(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ResultTable> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    let shards = pool.install(|| experiments::execute(cfg));
    let mut table = ResultTable {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        rows: Vec::new(),
        curves: Vec::new(),
        errors: Vec::new(),
    };
    for s in shards {
        table.rows.extend(s.rows);
        table.curves.extend(s.curves);
        table.errors.extend(s.errors);
    }
    Ok(table)
}

/// Maps `f` over `items` on the current pool, keeping input order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.par_iter().map(f).collect()
}

impl ResultTable {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    /// Values of `metric` in `group` as `(seed, replicate, value)`.
    pub fn values(&self, group: &str, metric: &str) -> Vec<(u64, u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.group == group && r.metric == metric)
            .map(|r| (r.seed, r.replicate, r.value))
            .collect()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.rows.iter().map(|r| r.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Median and quartiles per (group, metric); NaN values are skipped.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut cells: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            if !r.value.is_nan() {
                cells.entry((&r.group, &r.metric)).or_default().push(r.value);
            }
        }
        cells
            .into_iter()
            .map(|((group, metric), v)| {
                let q25 = quantile(&v, 0.25).unwrap_or(f64::NAN);
                let q75 = quantile(&v, 0.75).unwrap_or(f64::NAN);
                SummaryRow {
                    group: group.to_string(),
                    metric: metric.to_string(),
                    count: v.len(),
                    median: median(&v).unwrap_or(f64::NAN),
                    q25,
                    q75,
                    iqr: q75 - q25,
                }
            })
            .collect()
    }

    pub fn rows_csv(&self) -> Result<String> {
        to_csv(&self.rows)
    }

    pub fn curves_csv(&self) -> Result<String> {
        to_csv(&self.curves)
    }

    pub fn summary_csv(&self) -> Result<String> {
        to_csv(&self.summary())
    }

    pub fn summary_json(&self, config: &ExperimentConfig, git_revision: &str) -> Result<String> {
        let doc = serde_json::json!({
            "name": self.name,
            "experiment": config.experiment.kind(),
            "config_hash": self.config_hash,
            "git_revision": git_revision,
            "seeds": self.seeds,
            "rows": self.rows.len(),
            "summary": self.summary(),
            "errors": self.errors,
            "config": config,
        });
        let mut s = serde_json::to_string_pretty(&doc)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `results.csv`, `summary.csv`, `summary.json` and, when
    /// present, `curves.csv` into `dir`.
    pub fn write(&self, dir: &Path, config: &ExperimentConfig, git_revision: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), self.rows_csv()?)?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv()?)?;
        std::fs::write(dir.join("summary.json"), self.summary_json(config, git_revision)?)?;
        if !self.curves.is_empty() {
            std::fs::write(dir.join("curves.csv"), self.curves_csv()?)?;
        }
        Ok(())
    }

    /// One line per error, for terminal output.
    pub fn error_report(&self) -> String {
        let mut s = String::new();
        for e in &self.errors {
            let _ = writeln!(s, "seed {} [{}]: {}", e.seed, e.group, e.message);
        }
        s
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Usage(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Usage(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Usage(format!("csv: {e}")))
}
