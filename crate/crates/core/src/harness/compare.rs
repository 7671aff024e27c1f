use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{usage, Error, Result};
use crate::stats::{median, sign_test};

use super::CurveRow;

pub const CURVE_METRICS: [&str; 4] = ["mean_return_rmle", "mean_return_true", "subopt_exact", "kl_to_ref"];

/// One training run's metric trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedCurve {
    pub seed: u64,
    pub replicate: u64,
    pub iters: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub metric: String,
    pub pairs: usize,
    pub median_final_a: f64,
    pub median_final_b: f64,
    /// Median over pairs of `AUC(a) − AUC(b)`, with AUC the sum over iterations.
    pub median_auc_diff: f64,
    pub sign_positive: u64,
    pub sign_negative: u64,
    pub p_value: f64,
}

fn metric_of(row: &CurveRow, metric: &str) -> Result<f64> {
    Ok(match metric {
        "mean_return_rmle" => row.mean_return_rmle,
        "mean_return_true" => row.mean_return_true,
        "subopt_exact" => row.subopt_exact,
        "kl_to_ref" => row.kl_to_ref,
        _ => return Err(usage(format!("unknown metric {metric:?}; expected one of {}", CURVE_METRICS.join(", ")))),
    })
}

/// Curves of `group` (every group when `None`) from a `curves.csv` file.
pub fn load_curves(path: &Path, group: Option<&str>, metric: &str) -> Result<Vec<SeedCurve>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut by_run: BTreeMap<(u64, u64), SeedCurve> = BTreeMap::new();
    let mut groups = std::collections::BTreeSet::new();
    for row in reader.deserialize::<CurveRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        if group.is_some_and(|g| g != row.group) {
            continue;
        }
        groups.insert(row.group.clone());
        let value = metric_of(&row, metric)?;
        let c = by_run.entry((row.seed, row.replicate)).or_insert_with(|| SeedCurve {
            seed: row.seed,
            replicate: row.replicate,
            iters: Vec::new(),
            values: Vec::new(),
        });
        c.iters.push(row.iter);
        c.values.push(value);
    }
    if groups.len() > 1 {
        let names: Vec<_> = groups.into_iter().collect();
        return Err(usage(format!("{} holds several groups ({}); pick one", path.display(), names.join(", "))));
    }
    Ok(by_run.into_values().collect())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Usage(format!("{}: {e}", path.display()))
}

/// Paired comparison of two sets of runs on the same seeds and iteration grid.
pub fn compare(a: &[SeedCurve], b: &[SeedCurve], metric: &str) -> Result<CompareSummary> {
    if a.is_empty() {
        return Err(usage("no runs to compare"));
    }
    let key = |c: &SeedCurve| (c.seed, c.replicate);
    let mut ka: Vec<_> = a.iter().map(key).collect();
    let mut kb: Vec<_> = b.iter().map(key).collect();
    ka.sort_unstable();
    kb.sort_unstable();
    if ka != kb {
        return Err(usage("the two logs cover different seeds"));
    }
    let b_by: BTreeMap<_, _> = b.iter().map(|c| (key(c), c)).collect();
    let (mut fa, mut fb, mut diffs) = (Vec::new(), Vec::new(), Vec::new());
    for ca in a {
        let cb = b_by[&key(ca)];
        if ca.iters != cb.iters || ca.iters.is_empty() {
            return Err(usage(format!("seed {}: iteration grids differ or are empty", ca.seed)));
        }
        fa.push(*ca.values.last().expect("nonempty"));
        fb.push(*cb.values.last().expect("nonempty"));
        diffs.push(ca.values.iter().sum::<f64>() - cb.values.iter().sum::<f64>());
    }
    let t = sign_test(&diffs);
    Ok(CompareSummary {
        metric: metric.to_string(),
        pairs: diffs.len(),
        median_final_a: median(&fa)?,
        median_final_b: median(&fb)?,
        median_auc_diff: median(&diffs)?,
        sign_positive: t.positive,
        sign_negative: t.negative,
        p_value: t.p_two_sided,
    })
}
