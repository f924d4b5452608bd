//! Hyperparameter grids over the loss weights and the structural share.

use std::fs;
use std::path::{Path, PathBuf};

use cig_core::config::Config;
use cig_core::data::split_folds;
use serde::{Deserialize, Serialize};

use crate::{fold_averaged, load_dataset, runtime, write_json, CliError, CliResult, RunManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Tau,
    Lambda,
    Alpha,
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Lambda => "lambda",
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
        }
    }

    fn apply(self, cfg: &mut Config, value: f64) {
        match self {
            SweepParam::Tau => cfg.sf.tau = value,
            SweepParam::Lambda => cfg.loss.lambda = value,
            SweepParam::Alpha => cfg.loss.alpha = value,
            SweepParam::Beta => cfg.loss.beta = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

fn number(s: &str, axis: &str) -> CliResult<f64> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CliError::Usage(format!("sweep {axis}: `{s}` is not a number")))
}

/// Rounds away binary noise from range arithmetic (0.1 + 2·0.1 → 0.3).
fn tidy(v: f64) -> f64 {
    (v * 1e10).round() / 1e10
}

/// Parses `name=v1,v2,...` or the inclusive range `name=start:stop:step`.
pub fn parse_axis(spec: &str) -> CliResult<GridAxis> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("sweep parameter `{spec}` must look like name=values")))?;
    let param = match name.trim() {
        "tau" => SweepParam::Tau,
        "lambda" => SweepParam::Lambda,
        "alpha" => SweepParam::Alpha,
        "beta" => SweepParam::Beta,
        other => {
            return Err(CliError::Usage(format!(
                "unknown sweep parameter `{other}` (tau, lambda, alpha, beta)"
            )))
        }
    };
    let parts: Vec<&str> = values.split(':').collect();
    let values = match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (number(start, name)?, number(stop, name)?, number(step, name)?);
            if step <= 0.0 || stop < start {
                return Err(CliError::Usage(format!(
                    "sweep {name}: range needs start <= stop and step > 0"
                )));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
            (0..n).map(|i| tidy(start + i as f64 * step)).collect()
        }
        [list] => list
            .split(',')
            .map(|v| number(v, name))
            .collect::<CliResult<Vec<_>>>()?,
        _ => return Err(CliError::Usage(format!("sweep {name}: malformed values `{values}`"))),
    };
    if values.is_empty() {
        return Err(CliError::Usage(format!("sweep {name}: no values")));
    }
    Ok(GridAxis { param, values })
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn expand(axes: &[GridAxis]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

/// Resolved configs for every grid point; any invalid value fails the whole grid.
pub fn grid_configs(base: &Config, axes: &[GridAxis]) -> CliResult<Vec<(Vec<f64>, Config)>> {
    let mut seen = std::collections::BTreeSet::new();
    for a in axes {
        if !seen.insert(a.param.name()) {
            return Err(CliError::Usage(format!("sweep parameter `{}` given twice", a.param.name())));
        }
    }
    expand(axes)
        .into_iter()
        .map(|point| {
            let mut cfg = base.clone();
            for (axis, &v) in axes.iter().zip(&point) {
                axis.param.apply(&mut cfg, v);
            }
            let cfg = cfg
                .resolve()
                .map_err(|e| CliError::Usage(format!("invalid grid point {point:?}: {e}")))?;
            Ok((point, cfg))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: Vec<(String, f64)>,
    pub acc: f64,
    pub mae: f64,
    pub acc_spread: f64,
    pub mae_spread: f64,
    pub folds: usize,
}

/// Runs every grid point on the same fold split and writes `sweep.csv`
/// (one row per point) and `sweep.json` to `<runs_root>/<name>`.
pub fn cmd_sweep(
    base: &Config,
    axes: &[GridAxis],
    max_folds: Option<usize>,
    name: &str,
    runs_root: &Path,
) -> CliResult<PathBuf> {
    let grid = grid_configs(base, axes)?;
    let ds = load_dataset(base)?;
    let split = split_folds(&ds, base.eval.n_folds, base.train.seed)?;
    let n_folds = max_folds.unwrap_or(split.folds.len()).clamp(1, split.folds.len());
    let folds = &split.folds[..n_folds];

    let dir = runs_root.join(name);
    fs::create_dir_all(&dir).map_err(|e| runtime(&dir, e))?;
    let mut manifest = RunManifest::start(name, "sweep", base)?;
    manifest.dataset_hash = Some(ds.content_hash());
    write_json(&dir.join("manifest.json"), &manifest)?;

    let csv_path = dir.join("sweep.csv");
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| runtime(&csv_path, e))?;
    let mut header: Vec<String> = axes.iter().map(|a| a.param.name().to_string()).collect();
    header.extend(["acc", "mae", "acc_spread", "mae_spread", "folds"].map(String::from));
    csv.write_record(&header).map_err(|e| runtime(&csv_path, e))?;

    let mut rows = Vec::with_capacity(grid.len());
    for (i, (point, cfg)) in grid.iter().enumerate() {
        log::info!("grid point {}/{}: {point:?}", i + 1, grid.len());
        let cv = fold_averaged(cfg, &ds, folds)?;
        let row = SweepRow {
            params: axes
                .iter()
                .zip(point)
                .map(|(a, &v)| (a.param.name().to_string(), v))
                .collect(),
            acc: cv.acc.mean,
            mae: cv.mae.mean,
            acc_spread: cv.acc.spread,
            mae_spread: cv.mae.spread,
            folds: n_folds,
        };
        let mut record: Vec<String> = point.iter().map(f64::to_string).collect();
        record.extend([row.acc, row.mae, row.acc_spread, row.mae_spread].map(|v| v.to_string()));
        record.push(n_folds.to_string());
        csv.write_record(&record).map_err(|e| runtime(&csv_path, e))?;
        csv.flush().map_err(|e| runtime(&csv_path, e))?;
        rows.push(row);
    }
    write_json(&dir.join("sweep.json"), &rows)?;
    manifest.artifacts.insert("csv".into(), "sweep.csv".into());
    manifest.artifacts.insert("rows".into(), "sweep.json".into());
    manifest.finish();
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(dir)
}
