//! ACC/MAE metrics, per-category reports and minority identification.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{split_folds, OrdinalDataset};
use crate::error::{CigError, Result};
use crate::training::run_training;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub true_label: u32,
    pub predicted_label: u32,
}

impl PredictionRecord {
    pub fn new(true_label: u32, predicted_label: u32) -> Self {
        PredictionRecord {
            true_label,
            predicted_label,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.true_label == self.predicted_label
    }

    pub fn abs_error(&self) -> u64 {
        self.true_label.abs_diff(self.predicted_label) as u64
    }
}

/// Percentage of correct predictions.
pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(CigError::EmptyInput("accuracy"));
    }
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(100.0 * correct as f64 / records.len() as f64)
}

/// Mean absolute label distance.
pub fn mae(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(CigError::EmptyInput("mae"));
    }
    let total: u64 = records.iter().map(PredictionRecord::abs_error).sum();
    Ok(total as f64 / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub acc: f64,
    pub mae: f64,
    pub count: usize,
}

/// Metrics of one category. `acc` and `mae` are `None` when the category has
/// no records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub label: u32,
    pub acc: Option<f64>,
    pub mae: Option<f64>,
    pub count: usize,
    pub correct: usize,
    pub abs_error: u64,
    pub minority: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinorityMetrics {
    pub acc: Option<f64>,
    pub mae: Option<f64>,
    pub labels: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerCategoryReport {
    pub overall: OverallMetrics,
    pub per_category: Vec<CategoryMetrics>,
    pub minority: MinorityMetrics,
}

/// Groups records by true label. Minority flags are left unset; see
/// [`PerCategoryReport::flag_minorities`].
pub fn per_category_metrics(records: &[PredictionRecord], k: usize) -> Result<PerCategoryReport> {
    for r in records {
        for label in [r.true_label, r.predicted_label] {
            if label == 0 || label as usize > k {
                return Err(CigError::LabelOutOfRange { label, k });
            }
        }
    }
    let mut per_category: Vec<CategoryMetrics> = (1..=k as u32)
        .map(|label| CategoryMetrics {
            label,
            acc: None,
            mae: None,
            count: 0,
            correct: 0,
            abs_error: 0,
            minority: false,
        })
        .collect();
    for r in records {
        let c = &mut per_category[r.true_label as usize - 1];
        c.count += 1;
        c.correct += r.is_correct() as usize;
        c.abs_error += r.abs_error();
    }
    for c in per_category.iter_mut().filter(|c| c.count > 0) {
        c.acc = Some(100.0 * c.correct as f64 / c.count as f64);
        c.mae = Some(c.abs_error as f64 / c.count as f64);
    }
    Ok(PerCategoryReport {
        overall: OverallMetrics {
            acc: accuracy(records)?,
            mae: mae(records)?,
            count: records.len(),
        },
        per_category,
        minority: MinorityMetrics {
            acc: None,
            mae: None,
            labels: Vec::new(),
        },
    })
}

/// Labels whose accuracy is more than `gap_threshold` points below the best
/// category. Categories without records are never flagged.
pub fn identify_minorities(report: &PerCategoryReport, gap_threshold: f64) -> BTreeSet<u32> {
    let best = report
        .per_category
        .iter()
        .filter_map(|c| c.acc)
        .fold(f64::NEG_INFINITY, f64::max);
    report
        .per_category
        .iter()
        .filter_map(|c| c.acc.filter(|&a| a < best - gap_threshold).map(|_| c.label))
        .collect()
}

impl PerCategoryReport {
    /// Sets minority flags by the gap rule and fills the minority aggregate.
    pub fn flag_minorities(&mut self, gap_threshold: f64) {
        let labels = identify_minorities(self, gap_threshold);
        for c in self.per_category.iter_mut() {
            c.minority = labels.contains(&c.label);
        }
        self.minority = self.aggregate_over(&labels);
    }

    /// Pooled ACC/MAE over the records of the given categories.
    pub fn aggregate_over(&self, labels: &BTreeSet<u32>) -> MinorityMetrics {
        let (mut count, mut correct, mut abs_error) = (0usize, 0usize, 0u64);
        for c in self.per_category.iter().filter(|c| labels.contains(&c.label)) {
            count += c.count;
            correct += c.correct;
            abs_error += c.abs_error;
        }
        let (acc, mae) = if count > 0 {
            (
                Some(100.0 * correct as f64 / count as f64),
                Some(abs_error as f64 / count as f64),
            )
        } else {
            (None, None)
        };
        MinorityMetrics {
            acc,
            mae,
            labels: labels.iter().copied().collect(),
        }
    }

    /// Count-weighted mean of the per-category accuracies.
    pub fn recombined_accuracy(&self) -> f64 {
        let (num, den) = self
            .per_category
            .iter()
            .filter_map(|c| c.acc.map(|a| (a * c.count as f64, c.count)))
            .fold((0.0, 0usize), |(n, d), (a, c)| (n + a, d + c));
        num / den as f64
    }

    /// Bar-chart table: `label,acc,mae`, with empty cells for categories without records.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,acc,mae\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.per_category {
            let _ = writeln!(out, "{},{},{}", c.label, cell(c.acc), cell(c.mae));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub mean: f64,
    /// max - min over folds.
    pub spread: f64,
    /// Population variance over folds.
    pub variance: f64,
}

impl FoldSummary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(CigError::EmptyInput("fold summary"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(FoldSummary {
            mean,
            spread: max - min,
            variance,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidatedReport {
    /// Fold-averaged report; per-category values average the folds where the
    /// category was present, and minorities are flagged on the averages.
    pub mean: PerCategoryReport,
    pub acc: FoldSummary,
    pub mae: FoldSummary,
    pub folds: Vec<PerCategoryReport>,
}

/// Averages per-fold reports. All reports must cover the same `K`.
pub fn average_reports(folds: &[PerCategoryReport], gap_threshold: f64) -> Result<CrossValidatedReport> {
    let first = folds.first().ok_or(CigError::EmptyInput("fold reports"))?;
    let k = first.per_category.len();
    if folds.iter().any(|f| f.per_category.len() != k) {
        return Err(CigError::shape(
            "fold reports",
            format!("{k} categories each"),
            "differing category counts".to_string(),
        ));
    }
    let accs: Vec<f64> = folds.iter().map(|f| f.overall.acc).collect();
    let maes: Vec<f64> = folds.iter().map(|f| f.overall.mae).collect();
    let acc = FoldSummary::of(&accs)?;
    let mae = FoldSummary::of(&maes)?;
    let mean_of = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let per_category = (0..k)
        .map(|i| {
            let cats: Vec<&CategoryMetrics> = folds.iter().map(|f| &f.per_category[i]).collect();
            CategoryMetrics {
                label: cats[0].label,
                acc: mean_of(cats.iter().filter_map(|c| c.acc).collect()),
                mae: mean_of(cats.iter().filter_map(|c| c.mae).collect()),
                count: cats.iter().map(|c| c.count).sum(),
                correct: cats.iter().map(|c| c.correct).sum(),
                abs_error: cats.iter().map(|c| c.abs_error).sum(),
                minority: false,
            }
        })
        .collect();
    let mut mean = PerCategoryReport {
        overall: OverallMetrics {
            acc: acc.mean,
            mae: mae.mean,
            count: folds.iter().map(|f| f.overall.count).sum(),
        },
        per_category,
        minority: MinorityMetrics {
            acc: None,
            mae: None,
            labels: Vec::new(),
        },
    };
    let labels = identify_minorities(&mean, gap_threshold);
    for c in mean.per_category.iter_mut() {
        c.minority = labels.contains(&c.label);
    }
    let pooled: Vec<&CategoryMetrics> = mean.per_category.iter().filter(|c| c.minority).collect();
    mean.minority = MinorityMetrics {
        acc: mean_of(pooled.iter().filter_map(|c| c.acc).collect()),
        mae: mean_of(pooled.iter().filter_map(|c| c.mae).collect()),
        labels: labels.into_iter().collect(),
    };
    Ok(CrossValidatedReport {
        mean,
        acc,
        mae,
        folds: folds.to_vec(),
    })
}

/// Trains one model per fold (validating on that fold) and averages the
/// final validation reports.
pub fn cross_validated_eval(cfg: &Config, ds: &OrdinalDataset, n_folds: usize) -> Result<CrossValidatedReport> {
    let split = split_folds(ds, n_folds, cfg.train.seed)?;
    let mut reports = Vec::with_capacity(n_folds);
    for (i, fold) in split.folds.iter().enumerate() {
        log::info!("fold {}/{}", i + 1, n_folds);
        let outcome = run_training(cfg, ds, fold, None)?;
        reports.push(outcome.report);
    }
    average_reports(&reports, cfg.eval.gap_threshold)
}
