//! Metrics and reports: exact rank AUC, thresholded accuracy, adversarial
//! transfer matrices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::Classifier;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs in which the
/// positive scores higher, ties counting one half.
///
/// Computed from integer win and tie counts, so `auc(s) + auc(-s) == 1`
/// holds exactly.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = labels.iter().filter(|&&l| l == 1).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    // walk tie groups in ascending order; 2·wins + ties accumulates exactly
    let mut twice_wins: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    let den = 2 * positives * negatives;
    // evaluate the smaller side so that complementary inputs sum to 1 exactly
    Ok(if 2 * twice_wins <= den {
        twice_wins as f64 / den as f64
    } else {
        1.0 - (den - twice_wins) as f64 / den as f64
    })
}

/// Fraction of samples with `(score >= threshold) == (label == 1)`.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s >= threshold) == (**l == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// AUC and accuracy of one model on one labelled batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub auc: f64,
    pub acc: f64,
    pub n: usize,
}

pub fn evaluate<C: Classifier + ?Sized>(model: &C, x: &Tensor, labels: &[u8], batch: usize) -> Result<CellMetrics> {
    let scores = fake_scores(model, x, batch)?;
    Ok(CellMetrics {
        auc: auc(&scores, labels)?,
        acc: accuracy(&scores, labels, DEFAULT_THRESHOLD)?,
        n: labels.len(),
    })
}

/// Fake-class probabilities computed in chunks of `batch`.
pub fn fake_scores<C: Classifier + ?Sized>(model: &C, x: &Tensor, batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.n());
    for chunk in chunks(x.n(), batch) {
        out.extend(model.fake_probs(&x.select(&chunk))?);
    }
    Ok(out)
}

pub(crate) fn chunks(n: usize, batch: usize) -> Vec<Vec<usize>> {
    let b = batch.max(1);
    (0..n).step_by(b).map(|s| (s..(s + b).min(n)).collect()).collect()
}

/// Entry `[s][t]` is model `t`'s accuracy on examples crafted against model `s`.
/// `budget` is the attack's ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub models: Vec<String>,
    pub attack: String,
    pub budget: f64,
    pub accuracy: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.models.len()).map(|i| self.accuracy[i][i]).collect()
    }

    /// Largest white-box entry is strictly below the smallest transfer entry.
    pub fn diagonal_below_off_diagonal(&self) -> bool {
        let n = self.models.len();
        let max_diag = self.diagonal().into_iter().fold(f64::NEG_INFINITY, f64::max);
        let min_off = (0..n)
            .flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t)))
            .map(|(s, t)| self.accuracy[s][t])
            .fold(f64::INFINITY, f64::min);
        max_diag < min_off
    }
}

/// Crafts examples with `craft(source, x, labels)` for every source model
/// and scores every target on them.
pub fn transfer_matrix<C, F>(models: &[&C], attack: &str, budget: f64, x: &Tensor, labels: &[u8], batch: usize, mut craft: F) -> Result<TransferMatrix>
where
    C: Classifier + ?Sized,
    F: FnMut(&C, &Tensor, &[u8]) -> Result<Tensor>,
{
    if models.len() < 2 {
        return Err(Error::Validation("a transfer matrix needs at least two models".into()));
    }
    let mut rows = Vec::new();
    for source in models {
        let mut adv = Vec::with_capacity(x.data().len());
        for chunk in chunks(x.n(), batch) {
            let ys: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            adv.extend(craft(source, &x.select(&chunk), &ys)?.into_vec());
        }
        let adv = Tensor::from_vec(x.shape(), adv)?;
        let mut row = Vec::new();
        for target in models {
            let scores = fake_scores(*target, &adv, batch)?;
            row.push(accuracy(&scores, labels, DEFAULT_THRESHOLD)?);
        }
        rows.push(row);
    }
    Ok(TransferMatrix {
        models: models.iter().map(|m| m.model_id().to_string()).collect(),
        attack: attack.to_string(),
        budget,
        accuracy: rows,
    })
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Key of one generalization cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub train: String,
    pub family: String,
    pub quality: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellResult {
    Ok { auc: f64, acc: f64, n: usize },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    #[serde(flatten)]
    pub key: CellKey,
    pub result: CellResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seeds: Vec<u64>,
    pub config_hash: String,
    /// Seconds since the Unix epoch, or absent for reproducible output.
    pub created_unix: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub meta: ReportMeta,
    pub cells: Vec<CellEntry>,
    pub transfer: Vec<TransferMatrix>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    pub fn new(meta: ReportMeta) -> Self {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            meta,
            cells: Vec::new(),
            transfer: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn push_cell(&mut self, key: CellKey, metrics: Result<CellMetrics>) {
        let result = match metrics {
            Ok(m) => CellResult::Ok {
                auc: m.auc,
                acc: m.acc,
                n: m.n,
            },
            Err(e) => CellResult::Skipped { reason: e.to_string() },
        };
        self.cells.push(CellEntry { key, result });
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.cells {
            if let CellResult::Ok { auc, acc, .. } = c.result {
                if !(0.0..=1.0).contains(&auc) || !(0.0..=1.0).contains(&acc) {
                    return Err(Error::Validation(format!("metric out of range in {:?}", c.key)));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))
    }

    /// Plain-text table of the generalization cells.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<24} {:<10} {:<7} {:>7} {:>7}\n", "train", "family", "quality", "auc", "acc");
        for c in &self.cells {
            let (auc, acc) = match &c.result {
                CellResult::Ok { auc, acc, .. } => (format!("{auc:.4}"), format!("{acc:.4}")),
                CellResult::Skipped { .. } => ("skip".into(), "skip".into()),
            };
            out += &format!("{:<24} {:<10} {:<7} {:>7} {:>7}\n", c.key.train, c.key.family, c.key.quality, auc, acc);
        }
        out
    }
}

/// Hex SHA-256 of a configuration's canonical bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
