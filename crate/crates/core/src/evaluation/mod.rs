//! Metrics, experiment harnesses and reports.

mod experiments;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub use experiments::{
    ablation_experiment, robustness_experiment, run_once, sensitivity_experiment, sparsity_experiment,
    write_report, ExperimentOutcome, ExperimentRow, RunResult,
};

/// Exact pairwise counting is used up to this many examples.
pub const PAIRWISE_LIMIT: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub rmse: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub n_examples: usize,
    pub split: String,
    pub config_digest: String,
}

impl MetricReport {
    pub fn labelled(mut self, split: impl Into<String>, digest: impl Into<String>) -> Self {
        self.split = split.into();
        self.config_digest = digest.into();
        self
    }
}

fn check_inputs(predictions: &[f64], labels: &[f64]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("no examples to evaluate".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(Error::Validation(format!("label {l} is not 0 or 1")));
    }
    if predictions.iter().any(|p| !p.is_finite()) {
        return Err(Error::Validation("non-finite prediction".into()));
    }
    Ok(())
}

/// ACC (threshold 0.5, `p ≥ 0.5` predicts correct), RMSE and AUC.
pub fn metrics(predictions: &[f64], labels: &[f64]) -> Result<MetricReport> {
    check_inputs(predictions, labels)?;
    let n = predictions.len();
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= 0.5) == (l == 1.0))
        .count();
    let mse = predictions.iter().zip(labels).map(|(p, l)| (p - l) * (p - l)).sum::<f64>() / n as f64;
    let auc = if n <= PAIRWISE_LIMIT {
        auc_pairwise(predictions, labels)
    } else {
        auc_rank(predictions, labels)
    };
    Ok(MetricReport {
        acc: correct as f64 / n as f64,
        rmse: mse.sqrt(),
        auc,
        n_examples: n,
        split: String::new(),
        config_digest: String::new(),
    })
}

/// Mann–Whitney statistic by counting all positive/negative pairs, ties
/// counted one half.
pub fn auc_pairwise(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1.0).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l != 1.0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() as f64 * neg.len() as f64))
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Rank-sum form of the same statistic, `O(n log n)`.
pub fn auc_rank(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1.0).map(|(r, _)| r).sum();
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either input is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return None;
    }
    Some(num / (da * db).sqrt())
}

/// Short hex SHA-256 of a value's JSON form.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn metric_examples() {
        let r = metrics(&[0.9, 0.8, 0.2, 0.1], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.acc, 1.0);
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(auc_pairwise(&[0.8, 0.7, 0.6, 0.5], &[1.0, 0.0, 1.0, 0.0]), Some(0.75));
        let r = metrics(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert_eq!(r.rmse, 0.5);
        assert_eq!(r.acc, 0.5);
        assert_eq!(r.auc, Some(0.5));
    }

    #[test]
    fn single_class_has_no_auc() {
        let r = metrics(&[0.3, 0.9], &[1.0, 1.0]).unwrap();
        assert_eq!(r.auc, None);
        assert!(metrics(&[], &[]).is_err());
        assert!(metrics(&[0.1], &[0.5]).is_err());
    }

    #[test]
    fn rank_and_pairwise_agree_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(2..300);
            let s: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
            let l: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect();
            match (auc_pairwise(&s, &l), auc_rank(&s, &l)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.65, 0.2];
        let l = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let t: Vec<f64> = s.iter().map(|x: &f64| (3.0 * x).exp()).collect();
        assert_eq!(auc_pairwise(&s, &l), auc_pairwise(&t, &l));
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn digest_is_stable() {
        let a = config_digest(&("x", 1));
        assert_eq!(a, config_digest(&("x", 1)));
        assert_ne!(a, config_digest(&("x", 2)));
        assert_eq!(a.len(), 16);
    }
}
