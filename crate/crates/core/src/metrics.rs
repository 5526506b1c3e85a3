//! Ranking metrics over leave-one-out candidate lists: AUC, HR@k, NDCG@k
//! and MRR@k, with the tie conventions pinned so runs stay comparable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Scores for one test instance: one positive among the candidates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedSample {
    pub scores: Vec<f64>,
    pub positive_index: usize,
}

impl RankedSample {
    pub fn new(scores: Vec<f64>, positive_index: usize) -> Result<Self, MetricError> {
        if positive_index >= scores.len() {
            return Err(MetricError::Contract(format!(
                "positive index {} out of {} candidates",
                positive_index,
                scores.len()
            )));
        }
        Ok(Self {
            scores,
            positive_index,
        })
    }

    /// 1-based rank of the positive under descending score; ties are broken
    /// by candidate index (lower index ranks first).
    pub fn positive_rank(&self) -> usize {
        let pos = self.positive_index;
        let ps = self.scores[pos];
        let mut rank = 1;
        for (i, &s) in self.scores.iter().enumerate() {
            if i == pos {
                continue;
            }
            if s > ps || (s == ps && i < pos) {
                rank += 1;
            }
        }
        rank
    }
}

fn require_samples(samples: &[RankedSample]) -> Result<(), MetricError> {
    if samples.is_empty() {
        return Err(MetricError::Contract("no samples".into()));
    }
    Ok(())
}

fn require_k(samples: &[RankedSample], k: usize) -> Result<(), MetricError> {
    require_samples(samples)?;
    let max = samples.iter().map(|s| s.scores.len()).max().unwrap_or(0);
    if k == 0 || k > max {
        return Err(MetricError::Contract(format!(
            "k={k} outside [1, {max}]"
        )));
    }
    Ok(())
}

/// Per sample: fraction of negatives scored strictly below the positive,
/// ties counting one half; averaged over samples.
pub fn auc(samples: &[RankedSample]) -> Result<f64, MetricError> {
    require_samples(samples)?;
    let mut total = 0.0;
    for s in samples {
        let ps = s.scores[s.positive_index];
        let mut won = 0.0;
        let n_neg = s.scores.len() - 1;
        for (i, &v) in s.scores.iter().enumerate() {
            if i == s.positive_index {
                continue;
            }
            if v < ps {
                won += 1.0;
            } else if v == ps {
                won += 0.5;
            }
        }
        total += won / n_neg as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Fraction of samples whose positive ranks in the top `k`.
pub fn hr_at_k(samples: &[RankedSample], k: usize) -> Result<f64, MetricError> {
    require_k(samples, k)?;
    let hits = samples.iter().filter(|s| s.positive_rank() <= k).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` within the cutoff,
/// with an ideal gain of 1.
pub fn ndcg_at_k(samples: &[RankedSample], k: usize) -> Result<f64, MetricError> {
    require_k(samples, k)?;
    let total: f64 = samples
        .iter()
        .map(|s| {
            let r = s.positive_rank();
            if r <= k {
                1.0 / ((r + 1) as f64).log2()
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// `1 / rank` within the cutoff, averaged.
pub fn mrr_at_k(samples: &[RankedSample], k: usize) -> Result<f64, MetricError> {
    require_k(samples, k)?;
    let total: f64 = samples
        .iter()
        .map(|s| {
            let r = s.positive_rank();
            if r <= k {
                1.0 / r as f64
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// Full metric table for one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub auc: f64,
    pub hr: Vec<(usize, f64)>,
    pub ndcg: Vec<(usize, f64)>,
    pub mrr: Vec<(usize, f64)>,
    pub n_samples: usize,
    pub fingerprint: String,
    pub seed: u64,
    pub variant: String,
}

impl MetricsReport {
    /// Compute every metric at each cutoff in `ks`.
    pub fn compute(
        samples: &[RankedSample],
        ks: &[usize],
        fingerprint: &str,
        seed: u64,
        variant: &str,
    ) -> Result<Self, MetricError> {
        let mut hr = Vec::new();
        let mut ndcg = Vec::new();
        let mut mrr = Vec::new();
        for &k in ks {
            hr.push((k, hr_at_k(samples, k)?));
            ndcg.push((k, ndcg_at_k(samples, k)?));
            mrr.push((k, mrr_at_k(samples, k)?));
        }
        Ok(Self {
            auc: auc(samples)?,
            hr,
            ndcg,
            mrr,
            n_samples: samples.len(),
            fingerprint: fingerprint.to_string(),
            seed,
            variant: variant.to_string(),
        })
    }

    pub fn get(&self, metric: &str, k: usize) -> Option<f64> {
        let table = match metric {
            "hr" => &self.hr,
            "ndcg" => &self.ndcg,
            "mrr" => &self.mrr,
            _ => return None,
        };
        table.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}
