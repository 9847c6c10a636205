// SPDX-License-Identifier: MIT OR Apache-2.0

//! Utility and forgetting metrics, run reports, and the retrain oracle.

mod oracle;

pub use oracle::{oracle_key, retrain_oracle, train_cached, OracleRun};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interactions::PromptSample;
use crate::model::{predict, ModelState, RecordLevel};
use crate::unlearn::AlignmentTrace;

/// Probabilities are clamped to this distance from 0 and 1.
pub const PROB_CLAMP: f64 = 1e-12;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Rank AUC with tie midpoints. `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of samples where `score >= 0.5` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| (s >= 0.5) == (l == 1)).count();
    hits as f64 / scores.len().max(1) as f64
}

/// Mean negative log-likelihood of the labels.
pub fn logloss(scores: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| {
            let p = clamp_prob(s);
            if l == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / scores.len().max(1) as f64
}

/// KL((p, 1−p) ‖ (q, 1−q)) in nats, after clamping.
pub fn binary_kl(p: f64, q: f64) -> f64 {
    let (p, q) = (clamp_prob(p), clamp_prob(q));
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

/// Jensen–Shannon divergence between two binary distributions, in nats.
pub fn binary_jsd(p: f64, q: f64) -> f64 {
    let h = |x: f64, m: f64| if x > 0.0 { x * (x / m).ln() } else { 0.0 };
    let (p, q) = (p.clamp(0.0, 1.0), q.clamp(0.0, 1.0));
    let m = 0.5 * (p + q);
    let kl_pm = h(p, m) + h(1.0 - p, 1.0 - m);
    let kl_qm = h(q, m) + h(1.0 - q, 1.0 - m);
    (0.5 * kl_pm + 0.5 * kl_qm).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    /// Missing when the set has a single class.
    pub auc: Option<f64>,
    pub acc: f64,
    pub logloss: f64,
}

/// AUC, accuracy and log loss of P(Yes) on `samples`.
pub fn auc_acc_logloss(state: &ModelState, samples: &[PromptSample]) -> Result<Utility> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("evaluation set is empty".into()));
    }
    let scores = predict(state, samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.answer.label()).collect();
    Ok(Utility { auc: auc(&scores, &labels), acc: accuracy(&scores, &labels), logloss: logloss(&scores, &labels) })
}

/// Mean binary JSD between two models' answers on the forget set.
pub fn jsd_forget(unlearned: &ModelState, oracle: &ModelState, forget: &[&PromptSample]) -> Result<f64> {
    if forget.is_empty() {
        return Err(Error::EmptyDataset("forget set is empty".into()));
    }
    let mut total = 0.0;
    for s in forget {
        let p = unlearned.forward(&s.tokens, RecordLevel::None)?.yes_prob();
        let q = oracle.forward(&s.tokens, RecordLevel::None)?.yes_prob();
        total += binary_jsd(p, q);
    }
    Ok(total / forget.len() as f64)
}

/// Counts of cos ψ in [−1, −b), [−b, b], (b, 1], plus steps where ψ is undefined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictHistogram {
    pub conflicting: usize,
    pub neutral: usize,
    pub aligned: usize,
    pub undefined: usize,
}

impl ConflictHistogram {
    pub fn defined(&self) -> usize {
        self.conflicting + self.neutral + self.aligned
    }

    /// Share of defined steps in the conflicting bucket.
    pub fn conflict_share(&self) -> f64 {
        if self.defined() == 0 {
            0.0
        } else {
            self.conflicting as f64 / self.defined() as f64
        }
    }
}

pub const HISTOGRAM_EDGE: f64 = 0.02;

pub fn conflict_histogram(trace: &AlignmentTrace) -> ConflictHistogram {
    histogram_of(trace.rows.iter().map(|r| r.cos_psi))
}

pub fn histogram_of(values: impl IntoIterator<Item = Option<f64>>) -> ConflictHistogram {
    let mut h = ConflictHistogram::default();
    for v in values {
        match v {
            None => h.undefined += 1,
            Some(c) if c < -HISTOGRAM_EDGE => h.conflicting += 1,
            Some(c) if c <= HISTOGRAM_EDGE => h.neutral += 1,
            Some(_) => h.aligned += 1,
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub auc: Option<f64>,
    pub acc: f64,
    pub logloss: f64,
    pub jsd_forget: f64,
    pub unlearn_wall_seconds: f64,
    pub conflict_rate: f64,
    pub config: serde_json::Value,
}

pub const RUNS_CSV_HEADER: &str = "label,auc,acc,logloss,jsd_forget,unlearn_wall_seconds,conflict_rate";

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_row(&self) -> String {
        let auc = self.auc.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{auc},{},{},{},{},{}",
            self.label.replace(',', ";"),
            self.acc,
            self.logloss,
            self.jsd_forget,
            self.unlearn_wall_seconds,
            self.conflict_rate
        )
    }

    /// Appends one row to `path`, writing the header if the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{RUNS_CSV_HEADER}")?;
        }
        writeln!(f, "{}", self.csv_row())?;
        Ok(())
    }
}
