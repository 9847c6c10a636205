// SPDX-License-Identifier: MIT OR Apache-2.0

//! First-order edge scores: zero-ablation (intervention) and corrupt-run
//! contrast (patching).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interactions::PromptSample;
use crate::model::{Dag, ModelState, RecordLevel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Intervention,
    Patching,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intervention" => Ok(Self::Intervention),
            "patching" => Ok(Self::Patching),
            other => Err(Error::Config(format!("unknown attribution method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// Per-edge score, indexed by DAG edge id.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeScoreMap {
    pub method: Method,
    pub samples: usize,
    /// |I(e)|
    pub scores: Vec<f64>,
    /// Signed first-order estimate of Δ − Δ(intervened).
    pub signed: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScoreDump {
    method: Method,
    samples: usize,
    scores: BTreeMap<String, f64>,
    signed: BTreeMap<String, f64>,
}

impl EdgeScoreMap {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn to_json(&self, dag: &Dag) -> Result<String> {
        let keyed = |v: &[f64]| v.iter().enumerate().map(|(e, &s)| (dag.edge_key(e), s)).collect();
        let dump =
            ScoreDump { method: self.method, samples: self.samples, scores: keyed(&self.scores), signed: keyed(&self.signed) };
        Ok(serde_json::to_string_pretty(&dump)?)
    }

    pub fn from_json(dag: &Dag, json: &str) -> Result<Self> {
        let dump: ScoreDump = serde_json::from_str(json)?;
        let unpack = |m: &BTreeMap<String, f64>| -> Result<Vec<f64>> {
            let mut out = vec![f64::NAN; dag.num_edges()];
            for (k, &v) in m {
                let e = dag.edge_by_key(k).ok_or_else(|| Error::UnknownEdge(k.clone()))?;
                out[e] = v;
            }
            if out.iter().any(|x| x.is_nan()) {
                return Err(Error::Attribution("score map does not cover every edge".into()));
            }
            Ok(out)
        };
        Ok(Self { method: dump.method, samples: dump.samples, scores: unpack(&dump.scores)?, signed: unpack(&dump.signed)? })
    }

    fn check(&self, state: &ModelState) -> Result<()> {
        if let Some(e) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score of edge {}", state.dag().edge_key(e))));
        }
        Ok(())
    }
}

fn score_from_grads(
    state: &ModelState,
    method: Method,
    delta_msg: impl Fn(usize) -> Vec<f64>,
    grads: &[Vec<f64>],
) -> EdgeScoreMap {
    let dag = state.dag();
    let signed: Vec<f64> = (0..dag.num_edges())
        .map(|e| {
            let v = dag.edges()[e].1;
            delta_msg(e).iter().zip(&grads[v]).map(|(a, b)| a * b).sum()
        })
        .collect();
    EdgeScoreMap { method, samples: 1, scores: signed.iter().map(|s: &f64| s.abs()).collect(), signed }
}

/// I(e) = |mᵀ ∂Δ/∂v| from one forward and one backward pass.
pub fn score_intervention(state: &ModelState, sample: &PromptSample) -> Result<EdgeScoreMap> {
    let rec = state.forward(&sample.tokens, RecordLevel::MessagesAndGrads)?;
    let grads = rec.node_grads.as_ref().expect("grads recorded");
    let map = score_from_grads(state, Method::Intervention, |e| rec.message(e).expect("messages recorded").to_vec(), grads);
    map.check(state)?;
    Ok(map)
}

/// I(e) = |(m* − m)ᵀ ∂Δ/∂v| with m* from a clean run on `corrupt` and the
/// gradient from the clean run on `sample`.
pub fn score_patching(state: &ModelState, sample: &PromptSample, corrupt: &PromptSample) -> Result<EdgeScoreMap> {
    if sample.tokens.len() != corrupt.tokens.len() {
        return Err(Error::Attribution(format!(
            "corrupt prompt has {} tokens, original has {}",
            corrupt.tokens.len(),
            sample.tokens.len()
        )));
    }
    let rec = state.forward(&sample.tokens, RecordLevel::MessagesAndGrads)?;
    let star = state.forward(&corrupt.tokens, RecordLevel::Messages)?;
    let grads = rec.node_grads.as_ref().expect("grads recorded");
    let map = score_from_grads(
        state,
        Method::Patching,
        |e| {
            let m = rec.message(e).expect("messages recorded");
            star.message(e).expect("messages recorded").iter().zip(m).map(|(a, b)| a - b).collect()
        },
        grads,
    );
    map.check(state)?;
    Ok(map)
}

/// Per-edge mean (or max) over maps with the same method.
pub fn aggregate(maps: &[EdgeScoreMap], how: Aggregation) -> Result<EdgeScoreMap> {
    let first = maps.first().ok_or_else(|| Error::Attribution("cannot aggregate an empty set of score maps".into()))?;
    if maps.iter().any(|m| m.method != first.method || m.len() != first.len()) {
        return Err(Error::Attribution("score maps disagree on method or edge count".into()));
    }
    let n = first.len();
    let total: usize = maps.iter().map(|m| m.samples).sum();
    let (scores, signed) = match how {
        Aggregation::Mean => {
            let w: Vec<f64> = maps.iter().map(|m| m.samples as f64 / total as f64).collect();
            let avg = |f: &dyn Fn(&EdgeScoreMap) -> &Vec<f64>| {
                (0..n).map(|e| maps.iter().zip(&w).map(|(m, w)| w * f(m)[e]).sum()).collect::<Vec<f64>>()
            };
            (avg(&|m| &m.scores), avg(&|m| &m.signed))
        }
        Aggregation::Max => {
            let mut scores = vec![f64::NEG_INFINITY; n];
            let mut signed = vec![0.0; n];
            for m in maps {
                for e in 0..n {
                    if m.scores[e] > scores[e] {
                        scores[e] = m.scores[e];
                        signed[e] = m.signed[e];
                    }
                }
            }
            (scores, signed)
        }
    };
    Ok(EdgeScoreMap { method: first.method, samples: total, scores, signed })
}

/// Scores every sample (in parallel) and aggregates. `corrupt` must pair
/// one-to-one with `samples` for patching.
pub fn score_set(
    state: &ModelState,
    samples: &[&PromptSample],
    method: Method,
    corrupt: Option<&[PromptSample]>,
    how: Aggregation,
) -> Result<EdgeScoreMap> {
    let maps: Vec<EdgeScoreMap> = match method {
        Method::Intervention => samples.par_iter().map(|s| score_intervention(state, s)).collect::<Result<_>>()?,
        Method::Patching => {
            let corrupt = corrupt.ok_or_else(|| Error::Attribution("patching needs corrupt samples".into()))?;
            if corrupt.len() != samples.len() {
                return Err(Error::Attribution("one corrupt sample per sample is required".into()));
            }
            samples
                .par_iter()
                .zip(corrupt.par_iter())
                .map(|(s, c)| score_patching(state, s, c))
                .collect::<Result<_>>()?
        }
    };
    aggregate(&maps, how)
}

/// Gini coefficient of non-negative values (0 = uniform, → 1 = concentrated).
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let weighted: f64 = v.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x).sum();
    (2.0 * weighted) / (n as f64 * total) - (n as f64 + 1.0) / n as f64
}

/// Spearman rank correlation with tie-averaged ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}
