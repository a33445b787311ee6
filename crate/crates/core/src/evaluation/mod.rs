//! CLEAR-MOT scoring with sequence-long identity mismatches.
//!
//! At each step the estimates reported at the observed location (with a known
//! position) are matched to the true objects at that location by minimum
//! total distance; pairs farther apart than the gate count as a miss plus a
//! false positive. After all steps, estimated identities are put in
//! one-to-one correspondence with true identities so as to maximize the
//! number of agreeing matches. Every matched pair whose estimate is not the
//! corresponding one counts as a mismatch at that step.

mod hungarian;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use hungarian::hungarian;

use crate::error::{Error, Result};
use crate::model::{GroundTruthFrame, StepReport, TargetId};

pub const DEFAULT_GATE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotCounts {
    pub n_fp: usize,
    pub n_fn: usize,
    pub n_mm: usize,
    /// Total number of true objects over all scored steps.
    pub n_k: usize,
    pub n_matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotScore {
    pub gate: f64,
    pub mota: f64,
    /// Mean matched distance in meters; 0 when nothing matched.
    pub motp: f64,
    pub miss_rate: f64,
    pub fp_rate: f64,
    pub mismatch_rate: f64,
    pub counts: MotCounts,
}

impl MotScore {
    /// Rates use N_K as denominator; a sequence with no true objects uses 1
    /// so that any false positive still lowers the score.
    pub fn from_counts(counts: MotCounts, distance_sum: f64, gate: f64) -> Self {
        let n_k = counts.n_k.max(1) as f64;
        let miss_rate = counts.n_fn as f64 / n_k;
        let fp_rate = counts.n_fp as f64 / n_k;
        let mismatch_rate = counts.n_mm as f64 / n_k;
        Self {
            gate,
            mota: 1.0 - (counts.n_fp + counts.n_fn + counts.n_mm) as f64 / n_k,
            motp: if counts.n_matches > 0 {
                distance_sum / counts.n_matches as f64
            } else {
                0.0
            },
            miss_rate,
            fp_rate,
            mismatch_rate,
            counts,
        }
    }
}

/// Per-step breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub k: usize,
    pub n_truth: usize,
    pub n_estimates: usize,
    pub n_matches: usize,
    pub n_fp: usize,
    pub n_fn: usize,
    pub n_mm: usize,
    pub distance_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub score: MotScore,
    pub steps: Vec<StepScore>,
    /// Estimated identity → true identity.
    pub correspondence: BTreeMap<TargetId, u64>,
}

impl Evaluation {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("k,n_truth,n_estimates,n_matches,n_fp,n_fn,n_mm,distance_sum\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.k, s.n_truth, s.n_estimates, s.n_matches, s.n_fp, s.n_fn, s.n_mm, s.distance_sum
            ));
        }
        out
    }
}

/// Minimum-total-distance matching of estimates to truths; returns
/// (estimate index, truth index, distance) for pairs within `gate`.
pub fn match_step(estimates: &[[f64; 2]], truths: &[[f64; 2]], gate: f64) -> Vec<(usize, usize, f64)> {
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let cost: Vec<Vec<f64>> = estimates
        .iter()
        .map(|e| truths.iter().map(|t| dist(e, t)).collect())
        .collect();
    hungarian(&cost)
        .into_iter()
        .enumerate()
        .filter_map(|(e, t)| t.map(|t| (e, t, cost[e][t])))
        .filter(|&(_, _, d)| d <= gate)
        .collect()
}

/// Scores a track report against ground truth.
pub fn score(report: &[StepReport], truth: &[GroundTruthFrame], gate: f64) -> Result<Evaluation> {
    if !(gate > 0.0) {
        return Err(Error::Validation(format!("gate must be positive: {gate}")));
    }
    if report.len() != truth.len() {
        return Err(Error::Data(format!(
            "report has {} steps, ground truth has {}",
            report.len(),
            truth.len()
        )));
    }
    let mut matches: Vec<Vec<(TargetId, u64, f64)>> = Vec::with_capacity(report.len());
    let mut steps = Vec::with_capacity(report.len());
    for (r, t) in report.iter().zip(truth) {
        if r.k != t.k {
            return Err(Error::Data(format!("report step {} paired with truth step {}", r.k, t.k)));
        }
        let observed = t.observed_location;
        let est: Vec<(TargetId, [f64; 2])> = r
            .targets
            .iter()
            .filter(|s| s.location == Some(observed))
            .filter_map(|s| s.pos.map(|p| (s.id, p)))
            .collect();
        let tru: Vec<(u64, [f64; 2])> = t
            .objects
            .iter()
            .filter(|o| o.alive && o.location == observed)
            .map(|o| (o.id, [o.pos[0], o.pos[1]]))
            .collect();
        let pairs = match_step(
            &est.iter().map(|e| e.1).collect::<Vec<_>>(),
            &tru.iter().map(|t| t.1).collect::<Vec<_>>(),
            gate,
        );
        steps.push(StepScore {
            k: r.k,
            n_truth: tru.len(),
            n_estimates: est.len(),
            n_matches: pairs.len(),
            n_fp: est.len() - pairs.len(),
            n_fn: tru.len() - pairs.len(),
            n_mm: 0,
            distance_sum: pairs.iter().fold(0.0, |acc, p| acc + p.2),
        });
        matches.push(pairs.iter().map(|&(e, t, d)| (est[e].0, tru[t].0, d)).collect());
    }

    let correspondence = best_correspondence(&matches);
    for (s, pairs) in steps.iter_mut().zip(&matches) {
        s.n_mm = pairs
            .iter()
            .filter(|(e, t, _)| correspondence.get(e) != Some(t))
            .count();
    }
    let counts = MotCounts {
        n_fp: steps.iter().map(|s| s.n_fp).sum(),
        n_fn: steps.iter().map(|s| s.n_fn).sum(),
        n_mm: steps.iter().map(|s| s.n_mm).sum(),
        n_k: steps.iter().map(|s| s.n_truth).sum(),
        n_matches: steps.iter().map(|s| s.n_matches).sum(),
    };
    let distance_sum = steps.iter().fold(0.0, |acc, s| acc + s.distance_sum);
    Ok(Evaluation {
        score: MotScore::from_counts(counts, distance_sum, gate),
        steps,
        correspondence,
    })
}

/// One-to-one map from estimated to true identities maximizing the number of
/// matched pairs that agree with it.
fn best_correspondence(matches: &[Vec<(TargetId, u64, f64)>]) -> BTreeMap<TargetId, u64> {
    let mut agree: BTreeMap<(TargetId, u64), usize> = BTreeMap::new();
    for pairs in matches {
        for &(e, t, _) in pairs {
            *agree.entry((e, t)).or_default() += 1;
        }
    }
    let est_ids: Vec<TargetId> = {
        let mut v: Vec<_> = agree.keys().map(|k| k.0).collect();
        v.dedup();
        v
    };
    let mut truth_ids: Vec<u64> = agree.keys().map(|k| k.1).collect();
    truth_ids.sort_unstable();
    truth_ids.dedup();
    let cost: Vec<Vec<f64>> = est_ids
        .iter()
        .map(|e| {
            truth_ids
                .iter()
                .map(|t| -(agree.get(&(*e, *t)).copied().unwrap_or(0) as f64))
                .collect()
        })
        .collect();
    hungarian(&cost)
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (est_ids[i], truth_ids[j])))
        .filter(|(e, t)| agree.contains_key(&(*e, *t)))
        .collect()
}
