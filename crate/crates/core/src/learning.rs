//! EM parameter learning.
//!
//! The E-step is a full filter run. From the final weighted particle set the
//! M-step reads, per target, the steps where it jumped and the steps where it
//! was associated, smooths the positions within each jump-free segment, and
//! re-estimates the jump probability, the spatial process covariance and the
//! feature measurement covariance. Estimates are kept per target instance and
//! pooled over all instances (`joint`); the filter consumes the pooled ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::Parameters;
use crate::error::{Error, Result};
use crate::kalman::{feature_smoothed_mean, rts_smooth, symmetrize, FilteredTrack, SmoothedTrack};
use crate::model::{JumpKind, ObservationFrame, Particle, TargetId, TargetTrack};
use crate::parallel::ExecutionMode;
use crate::rbpf::{run_filter, FilterConfig, DEFAULT_EXACT_THRESHOLD};

/// One associated step of a target.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociatedStep {
    pub k: usize,
    pub measurement: usize,
    /// Filtered spatial estimate right after the update at `k`.
    pub mean_s: Vector2<f64>,
    pub cov_s: Matrix2<f64>,
}

/// Jump and association structure of one target in one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSegments {
    pub id: TargetId,
    /// Steps with a jump, preceded by the sentinel 0.
    pub jumps: Vec<usize>,
    /// `segments[n]`: associated steps in `[jumps[n], jumps[n+1])`.
    pub segments: Vec<Vec<AssociatedStep>>,
    /// Jumps that left a known location; re-entries from the unknown state
    /// continue an earlier jump and are not counted.
    pub n_jump_events: usize,
    pub alive_steps: usize,
}

impl TargetSegments {
    pub fn from_track(t: &TargetTrack, last_step: usize) -> Self {
        let mut jumps = vec![0];
        let mut segments = vec![Vec::new()];
        let mut n_jump_events = 0;
        for rec in t.history.to_vec() {
            if let Some(kind) = rec.jump {
                if kind == JumpKind::FromKnown {
                    n_jump_events += 1;
                }
                if rec.k != *jumps.last().unwrap() {
                    jumps.push(rec.k);
                    segments.push(Vec::new());
                }
            }
            if let Some(a) = rec.association {
                segments.last_mut().unwrap().push(AssociatedStep {
                    k: rec.k,
                    measurement: a.measurement,
                    mean_s: a.mean_s,
                    cov_s: a.cov_s,
                });
            }
        }
        Self {
            id: t.id,
            jumps,
            segments,
            n_jump_events,
            alive_steps: t.alive_steps(last_step),
        }
    }

    pub fn segment_steps(&self, n: usize) -> Vec<usize> {
        self.segments[n].iter().map(|s| s.k).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSegments {
    pub weight: f64,
    pub targets: Vec<TargetSegments>,
}

/// Segment structure of every target in every particle.
pub fn extract_segments(particles: &[Particle], last_step: usize) -> Vec<ParticleSegments> {
    particles
        .iter()
        .map(|p| ParticleSegments {
            weight: p.weight(),
            targets: p
                .all_targets()
                .map(|t| TargetSegments::from_track(t, last_step))
                .collect(),
        })
        .collect()
}

/// Mean revisit gap of the observed locations, weighted by measurement count.
pub fn mean_absence(frames: &[ObservationFrame]) -> Result<f64> {
    let mut last_visit: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut num, mut den) = (0.0, 0.0);
    for f in frames {
        if let Some(prev) = last_visit.insert(f.location, f.k) {
            let m = f.measurements.len() as f64;
            num += m * (f.k - prev) as f64;
            den += m;
        }
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(Error::Data(
            "δ̃ undefined: no measurements at a previously visited location".into(),
        ))
    }
}

/// Weighted ratio estimates, per instance and pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEstimate<T> {
    pub per_instance: BTreeMap<TargetId, T>,
    pub joint: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpEstimate {
    pub per_instance_raw: BTreeMap<TargetId, f64>,
    pub joint_raw: Option<f64>,
    /// 1 − (1 − raw)^δ̃ per instance.
    pub per_instance: BTreeMap<TargetId, f64>,
    pub joint: Option<f64>,
}

pub fn corrected_p_jump(raw: f64, delta_tilde: f64) -> f64 {
    1.0 - (1.0 - raw).powf(delta_tilde)
}

/// Weighted jump count over weighted alive-step count.
pub fn estimate_p_jump(segments: &[ParticleSegments], delta_tilde: f64) -> JumpEstimate {
    let mut per: BTreeMap<TargetId, (f64, f64)> = BTreeMap::new();
    for p in segments {
        for t in &p.targets {
            let e = per.entry(t.id).or_default();
            e.0 += p.weight * t.n_jump_events as f64;
            e.1 += p.weight * t.alive_steps as f64;
        }
    }
    let (num, den) = per.values().fold((0.0, 0.0), |a, v| (a.0 + v.0, a.1 + v.1));
    let per_instance_raw: BTreeMap<_, _> = per
        .into_iter()
        .filter(|(_, (_, d))| *d > 0.0)
        .map(|(id, (n, d))| (id, n / d))
        .collect();
    let joint_raw = (den > 0.0).then(|| num / den);
    JumpEstimate {
        per_instance: per_instance_raw
            .iter()
            .map(|(&id, &r)| (id, corrected_p_jump(r, delta_tilde)))
            .collect(),
        joint: joint_raw.map(|r| corrected_p_jump(r, delta_tilde)),
        per_instance_raw,
        joint_raw,
    }
}

/// q*/g for every consecutive pair of a smoothed segment, where g is the
/// number of model steps between the pair.
pub fn process_cov_terms(track: &SmoothedTrack) -> Vec<Matrix2<f64>> {
    (0..track.steps.len().saturating_sub(1))
        .map(|t| {
            let d = track.means[t + 1] - track.means[t];
            let c = track.lag_one[t];
            let q = d * d.transpose() + track.covs[t + 1] + track.covs[t] - c - c.transpose();
            q / (track.steps[t + 1] - track.steps[t]) as f64
        })
        .collect()
}

/// Weighted average of the per-pair process covariance terms. Each input is
/// (particle weight, target id, smoothed segment).
pub fn estimate_process_cov(inputs: &[(f64, TargetId, &SmoothedTrack)]) -> PooledEstimate<Matrix2<f64>> {
    pool(inputs.iter().flat_map(|(w, id, track)| {
        process_cov_terms(track).into_iter().map(move |q| (*w, *id, q))
    }))
}

/// Weighted average of residual outer products against each instance's mean
/// feature. Each input is (particle weight, target id, every feature
/// measurement associated with that target in that particle).
pub fn estimate_feature_cov(inputs: &[(f64, TargetId, &[Vector3<f64>])]) -> PooledEstimate<Matrix3<f64>> {
    pool(inputs.iter().flat_map(|(w, id, feats)| {
        let mean = feature_smoothed_mean(feats).unwrap_or_else(|_| Vector3::zeros());
        feats.iter().map(move |y| {
            let r = y - mean;
            (*w, *id, r * r.transpose())
        })
    }))
}

fn pool<const D: usize>(
    terms: impl Iterator<Item = (f64, TargetId, nalgebra::SMatrix<f64, D, D>)>,
) -> PooledEstimate<nalgebra::SMatrix<f64, D, D>> {
    let mut per: BTreeMap<TargetId, (nalgebra::SMatrix<f64, D, D>, f64)> = BTreeMap::new();
    for (w, id, m) in terms {
        let e = per.entry(id).or_insert((nalgebra::SMatrix::zeros(), 0.0));
        e.0 += m * w;
        e.1 += w;
    }
    let mut num = nalgebra::SMatrix::<f64, D, D>::zeros();
    let mut den = 0.0;
    for (n, d) in per.values() {
        num += n;
        den += d;
    }
    PooledEstimate {
        per_instance: per
            .into_iter()
            .filter(|(_, (_, d))| *d > 0.0)
            .map(|(id, (n, d))| (id, symmetrize(&(n / d))))
            .collect(),
        joint: (den > 0.0).then(|| symmetrize(&(num / den))),
    }
}

/// Which parameters an EM run re-estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnSet {
    pub p_jump: bool,
    pub sigma_q: bool,
    pub r_f: bool,
}

impl LearnSet {
    pub const ALL: LearnSet = LearnSet {
        p_jump: true,
        sigma_q: true,
        r_f: true,
    };

    /// Parses a comma-separated list of `p_jump`, `sigma_q`, `r_f`, or `all`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut set = LearnSet {
            p_jump: false,
            sigma_q: false,
            r_f: false,
        };
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "all" => set = Self::ALL,
                "p_jump" => set.p_jump = true,
                "sigma_q" => set.sigma_q = true,
                "r_f" => set.r_f = true,
                other => {
                    return Err(Error::Validation(format!(
                        "unknown learnable parameter {other:?}; expected p_jump, sigma_q, r_f or all"
                    )))
                }
            }
        }
        if !(set.p_jump || set.sigma_q || set.r_f) {
            return Err(Error::Validation("nothing selected to learn".into()));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub n_iters: usize,
    pub learn: LearnSet,
    pub n_locations: usize,
    pub seed: u64,
    pub mode: ExecutionMode,
    pub exact_threshold: usize,
}

impl EmConfig {
    pub fn new(n_iters: usize, learn: LearnSet, n_locations: usize, seed: u64) -> Self {
        Self {
            n_iters,
            learn,
            n_locations,
            seed,
            mode: ExecutionMode::default(),
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
        }
    }
}

const P_JUMP_RANGE: (f64, f64) = (1e-6, 1.0 - 1e-6);
const MIN_SIGMA_Q: f64 = 1e-6;
const MIN_FEATURE_EIGENVALUE: f64 = 1e-12;

/// One EM iteration: parameters after its M-step and the E-step likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    pub p_jump: f64,
    pub p_jump_raw: Option<f64>,
    pub sigma_q: f64,
    #[serde(with = "crate::config::matrix_rows")]
    pub feature_meas_cov: Matrix3<f64>,
    /// |R^f|^(1/6), a one-dimensional feature noise scale.
    pub sigma_f: f64,
    pub delta_tilde: f64,
    pub log_likelihood: f64,
    pub wall_time_s: f64,
    pub p_jump_per_instance: BTreeMap<TargetId, f64>,
    pub sigma_q_per_instance: BTreeMap<TargetId, f64>,
    /// Selected parameters left unchanged because no data defined them.
    pub undefined: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmReport {
    pub initial: Parameters,
    pub iterations: Vec<EmIteration>,
    #[serde(rename = "final")]
    pub final_params: Parameters,
}

impl EmReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per iteration, for plotting parameter trajectories.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "iteration,p_jump,sigma_q,sigma_f,r_f_00,r_f_01,r_f_02,r_f_11,r_f_12,r_f_22,delta_tilde,log_likelihood,wall_time_s\n",
        );
        for it in &self.iterations {
            let r = &it.feature_meas_cov;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                it.iteration,
                it.p_jump,
                it.sigma_q,
                it.sigma_f,
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 2)],
                it.delta_tilde,
                it.log_likelihood,
                it.wall_time_s
            ));
        }
        out
    }
}

pub fn sigma_f(r_f: &Matrix3<f64>) -> f64 {
    r_f.determinant().max(0.0).powf(1.0 / 6.0)
}

fn floor_eigenvalues(m: &Matrix3<f64>) -> Matrix3<f64> {
    let mut eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.max(MIN_FEATURE_EIGENVALUE));
    symmetrize(&eig.recompose())
}

fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    seed.wrapping_add((iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// M-step estimates gathered from one filter run.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub jump: JumpEstimate,
    pub process: PooledEstimate<Matrix2<f64>>,
    pub feature: PooledEstimate<Matrix3<f64>>,
}

/// Jump, process and feature estimates from the weighted trajectories of
/// `particles`; every segment with two or more associated steps is smoothed
/// with `sigma_q`.
pub fn m_step(frames: &[ObservationFrame], particles: &[Particle], sigma_q: f64, delta_tilde: f64) -> Result<MStep> {
    let first_k = frames.first().map_or(0, |f| f.k);
    let last_k = frames.last().map_or(0, |f| f.k);
    let segments = extract_segments(particles, last_k);
    let jump = estimate_p_jump(&segments, delta_tilde);

    let mut smoothed: Vec<(f64, TargetId, SmoothedTrack)> = Vec::new();
    let mut features: Vec<(f64, TargetId, Vec<Vector3<f64>>)> = Vec::new();
    for p in &segments {
        for t in &p.targets {
            let mut feats = Vec::new();
            for seg in &t.segments {
                for s in seg {
                    let frame = frames
                        .get(s.k - first_k)
                        .ok_or_else(|| Error::Data(format!("association at unknown step {}", s.k)))?;
                    let y = frame.measurements.get(s.measurement).ok_or_else(|| {
                        Error::Data(format!("step {}: no measurement {}", s.k, s.measurement))
                    })?;
                    feats.push(y.feat);
                }
                if seg.len() >= 2 {
                    let track = FilteredTrack {
                        steps: seg.iter().map(|s| s.k).collect(),
                        means: seg.iter().map(|s| s.mean_s).collect(),
                        covs: seg.iter().map(|s| s.cov_s).collect(),
                    };
                    smoothed.push((p.weight, t.id, rts_smooth(&track, sigma_q)?));
                }
            }
            if !feats.is_empty() {
                features.push((p.weight, t.id, feats));
            }
        }
    }
    let process_inputs: Vec<_> = smoothed.iter().map(|(w, id, s)| (*w, *id, s)).collect();
    let feature_inputs: Vec<_> = features.iter().map(|(w, id, f)| (*w, *id, f.as_slice())).collect();
    Ok(MStep {
        jump,
        process: estimate_process_cov(&process_inputs),
        feature: estimate_feature_cov(&feature_inputs),
    })
}

/// Runs `cfg.n_iters` EM iterations starting from `init`.
pub fn em_run(frames: &[ObservationFrame], init: &Parameters, cfg: &EmConfig) -> Result<EmReport> {
    if cfg.n_iters < 1 {
        return Err(Error::Validation("n_iters ≥ 1 required".into()));
    }
    init.validate()?;
    let delta_tilde = mean_absence(frames)?;
    let mut params = init.clone();
    let mut iterations = Vec::with_capacity(cfg.n_iters);
    for iteration in 1..=cfg.n_iters {
        let started = Instant::now();
        let filter_cfg = FilterConfig {
            mode: cfg.mode,
            exact_threshold: cfg.exact_threshold,
            ..FilterConfig::new(params.clone(), cfg.n_locations, iteration_seed(cfg.seed, iteration))
        };
        let (_, state) = run_filter(frames, &filter_cfg)?;
        let est = m_step(frames, &state.particles, params.sigma_q, delta_tilde)?;
        let mut undefined = Vec::new();

        if cfg.learn.p_jump {
            match est.jump.joint {
                Some(p) => params.p_jump = p.clamp(P_JUMP_RANGE.0, P_JUMP_RANGE.1),
                None => undefined.push("p_jump".to_string()),
            }
        }
        if cfg.learn.sigma_q {
            match est.process.joint {
                Some(q) => params.sigma_q = (q.trace() / 2.0).max(0.0).sqrt().max(MIN_SIGMA_Q),
                None => undefined.push("sigma_q".to_string()),
            }
        }
        if cfg.learn.r_f {
            match est.feature.joint {
                Some(r) => params.feature_meas_cov = floor_eigenvalues(&r),
                None => undefined.push("r_f".to_string()),
            }
        }
        for name in &undefined {
            log::warn!("iteration {iteration}: no data to estimate {name}; keeping previous value");
        }
        iterations.push(EmIteration {
            iteration,
            p_jump: params.p_jump,
            p_jump_raw: est.jump.joint_raw,
            sigma_q: params.sigma_q,
            feature_meas_cov: params.feature_meas_cov,
            sigma_f: sigma_f(&params.feature_meas_cov),
            delta_tilde,
            log_likelihood: state.expected_log_likelihood(),
            wall_time_s: started.elapsed().as_secs_f64(),
            p_jump_per_instance: est.jump.per_instance,
            sigma_q_per_instance: est
                .process
                .per_instance
                .iter()
                .map(|(&id, q)| (id, (q.trace() / 2.0).max(0.0).sqrt()))
                .collect(),
            undefined,
        });
        log::info!(
            "EM iteration {iteration}: p_jump {:.5} sigma_q {:.4} sigma_f {:.4} loglik {:.3}",
            params.p_jump,
            params.sigma_q,
            sigma_f(&params.feature_meas_cov),
            state.expected_log_likelihood()
        );
    }
    Ok(EmReport {
        initial: init.clone(),
        iterations,
        final_params: params,
    })
}
