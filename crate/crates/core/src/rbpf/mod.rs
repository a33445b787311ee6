//! Rao-Blackwellized particle filter.
//!
//! Each step runs, per particle: Kalman prediction, blocked Gibbs sampling of
//! the joint association, weight update by the proposal normalizer, and
//! Kalman updates of the associated targets. Identity clustering, target
//! count estimation, posterior summaries and resampling then run across the
//! whole particle set.

mod cluster;
mod gibbs;
mod resample;

use std::collections::BTreeMap;

use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use cluster::{cluster_identities, estimate_posteriors, estimate_target_count};
pub use gibbs::{estimate_normalizer, gibbs_sample, Candidate, GibbsProblem, GibbsResult};
pub use resample::{effective_sample_size, resample, systematic_indices};

use crate::config::Parameters;
use crate::error::{Error, Result};
use crate::jump_prior::{effective_birth_prob, row_masses, PrevState, RowMasses};
use crate::kalman::{self, GaussianDensity};
use crate::model::{
    Action, Association, AssociationRecord, DiscreteState, Existence, GaussianEstimate, JumpKind,
    Measurement, ObservationFrame, Particle, Place, StepRecord, StepReport, TargetId, TargetTrack,
    TrackReport,
};
use crate::parallel::{map_indexed, ExecutionMode};

/// Largest subset-table cost for which the normalizer is computed exactly.
pub const DEFAULT_EXACT_THRESHOLD: usize = 1 << 18;

/// ln of the uniform clutter density 1 / (S^f · A_k).
pub fn clutter_log_likelihood(params: &Parameters) -> f64 {
    -(params.feature_support * params.clutter_area).ln()
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub params: Parameters,
    pub n_locations: usize,
    pub seed: u64,
    /// Resample when ESS < `ess_threshold · n_particles`.
    pub ess_threshold: f64,
    pub exact_threshold: usize,
    pub mode: ExecutionMode,
}

impl FilterConfig {
    pub fn new(params: Parameters, n_locations: usize, seed: u64) -> Self {
        Self {
            params,
            n_locations,
            seed,
            ess_threshold: 0.5,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
            mode: ExecutionMode::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterState {
    pub particles: Vec<Particle>,
    /// Next unused target identity.
    pub next_id: TargetId,
    /// Earlier visits per location.
    pub visit_counts: Vec<usize>,
    /// Index of the last processed frame.
    pub k: Option<usize>,
    /// Per step: ln Σ_i w_{k-1}^i Z_k^i.
    pub log_normalizers: Vec<f64>,
}

impl FilterState {
    pub fn new(n_particles: usize, n_locations: usize) -> Self {
        let uniform = -(n_particles.max(1) as f64).ln();
        Self {
            particles: (0..n_particles.max(1)).map(|_| Particle::empty(uniform)).collect(),
            next_id: 0,
            visit_counts: vec![0; n_locations],
            k: None,
            log_normalizers: Vec::new(),
        }
    }

    /// Sum over steps of the log weighted-mean normalizer.
    pub fn expected_log_likelihood(&self) -> f64 {
        self.log_normalizers.iter().sum()
    }
}

fn particle_rng(seed: u64, k: usize, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 24) | i as u64);
    rng
}

fn resample_rng(seed: u64, k: usize) -> ChaCha8Rng {
    particle_rng(seed, k, (1 << 24) - 1)
}

fn ln0(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

fn log_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + values.iter().map(|v| (v - hi).exp()).sum::<f64>().ln()
}

/// Inputs shared by every particle during one step.
struct StepContext<'a> {
    params: &'a Parameters,
    k: usize,
    location: usize,
    n_locations: usize,
    p_birth_eff: f64,
    ln_clutter: f64,
}

/// Prior and likelihood terms of one alive target.
struct TargetTerms {
    row: RowMasses,
    /// ln(stay mass · likelihood ratio) per measurement.
    ln_stay: Vec<f64>,
    /// ln(jump-here mass · likelihood ratio) per measurement.
    ln_jump: Vec<f64>,
    predicted: GaussianEstimate,
}

fn target_terms(t: &TargetTrack, ys: &[Measurement], ctx: &StepContext) -> Result<TargetTerms> {
    let p = ctx.params;
    let mut row = row_masses(
        PrevState::alive(t.state.place),
        ctx.location,
        ctx.n_locations,
        ctx.p_birth_eff,
        p,
    );
    if ys.is_empty() {
        row = row.folded();
    }
    let predicted = kalman::predict(&t.estimate, ctx.k.saturating_sub(t.last_update), p.sigma_q);
    let mut ln_stay = vec![f64::NEG_INFINITY; ys.len()];
    let mut ln_jump = vec![f64::NEG_INFINITY; ys.len()];
    if row.assoc() > 0.0 {
        let feat = GaussianDensity::new(predicted.mean_f, predicted.cov_f + p.feature_meas_cov)?;
        let spatial = if row.stay_assoc > 0.0 && predicted.spatial_known {
            let r = Matrix2::identity() * (p.sigma_r * p.sigma_r);
            Some(GaussianDensity::new(predicted.mean_s, predicted.cov_s + r)?)
        } else {
            None
        };
        // likelihood ratios against clutter; an unknown position is uniform
        // over the location, i.e. density 1/A_k
        let ln_support = p.feature_support.ln();
        for (m, y) in ys.iter().enumerate() {
            let ln_f = feat.ln_pdf(&y.feat);
            let ln_uniform_pos = ln_f + ln_support;
            ln_jump[m] = ln0(row.jump_here_assoc) + ln_uniform_pos;
            if row.stay_assoc > 0.0 {
                ln_stay[m] = ln0(row.stay_assoc)
                    + match &spatial {
                        Some(s) => s.ln_pdf(&y.pos) + ln_f - ctx.ln_clutter,
                        None => ln_uniform_pos,
                    };
            }
        }
    }
    Ok(TargetTerms {
        row,
        ln_stay,
        ln_jump,
        predicted,
    })
}

fn build_problem(
    particle: &Particle,
    ys: &[Measurement],
    ctx: &StepContext,
) -> Result<(GibbsProblem, Vec<TargetTerms>)> {
    let terms = particle
        .targets
        .iter()
        .map(|t| target_terms(t, ys, ctx))
        .collect::<Result<Vec<_>>>()?;
    let m = ys.len();
    let mut candidates: Vec<Candidate> = terms
        .iter()
        .map(|term| {
            let ln_assoc: Vec<f64> = (0..m).map(|j| log_add(term.ln_stay[j], term.ln_jump[j])).collect();
            Candidate::from_log(&ln_assoc, ln0(term.row.silent()))
        })
        .collect();
    let birth = Candidate::from_log(&vec![ln0(ctx.p_birth_eff); m], ln0(1.0 - ctx.p_birth_eff));
    candidates.extend(std::iter::repeat_n(birth, m));
    Ok((GibbsProblem::new(candidates, terms.len(), m), terms))
}

/// The association problem one particle faces at `frame`: its alive targets
/// followed by one unborn slot per measurement.
pub fn association_problem(
    particle: &Particle,
    frame: &ObservationFrame,
    params: &Parameters,
    n_locations: usize,
    visit_count: usize,
) -> Result<GibbsProblem> {
    let ctx = StepContext {
        params,
        k: frame.k,
        location: frame.location,
        n_locations,
        p_birth_eff: effective_birth_prob(visit_count, params),
        ln_clutter: clutter_log_likelihood(params),
    };
    Ok(build_problem(particle, &frame.measurements, &ctx)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Outcome {
    Stay(Option<usize>),
    JumpHere(Option<usize>),
    JumpAway,
    Dead,
}

fn sample_outcome<R: Rng + ?Sized>(term: &TargetTerms, c: Association, rng: &mut R) -> Outcome {
    match c {
        Association::Measurement(m) => {
            let total = log_add(term.ln_stay[m], term.ln_jump[m]);
            let p_stay = (term.ln_stay[m] - total).exp();
            if rng.gen::<f64>() < p_stay {
                Outcome::Stay(Some(m))
            } else {
                Outcome::JumpHere(Some(m))
            }
        }
        Association::None => {
            let r = &term.row;
            let masses = [r.stay_silent, r.jump_here_silent, r.jump_away, r.dead];
            let total: f64 = masses.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let outcomes = [Outcome::Stay(None), Outcome::JumpHere(None), Outcome::JumpAway, Outcome::Dead];
            for (o, w) in outcomes.iter().zip(masses) {
                if u < w {
                    return *o;
                }
                u -= w;
            }
            outcomes[masses.iter().rposition(|w| *w > 0.0).unwrap_or(0)]
        }
    }
}

/// Spatial block restarted from the measurement; feature block updated.
fn restart_spatial(est: &GaussianEstimate, y: &Measurement, params: &Parameters) -> Result<GaussianEstimate> {
    let (mean_f, cov_f, _) = kalman::update_block(&est.mean_f, &est.cov_f, &y.feat, &params.feature_meas_cov)?;
    Ok(GaussianEstimate {
        mean_s: y.pos,
        cov_s: Matrix2::identity() * (params.sigma_r * params.sigma_r),
        mean_f,
        cov_f,
        spatial_known: true,
    })
}

fn apply_outcome(
    t: &mut TargetTrack,
    term: TargetTerms,
    outcome: Outcome,
    ys: &[Measurement],
    ctx: &StepContext,
) -> Result<()> {
    let p = ctx.params;
    let here = Place::At(ctx.location);
    let prev_place = t.state.place;
    let jump_kind = |to: Place| match (prev_place, to) {
        (Place::At(_), _) => Some(JumpKind::FromKnown),
        (Place::Unknown, Place::At(_)) => Some(JumpKind::Reentry),
        (Place::Unknown, Place::Unknown) => None,
    };
    let (action, place, association, jump) = match outcome {
        Outcome::Stay(c) => (Action::NoJump, prev_place, c, None),
        Outcome::JumpHere(c) => (Action::Jump, here, c, jump_kind(here)),
        Outcome::JumpAway => (Action::Jump, Place::Unknown, None, jump_kind(Place::Unknown)),
        Outcome::Dead => {
            t.died = Some(ctx.k);
            t.state = DiscreteState {
                existence: Existence::Dead,
                action: Action::NoJump,
                place: prev_place,
                association: Association::None,
            };
            return Ok(());
        }
    };
    let mut record = None;
    match (outcome, association) {
        (Outcome::Stay(_), Some(m)) => {
            let y = &ys[m];
            t.estimate = if term.predicted.spatial_known {
                kalman::update(&term.predicted, y, p.sigma_r, &p.feature_meas_cov)?.0
            } else {
                restart_spatial(&term.predicted, y, p)?
            };
            t.last_update = ctx.k;
        }
        (Outcome::JumpHere(_), Some(m)) => {
            t.estimate = restart_spatial(&term.predicted, &ys[m], p)?;
            t.last_update = ctx.k;
        }
        (Outcome::JumpHere(None) | Outcome::JumpAway, _) => {
            t.estimate.spatial_known = false;
        }
        _ => {}
    }
    if let Some(m) = association {
        record = Some(AssociationRecord {
            measurement: m,
            mean_s: t.estimate.mean_s,
            cov_s: t.estimate.cov_s,
        });
    }
    if jump.is_some() || record.is_some() {
        t.history.push(StepRecord {
            k: ctx.k,
            jump,
            association: record,
        });
    }
    t.state = DiscreteState {
        existence: Existence::Alive,
        action,
        place,
        association: association.map_or(Association::None, Association::Measurement),
    };
    Ok(())
}

fn newborn(y: &Measurement, m: usize, ctx: &StepContext) -> TargetTrack {
    let estimate = GaussianEstimate::from_measurement(y, ctx.params.sigma_r, &ctx.params.feature_meas_cov);
    let mut history = crate::model::History::default();
    history.push(StepRecord {
        k: ctx.k,
        jump: None,
        association: Some(AssociationRecord {
            measurement: m,
            mean_s: estimate.mean_s,
            cov_s: estimate.cov_s,
        }),
    });
    TargetTrack {
        id: TargetId::MAX,
        born: ctx.k,
        died: None,
        state: DiscreteState {
            existence: Existence::Alive,
            action: Action::NoJump,
            place: Place::At(ctx.location),
            association: Association::Measurement(m),
        },
        estimate,
        last_update: ctx.k,
        history,
    }
}

struct ParticleStep {
    particle: Particle,
    /// Targets born this step with the measurement they were born from.
    newborns: Vec<(usize, TargetTrack)>,
    ln_z: f64,
    gibbs: GibbsResult,
    /// Ids of the targets alive before the step, in candidate order.
    prior_ids: Vec<TargetId>,
}

fn step_particle(
    mut particle: Particle,
    ys: &[Measurement],
    ctx: &StepContext,
    exact_threshold: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParticleStep> {
    let p = ctx.params;
    let (problem, terms) = build_problem(&particle, ys, ctx)?;
    let gibbs = gibbs_sample(&problem, p.n_burnin, p.n_gibbs, rng);
    let ln_z = estimate_normalizer(&problem, &gibbs, exact_threshold)?;
    let prior_ids = particle.targets.iter().map(|t| t.id).collect();

    let n_targets = terms.len();
    let targets = std::mem::take(&mut particle.targets);
    let mut alive = Vec::with_capacity(targets.len());
    for ((mut t, term), &c) in targets.into_iter().zip(terms).zip(&gibbs.sample) {
        let outcome = sample_outcome(&term, c, rng);
        apply_outcome(&mut t, term, outcome, ys, ctx)?;
        if t.is_alive() {
            alive.push(t);
        } else {
            particle.retired.push(t);
        }
    }
    particle.targets = alive;
    let newborns = gibbs.sample[n_targets..]
        .iter()
        .filter_map(|c| c.index())
        .map(|m| (m, newborn(&ys[m], m, ctx)))
        .collect();
    Ok(ParticleStep {
        particle,
        newborns,
        ln_z,
        gibbs,
        prior_ids,
    })
}

/// Processes one frame: per-particle sampling and updates (in parallel when
/// configured), then clustering, summaries and resampling.
pub fn filter_step(state: &mut FilterState, frame: &ObservationFrame, cfg: &FilterConfig) -> Result<StepReport> {
    let params = &cfg.params;
    if frame.location >= cfg.n_locations {
        return Err(Error::Data(format!(
            "step {}: location {} outside 0..{}",
            frame.k, frame.location, cfg.n_locations
        )));
    }
    if let Some(prev) = state.k {
        if frame.k != prev + 1 {
            return Err(Error::Data(format!(
                "step {} does not follow step {prev}; frames must be consecutive",
                frame.k
            )));
        }
    }
    if state.visit_counts.len() < cfg.n_locations {
        state.visit_counts.resize(cfg.n_locations, 0);
    }
    let ctx = StepContext {
        params,
        k: frame.k,
        location: frame.location,
        n_locations: cfg.n_locations,
        p_birth_eff: effective_birth_prob(state.visit_counts[frame.location], params),
        ln_clutter: clutter_log_likelihood(params),
    };
    let ys = &frame.measurements;
    let n_meas = ys.len();

    let particles = std::mem::take(&mut state.particles);
    let mut steps = map_indexed(cfg.mode, particles, |i, p| {
        let mut rng = particle_rng(cfg.seed, frame.k, i);
        step_particle(p, ys, &ctx, cfg.exact_threshold, &mut rng)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let ln_terms: Vec<f64> = steps.iter().map(|s| s.particle.log_weight + s.ln_z).collect();
    let ln_total = log_sum(ln_terms.iter().copied());
    if !ln_total.is_finite() {
        return Err(Error::Numerical(format!(
            "all particle weights vanished at step {}; check measurement scales against the noise parameters",
            frame.k
        )));
    }
    for (s, lt) in steps.iter_mut().zip(&ln_terms) {
        s.particle.log_weight = lt - ln_total;
    }
    let log_normalizer = ln_total + n_meas as f64 * ctx.ln_clutter;

    // identity votes from targets that were alive before this step
    let mut votes: Vec<BTreeMap<TargetId, f64>> = vec![BTreeMap::new(); n_meas];
    for s in &steps {
        let w = s.particle.log_weight.exp();
        for (j, &id) in s.prior_ids.iter().enumerate() {
            for (m, vote) in votes.iter_mut().enumerate() {
                let f = s.gibbs.target_frequency(j, m, n_meas);
                if f > 0.0 {
                    *vote.entry(id).or_default() += w * f;
                }
            }
        }
    }
    let mut identity = cluster_identities(&votes, params.kappa);
    let mut alternate: Vec<Option<TargetId>> = vec![None; n_meas];
    let mut next_id = state.next_id;
    let mut fresh = || {
        next_id += 1;
        next_id - 1
    };
    for s in steps.iter_mut() {
        for (m, mut t) in std::mem::take(&mut s.newborns) {
            let primary = *identity[m].get_or_insert_with(&mut fresh);
            t.id = if s.particle.contains_id(primary) {
                *alternate[m].get_or_insert_with(&mut fresh)
            } else {
                primary
            };
            let pos = s.particle.targets.partition_point(|x| x.id < t.id);
            s.particle.targets.insert(pos, t);
        }
    }
    state.next_id = next_id;
    state.particles = steps.into_iter().map(|s| s.particle).collect();

    let n_targets = estimate_target_count(&state.particles);
    let report = StepReport {
        k: frame.k,
        location: frame.location,
        n_targets,
        targets: estimate_posteriors(&state.particles, n_targets),
        assignments: identity,
        log_normalizer,
    };

    let mut rng = resample_rng(cfg.seed, frame.k);
    resample(&mut state.particles, cfg.ess_threshold, &mut rng);
    state.visit_counts[frame.location] += 1;
    state.k = Some(frame.k);
    state.log_normalizers.push(log_normalizer);
    Ok(report)
}

/// Runs the filter over a whole log.
pub fn run_filter(frames: &[ObservationFrame], cfg: &FilterConfig) -> Result<(TrackReport, FilterState)> {
    cfg.params.validate()?;
    let mut state = FilterState::new(cfg.params.n_particles, cfg.n_locations);
    let mut report = Vec::with_capacity(frames.len());
    for frame in frames {
        report.push(filter_step(&mut state, frame, cfg)?);
    }
    Ok((report, state))
}
