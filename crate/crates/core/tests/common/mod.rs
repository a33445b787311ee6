//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::io::Write;

use jumptrack::config::Parameters;
use jumptrack::jump_prior::{effective_birth_prob, enumerate_transitions, PrevState, PriorContext};
use jumptrack::model::{Action, Association, Existence, Measurement, Place, TargetTrack};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use statrs::distribution::{Continuous, MultivariateNormal};

/// Prints one criterion line past the test harness's output capture.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{status}] criterion {id:>2} {name}: {detail}");
}

/// Posterior moments of a 2-D random-walk track from one joint Gaussian.
pub struct BatchPosterior {
    pub filtered_means: Vec<Vector2<f64>>,
    pub filtered_covs: Vec<Matrix2<f64>>,
    pub smoothed_means: Vec<Vector2<f64>>,
    pub smoothed_covs: Vec<Matrix2<f64>>,
    /// cov(x_{t+1}, x_t | all observations).
    pub lag_one: Vec<Matrix2<f64>>,
}

/// States x_t at `steps` with x_{t+1} = x_t + w, w ~ N(0, gap·σ_q²·I),
/// x_0 ~ N(prior_mean, prior_cov), and y_t = x_t + v, v ~ N(0, σ_r²·I).
/// Every moment is obtained by conditioning the stacked (x, y) vector.
pub fn batch_posterior(
    prior_mean: Vector2<f64>,
    prior_cov: Matrix2<f64>,
    steps: &[usize],
    ys: &[Vector2<f64>],
    sigma_q: f64,
    sigma_r: f64,
) -> BatchPosterior {
    let obs: Vec<Option<Vector2<f64>>> = ys.iter().copied().map(Some).collect();
    batch_posterior_partial(prior_mean, prior_cov, steps, &obs, sigma_q, sigma_r)
}

/// As [`batch_posterior`], with some states unobserved. Filtered moments at
/// t condition on the observations at indices ≤ t.
pub fn batch_posterior_partial(
    prior_mean: Vector2<f64>,
    prior_cov: Matrix2<f64>,
    steps: &[usize],
    ys: &[Option<Vector2<f64>>],
    sigma_q: f64,
    sigma_r: f64,
) -> BatchPosterior {
    let n = steps.len();
    let d = 2 * n;
    let mut sxx = DMatrix::<f64>::zeros(d, d);
    for s in 0..n {
        for t in 0..n {
            let shared = (steps[s.min(t)] - steps[0]) as f64 * sigma_q * sigma_q;
            let block = prior_cov + Matrix2::identity() * shared;
            sxx.view_mut((2 * s, 2 * t), (2, 2)).copy_from(&block);
        }
    }
    let mu = DVector::from_fn(d, |i, _| prior_mean[i % 2]);

    let condition = |upto: usize| -> (DVector<f64>, DMatrix<f64>) {
        // scalar coordinates of every observation with state index < upto
        let idx: Vec<usize> = (0..upto)
            .filter(|&t| ys[t].is_some())
            .flat_map(|t| [2 * t, 2 * t + 1])
            .collect();
        if idx.is_empty() {
            return (mu.clone(), sxx.clone());
        }
        let o = idx.len();
        let y = DVector::from_fn(o, |i, _| ys[idx[i] / 2].unwrap()[idx[i] % 2]);
        let mu_y = DVector::from_fn(o, |i, _| mu[idx[i]]);
        let syy = DMatrix::from_fn(o, o, |a, b| sxx[(idx[a], idx[b])]) + DMatrix::identity(o, o) * (sigma_r * sigma_r);
        let sxy = DMatrix::from_fn(d, o, |a, b| sxx[(a, idx[b])]);
        let inv = syy.try_inverse().expect("observation covariance is invertible");
        let gain = &sxy * inv;
        let mean = &mu + &gain * (y - mu_y);
        let cov = &sxx - &gain * sxy.transpose();
        (mean, cov)
    };
    let block = |c: &DMatrix<f64>, s: usize, t: usize| -> Matrix2<f64> { c.fixed_view::<2, 2>(2 * s, 2 * t).into_owned() };
    let vec2 = |m: &DVector<f64>, t: usize| Vector2::new(m[2 * t], m[2 * t + 1]);

    let mut filtered_means = Vec::with_capacity(n);
    let mut filtered_covs = Vec::with_capacity(n);
    for t in 0..n {
        let (m, c) = condition(t + 1);
        filtered_means.push(vec2(&m, t));
        filtered_covs.push(block(&c, t, t));
    }
    let (m, c) = condition(n);
    BatchPosterior {
        filtered_means,
        filtered_covs,
        smoothed_means: (0..n).map(|t| vec2(&m, t)).collect(),
        smoothed_covs: (0..n).map(|t| block(&c, t, t)).collect(),
        lag_one: (0..n.saturating_sub(1)).map(|t| block(&c, t + 1, t)).collect(),
    }
}

/// Classical linear-Gaussian EM update of the process covariance for an
/// identity transition with unit spacing.
pub fn classical_process_cov(post: &BatchPosterior) -> Matrix2<f64> {
    let n = post.smoothed_means.len();
    let mut q = Matrix2::zeros();
    for t in 1..n {
        let d = post.smoothed_means[t] - post.smoothed_means[t - 1];
        let c = post.lag_one[t - 1];
        q += d * d.transpose() + post.smoothed_covs[t] + post.smoothed_covs[t - 1] - c - c.transpose();
    }
    q / (n - 1) as f64
}

/// Maximum-likelihood covariance of samples around their (unknown) mean.
pub fn ml_covariance(samples: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = samples.len() as f64;
    let mean = samples.iter().fold(Vector3::zeros(), |a, s| a + s) / n;
    samples.iter().fold(Matrix3::zeros(), |a, s| a + (s - mean) * (s - mean).transpose()) / n
}

fn mvn_ln_pdf(mean: &[f64], cov: &[f64], x: &[f64]) -> f64 {
    MultivariateNormal::new(mean.to_vec(), cov.to_vec())
        .expect("valid Gaussian")
        .ln_pdf(&DVector::from_column_slice(x))
}

/// Exhaustive posterior over joint associations of one particle at one frame.
pub struct Enumeration {
    pub ln_z: f64,
    /// `target[j][c]`, c = 0 silent, c = m + 1 measurement m.
    pub target: Vec<Vec<f64>>,
    /// Probability that measurement m starts a new target.
    pub birth: Vec<f64>,
}

/// Target j's prior-times-likelihood-ratio weights: (per measurement, silent).
fn target_weights(
    t: &TargetTrack,
    k: usize,
    location: usize,
    ys: &[Measurement],
    params: &Parameters,
    n_locations: usize,
    visit_count: usize,
) -> (Vec<f64>, f64) {
    let ctx = PriorContext {
        observed_location: location,
        n_locations,
        m_free: 1,
        visit_count,
        params,
    };
    let gap = (k - t.last_update) as f64;
    let cov_s = t.estimate.cov_s + Matrix2::identity() * (gap * params.sigma_q * params.sigma_q + params.sigma_r * params.sigma_r);
    let cov_f = t.estimate.cov_f + params.feature_meas_cov;
    let clutter = 1.0 / (params.clutter_area * params.feature_support);
    let mut assoc = vec![0.0; ys.len()];
    let mut silent = 0.0;
    for (next, p) in enumerate_transitions(PrevState::alive(t.state.place), &ctx) {
        match next.association {
            Association::None => silent += p,
            Association::Measurement(_) => {
                assert_eq!(next.existence, Existence::Alive);
                assert_eq!(next.place, Place::At(location));
                for (m, y) in ys.iter().enumerate() {
                    let f = mvn_ln_pdf(t.estimate.mean_f.as_slice(), cov_f.as_slice(), y.feat.as_slice()).exp();
                    let pos = match next.action {
                        Action::NoJump => {
                            mvn_ln_pdf(t.estimate.mean_s.as_slice(), cov_s.as_slice(), y.pos.as_slice()).exp()
                        }
                        Action::Jump => 1.0 / params.clutter_area,
                    };
                    assoc[m] += p * pos * f / clutter;
                }
            }
        }
    }
    (assoc, silent)
}

/// Sums prior × likelihood ratio over every exclusive labeled assignment of
/// the alive targets and one unborn slot per measurement.
pub fn enumerate_posterior(
    targets: &[TargetTrack],
    k: usize,
    location: usize,
    ys: &[Measurement],
    params: &Parameters,
    n_locations: usize,
    visit_count: usize,
) -> Enumeration {
    let m = ys.len();
    let p_b = effective_birth_prob(visit_count, params);
    let mut weights: Vec<(Vec<f64>, f64)> = targets
        .iter()
        .map(|t| target_weights(t, k, location, ys, params, n_locations, visit_count))
        .collect();
    let n_targets = weights.len();
    weights.extend((0..m).map(|_| (vec![p_b; m], 1.0 - p_b)));

    let falling = |n: usize| -> f64 { ((m - n + 1)..=m).map(|v| v as f64).product() };
    let mut z = 0.0;
    let mut target = vec![vec![0.0; m + 1]; n_targets];
    let mut birth = vec![0.0; m];
    let mut choice = vec![0usize; weights.len()];
    loop {
        let mut used = vec![false; m];
        let mut ok = true;
        let mut g = 1.0;
        let mut n_assoc = 0;
        for (x, &c) in choice.iter().enumerate() {
            if c == 0 {
                g *= weights[x].1;
            } else {
                if std::mem::replace(&mut used[c - 1], true) {
                    ok = false;
                    break;
                }
                n_assoc += 1;
                g *= weights[x].0[c - 1];
            }
        }
        if ok {
            g /= falling(n_assoc);
            z += g;
            for j in 0..n_targets {
                target[j][choice[j]] += g;
            }
            for &c in &choice[n_targets..] {
                if c > 0 {
                    birth[c - 1] += g;
                }
            }
        }
        // odometer over {0..=m}^len
        let mut i = 0;
        while i < choice.len() {
            choice[i] += 1;
            if choice[i] <= m {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
        if i == choice.len() {
            break;
        }
    }
    target.iter_mut().flatten().for_each(|v| *v /= z);
    birth.iter_mut().for_each(|v| *v /= z);
    Enumeration {
        ln_z: z.ln(),
        target,
        birth,
    }
}

/// A random spatial track: prior, step indices with gaps, observations, noise.
pub struct TrackCase {
    pub prior_mean: Vector2<f64>,
    pub prior_cov: Matrix2<f64>,
    pub steps: Vec<usize>,
    pub ys: Vec<Vector2<f64>>,
    pub sigma_q: f64,
    pub sigma_r: f64,
}

pub fn random_track_case<R: rand::Rng>(rng: &mut R, max_len: usize) -> TrackCase {
    let n = rng.gen_range(1..=max_len);
    let mut steps = vec![rng.gen_range(1..5)];
    for _ in 1..n {
        let last = *steps.last().unwrap();
        steps.push(last + rng.gen_range(1..4));
    }
    let a = Matrix2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    TrackCase {
        prior_mean: Vector2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
        prior_cov: a * a.transpose() + Matrix2::identity() * 0.05,
        ys: (0..n).map(|_| Vector2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))).collect(),
        steps,
        sigma_q: rng.gen_range(0.02..0.5),
        sigma_r: rng.gen_range(0.05..0.8),
    }
}

/// Largest absolute difference between the library's filter/smoother and the
/// batch posterior over means, covariances and lag-one covariances.
pub fn kalman_max_error(case: &TrackCase) -> f64 {
    use jumptrack::kalman::{rts_smooth, FilteredTrack};
    let filt = FilteredTrack::run(case.prior_mean, case.prior_cov, &case.steps, &case.ys, case.sigma_q, case.sigma_r)
        .expect("filter runs");
    let smooth = rts_smooth(&filt, case.sigma_q).expect("smoother runs");
    let post = batch_posterior(case.prior_mean, case.prior_cov, &case.steps, &case.ys, case.sigma_q, case.sigma_r);
    let mut err: f64 = 0.0;
    let mut upd = |a: f64| err = err.max(a);
    for t in 0..case.steps.len() {
        upd((filt.means[t] - post.filtered_means[t]).amax());
        upd((filt.covs[t] - post.filtered_covs[t]).amax());
        upd((smooth.means[t] - post.smoothed_means[t]).amax());
        upd((smooth.covs[t] - post.smoothed_covs[t]).amax());
    }
    for t in 0..smooth.lag_one.len() {
        upd((smooth.lag_one[t] - post.lag_one[t]).amax());
    }
    err
}

/// A small association problem: particle targets plus one frame.
pub struct AssociationCase {
    pub params: Parameters,
    pub n_locations: usize,
    pub visit_count: usize,
    pub particle: jumptrack::model::Particle,
    pub frame: jumptrack::model::ObservationFrame,
}

pub fn random_association_case<R: rand::Rng>(rng: &mut R, max_targets: usize, max_meas: usize) -> AssociationCase {
    use jumptrack::model::{DiscreteState, GaussianEstimate, History, ObservationFrame, Particle};
    let params = Parameters {
        p_jump: rng.gen_range(0.01..0.3),
        p_meas: rng.gen_range(0.5..0.99),
        p_birth: rng.gen_range(0.01..0.3),
        p_death: rng.gen_range(0.0..0.05),
        sigma_q: rng.gen_range(0.05..0.3),
        sigma_r: rng.gen_range(0.2..0.6),
        feature_meas_cov: Matrix3::identity() * rng.gen_range(0.005..0.05),
        ..Parameters::default()
    };
    let n_locations = rng.gen_range(1..4);
    let location = rng.gen_range(0..n_locations);
    let k = 5;
    let n_meas = rng.gen_range(1..=max_meas);
    let rand_pos = |rng: &mut R| Vector2::new(rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
    let rand_feat = |rng: &mut R| Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    let measurements: Vec<Measurement> = (0..n_meas)
        .map(|_| Measurement { pos: rand_pos(rng), feat: rand_feat(rng) })
        .collect();
    let n_targets = rng.gen_range(0..=max_targets);
    let targets = (0..n_targets)
        .map(|j| {
            // mostly near a measurement so that the posterior is ambiguous
            let (mean_s, mean_f) = if rng.gen_bool(0.7) {
                let y = &measurements[rng.gen_range(0..n_meas)];
                (y.pos + rand_pos(rng) * 0.2, y.feat + rand_feat(rng) * 0.15)
            } else {
                (rand_pos(rng), rand_feat(rng))
            };
            let place = match rng.gen_range(0..4) {
                0 => Place::Unknown,
                1 => Place::At(rng.gen_range(0..n_locations)),
                _ => Place::At(location),
            };
            TargetTrack {
                id: j as u64,
                born: 1,
                died: None,
                state: DiscreteState {
                    existence: Existence::Alive,
                    action: Action::NoJump,
                    place,
                    association: Association::None,
                },
                estimate: GaussianEstimate {
                    mean_s,
                    cov_s: Matrix2::identity() * rng.gen_range(0.02..0.2),
                    mean_f,
                    cov_f: Matrix3::identity() * rng.gen_range(0.002..0.02),
                    spatial_known: true,
                },
                last_update: rng.gen_range(1..k),
                history: History::default(),
            }
        })
        .collect();
    AssociationCase {
        params,
        n_locations,
        visit_count: rng.gen_range(0..4),
        particle: Particle { log_weight: 0.0, targets, retired: Vec::new() },
        frame: ObservationFrame { k, location, measurements },
    }
}

impl AssociationCase {
    pub fn enumerate(&self) -> Enumeration {
        enumerate_posterior(
            &self.particle.targets,
            self.frame.k,
            self.frame.location,
            &self.frame.measurements,
            &self.params,
            self.n_locations,
            self.visit_count,
        )
    }

    pub fn problem(&self) -> jumptrack::rbpf::GibbsProblem {
        jumptrack::rbpf::association_problem(
            &self.particle,
            &self.frame,
            &self.params,
            self.n_locations,
            self.visit_count,
        )
        .expect("problem builds")
    }
}

/// Largest total-variation distance between the sampler's per-target and
/// per-measurement birth marginals and the enumerated ones.
pub fn marginal_tv(exact: &Enumeration, result: &jumptrack::rbpf::GibbsResult, n_meas: usize) -> f64 {
    let n = result.n_collected as f64;
    let mut worst: f64 = 0.0;
    for (j, probs) in exact.target.iter().enumerate() {
        let assoc: Vec<f64> = (0..n_meas).map(|m| result.target_frequency(j, m, n_meas)).collect();
        let silent = 1.0 - assoc.iter().sum::<f64>();
        let tv = 0.5
            * ((silent - probs[0]).abs()
                + assoc.iter().zip(&probs[1..]).map(|(a, b)| (a - b).abs()).sum::<f64>());
        worst = worst.max(tv);
    }
    for m in 0..n_meas {
        let p = result.birth_tallies[m] as f64 / n;
        worst = worst.max((p - exact.birth[m]).abs());
    }
    worst
}

/// One particle whose targets follow the true associations: each object is
/// born at its first detection, updated by the library's Kalman step at every
/// later detection, and restarted from the measurement after a location
/// change (recorded as a jump).
pub fn oracle_particle(
    frames: &[jumptrack::model::ObservationFrame],
    sources: &[Vec<Option<u64>>],
    params: &Parameters,
) -> jumptrack::model::Particle {
    use jumptrack::kalman::{predict, update};
    use jumptrack::model::{
        AssociationRecord, DiscreteState, GaussianEstimate, History, JumpKind, Particle, StepRecord,
    };
    use std::collections::BTreeMap;

    let mut tracks: BTreeMap<u64, TargetTrack> = BTreeMap::new();
    for (frame, srcs) in frames.iter().zip(sources) {
        for (m, src) in srcs.iter().enumerate() {
            let Some(obj) = *src else { continue };
            let y = &frame.measurements[m];
            let here = Place::At(frame.location);
            let fresh = GaussianEstimate::from_measurement(y, params.sigma_r, &params.feature_meas_cov);
            let mut jump = None;
            let t = match tracks.get_mut(&obj) {
                None => tracks.entry(obj).or_insert(TargetTrack {
                    id: obj,
                    born: frame.k,
                    died: None,
                    state: DiscreteState {
                        existence: Existence::Alive,
                        action: Action::NoJump,
                        place: here,
                        association: Association::None,
                    },
                    estimate: fresh,
                    last_update: frame.k,
                    history: History::default(),
                }),
                Some(t) if t.state.place != here => {
                    // restart the position; the feature keeps its history
                    jump = Some(JumpKind::FromKnown);
                    let (upd, _) = update(&t.estimate, y, params.sigma_r, &params.feature_meas_cov).unwrap();
                    t.estimate = GaussianEstimate {
                        mean_f: upd.mean_f,
                        cov_f: upd.cov_f,
                        ..fresh
                    };
                    t
                }
                Some(t) => {
                    let pred = predict(&t.estimate, frame.k - t.last_update, params.sigma_q);
                    t.estimate = update(&pred, y, params.sigma_r, &params.feature_meas_cov).unwrap().0;
                    t
                }
            };
            t.last_update = frame.k;
            t.state.place = here;
            t.history.push(StepRecord {
                k: frame.k,
                jump,
                association: Some(AssociationRecord {
                    measurement: m,
                    mean_s: t.estimate.mean_s,
                    cov_s: t.estimate.cov_s,
                }),
            });
        }
    }
    Particle {
        log_weight: 0.0,
        targets: tracks.into_values().collect(),
        retired: Vec::new(),
    }
}

/// Largest absolute differences (process, feature) between the library's
/// M-step on oracle associations and the classical reference, over joint and
/// per-target estimates. Data: one location, every object detected every
/// step, no clutter, no jumps.
pub fn mstep_oracle_error(seed: u64) -> (f64, f64) {
    use jumptrack::config::ScenarioConfig;
    use jumptrack::learning::{m_step, mean_absence};
    use jumptrack::simulator::{oracle_associations, simulate};

    let params = Parameters {
        p_meas: 1.0,
        p_jump: 0.0,
        sigma_q: 0.1,
        sigma_r: 0.3,
        ..Parameters::default()
    };
    let scn = ScenarioConfig {
        seed,
        ..ScenarioConfig::new(1, 4, 12)
    };
    let sim = simulate(&scn, &params).expect("scenario is valid");
    let sources = oracle_associations(&sim.frames, &sim.provenance).unwrap();
    let particle = oracle_particle(&sim.frames, &sources, &params);
    let est = m_step(&sim.frames, std::slice::from_ref(&particle), params.sigma_q, mean_absence(&sim.frames).unwrap()).unwrap();

    let (mut q_num, mut q_den) = (Matrix2::zeros(), 0.0);
    let (mut r_num, mut r_den) = (Matrix3::zeros(), 0.0);
    let (mut q_err, mut r_err): (f64, f64) = (0.0, 0.0);
    for t in &particle.targets {
        let mut steps = Vec::new();
        let mut pos = Vec::new();
        let mut feats = Vec::new();
        for (frame, srcs) in sim.frames.iter().zip(&sources) {
            if let Some(m) = srcs.iter().position(|s| *s == Some(t.id)) {
                steps.push(frame.k);
                pos.push(frame.measurements[m].pos);
                feats.push(frame.measurements[m].feat);
            }
        }
        // born from the first measurement: prior N(y_1, σ_r² I), y_1 not reused
        let obs: Vec<Option<Vector2<f64>>> = pos.iter().enumerate().map(|(i, p)| (i > 0).then_some(*p)).collect();
        let post = batch_posterior_partial(
            pos[0],
            Matrix2::identity() * params.sigma_r.powi(2),
            &steps,
            &obs,
            params.sigma_q,
            params.sigma_r,
        );
        let q = classical_process_cov(&post);
        let r = ml_covariance(&feats);
        q_err = q_err.max((est.process.per_instance[&t.id] - q).amax());
        r_err = r_err.max((est.feature.per_instance[&t.id] - r).amax());
        let n = steps.len() as f64;
        q_num += q * (n - 1.0);
        q_den += n - 1.0;
        r_num += r * n;
        r_den += n;
    }
    q_err = q_err.max((est.process.joint.unwrap() - q_num / q_den).amax());
    r_err = r_err.max((est.feature.joint.unwrap() - r_num / r_den).amax());
    (q_err, r_err)
}
