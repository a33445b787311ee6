mod common;

use jumptrack::config::Parameters;
use jumptrack::learning::{estimate_p_jump, extract_segments};
use jumptrack::model::{
    Action, Association, AssociationRecord, DiscreteState, Existence, GaussianEstimate, History, JumpKind,
    Measurement, Particle, Place, StepRecord, TargetTrack,
};
use jumptrack::rbpf::{estimate_normalizer, gibbs_sample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn kalman_matches_batch_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let case = common::random_track_case(&mut rng, 8);
        let err = common::kalman_max_error(&case);
        assert!(err < 1e-8, "max error {err:e} on steps {:?}", case.steps);
    }
}

#[test]
fn partial_batch_posterior_reduces_to_full() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let case = common::random_track_case(&mut rng, 6);
    let obs: Vec<_> = case.ys.iter().copied().map(Some).collect();
    let a = common::batch_posterior(case.prior_mean, case.prior_cov, &case.steps, &case.ys, case.sigma_q, case.sigma_r);
    let b = common::batch_posterior_partial(case.prior_mean, case.prior_cov, &case.steps, &obs, case.sigma_q, case.sigma_r);
    for t in 0..case.steps.len() {
        assert!((a.smoothed_means[t] - b.smoothed_means[t]).amax() < 1e-12);
    }
}

#[test]
fn exact_normalizer_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..40 {
        let case = common::random_association_case(&mut rng, 3, 3);
        let exact = case.enumerate();
        let lib = case.problem().exact_ln_normalizer();
        assert!((lib - exact.ln_z).abs() < 1e-9, "case {i}: library {lib} vs enumeration {}", exact.ln_z);
    }
}

#[test]
fn gibbs_marginals_and_chib_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..4 {
        let case = common::random_association_case(&mut rng, 3, 3);
        let exact = case.enumerate();
        let problem = case.problem();
        let mut chain = ChaCha8Rng::seed_from_u64(i);
        let result = gibbs_sample(&problem, 200, 5000, &mut chain);
        let tv = common::marginal_tv(&exact, &result, case.frame.measurements.len());
        assert!(tv <= 0.05, "case {i}: total variation {tv}");
        let ln_z = estimate_normalizer(&problem, &result, 0).unwrap();
        let rel = (ln_z - exact.ln_z).exp() - 1.0;
        assert!(rel.abs() <= 0.1, "case {i}: relative error {rel}");
    }
}

#[test]
fn m_step_matches_classical_em() {
    for seed in 0..3 {
        let (q, r) = common::mstep_oracle_error(seed);
        assert!(q < 1e-8 && r < 1e-8, "seed {seed}: process {q:e}, feature {r:e}");
    }
}

fn hand_track(id: u64, born: usize, died: Option<usize>, jumps: &[(usize, JumpKind)]) -> TargetTrack {
    let y = Measurement::new([0.0, 0.0], [0.5; 3]);
    let est = GaussianEstimate::from_measurement(&y, 0.3, &Parameters::default().feature_meas_cov);
    let mut history = History::default();
    for &(k, kind) in jumps {
        history.push(StepRecord {
            k,
            jump: Some(kind),
            association: Some(AssociationRecord {
                measurement: 0,
                mean_s: est.mean_s,
                cov_s: est.cov_s,
            }),
        });
    }
    TargetTrack {
        id,
        born,
        died,
        state: DiscreteState {
            existence: if died.is_some() { Existence::Dead } else { Existence::Alive },
            action: Action::NoJump,
            place: Place::At(0),
            association: Association::None,
        },
        estimate: est,
        last_update: born,
        history,
    }
}

#[test]
fn raw_jump_rate_is_exact_count_ratio() {
    // alive steps: 30 (born 1, horizon 30) and 11 (born 10, died 21)
    let particle = Particle {
        log_weight: 0.0,
        targets: vec![hand_track(
            0,
            1,
            None,
            &[(5, JumpKind::FromKnown), (9, JumpKind::FromKnown), (14, JumpKind::Reentry)],
        )],
        retired: vec![hand_track(1, 10, Some(21), &[(12, JumpKind::FromKnown)])],
    };
    let segments = extract_segments(std::slice::from_ref(&particle), 30);
    let alive: usize = particle.all_targets().map(|t| t.alive_steps(30)).sum();
    let est = estimate_p_jump(&segments, 3.0);
    assert_eq!(est.joint_raw, Some(3.0 / alive as f64));
}
