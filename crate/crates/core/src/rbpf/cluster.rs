//! Cross-particle summaries: identity clustering, target count and
//! per-target posteriors.

use std::collections::BTreeMap;

use crate::model::{Particle, Place, TargetId, TargetSummary};

/// Identity of each measurement from the weighted votes
/// `votes[m][j] = Σ_i w_i · freq_i(j takes m)`. A measurement adopts the
/// best-voted target when its vote exceeds `kappa`; conflicts (possible only
/// for `kappa < 0.5`) go to the stronger vote.
pub fn cluster_identities(votes: &[BTreeMap<TargetId, f64>], kappa: f64) -> Vec<Option<TargetId>> {
    let mut best: Vec<(f64, usize, TargetId)> = votes
        .iter()
        .enumerate()
        .filter_map(|(m, v)| {
            v.iter()
                .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .filter(|(_, &kappa_m)| kappa_m > kappa)
                .map(|(&j, &kappa_m)| (kappa_m, m, j))
        })
        .collect();
    best.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out = vec![None; votes.len()];
    let mut taken = Vec::new();
    for (_, m, j) in best {
        if !taken.contains(&j) {
            taken.push(j);
            out[m] = Some(j);
        }
    }
    out
}

/// Argmax of the weighted histogram of alive-target counts; ties go to the
/// smaller count.
pub fn estimate_target_count(particles: &[Particle]) -> usize {
    let mut hist: BTreeMap<usize, f64> = BTreeMap::new();
    for p in particles {
        *hist.entry(p.n_alive()).or_default() += p.weight();
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (n, w) in hist {
        if w > best.1 {
            best = (n, w);
        }
    }
    best.0
}

#[derive(Default)]
struct Accumulator {
    weight: f64,
    places: BTreeMap<Place, f64>,
    feat: [f64; 3],
}

/// Summaries of the `n_targets` identities with the largest alive weight.
/// Location is the weighted mode; position the weighted mean over particles
/// that place the target at that mode with a known position.
pub fn estimate_posteriors(particles: &[Particle], n_targets: usize) -> Vec<TargetSummary> {
    let mut acc: BTreeMap<TargetId, Accumulator> = BTreeMap::new();
    for p in particles {
        let w = p.weight();
        for t in &p.targets {
            let a = acc.entry(t.id).or_default();
            a.weight += w;
            *a.places.entry(t.state.place).or_default() += w;
            for d in 0..3 {
                a.feat[d] += w * t.estimate.mean_f[d];
            }
        }
    }
    let mut ranked: Vec<(TargetId, Accumulator)> = acc.into_iter().collect();
    ranked.sort_by(|a, b| b.1.weight.total_cmp(&a.1.weight).then(a.0.cmp(&b.0)));
    ranked.truncate(n_targets);

    ranked
        .into_iter()
        .map(|(id, a)| {
            let mut mode = (Place::Unknown, f64::NEG_INFINITY);
            for (&place, &w) in &a.places {
                if w > mode.1 {
                    mode = (place, w);
                }
            }
            let mode = mode.0;
            let (mut pw, mut pos) = (0.0, [0.0; 2]);
            for p in particles {
                if let Some(t) = p.target(id) {
                    if t.state.place == mode && t.estimate.spatial_known && mode != Place::Unknown {
                        let w = p.weight();
                        pw += w;
                        pos[0] += w * t.estimate.mean_s[0];
                        pos[1] += w * t.estimate.mean_s[1];
                    }
                }
            }
            TargetSummary {
                id,
                weight: a.weight,
                location: mode.location(),
                pos: (pw > 0.0).then(|| [pos[0] / pw, pos[1] / pw]),
                feat: a.feat.map(|f| f / a.weight),
            }
        })
        .collect()
}
