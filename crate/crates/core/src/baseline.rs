//! Deterministic threshold tracker used as a comparison system.
//!
//! Every measurement is explained by some track: first a track at the
//! observed location that is spatially close and similar in feature space,
//! then any remaining track, wherever it is, with a similar feature (the
//! object jumped here or moved farther than the radius), otherwise a new
//! track. Tracks copy the position and feature of their last
//! measurement and are never deleted.

use std::collections::BTreeSet;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::model::{LocationId, ObservationFrame, StepReport, TargetId, TargetSummary, TrackReport};

/// Feature distance threshold giving the best MOTA on simulated scenes with
/// the default parameters (features uniform in the unit cube,
/// R^f = 0.01·I); scale it with the feature noise for other data.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
struct Track {
    id: TargetId,
    location: LocationId,
    pos: Vector2<f64>,
    feat: Vector3<f64>,
}

/// Runs the baseline over `frames`; `spatial_radius` bounds the
/// same-location match distance (3·σ_r is the usual choice).
pub fn baseline_track(frames: &[ObservationFrame], tau: f64, spatial_radius: f64) -> Result<TrackReport> {
    if !(tau > 0.0) || !(spatial_radius > 0.0) {
        return Err(Error::Validation(format!(
            "tau and spatial radius must be positive (tau={tau}, radius={spatial_radius})"
        )));
    }
    let mut tracks: Vec<Track> = Vec::new();
    let mut report = Vec::with_capacity(frames.len());
    for frame in frames {
        let m_count = frame.measurements.len();
        let mut assignments: Vec<Option<usize>> = vec![None; m_count];
        let mut taken = BTreeSet::new();

        let mut local: Vec<(f64, usize, usize)> = Vec::new();
        for (m, y) in frame.measurements.iter().enumerate() {
            for (t, tr) in tracks.iter().enumerate() {
                if tr.location != frame.location {
                    continue;
                }
                let d = (y.pos - tr.pos).norm();
                if d <= spatial_radius && (y.feat - tr.feat).norm() < tau {
                    local.push((d, m, t));
                }
            }
        }
        greedy(&mut local, &mut assignments, &mut taken);

        let mut jumps: Vec<(f64, usize, usize)> = Vec::new();
        for (m, y) in frame.measurements.iter().enumerate() {
            if assignments[m].is_some() {
                continue;
            }
            for (t, tr) in tracks.iter().enumerate() {
                if taken.contains(&t) {
                    continue;
                }
                let d = (y.feat - tr.feat).norm();
                if d < tau {
                    jumps.push((d, m, t));
                }
            }
        }
        greedy(&mut jumps, &mut assignments, &mut taken);

        for (m, y) in frame.measurements.iter().enumerate() {
            let t = match assignments[m] {
                Some(t) => t,
                None => {
                    tracks.push(Track {
                        id: tracks.len() as TargetId,
                        location: frame.location,
                        pos: y.pos,
                        feat: y.feat,
                    });
                    assignments[m] = Some(tracks.len() - 1);
                    continue;
                }
            };
            let tr = &mut tracks[t];
            tr.location = frame.location;
            tr.pos = y.pos;
            tr.feat = y.feat;
        }

        report.push(StepReport {
            k: frame.k,
            location: frame.location,
            n_targets: tracks.len(),
            targets: tracks
                .iter()
                .map(|t| TargetSummary {
                    id: t.id,
                    weight: 1.0,
                    location: Some(t.location),
                    pos: Some([t.pos.x, t.pos.y]),
                    feat: [t.feat.x, t.feat.y, t.feat.z],
                })
                .collect(),
            assignments: assignments.iter().map(|a| a.map(|t| tracks[t].id)).collect(),
            log_normalizer: 0.0,
        });
    }
    Ok(report)
}

/// Accepts (distance, measurement, track) pairs in ascending distance,
/// skipping pairs whose measurement or track is already used.
fn greedy(pairs: &mut [(f64, usize, usize)], assignments: &mut [Option<usize>], taken: &mut BTreeSet<usize>) {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, m, t) in pairs.iter() {
        if assignments[m].is_none() && !taken.contains(&t) {
            assignments[m] = Some(t);
            taken.insert(t);
        }
    }
}
