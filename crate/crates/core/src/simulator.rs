//! Synthetic detection logs drawn from the tracker's own generative model.
//!
//! Location `l` is the square `[2·l·e, 2·l·e + e] × [0, e]` with
//! `e = location_extent`, so locations never overlap. At every step after the
//! first, each object may die, jump to a uniformly chosen other location (its
//! position redrawn uniformly there), or take a Brownian step reflected at
//! the square's edges. The robot then observes one location.

use nalgebra::{Cholesky, Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::config::{Parameters, SchedulePolicy, ScenarioConfig, VisitSchedule};
use crate::error::{Error, Result};
use crate::model::{
    GroundTruthFrame, LocationId, Measurement, ObservationFrame, ProvenanceFrame, TruthObject,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SimObject {
    pub id: u64,
    pub born: usize,
    pub died: Option<usize>,
    pub location: LocationId,
    pub pos: Vector2<f64>,
    /// Feature prototype, constant over the object's life.
    pub feat: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JumpEvent {
    pub k: usize,
    pub object: u64,
    pub from: LocationId,
    pub to: LocationId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub frames: Vec<ObservationFrame>,
    pub truth: Vec<GroundTruthFrame>,
    pub provenance: Vec<ProvenanceFrame>,
    pub jumps: Vec<JumpEvent>,
    pub objects: Vec<SimObject>,
}

/// Lower-left corner of a location's square.
pub fn location_origin(l: LocationId, extent: f64) -> Vector2<f64> {
    Vector2::new(2.0 * extent * l as f64, 0.0)
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    // fold onto [0, 2·width) then mirror the upper half
    let t = (v - lo).rem_euclid(2.0 * width);
    lo + if t > width { 2.0 * width - t } else { t }
}

struct Sampler<'a, R: Rng> {
    scn: &'a ScenarioConfig,
    rng: &'a mut R,
}

impl<R: Rng> Sampler<'_, R> {
    fn uniform_pos(&mut self, l: LocationId) -> Vector2<f64> {
        let e = self.scn.location_extent;
        location_origin(l, e) + Vector2::new(self.rng.gen::<f64>() * e, self.rng.gen::<f64>() * e)
    }

    fn uniform_feat(&mut self) -> Vector3<f64> {
        Vector3::from_fn(|d, _| {
            let [lo, hi] = self.scn.feature_box[d];
            lo + self.rng.gen::<f64>() * (hi - lo)
        })
    }

    fn normal2(&mut self) -> Vector2<f64> {
        Vector2::new(self.rng.sample(StandardNormal), self.rng.sample(StandardNormal))
    }

    fn normal3(&mut self) -> Vector3<f64> {
        Vector3::new(
            self.rng.sample(StandardNormal),
            self.rng.sample(StandardNormal),
            self.rng.sample(StandardNormal),
        )
    }
}

/// Simulates with a generator seeded from `scn.seed`.
pub fn simulate(scn: &ScenarioConfig, params: &Parameters) -> Result<Simulation> {
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);
    simulate_with_rng(scn, params, &mut rng)
}

pub fn simulate_with_rng<R: Rng>(scn: &ScenarioConfig, params: &Parameters, rng: &mut R) -> Result<Simulation> {
    scn.validate()?;
    let n_l = scn.n_locations;
    let e = scn.location_extent;
    let r_f_factor = Cholesky::new(params.feature_meas_cov)
        .map(|c| c.l())
        .unwrap_or_else(Matrix3::zeros);
    let clutter = if scn.clutter_rate > 0.0 {
        Some(Poisson::new(scn.clutter_rate).map_err(|err| Error::Validation(err.to_string()))?)
    } else {
        None
    };
    let mut s = Sampler { scn, rng };

    let mut objects: Vec<SimObject> = (0..scn.n_objects_initial as u64)
        .map(|id| {
            let location = s.rng.gen_range(0..n_l);
            SimObject {
                id,
                born: 1,
                died: None,
                location,
                pos: s.uniform_pos(location),
                feat: s.uniform_feat(),
            }
        })
        .collect();

    let mut out = Simulation {
        frames: Vec::with_capacity(scn.horizon),
        truth: Vec::with_capacity(scn.horizon),
        provenance: Vec::with_capacity(scn.horizon),
        jumps: Vec::new(),
        objects: Vec::new(),
    };

    for k in 1..=scn.horizon {
        if k >= 2 {
            for obj in objects.iter_mut().filter(|o| o.died.is_none()) {
                if scn.enable_deaths && s.rng.gen::<f64>() < params.p_death {
                    obj.died = Some(k);
                    continue;
                }
                let scripted = scn
                    .scripted_jumps
                    .iter()
                    .find(|j| j.step == k && j.object == obj.id)
                    .map(|j| j.to_location);
                let to = match scripted {
                    Some(to) => Some(to),
                    None if n_l > 1 && s.rng.gen::<f64>() < params.p_jump => {
                        let mut to = s.rng.gen_range(0..n_l - 1);
                        if to >= obj.location {
                            to += 1;
                        }
                        Some(to)
                    }
                    None => None,
                };
                match to {
                    Some(to) => {
                        out.jumps.push(JumpEvent {
                            k,
                            object: obj.id,
                            from: obj.location,
                            to,
                        });
                        obj.location = to;
                        obj.pos = s.uniform_pos(to);
                    }
                    None => {
                        let step = s.normal2() * params.sigma_q;
                        let origin = location_origin(obj.location, e);
                        obj.pos = Vector2::new(
                            reflect(obj.pos[0] + step[0], origin[0], origin[0] + e),
                            reflect(obj.pos[1] + step[1], origin[1], origin[1] + e),
                        );
                    }
                }
            }
            if scn.enable_births && s.rng.gen::<f64>() < params.p_birth {
                let location = s.rng.gen_range(0..n_l);
                let id = objects.len() as u64;
                let pos = s.uniform_pos(location);
                let feat = s.uniform_feat();
                objects.push(SimObject {
                    id,
                    born: k,
                    died: None,
                    location,
                    pos,
                    feat,
                });
            }
        }

        let observed = match &scn.visit_schedule {
            VisitSchedule::Explicit(list) => list[k - 1],
            VisitSchedule::Policy(SchedulePolicy::RoundRobin) => (k - 1) % n_l,
            VisitSchedule::Policy(SchedulePolicy::UniformRandom) => s.rng.gen_range(0..n_l),
        };

        let mut detections: Vec<(Measurement, Option<u64>)> = Vec::new();
        let mut truth_objects = Vec::with_capacity(objects.len());
        for obj in &objects {
            let alive = obj.died.is_none();
            let mut detected = false;
            if alive && obj.location == observed && s.rng.gen::<f64>() < params.p_meas {
                let pos = obj.pos + s.normal2() * params.sigma_r;
                let feat = obj.feat + r_f_factor * s.normal3();
                detections.push((Measurement { pos, feat }, Some(obj.id)));
                detected = true;
            }
            truth_objects.push(TruthObject {
                id: obj.id,
                alive,
                location: obj.location,
                pos: obj.pos,
                feat: obj.feat,
                detected,
            });
        }
        let n_clutter = clutter.map_or(0, |d| d.sample(s.rng) as usize);
        for _ in 0..n_clutter {
            let pos = s.uniform_pos(observed);
            let feat = s.uniform_feat();
            detections.push((Measurement { pos, feat }, None));
        }
        detections.shuffle(s.rng);

        let (measurements, sources): (Vec<_>, Vec<_>) = detections.into_iter().unzip();
        out.frames.push(ObservationFrame {
            k,
            location: observed,
            measurements,
        });
        out.provenance.push(ProvenanceFrame { k, sources });
        out.truth.push(GroundTruthFrame {
            k,
            observed_location: observed,
            objects: truth_objects,
        });
    }
    out.objects = objects;
    Ok(out)
}

/// Per step and measurement: the object that produced it, or `None` for
/// clutter.
pub fn oracle_associations(
    frames: &[ObservationFrame],
    provenance: &[ProvenanceFrame],
) -> Result<Vec<Vec<Option<u64>>>> {
    if frames.len() != provenance.len() {
        return Err(Error::Data(format!(
            "{} frames but {} provenance records",
            frames.len(),
            provenance.len()
        )));
    }
    frames
        .iter()
        .zip(provenance)
        .map(|(f, p)| {
            if f.k != p.k || f.measurements.len() != p.sources.len() {
                Err(Error::Data(format!("provenance does not match frame at step {}", f.k)))
            } else {
                Ok(p.sources.clone())
            }
        })
        .collect()
}
