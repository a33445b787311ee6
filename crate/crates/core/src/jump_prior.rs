//! Individual target transition prior p(e, u, l, c | e_prev, l_prev).
//!
//! Each previous state selects one row of the transition table; the columns
//! are "stay and produce measurement m", "stay silent", "jump to the observed
//! location and produce m", "jump there silently", "jump to an unobserved
//! location" and "die". Association columns are split uniformly over the
//! `m_free` measurements that are still unassigned.

use crate::config::Parameters;
use crate::model::{Action, Association, DiscreteState, Existence, LocationId, Place};

/// Existence and location of a target at the previous step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrevState {
    pub existence: Existence,
    pub place: Place,
}

impl PrevState {
    pub fn alive(place: Place) -> Self {
        Self {
            existence: Existence::Alive,
            place,
        }
    }

    pub fn unborn() -> Self {
        Self {
            existence: Existence::Unborn,
            place: Place::Unknown,
        }
    }

    pub fn dead() -> Self {
        Self {
            existence: Existence::Dead,
            place: Place::Unknown,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PriorContext<'a> {
    pub observed_location: LocationId,
    pub n_locations: usize,
    /// Unassigned measurements available to this target.
    pub m_free: usize,
    /// Earlier visits to `observed_location`; drives the birth boost.
    pub visit_count: usize,
    pub params: &'a Parameters,
}

/// Total mass of each column of one table row. The association columns are
/// totals over all measurements (the cell value times the measurement count).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RowMasses {
    pub stay_assoc: f64,
    pub stay_silent: f64,
    pub jump_here_assoc: f64,
    pub jump_here_silent: f64,
    pub jump_away: f64,
    pub dead: f64,
}

impl RowMasses {
    pub fn assoc(&self) -> f64 {
        self.stay_assoc + self.jump_here_assoc
    }

    pub fn silent(&self) -> f64 {
        self.stay_silent + self.jump_here_silent + self.jump_away + self.dead
    }

    pub fn total(&self) -> f64 {
        self.assoc() + self.silent()
    }

    /// Moves the association mass onto the matching silent columns; used when
    /// no measurement is left to associate with.
    pub fn folded(&self) -> Self {
        Self {
            stay_assoc: 0.0,
            jump_here_assoc: 0.0,
            stay_silent: self.stay_silent + self.stay_assoc,
            jump_here_silent: self.jump_here_silent + self.jump_here_assoc,
            ..*self
        }
    }
}

/// Column masses of the row selected by `prev`.
///
/// For an unborn target the birth mass sits in `stay_assoc` (born at the
/// observed location, tied to a measurement) and `dead` holds "never born".
pub fn row_masses(
    prev: PrevState,
    observed_location: LocationId,
    n_locations: usize,
    p_birth_eff: f64,
    params: &Parameters,
) -> RowMasses {
    let n_l = n_locations.max(1) as f64;
    let p_life = params.p_life();
    let p_meas = params.p_meas;
    match prev.existence {
        Existence::Dead => RowMasses {
            dead: 1.0,
            ..RowMasses::default()
        },
        Existence::Unborn => RowMasses {
            stay_assoc: p_birth_eff,
            dead: 1.0 - p_birth_eff,
            ..RowMasses::default()
        },
        Existence::Alive => {
            // a target already in the unknown state has jumped; every column
            // of its row is a (re)placement with no p_jump factor
            let move_mass = match prev.place {
                Place::Unknown => p_life,
                Place::At(_) => p_life * params.p_jump,
            };
            let stay = match prev.place {
                Place::Unknown => 0.0,
                Place::At(_) => p_life * (1.0 - params.p_jump),
            };
            let here = prev.place == Place::At(observed_location);
            RowMasses {
                stay_assoc: if here { stay * p_meas } else { 0.0 },
                stay_silent: if here { stay * (1.0 - p_meas) } else { stay },
                jump_here_assoc: move_mass * p_meas / n_l,
                jump_here_silent: move_mass * (1.0 - p_meas) / n_l,
                jump_away: move_mass * (n_l - 1.0) / n_l,
                dead: params.p_death,
            }
        }
    }
}

/// Birth probability with the initialization boost: `p_birth` plus the
/// probability that a Poisson(λ) number of visits needed to see every object
/// exceeds the visits made so far. Clamped to 1.
pub fn effective_birth_prob(visit_count: usize, params: &Parameters) -> f64 {
    (params.p_birth + poisson_tail(params.lambda_init, visit_count + 1)).min(1.0)
}

/// P(V >= n) for V ~ Poisson(lambda).
pub(crate) fn poisson_tail(lambda: f64, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    if lambda <= 0.0 {
        return 0.0;
    }
    if (n as f64) <= lambda + 1.0 {
        let mut term = (-lambda).exp();
        let mut cdf = 0.0;
        for i in 0..n {
            if i > 0 {
                term *= lambda / i as f64;
            }
            cdf += term;
        }
        return (1.0 - cdf).max(0.0);
    }
    // upper tail summed directly; terms decrease once i > lambda
    let log_pn = -lambda + n as f64 * lambda.ln() - ln_factorial(n);
    let mut term = log_pn.exp();
    let mut sum = 0.0;
    let mut i = n;
    while term > 0.0 && term > sum * 1e-17 {
        sum += term;
        i += 1;
        term *= lambda / i as f64;
    }
    sum.min(1.0)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

fn context_row(prev: PrevState, ctx: &PriorContext) -> RowMasses {
    let p_birth_eff = effective_birth_prob(ctx.visit_count, ctx.params);
    let row = row_masses(
        prev,
        ctx.observed_location,
        ctx.n_locations,
        p_birth_eff,
        ctx.params,
    );
    match (ctx.m_free, prev.existence) {
        // births need a measurement; without one the slot stays unborn
        (0, Existence::Unborn) => RowMasses {
            dead: 1.0,
            ..RowMasses::default()
        },
        (0, _) => row.folded(),
        _ => row,
    }
}

/// Prior probability of moving from `prev` to `next`. Combinations outside
/// the table have probability zero. Any measurement index is read as one of
/// the `ctx.m_free` unassigned measurements.
pub fn transition_prior(prev: PrevState, next: &DiscreteState, ctx: &PriorContext) -> f64 {
    let row = context_row(prev, ctx);
    if next.existence == Existence::Dead {
        return row.dead;
    }
    if next.existence != Existence::Alive {
        return 0.0;
    }
    let per_meas = |mass: f64| {
        if ctx.m_free == 0 {
            0.0
        } else {
            mass / ctx.m_free as f64
        }
    };
    let here = Place::At(ctx.observed_location);
    match prev.existence {
        Existence::Dead => 0.0,
        Existence::Unborn => match (next.action, next.place, next.association) {
            (Action::NoJump, p, Association::Measurement(_)) if p == here => per_meas(row.stay_assoc),
            _ => 0.0,
        },
        Existence::Alive => match (next.action, next.place, next.association) {
            (Action::NoJump, p, Association::Measurement(_)) if p == prev.place && p == here => {
                per_meas(row.stay_assoc)
            }
            (Action::NoJump, p, Association::None) if p == prev.place && p != Place::Unknown => {
                row.stay_silent
            }
            (Action::Jump, p, Association::Measurement(_)) if p == here => per_meas(row.jump_here_assoc),
            (Action::Jump, p, Association::None) if p == here => row.jump_here_silent,
            (Action::Jump, Place::Unknown, Association::None) => row.jump_away,
            _ => 0.0,
        },
    }
}

/// Every successor of `prev` with nonzero probability. Measurement indices run
/// over `0..ctx.m_free`.
pub fn enumerate_transitions(prev: PrevState, ctx: &PriorContext) -> Vec<(DiscreteState, f64)> {
    let row = context_row(prev, ctx);
    let here = Place::At(ctx.observed_location);
    let mut out = Vec::new();
    let mut push = |existence, action, place, association, p: f64| {
        if p > 0.0 {
            out.push((
                DiscreteState {
                    existence,
                    action,
                    place,
                    association,
                },
                p,
            ));
        }
    };
    let m_free = ctx.m_free as f64;
    let stay_place = match prev.existence {
        Existence::Unborn => here,
        _ => prev.place,
    };
    for m in 0..ctx.m_free {
        let c = Association::Measurement(m);
        push(Existence::Alive, Action::NoJump, stay_place, c, row.stay_assoc / m_free);
        push(Existence::Alive, Action::Jump, here, c, row.jump_here_assoc / m_free);
    }
    use Association::None as Eps;
    push(Existence::Alive, Action::NoJump, stay_place, Eps, row.stay_silent);
    push(Existence::Alive, Action::Jump, here, Eps, row.jump_here_silent);
    push(Existence::Alive, Action::Jump, Place::Unknown, Eps, row.jump_away);
    push(Existence::Dead, Action::NoJump, prev.place, Eps, row.dead);
    out
}
