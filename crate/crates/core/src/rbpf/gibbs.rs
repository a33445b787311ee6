//! Blocked Gibbs sampler over the joint association of one particle.
//!
//! Candidates are the particle's alive targets followed by one unborn slot
//! per measurement. Candidate `x` contributes `assoc[x][m]` when it takes
//! measurement `m` and `silent[x]` otherwise; these already contain the prior
//! column masses times the likelihood ratio against clutter. A joint
//! assignment `c` with `n` associated candidates has unnormalized mass
//!
//! ```text
//! γ(c) = (M − n)! / M! · Π_x (c_x = m ? assoc[x][m] : silent[x])
//! ```
//!
//! whose single-site conditionals are the transition prior with the
//! association mass shared among the free measurements.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Association;

/// Per-candidate weights, rescaled so the largest entry is at most 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub assoc: Vec<f64>,
    pub silent: f64,
    pub ln_scale: f64,
}

impl Candidate {
    /// Builds a candidate from log weights (`-inf` allowed).
    pub fn from_log(ln_assoc: &[f64], ln_silent: f64) -> Self {
        let ln_scale = ln_assoc
            .iter()
            .copied()
            .fold(ln_silent, f64::max);
        let ln_scale = if ln_scale.is_finite() { ln_scale } else { 0.0 };
        Self {
            assoc: ln_assoc.iter().map(|v| (v - ln_scale).exp()).collect(),
            silent: (ln_silent - ln_scale).exp(),
            ln_scale,
        }
    }

    fn weight(&self, c: Association) -> f64 {
        match c {
            Association::None => self.silent,
            Association::Measurement(m) => self.assoc[m],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsProblem {
    pub candidates: Vec<Candidate>,
    /// The first `n_targets` candidates are alive targets; the rest are
    /// interchangeable unborn slots.
    pub n_targets: usize,
    pub n_measurements: usize,
}

impl GibbsProblem {
    pub fn new(candidates: Vec<Candidate>, n_targets: usize, n_measurements: usize) -> Self {
        debug_assert!(candidates.iter().all(|c| c.assoc.len() == n_measurements));
        Self {
            candidates,
            n_targets,
            n_measurements,
        }
    }

    fn ln_scale(&self) -> f64 {
        self.candidates.iter().map(|c| c.ln_scale).sum()
    }

    /// ln((M − n)! / M!).
    fn ln_order_factor(&self, n_assoc: usize) -> f64 {
        let m = self.n_measurements;
        -((m - n_assoc + 1)..=m).map(|v| (v as f64).ln()).sum::<f64>()
    }

    pub fn is_exclusive(&self, c: &[Association]) -> bool {
        let mut used = vec![false; self.n_measurements];
        for m in c.iter().filter_map(|a| a.index()) {
            if m >= self.n_measurements || std::mem::replace(&mut used[m], true) {
                return false;
            }
        }
        true
    }

    /// ln γ(c) for one labeled joint assignment.
    pub fn ln_gamma(&self, c: &[Association]) -> f64 {
        let n_assoc = c.iter().filter(|a| a.is_some()).count();
        let product: f64 = self
            .candidates
            .iter()
            .zip(c)
            .map(|(cand, &a)| cand.weight(a).ln())
            .sum();
        product + self.ln_scale() + self.ln_order_factor(n_assoc)
    }

    /// Work needed by [`exact_ln_normalizer`](Self::exact_ln_normalizer), or
    /// `None` when the subset table would not fit in memory.
    pub fn exact_cost(&self) -> Option<usize> {
        if self.n_measurements > 24 {
            return None;
        }
        Some(((self.candidates.len().max(1)) * (self.n_measurements + 1)) << self.n_measurements)
    }

    /// ln Σ_c γ(c) by dynamic programming over the set of used measurements.
    pub fn exact_ln_normalizer(&self) -> f64 {
        let m = self.n_measurements;
        let size = 1usize << m;
        let mut table = vec![0.0f64; size];
        table[0] = 1.0;
        let mut ln_acc = 0.0;
        let mut next = vec![0.0f64; size];
        for cand in &self.candidates {
            for mask in 0..size {
                let mut v = table[mask] * cand.silent;
                let mut bits = mask;
                while bits != 0 {
                    let j = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    v += table[mask ^ (1 << j)] * cand.assoc[j];
                }
                next[mask] = v;
            }
            std::mem::swap(&mut table, &mut next);
            let peak = table.iter().copied().fold(0.0, f64::max);
            if peak == 0.0 {
                return f64::NEG_INFINITY;
            }
            table.iter_mut().for_each(|v| *v /= peak);
            ln_acc += peak.ln();
        }
        let total: f64 = table
            .iter()
            .enumerate()
            .map(|(mask, v)| v * self.ln_order_factor(mask.count_ones() as usize).exp())
            .sum();
        total.ln() + ln_acc + self.ln_scale()
    }

    /// Distribution of (c_x, c_y) given every other candidate's association
    /// in `current`. Only outcomes with nonzero mass are listed; probabilities
    /// are normalized. Returns an empty list when every outcome has zero mass.
    pub fn pairwise_conditional(
        &self,
        x: usize,
        y: usize,
        current: &[Association],
    ) -> Vec<((Association, Association), f64)> {
        let mut out = Vec::new();
        let free = self.free_measurements(current, &[x, y]);
        let (cx, cy) = (&self.candidates[x], &self.candidates[y]);
        self.pair_outcomes(cx, cy, &free, |pair, w| out.push((pair, w)));
        normalize(&mut out);
        out
    }

    /// Distribution of c_x given every other candidate's association.
    pub fn single_conditional(&self, x: usize, current: &[Association]) -> Vec<(Association, f64)> {
        let mut out = Vec::new();
        let free = self.free_measurements(current, &[x]);
        let cand = &self.candidates[x];
        push_positive(&mut out, Association::None, cand.silent);
        let share = 1.0 / free.len().max(1) as f64;
        for &m in &free {
            push_positive(&mut out, Association::Measurement(m), cand.assoc[m] * share);
        }
        normalize(&mut out);
        out
    }

    fn free_measurements(&self, current: &[Association], skip: &[usize]) -> Vec<usize> {
        let mut used = vec![false; self.n_measurements];
        for (i, a) in current.iter().enumerate() {
            if let (false, Some(m)) = (skip.contains(&i), a.index()) {
                used[m] = true;
            }
        }
        (0..self.n_measurements).filter(|&m| !used[m]).collect()
    }

    fn pair_outcomes(
        &self,
        cx: &Candidate,
        cy: &Candidate,
        free: &[usize],
        mut emit: impl FnMut((Association, Association), f64),
    ) {
        use Association::{Measurement as Meas, None as Eps};
        let n_free = free.len() as f64;
        let one = if n_free > 0.0 { 1.0 / n_free } else { 0.0 };
        let two = if n_free > 1.0 { one / (n_free - 1.0) } else { 0.0 };
        emit((Eps, Eps), cx.silent * cy.silent);
        for &m in free {
            emit((Meas(m), Eps), cx.assoc[m] * cy.silent * one);
            emit((Eps, Meas(m)), cx.silent * cy.assoc[m] * one);
        }
        for &m in free {
            let a = cx.assoc[m] * two;
            if a == 0.0 {
                continue;
            }
            for &n in free {
                if n != m {
                    emit((Meas(m), Meas(n)), a * cy.assoc[n]);
                }
            }
        }
    }

    /// Canonical form of a labeled assignment: target associations, then the
    /// sorted set of measurements taken by unborn slots.
    fn canonical_key(&self, c: &[Association]) -> Vec<u32> {
        let mut key: Vec<u32> = c[..self.n_targets]
            .iter()
            .map(|a| a.index().map_or(u32::MAX, |m| m as u32))
            .collect();
        let mut births: Vec<u32> = c[self.n_targets..]
            .iter()
            .filter_map(|a| a.index().map(|m| m as u32))
            .collect();
        births.sort_unstable();
        key.extend(births);
        key
    }

    fn n_births(&self, c: &[Association]) -> usize {
        c[self.n_targets..].iter().filter(|a| a.is_some()).count()
    }
}

fn push_positive<T>(out: &mut Vec<(T, f64)>, value: T, w: f64) {
    if w > 0.0 {
        out.push((value, w));
    }
}

fn normalize<T>(out: &mut Vec<(T, f64)>) {
    out.retain(|(_, w)| *w > 0.0);
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    if total > 0.0 && total.is_finite() {
        out.iter_mut().for_each(|(_, w)| *w /= total);
    } else {
        out.clear();
    }
}

fn draw_index<R: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // rounding fell off the end: last positive entry
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct GibbsResult {
    /// Last collected joint assignment, one entry per candidate.
    pub sample: Vec<Association>,
    /// `tallies[j * M + m]`: collected sweeps in which target `j` took `m`.
    pub tallies: Vec<u32>,
    /// Collected sweeps in which some unborn slot took `m`.
    pub birth_tallies: Vec<u32>,
    pub n_collected: usize,
    /// Most frequent canonical assignment: a labeled representative and its
    /// count.
    pub mode: (Vec<Association>, usize),
}

impl GibbsResult {
    pub fn target_frequency(&self, j: usize, m: usize, n_measurements: usize) -> f64 {
        self.tallies[j * n_measurements + m] as f64 / self.n_collected as f64
    }
}

/// Runs `n_burnin` discarded sweeps then `n_iters` collected sweeps. Each
/// sweep visits every candidate once, in random pairs.
pub fn gibbs_sample<R: Rng + ?Sized>(
    problem: &GibbsProblem,
    n_burnin: usize,
    n_iters: usize,
    rng: &mut R,
) -> GibbsResult {
    let n_cand = problem.candidates.len();
    let n_meas = problem.n_measurements;
    let mut current = vec![Association::None; n_cand];
    let mut order: Vec<usize> = (0..n_cand).collect();
    let mut tallies = vec![0u32; problem.n_targets * n_meas];
    let mut birth_tallies = vec![0u32; n_meas];
    let mut counts: HashMap<Vec<u32>, (usize, Vec<Association>)> = HashMap::new();
    let mut outcomes: Vec<(Association, Association)> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let n_iters = n_iters.max(1);

    for sweep in 0..n_burnin + n_iters {
        if n_meas > 0 {
            order.shuffle(rng);
            let mut idx = 0;
            while idx < n_cand {
                let x = order[idx];
                let y = if idx + 1 < n_cand {
                    Some(order[idx + 1])
                } else if n_cand > 1 {
                    // odd count: pair the last candidate with a random other
                    let pick = rng.gen_range(0..n_cand - 1);
                    Some(order[pick])
                } else {
                    None
                };
                idx += 2;
                outcomes.clear();
                weights.clear();
                match y {
                    Some(y) => {
                        let free = problem.free_measurements(&current, &[x, y]);
                        let (cx, cy) = (&problem.candidates[x], &problem.candidates[y]);
                        problem.pair_outcomes(cx, cy, &free, |pair, w| {
                            outcomes.push(pair);
                            weights.push(w);
                        });
                    }
                    None => {
                        for (a, w) in problem.single_conditional(x, &current) {
                            outcomes.push((a, Association::None));
                            weights.push(w);
                        }
                    }
                }
                let total: f64 = weights.iter().sum();
                if !(total > 0.0 && total.is_finite()) {
                    continue;
                }
                let (a, b) = outcomes[draw_index(&weights, total, rng)];
                current[x] = a;
                if let Some(y) = y {
                    current[y] = b;
                }
            }
        }
        if sweep < n_burnin {
            continue;
        }
        for (j, a) in current[..problem.n_targets].iter().enumerate() {
            if let Some(m) = a.index() {
                tallies[j * n_meas + m] += 1;
            }
        }
        for m in current[problem.n_targets..].iter().filter_map(|a| a.index()) {
            birth_tallies[m] += 1;
        }
        counts
            .entry(problem.canonical_key(&current))
            .or_insert_with(|| (0, current.clone()))
            .0 += 1;
    }

    let mode = counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then_with(|| b.0.cmp(&a.0)))
        .map(|(_, v)| (v.1, v.0))
        .unwrap_or((current.clone(), 0));
    GibbsResult {
        sample: current,
        tallies,
        birth_tallies,
        n_collected: n_iters,
        mode,
    }
}

/// ln Ẑ: exact when the subset table costs at most `exact_threshold`
/// operations, otherwise γ(c*)/q̂(c*) at the chain's most frequent canonical
/// assignment.
pub fn estimate_normalizer(
    problem: &GibbsProblem,
    result: &GibbsResult,
    exact_threshold: usize,
) -> Result<f64> {
    if problem.exact_cost().is_some_and(|cost| cost <= exact_threshold) {
        return Ok(problem.exact_ln_normalizer());
    }
    let (mode, count) = &result.mode;
    if *count == 0 {
        return Err(Error::Numerical("chain mode has zero frequency".into()));
    }
    let b = problem.n_births(mode);
    let m = problem.n_measurements;
    // number of labeled slot assignments sharing this canonical form
    let ln_multiplicity: f64 = ((m - b + 1)..=m).map(|v| (v as f64).ln()).sum();
    let ln_freq = (*count as f64 / result.n_collected as f64).ln();
    Ok(problem.ln_gamma(mode) + ln_multiplicity - ln_freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn problem(targets: &[(&[f64], f64)], n_meas: usize, p_birth: f64) -> GibbsProblem {
        let mut cands: Vec<Candidate> = targets
            .iter()
            .map(|(a, b)| Candidate::from_log(&a.iter().map(|v| v.ln()).collect::<Vec<_>>(), b.ln()))
            .collect();
        for _ in 0..n_meas {
            cands.push(Candidate::from_log(&vec![p_birth.ln(); n_meas], (1.0 - p_birth).ln()));
        }
        GibbsProblem::new(cands, targets.len(), n_meas)
    }

    /// Enumerates every labeled exclusive assignment.
    fn enumerate(p: &GibbsProblem) -> Vec<(Vec<Association>, f64)> {
        let mut out = Vec::new();
        let mut cur = vec![Association::None; p.candidates.len()];
        fn rec(p: &GibbsProblem, i: usize, cur: &mut Vec<Association>, out: &mut Vec<(Vec<Association>, f64)>) {
            if i == cur.len() {
                if p.is_exclusive(cur) {
                    out.push((cur.clone(), p.ln_gamma(cur).exp()));
                }
                return;
            }
            cur[i] = Association::None;
            rec(p, i + 1, cur, out);
            for m in 0..p.n_measurements {
                cur[i] = Association::Measurement(m);
                rec(p, i + 1, cur, out);
            }
            cur[i] = Association::None;
        }
        rec(p, 0, &mut cur, &mut out);
        out
    }

    #[test]
    fn exact_normalizer_matches_enumeration() {
        let p = problem(&[(&[2.0, 0.1, 0.5], 0.3), (&[0.2, 3.0, 0.0], 0.6)], 3, 0.2);
        let total: f64 = enumerate(&p).iter().map(|(_, g)| g).sum();
        assert!((p.exact_ln_normalizer() - total.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_target_one_measurement_two_terms() {
        let p = GibbsProblem::new(vec![Candidate::from_log(&[0.7f64.ln()], 0.4f64.ln())], 1, 1);
        let z = p.exact_ln_normalizer().exp();
        assert!((z - 1.1).abs() < 1e-14);
    }

    #[test]
    fn conflicting_pair_has_zero_mass() {
        let p = problem(&[(&[1.0, 1.0], 0.5), (&[1.0, 1.0], 0.5)], 2, 0.1);
        let cond = p.pairwise_conditional(0, 1, &[Association::None; 4]);
        assert!(cond.iter().all(|((a, b), _)| a != b || !a.is_some()));
        assert_eq!(cond.len(), 1 + 2 * 2 + 2);
    }

    #[test]
    fn symmetric_pair_is_symmetric() {
        let p = problem(&[(&[0.8], 0.3), (&[0.8], 0.3)], 1, 0.1);
        let cond = p.pairwise_conditional(0, 1, &[Association::None; 3]);
        let get = |a, b| cond.iter().find(|(pair, _)| *pair == (a, b)).map_or(0.0, |x| x.1);
        let m = Association::Measurement(0);
        let e = Association::None;
        assert!((get(m, e) - get(e, m)).abs() < 1e-10);
    }

    #[test]
    fn pair_conditional_matches_enumeration() {
        let p = problem(&[(&[1.5, 0.2], 0.4), (&[0.3, 2.2], 0.5)], 2, 0.05);
        let mut current = vec![Association::None; 4];
        current[2] = Association::None;
        let cond = p.pairwise_conditional(0, 1, &current);
        let all = enumerate(&p);
        let matching: Vec<_> = all
            .iter()
            .filter(|(c, _)| c[2..] == current[2..])
            .collect();
        let total: f64 = matching.iter().map(|(_, g)| g).sum();
        assert_eq!(matching.len(), 7);
        for (c, g) in matching {
            let got = cond.iter().find(|(pair, _)| *pair == (c[0], c[1])).map_or(0.0, |x| x.1);
            assert!((got - g / total).abs() < 1e-12);
        }
    }

    #[test]
    fn overwhelming_likelihood_is_sampled() {
        let p = problem(&[(&[1e6], 1e-3)], 1, 0.01);
        let mut hits = 0;
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = gibbs_sample(&p, 25, 50, &mut rng);
            if r.sample[0] == Association::Measurement(0) {
                hits += 1;
            }
        }
        assert!(hits >= 199, "{hits}");
    }

    #[test]
    fn empty_frame_normalizer_is_silent_product() {
        let p = problem(&[(&[], 0.25), (&[], 0.5)], 0, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = gibbs_sample(&p, 5, 5, &mut rng);
        assert!(r.sample.iter().all(|a| *a == Association::None));
        let z = estimate_normalizer(&p, &r, 0).unwrap();
        assert!((z - 0.125f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn chib_estimate_is_close_to_exact() {
        let p = problem(&[(&[3.0, 0.4], 0.3), (&[0.5, 2.0], 0.2)], 2, 0.05);
        let exact = p.exact_ln_normalizer();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = gibbs_sample(&p, 25, 5000, &mut rng);
        let chib = estimate_normalizer(&p, &r, 0).unwrap();
        assert!(((chib - exact).exp() - 1.0).abs() < 0.1, "{chib} vs {exact}");
    }

    #[test]
    fn samples_are_exclusive() {
        let p = problem(&[(&[1.0, 1.0, 1.0], 0.1), (&[1.0, 1.0, 1.0], 0.1), (&[1.0, 1.0, 1.0], 0.1)], 3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r = gibbs_sample(&p, 2, 3, &mut rng);
            assert!(p.is_exclusive(&r.sample));
        }
    }
}
