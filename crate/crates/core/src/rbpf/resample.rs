use rand::Rng;

use crate::model::Particle;

/// 1 / Σ w², for normalized log weights.
pub fn effective_sample_size(log_weights: &[f64]) -> f64 {
    let sum_sq: f64 = log_weights.iter().map(|lw| (2.0 * lw).exp()).sum();
    if sum_sq > 0.0 {
        1.0 / sum_sq
    } else {
        0.0
    }
}

/// Systematic resampling: one uniform offset, `n` evenly spaced pointers.
pub fn systematic_indices<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let step = total / n as f64;
    let mut u = rng.gen::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut i = 0;
    for _ in 0..n {
        while i + 1 < weights.len() && cum + weights[i] <= u {
            cum += weights[i];
            i += 1;
        }
        out.push(i);
        u += step;
    }
    out
}

/// Resamples when the effective sample size falls below
/// `threshold_fraction · n`. Returns whether resampling happened.
pub fn resample<R: Rng + ?Sized>(
    particles: &mut Vec<Particle>,
    threshold_fraction: f64,
    rng: &mut R,
) -> bool {
    let n = particles.len();
    let log_weights: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
    if n == 0 || effective_sample_size(&log_weights) >= threshold_fraction * n as f64 {
        return false;
    }
    let weights: Vec<f64> = log_weights.iter().map(|lw| lw.exp()).collect();
    let indices = systematic_indices(&weights, n, rng);
    let uniform = -(n as f64).ln();
    let mut next: Vec<Particle> = indices.iter().map(|&i| particles[i].clone()).collect();
    next.iter_mut().for_each(|p| p.log_weight = uniform);
    *particles = next;
    true
}
