//! Kalman sub-filters: Brownian-motion spatial filter, static feature filter,
//! Gaussian marginal likelihoods and an RTS smoother that handles gaps
//! between associated steps.

use nalgebra::{Cholesky, Const, Matrix2, Matrix3, SMatrix, SVector, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::model::{GaussianEstimate, Measurement};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn symmetrize<const D: usize>(m: &SMatrix<f64, D, D>) -> SMatrix<f64, D, D> {
    (m + m.transpose()) * 0.5
}

/// Multivariate normal density with a pre-factored covariance, for scoring
/// many points against one Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianDensity<const D: usize> {
    mean: SVector<f64, D>,
    chol: Cholesky<f64, Const<D>>,
    log_norm: f64,
}

impl<const D: usize> GaussianDensity<D> {
    pub fn new(mean: SVector<f64, D>, cov: SMatrix<f64, D, D>) -> Result<Self> {
        let chol = Cholesky::new(symmetrize(&cov)).ok_or_else(|| {
            Error::Numerical(format!("covariance is not positive definite: {cov:?}"))
        })?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        Ok(Self {
            mean,
            chol,
            log_norm: -0.5 * (D as f64 * LN_2PI + log_det),
        })
    }

    pub fn ln_pdf(&self, x: &SVector<f64, D>) -> f64 {
        let d = x - self.mean;
        let z = self.chol.l().solve_lower_triangular(&d).unwrap_or(d);
        self.log_norm - 0.5 * z.norm_squared()
    }
}

/// log N(x; mean, cov).
pub fn ln_normal<const D: usize>(
    x: &SVector<f64, D>,
    mean: &SVector<f64, D>,
    cov: &SMatrix<f64, D, D>,
) -> Result<f64> {
    Ok(GaussianDensity::new(*mean, *cov)?.ln_pdf(x))
}

/// Advances the spatial block by `n_steps` of Brownian motion. Features have
/// no process noise.
pub fn predict(est: &GaussianEstimate, n_steps: usize, sigma_q: f64) -> GaussianEstimate {
    let mut out = est.clone();
    if n_steps > 0 {
        out.cov_s += Matrix2::identity() * (n_steps as f64 * sigma_q * sigma_q);
    }
    out
}

/// Kalman update of a D-dimensional block observed directly with noise `r`.
/// Returns the posterior mean, covariance and log marginal of `y`.
pub fn update_block<const D: usize>(
    mean: &SVector<f64, D>,
    cov: &SMatrix<f64, D, D>,
    y: &SVector<f64, D>,
    r: &SMatrix<f64, D, D>,
) -> Result<(SVector<f64, D>, SMatrix<f64, D, D>, f64)> {
    let s = symmetrize(&(cov + r));
    let chol = Cholesky::new(s)
        .ok_or_else(|| Error::Numerical("singular innovation covariance".into()))?;
    let innovation = y - mean;
    // K = P S^-1, computed as (S^-1 P)^T since both are symmetric
    let gain = chol.solve(cov).transpose();
    let new_mean = mean + gain * innovation;
    let new_cov = symmetrize(&(cov - gain * cov));
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let z = chol.l().solve_lower_triangular(&innovation).unwrap_or(innovation);
    let log_marginal = -0.5 * (D as f64 * LN_2PI + log_det + z.norm_squared());
    Ok((new_mean, new_cov, log_marginal))
}

/// Joint spatial and feature update with measurement covariances σ_r²·I and
/// R^f. The log marginal is the sum of both blocks.
pub fn update(
    est: &GaussianEstimate,
    y: &Measurement,
    sigma_r: f64,
    r_f: &Matrix3<f64>,
) -> Result<(GaussianEstimate, f64)> {
    let r_s = Matrix2::identity() * (sigma_r * sigma_r);
    let (mean_s, cov_s, ll_s) = update_block(&est.mean_s, &est.cov_s, &y.pos, &r_s)?;
    let (mean_f, cov_f, ll_f) = update_block(&est.mean_f, &est.cov_f, &y.feat, r_f)?;
    Ok((
        GaussianEstimate {
            mean_s,
            cov_s,
            mean_f,
            cov_f,
            spatial_known: true,
        },
        ll_s + ll_f,
    ))
}

/// Spatial filter output at the associated steps of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredTrack {
    pub steps: Vec<usize>,
    pub means: Vec<Vector2<f64>>,
    pub covs: Vec<Matrix2<f64>>,
}

impl FilteredTrack {
    /// Runs the spatial filter over `observations` taken at `steps`.
    /// `prior_mean`/`prior_cov` is the predicted state at `steps[0]`.
    pub fn run(
        prior_mean: Vector2<f64>,
        prior_cov: Matrix2<f64>,
        steps: &[usize],
        observations: &[Vector2<f64>],
        sigma_q: f64,
        sigma_r: f64,
    ) -> Result<Self> {
        if steps.len() != observations.len() {
            return Err(Error::Data("steps and observations differ in length".into()));
        }
        let r = Matrix2::identity() * (sigma_r * sigma_r);
        let mut out = FilteredTrack {
            steps: steps.to_vec(),
            means: Vec::with_capacity(steps.len()),
            covs: Vec::with_capacity(steps.len()),
        };
        let (mut mean, mut cov) = (prior_mean, prior_cov);
        for (t, y) in observations.iter().enumerate() {
            if t > 0 {
                let gap = gap(steps, t - 1)?;
                cov += Matrix2::identity() * (gap as f64 * sigma_q * sigma_q);
            }
            let (m, c, _) = update_block(&mean, &cov, y, &r)?;
            mean = m;
            cov = c;
            out.means.push(mean);
            out.covs.push(cov);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn gap(steps: &[usize], t: usize) -> Result<usize> {
    match steps[t + 1].checked_sub(steps[t]) {
        Some(g) if g > 0 => Ok(g),
        _ => Err(Error::Data(format!(
            "step indices not increasing: {} then {}",
            steps[t],
            steps[t + 1]
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTrack {
    pub steps: Vec<usize>,
    pub means: Vec<Vector2<f64>>,
    pub covs: Vec<Matrix2<f64>>,
    /// `lag_one[t]` = cov(x at steps[t+1], x at steps[t] | all data).
    pub lag_one: Vec<Matrix2<f64>>,
}

/// RTS backward pass. Between associated steps `g` apart the transition is
/// the identity with process covariance g·σ_q²·I; unobserved steps in between
/// are marginalized exactly by that collapsed model.
pub fn rts_smooth(track: &FilteredTrack, sigma_q: f64) -> Result<SmoothedTrack> {
    let n = track.len();
    if n == 0 {
        return Err(Error::Data("cannot smooth an empty track".into()));
    }
    let mut means = track.means.clone();
    let mut covs = track.covs.clone();
    let mut lag_one = vec![Matrix2::zeros(); n - 1];
    for t in (0..n - 1).rev() {
        let g = gap(&track.steps, t)? as f64;
        let filt = track.covs[t];
        let pred = filt + Matrix2::identity() * (g * sigma_q * sigma_q);
        let chol = Cholesky::new(symmetrize(&pred))
            .ok_or_else(|| Error::Numerical("singular predicted covariance in smoother".into()))?;
        // G = P_t (P_pred)^-1
        let gain = chol.solve(&filt).transpose();
        means[t] = track.means[t] + gain * (means[t + 1] - track.means[t]);
        covs[t] = symmetrize(&(filt + gain * (covs[t + 1] - pred) * gain.transpose()));
        lag_one[t] = covs[t + 1] * gain.transpose();
    }
    Ok(SmoothedTrack {
        steps: track.steps.clone(),
        means,
        covs,
        lag_one,
    })
}

/// Smoothed feature mean: with no feature process noise this is the mean of
/// every associated feature measurement.
pub fn feature_smoothed_mean(measurements: &[Vector3<f64>]) -> Result<Vector3<f64>> {
    if measurements.is_empty() {
        return Err(Error::Data("feature mean of an empty measurement list".into()));
    }
    let sum: Vector3<f64> = measurements.iter().sum();
    Ok(sum / measurements.len() as f64)
}
