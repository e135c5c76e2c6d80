//! Gaussian-kernel interpolation (RBF) and GP regression with a grid search
//! over length-scale and noise by log marginal likelihood.

use crate::error::{Error, Result};
use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbfHyper {
    pub ridge: f64,
    /// Factor applied to the ridge for the single retry after a failed
    /// factorisation.
    pub ridge_retry_factor: f64,
}

impl Default for RbfHyper {
    fn default() -> Self {
        RbfHyper {
            ridge: 1e-8,
            ridge_retry_factor: 1e4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpHyper {
    /// Candidate length-scales as multiples of the median pairwise distance.
    pub length_scale_factors: Vec<f64>,
    pub noise_levels: Vec<f64>,
}

impl Default for GpHyper {
    fn default() -> Self {
        GpHyper {
            length_scale_factors: vec![0.25, 0.5, 1.0, 2.0],
            noise_levels: vec![1e-6, 1e-4, 1e-2],
        }
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pairwise squared distances of the rows of `x` (`n × dim`).
fn pairwise_sq(x: &[f64], dim: usize) -> Mat<f64> {
    let n = x.len() / dim;
    let mut d = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = sq_dist(&x[i * dim..(i + 1) * dim], &x[j * dim..(j + 1) * dim]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Median of the `n(n−1)/2` pairwise distances; 1 when all points coincide.
pub fn median_distance(d2: &Mat<f64>) -> f64 {
    let n = d2.nrows();
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| d2[(i, j)].sqrt())
        .collect();
    if v.is_empty() {
        return 1.0;
    }
    let m = v.len() / 2;
    let (_, hi, _) = v.select_nth_unstable_by(m, f64::total_cmp);
    let hi = *hi;
    let med = if v.len() % 2 == 1 {
        hi
    } else {
        0.5 * (hi + v[..m].iter().copied().fold(f64::MIN, f64::max))
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn kernel(d2: &Mat<f64>, denom: f64, jitter: f64) -> Mat<f64> {
    Mat::from_fn(d2.nrows(), d2.ncols(), |i, j| {
        (-d2[(i, j)] / denom).exp() + if i == j { jitter } else { 0.0 }
    })
}

/// `K⁻¹ y` and `½ log det K`, or `None` if `K` is not numerically positive
/// definite.
fn solve(k: &Mat<f64>, y: &[f64]) -> Option<(Vec<f64>, f64)> {
    let chol = k.llt(Side::Lower).ok()?;
    let l = chol.L();
    let log_det_half: f64 = (0..k.nrows()).map(|i| l[(i, i)].ln()).sum();
    let alpha = chol.solve(Mat::from_fn(y.len(), 1, |i, _| y[i]));
    let alpha: Vec<f64> = (0..y.len()).map(|i| alpha[(i, 0)]).collect();
    (log_det_half.is_finite() && alpha.iter().all(|v| v.is_finite()))
        .then_some((alpha, log_det_half))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelModel {
    pub dim: usize,
    /// Training inputs, `n × dim` row-major.
    pub centers: Vec<f64>,
    pub weights: Vec<f64>,
    /// Kernel is `exp(−r² / denom)`.
    pub denom: f64,
    /// Median pairwise training distance.
    pub sigma: f64,
    /// Diagonal term actually used (ridge for RBF, noise for GP).
    pub jitter: f64,
    /// GP only: chosen length-scale and its log marginal likelihood.
    pub length_scale: Option<f64>,
    pub log_marginal_likelihood: Option<f64>,
}

impl KernelModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.centers
            .chunks_exact(self.dim)
            .zip(&self.weights)
            .map(|(c, w)| w * (-sq_dist(c, x) / self.denom).exp())
            .sum()
    }

    /// `y` standardized; `exp(−(r/σ)²)` with σ the median distance.
    pub fn fit_rbf(x: &[f64], y: &[f64], dim: usize, hyper: &RbfHyper) -> Result<KernelModel> {
        let d2 = pairwise_sq(x, dim);
        let sigma = median_distance(&d2);
        let denom = sigma * sigma;
        let mut ridge = hyper.ridge;
        let (alpha, _) = match solve(&kernel(&d2, denom, ridge), y) {
            Some(s) => s,
            None => {
                ridge *= hyper.ridge_retry_factor;
                solve(&kernel(&d2, denom, ridge), y).ok_or_else(|| {
                    Error::Numerical(format!(
                        "RBF kernel system is singular even with ridge {ridge:e}"
                    ))
                })?
            }
        };
        Ok(KernelModel {
            dim,
            centers: x.to_vec(),
            weights: alpha,
            denom,
            sigma,
            jitter: ridge,
            length_scale: None,
            log_marginal_likelihood: None,
        })
    }

    /// `y` standardized, unit signal variance; squared-exponential kernel
    /// `exp(−r²/(2ℓ²))`. Grid points whose covariance cannot be factorised
    /// are skipped; ties keep the earlier grid point.
    pub fn fit_gp(x: &[f64], y: &[f64], dim: usize, hyper: &GpHyper) -> Result<KernelModel> {
        let n = y.len();
        let d2 = pairwise_sq(x, dim);
        let sigma = median_distance(&d2);
        let mut best: Option<KernelModel> = None;
        for &f in &hyper.length_scale_factors {
            let ell = f * sigma;
            let denom = 2.0 * ell * ell;
            for &noise in &hyper.noise_levels {
                let Some((alpha, log_det_half)) = solve(&kernel(&d2, denom, noise), y) else {
                    continue;
                };
                let fit: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
                let lml =
                    -0.5 * fit - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
                if best
                    .as_ref()
                    .is_none_or(|b| lml > b.log_marginal_likelihood.unwrap_or(f64::MIN))
                {
                    best = Some(KernelModel {
                        dim,
                        centers: x.to_vec(),
                        weights: alpha.clone(),
                        denom,
                        sigma,
                        jitter: noise,
                        length_scale: Some(ell),
                        log_marginal_likelihood: Some(lml),
                    });
                }
            }
        }
        best.ok_or_else(|| {
            Error::Numerical(
                "no GP hyperparameter setting gave a positive-definite covariance".into(),
            )
        })
    }
}
