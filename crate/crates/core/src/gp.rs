//! Gaussian-process regression with a squared-exponential kernel, trained in
//! closed form through a Cholesky factorization.
//!
//! Inputs are unit-cube points. Targets are standardized to zero mean and
//! unit standard deviation before fitting, so the hyperparameter grid is
//! scale-free; predictions are mapped back to metric units.

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training inputs {0} and {1} are identical")]
    DegenerateInput(usize, usize),
    #[error("training target {0} is not finite")]
    NonFiniteTarget(usize),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(&'static str),
    #[error("covariance matrix not positive definite even with jitter {0:e}")]
    NotPositiveDefinite(f64),
    #[error("no candidate hyperparameters produced a valid fit")]
    AllFitsFailed,
}

/// Kernel amplitude, per-dimension length scales, and observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GpHyper {
    pub signal_var: f64,
    pub length_scales: Vec<f64>,
    pub noise_var: f64,
}

impl GpHyper {
    pub fn isotropic(dim: usize, length_scale: f64, signal_var: f64, noise_var: f64) -> Self {
        Self {
            signal_var,
            length_scales: vec![length_scale; dim],
            noise_var,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), GpError> {
        if self.length_scales.len() != dim {
            return Err(GpError::DimensionMismatch {
                expected: dim,
                got: self.length_scales.len(),
            });
        }
        if !(self.signal_var.is_finite() && self.signal_var > 0.0) {
            return Err(GpError::InvalidHyper("signal variance must be finite and positive"));
        }
        if !(self.noise_var.is_finite() && self.noise_var >= 0.0) {
            return Err(GpError::InvalidHyper("noise variance must be finite and non-negative"));
        }
        if self
            .length_scales
            .iter()
            .any(|l| !(l.is_finite() && *l > 0.0))
        {
            return Err(GpError::InvalidHyper("length scales must be finite and positive"));
        }
        Ok(())
    }
}

/// The fixed selection grid: shared length scale in {0.1, 0.3, 1.0},
/// unit signal variance, noise in {1e-6, 1e-2}.
pub fn default_hyper_grid(dim: usize) -> Vec<GpHyper> {
    let mut grid = Vec::with_capacity(6);
    for &ell in &[0.1, 0.3, 1.0] {
        for &noise in &[1e-6, 1e-2] {
            grid.push(GpHyper::isotropic(dim, ell, 1.0, noise));
        }
    }
    grid
}

#[inline]
fn sq_exp(u: &[f64], v: &[f64], hyper: &GpHyper) -> f64 {
    let r2: f64 = u
        .iter()
        .zip(v)
        .zip(&hyper.length_scales)
        .map(|((a, b), l)| {
            let d = (a - b) / l;
            d * d
        })
        .sum();
    hyper.signal_var * (-0.5 * r2).exp()
}

/// `signal_var * exp(-0.5 * sum_i (u_i - v_i)^2 / l_i^2)`.
pub fn kernel(u: &[f64], v: &[f64], hyper: &GpHyper) -> Result<f64, GpError> {
    if u.len() != v.len() || u.len() != hyper.length_scales.len() {
        return Err(GpError::DimensionMismatch {
            expected: hyper.length_scales.len(),
            got: if u.len() != hyper.length_scales.len() {
                u.len()
            } else {
                v.len()
            },
        });
    }
    Ok(sq_exp(u, v, hyper))
}

/// Row-major lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factorizes a symmetric matrix given row-major; only the lower half is read.
    fn factor(a: &[f64], n: usize) -> Option<Self> {
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Some(Self { n, l })
    }

    fn diag(&self, i: usize) -> f64 {
        self.l[i * self.n + i]
    }

    /// Solves `L x = b`.
    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s: f64 = row.iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
            x[i] = (x[i] - s) / self.l[i * n + i];
        }
        x
    }

    /// Solves `L^T x = b`.
    fn backward(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }
}

const JITTER_START: f64 = 1e-9;
const JITTER_MAX: f64 = 1e-3;

/// A fitted, immutable Gaussian-process posterior.
#[derive(Debug, Clone)]
pub struct GpModel {
    train_u: Vec<Vec<f64>>,
    train_y_raw: Vec<f64>,
    y_scaled: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    hyper: GpHyper,
    jitter: f64,
    chol: Cholesky,
    alpha: Vec<f64>,
}

impl GpModel {
    pub fn fit(train_u: &[Vec<f64>], train_y: &[f64], hyper: &GpHyper) -> Result<Self, GpError> {
        let n = train_u.len();
        if n == 0 {
            return Err(GpError::EmptyTrainingSet);
        }
        if train_y.len() != n {
            return Err(GpError::DimensionMismatch {
                expected: n,
                got: train_y.len(),
            });
        }
        let dim = hyper.length_scales.len();
        hyper.validate(dim)?;
        for row in train_u {
            if row.len() != dim {
                return Err(GpError::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
        }
        if let Some(i) = train_y.iter().position(|y| !y.is_finite()) {
            return Err(GpError::NonFiniteTarget(i));
        }
        for i in 0..n {
            for j in 0..i {
                if train_u[i] == train_u[j] {
                    return Err(GpError::DegenerateInput(j, i));
                }
            }
        }

        let y_mean = train_y.iter().sum::<f64>() / n as f64;
        let var = train_y.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let y_scaled: Vec<f64> = train_y.iter().map(|y| (y - y_mean) / y_std).collect();

        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = sq_exp(&train_u[i], &train_u[j], hyper);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }

        let mut jitter = JITTER_START * hyper.signal_var;
        let limit = JITTER_MAX * hyper.signal_var * (1.0 + 1e-9);
        let chol = loop {
            let mut a = k.clone();
            for i in 0..n {
                a[i * n + i] += hyper.noise_var + jitter;
            }
            if let Some(c) = Cholesky::factor(&a, n) {
                break c;
            }
            jitter *= 10.0;
            if jitter > limit {
                return Err(GpError::NotPositiveDefinite(jitter / 10.0));
            }
        };
        let alpha = chol.backward(&chol.forward(&y_scaled));

        Ok(Self {
            train_u: train_u.to_vec(),
            train_y_raw: train_y.to_vec(),
            y_scaled,
            y_mean,
            y_std,
            hyper: hyper.clone(),
            jitter,
            chol,
            alpha,
        })
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    /// Diagonal jitter that made the factorization succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.train_u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_u.is_empty()
    }

    pub fn train_inputs(&self) -> &[Vec<f64>] {
        &self.train_u
    }

    pub fn train_targets(&self) -> &[f64] {
        &self.train_y_raw
    }

    /// `(mean, std)` used to standardize the targets.
    pub fn standardization(&self) -> (f64, f64) {
        (self.y_mean, self.y_std)
    }

    /// Posterior mean and variance at `u`, in metric units.
    pub fn predict(&self, u: &[f64]) -> Result<(f64, f64), GpError> {
        let dim = self.hyper.length_scales.len();
        if u.len() != dim {
            return Err(GpError::DimensionMismatch {
                expected: dim,
                got: u.len(),
            });
        }
        let k: Vec<f64> = self
            .train_u
            .iter()
            .map(|x| sq_exp(x, u, &self.hyper))
            .collect();
        let mean_scaled: f64 = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = self.chol.forward(&k);
        let explained: f64 = v.iter().map(|x| x * x).sum();
        let var_scaled = (self.hyper.signal_var - explained).max(0.0);
        Ok((
            self.y_mean + self.y_std * mean_scaled,
            var_scaled * self.y_std * self.y_std,
        ))
    }

    /// Log evidence of the standardized targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len();
        let fit: f64 = self
            .y_scaled
            .iter()
            .zip(&self.alpha)
            .map(|(y, a)| y * a)
            .sum();
        let log_det_half: f64 = (0..n).map(|i| self.chol.diag(i).ln()).sum();
        -0.5 * fit - log_det_half - 0.5 * n as f64 * (2.0 * PI).ln()
    }
}

/// The grid element with the highest log marginal likelihood; ties keep the
/// earliest. Candidates that fail to factorize are skipped.
pub fn select_hypers(
    train_u: &[Vec<f64>],
    train_y: &[f64],
    grid: &[GpHyper],
) -> Result<GpHyper, GpError> {
    let mut best: Option<(f64, &GpHyper)> = None;
    for h in grid {
        match GpModel::fit(train_u, train_y, h) {
            Ok(model) => {
                let lml = model.log_marginal_likelihood();
                if best.is_none_or(|(b, _)| lml > b) {
                    best = Some((lml, h));
                }
            }
            Err(GpError::NotPositiveDefinite(_) | GpError::InvalidHyper(_)) => {}
            Err(e) => return Err(e),
        }
    }
    best.map(|(_, h)| h.clone()).ok_or(GpError::AllFitsFailed)
}
