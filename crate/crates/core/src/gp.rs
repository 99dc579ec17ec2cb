//! Exact Gaussian-process regression of RSSI over position.
//!
//! The model is `y = f(x) + e` with a zero-mean GP prior on `f` under the
//! squared-exponential kernel and i.i.d. Gaussian noise `e`. Hyperparameters
//! `(l, sf2, sn2)` are fitted by gradient ascent on the log marginal
//! likelihood in log space.
//!
//! Repeated survey locations are collapsed exactly (see
//! [`crate::replicates`]), so the cost depends on the number of distinct
//! locations rather than the number of fingerprints.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::{ApMap, Dataset, GridSpec, Position, RadioMap};
use crate::error::{Error, Result};
use crate::kernel::{se_from_sq_dist, GpHyperparams};
use crate::linalg::{cholesky_jittered, half_log_det};
use crate::optim::Adam;
use crate::replicates::Replicates;

/// Lower bound applied to predictive variances stored in radio maps.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Covariance of noisy observations, `K(X) + (sn2 + jitter) I`.
///
/// Fails with a conditioning error if the matrix cannot be factorized even
/// after the jitter ladder.
pub fn gram(x: &[Position], theta: &GpHyperparams, jitter: f64) -> Result<DMatrix<f64>> {
    theta.validate()?;
    if x.is_empty() {
        return Err(Error::Validation("gram matrix of zero inputs".into()));
    }
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        let mut v = se_from_sq_dist(x[i].squared_distance(&x[j]), theta);
        if i == j {
            v += theta.noise_variance + jitter;
        }
        v
    });
    cholesky_jittered(&k)?;
    Ok(k)
}

/// Factorized covariance of the collapsed system
/// `sn2 I + C^{1/2} K(U) C^{1/2}` over the distinct inputs `U`.
struct System {
    rep: Replicates,
    theta: GpHyperparams,
    /// Pairwise squared distances between distinct inputs.
    sq_dist: DMatrix<f64>,
    kernel: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `Q^T y`
    projected: DVector<f64>,
    within_ss: f64,
    n: usize,
}

impl System {
    fn new(x: &[Position], y: &[f64], theta: &GpHyperparams) -> Result<System> {
        System::with_replicates(Replicates::new(x), y, theta)
    }

    fn with_replicates(rep: Replicates, y: &[f64], theta: &GpHyperparams) -> Result<System> {
        theta.validate()?;
        let p = rep.n_unique();
        let sq_dist = DMatrix::from_fn(p, p, |i, j| rep.points[i].squared_distance(&rep.points[j]));
        let kernel = sq_dist.map(|d2| se_from_sq_dist(d2, theta));
        let sc = rep.sqrt_counts();
        let mut m = DMatrix::from_fn(p, p, |i, j| sc[i] * kernel[(i, j)] * sc[j]);
        for i in 0..p {
            m[(i, i)] += theta.noise_variance;
        }
        let (chol, _) = cholesky_jittered(&m)?;
        let projected = rep.project(y);
        let within_ss = rep.within_sum_of_squares(y);
        Ok(System {
            n: y.len(),
            rep,
            theta: *theta,
            sq_dist,
            kernel,
            chol,
            projected,
            within_ss,
        })
    }

    fn log_marginal_likelihood(&self) -> f64 {
        let sn2 = self.theta.noise_variance;
        let p = self.rep.n_unique();
        let z = self.chol.solve(&self.projected);
        let quad = self.within_ss / sn2 + self.projected.dot(&z);
        let log_det = (self.n - p) as f64 * sn2.ln() + 2.0 * half_log_det(&self.chol);
        -0.5 * quad - 0.5 * log_det - 0.5 * self.n as f64 * (2.0 * PI).ln()
    }

    /// Gradient with respect to `(log l, log sf2, log sn2)`.
    fn gradient(&self) -> [f64; 3] {
        let sn2 = self.theta.noise_variance;
        let l2 = self.theta.length_scale.powi(2);
        let p = self.rep.n_unique();
        let sc = self.rep.sqrt_counts();
        let m_inv = self.chol.inverse();
        let z = &m_inv * &self.projected;
        // A^T alpha with alpha = (K + sn2 I)^{-1} y
        let b = z.component_mul(&sc);

        // d lml / d K(U) = 1/2 (b b^T - C^{1/2} M^{-1} C^{1/2})
        let mut d_length = 0.0;
        let mut d_signal = 0.0;
        for j in 0..p {
            for i in 0..p {
                let w = b[i] * b[j] - sc[i] * m_inv[(i, j)] * sc[j];
                let wk = w * self.kernel[(i, j)];
                d_signal += wk;
                d_length += wk * self.sq_dist[(i, j)] / l2;
            }
        }
        let alpha_sq = self.within_ss / (sn2 * sn2) + z.norm_squared();
        let trace_inv = (self.n - p) as f64 / sn2 + m_inv.trace();
        let d_noise = sn2 * (alpha_sq - trace_inv);
        [0.5 * d_length, 0.5 * d_signal, 0.5 * d_noise]
    }
}

/// `log p(Y | X, theta)` under the GP prior.
pub fn log_marginal_likelihood(x: &[Position], y: &[f64], theta: &GpHyperparams) -> Result<f64> {
    check_xy(x, y, 1)?;
    Ok(System::new(x, y, theta)?.log_marginal_likelihood())
}

/// Analytic gradient of [`log_marginal_likelihood`] with respect to
/// `(log l, log sf2, log sn2)`.
pub fn lml_gradient(x: &[Position], y: &[f64], theta: &GpHyperparams) -> Result<[f64; 3]> {
    check_xy(x, y, 1)?;
    Ok(System::new(x, y, theta)?.gradient())
}

fn check_xy(x: &[Position], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} outputs",
            x.len(),
            y.len()
        )));
    }
    if x.len() < min {
        return Err(Error::Validation(format!(
            "need at least {min} observations, got {}",
            x.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().any(|p| !p.is_finite()) {
        return Err(Error::Validation("non-finite training data".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    pub step_size: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 500,
            tol: 1e-6,
            step_size: 0.05,
        }
    }
}

/// A GP conditioned on its training data.
#[derive(Debug, Clone)]
pub struct TrainedGp {
    x: Vec<Position>,
    y: Vec<f64>,
    theta: GpHyperparams,
    rep: Replicates,
    /// Factor of `sn2 I + C^{1/2} K(U) C^{1/2}`; with distinct inputs this is
    /// exactly the factor of `K(X) + sn2 I`.
    chol: DMatrix<f64>,
    /// `(K(X) + sn2 I)^{-1} Y`
    alpha: DVector<f64>,
    /// Mean weights over the distinct inputs, `A^T alpha`.
    weights: DVector<f64>,
    log_marginal_likelihood: f64,
}

/// GP predictive distribution at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpPrediction {
    pub mean: f64,
    /// Variance of the latent function value.
    pub var_latent: f64,
    /// `var_latent + sn2`, the variance of a fresh observation.
    pub var_total: f64,
}

impl TrainedGp {
    /// Conditions the GP on `(x, y)` with fixed hyperparameters.
    pub fn condition(x: &[Position], y: &[f64], theta: &GpHyperparams) -> Result<Self> {
        check_xy(x, y, 1)?;
        let sys = System::new(x, y, theta)?;
        let lml = sys.log_marginal_likelihood();
        let z = sys.chol.solve(&sys.projected);
        let sc = sys.rep.sqrt_counts();
        let weights = z.component_mul(&sc);
        let means = sys.rep.group_means(y);
        let sn2 = theta.noise_variance;
        let alpha = DVector::from_iterator(
            y.len(),
            y.iter().zip(&sys.rep.member).map(|(&yi, &m)| {
                (yi - means[m]) / sn2 + z[m] / sc[m]
            }),
        );
        Ok(TrainedGp {
            x: x.to_vec(),
            y: y.to_vec(),
            theta: *theta,
            chol: sys.chol.l(),
            rep: sys.rep,
            alpha,
            weights,
            log_marginal_likelihood: lml,
        })
    }

    pub fn inputs(&self) -> &[Position] {
        &self.x
    }

    pub fn outputs(&self) -> &[f64] {
        &self.y
    }

    pub fn theta(&self) -> &GpHyperparams {
        &self.theta
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn covariance_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn distinct_inputs(&self) -> &[Position] {
        &self.rep.points
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    pub fn predict(&self, x_star: &Position) -> GpPrediction {
        let sf2 = self.theta.signal_variance;
        let kp = DVector::from_iterator(
            self.rep.n_unique(),
            self.rep
                .points
                .iter()
                .map(|u| se_from_sq_dist(u.squared_distance(x_star), &self.theta)),
        );
        let mean = kp.dot(&self.weights);
        let scaled = DVector::from_iterator(
            kp.len(),
            kp.iter()
                .zip(&self.rep.counts)
                .map(|(k, &c)| k * (c as f64).sqrt()),
        );
        let v = self
            .chol
            .solve_lower_triangular(&scaled)
            .expect("factor has positive diagonal");
        let var_latent = (sf2 - v.norm_squared()).clamp(0.0, sf2);
        GpPrediction {
            mean,
            var_latent,
            var_total: var_latent + self.theta.noise_variance,
        }
    }
}

/// Predictive mean and variances at `x_star`.
pub fn gp_predict(model: &TrainedGp, x_star: &Position) -> GpPrediction {
    model.predict(x_star)
}

/// Fits hyperparameters by Adam ascent on the log marginal likelihood in
/// log-parameter space, starting from `theta0`, and returns the GP at the
/// best iterate seen.
///
/// The step size is halved whenever an iterate lowers the objective, which
/// lets the ascent settle instead of circling the optimum.
pub fn fit_gp(
    x: &[Position],
    y: &[f64],
    theta0: &GpHyperparams,
    opts: &FitOptions,
) -> Result<TrainedGp> {
    check_xy(x, y, 2)?;
    theta0.validate()?;
    let rep = Replicates::new(x);
    let eval = |log: [f64; 3]| -> Option<(f64, [f64; 3])> {
        let theta = GpHyperparams::from_log(log);
        theta.validate().ok()?;
        let sys = System::with_replicates(rep.clone(), y, &theta).ok()?;
        let v = sys.log_marginal_likelihood();
        v.is_finite().then(|| (v, sys.gradient()))
    };

    let mut params = theta0.to_log();
    let (mut value, mut grad) = eval(params).ok_or(Error::Initialization)?;
    let mut best = (value, params);
    let mut adam = Adam::new(3, opts.step_size);
    for _ in 0..opts.max_iters {
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < opts.tol {
            break;
        }
        let mut next = params;
        adam.step(&mut next, &grad);
        match eval(next) {
            Some((v, g)) => {
                if v < value {
                    adam.scale_step(0.5);
                }
                params = next;
                value = v;
                grad = g;
                if v > best.0 {
                    best = (v, next);
                }
            }
            None => {
                adam.scale_step(0.5);
                params = best.1;
                (value, grad) = eval(params).ok_or(Error::Initialization)?;
            }
        }
    }
    TrainedGp::condition(x, y, &GpHyperparams::from_log(best.1))
}

/// Options for building GP radio maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpMapOptions {
    pub fit: FitOptions,
    /// Added to RSSI before fitting and removed from predictions. Zero keeps
    /// the raw dB values under the zero-mean prior.
    pub offset: f64,
}

impl Default for GpMapOptions {
    fn default() -> Self {
        GpMapOptions {
            fit: FitOptions::default(),
            offset: 0.0,
        }
    }
}

/// Data-driven starting point: `l` a quarter of the grid diagonal, `sf2` the
/// sample variance of `y`, `sn2` a tenth of it.
pub fn default_theta0(grid: &GridSpec, y: &[f64]) -> GpHyperparams {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-6);
    GpHyperparams {
        length_scale: grid.diagonal() / 4.0,
        signal_variance: var,
        noise_variance: 0.1 * var,
    }
}

/// Fits one GP per access point and predicts every grid cell.
///
/// APs heard fewer than twice are skipped with a warning. The map stores the
/// predictive mean and the total (latent plus noise) variance, floored at
/// [`VARIANCE_FLOOR`].
pub fn build_gp_radio_map(
    dataset: &Dataset,
    grid: &GridSpec,
    opts: &GpMapOptions,
) -> Result<(RadioMap, BTreeMap<String, GpHyperparams>)> {
    if dataset.is_empty() {
        return Err(Error::Validation("dataset is empty".into()));
    }
    let centers = grid.centers();
    let mut map = RadioMap::new(*grid);
    let mut fitted = BTreeMap::new();
    for ap in dataset.ap_ids() {
        let (x, mut y) = dataset.observations(ap)?;
        if y.len() < 2 {
            warn!("skipping AP `{ap}`: only {} observation(s)", y.len());
            continue;
        }
        y.iter_mut().for_each(|v| *v += opts.offset);
        let theta0 = default_theta0(grid, &y);
        let model = fit_gp(&x, &y, &theta0, &opts.fit)?;
        let (mean, variance) = centers
            .iter()
            .map(|c| {
                let p = model.predict(c);
                (p.mean - opts.offset, p.var_total.max(VARIANCE_FLOOR))
            })
            .unzip();
        map.insert(
            ap.clone(),
            ApMap {
                mean,
                variance,
                hyperparams: Some(*model.theta()),
            },
        )?;
        fitted.insert(ap.clone(), *model.theta());
    }
    if map.aps.is_empty() {
        return Err(Error::Validation(
            "no access point has at least 2 observations".into(),
        ));
    }
    Ok((map, fitted))
}
