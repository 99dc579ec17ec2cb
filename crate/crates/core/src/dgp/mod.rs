//! Deep GP with two hidden layers, `X -> L -> H -> Y`.
//!
//! ```text
//! L_d = f^L_d(X) + e^L,   f^L_d ~ GP(0, k^L_d)        d = 1..D_L
//! H_d = f^H_d(L) + e^H,   f^H_d ~ GP(0, k^H_d)        d = 1..D_H
//! Y   = f^Y(H)   + e^Y,   f^Y   ~ GP(0, k^Y)
//! ```
//!
//! The first layer is integrated exactly against a Gaussian `q(L)`; the two
//! upper layers are sparse GPs with whitened inducing variables. `q(H)` is a
//! diagonal Gaussian. The bound is
//!
//! ```text
//! E_q(H)[log p(Y | H)] - KL(q(u^Y) || p(u^Y))
//!   + E_q(L) q(H)[log p(H | L)] - sum_d KL(q(u^H_d) || p(u^H_d))
//!   + entropy(q(H)) - KL(q(L) || p(L | X))
//! ```
//!
//! with the expectations over `L` and `H` estimated by reparameterized
//! sampling and every other term in closed form.

mod latent;
mod layer;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ApMap, Dataset, GridSpec, Position, RadioMap};
use crate::error::{Error, Result};
use crate::gp::VARIANCE_FLOOR;
use crate::kernel::ArdParams;
use crate::optim::Adam;
use crate::replicates::Replicates;

use latent::{latent_kl, CovGrad, CovRef, LatentPredictor};
use layer::{ard_cross, ard_cross_backward, backward, finish, forward, whitened_kl, LayerGrad, Prepared};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Above this many inputs `q(L)` defaults to a diagonal covariance.
pub const FULL_COVARIANCE_LIMIT: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LatentCovariance {
    /// Full up to [`FULL_COVARIANCE_LIMIT`] inputs, diagonal beyond.
    #[default]
    Auto,
    Full,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpLayerConfig {
    pub d_l: usize,
    pub d_h: usize,
    /// Inducing points of the `L -> H` layer.
    pub k_l: usize,
    /// Inducing points of the `H -> Y` layer.
    pub k_h: usize,
    /// Starting kernels; `None` means unit variance and unit weights.
    pub kernel_l: Option<ArdParams>,
    pub kernel_h: Option<ArdParams>,
    pub kernel_y: Option<ArdParams>,
    pub noise_l: f64,
    pub noise_h: f64,
    pub noise_y: f64,
    pub latent_covariance: LatentCovariance,
    /// Starting variance of `q(L)` and `q(H)`.
    pub init_variance: f64,
}

impl Default for DgpLayerConfig {
    fn default() -> Self {
        DgpLayerConfig {
            d_l: 2,
            d_h: 2,
            k_l: 32,
            k_h: 32,
            kernel_l: None,
            kernel_h: None,
            kernel_y: None,
            noise_l: 1e-2,
            noise_h: 1e-2,
            noise_y: 0.1,
            latent_covariance: LatentCovariance::Auto,
            init_variance: 1e-2,
        }
    }
}

impl DgpLayerConfig {
    /// Same configuration with inducing counts capped at `n`.
    pub fn capped(&self, n: usize) -> Self {
        DgpLayerConfig {
            k_l: self.k_l.min(n),
            k_h: self.k_h.min(n),
            ..self.clone()
        }
    }

    pub fn validate(&self, n: usize, d_in: usize) -> Result<()> {
        if self.d_l == 0 || self.d_h == 0 {
            return Err(Error::Validation("hidden widths must be at least 1".into()));
        }
        if self.k_l == 0 || self.k_h == 0 {
            return Err(Error::Validation("inducing counts must be at least 1".into()));
        }
        if self.k_l > n || self.k_h > n {
            return Err(Error::Validation(format!(
                "inducing counts ({}, {}) exceed the {n} inputs",
                self.k_l, self.k_h
            )));
        }
        for (v, what) in [
            (self.noise_l, "noise_l"),
            (self.noise_h, "noise_h"),
            (self.noise_y, "noise_y"),
            (self.init_variance, "init_variance"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{what} must be positive, got {v}")));
            }
        }
        for (k, dim, what) in [
            (&self.kernel_l, d_in, "kernel_l"),
            (&self.kernel_h, self.d_l, "kernel_h"),
            (&self.kernel_y, self.d_h, "kernel_y"),
        ] {
            if let Some(k) = k {
                let k = ArdParams::new(k.signal_variance, k.weights.clone())?;
                if k.dim() != dim {
                    return Err(Error::Shape(format!(
                        "{what} has {} weights, layer input has {dim} dimensions",
                        k.dim()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Every trainable array of a [`DgpModel`]. Positive quantities are stored
/// as logarithms and covariances as lower-triangular factors.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpParams {
    /// `q(L)` means, N x D_L.
    pub l_mean: DMatrix<f64>,
    /// Per dimension: N x 1 log-variances, or an N x N lower factor.
    pub l_cov: Vec<DMatrix<f64>>,
    /// `q(H)` means, N x D_H.
    pub h_mean: DMatrix<f64>,
    pub h_log_var: DMatrix<f64>,
    /// Per output dimension, `[log sf2, log w_1, ..]` as a column.
    pub kern_l: Vec<DMatrix<f64>>,
    pub kern_h: Vec<DMatrix<f64>>,
    pub kern_y: DMatrix<f64>,
    /// Inducing inputs in `L` space (K_L x D_L) and `H` space (K_H x D_H).
    pub z_l: DMatrix<f64>,
    pub z_h: DMatrix<f64>,
    /// Whitened `q(u^H_d)`: means and lower factors.
    pub u_h_mean: Vec<DMatrix<f64>>,
    pub u_h_factor: Vec<DMatrix<f64>>,
    pub u_y_mean: DMatrix<f64>,
    pub u_y_factor: DMatrix<f64>,
    /// `[log e^L, log e^H, log e^Y]`.
    pub log_noise: DMatrix<f64>,
}

impl DgpParams {
    pub fn fields(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut v = vec![("l_mean".to_string(), &self.l_mean)];
        v.extend(self.l_cov.iter().enumerate().map(|(d, m)| (format!("l_cov.{d}"), m)));
        v.push(("h_mean".into(), &self.h_mean));
        v.push(("h_log_var".into(), &self.h_log_var));
        v.extend(self.kern_l.iter().enumerate().map(|(d, m)| (format!("kern_l.{d}"), m)));
        v.extend(self.kern_h.iter().enumerate().map(|(d, m)| (format!("kern_h.{d}"), m)));
        v.push(("kern_y".into(), &self.kern_y));
        v.push(("z_l".into(), &self.z_l));
        v.push(("z_h".into(), &self.z_h));
        v.extend(self.u_h_mean.iter().enumerate().map(|(d, m)| (format!("u_h_mean.{d}"), m)));
        v.extend(self.u_h_factor.iter().enumerate().map(|(d, m)| (format!("u_h_factor.{d}"), m)));
        v.push(("u_y_mean".into(), &self.u_y_mean));
        v.push(("u_y_factor".into(), &self.u_y_factor));
        v.push(("log_noise".into(), &self.log_noise));
        v
    }

    fn fields_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut v = vec![&mut self.l_mean];
        v.extend(self.l_cov.iter_mut());
        v.push(&mut self.h_mean);
        v.push(&mut self.h_log_var);
        v.extend(self.kern_l.iter_mut());
        v.extend(self.kern_h.iter_mut());
        v.push(&mut self.kern_y);
        v.push(&mut self.z_l);
        v.push(&mut self.z_h);
        v.extend(self.u_h_mean.iter_mut());
        v.extend(self.u_h_factor.iter_mut());
        v.push(&mut self.u_y_mean);
        v.push(&mut self.u_y_factor);
        v.push(&mut self.log_noise);
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for m in out.fields_mut() {
            m.fill(0.0);
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.fields()
            .iter()
            .flat_map(|(_, m)| m.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for m in self.fields_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        assert_eq!(at, flat.len(), "flat parameter length");
    }

    pub fn d_l(&self) -> usize {
        self.l_mean.ncols()
    }

    pub fn d_h(&self) -> usize {
        self.h_mean.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpModel {
    x: DMatrix<f64>,
    y: Vec<f64>,
    latent_full: bool,
    pub params: DgpParams,
    rep: Replicates,
    /// One representative input row per distinct input.
    x_p: DMatrix<f64>,
}

fn row_positions(x: &DMatrix<f64>) -> Vec<Position> {
    (0..x.nrows())
        .map(|i| Position::new(x[(i, 0)], if x.ncols() > 1 { x[(i, 1)] } else { 0.0 }))
        .collect()
}

impl DgpModel {
    fn from_parts(x: DMatrix<f64>, y: Vec<f64>, latent_full: bool, params: DgpParams) -> Self {
        let rep = Replicates::new(&row_positions(&x));
        let mut first = vec![usize::MAX; rep.n_unique()];
        for (i, &p) in rep.member.iter().enumerate() {
            if first[p] == usize::MAX {
                first[p] = i;
            }
        }
        let x_p = DMatrix::from_fn(first.len(), x.ncols(), |p, j| x[(first[p], j)]);
        DgpModel {
            x,
            y,
            latent_full,
            params,
            rep,
            x_p,
        }
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn outputs(&self) -> &[f64] {
        &self.y
    }

    pub fn latent_is_full(&self) -> bool {
        self.latent_full
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn noise(&self) -> [f64; 3] {
        let l = &self.params.log_noise;
        [l[0].exp(), l[1].exp(), l[2].exp()]
    }

    fn l_cov_ref(&self, d: usize) -> CovRef<'_> {
        if self.latent_full {
            CovRef::Full(&self.params.l_cov[d])
        } else {
            CovRef::Diagonal(self.params.l_cov[d].as_slice())
        }
    }

    /// Serializes every array, shape-tagged and row-major.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            latent_full: self.latent_full,
            x: Tensor::from(&self.x),
            y: Tensor {
                shape: [self.y.len(), 1],
                data: self.y.clone(),
            },
            params: self
                .params
                .fields()
                .into_iter()
                .map(|(k, m)| (k, Tensor::from(m)))
                .collect(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let x = c.x.to_matrix()?;
        let y = c.y.to_matrix()?.as_slice().to_vec();
        if x.nrows() != y.len() || x.nrows() == 0 || !(1..=2).contains(&x.ncols()) {
            return Err(Error::Shape("checkpoint inputs and outputs disagree".into()));
        }
        let get = |k: &str| -> Result<DMatrix<f64>> {
            c.params
                .get(k)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks `{k}`")))?
                .to_matrix()
        };
        let many = |prefix: &str| -> Result<Vec<DMatrix<f64>>> {
            let mut out = Vec::new();
            while let Some(t) = c.params.get(&format!("{prefix}.{}", out.len())) {
                out.push(t.to_matrix()?);
            }
            Ok(out)
        };
        let params = DgpParams {
            l_mean: get("l_mean")?,
            l_cov: many("l_cov")?,
            h_mean: get("h_mean")?,
            h_log_var: get("h_log_var")?,
            kern_l: many("kern_l")?,
            kern_h: many("kern_h")?,
            kern_y: get("kern_y")?,
            z_l: get("z_l")?,
            z_h: get("z_h")?,
            u_h_mean: many("u_h_mean")?,
            u_h_factor: many("u_h_factor")?,
            u_y_mean: get("u_y_mean")?,
            u_y_factor: get("u_y_factor")?,
            log_noise: get("log_noise")?,
        };
        check_shapes(&params, x.nrows(), x.ncols(), c.latent_full)?;
        Ok(DgpModel::from_parts(x, y, c.latent_full, params))
    }
}

fn check_shapes(p: &DgpParams, n: usize, d_in: usize, full: bool) -> Result<()> {
    let (dl, dh) = (p.d_l(), p.d_h());
    let (kl, kh) = (p.z_l.nrows(), p.z_h.nrows());
    let cov_shape = if full { (n, n) } else { (n, 1) };
    let ok = p.l_mean.shape() == (n, dl)
        && dl > 0
        && dh > 0
        && p.l_cov.len() == dl
        && p.l_cov.iter().all(|m| m.shape() == cov_shape)
        && p.h_mean.shape() == (n, dh)
        && p.h_log_var.shape() == (n, dh)
        && p.kern_l.len() == dl
        && p.kern_l.iter().all(|m| m.shape() == (1 + d_in, 1))
        && p.kern_h.len() == dh
        && p.kern_h.iter().all(|m| m.shape() == (1 + dl, 1))
        && p.kern_y.shape() == (1 + dh, 1)
        && p.z_l.ncols() == dl
        && p.z_h.ncols() == dh
        && p.u_h_mean.len() == dh
        && p.u_h_mean.iter().all(|m| m.shape() == (kl, 1))
        && p.u_h_factor.len() == dh
        && p.u_h_factor.iter().all(|m| m.shape() == (kl, kl))
        && p.u_y_mean.shape() == (kh, 1)
        && p.u_y_factor.shape() == (kh, kh)
        && p.log_noise.shape() == (3, 1);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape("checkpoint arrays have inconsistent shapes".into()))
    }
}

/// A row-major array with its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Tensor {
    fn from(m: &DMatrix<f64>) -> Self {
        Tensor {
            shape: [m.nrows(), m.ncols()],
            data: m.transpose().as_slice().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let [r, c] = self.shape;
        if r * c != self.data.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {r}x{c} holds {} values",
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("tensor holds non-finite values".into()));
        }
        Ok(DMatrix::from_row_slice(r, c, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub latent_full: bool,
    pub x: Tensor,
    pub y: Tensor,
    pub params: BTreeMap<String, Tensor>,
}

/// k-means++ seeding followed by Lloyd iterations over the rows of `pts`.
fn kmeans(pts: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, d) = (pts.nrows(), pts.ncols());
    let sq = |i: usize, c: &DMatrix<f64>, j: usize| -> f64 {
        (0..d).map(|t| (pts[(i, t)] - c[(j, t)]).powi(2)).sum()
    };
    let mut centers = DMatrix::zeros(k, d);
    let first = rng.gen_range(0..n);
    centers.set_row(0, &pts.row(first));
    let mut best: Vec<f64> = (0..n).map(|i| sq(i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if b > 0.0 && t < b {
                    idx = i;
                    break;
                }
                t -= b;
            }
            idx
        } else {
            // fewer distinct rows than centers
            *(0..n).collect::<Vec<_>>().choose(rng).expect("n > 0")
        };
        centers.set_row(c, &pts.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq(i, &centers, c));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let mut bj = 0;
            let mut bd = f64::INFINITY;
            for j in 0..k {
                let dd = sq(i, &centers, j);
                if dd < bd {
                    bd = dd;
                    bj = j;
                }
            }
            if *a != bj {
                *a = bj;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::<f64>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for t in 0..d {
                sums[(a, t)] += pts[(i, t)];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..d {
                    centers[(j, t)] = sums[(j, t)] / counts[j] as f64;
                }
            }
        }
    }
    centers
}

fn log_kernel(k: &Option<ArdParams>, dim: usize) -> DMatrix<f64> {
    let mut v = vec![0.0; 1 + dim];
    if let Some(k) = k {
        v[0] = k.signal_variance.ln();
        for (t, w) in k.weights.iter().enumerate() {
            v[1 + t] = w.ln();
        }
    }
    DMatrix::from_column_slice(1 + dim, 1, &v)
}

/// Copies the leading columns of `m` into a matrix `d` wide, zero-padding.
fn project_columns(m: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), d, |i, j| if j < m.ncols() { m[(i, j)] } else { 0.0 })
}

/// Builds an untrained model. `x` is N x D_in with `D_in` 1 or 2.
pub fn init_dgp(x: &DMatrix<f64>, y: &[f64], config: &DgpLayerConfig, seed: u64) -> Result<DgpModel> {
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::Shape(format!("{} inputs for {} outputs", n, y.len())));
    }
    if !(1..=2).contains(&x.ncols()) {
        return Err(Error::Shape(format!("inputs must have 1 or 2 columns, got {}", x.ncols())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite training data".into()));
    }
    config.validate(n, x.ncols())?;
    let full = match config.latent_covariance {
        LatentCovariance::Auto => n <= FULL_COVARIANCE_LIMIT,
        LatentCovariance::Full => true,
        LatentCovariance::Diagonal => false,
    };
    let (dl, dh) = (config.d_l, config.d_h);
    let l_mean = project_columns(x, dl);
    let h_mean = project_columns(&l_mean, dh);
    let lv = config.init_variance.ln();
    let l_cov = (0..dl)
        .map(|_| {
            if full {
                DMatrix::identity(n, n) * config.init_variance.sqrt()
            } else {
                DMatrix::from_element(n, 1, lv)
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_l = kmeans(&l_mean, config.k_l, &mut rng);
    let z_h = kmeans(&h_mean, config.k_h, &mut rng);
    let params = DgpParams {
        l_cov,
        h_log_var: DMatrix::from_element(n, dh, lv),
        kern_l: (0..dl).map(|_| log_kernel(&config.kernel_l, x.ncols())).collect(),
        kern_h: (0..dh).map(|_| log_kernel(&config.kernel_h, dl)).collect(),
        kern_y: log_kernel(&config.kernel_y, dh),
        z_l,
        z_h,
        u_h_mean: (0..dh).map(|_| DMatrix::zeros(config.k_l, 1)).collect(),
        u_h_factor: (0..dh).map(|_| DMatrix::identity(config.k_l, config.k_l)).collect(),
        u_y_mean: DMatrix::zeros(config.k_h, 1),
        u_y_factor: DMatrix::identity(config.k_h, config.k_h),
        log_noise: DMatrix::from_column_slice(
            3,
            1,
            &[config.noise_l.ln(), config.noise_h.ln(), config.noise_y.ln()],
        ),
        l_mean,
        h_mean,
    };
    Ok(DgpModel::from_parts(x.clone(), y.to_vec(), full, params))
}

/// `KL(N(m_q, S_q) || N(m_p, S_p))` for dense Gaussians.
pub fn kl_gaussians(
    m_q: &[f64],
    s_q: &DMatrix<f64>,
    m_p: &[f64],
    s_p: &DMatrix<f64>,
) -> Result<f64> {
    let n = m_q.len();
    if m_p.len() != n || s_q.shape() != (n, n) || s_p.shape() != (n, n) {
        return Err(Error::Shape("Gaussian dimensions differ".into()));
    }
    let cq = nalgebra::Cholesky::new(s_q.clone()).ok_or(Error::Conditioning { max_jitter: 0.0 })?;
    let cp = nalgebra::Cholesky::new(s_p.clone()).ok_or(Error::Conditioning { max_jitter: 0.0 })?;
    let diff = nalgebra::DVector::from_iterator(n, m_p.iter().zip(m_q).map(|(p, q)| p - q));
    let tr = cp.solve(s_q).trace();
    let quad = diff.dot(&cp.solve(&diff));
    let ld = 2.0 * (crate::linalg::half_log_det(&cp) - crate::linalg::half_log_det(&cq));
    Ok((0.5 * (tr + quad - n as f64 + ld)).max(0.0))
}

/// The separate terms of one bound estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElboTerms {
    /// Monte-Carlo estimate of `E[log p(Y | H)]`.
    pub output_fit: f64,
    pub kl_u_y: f64,
    /// Monte-Carlo estimate of `E[log p(H | L)]`.
    pub hidden_fit: f64,
    pub kl_u_h: f64,
    pub entropy_h: f64,
    pub kl_l: f64,
    pub total: f64,
}

impl ElboTerms {
    /// `output_fit - kl_u_y`: the bound on `log p(Y | H)` alone.
    pub fn output_block(&self) -> f64 {
        self.output_fit - self.kl_u_y
    }
}

struct Closed {
    kl_u_y: f64,
    kl_u_h: f64,
    entropy_h: f64,
    kl_l: f64,
}

/// KL terms and the entropy of `q(H)`; their gradients are subtracted from
/// (entropy: added to) `grad`.
fn closed_form(model: &DgpModel, mut grad: Option<&mut DgpParams>) -> Result<Closed> {
    let p = &model.params;
    let (kl_u_y, gm, gr) = whitened_kl(&p.u_y_mean, &p.u_y_factor);
    if let Some(g) = grad.as_deref_mut() {
        g.u_y_mean -= gm;
        g.u_y_factor -= gr;
    }
    let mut kl_u_h = 0.0;
    for d in 0..p.d_h() {
        let (kl, gm, gr) = whitened_kl(&p.u_h_mean[d], &p.u_h_factor[d]);
        kl_u_h += kl;
        if let Some(g) = grad.as_deref_mut() {
            g.u_h_mean[d] -= gm;
            g.u_h_factor[d] -= gr;
        }
    }
    let n_h = p.h_log_var.len() as f64;
    let entropy_h = 0.5 * (n_h * (1.0 + LN_2PI) + p.h_log_var.sum());
    if let Some(g) = grad.as_deref_mut() {
        g.h_log_var.add_scalar_mut(0.5);
    }
    let mut kl_l = 0.0;
    for d in 0..p.d_l() {
        let kern = p.kern_l[d].as_slice();
        let sf2 = kern[0].exp();
        let w: Vec<f64> = kern[1..].iter().map(|v| v.exp()).collect();
        let kp = ard_cross(&model.x_p, &model.x_p, sf2, &w);
        let mu = p.l_mean.column(d);
        let kl = latent_kl(&model.rep, &kp, p.log_noise[0], mu.as_slice(), model.l_cov_ref(d))?;
        kl_l += kl.value;
        if let Some(g) = grad.as_deref_mut() {
            for (gi, v) in g.l_mean.column_mut(d).iter_mut().zip(&kl.mean) {
                *gi -= v;
            }
            match kl.cov {
                CovGrad::Diagonal(v) => {
                    for (gi, v) in g.l_cov[d].iter_mut().zip(&v) {
                        *gi -= v;
                    }
                }
                CovGrad::Full(m) => g.l_cov[d] -= m,
            }
            let mut kg = vec![0.0; kern.len()];
            ard_cross_backward(&model.x_p, &model.x_p, &w, &kp, &kl.kp, &mut kg, None, None);
            for (gi, v) in g.kern_l[d].iter_mut().zip(&kg) {
                *gi -= v;
            }
            g.log_noise[0] -= kl.log_noise;
        }
    }
    Ok(Closed {
        kl_u_y,
        kl_u_h,
        entropy_h,
        kl_l,
    })
}

fn normals(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Monte-Carlo likelihood terms; gradients are added to `grad`.
fn sampled(
    model: &DgpModel,
    s: usize,
    rng: &mut ChaCha8Rng,
    mut grad: Option<&mut DgpParams>,
) -> Result<(f64, f64)> {
    let p = &model.params;
    let n = model.n();
    let (dl, dh) = (p.d_l(), p.d_h());
    let [_, eps_h, eps_y] = model.noise();
    let inv_s = 1.0 / s as f64;
    let eps_hs: Vec<DMatrix<f64>> = (0..s).map(|_| normals(rng, n, dh)).collect();
    let eps_ls: Vec<DMatrix<f64>> = (0..s).map(|_| normals(rng, n, dl)).collect();
    let h_sd = p.h_log_var.map(|v| (0.5 * v).exp());
    let h_var = p.h_log_var.map(f64::exp);

    // E_q(H) log p(Y | H)
    let prep_y = Prepared::new(&p.z_h, p.kern_y.as_slice(), &p.u_y_factor)?;
    let mut acc_y = LayerGrad::zeros(p.z_h.nrows(), dh);
    let mut output_fit = 0.0;
    let mut g_log_eps_y = 0.0;
    for eps in &eps_hs {
        let h = &p.h_mean + h_sd.component_mul(eps);
        let f = forward(&prep_y, &p.z_h, &p.u_y_mean, &h);
        let mut gm = vec![0.0; n];
        for i in 0..n {
            let r = model.y[i] - f.mean[i];
            let e = r * r + f.var[i];
            output_fit += inv_s * (-0.5 * (LN_2PI + p.log_noise[2]) - e / (2.0 * eps_y));
            g_log_eps_y += inv_s * (-0.5 + e / (2.0 * eps_y));
            gm[i] = inv_s * r / eps_y;
        }
        if let Some(g) = grad.as_deref_mut() {
            let gv = vec![-inv_s / (2.0 * eps_y); n];
            let mut gh = DMatrix::zeros(n, dh);
            backward(&prep_y, &p.z_h, &p.u_y_mean, &p.u_y_factor, &h, &f, &gm, &gv, &mut acc_y, Some(&mut gh));
            g.h_mean += &gh;
            g.h_log_var += gh.component_mul(eps).component_mul(&h_sd) * 0.5;
        }
    }
    if let Some(g) = grad.as_deref_mut() {
        finish(&prep_y, &p.z_h, &mut acc_y);
        add_layer(&mut g.kern_y, &mut g.z_h, &mut g.u_y_mean, &mut g.u_y_factor, &acc_y);
        g.log_noise[2] += g_log_eps_y;
    }

    // E_q(L) q(H) log p(H | L)
    let preps: Vec<Prepared> = (0..dh)
        .map(|d| Prepared::new(&p.z_l, p.kern_h[d].as_slice(), &p.u_h_factor[d]))
        .collect::<Result<_>>()?;
    let mut accs: Vec<LayerGrad> = (0..dh).map(|_| LayerGrad::zeros(p.z_l.nrows(), dl)).collect();
    let mut hidden_fit = 0.0;
    let mut g_log_eps_h = 0.0;
    let l_sd: Option<DMatrix<f64>> = (!model.latent_full).then(|| {
        DMatrix::from_fn(n, dl, |i, d| (0.5 * p.l_cov[d][i]).exp())
    });
    for eps in &eps_ls {
        let l = match &l_sd {
            Some(sd) => &p.l_mean + sd.component_mul(eps),
            None => {
                let mut l = p.l_mean.clone();
                for d in 0..dl {
                    let z = &p.l_cov[d] * eps.column(d);
                    let mut col = l.column_mut(d);
                    col += z;
                }
                l
            }
        };
        let mut gl = DMatrix::zeros(n, dl);
        for d in 0..dh {
            let f = forward(&preps[d], &p.z_l, &p.u_h_mean[d], &l);
            let mut gm = vec![0.0; n];
            for i in 0..n {
                let r = p.h_mean[(i, d)] - f.mean[i];
                let e = r * r + h_var[(i, d)] + f.var[i];
                hidden_fit += inv_s * (-0.5 * (LN_2PI + p.log_noise[1]) - e / (2.0 * eps_h));
                g_log_eps_h += inv_s * (-0.5 + e / (2.0 * eps_h));
                gm[i] = inv_s * r / eps_h;
            }
            if let Some(g) = grad.as_deref_mut() {
                for i in 0..n {
                    g.h_mean[(i, d)] -= gm[i];
                    g.h_log_var[(i, d)] -= inv_s * h_var[(i, d)] / (2.0 * eps_h);
                }
                let gv = vec![-inv_s / (2.0 * eps_h); n];
                backward(
                    &preps[d],
                    &p.z_l,
                    &p.u_h_mean[d],
                    &p.u_h_factor[d],
                    &l,
                    &f,
                    &gm,
                    &gv,
                    &mut accs[d],
                    Some(&mut gl),
                );
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            g.l_mean += &gl;
            match &l_sd {
                Some(sd) => {
                    let gs = gl.component_mul(eps).component_mul(sd) * 0.5;
                    for d in 0..dl {
                        for i in 0..n {
                            g.l_cov[d][i] += gs[(i, d)];
                        }
                    }
                }
                None => {
                    for d in 0..dl {
                        let outer = gl.column(d) * eps.column(d).transpose();
                        g.l_cov[d] += outer.lower_triangle();
                    }
                }
            }
        }
    }
    if let Some(g) = grad.as_deref_mut() {
        for (d, acc) in accs.iter_mut().enumerate() {
            finish(&preps[d], &p.z_l, acc);
            let (kern, um, uf) = (&mut g.kern_h[d], &mut g.u_h_mean[d], &mut g.u_h_factor[d]);
            add_layer(kern, &mut g.z_l, um, uf, acc);
        }
        g.log_noise[1] += g_log_eps_h;
    }
    Ok((output_fit, hidden_fit))
}

fn add_layer(
    kern: &mut DMatrix<f64>,
    z: &mut DMatrix<f64>,
    m: &mut DMatrix<f64>,
    r: &mut DMatrix<f64>,
    acc: &LayerGrad,
) {
    for (a, b) in kern.iter_mut().zip(&acc.kern) {
        *a += b;
    }
    *z += &acc.z;
    *m += &acc.m;
    *r += &acc.r;
}

fn elbo_impl(
    model: &DgpModel,
    s: usize,
    rng: &mut ChaCha8Rng,
    mut grad: Option<&mut DgpParams>,
) -> Result<ElboTerms> {
    if s == 0 {
        return Err(Error::Validation("at least one Monte-Carlo sample is required".into()));
    }
    let c = closed_form(model, grad.as_deref_mut())?;
    let (output_fit, hidden_fit) = sampled(model, s, rng, grad)?;
    Ok(ElboTerms {
        output_fit,
        kl_u_y: c.kl_u_y,
        hidden_fit,
        kl_u_h: c.kl_u_h,
        entropy_h: c.entropy_h,
        kl_l: c.kl_l,
        total: output_fit - c.kl_u_y + hidden_fit - c.kl_u_h + c.entropy_h - c.kl_l,
    })
}

/// The deterministic part of the bound, `entropy(q(H)) - KL(q(u^Y)) -
/// sum_d KL(q(u^H_d)) - KL(q(L))`, with its gradient.
pub fn elbo_closed_form(model: &DgpModel) -> Result<(f64, DgpParams)> {
    let mut g = model.params.zeros_like();
    let c = closed_form(model, Some(&mut g))?;
    Ok((c.entropy_h - c.kl_u_y - c.kl_u_h - c.kl_l, g))
}

/// Monte-Carlo estimate of the bound with `s` samples.
pub fn elbo_estimate(model: &DgpModel, s: usize, seed: u64) -> Result<ElboTerms> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    elbo_impl(model, s, &mut rng, None)
}

/// The estimate together with its exact gradient for the drawn samples.
pub fn elbo_gradient(model: &DgpModel, s: usize, seed: u64) -> Result<(ElboTerms, DgpParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = model.params.zeros_like();
    let t = elbo_impl(model, s, &mut rng, Some(&mut g))?;
    Ok((t, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub step_size: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            step_size: 5e-3,
            mc_samples: 8,
            seed: 0,
        }
    }
}

/// Adam ascent on the sampled bound. Returns the final model and the bound
/// estimate at every step, taken before that step's update.
pub fn train_dgp(model: &DgpModel, steps: usize, opts: &TrainOptions) -> Result<(DgpModel, Vec<f64>)> {
    if opts.mc_samples == 0 || !(opts.step_size > 0.0) {
        return Err(Error::Validation(
            "training needs a positive step size and sample count".into(),
        ));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut flat = model.params.to_flat();
    let mut adam = Adam::new(flat.len(), opts.step_size);
    let mut grad = model.params.zeros_like();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        for m in grad.fields_mut() {
            m.fill(0.0);
        }
        let terms = elbo_impl(&model, opts.mc_samples, &mut rng, Some(&mut grad))
            .map_err(|e| match e {
                Error::Conditioning { .. } => Error::Divergence { step },
                other => other,
            })?;
        let g = grad.to_flat();
        if !terms.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        trace.push(terms.total);
        adam.step(&mut flat, &g);
        model.params.set_flat(&flat);
    }
    Ok((model, trace))
}

/// Pathwise predictive samples at the rows of `xs`; returns the sample mean
/// and the sample variance plus the output noise.
pub fn dgp_predict_batch(
    model: &DgpModel,
    xs: &DMatrix<f64>,
    s: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if s < 2 {
        return Err(Error::Validation("prediction needs at least 2 samples".into()));
    }
    if xs.ncols() != model.x.ncols() {
        return Err(Error::Shape(format!(
            "inputs have {} columns, model expects {}",
            xs.ncols(),
            model.x.ncols()
        )));
    }
    let p = &model.params;
    let m = xs.nrows();
    let (dl, dh) = (p.d_l(), p.d_h());
    let [eps_l, eps_h, eps_y] = model.noise();
    let mut l_pred = Vec::with_capacity(dl);
    for d in 0..dl {
        let kern = p.kern_l[d].as_slice();
        let sf2 = kern[0].exp();
        let w: Vec<f64> = kern[1..].iter().map(|v| v.exp()).collect();
        let kp = ard_cross(&model.x_p, &model.x_p, sf2, &w);
        let pred = LatentPredictor::new(
            &model.rep,
            &kp,
            sf2,
            eps_l,
            p.l_mean.column(d).as_slice(),
            model.l_cov_ref(d),
        )?;
        l_pred.push(pred.predict(&ard_cross(&model.x_p, xs, sf2, &w)));
    }
    let preps: Vec<Prepared> = (0..dh)
        .map(|d| Prepared::new(&p.z_l, p.kern_h[d].as_slice(), &p.u_h_factor[d]))
        .collect::<Result<_>>()?;
    let prep_y = Prepared::new(&p.z_h, p.kern_y.as_slice(), &p.u_y_factor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; m];
    let mut sum2 = vec![0.0; m];
    for _ in 0..s {
        let l = DMatrix::from_fn(m, dl, |i, d| {
            let (mu, var) = (&l_pred[d].0, &l_pred[d].1);
            let z: f64 = rng.sample(StandardNormal);
            mu[i] + var[i].sqrt() * z
        });
        let mut h = DMatrix::zeros(m, dh);
        for d in 0..dh {
            let f = forward(&preps[d], &p.z_l, &p.u_h_mean[d], &l);
            for i in 0..m {
                let z: f64 = rng.sample(StandardNormal);
                h[(i, d)] = f.mean[i] + (f.var[i].max(0.0) + eps_h).sqrt() * z;
            }
        }
        let f = forward(&prep_y, &p.z_h, &p.u_y_mean, &h);
        for i in 0..m {
            let z: f64 = rng.sample(StandardNormal);
            let v = f.mean[i] + f.var[i].max(0.0).sqrt() * z;
            sum[i] += v;
            sum2[i] += v * v;
        }
    }
    let sf = s as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / sf).collect();
    let var = (0..m)
        .map(|i| ((sum2[i] - sf * mean[i] * mean[i]) / (sf - 1.0)).max(0.0) + eps_y)
        .collect();
    Ok((mean, var))
}

pub fn dgp_predict(model: &DgpModel, x_star: &[f64], s: usize, seed: u64) -> Result<(f64, f64)> {
    let xs = DMatrix::from_row_slice(1, x_star.len(), x_star);
    let (m, v) = dgp_predict_batch(model, &xs, s, seed)?;
    Ok((m[0], v[0]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpMapOptions {
    pub config: DgpLayerConfig,
    pub steps: usize,
    pub step_size: f64,
    pub mc_samples: usize,
    pub predict_samples: usize,
    /// Base seed; AP number `k` (in id order) uses `seed + k`.
    pub seed: u64,
}

impl Default for DgpMapOptions {
    fn default() -> Self {
        DgpMapOptions {
            config: DgpLayerConfig::default(),
            steps: 2000,
            step_size: 5e-3,
            mc_samples: 8,
            predict_samples: 200,
            seed: 0,
        }
    }
}

/// Affine map to zero mean and unit spread, per column.
#[derive(Debug, Clone, Copy)]
struct Scale {
    center: f64,
    scale: f64,
}

impl Scale {
    fn fit(v: impl Iterator<Item = f64> + Clone) -> Self {
        let n = v.clone().count() as f64;
        let center = v.clone().sum::<f64>() / n;
        let var = v.map(|x| (x - center).powi(2)).sum::<f64>() / n;
        let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
        Scale { center, scale }
    }

    fn apply(&self, x: f64) -> f64 {
        (x - self.center) / self.scale
    }
}

/// Trains one DGP per access point on standardized coordinates and RSSI,
/// then predicts every cell center.
///
/// APs heard fewer than twice are skipped with a warning, as for the GP.
pub fn build_dgp_radio_map(dataset: &Dataset, grid: &GridSpec, opts: &DgpMapOptions) -> Result<RadioMap> {
    if dataset.is_empty() {
        return Err(Error::Validation("dataset is empty".into()));
    }
    let centers = grid.centers();
    let jobs: Vec<(u64, &String)> = dataset
        .ap_ids()
        .iter()
        .enumerate()
        .map(|(k, ap)| (opts.seed.wrapping_add(k as u64), ap))
        .collect();
    let results = parallel_map(&jobs, |&(seed, ap)| -> Result<Option<ApMap>> {
        let (x, y) = dataset.observations(ap)?;
        if y.len() < 2 {
            log::warn!("skipping AP `{ap}`: only {} observation(s)", y.len());
            return Ok(None);
        }
        fit_ap(&x, &y, &centers, opts, seed).map(Some)
    });
    let mut map = RadioMap::new(*grid);
    for ((_, ap), r) in jobs.iter().zip(results) {
        if let Some(m) = r? {
            map.insert((*ap).clone(), m)?;
        }
    }
    if map.aps.is_empty() {
        return Err(Error::Validation(
            "no access point has at least 2 observations".into(),
        ));
    }
    Ok(map)
}

fn fit_ap(x: &[Position], y: &[f64], centers: &[Position], opts: &DgpMapOptions, seed: u64) -> Result<ApMap> {
    let sx = Scale::fit(x.iter().map(|p| p.x));
    let sy = Scale::fit(x.iter().map(|p| p.y));
    let sv = Scale::fit(y.iter().copied());
    let to_rows = |pts: &[Position]| {
        DMatrix::from_fn(pts.len(), 2, |i, j| {
            if j == 0 {
                sx.apply(pts[i].x)
            } else {
                sy.apply(pts[i].y)
            }
        })
    };
    let ys: Vec<f64> = y.iter().map(|v| sv.apply(*v)).collect();
    let config = opts.config.capped(y.len());
    let model = init_dgp(&to_rows(x), &ys, &config, seed)?;
    let train = TrainOptions {
        step_size: opts.step_size,
        mc_samples: opts.mc_samples,
        seed,
    };
    let (model, trace) = train_dgp(&model, opts.steps, &train)?;
    log::debug!("final bound {:?}", trace.last());
    let (mu, var) = dgp_predict_batch(&model, &to_rows(centers), opts.predict_samples, seed)?;
    Ok(ApMap {
        mean: mu.iter().map(|m| m * sv.scale + sv.center).collect(),
        variance: var
            .iter()
            .map(|v| (v * sv.scale * sv.scale).max(VARIANCE_FLOOR))
            .collect(),
        hyperparams: None,
    })
}

/// Applies `f` to every item on up to `available_parallelism` threads,
/// keeping the input order.
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests;
