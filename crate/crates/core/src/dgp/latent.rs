//! First latent layer: `KL(q(L_d) || N(0, K(X, X) + eps I))` evaluated
//! through the replicate compression, plus its predictive at new inputs.
//!
//! `K(X, X) = A Kp A^T` with `Kp` over the distinct inputs, so with
//! `Q = A C^{-1/2}` and `Mt = eps I + C^{1/2} Kp C^{1/2}` every quantity the
//! divergence needs reduces to `P x P` algebra. Writing `q = Q^T mu` and
//! `W = Q^T S Q`:
//!
//! ```text
//! tr(Sigma^-1 S)        = (tr S - tr W) / eps + tr(Mt^-1 W)
//! mu^T Sigma^-1 mu      = (|mu|^2 - |q|^2) / eps + q^T Mt^-1 q
//! log |Sigma|           = (N - P) log eps + log |Mt|
//! A^T dKL/dSigma A      = C^{1/2} (U - U (W + q q^T) U) C^{1/2} / 2,  U = Mt^-1
//! ```

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::replicates::Replicates;

/// Covariance of `q(L_d)`.
pub(crate) enum CovRef<'a> {
    /// Log-variances, one per input.
    Diagonal(&'a [f64]),
    /// Lower-triangular factor `R` with `S = R R^T`.
    Full(&'a DMatrix<f64>),
}

pub(crate) enum CovGrad {
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

pub(crate) struct LatentKl {
    pub value: f64,
    pub mean: Vec<f64>,
    pub cov: CovGrad,
    /// Gradient w.r.t. the `P x P` kernel over distinct inputs (symmetric).
    pub kp: DMatrix<f64>,
    /// Gradient w.r.t. `log eps`.
    pub log_noise: f64,
}

/// Spreads a `P`-vector back to the inputs as `Q v`.
fn expand(rep: &Replicates, v: &[f64]) -> Vec<f64> {
    rep.member
        .iter()
        .map(|&p| v[p] / (rep.counts[p] as f64).sqrt())
        .collect()
}

fn factor(rep: &Replicates, kp: &DMatrix<f64>, eps: f64) -> Result<(Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)> {
    let sc = rep.sqrt_counts();
    let p = rep.n_unique();
    let mut mt = DMatrix::from_fn(p, p, |i, j| sc[i] * kp[(i, j)] * sc[j]);
    for i in 0..p {
        mt[(i, i)] += eps;
    }
    let chol = Cholesky::new(mt).ok_or(Error::Conditioning { max_jitter: 0.0 })?;
    let u = chol.inverse();
    Ok((chol, u))
}

/// `Q^T R` for a full factor, one column per column of `R`.
fn project_cols(rep: &Replicates, r: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rep.n_unique(), r.ncols());
    for j in 0..r.ncols() {
        let col = rep.project(r.column(j).as_slice());
        out.set_column(j, &col);
    }
    out
}

pub(crate) fn latent_kl(
    rep: &Replicates,
    kp: &DMatrix<f64>,
    log_eps: f64,
    mu: &[f64],
    cov: CovRef,
) -> Result<LatentKl> {
    let eps = log_eps.exp();
    let n = rep.n_inputs() as f64;
    let np = rep.n_unique();
    let (chol, u) = factor(rep, kp, log_eps.exp())?;
    let q = rep.project(mu);
    let uq = &u * &q;
    let sc = rep.sqrt_counts();

    // W, tr S, log|S|, and the pieces needed for the covariance gradient
    let (w, tr_s, log_det_s, qr) = match &cov {
        CovRef::Diagonal(ls) => {
            let s: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
            let mut wd = vec![0.0; np];
            for (&p, &si) in rep.member.iter().zip(&s) {
                wd[p] += si;
            }
            for (wp, &c) in wd.iter_mut().zip(&rep.counts) {
                *wp /= c as f64;
            }
            let w = DMatrix::from_diagonal(&DVector::from_vec(wd));
            (w, s.iter().sum::<f64>(), ls.iter().sum::<f64>(), None)
        }
        CovRef::Full(r) => {
            let qr = project_cols(rep, r);
            let w = &qr * qr.transpose();
            let mut tr_s = 0.0;
            for j in 0..r.ncols() {
                for i in j..r.nrows() {
                    tr_s += r[(i, j)] * r[(i, j)];
                }
            }
            let ld = (0..r.nrows()).map(|i| 2.0 * r[(i, i)].abs().ln()).sum();
            (w, tr_s, ld, Some(qr))
        }
    };
    let tr_w = w.trace();
    let uw = &u * &w;
    let tr_sigma_inv_s = (tr_s - tr_w) / eps + uw.trace();
    let quad = (mu.iter().map(|v| v * v).sum::<f64>() - q.norm_squared()) / eps + q.dot(&uq);
    let log_det = (n - np as f64) * log_eps + 2.0 * crate::linalg::half_log_det(&chol);
    let value = 0.5 * (tr_sigma_inv_s + quad - n + log_det - log_det_s);

    // Sigma^-1 mu
    let back = expand(rep, q.as_slice());
    let uq_n = expand(rep, uq.as_slice());
    let g_mean: Vec<f64> = mu
        .iter()
        .zip(&back)
        .zip(&uq_n)
        .map(|((m, b), a)| (m - b) / eps + a)
        .collect();

    // trace of dKL/dSigma, for the noise
    let tr_sigma_inv = (n - np as f64) / eps + u.trace();
    let uwu = &uw * &u;
    let tr_sigma_inv2_s = (tr_s - tr_w) / (eps * eps) + uwu.trace();
    let g_norm2: f64 = g_mean.iter().map(|v| v * v).sum();
    let log_noise = 0.5 * eps * (tr_sigma_inv - tr_sigma_inv2_s - g_norm2);

    // A^T dKL/dSigma A
    let mut inner = &w + &q * q.transpose();
    inner = &u * inner * &u;
    let mut kp_grad = &u - inner;
    for i in 0..np {
        for j in 0..np {
            kp_grad[(i, j)] *= 0.5 * sc[i] * sc[j];
        }
    }

    let cov_grad = match cov {
        CovRef::Diagonal(ls) => {
            // diag(Sigma^-1)_n = (1 - 1/c) / eps + U_pp / c
            CovGrad::Diagonal(
                rep.member
                    .iter()
                    .zip(ls)
                    .map(|(&p, &l)| {
                        let c = rep.counts[p] as f64;
                        let d = (1.0 - 1.0 / c) / eps + u[(p, p)] / c;
                        0.5 * (l.exp() * d - 1.0)
                    })
                    .collect(),
            )
        }
        CovRef::Full(r) => {
            // Sigma^-1 R - diag(1 / R_ii), lower part
            let qr = qr.expect("computed above");
            let uqr = &u * &qr;
            let mut g = r / eps;
            for j in 0..r.ncols() {
                for (i, &p) in rep.member.iter().enumerate() {
                    let c = (rep.counts[p] as f64).sqrt();
                    g[(i, j)] += uqr[(p, j)] / c - qr[(p, j)] / (c * eps);
                }
            }
            g.fill_upper_triangle(0.0, 1);
            for i in 0..r.nrows() {
                g[(i, i)] -= 1.0 / r[(i, i)];
            }
            CovGrad::Full(g)
        }
    };

    Ok(LatentKl {
        value,
        mean: g_mean,
        cov: cov_grad,
        kp: kp_grad,
        log_noise,
    })
}

/// Predictive of one latent dimension at new inputs, conditioned on `q(L_d)`
/// through `p(L | X)`.
pub(crate) struct LatentPredictor {
    sc: DVector<f64>,
    uq: DVector<f64>,
    u: DMatrix<f64>,
    uwu: DMatrix<f64>,
    prior_var: f64,
}

impl LatentPredictor {
    pub fn new(
        rep: &Replicates,
        kp: &DMatrix<f64>,
        sf2: f64,
        eps: f64,
        mu: &[f64],
        cov: CovRef,
    ) -> Result<Self> {
        let (_, u) = factor(rep, kp, eps)?;
        let q = rep.project(mu);
        let w = match cov {
            CovRef::Diagonal(ls) => {
                let mut wd = vec![0.0; rep.n_unique()];
                for (&p, &l) in rep.member.iter().zip(ls) {
                    wd[p] += l.exp() / rep.counts[p] as f64;
                }
                DMatrix::from_diagonal(&DVector::from_vec(wd))
            }
            CovRef::Full(r) => {
                let qr = project_cols(rep, r);
                &qr * qr.transpose()
            }
        };
        Ok(LatentPredictor {
            sc: rep.sqrt_counts(),
            uq: &u * q,
            uwu: &u * w * &u,
            u,
            prior_var: sf2 + eps,
        })
    }

    /// Mean and variance at inputs whose kernel against the distinct
    /// training inputs is `kps` (P x M).
    pub fn predict(&self, kps: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut c = kps.clone();
        for j in 0..c.ncols() {
            for i in 0..c.nrows() {
                c[(i, j)] *= self.sc[i];
            }
        }
        let mean = c.tr_mul(&self.uq);
        let uc = &self.u * &c;
        let wc = &self.uwu * &c;
        let var = (0..c.ncols())
            .map(|j| {
                let cj = c.column(j);
                (self.prior_var - cj.dot(&uc.column(j)) + cj.dot(&wc.column(j))).max(0.0)
            })
            .collect();
        (mean.as_slice().to_vec(), var)
    }
}
