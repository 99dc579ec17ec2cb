//! Sparse GP layer with whitened inducing variables, forward and backward.
//!
//! With `Kuu = Luu Luu^T` and `A = Luu^{-1} Kuf`, the marginals of the layer
//! output at the inputs are `mean = A^T m` and
//! `var = sf2 + colsum(A * (G A))` where `G = R R^T - I`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Fixed diagonal jitter on `Kuu`.
pub(crate) const JITTER: f64 = 1e-6;

/// ARD cross-covariance between the rows of `a` (M x D) and of `b` (N x D).
pub(crate) fn ard_cross(a: &DMatrix<f64>, b: &DMatrix<f64>, sf2: f64, w: &[f64]) -> DMatrix<f64> {
    let (m, n, d) = (a.nrows(), b.nrows(), a.ncols());
    debug_assert_eq!(b.ncols(), d);
    let mut out = DMatrix::zeros(m, n);
    let av = a.as_slice();
    let bv = b.as_slice();
    let os = out.as_mut_slice();
    for j in 0..n {
        let col = &mut os[j * m..(j + 1) * m];
        col.fill(0.0);
        for k in 0..d {
            let bj = bv[k * n + j];
            let wk = w[k];
            let ak = &av[k * m..(k + 1) * m];
            for (c, &ai) in col.iter_mut().zip(ak) {
                let diff = ai - bj;
                *c += wk * diff * diff;
            }
        }
        for c in col.iter_mut() {
            *c = sf2 * (-0.5 * *c).exp();
        }
    }
    out
}

/// Accumulates gradients of `sum(G .* K)` where `K = ard_cross(a, b, ..)`
/// was computed from the same arguments.
///
/// `ga`/`gb`, when given, receive gradients w.r.t. the rows of `a`/`b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn ard_cross_backward(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    w: &[f64],
    k: &DMatrix<f64>,
    g: &DMatrix<f64>,
    kern_grad: &mut [f64],
    mut ga: Option<&mut DMatrix<f64>>,
    mut gb: Option<&mut DMatrix<f64>>,
) {
    let (m, n, d) = (a.nrows(), b.nrows(), a.ncols());
    let av = a.as_slice();
    let bv = b.as_slice();
    let kv = k.as_slice();
    let gv = g.as_slice();
    let mut gsf2 = 0.0;
    let mut gw = vec![0.0; d];
    let mut c = vec![0.0; m];
    for j in 0..n {
        for i in 0..m {
            c[i] = kv[j * m + i] * gv[j * m + i];
            gsf2 += c[i];
        }
        for t in 0..d {
            let bj = bv[t * n + j];
            let wt = w[t];
            let ak = &av[t * m..(t + 1) * m];
            let mut sum_b = 0.0;
            let mut sum_w = 0.0;
            match ga.as_deref_mut() {
                Some(ga) => {
                    let gas = &mut ga.as_mut_slice()[t * m..(t + 1) * m];
                    for i in 0..m {
                        let diff = ak[i] - bj;
                        let s = c[i] * wt * diff;
                        gas[i] -= s;
                        sum_b += s;
                        sum_w += s * diff;
                    }
                }
                None => {
                    for i in 0..m {
                        let diff = ak[i] - bj;
                        let s = c[i] * wt * diff;
                        sum_b += s;
                        sum_w += s * diff;
                    }
                }
            }
            if let Some(gb) = gb.as_deref_mut() {
                gb[(j, t)] += sum_b;
            }
            gw[t] -= 0.5 * sum_w;
        }
    }
    kern_grad[0] += gsf2;
    for t in 0..d {
        kern_grad[1 + t] += gw[t];
    }
}

/// Kernel quantities of a layer that do not depend on its inputs.
pub(crate) struct Prepared {
    pub sf2: f64,
    pub w: Vec<f64>,
    pub kuu: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    pub li: DMatrix<f64>,
    /// `R R^T - I`
    pub g: DMatrix<f64>,
}

impl Prepared {
    /// `kern` holds `[log sf2, log w_1, ..]`; `r` is lower triangular.
    pub fn new(z: &DMatrix<f64>, kern: &[f64], r: &DMatrix<f64>) -> Result<Self> {
        let sf2 = kern[0].exp();
        let w: Vec<f64> = kern[1..].iter().map(|v| v.exp()).collect();
        let kuu = ard_cross(z, z, sf2, &w);
        let mut jittered = kuu.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += JITTER;
        }
        let chol = nalgebra::Cholesky::new(jittered).ok_or(Error::Conditioning {
            max_jitter: JITTER,
        })?;
        let luu = chol.l();
        let li = crate::linalg::lower_inverse(&luu);
        let k = z.nrows();
        let mut g = r * r.transpose();
        for i in 0..k {
            g[(i, i)] -= 1.0;
        }
        Ok(Prepared {
            sf2,
            w,
            kuu,
            luu,
            li,
            g,
        })
    }
}

pub(crate) struct Forward {
    pub kuf: DMatrix<f64>,
    pub a: DMatrix<f64>,
    /// `G A`
    pub ga: DMatrix<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn forward(
    p: &Prepared,
    z: &DMatrix<f64>,
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Forward {
    let kuf = ard_cross(z, x, p.sf2, &p.w);
    let a = &p.li * &kuf;
    let ga = &p.g * &a;
    let n = x.nrows();
    let mean: Vec<f64> = a.tr_mul(m).as_slice().to_vec();
    let k = z.nrows();
    let var = (0..n)
        .map(|j| {
            let ac = &a.as_slice()[j * k..(j + 1) * k];
            let gc = &ga.as_slice()[j * k..(j + 1) * k];
            p.sf2 + ac.iter().zip(gc).map(|(u, v)| u * v).sum::<f64>()
        })
        .collect();
    Forward {
        kuf,
        a,
        ga,
        mean,
        var,
    }
}

/// Gradients of one layer, accumulated over calls to [`backward`].
pub(crate) struct LayerGrad {
    pub kern: Vec<f64>,
    pub z: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Sum of `Abar A^T`, resolved into `Kuu` gradients by [`finish`].
    abar_at: DMatrix<f64>,
}

impl LayerGrad {
    pub fn zeros(k: usize, d: usize) -> Self {
        LayerGrad {
            kern: vec![0.0; d + 1],
            z: DMatrix::zeros(k, d),
            m: DMatrix::zeros(k, 1),
            r: DMatrix::zeros(k, k),
            abar_at: DMatrix::zeros(k, k),
        }
    }
}

/// Pulls gradients `gm`, `gv` on the output marginals back to the layer
/// parameters and, when `gx` is given, to the inputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    p: &Prepared,
    z: &DMatrix<f64>,
    m: &DMatrix<f64>,
    r: &DMatrix<f64>,
    x: &DMatrix<f64>,
    fwd: &Forward,
    gm: &[f64],
    gv: &[f64],
    acc: &mut LayerGrad,
    gx: Option<&mut DMatrix<f64>>,
) {
    let k = z.nrows();
    let gm_v = DMatrix::from_column_slice(gm.len(), 1, gm);
    let a_gm = &fwd.a * &gm_v;
    acc.m += &a_gm;
    let mut ad = fwd.a.clone();
    let mut abar = fwd.ga.clone();
    for (j, (col, gcol)) in ad
        .as_mut_slice()
        .chunks_mut(k)
        .zip(abar.as_mut_slice().chunks_mut(k))
        .enumerate()
    {
        let s = 2.0 * gv[j];
        col.iter_mut().for_each(|v| *v *= s);
        gcol.iter_mut().for_each(|v| *v *= s);
    }
    // d var / dR through B = R^T A: (Ad A^T) R
    let c = &ad * fwd.a.transpose();
    acc.r.gemm(1.0, &c, r, 1.0);
    acc.kern[0] += p.sf2 * gv.iter().sum::<f64>();
    abar.gemm(1.0, m, &gm_v.transpose(), 1.0);
    // Abar A^T = G C + m (A gm)^T
    acc.abar_at.gemm(1.0, &p.g, &c, 1.0);
    acc.abar_at.gemm(1.0, m, &a_gm.transpose(), 1.0);
    let kfbar = p.li.tr_mul(&abar);
    ard_cross_backward(
        z,
        x,
        &p.w,
        &fwd.kuf,
        &kfbar,
        &mut acc.kern,
        Some(&mut acc.z),
        gx,
    );
}

/// Resolves the accumulated `Luu` dependence into gradients on `Z` and the
/// kernel, and restricts the `R` gradient to the lower triangle.
pub(crate) fn finish(p: &Prepared, z: &DMatrix<f64>, acc: &mut LayerGrad) {
    let lbar = -(p.li.tr_mul(&acc.abar_at));
    let kbar = cholesky_backward(&p.luu, &p.li, &lbar);
    // Z enters Kuu through both arguments
    let mut zc = DMatrix::zeros(z.nrows(), z.ncols());
    ard_cross_backward(
        z,
        z,
        &p.w,
        &p.kuu,
        &kbar,
        &mut acc.kern,
        Some(&mut acc.z),
        Some(&mut zc),
    );
    acc.z += zc;
    acc.r.fill_upper_triangle(0.0, 1);
}

/// Gradient w.r.t. a symmetric matrix from the gradient w.r.t. its lower
/// Cholesky factor. `li` is the inverse of `l`.
pub(crate) fn cholesky_backward(
    l: &DMatrix<f64>,
    li: &DMatrix<f64>,
    lbar: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut phi = l.tr_mul(&lower(lbar));
    phi.fill_upper_triangle(0.0, 1);
    for i in 0..phi.nrows() {
        phi[(i, i)] *= 0.5;
    }
    let s = li.tr_mul(&phi) * li;
    (&s + s.transpose()) * 0.5
}

fn lower(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    out.fill_upper_triangle(0.0, 1);
    out
}

/// `KL(N(m, R R^T) || N(0, I))` and its gradients w.r.t. `m` and `R`.
pub(crate) fn whitened_kl(m: &DMatrix<f64>, r: &DMatrix<f64>) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let k = m.nrows();
    let mut log_diag = 0.0;
    let mut gr = lower(r);
    for i in 0..k {
        log_diag += r[(i, i)].abs().ln();
        gr[(i, i)] -= 1.0 / r[(i, i)];
    }
    let kl = 0.5 * (gr_norm(r) + m.norm_squared() - k as f64 - 2.0 * log_diag);
    (kl, m.clone(), gr)
}

fn gr_norm(r: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..r.ncols() {
        for i in j..r.nrows() {
            s += r[(i, j)] * r[(i, j)];
        }
    }
    s
}
