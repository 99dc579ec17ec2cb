use super::*;
use crate::gp::log_marginal_likelihood;
use crate::kernel::GpHyperparams;
use nalgebra::DVector;

fn toy_inputs(n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::<f64>::from_fn(n, 2, |_, _| rng.gen_range(-1.5..1.5));
    let y = (0..n)
        .map(|i| (2.0 * x[(i, 0)]).sin() + 0.3 * x[(i, 1)] + 0.1 * rng.gen_range(-1.0..1.0))
        .collect();
    (x, y)
}

fn small_config(k: usize, cov: LatentCovariance) -> DgpLayerConfig {
    DgpLayerConfig {
        k_l: k,
        k_h: k,
        latent_covariance: cov,
        ..Default::default()
    }
}

/// Moves every parameter away from its initial value so no gradient term
/// vanishes by symmetry.
fn jiggle(model: &mut DgpModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = model.latent_full;
    let p = &mut model.params;
    p.l_mean.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    p.h_mean.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    p.h_log_var.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
    for c in p.l_cov.iter_mut() {
        if full {
            for j in 0..c.ncols() {
                for i in j..c.nrows() {
                    c[(i, j)] += rng.gen_range(-0.03..0.03);
                }
            }
        } else {
            c.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
        }
    }
    for k in p.kern_l.iter_mut().chain(p.kern_h.iter_mut()).chain(std::iter::once(&mut p.kern_y)) {
        k.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    p.z_l.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    p.z_h.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    for m in p.u_h_mean.iter_mut().chain(std::iter::once(&mut p.u_y_mean)) {
        m.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
    }
    for r in p.u_h_factor.iter_mut().chain(std::iter::once(&mut p.u_y_factor)) {
        for j in 0..r.ncols() {
            for i in j..r.nrows() {
                r[(i, j)] += rng.gen_range(-0.2..0.2);
            }
        }
    }
    p.log_noise.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
}

fn replicated_model(cov: LatentCovariance) -> DgpModel {
    let (mut x, y) = toy_inputs(10, 3);
    // a few repeated inputs, as in a survey
    for i in 6..10 {
        let src = x.row(i - 5).into_owned();
        x.set_row(i, &src);
    }
    init_dgp(&x, &y, &small_config(4, cov), 1).unwrap()
}

#[test]
fn identity_init_and_determinism() {
    let (x, y) = toy_inputs(15, 0);
    let a = init_dgp(&x, &y, &small_config(5, LatentCovariance::Auto), 9).unwrap();
    assert_eq!(a.params.l_mean, x);
    assert_eq!(a.params.h_mean, x);
    assert!(a.latent_is_full());
    let b = init_dgp(&x, &y, &small_config(5, LatentCovariance::Auto), 9).unwrap();
    assert_eq!(a, b);
    let wide = DgpLayerConfig {
        d_l: 3,
        d_h: 1,
        ..small_config(5, LatentCovariance::Diagonal)
    };
    let c = init_dgp(&x, &y, &wide, 9).unwrap();
    assert_eq!(c.params.l_mean.column(2).amax(), 0.0);
    assert_eq!(c.params.h_mean.column(0), x.column(0));
    assert!(!c.latent_is_full());
}

#[test]
fn full_inducing_set_is_a_permutation() {
    let (x, y) = toy_inputs(12, 4);
    let m = init_dgp(&x, &y, &small_config(12, LatentCovariance::Auto), 2).unwrap();
    let mut got: Vec<(f64, f64)> = (0..12).map(|i| (m.params.z_l[(i, 0)], m.params.z_l[(i, 1)])).collect();
    let mut want: Vec<(f64, f64)> = (0..12).map(|i| (x[(i, 0)], x[(i, 1)])).collect();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, want);
}

#[test]
fn init_rejects_bad_config() {
    let (x, y) = toy_inputs(5, 0);
    assert!(matches!(
        init_dgp(&x, &y, &small_config(6, LatentCovariance::Auto), 0),
        Err(Error::Validation(_))
    ));
    let bad = DgpLayerConfig {
        d_l: 0,
        ..small_config(2, LatentCovariance::Auto)
    };
    assert!(init_dgp(&x, &y, &bad, 0).is_err());
    assert!(init_dgp(&x, &y[..4], &small_config(2, LatentCovariance::Auto), 0).is_err());
}

#[test]
fn gaussian_kl_examples() {
    let one = DMatrix::identity(1, 1);
    assert_eq!(kl_gaussians(&[0.0], &one, &[0.0], &one).unwrap(), 0.0);
    assert!((kl_gaussians(&[1.0], &one, &[0.0], &one).unwrap() - 0.5).abs() < 1e-15);
    let two = DMatrix::from_element(1, 1, 2.0);
    let v = kl_gaussians(&[0.0], &two, &[0.0], &one).unwrap();
    assert!((v - 0.5 * (2.0 - 1.0 - 2f64.ln())).abs() < 1e-12);
    assert!((v - 0.153426).abs() < 1e-6);
    let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    assert!(kl_gaussians(&[0.1, -0.2], &s, &[0.1, -0.2], &s).unwrap().abs() < 1e-12);
    let singular = DMatrix::from_element(2, 2, 1.0);
    assert!(matches!(
        kl_gaussians(&[0.0, 0.0], &singular, &[0.0, 0.0], &s),
        Err(Error::Conditioning { .. })
    ));
}

#[test]
fn latent_kl_matches_dense_gaussian_kl() {
    let mut m = replicated_model(LatentCovariance::Full);
    jiggle(&mut m, 5);
    let t = elbo_estimate(&m, 1, 0).unwrap();
    let eps_l = m.noise()[0];
    let mut dense = 0.0;
    for d in 0..m.params.d_l() {
        let k = m.params.kern_l[d].as_slice();
        let w: Vec<f64> = k[1..].iter().map(|v| v.exp()).collect();
        let mut sigma = ard_cross(&m.x, &m.x, k[0].exp(), &w);
        for i in 0..m.n() {
            sigma[(i, i)] += eps_l;
        }
        let r = &m.params.l_cov[d];
        let zero = vec![0.0; m.n()];
        dense += kl_gaussians(m.params.l_mean.column(d).as_slice(), &(r * r.transpose()), &zero, &sigma).unwrap();
    }
    assert!((t.kl_l - dense).abs() < 1e-8 * dense.max(1.0), "{} {dense}", t.kl_l);
}

#[test]
fn terms_are_finite_and_kls_nonnegative() {
    for cov in [LatentCovariance::Full, LatentCovariance::Diagonal] {
        let mut m = replicated_model(cov);
        jiggle(&mut m, 2);
        let t = elbo_estimate(&m, 3, 7).unwrap();
        for v in [t.output_fit, t.hidden_fit, t.entropy_h, t.total] {
            assert!(v.is_finite());
        }
        assert!(t.kl_u_y >= 0.0 && t.kl_u_h >= 0.0 && t.kl_l >= 0.0);
        let n_h = m.params.h_log_var.len() as f64;
        let closed = 0.5 * (n_h * (1.0 + (2.0 * std::f64::consts::PI).ln()) + m.params.h_log_var.sum());
        assert!((t.entropy_h - closed).abs() < 1e-10);
        assert_eq!(t, elbo_estimate(&m, 3, 7).unwrap());
        assert!(elbo_estimate(&m, 0, 7).is_err());
    }
}

fn fd_check(model: &DgpModel, value: impl Fn(&DgpModel) -> f64, grad: &DgpParams, tol: f64) {
    let h = 1e-6;
    let base = model.params.to_flat();
    let g = grad.to_flat();
    let names: Vec<(String, usize, usize)> = model
        .params
        .fields()
        .iter()
        .map(|(k, m)| (k.clone(), m.len(), m.nrows()))
        .collect();
    let mut at = 0;
    for (name, len, rows) in names {
        // factors are lower triangular; the upper entries are not parameters
        let square = len == rows * rows && rows > 1;
        for i in 0..len {
            if square && i % rows < i / rows {
                continue;
            }
            let idx = at + i;
            let mut up = model.clone();
            let mut f = base.clone();
            f[idx] += h;
            up.params.set_flat(&f);
            let mut dn = model.clone();
            f[idx] -= 2.0 * h;
            dn.params.set_flat(&f);
            let num = (value(&up) - value(&dn)) / (2.0 * h);
            let scale = num.abs().max(g[idx].abs()).max(1e-2);
            assert!(
                (num - g[idx]).abs() / scale < tol,
                "{name}[{i}]: analytic {} numeric {num}",
                g[idx]
            );
        }
        at += len;
    }
}

/// With the samples fixed by the seed the estimate is a smooth function of
/// the parameters, so its gradient can be checked exactly.
#[test]
fn sampled_gradient_matches_finite_differences() {
    for cov in [LatentCovariance::Diagonal, LatentCovariance::Full] {
        let mut m = replicated_model(cov);
        jiggle(&mut m, 11);
        let (_, g) = elbo_gradient(&m, 2, 4).unwrap();
        fd_check(&m, |mm| elbo_estimate(mm, 2, 4).unwrap().total, &g, 1e-4);
    }
}

#[test]
fn closed_form_gradient_matches_finite_differences() {
    for cov in [LatentCovariance::Diagonal, LatentCovariance::Full] {
        let mut m = replicated_model(cov);
        jiggle(&mut m, 12);
        let mut g = m.params.zeros_like();
        closed_form(&m, Some(&mut g)).unwrap();
        let value = |mm: &DgpModel| {
            let c = closed_form(mm, None).unwrap();
            c.entropy_h - c.kl_u_y - c.kl_u_h - c.kl_l
        };
        fd_check(&m, value, &g, 1e-4);
    }
}

#[test]
fn monte_carlo_error_shrinks_with_samples() {
    let mut m = replicated_model(LatentCovariance::Diagonal);
    jiggle(&mut m, 3);
    // give q(L) and q(H) enough spread that the estimate is visibly noisy
    m.params.h_log_var.fill(0.0);
    m.params.l_cov.iter_mut().for_each(|c| c.fill(0.0));
    let se = |s: usize| {
        let v: Vec<f64> = (0..50).map(|seed| elbo_estimate(&m, s, seed).unwrap().total).collect();
        let mean = v.iter().sum::<f64>() / 50.0;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 49.0).sqrt() / 50f64.sqrt()
    };
    let (a, b) = (se(16), se(64));
    assert!(b <= 0.6 * a, "SE {a} at S=16, {b} at S=64");
}

/// Exact GP LML of the output layer against the output block of the bound
/// with `q(H)` pinned at the inputs, inducing points at the inputs, and the
/// optimal Gaussian `q(u^Y)`.
#[test]
fn collapsed_configuration_recovers_exact_gp() {
    let (x, y) = toy_inputs(20, 21);
    let theta = GpHyperparams::new(0.8, 1.3, 0.05).unwrap();
    let exact = log_marginal_likelihood(&row_positions(&x), &y, &theta).unwrap();
    let m = collapsed_model(&x, &y, &theta);
    let t = elbo_estimate(&m, 4, 0).unwrap();
    assert!((t.output_block() - exact).abs() < 1.0, "{} vs {exact}", t.output_block());
}

pub(super) fn collapsed_model(x: &DMatrix<f64>, y: &[f64], theta: &GpHyperparams) -> DgpModel {
    let n = x.nrows();
    let cfg = DgpLayerConfig {
        k_l: n,
        k_h: n,
        noise_l: 1e-8,
        noise_h: 1e-8,
        noise_y: theta.noise_variance,
        kernel_y: Some(ArdParams::isotropic(theta.signal_variance, theta.length_scale, 2).unwrap()),
        ..Default::default()
    };
    let mut m = init_dgp(x, y, &cfg, 0).unwrap();
    m.params.h_log_var.fill(-40.0);
    m.params.z_h = x.clone();
    let p = Prepared::new(&m.params.z_h, m.params.kern_y.as_slice(), &m.params.u_y_factor).unwrap();
    let a = &p.li * ard_cross(&m.params.z_h, x, p.sf2, &p.w);
    let eps = theta.noise_variance;
    let prec = DMatrix::identity(n, n) + &a * a.transpose() / eps;
    let cov = prec.try_inverse().unwrap();
    let mean = &cov * &a * DVector::from_column_slice(y) / eps;
    m.params.u_y_mean = DMatrix::from_column_slice(n, 1, mean.as_slice());
    m.params.u_y_factor = nalgebra::Cholesky::new((&cov + cov.transpose()) * 0.5).unwrap().l();
    m
}

#[test]
fn zero_steps_leave_model_unchanged() {
    let m = replicated_model(LatentCovariance::Diagonal);
    let (out, trace) = train_dgp(&m, 0, &TrainOptions::default()).unwrap();
    assert_eq!(out, m);
    assert!(trace.is_empty());
}

#[test]
fn training_is_deterministic_and_improves() {
    let m = replicated_model(LatentCovariance::Full);
    let opts = TrainOptions {
        step_size: 0.01,
        mc_samples: 2,
        seed: 5,
    };
    let (a, ta) = train_dgp(&m, 150, &opts).unwrap();
    let (b, tb) = train_dgp(&m, 150, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let head: f64 = ta[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = ta[130..].iter().sum::<f64>() / 20.0;
    assert!(tail > head, "{head} -> {tail}");
}

#[test]
fn prediction_floor_and_determinism() {
    let m = replicated_model(LatentCovariance::Diagonal);
    let (a, va) = dgp_predict(&m, &[0.1, -0.3], 50, 3).unwrap();
    let (b, vb) = dgp_predict(&m, &[0.1, -0.3], 50, 3).unwrap();
    assert_eq!((a, va), (b, vb));
    assert!(va >= m.noise()[2]);
    assert!(matches!(dgp_predict(&m, &[0.0, 0.0], 1, 0), Err(Error::Validation(_))));
    assert!(dgp_predict(&m, &[0.0], 10, 0).is_err());
}

/// Relabels hidden dimension `a` as `b` and vice versa.
fn swap_hidden(m: &DgpModel) -> DgpModel {
    let mut out = m.clone();
    let p = &mut out.params;
    p.h_mean.swap_columns(0, 1);
    p.h_log_var.swap_columns(0, 1);
    p.kern_h.swap(0, 1);
    p.u_h_mean.swap(0, 1);
    p.u_h_factor.swap(0, 1);
    p.z_h.swap_columns(0, 1);
    p.kern_y.swap_rows(1, 2);
    out
}

#[test]
fn hidden_relabeling_leaves_predictions_unchanged() {
    let mut m = replicated_model(LatentCovariance::Diagonal);
    jiggle(&mut m, 8);
    let sw = swap_hidden(&m);
    // the closed-form part is exactly symmetric
    let (c0, c1) = (closed_form(&m, None).unwrap(), closed_form(&sw, None).unwrap());
    assert!((c0.kl_u_h - c1.kl_u_h).abs() < 1e-12 && (c0.entropy_h - c1.entropy_h).abs() < 1e-12);
    // the sampled predictive agrees up to Monte-Carlo error
    let xs = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, -0.5, -1.2, 0.7]);
    let s = 4000;
    let (m0, v0) = dgp_predict_batch(&m, &xs, s, 1).unwrap();
    let (m1, v1) = dgp_predict_batch(&sw, &xs, s, 2).unwrap();
    for i in 0..3 {
        let se = (v0[i] / s as f64).sqrt();
        assert!((m0[i] - m1[i]).abs() < 5.0 * se, "mean {} vs {}", m0[i], m1[i]);
        assert!((v0[i] - v1[i]).abs() < 0.15 * v0[i], "var {} vs {}", v0[i], v1[i]);
    }
}

#[test]
fn checkpoint_round_trip() {
    for cov in [LatentCovariance::Diagonal, LatentCovariance::Full] {
        let mut m = replicated_model(cov);
        jiggle(&mut m, 1);
        let json = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(DgpModel::from_checkpoint(&back).unwrap(), m);
    }
    let m = replicated_model(LatentCovariance::Diagonal);
    let mut c = m.to_checkpoint();
    c.params.remove("z_h");
    assert!(DgpModel::from_checkpoint(&c).is_err());
    let mut c = m.to_checkpoint();
    c.params.get_mut("kern_y").unwrap().shape = [2, 1];
    assert!(DgpModel::from_checkpoint(&c).is_err());
    // shape tags are row-major
    let t = Tensor::from(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(t.data, vec![1.0, 2.0, 3.0, 4.0]);
}

fn heteroscedastic_toy(seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 200;
    let x: Vec<f64> = (0..n).map(|i| -4.0 + 8.0 * (i as f64 + 0.5) / n as f64).collect();
    let y = x
        .iter()
        .map(|&v| {
            let sd = if v < 0.0 { 0.1 } else { 1.0 };
            let z: f64 = rng.sample(StandardNormal);
            v.sin() + sd * z
        })
        .collect();
    (DMatrix::from_column_slice(n, 1, &x), y)
}

#[test]
fn recovers_input_dependent_noise_on_a_toy() {
    let (x, y) = heteroscedastic_toy(0);
    let cfg = DgpLayerConfig {
        k_l: 20,
        k_h: 20,
        ..Default::default()
    };
    let m = init_dgp(&x, &y, &cfg, 0).unwrap();
    let opts = TrainOptions {
        step_size: 0.01,
        mc_samples: 4,
        seed: 0,
    };
    let (m, trace) = train_dgp(&m, 1001, &opts).unwrap();
    let smooth = |t: usize| trace[t.saturating_sub(49)..=t].iter().sum::<f64>() / (t.min(49) + 1) as f64;
    assert!(smooth(1000) > smooth(0));

    let grid = |a: f64, b: f64| DMatrix::from_fn(20, 1, |i, _| a + (b - a) * (i as f64 + 0.5) / 20.0);
    let sd = |xs: &DMatrix<f64>| {
        let (_, v) = dgp_predict_batch(&m, xs, 200, 1).unwrap();
        v.iter().map(|v| v.sqrt()).sum::<f64>() / v.len() as f64
    };
    let ratio = sd(&grid(1.0, 3.0)) / sd(&grid(-3.0, -1.0));
    assert!(ratio >= 1.5, "sd ratio {ratio}");
}
