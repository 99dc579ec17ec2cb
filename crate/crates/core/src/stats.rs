//! Gaussian log-density and Levene's test for equality of variances.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log of the normal density `N(y; mean, variance)`.
pub fn gaussian_log_pdf(y: f64, mean: f64, variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::Domain(format!("variance must be > 0, got {variance}")));
    }
    Ok(gaussian_log_pdf_unchecked(y, mean, variance))
}

#[inline]
pub(crate) fn gaussian_log_pdf_unchecked(y: f64, mean: f64, variance: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + variance.ln()) - r * r / (2.0 * variance)
}

/// Outcome of Levene's test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeveneResult {
    /// Test statistic; `+inf` when every group is internally constant but the
    /// groups differ in spread.
    pub w: f64,
    pub df1: usize,
    pub df2: usize,
    pub p_value: f64,
}

impl LeveneResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Classic (mean-centered) Levene statistic over `groups`.
pub fn levene_statistic<G: AsRef<[f64]>>(groups: &[G]) -> Result<LeveneResult> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::Validation(format!(
            "Levene's test needs at least 2 groups, got {k}"
        )));
    }
    if let Some(small) = groups.iter().position(|g| g.as_ref().len() < 2) {
        return Err(Error::Validation(format!(
            "group {small} has fewer than 2 observations"
        )));
    }

    // absolute deviations from each group mean
    let deviations: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let g = g.as_ref();
            let m = mean(g);
            g.iter().map(|y| (y - m).abs()).collect()
        })
        .collect();
    let n_total: usize = deviations.iter().map(Vec::len).sum();
    let group_means: Vec<f64> = deviations.iter().map(|z| mean(z)).collect();
    let grand_mean = deviations.iter().flatten().sum::<f64>() / n_total as f64;

    let between: f64 = deviations
        .iter()
        .zip(&group_means)
        .map(|(z, m)| z.len() as f64 * (m - grand_mean).powi(2))
        .sum();
    let within: f64 = deviations
        .iter()
        .zip(&group_means)
        .map(|(z, m)| z.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();

    let df1 = k - 1;
    let df2 = n_total - k;
    // relative to the scale of the deviations, anything this small is rounding noise
    let scale = grand_mean.abs().max(f64::MIN_POSITIVE);
    let tiny = 1e-24 * scale * scale * n_total as f64;
    if within <= tiny {
        if between <= tiny {
            return Err(Error::Degenerate(
                "all absolute deviations are identical".into(),
            ));
        }
        return Ok(LeveneResult {
            w: f64::INFINITY,
            df1,
            df2,
            p_value: 0.0,
        });
    }
    let w = (df2 as f64 / df1 as f64) * between / within;
    Ok(LeveneResult {
        w,
        df1,
        df2,
        p_value: f_upper_tail(w, df1, df2)?,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `P(F > w)` for an F distribution with `(df1, df2)` degrees of freedom.
pub fn f_upper_tail(w: f64, df1: usize, df2: usize) -> Result<f64> {
    if w.is_nan() || w < 0.0 {
        return Err(Error::Domain(format!("F statistic must be >= 0, got {w}")));
    }
    if df1 == 0 || df2 == 0 {
        return Err(Error::Domain("degrees of freedom must be >= 1".into()));
    }
    if w == 0.0 {
        return Ok(1.0);
    }
    if w.is_infinite() {
        return Ok(0.0);
    }
    let (d1, d2) = (df1 as f64, df2 as f64);
    let x = d2 / (d2 + d1 * w);
    Ok(regularized_incomplete_beta(x, d2 / 2.0, d1 / 2.0).clamp(0.0, 1.0))
}

/// Regularized incomplete beta `I_x(a, b)`, evaluated with a continued
/// fraction (modified Lentz) on whichever side of the mean converges fastest.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    debug_assert!(a > 0.0 && b > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TOL: f64 = 1e-12;
    const MAX_ITER: usize = 10_000;
    const FLOOR: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FLOOR {
        d = FLOOR;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FLOOR {
            d = FLOOR;
        }
        c = 1.0 + aa / c;
        if c.abs() < FLOOR {
            c = FLOOR;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FLOOR {
            d = FLOOR;
        }
        c = 1.0 + aa / c;
        if c.abs() < FLOOR {
            c = FLOOR;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < TOL {
            break;
        }
    }
    h
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// `ln Γ(z)` for `z > 0` (Lanczos, g = 7).
pub fn ln_gamma(z: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        // reflection
        return (PI / (PI * z).sin()).ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + G + 0.5;
    0.5 * (2.0 * PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_pdf_peak_and_offset() {
        let peak = gaussian_log_pdf(-50.0, -50.0, 4.0).unwrap();
        let expected = -(2.0 * (2.0 * PI).sqrt()).ln();
        assert!((peak - expected).abs() < 1e-14);
        assert!((peak + 1.612_086).abs() < 1e-6);
        let off = gaussian_log_pdf(-52.0, -50.0, 4.0).unwrap();
        assert!((off - (expected - 0.5)).abs() < 1e-14);
        assert!(matches!(gaussian_log_pdf(0.0, 0.0, 0.0), Err(Error::Domain(_))));
        assert!(gaussian_log_pdf(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn log_pdf_integrates_to_one() {
        // composite Simpson over +-10 sigma
        for &(mean, var) in &[(0.0, 1.0), (-50.0, 4.0), (3.0, 0.01)] {
            let sd: f64 = f64::sqrt(var);
            let (lo, hi) = (mean - 10.0 * sd, mean + 10.0 * sd);
            let n = 4000;
            let h = (hi - lo) / n as f64;
            let f = |y: f64| gaussian_log_pdf(y, mean, var).unwrap().exp();
            let mut s = f(lo) + f(hi);
            for i in 1..n {
                s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - PI.sqrt().ln()).abs() < 1e-13);
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(100.5) - 361.435_540_467_778).abs() < 1e-9);
    }

    #[test]
    fn f_tail_edges() {
        assert_eq!(f_upper_tail(0.0, 3, 7).unwrap(), 1.0);
        assert_eq!(f_upper_tail(f64::INFINITY, 3, 7).unwrap(), 0.0);
        assert!(f_upper_tail(1e12, 3, 7).unwrap() < 1e-12);
        assert!(matches!(f_upper_tail(-1.0, 1, 1), Err(Error::Domain(_))));
        assert!(f_upper_tail(1.0, 0, 1).is_err());
    }

    #[test]
    fn f_one_one_median() {
        assert!((f_upper_tail(1.0, 1, 1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f_one_one_by_quadrature() {
        // density of F(1,1) is 1 / (pi sqrt(t) (1 + t)); substitute t = u^2
        // so P(F <= 1) = int_0^1 2 / (pi (1 + u^2)) du
        let n = 2000;
        let h = 1.0 / n as f64;
        let f = |u: f64| 2.0 / (PI * (1.0 + u * u));
        let mut s = f(0.0) + f(1.0);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let cdf = s * h / 3.0;
        assert!((1.0 - cdf - f_upper_tail(1.0, 1, 1).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn levene_identical_groups() {
        let r = levene_statistic(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(r.w, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!((r.df1, r.df2), (1, 4));
    }

    #[test]
    fn levene_errors() {
        assert!(matches!(
            levene_statistic(&[vec![0.0; 3], vec![0.0; 3]]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            levene_statistic(&[vec![1.0, 2.0]]),
            Err(Error::Validation(_))
        ));
        assert!(levene_statistic(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn levene_constant_spread_within_groups() {
        let r = levene_statistic(&[vec![1.0, -1.0], vec![2.0, -2.0]]).unwrap();
        assert!(r.w.is_infinite());
        assert_eq!(r.p_value, 0.0);
    }
}
