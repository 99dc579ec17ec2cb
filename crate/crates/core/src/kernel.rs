//! Covariance functions.

use serde::{Deserialize, Serialize};

use crate::data::Position;
use crate::error::{Error, Result};

/// Hyperparameters of the isotropic squared-exponential GP: length scale,
/// signal variance and noise variance.
///
/// Serialized with the short keys `l`, `sf2`, `sn2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    #[serde(rename = "l")]
    pub length_scale: f64,
    #[serde(rename = "sf2")]
    pub signal_variance: f64,
    #[serde(rename = "sn2")]
    pub noise_variance: f64,
}

impl GpHyperparams {
    pub fn new(length_scale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let theta = GpHyperparams {
            length_scale,
            signal_variance,
            noise_variance,
        };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if ok(self.length_scale) && ok(self.signal_variance) && ok(self.noise_variance) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "hyperparameters must be positive and finite: {self:?}"
            )))
        }
    }

    /// `(log l, log sf2, log sn2)`, the space the optimizer works in.
    pub fn to_log(&self) -> [f64; 3] {
        [
            self.length_scale.ln(),
            self.signal_variance.ln(),
            self.noise_variance.ln(),
        ]
    }

    pub fn from_log(log: [f64; 3]) -> Self {
        GpHyperparams {
            length_scale: log[0].exp(),
            signal_variance: log[1].exp(),
            noise_variance: log[2].exp(),
        }
    }
}

/// Squared-exponential kernel `sf2 * exp(-|p - q|^2 / (2 l^2))`.
pub fn se_kernel(p: &Position, q: &Position, theta: &GpHyperparams) -> f64 {
    se_from_sq_dist(p.squared_distance(q), theta)
}

#[inline]
pub(crate) fn se_from_sq_dist(d2: f64, theta: &GpHyperparams) -> f64 {
    theta.signal_variance * (-0.5 * d2 / (theta.length_scale * theta.length_scale)).exp()
}

/// Parameters of an automatic-relevance-determination kernel: a signal
/// variance and one inverse squared length scale per input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdParams {
    pub signal_variance: f64,
    pub weights: Vec<f64>,
}

impl ArdParams {
    pub fn new(signal_variance: f64, weights: Vec<f64>) -> Result<Self> {
        if !(signal_variance > 0.0 && signal_variance.is_finite()) {
            return Err(Error::Validation(format!(
                "ARD signal variance must be positive, got {signal_variance}"
            )));
        }
        if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Validation(
                "ARD weights must be non-empty and positive".into(),
            ));
        }
        Ok(ArdParams {
            signal_variance,
            weights,
        })
    }

    /// Isotropic weights `1 / l^2` in every one of `dim` dimensions.
    pub fn isotropic(signal_variance: f64, length_scale: f64, dim: usize) -> Result<Self> {
        ArdParams::new(
            signal_variance,
            vec![1.0 / (length_scale * length_scale); dim],
        )
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// ARD kernel `s2 * exp(-0.5 * sum_d w_d (p_d - q_d)^2)`.
pub fn ard_kernel(p: &[f64], q: &[f64], params: &ArdParams) -> Result<f64> {
    if p.len() != params.dim() || q.len() != params.dim() {
        return Err(Error::Shape(format!(
            "ARD kernel over {} dimensions got inputs of length {} and {}",
            params.dim(),
            p.len(),
            q.len()
        )));
    }
    let s: f64 = p
        .iter()
        .zip(q)
        .zip(&params.weights)
        .map(|((a, b), w)| w * (a - b) * (a - b))
        .sum();
    Ok(params.signal_variance * (-0.5 * s).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn se_values() {
        let theta = GpHyperparams::new(1.5, 2.0, 0.1).unwrap();
        let p = Position::new(0.3, -1.0);
        assert_eq!(se_kernel(&p, &p, &theta), 2.0);

        let theta = GpHyperparams::new(2.0, 1.0, 0.1).unwrap();
        let q = Position::new(0.3 + 2.0 * 0.6, -1.0 + 2.0 * 0.8);
        assert!((se_kernel(&p, &q, &theta) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((se_kernel(&p, &q, &theta) - 0.606_531).abs() < 1e-6);
        assert_eq!(se_kernel(&p, &q, &theta), se_kernel(&q, &p, &theta));
    }

    #[test]
    fn invalid_hyperparams() {
        assert!(GpHyperparams::new(0.0, 1.0, 1.0).is_err());
        assert!(GpHyperparams::new(1.0, -1.0, 1.0).is_err());
        assert!(GpHyperparams::new(1.0, 1.0, f64::NAN).is_err());
        let t = GpHyperparams::new(1.2, 3.4, 0.5).unwrap();
        let back = GpHyperparams::from_log(t.to_log());
        assert!((back.length_scale - 1.2).abs() < 1e-14);
    }

    #[test]
    fn ard_matches_se() {
        let l = 1.7;
        let theta = GpHyperparams::new(l, 2.5, 1.0).unwrap();
        let ard = ArdParams::isotropic(2.5, l, 2).unwrap();
        let (p, q) = (Position::new(0.1, 0.2), Position::new(-1.3, 2.9));
        let a = ard_kernel(&[p.x, p.y], &[q.x, q.y], &ard).unwrap();
        assert!((a - se_kernel(&p, &q, &theta)).abs() < 1e-12);
        assert_eq!(ard_kernel(&[1.0, 2.0], &[1.0, 2.0], &ard).unwrap(), 2.5);
    }

    #[test]
    fn ard_small_weight_is_nearly_irrelevant() {
        let eps = 1e-9;
        let params = ArdParams::new(3.0, vec![1.0, eps]).unwrap();
        let base = ard_kernel(&[0.0, 0.0], &[0.5, 0.0], &params).unwrap();
        for delta in [0.5, 2.0, 10.0] {
            let moved = ard_kernel(&[0.0, 0.0], &[0.5, delta], &params).unwrap();
            assert!((moved - base).abs() <= eps * delta * delta * 3.0 / 2.0);
        }
    }

    #[test]
    fn ard_shape_errors() {
        let params = ArdParams::new(1.0, vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            ard_kernel(&[0.0], &[0.0, 1.0], &params),
            Err(Error::Shape(_))
        ));
        assert!(ArdParams::new(1.0, vec![]).is_err());
        assert!(ArdParams::new(1.0, vec![0.0]).is_err());
    }
}
