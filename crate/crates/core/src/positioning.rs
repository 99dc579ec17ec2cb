//! One-shot MAP localization over a grid of cells.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{GridSpec, Position, RadioMap};
use crate::error::{Error, Result};
use crate::stats::gaussian_log_pdf_unchecked;

/// Per-cell log-likelihood of an observation vector.
///
/// APs heard in `obs` but missing from the map contribute nothing, and so do
/// APs in the map that were not heard. Terms are added in sorted AP order so
/// the result does not depend on how the caller built `obs`.
pub fn log_likelihood_grid(obs: &BTreeMap<String, f64>, radio_map: &RadioMap) -> Result<Vec<f64>> {
    let mut out = vec![0.0; radio_map.grid.len()];
    let mut used = 0;
    for (ap, &y) in obs {
        let Some(m) = radio_map.aps.get(ap) else {
            continue;
        };
        if !y.is_finite() {
            return Err(Error::Validation(format!("non-finite RSSI for `{ap}`")));
        }
        used += 1;
        for ((o, &mu), &var) in out.iter_mut().zip(&m.mean).zip(&m.variance) {
            *o += gaussian_log_pdf_unchecked(y, mu, var);
        }
    }
    if used == 0 {
        return Err(Error::NoSignal);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    pub grid: GridSpec,
    /// Log-likelihood plus log-prior, unnormalized.
    pub log_unnorm: Vec<f64>,
    pub prob: Vec<f64>,
}

impl PosteriorGrid {
    /// Normalizes `log_unnorm` by log-sum-exp.
    pub fn from_log(grid: GridSpec, log_unnorm: Vec<f64>) -> Result<Self> {
        if log_unnorm.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} log values for {} cells",
                log_unnorm.len(),
                grid.len()
            )));
        }
        let max = log_unnorm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Validation("posterior has zero total mass".into()));
        }
        if !max.is_finite() {
            return Err(Error::Domain("non-finite log posterior".into()));
        }
        let mut prob: Vec<f64> = log_unnorm.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = prob.iter().sum();
        prob.iter_mut().for_each(|p| *p /= z);
        Ok(PosteriorGrid {
            grid,
            log_unnorm,
            prob,
        })
    }
}

/// Posterior over cells; `prior` defaults to uniform and need not be normalized.
pub fn posterior_grid(
    obs: &BTreeMap<String, f64>,
    radio_map: &RadioMap,
    prior: Option<&[f64]>,
) -> Result<PosteriorGrid> {
    let mut log = log_likelihood_grid(obs, radio_map)?;
    if let Some(prior) = prior {
        if prior.len() != log.len() {
            return Err(Error::Shape(format!(
                "prior has {} cells, grid has {}",
                prior.len(),
                log.len()
            )));
        }
        if prior.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::Validation("prior must be finite and nonnegative".into()));
        }
        if prior.iter().all(|&p| p == 0.0) {
            return Err(Error::Validation("prior is zero everywhere".into()));
        }
        for (l, &p) in log.iter_mut().zip(prior) {
            *l = if p > 0.0 { *l + p.ln() } else { f64::NEG_INFINITY };
        }
    }
    PosteriorGrid::from_log(radio_map.grid, log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub row: usize,
    pub col: usize,
    pub x: f64,
    pub y: f64,
    pub posterior_mass: f64,
}

impl Estimate {
    pub fn position(&self) -> Position {
        Position::new(self.x, self.y)
    }
}

/// Most probable cell; exact ties go to the lowest row-major index.
pub fn map_estimate(posterior: &PosteriorGrid) -> Estimate {
    let mut best = 0;
    for (i, &p) in posterior.prob.iter().enumerate() {
        if p > posterior.prob[best] {
            best = i;
        }
    }
    let (row, col) = posterior.grid.row_col(best);
    let c = posterior
        .grid
        .cell_center(row, col)
        .expect("index comes from the grid");
    Estimate {
        row,
        col,
        x: c.x,
        y: c.y,
        posterior_mass: posterior.prob[best],
    }
}

/// Posterior followed by MAP, with a uniform prior.
pub fn locate(obs: &BTreeMap<String, f64>, radio_map: &RadioMap) -> Result<Estimate> {
    Ok(map_estimate(&posterior_grid(obs, radio_map, None)?))
}
