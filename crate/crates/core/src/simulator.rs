//! Synthetic chessboard survey with known heteroscedastic signal fields.
//!
//! Every AP radiates an isotropic signal whose mean decays with the log of
//! distance and whose variance oscillates as `cos^2(d / pi)`, so it is largest
//! at the source and vanishes on the ring `d = pi^2 / 2`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ApMap, Dataset, FingerprintRecord, GridSpec, Position, RadioMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Ten,
    Natural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChessboardConfig {
    pub rows: usize,
    pub cols: usize,
    /// Defaults to the board center followed by the four corner cell centers.
    pub ap_positions: Option<Vec<Position>>,
    pub train_per_grid: usize,
    pub test_per_grid: usize,
    pub base_power: f64,
    pub variance_scale: f64,
    pub variance_floor: f64,
    pub log_base: LogBase,
    pub seed: u64,
}

impl Default for ChessboardConfig {
    fn default() -> Self {
        ChessboardConfig {
            rows: 9,
            cols: 9,
            ap_positions: None,
            train_per_grid: 10,
            test_per_grid: 1,
            base_power: 50.0,
            variance_scale: 10.0,
            variance_floor: 1e-3,
            log_base: LogBase::Ten,
            seed: 0,
        }
    }
}

impl ChessboardConfig {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::unit(self.rows, self.cols)
    }

    pub fn aps(&self) -> Vec<Position> {
        match &self.ap_positions {
            Some(p) => p.clone(),
            None => {
                let (w, h) = (self.cols as f64, self.rows as f64);
                vec![
                    Position::new(w / 2.0, h / 2.0),
                    Position::new(0.5, 0.5),
                    Position::new(w - 0.5, 0.5),
                    Position::new(0.5, h - 0.5),
                    Position::new(w - 0.5, h - 0.5),
                ]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        if self.train_per_grid == 0 || self.test_per_grid == 0 {
            return Err(Error::Validation(
                "per-grid sample counts must be positive".into(),
            ));
        }
        let aps = self.aps();
        if aps.is_empty() {
            return Err(Error::Validation("at least one AP is required".into()));
        }
        if let Some(p) = aps.iter().find(|p| !p.is_finite() || !grid.contains(p)) {
            return Err(Error::Validation(format!(
                "AP at ({}, {}) lies outside the board",
                p.x, p.y
            )));
        }
        if !(self.variance_scale > 0.0 && self.variance_floor > 0.0) {
            return Err(Error::Validation(
                "variance scale and floor must be positive".into(),
            ));
        }
        if !self.base_power.is_finite() {
            return Err(Error::Validation("base power must be finite".into()));
        }
        Ok(())
    }
}

/// Mean RSSI at `g` from an AP at `ap`, base-10 logarithm.
pub fn true_mean(g: &Position, ap: &Position, base: f64) -> f64 {
    true_mean_with(g, ap, base, LogBase::Ten)
}

pub fn true_mean_with(g: &Position, ap: &Position, base: f64, log: LogBase) -> f64 {
    let d = g.distance(ap);
    if d <= 1.0 {
        return base;
    }
    let l = match log {
        LogBase::Ten => (10.0 * d).log10(),
        LogBase::Natural => (10.0 * d).ln(),
    };
    base - 10.0 * l
}

/// RSSI variance at `g`: `max(scale * cos^2(d / pi), floor)`.
pub fn true_variance(g: &Position, ap: &Position, scale: f64, floor: f64) -> f64 {
    let c = (g.distance(ap) / PI).cos();
    (scale * c * c).max(floor)
}

/// Analytic mean and variance of every AP at every cell center.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthField {
    pub grid: GridSpec,
    pub ap_ids: Vec<String>,
    /// `mean[ap][cell]`, row-major cells.
    pub mean: Vec<Vec<f64>>,
    pub variance: Vec<Vec<f64>>,
}

impl TruthField {
    pub fn new(config: &ChessboardConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let centers = grid.centers();
        let aps = config.aps();
        let mean = aps
            .iter()
            .map(|ap| {
                centers
                    .iter()
                    .map(|c| true_mean_with(c, ap, config.base_power, config.log_base))
                    .collect()
            })
            .collect();
        let variance = aps
            .iter()
            .map(|ap| {
                centers
                    .iter()
                    .map(|c| true_variance(c, ap, config.variance_scale, config.variance_floor))
                    .collect()
            })
            .collect();
        Ok(TruthField {
            grid,
            ap_ids: ap_ids(aps.len()),
            mean,
            variance,
        })
    }

    pub fn to_radio_map(&self) -> RadioMap {
        let mut map = RadioMap::new(self.grid);
        for (k, ap) in self.ap_ids.iter().enumerate() {
            map.insert(
                ap.clone(),
                ApMap {
                    mean: self.mean[k].clone(),
                    variance: self.variance[k].clone(),
                    hyperparams: None,
                },
            )
            .expect("truth arrays match the grid");
        }
        map
    }
}

fn ap_ids(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("ap{k}")).collect()
}

#[derive(Debug, Clone)]
pub struct Chessboard {
    pub truth: TruthField,
    pub train: Dataset,
    pub test: Dataset,
}

/// Draws the train and test surveys.
///
/// Cells are visited row-major; at each cell the training records are drawn
/// before the test records, and within a record the APs in id order.
pub fn sample_chessboard(config: &ChessboardConfig) -> Result<Chessboard> {
    let truth = TruthField::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centers = truth.grid.centers();
    let mut train = Vec::with_capacity(centers.len() * config.train_per_grid);
    let mut test = Vec::with_capacity(centers.len() * config.test_per_grid);
    for (cell, center) in centers.iter().enumerate() {
        let dists: Vec<Normal<f64>> = (0..truth.ap_ids.len())
            .map(|k| {
                Normal::new(truth.mean[k][cell], truth.variance[k][cell].sqrt())
                    .expect("variance is floored above zero")
            })
            .collect();
        for i in 0..config.train_per_grid + config.test_per_grid {
            let obs: BTreeMap<String, f64> = truth
                .ap_ids
                .iter()
                .zip(&dists)
                .map(|(id, d)| (id.clone(), d.sample(&mut rng)))
                .collect();
            let record = FingerprintRecord::new(*center, obs)?;
            if i < config.train_per_grid {
                train.push(record);
            } else {
                test.push(record);
            }
        }
    }
    Ok(Chessboard {
        truth,
        train: Dataset::new(train)?,
        test: Dataset::new(test)?,
    })
}
