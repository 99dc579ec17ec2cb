//! End-to-end chessboard comparison: simulate, fit both maps, locate the
//! test survey with each, and report.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{GridSpec, Position, RadioMap};
use crate::dgp::{build_dgp_radio_map, DgpMapOptions};
use crate::error::{Error, Result};
use crate::eval::{compute_errors, render_cdf_svg, summarize, EvalReport};
use crate::gp::{build_gp_radio_map, GpMapOptions};
use crate::positioning::locate;
use crate::simulator::{sample_chessboard, ChessboardConfig, TruthField};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub simulator: ChessboardConfig,
    pub gp: GpMapOptions,
    pub dgp: DgpMapOptions,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// How well one AP's predicted variance field tracks the true one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDiagnostics {
    /// Pearson correlation over all cells; `None` if either field is constant.
    pub correlation: Option<f64>,
    /// Coefficient of variation over interior cells (border ring excluded).
    pub predicted_cv: f64,
    pub truth_cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub gp: EvalReport,
    pub dgp: EvalReport,
    /// Model label, then AP id.
    pub variance: BTreeMap<String, BTreeMap<String, VarianceDiagnostics>>,
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Population standard deviation over mean.
pub fn coefficient_of_variation(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    var.sqrt() / m
}

/// Row-major indices of cells off the outer ring. Falls back to every cell
/// when the grid has no interior.
pub fn interior_cells(grid: &GridSpec) -> Vec<usize> {
    let (rows, cols) = (grid.rows(), grid.cols());
    if rows < 3 || cols < 3 {
        return (0..grid.len()).collect();
    }
    (1..rows - 1)
        .flat_map(|r| (1..cols - 1).map(move |c| grid.index(r, c)))
        .collect()
}

pub fn variance_diagnostics(map: &RadioMap, truth: &TruthField) -> BTreeMap<String, VarianceDiagnostics> {
    let inner = interior_cells(&truth.grid);
    let pick = |v: &[f64]| inner.iter().map(|&i| v[i]).collect::<Vec<_>>();
    truth
        .ap_ids
        .iter()
        .zip(&truth.variance)
        .filter_map(|(ap, tv)| {
            let pv = &map.aps.get(ap)?.variance;
            Some((
                ap.clone(),
                VarianceDiagnostics {
                    correlation: pearson(pv, tv),
                    predicted_cv: coefficient_of_variation(&pick(pv)),
                    truth_cv: coefficient_of_variation(&pick(tv)),
                },
            ))
        })
        .collect()
}

fn evaluate_map(map: &RadioMap, test: &crate::data::Dataset, label: &str) -> Result<EvalReport> {
    let estimates = test
        .records()
        .iter()
        .map(|r| locate(&r.obs, map))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<Position> = test.records().iter().map(|r| r.pos).collect();
    Ok(summarize(&compute_errors(&estimates, &truth)?, label))
}

/// Runs every stage in memory. Errors carry the failing stage's name.
pub fn compare(config: &PipelineConfig) -> Result<PipelineReport> {
    let board = sample_chessboard(&config.simulator).map_err(|e| e.in_stage("simulate"))?;
    let grid = board.truth.grid;
    let (gp_map, _) = build_gp_radio_map(&board.train, &grid, &config.gp).map_err(|e| e.in_stage("fit gp"))?;
    let dgp_map = build_dgp_radio_map(&board.train, &grid, &config.dgp).map_err(|e| e.in_stage("fit dgp"))?;
    let gp = evaluate_map(&gp_map, &board.test, "gp").map_err(|e| e.in_stage("locate gp"))?;
    let dgp = evaluate_map(&dgp_map, &board.test, "dgp").map_err(|e| e.in_stage("locate dgp"))?;
    let mut variance = BTreeMap::new();
    variance.insert("gp".to_string(), variance_diagnostics(&gp_map, &board.truth));
    variance.insert("dgp".to_string(), variance_diagnostics(&dgp_map, &board.truth));
    Ok(PipelineReport { gp, dgp, variance })
}

/// [`compare`], then writes `report.json` and `cdf.svg` under `out`.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<PipelineReport> {
    let report = compare(config)?;
    let write = || -> Result<()> {
        fs::create_dir_all(out)?;
        let json = serde_json::to_string_pretty(&report)?;
        fs::write(out.join("report.json"), json + "\n")?;
        let svg = render_cdf_svg(&[report.gp.clone(), report.dgp.clone()])?;
        fs::write(out.join("cdf.svg"), svg)?;
        Ok(())
    };
    write().map_err(|e| e.in_stage("write"))?;
    Ok(report)
}

/// Reads a JSON config; a missing section takes its defaults.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path)?;
    PipelineConfig::from_json(&text).map_err(|e| match e {
        Error::Json(j) => Error::Validation(format!("{}: {j}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_of_affine_copy_is_one() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let b: Vec<f64> = a.iter().map(|x| 3.0 - 2.0 * x).collect();
        assert!((pearson(&a, &b).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&a, &[1.0; 4]), None);
    }

    #[test]
    fn cv_example() {
        // mean 2, population sd 1
        assert!((coefficient_of_variation(&[1.0, 3.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn interior_of_nine_by_nine() {
        let g = GridSpec::unit(9, 9).unwrap();
        let inner = interior_cells(&g);
        assert_eq!(inner.len(), 49);
        assert_eq!(inner[0], 10);
        assert_eq!(*inner.last().unwrap(), 70);
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c = PipelineConfig::from_json(r#"{"simulator":{"seed":7},"dgp":{"steps":5}}"#).unwrap();
        assert_eq!(c.simulator.seed, 7);
        assert_eq!(c.simulator.rows, 9);
        assert_eq!(c.dgp.steps, 5);
        assert_eq!(c.gp, GpMapOptions::default());
        assert!(PipelineConfig::from_json(r#"{"simulatr":{}}"#).is_err());
    }

    #[test]
    fn truth_map_diagnostics_are_perfect() {
        let truth = TruthField::new(&ChessboardConfig::default()).unwrap();
        let d = variance_diagnostics(&truth.to_radio_map(), &truth);
        assert_eq!(d.len(), 5);
        for v in d.values() {
            assert!((v.correlation.unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(v.predicted_cv, v.truth_cv);
        }
    }

    #[test]
    fn stage_name_in_error() {
        let mut c = PipelineConfig::default();
        c.simulator.rows = 0;
        let e = compare(&c).unwrap_err();
        assert!(e.to_string().starts_with("simulate:"), "{e}");
    }
}
