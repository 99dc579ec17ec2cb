//! Fingerprints, grids and radio maps.
//!
//! Datasets are stored as fingerprint-JSONL, one survey record per line:
//!
//! ```text
//! {"x":1.5,"y":0.5,"obs":{"ap0":-48.2,"ap1":-61.0}}
//! ```
//!
//! An access point that was not heard is simply absent from `obs`; there is
//! no sentinel RSSI value. Radio maps serialize as a single JSON document, see
//! [`RadioMap`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::GpHyperparams;

/// A location tag in grid units (or meters, as long as it is consistent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn squared_distance(&self, other: &Position) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// A rectangular grid of `rows x cols` square cells.
///
/// `origin` is the minimum-coordinate corner of cell `(0, 0)`; cell centers
/// sit at half-cell offsets from it. Columns run along `x`, rows along `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "GridRepr", try_from = "GridRepr")]
pub struct GridSpec {
    rows: usize,
    cols: usize,
    origin: Position,
    cell_size: f64,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    rows: usize,
    cols: usize,
    origin: [f64; 2],
    cell_size: f64,
}

impl From<GridSpec> for GridRepr {
    fn from(g: GridSpec) -> Self {
        GridRepr {
            rows: g.rows,
            cols: g.cols,
            origin: [g.origin.x, g.origin.y],
            cell_size: g.cell_size,
        }
    }
}

impl TryFrom<GridRepr> for GridSpec {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        GridSpec::new(
            r.rows,
            r.cols,
            Position::new(r.origin[0], r.origin[1]),
            r.cell_size,
        )
    }
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, origin: Position, cell_size: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Validation(format!(
                "grid must have at least one row and column, got {rows}x{cols}"
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Validation(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        if !origin.is_finite() {
            return Err(Error::Validation("grid origin must be finite".into()));
        }
        Ok(GridSpec {
            rows,
            cols,
            origin,
            cell_size,
        })
    }

    /// Unit cells with the corner at the coordinate origin.
    pub fn unit(rows: usize, cols: usize) -> Result<Self> {
        GridSpec::new(rows, cols, Position::new(0.0, 0.0), 1.0)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn origin(&self) -> Position {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// Number of cells, `rows * cols`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Result<Position> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::OutOfRange {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(Position::new(
            self.origin.x + (col as f64 + 0.5) * self.cell_size,
            self.origin.y + (row as f64 + 0.5) * self.cell_size,
        ))
    }

    /// Row-major index of `(row, col)`.
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// All cell centers in row-major order.
    pub fn centers(&self) -> Vec<Position> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| {
                Position::new(
                    self.origin.x + (c as f64 + 0.5) * self.cell_size,
                    self.origin.y + (r as f64 + 0.5) * self.cell_size,
                )
            })
            .collect()
    }

    /// Length of the grid's diagonal.
    pub fn diagonal(&self) -> f64 {
        self.cell_size * ((self.rows * self.rows + self.cols * self.cols) as f64).sqrt()
    }

    /// Whether `p` lies inside the grid's bounding box (edges included).
    pub fn contains(&self, p: &Position) -> bool {
        let w = self.cols as f64 * self.cell_size;
        let h = self.rows as f64 * self.cell_size;
        p.x >= self.origin.x
            && p.x <= self.origin.x + w
            && p.y >= self.origin.y
            && p.y <= self.origin.y + h
    }
}

/// One surveyed fingerprint: a location tag and the RSSI heard from each AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintRecord {
    #[serde(flatten)]
    pub pos: Position,
    pub obs: BTreeMap<String, f64>,
}

impl FingerprintRecord {
    pub fn new(pos: Position, obs: BTreeMap<String, f64>) -> Result<Self> {
        let record = FingerprintRecord { pos, obs };
        record.validate()?;
        Ok(record)
    }

    fn validate(&self) -> Result<()> {
        if !self.pos.is_finite() {
            return Err(Error::Validation("position must be finite".into()));
        }
        if self.obs.is_empty() {
            return Err(Error::Validation("record has no observations".into()));
        }
        if let Some((ap, v)) = self.obs.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite RSSI {v} for `{ap}`")));
        }
        Ok(())
    }
}

/// An ordered collection of fingerprints together with the sorted set of AP ids
/// that occur in them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    records: Vec<FingerprintRecord>,
    ap_ids: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<FingerprintRecord>) -> Result<Self> {
        for r in &records {
            r.validate()?;
        }
        let ap_ids: BTreeSet<&String> = records.iter().flat_map(|r| r.obs.keys()).collect();
        let ap_ids = ap_ids.into_iter().cloned().collect();
        Ok(Dataset { records, ap_ids })
    }

    pub fn records(&self) -> &[FingerprintRecord] {
        &self.records
    }

    pub fn ap_ids(&self) -> &[String] {
        &self.ap_ids
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Positions and RSSI values of the records in which `ap` was heard.
    pub fn observations(&self, ap: &str) -> Result<(Vec<Position>, Vec<f64>)> {
        if !self.ap_ids.iter().any(|a| a == ap) {
            return Err(Error::UnknownAp(ap.to_string()));
        }
        Ok(self
            .records
            .iter()
            .filter_map(|r| r.obs.get(ap).map(|&v| (r.pos, v)))
            .unzip())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

/// Reads fingerprint-JSONL. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn parse_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FingerprintRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        record.validate().map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {}: {m}", i + 1)),
            other => other,
        })?;
        records.push(record);
    }
    Dataset::new(records)
}

pub fn parse_dataset_str(text: &str) -> Result<Dataset> {
    parse_dataset(text.as_bytes())
}

/// Groups the readings of `ap` by location. A record joins the first existing
/// group whose representative (the first record's position) lies within `tol`;
/// otherwise it starts a new group. Groups come out in order of first
/// appearance.
pub fn group_by_position(
    dataset: &Dataset,
    ap: &str,
    tol: f64,
) -> Result<Vec<(Position, Vec<f64>)>> {
    if !(tol >= 0.0) {
        return Err(Error::Domain(format!("tolerance must be >= 0, got {tol}")));
    }
    let (positions, values) = dataset.observations(ap)?;
    let mut groups: Vec<(Position, Vec<f64>)> = Vec::new();
    for (p, v) in positions.into_iter().zip(values) {
        match groups.iter_mut().find(|(rep, _)| rep.distance(&p) <= tol) {
            Some((_, vals)) => vals.push(v),
            None => groups.push((p, vec![v])),
        }
    }
    Ok(groups)
}

/// Predictive Gaussian of one access point over every grid cell, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApMap {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<GpHyperparams>,
}

/// Per-AP radio maps over a grid.
///
/// Serialized form:
///
/// ```text
/// {"grid":{"rows":M,"cols":N,"origin":[x,y],"cell_size":c},
///  "aps":{"<ap_id>":{"mean":[...],"variance":[...]}}}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioMap {
    pub grid: GridSpec,
    pub aps: BTreeMap<String, ApMap>,
}

impl RadioMap {
    pub fn new(grid: GridSpec) -> Self {
        RadioMap {
            grid,
            aps: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, ap: impl Into<String>, map: ApMap) -> Result<()> {
        let ap = ap.into();
        let n = self.grid.len();
        if map.mean.len() != n || map.variance.len() != n {
            return Err(Error::Shape(format!(
                "AP `{ap}` has {} means and {} variances for {n} cells",
                map.mean.len(),
                map.variance.len()
            )));
        }
        if map.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Validation(format!("AP `{ap}` has a non-finite mean")));
        }
        if map.variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Validation(format!(
                "AP `{ap}` has a non-positive variance"
            )));
        }
        self.aps.insert(ap, map);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut copy = RadioMap::new(self.grid);
        for (ap, m) in &self.aps {
            copy.insert(ap.clone(), m.clone())?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: RadioMap = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("radio maps always serialize")
    }
}
