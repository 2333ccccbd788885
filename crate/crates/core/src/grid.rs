//! Discretized 2-D densities over normalized (width, height).
//!
//! Cells are stored row-major: the row index runs along the second axis
//! (height) and the column index along the first axis (width). Densities are
//! attached to cell centers.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RESOLUTION: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub resolution: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::unit(DEFAULT_RESOLUTION)
    }
}

impl GridSpec {
    /// `resolution × resolution` cells covering the unit square.
    pub fn unit(resolution: usize) -> Self {
        GridSpec {
            resolution,
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && hi > lo;
        if self.resolution == 0 {
            return Err(Error::domain("grid resolution must be positive"));
        }
        if !ok_range(self.x_range) || !ok_range(self.y_range) {
            return Err(Error::domain("grid bounds must be finite with hi > lo"));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn cell_width(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) / self.resolution as f64
    }

    pub fn cell_height(&self) -> f64 {
        (self.y_range.1 - self.y_range.0) / self.resolution as f64
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.resolution + col
    }

    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.resolution, cell % self.resolution)
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let (row, col) = self.row_col(cell);
        [
            self.x_range.0 + (col as f64 + 0.5) * self.cell_width(),
            self.y_range.0 + (row as f64 + 0.5) * self.cell_height(),
        ]
    }

    /// Lower and upper corners of a cell.
    pub fn cell_bounds(&self, cell: usize) -> ([f64; 2], [f64; 2]) {
        let (row, col) = self.row_col(cell);
        let lo = [
            self.x_range.0 + col as f64 * self.cell_width(),
            self.y_range.0 + row as f64 * self.cell_height(),
        ];
        (lo, [lo[0] + self.cell_width(), lo[1] + self.cell_height()])
    }

    /// Cell containing a point; points outside the grid clamp to the border cell.
    pub fn cell_of(&self, point: [f64; 2]) -> usize {
        let g = self.resolution;
        let axis = |v: f64, (lo, hi): (f64, f64)| {
            let t = ((v - lo) / (hi - lo) * g as f64).floor();
            if t.is_nan() || t < 0.0 {
                0
            } else {
                (t as usize).min(g - 1)
            }
        };
        self.index(axis(point[1], self.y_range), axis(point[0], self.x_range))
    }
}

/// Probability mass over the cells of a [`GridSpec`]. Always sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    spec: GridSpec,
    mass: Vec<f64>,
}

impl DensityGrid {
    pub fn uniform(spec: GridSpec) -> Self {
        let m = spec.cell_count();
        DensityGrid {
            spec,
            mass: vec![1.0 / m as f64; m],
        }
    }

    /// Normalize non-negative cell values into probability mass.
    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.cell_count() {
            return Err(Error::domain(format!(
                "expected {} cell values, got {}",
                spec.cell_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain("cell values must be finite and non-negative"));
        }
        let total: f64 = values.iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptyGrid);
        }
        let mass = values.into_iter().map(|v| v / total).collect();
        Ok(DensityGrid { spec, mass })
    }

    /// All mass in a single cell.
    pub fn point_mass(spec: GridSpec, cell: usize) -> Self {
        let mut mass = vec![0.0; spec.cell_count()];
        mass[cell] = 1.0;
        DensityGrid { spec, mass }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// First cell holding the maximum mass.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &m) in self.mass.iter().enumerate() {
            if m > self.mass[best] {
                best = i;
            }
        }
        best
    }

    pub fn total_variation(&self, other: &DensityGrid) -> f64 {
        0.5 * self
            .mass
            .iter()
            .zip(&other.mass)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Draw a cell with probability equal to its mass.
    pub fn sample_cell<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random::<f64>() * self.total();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &m) in self.mass.iter().enumerate() {
            if m > 0.0 {
                acc += m;
                last_positive = i;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }

    /// Draw a point: a cell by mass, then uniform jitter inside that cell.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let cell = self.sample_cell(rng);
        let (lo, hi) = self.spec.cell_bounds(cell);
        [
            lo[0] + rng.random::<f64>() * (hi[0] - lo[0]),
            lo[1] + rng.random::<f64>() * (hi[1] - lo[1]),
        ]
    }

    /// Separable Gaussian blur (in cell units) followed by renormalization.
    pub fn smoothed(&self, sigma_cells: f64) -> Result<DensityGrid> {
        let values = crate::multipole::smooth_values(&self.mass, self.spec.resolution, sigma_cells)?;
        DensityGrid::from_values(self.spec, values)
    }

    /// Row-major CSV, one grid row per line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for row in self.mass.chunks(self.spec.resolution) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Binary 8-bit PGM scaled so the maximum cell is 255. Rows are written
    /// top-down with the largest height first.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        let g = self.spec.resolution;
        let max = self.mass.iter().cloned().fold(0.0, f64::max);
        write!(out, "P5\n{g} {g}\n255\n")?;
        let mut bytes = Vec::with_capacity(g * g);
        for row in (0..g).rev() {
            for col in 0..g {
                let v = self.mass[self.spec.index(row, col)];
                let level = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                bytes.push(level.clamp(0.0, 255.0) as u8);
            }
        }
        out.write_all(&bytes)?;
        Ok(())
    }
}

/// Grid produced by stochastic filtering: only non-zero cells are stored and
/// values are not yet normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDensityGrid {
    spec: GridSpec,
    cells: BTreeMap<usize, f64>,
}

impl SparseDensityGrid {
    pub fn from_dense(spec: GridSpec, values: &[f64]) -> Self {
        let cells = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, v)| (i, *v))
            .collect();
        SparseDensityGrid { spec, cells }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn cells(&self) -> &BTreeMap<usize, f64> {
        &self.cells
    }

    pub fn nonzero_count(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn to_dense_values(&self) -> Vec<f64> {
        let mut values = vec![0.0; self.spec.cell_count()];
        for (&i, &v) in &self.cells {
            values[i] = v;
        }
        values
    }

    /// Normalize without smoothing.
    pub fn normalized(&self) -> Result<DensityGrid> {
        DensityGrid::from_values(self.spec, self.to_dense_values())
    }
}
