//! Square lattice on the unit square and the field containers built on it.
//!
//! Pixels are stored row-major: index `i` is `(row, col) = (i / n, i % n)`.
//! The cell centre of `(row, col)` is `x = (col + 0.5) / n`, `y = (row + 0.5) / n`,
//! so `x` runs along columns and `y` along rows.

use crate::error::{Error, Result};

/// Frames whose empirical standard deviation falls at or below this are refused
/// by [`standardize`].
pub const SD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    n: usize,
}

impl GridSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n < 4 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 4 pixels per side, got {n}"
            )));
        }
        Ok(Self { n })
    }

    /// Pixels per side.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Total pixel count `n²`.
    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_width(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn cell_area(&self) -> f64 {
        let w = self.cell_width();
        w * w
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.n && col < self.n);
        row * self.n + col
    }

    pub fn row_col(&self, i: usize) -> (usize, usize) {
        (i / self.n, i % self.n)
    }

    /// Cell centre `(x, y)` of pixel `i`.
    pub fn center(&self, i: usize) -> (f64, f64) {
        let (row, col) = self.row_col(i);
        let w = self.cell_width();
        ((col as f64 + 0.5) * w, (row as f64 + 0.5) * w)
    }

    pub fn centers(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (xi, yi) = self.center(i);
        let (xj, yj) = self.center(j);
        ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt()
    }
}

/// A field of `n²` finite values on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "field has {} values, grid has {} pixels",
                values.len(),
                grid.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite field value {v}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new(grid, (0..grid.len()).map(&mut f).collect())
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.grid.index(row, col)]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population (divide-by-`n²`) standard deviation.
    pub fn sd(&self) -> f64 {
        let m = self.mean();
        let var =
            self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.values.len() as f64;
        var.sqrt()
    }

    /// Spatial transpose (swap rows and columns).
    pub fn transpose(&self) -> Field {
        let n = self.grid.n();
        let mut out = vec![0.0; self.values.len()];
        for r in 0..n {
            for c in 0..n {
                out[c * n + r] = self.values[r * n + c];
            }
        }
        Field { grid: self.grid, values: out }
    }
}

/// `tau` fields on one grid, ordered oldest to newest.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    frames: Vec<Field>,
}

impl FrameWindow {
    pub fn new(frames: Vec<Field>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a frame window needs tau >= 2 frames, got {}",
                frames.len()
            )));
        }
        let grid = frames[0].grid();
        if frames.iter().any(|f| f.grid() != grid) {
            return Err(Error::DimensionMismatch("window frames live on different grids".into()));
        }
        Ok(Self { frames })
    }

    pub fn tau(&self) -> usize {
        self.frames.len()
    }

    pub fn grid(&self) -> GridSpec {
        self.frames[0].grid()
    }

    pub fn frames(&self) -> &[Field] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Field] {
        &mut self.frames
    }

    pub fn newest(&self) -> &Field {
        self.frames.last().expect("window is never empty")
    }

    pub fn newest_mut(&mut self) -> &mut Field {
        self.frames.last_mut().expect("window is never empty")
    }

    /// Drop the oldest frame and append `next` as the newest.
    pub fn shifted(&self, next: Field) -> Result<FrameWindow> {
        if next.grid() != self.grid() {
            return Err(Error::DimensionMismatch("new frame lives on another grid".into()));
        }
        let mut frames = Vec::with_capacity(self.tau());
        frames.extend(self.frames[1..].iter().cloned());
        frames.push(next);
        Ok(FrameWindow { frames })
    }

    pub fn transpose(&self) -> FrameWindow {
        FrameWindow { frames: self.frames.iter().map(Field::transpose).collect() }
    }
}

/// Moments removed from one frame by [`standardize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardizationRecord {
    pub mean: f64,
    pub sd: f64,
}

impl StandardizationRecord {
    pub const IDENTITY: StandardizationRecord = StandardizationRecord { mean: 0.0, sd: 1.0 };

    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) || !sd.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid standardization ({mean}, {sd})")));
        }
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }
}

pub fn standardize(frame: &Field) -> Result<(Field, StandardizationRecord)> {
    let mean = frame.mean();
    let sd = frame.sd();
    if !(sd > SD_FLOOR) {
        return Err(Error::DegenerateFrame { sd });
    }
    let rec = StandardizationRecord { mean, sd };
    let values = frame.values.iter().map(|&v| rec.apply(v)).collect();
    Ok((Field { grid: frame.grid, values }, rec))
}

pub fn unstandardize(frame: &Field, rec: &StandardizationRecord) -> Result<Field> {
    if !(rec.sd > 0.0) {
        return Err(Error::InvalidArgument(format!("record sd must be positive, got {}", rec.sd)));
    }
    Field::new(frame.grid, frame.values.iter().map(|&v| rec.invert(v)).collect())
}

/// True for pixels at least `border` cells away from every edge.
pub fn interior_mask(grid: GridSpec, border: usize) -> Result<Vec<bool>> {
    let n = grid.n();
    if 2 * border >= n {
        return Err(Error::BorderTooLarge { border, n });
    }
    let inside = |k: usize| k >= border && k < n - border;
    Ok((0..grid.len())
        .map(|i| {
            let (r, c) = grid.row_col(i);
            inside(r) && inside(c)
        })
        .collect())
}
