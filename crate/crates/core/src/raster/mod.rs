//! Georeferenced single-band rasters, NDVI computation, canopy masking and
//! aggregation of high-resolution imagery onto a coarser grid.
//!
//! Rasters are stored row-major with row 0 as the northernmost row, matching
//! the ESRI ASCII grid layout. The origin is the lower-left corner.

pub mod ascii;
mod ops;

pub use ops::{canopy_mask, compute_ndvi, downsample_to_grid, upsample_replicate, CanopyMask};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_NODATA: f64 = -9999.0;

/// Shape and placement of a raster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
    /// Meters per pixel.
    pub cell_size: f64,
    /// Lower-left corner, map units.
    pub origin_x: f64,
    pub origin_y: f64,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

impl GridGeometry {
    pub fn new(rows: usize, cols: usize, cell_size: f64, origin_x: f64, origin_y: f64) -> Self {
        Self { rows, cols, cell_size, origin_x, origin_y }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    #[inline]
    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Map coordinates of the center of pixel `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = self.origin_x + (col as f64 + 0.5) * self.cell_size;
        let y = self.origin_y + ((self.rows - row) as f64 - 0.5) * self.cell_size;
        (x, y)
    }

    /// Same shape, cell size and origin (to 1e-9 relative).
    pub fn matches(&self, other: &GridGeometry) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && close(self.cell_size, other.cell_size)
            && close(self.origin_x, other.origin_x)
            && close(self.origin_y, other.origin_y)
    }

    pub fn ensure_matches(&self, other: &GridGeometry) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!("{self:?} vs {other:?}")))
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::GeometryMismatch("raster has no pixels".into()));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::GeometryMismatch(format!(
                "cell size {} must be positive",
                self.cell_size
            )));
        }
        Ok(())
    }
}

/// A single-band raster with a validity mask.
///
/// Every pixel whose mask entry is `false` stores the nodata sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterGrid {
    geometry: GridGeometry,
    values: Vec<f64>,
    nodata: f64,
    mask: Vec<bool>,
}

impl RasterGrid {
    /// Builds a raster, treating pixels equal to `nodata` (or non-finite) as invalid.
    pub fn new(geometry: GridGeometry, values: Vec<f64>, nodata: f64) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.len() {
            return Err(Error::GeometryMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                geometry.rows,
                geometry.cols
            )));
        }
        let mask = values.iter().map(|&v| v != nodata && v.is_finite()).collect();
        let mut grid = Self { geometry, values, nodata, mask };
        grid.normalize_nodata();
        Ok(grid)
    }

    /// Builds a raster from explicit values and mask; masked-out pixels are
    /// overwritten with `nodata`.
    pub fn with_mask(
        geometry: GridGeometry,
        values: Vec<f64>,
        mask: Vec<bool>,
        nodata: f64,
    ) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.len() || mask.len() != geometry.len() {
            return Err(Error::GeometryMismatch(format!(
                "values/mask lengths {}/{} for a {}x{} grid",
                values.len(),
                mask.len(),
                geometry.rows,
                geometry.cols
            )));
        }
        let mut grid = Self { geometry, values, nodata, mask };
        grid.normalize_nodata();
        Ok(grid)
    }

    /// A raster where every pixel is nodata.
    pub fn empty(geometry: GridGeometry, nodata: f64) -> Result<Self> {
        let n = geometry.len();
        Self::with_mask(geometry, vec![nodata; n], vec![false; n], nodata)
    }

    pub fn filled(geometry: GridGeometry, value: f64) -> Result<Self> {
        let n = geometry.len();
        Self::with_mask(geometry, vec![value; n], vec![true; n], DEFAULT_NODATA)
    }

    fn normalize_nodata(&mut self) {
        for (v, &ok) in self.values.iter_mut().zip(&self.mask) {
            if !ok || !v.is_finite() {
                *v = self.nodata;
            }
        }
        for (ok, v) in self.mask.iter_mut().zip(&self.values) {
            if !v.is_finite() {
                *ok = false;
            }
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn rows(&self) -> usize {
        self.geometry.rows
    }

    pub fn cols(&self) -> usize {
        self.geometry.cols
    }

    pub fn nodata(&self) -> f64 {
        self.nodata
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn is_valid(&self, index: usize) -> bool {
        self.mask[index]
    }

    /// Value at a linear index, `None` for nodata.
    #[inline]
    pub fn value(&self, index: usize) -> Option<f64> {
        if self.mask[index] {
            Some(self.values[index])
        } else {
            None
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        if row >= self.rows() || col >= self.cols() {
            return None;
        }
        self.value(self.geometry.index(row, col))
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Valid values in row-major order.
    pub fn valid_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.mask)
            .filter_map(|(&v, &m)| m.then_some(v))
            .collect()
    }

    /// Applies `f` to every valid pixel; nodata stays nodata.
    pub fn map_valid(&self, f: impl Fn(f64) -> f64) -> RasterGrid {
        let values = self
            .values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { f(v) } else { self.nodata })
            .collect();
        RasterGrid {
            geometry: self.geometry,
            values,
            nodata: self.nodata,
            mask: self.mask.clone(),
        }
    }
}

/// Per-pixel parcel identifiers over a raster's grid (0 = outside all parcels).
#[derive(Clone, Debug, PartialEq)]
pub struct ParcelMask {
    geometry: GridGeometry,
    labels: Vec<u32>,
}

impl ParcelMask {
    pub fn new(geometry: GridGeometry, labels: Vec<u32>) -> Result<Self> {
        geometry.validate()?;
        if labels.len() != geometry.len() {
            return Err(Error::GeometryMismatch(format!(
                "{} labels for a {}x{} grid",
                labels.len(),
                geometry.rows,
                geometry.cols
            )));
        }
        Ok(Self { geometry, labels })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> u32 {
        self.labels[index]
    }

    /// Distinct non-zero parcel ids in ascending order.
    pub fn parcel_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
