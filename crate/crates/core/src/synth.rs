//! Deterministic synthetic vineyard: vine rows over soil on a fine grid,
//! a smooth vigor field, seasonal scaling, and coarse mixed-pixel cells.

use crate::error::{Error, Result};
use crate::raster::{downsample_to_grid, CanopyMask, GridGeometry, ParcelMask, RasterGrid, DEFAULT_NODATA};
use crate::vigor::ClassMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A Gaussian bump in field coordinates, where (0, 0) is the south-west
/// corner and (1, 1) the north-east corner of the field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub amplitude: f64,
}

/// Rectangular parcel in coarse-cell units, rows counted from the top.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParcelRect {
    pub id: u32,
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSpec {
    pub sat_rows: usize,
    pub sat_cols: usize,
    pub sat_cell_size: f64,
    /// Fine pixels per coarse cell along each axis.
    pub ratio: usize,
    pub origin_x: f64,
    pub origin_y: f64,
    /// Distance between vine rows, in fine pixels.
    pub row_spacing: usize,
    /// Canopy width across the row, in fine pixels.
    pub canopy_width: usize,
    /// Length of the vine segments that may be missing, in fine pixels.
    pub segment_length: usize,
    /// Probability that a segment has no canopy.
    pub gap_probability: f64,
    pub soil_ndvi: f64,
    pub vigor_min: f64,
    pub vigor_max: f64,
    pub bumps: Vec<Bump>,
    pub phenology: Vec<f64>,
    pub noise_sigma: f64,
    pub parcels: Vec<ParcelRect>,
    pub seed: u64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            sat_rows: 24,
            sat_cols: 24,
            sat_cell_size: 10.0,
            ratio: 10,
            origin_x: 0.0,
            origin_y: 0.0,
            row_spacing: 3,
            canopy_width: 1,
            segment_length: 5,
            gap_probability: 0.25,
            soil_ndvi: 0.05,
            vigor_min: 0.3,
            vigor_max: 0.95,
            bumps: vec![
                Bump { x: 0.25, y: 0.7, radius: 0.22, amplitude: 1.0 },
                Bump { x: 0.75, y: 0.3, radius: 0.28, amplitude: 0.8 },
                Bump { x: 0.6, y: 0.85, radius: 0.15, amplitude: -0.5 },
            ],
            phenology: vec![0.7, 1.0, 1.05, 0.85],
            noise_sigma: 0.015,
            parcels: vec![
                ParcelRect { id: 1, row: 1, col: 1, rows: 6, cols: 21 },
                ParcelRect { id: 2, row: 14, col: 0, rows: 9, cols: 11 },
                ParcelRect { id: 3, row: 8, col: 12, rows: 6, cols: 12 },
            ],
            seed: 7,
        }
    }
}

/// Roman numeral label of a zero-based period index.
pub fn period_name(period: usize) -> String {
    const NAMES: [&str; 12] = ["I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI", "XII"];
    NAMES.get(period).map_or_else(|| (period + 1).to_string(), |s| s.to_string())
}

/// Inverse of [`period_name`].
pub fn parse_period(name: &str) -> Option<usize> {
    (0..12).find(|&p| period_name(p).eq_ignore_ascii_case(name)).or_else(|| {
        name.parse::<usize>().ok().filter(|&n| n >= 1).map(|n| n - 1)
    })
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidSpec(what));
        if self.sat_rows == 0 || self.sat_cols == 0 || self.ratio == 0 {
            return bad("grid dimensions and ratio must be positive".into());
        }
        if !(self.sat_cell_size > 0.0 && self.sat_cell_size.is_finite()) {
            return bad(format!("cell size {}", self.sat_cell_size));
        }
        if self.row_spacing == 0 || self.canopy_width == 0 || self.canopy_width > self.row_spacing {
            return bad(format!(
                "canopy width {} must lie in 1..={} (row spacing)",
                self.canopy_width, self.row_spacing
            ));
        }
        if self.segment_length == 0 || !(0.0..1.0).contains(&self.gap_probability) {
            return bad("segment length must be positive and gap probability in [0, 1)".into());
        }
        for (name, v) in [("soil", self.soil_ndvi), ("vigor_min", self.vigor_min), ("vigor_max", self.vigor_max)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} NDVI {v} outside [0, 1]"));
            }
        }
        if self.vigor_min > self.vigor_max {
            return bad("vigor_min exceeds vigor_max".into());
        }
        if self.phenology.is_empty() || self.phenology.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return bad("phenology multipliers must be positive".into());
        }
        if self.phenology.iter().any(|p| p * self.vigor_max > 1.0) {
            return bad("vigor times phenology exceeds 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        if self.bumps.iter().any(|b| b.radius.is_nan() || b.radius <= 0.0) {
            return bad("bump radius must be positive".into());
        }
        for p in &self.parcels {
            if p.id == 0 || p.rows == 0 || p.cols == 0 || p.row + p.rows > self.sat_rows || p.col + p.cols > self.sat_cols {
                return bad(format!("parcel {} does not fit the grid", p.id));
            }
        }
        Ok(())
    }

    pub fn sat_geometry(&self) -> GridGeometry {
        GridGeometry::new(self.sat_rows, self.sat_cols, self.sat_cell_size, self.origin_x, self.origin_y)
    }

    pub fn uav_geometry(&self) -> GridGeometry {
        GridGeometry::new(
            self.sat_rows * self.ratio,
            self.sat_cols * self.ratio,
            self.sat_cell_size / self.ratio as f64,
            self.origin_x,
            self.origin_y,
        )
    }

    pub fn periods(&self) -> usize {
        self.phenology.len()
    }

    /// Parcel labels on the coarse grid; later rectangles win overlaps.
    pub fn parcel_mask(&self) -> Result<ParcelMask> {
        self.validate()?;
        let g = self.sat_geometry();
        let mut labels = vec![0u32; g.len()];
        for p in &self.parcels {
            for r in p.row..p.row + p.rows {
                for c in p.col..p.col + p.cols {
                    labels[g.index(r, c)] = p.id;
                }
            }
        }
        ParcelMask::new(g, labels)
    }

    /// Fine-grid canopy layout, identical in every period.
    pub fn canopy(&self) -> Result<CanopyMask> {
        self.validate()?;
        let g = self.uav_geometry();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let segments = g.cols.div_ceil(self.segment_length);
        let mut mask = vec![false; g.len()];
        for r in 0..g.rows {
            if r % self.row_spacing >= self.canopy_width {
                continue;
            }
            // One draw per vine segment, shared by the rows of a vine.
            if r % self.row_spacing == 0 {
                let present: Vec<bool> =
                    (0..segments).map(|_| !rng.random_bool(self.gap_probability)).collect();
                for c in 0..g.cols {
                    mask[g.index(r, c)] = present[c / self.segment_length];
                }
            } else {
                for c in 0..g.cols {
                    mask[g.index(r, c)] = mask[g.index(r - 1, c)];
                }
            }
        }
        CanopyMask::new(g, mask)
    }

    /// Vigor at every fine pixel, rescaled to `[vigor_min, vigor_max]`.
    pub fn vigor(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let g = self.uav_geometry();
        let raw: Vec<f64> = (0..g.len())
            .map(|i| {
                let (r, c) = g.row_col(i);
                let x = (c as f64 + 0.5) / g.cols as f64;
                let y = 1.0 - (r as f64 + 0.5) / g.rows as f64;
                self.bumps
                    .iter()
                    .map(|b| b.amplitude * (-((x - b.x).powi(2) + (y - b.y).powi(2)) / (2.0 * b.radius * b.radius)).exp())
                    .sum()
            })
            .collect();
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = self.vigor_max - self.vigor_min;
        Ok(raw
            .iter()
            .map(|v| if hi > lo { self.vigor_min + span * (v - lo) / (hi - lo) } else { self.vigor_max })
            .collect())
    }

    /// Canopy area fraction per coarse cell.
    pub fn canopy_fraction(&self) -> Result<Vec<f64>> {
        let canopy = self.canopy()?;
        let g = self.uav_geometry();
        let sat = self.sat_geometry();
        let mut counts = vec![0usize; sat.len()];
        for i in (0..g.len()).filter(|&i| canopy.mask()[i]) {
            let (r, c) = g.row_col(i);
            counts[sat.index(r / self.ratio, c / self.ratio)] += 1;
        }
        let per_cell = (self.ratio * self.ratio) as f64;
        Ok(counts.into_iter().map(|n| n as f64 / per_cell).collect())
    }

    /// Vigor classes 1-3 by tertiles of the mean vigor of each coarse cell.
    pub fn truth_classes(&self) -> Result<ClassMap> {
        let vigor = self.vigor()?;
        let g = self.uav_geometry();
        let sat = self.sat_geometry();
        let mut sums = vec![0.0; sat.len()];
        for (i, v) in vigor.iter().enumerate() {
            let (r, c) = g.row_col(i);
            sums[sat.index(r / self.ratio, c / self.ratio)] += v;
        }
        let per_cell = (self.ratio * self.ratio) as f64;
        let means: Vec<f64> = sums.iter().map(|s| s / per_cell).collect();
        let mut sorted = means.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let (q1, q2) = (sorted[n / 3], sorted[(2 * n) / 3]);
        let labels = means.iter().map(|&m| 1 + u8::from(m >= q1) + u8::from(m >= q2)).collect();
        let centre = |lo: u8| {
            let members: Vec<f64> = means.iter().copied().filter(|&m| 1 + u8::from(m >= q1) + u8::from(m >= q2) == lo).collect();
            members.iter().sum::<f64>() / members.len().max(1) as f64
        };
        ClassMap::new(sat, labels, vec![centre(1), centre(2), centre(3)])
    }
}

/// One period of the synthetic field.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPeriod {
    pub period: usize,
    /// Fine-grid NDVI of canopy and soil.
    pub uav: RasterGrid,
    /// Coarse mixed-pixel NDVI.
    pub sat: RasterGrid,
    pub truth: ClassMap,
    pub canopy: CanopyMask,
}

/// Fine pixels: canopy at vigor times phenology, soil elsewhere, each with
/// Gaussian noise and clamped to [-1, 1]. Coarse cells: the plain mean of
/// their fine pixels plus noise.
pub fn generate(spec: &FieldSpec, period: usize) -> Result<SyntheticPeriod> {
    spec.validate()?;
    if period >= spec.periods() {
        return Err(Error::InvalidSpec(format!("period {period} of {}", spec.periods())));
    }
    let canopy = spec.canopy()?;
    let vigor = spec.vigor()?;
    let uav_geom = spec.uav_geometry();
    let sat_geom = spec.sat_geometry();
    let phen = spec.phenology[period];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(period as u64 + 1);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let uav_values: Vec<f64> = (0..uav_geom.len())
        .map(|i| {
            let clean = if canopy.mask()[i] { vigor[i] * phen } else { spec.soil_ndvi };
            (clean + noise.sample(&mut rng)).clamp(-1.0, 1.0)
        })
        .collect();
    let uav = RasterGrid::new(uav_geom, uav_values, DEFAULT_NODATA)?;
    let everything = CanopyMask::new(uav_geom, vec![true; uav_geom.len()])?;
    let mixed = downsample_to_grid(&uav, &everything, &sat_geom)?;
    let sat = RasterGrid::new(
        sat_geom,
        mixed.values().iter().map(|v| (v + noise.sample(&mut rng)).clamp(-1.0, 1.0)).collect(),
        DEFAULT_NODATA,
    )?;
    Ok(SyntheticPeriod { period, uav, sat, truth: spec.truth_classes()?, canopy })
}

/// Red and near-infrared reflectances that reproduce `ndvi` exactly up to
/// rounding, with NIR fixed at `nir`.
pub fn bands_from_ndvi(ndvi: &RasterGrid, nir: f64) -> (RasterGrid, RasterGrid) {
    (ndvi.map_valid(|v| nir * (1.0 - v) / (1.0 + v)), ndvi.map_valid(|_| nir))
}
