use super::{GridGeometry, RasterGrid};
use crate::error::{Error, Result};

/// Boolean canopy selection over a high-resolution grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CanopyMask {
    geometry: GridGeometry,
    mask: Vec<bool>,
}

impl CanopyMask {
    pub fn new(geometry: GridGeometry, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != geometry.len() {
            return Err(Error::GeometryMismatch(format!(
                "{} mask entries for a {}x{} grid",
                mask.len(),
                geometry.rows,
                geometry.cols
            )));
        }
        Ok(Self { geometry, mask })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-pixel `(nir - red) / (nir + red)`.
///
/// A pixel becomes nodata when either band is nodata or negative, or when
/// `nir + red == 0`.
pub fn compute_ndvi(red: &RasterGrid, nir: &RasterGrid) -> Result<RasterGrid> {
    red.geometry().ensure_matches(nir.geometry())?;
    let n = red.geometry().len();
    let mut values = vec![red.nodata(); n];
    let mut mask = vec![false; n];
    for i in 0..n {
        if let (Some(r), Some(ni)) = (red.value(i), nir.value(i)) {
            let sum = ni + r;
            if r >= 0.0 && ni >= 0.0 && sum > 0.0 {
                values[i] = ((ni - r) / sum).clamp(-1.0, 1.0);
                mask[i] = true;
            }
        }
    }
    RasterGrid::with_mask(*red.geometry(), values, mask, red.nodata())
}

/// Pixels that are valid and at or above `threshold`.
pub fn canopy_mask(ndvi_hr: &RasterGrid, threshold: f64) -> Result<CanopyMask> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!(
            "canopy threshold {threshold} outside [-1, 1]"
        )));
    }
    let mask = (0..ndvi_hr.geometry().len())
        .map(|i| ndvi_hr.value(i).is_some_and(|v| v >= threshold))
        .collect();
    CanopyMask::new(*ndvi_hr.geometry(), mask)
}

/// Integer offsets describing how a fine grid nests in a coarse one.
struct Nesting {
    ratio: usize,
    /// Fine-pixel offset of the fine origin from the coarse origin.
    col_offset: i64,
    row_offset_from_bottom: i64,
}

fn integral(v: f64) -> Option<i64> {
    let r = v.round();
    ((v - r).abs() <= 1e-6).then_some(r as i64)
}

fn nesting(fine: &GridGeometry, coarse: &GridGeometry) -> Result<Nesting> {
    fine.validate()?;
    coarse.validate()?;
    let ratio = integral(coarse.cell_size / fine.cell_size)
        .filter(|&r| r >= 1)
        .ok_or_else(|| {
            Error::GeometryMismatch(format!(
                "cell size {} is not an integer multiple of {}",
                coarse.cell_size, fine.cell_size
            ))
        })?;
    let col_offset = integral((fine.origin_x - coarse.origin_x) / fine.cell_size);
    let row_offset = integral((fine.origin_y - coarse.origin_y) / fine.cell_size);
    match (col_offset, row_offset) {
        (Some(col_offset), Some(row_offset_from_bottom)) => Ok(Nesting {
            ratio: ratio as usize,
            col_offset,
            row_offset_from_bottom,
        }),
        _ => Err(Error::GeometryMismatch(
            "grid origins are not aligned on the fine pixel lattice".into(),
        )),
    }
}

impl Nesting {
    /// Coarse `(row, col)` containing the center of fine pixel `(row, col)`.
    fn coarse_cell(
        &self,
        fine: &GridGeometry,
        coarse: &GridGeometry,
        row: usize,
        col: usize,
    ) -> Option<(usize, usize)> {
        let ratio = self.ratio as i64;
        let c = (self.col_offset + col as i64).div_euclid(ratio);
        let from_bottom = (self.row_offset_from_bottom + (fine.rows - 1 - row) as i64).div_euclid(ratio);
        if c < 0 || from_bottom < 0 || c >= coarse.cols as i64 || from_bottom >= coarse.rows as i64 {
            return None;
        }
        Some((coarse.rows - 1 - from_bottom as usize, c as usize))
    }
}

/// Mean of canopy pixels whose centers fall in each target cell.
///
/// Cells receiving no valid canopy pixel are nodata.
pub fn downsample_to_grid(
    ndvi_hr: &RasterGrid,
    canopy: &CanopyMask,
    target: &GridGeometry,
) -> Result<RasterGrid> {
    ndvi_hr.geometry().ensure_matches(canopy.geometry())?;
    let fine = ndvi_hr.geometry();
    let nest = nesting(fine, target)?;
    let mut sums = vec![0.0; target.len()];
    let mut counts = vec![0usize; target.len()];
    for row in 0..fine.rows {
        for col in 0..fine.cols {
            let i = fine.index(row, col);
            if !canopy.mask()[i] {
                continue;
            }
            let Some(v) = ndvi_hr.value(i) else { continue };
            if let Some((r, c)) = nest.coarse_cell(fine, target, row, col) {
                let t = target.index(r, c);
                sums[t] += v;
                counts[t] += 1;
            }
        }
    }
    let nodata = ndvi_hr.nodata();
    let mask: Vec<bool> = counts.iter().map(|&n| n > 0).collect();
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { nodata })
        .collect();
    RasterGrid::with_mask(*target, values, mask, nodata)
}

/// Replicates each coarse cell onto the fine pixels whose centers it contains.
pub fn upsample_replicate(coarse: &RasterGrid, fine: &GridGeometry) -> Result<RasterGrid> {
    let nest = nesting(fine, coarse.geometry())?;
    let nodata = coarse.nodata();
    let mut values = vec![nodata; fine.len()];
    let mut mask = vec![false; fine.len()];
    for row in 0..fine.rows {
        for col in 0..fine.cols {
            if let Some((r, c)) = nest.coarse_cell(fine, coarse.geometry(), row, col) {
                if let Some(v) = coarse.get(r, c) {
                    let i = fine.index(row, col);
                    values[i] = v;
                    mask[i] = true;
                }
            }
        }
    }
    RasterGrid::with_mask(*fine, values, mask, nodata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::DEFAULT_NODATA;

    fn geom(rows: usize, cols: usize, cell: f64) -> GridGeometry {
        GridGeometry::new(rows, cols, cell, 1000.0, 2000.0)
    }

    fn single(v: f64) -> RasterGrid {
        RasterGrid::filled(geom(1, 1, 10.0), v).unwrap()
    }

    #[test]
    fn ndvi_examples() {
        let ndvi = |r, n| compute_ndvi(&single(r), &single(n)).unwrap().get(0, 0).unwrap();
        assert_eq!(ndvi(0.3, 0.3), 0.0);
        assert_eq!(ndvi(0.0, 0.4), 1.0);
        assert!((ndvi(0.1, 0.5) - 0.4 / 0.6).abs() < 1e-15);
    }

    #[test]
    fn ndvi_zero_sum_and_nodata() {
        let out = compute_ndvi(&single(0.0), &single(0.0)).unwrap();
        assert_eq!(out.get(0, 0), None);
        assert_eq!(out.values()[0], DEFAULT_NODATA);

        let red = RasterGrid::new(geom(1, 2, 10.0), vec![DEFAULT_NODATA, 0.2], DEFAULT_NODATA).unwrap();
        let nir = RasterGrid::filled(geom(1, 2, 10.0), 0.6).unwrap();
        let out = compute_ndvi(&red, &nir).unwrap();
        assert_eq!(out.get(0, 0), None);
        assert!((out.get(0, 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ndvi_geometry_mismatch() {
        let a = RasterGrid::filled(geom(2, 2, 10.0), 0.1).unwrap();
        let b = RasterGrid::filled(geom(2, 3, 10.0), 0.1).unwrap();
        assert!(matches!(compute_ndvi(&a, &b), Err(Error::GeometryMismatch(_))));
        let c = RasterGrid::filled(GridGeometry::new(2, 2, 10.0, 0.0, 0.0), 0.1).unwrap();
        assert!(matches!(compute_ndvi(&a, &c), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn canopy_threshold_examples() {
        let all = |v| canopy_mask(&RasterGrid::filled(geom(2, 2, 1.0), v).unwrap(), 0.5).unwrap();
        assert!(all(0.8).mask().iter().all(|&m| m));
        assert!(all(0.1).mask().iter().all(|&m| !m));
        let r = RasterGrid::new(geom(1, 3, 1.0), vec![0.4, 0.5, 0.6], DEFAULT_NODATA).unwrap();
        assert_eq!(canopy_mask(&r, 0.5).unwrap().mask(), &[false, true, true]);
    }

    #[test]
    fn canopy_mask_preserves_geometry() {
        let r = RasterGrid::filled(geom(3, 4, 0.5), 0.7).unwrap();
        assert_eq!(canopy_mask(&r, 0.5).unwrap().geometry(), r.geometry());
    }

    #[test]
    fn downsample_constant_block() {
        let hr = RasterGrid::filled(geom(10, 10, 1.0), 0.8).unwrap();
        let canopy = canopy_mask(&hr, 0.5).unwrap();
        let out = downsample_to_grid(&hr, &canopy, &geom(1, 1, 10.0)).unwrap();
        assert!((out.get(0, 0).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn downsample_masks_out_soil() {
        let values: Vec<f64> = (0..100).map(|i| if i % 10 < 5 { 0.8 } else { 0.1 }).collect();
        let hr = RasterGrid::new(geom(10, 10, 1.0), values, DEFAULT_NODATA).unwrap();
        let canopy = canopy_mask(&hr, 0.5).unwrap();
        let out = downsample_to_grid(&hr, &canopy, &geom(1, 1, 10.0)).unwrap();
        assert!((out.get(0, 0).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn downsample_empty_cell_is_nodata() {
        let hr = RasterGrid::filled(geom(10, 20, 1.0), 0.1).unwrap();
        let canopy = canopy_mask(&hr, 0.5).unwrap();
        let out = downsample_to_grid(&hr, &canopy, &geom(1, 2, 10.0)).unwrap();
        assert_eq!(out.valid_count(), 0);
    }

    #[test]
    fn downsample_orientation() {
        // Top-left fine block maps to the top-left coarse cell.
        let mut values = vec![0.6; 16];
        for r in 0..2 {
            for c in 0..2 {
                values[r * 4 + c] = 0.9;
            }
        }
        let hr = RasterGrid::new(geom(4, 4, 1.0), values, DEFAULT_NODATA).unwrap();
        let canopy = canopy_mask(&hr, 0.5).unwrap();
        let out = downsample_to_grid(&hr, &canopy, &geom(2, 2, 2.0)).unwrap();
        assert!((out.get(0, 0).unwrap() - 0.9).abs() < 1e-12);
        assert!((out.get(1, 1).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn downsample_offset_fine_grid() {
        // Fine grid covering only the upper-right coarse cell.
        let fine = GridGeometry::new(2, 2, 1.0, 1002.0, 2002.0);
        let hr = RasterGrid::filled(fine, 0.7).unwrap();
        let canopy = canopy_mask(&hr, 0.5).unwrap();
        let out = downsample_to_grid(&hr, &canopy, &geom(2, 2, 2.0)).unwrap();
        assert_eq!(out.get(0, 0), None);
        assert!((out.get(0, 1).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(out.valid_count(), 1);
    }

    #[test]
    fn downsample_rejects_non_nesting() {
        let hr = RasterGrid::filled(geom(10, 10, 1.0), 0.8).unwrap();
        let canopy = canopy_mask(&hr, 0.5).unwrap();
        assert!(matches!(
            downsample_to_grid(&hr, &canopy, &geom(1, 1, 2.5)),
            Err(Error::GeometryMismatch(_))
        ));
        let shifted = GridGeometry::new(1, 1, 10.0, 1000.5, 2000.0);
        assert!(matches!(
            downsample_to_grid(&hr, &canopy, &shifted),
            Err(Error::GeometryMismatch(_))
        ));
    }
}
