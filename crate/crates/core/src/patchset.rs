//! Paired 3x3x2 input tensors and UAV reference targets.
//!
//! A patch has two layers: the satellite NDVI neighbourhood of a pixel and
//! the normalized linear indices of the same footprint. Footprint cells that
//! leave the raster are zero in both layers.

use crate::error::{Error, Result};
use crate::raster::{ParcelMask, RasterGrid};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::{Read, Write};

/// Ring positions of a 3x3 patch, clockwise from the top-left corner.
pub const RING: [(usize, usize); 8] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (1, 2),
    (2, 2),
    (2, 1),
    (2, 0),
    (1, 0),
];

pub const DEFAULT_AUGMENT_STEPS: [usize; 7] = [1, 2, 3, 4, 5, 6, 7];

#[derive(Clone, Debug, PartialEq)]
pub struct PatchTensor {
    pub value_layer: [[f64; 3]; 3],
    pub location_layer: [[f64; 3]; 3],
    pub center_index: usize,
}

impl PatchTensor {
    /// The raw satellite pixel the patch is centered on.
    pub fn center_value(&self) -> f64 {
        self.value_layer[1][1]
    }

    pub fn ring(&self) -> [f64; 8] {
        RING.map(|(r, c)| self.value_layer[r][c])
    }

    /// Interleaved `(y, x, channel)` layout with the value layer as channel 0.
    pub fn to_hwc(&self) -> [f64; 18] {
        let mut out = [0.0; 18];
        for r in 0..3 {
            for c in 0..3 {
                out[(r * 3 + c) * 2] = self.value_layer[r][c];
                out[(r * 3 + c) * 2 + 1] = self.location_layer[r][c];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: PatchTensor,
    pub target: f64,
    pub augmented: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

/// 3x3 neighbourhood of `(row, col)` with zero padding.
pub fn extract_tensor(raster: &RasterGrid, row: usize, col: usize) -> Result<PatchTensor> {
    let (rows, cols) = (raster.rows(), raster.cols());
    if row >= rows || col >= cols {
        return Err(Error::IndexOutOfRange { row, col, rows, cols });
    }
    let total = (rows * cols) as f64;
    let mut value_layer = [[0.0; 3]; 3];
    let mut location_layer = [[0.0; 3]; 3];
    for dr in 0..3 {
        for dc in 0..3 {
            let r = row as isize + dr as isize - 1;
            let c = col as isize + dc as isize - 1;
            if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                continue;
            }
            let idx = r as usize * cols + c as usize;
            location_layer[dr][dc] = idx as f64 / total;
            value_layer[dr][dc] = raster.value(idx).unwrap_or(0.0);
        }
    }
    Ok(PatchTensor {
        value_layer,
        location_layer,
        center_index: row * cols + col,
    })
}

/// One sample per pixel where both rasters are valid (and, if given, inside a parcel).
pub fn build_dataset(
    sat: &RasterGrid,
    uav: &RasterGrid,
    parcels: Option<&ParcelMask>,
) -> Result<Vec<Sample>> {
    sat.geometry().ensure_matches(uav.geometry())?;
    if let Some(p) = parcels {
        sat.geometry().ensure_matches(p.geometry())?;
    }
    let geometry = *sat.geometry();
    let samples: Vec<Sample> = (0..geometry.len())
        .into_par_iter()
        .filter(|&i| sat.is_valid(i) && uav.is_valid(i))
        .filter(|&i| parcels.is_none_or(|p| p.label(i) != 0))
        .map(|i| {
            let (r, c) = geometry.row_col(i);
            let input = extract_tensor(sat, r, c)?;
            Ok(Sample {
                input,
                target: uav.values()[i],
                augmented: false,
            })
        })
        .collect::<Result<_>>()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(samples)
}

/// Ring-rotated copies of `sample`, one per step.
pub fn augment(sample: &Sample, steps: &[usize]) -> Result<Vec<Sample>> {
    if let Some(&bad) = steps.iter().find(|&&s| !(1..=7).contains(&s)) {
        return Err(Error::InvalidStep(bad));
    }
    let ring = sample.input.ring();
    Ok(steps
        .iter()
        .map(|&s| {
            let mut input = sample.input.clone();
            for (i, &(r, c)) in RING.iter().enumerate() {
                input.value_layer[r][c] = ring[(i + 8 - s) % 8];
            }
            Sample {
                input,
                target: sample.target,
                augmented: true,
            }
        })
        .collect())
}

/// Seeded train/test partition of the original (non-augmented) samples.
///
/// Each side is returned in ascending center-index order.
pub fn split(samples: &[Sample], test_fraction: f64, seed: u64) -> Result<DataSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    let mut originals: Vec<&Sample> = samples.iter().filter(|s| !s.augmented).collect();
    if originals.is_empty() {
        return Err(Error::EmptyDataset);
    }
    originals.sort_by_key(|s| s.input.center_index);
    originals.dedup_by_key(|s| s.input.center_index);
    let n = originals.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).min(n - 1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    originals.shuffle(&mut rng);
    let mut test: Vec<Sample> = originals[..n_test].iter().map(|&s| s.clone()).collect();
    let mut train: Vec<Sample> = originals[n_test..].iter().map(|&s| s.clone()).collect();
    test.sort_by_key(|s| s.input.center_index);
    train.sort_by_key(|s| s.input.center_index);
    Ok(DataSplit { train, test, seed })
}

impl DataSplit {
    /// Appends ring-rotated copies of every original training sample.
    pub fn augment_train(&mut self, steps: &[usize]) -> Result<()> {
        let mut extra = Vec::with_capacity(self.train.len() * steps.len());
        for s in self.train.iter().filter(|s| !s.augmented) {
            extra.extend(augment(s, steps)?);
        }
        self.train.extend(extra);
        Ok(())
    }
}

const LAYER_COLS: [&str; 9] = ["00", "01", "02", "10", "11", "12", "20", "21", "22"];

pub fn write_samples_csv<W: Write>(samples: &[Sample], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["center_index".to_string()];
    header.extend(LAYER_COLS.iter().map(|c| format!("v{c}")));
    header.extend(LAYER_COLS.iter().map(|c| format!("l{c}")));
    header.push("target".into());
    header.push("augmented".into());
    w.write_record(&header)?;
    for s in samples {
        let mut rec = Vec::with_capacity(21);
        rec.push(s.input.center_index.to_string());
        rec.extend(s.input.value_layer.iter().flatten().map(|v| v.to_string()));
        rec.extend(s.input.location_layer.iter().flatten().map(|v| v.to_string()));
        rec.push(s.target.to_string());
        rec.push(s.augmented.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 21 {
            return Err(Error::Parse(format!("sample row has {} columns, expected 21", rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad number {:?}", &rec[i])))
        };
        let mut value_layer = [[0.0; 3]; 3];
        let mut location_layer = [[0.0; 3]; 3];
        for k in 0..9 {
            value_layer[k / 3][k % 3] = num(1 + k)?;
            location_layer[k / 3][k % 3] = num(10 + k)?;
        }
        let center_index = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad center index {:?}", &rec[0])))?;
        let augmented = rec[20]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad flag {:?}", &rec[20])))?;
        out.push(Sample {
            input: PatchTensor { value_layer, location_layer, center_index },
            target: num(19)?,
            augmented,
        });
    }
    Ok(out)
}
