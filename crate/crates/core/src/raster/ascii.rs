//! ESRI ASCII grid (`.asc`) reading and writing.
//!
//! The writer always emits the header keys in the order `ncols`, `nrows`,
//! `xllcorner`, `yllcorner`, `cellsize`, `NODATA_value`, followed by one line
//! per raster row, top row first. Numbers use the shortest representation
//! that round-trips exactly.

use super::{GridGeometry, ParcelMask, RasterGrid, DEFAULT_NODATA};
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Raw contents of an ASCII grid file.
#[derive(Clone, Debug, PartialEq)]
pub struct AsciiGrid {
    pub geometry: GridGeometry,
    pub nodata: f64,
    pub cells: Vec<f64>,
}

impl AsciiGrid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ncols = None;
        let mut nrows = None;
        let mut x = None;
        let mut y = None;
        let mut x_center = false;
        let mut y_center = false;
        let mut cellsize = None;
        let mut nodata = DEFAULT_NODATA;

        let mut tokens = text.split_whitespace().peekable();
        while let Some(&tok) = tokens.peek() {
            if tok.parse::<f64>().is_ok() {
                break;
            }
            let key = tok.to_ascii_lowercase();
            tokens.next();
            let value = tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("header key {tok} has no value")))?;
            let num: f64 = value
                .parse()
                .map_err(|_| Error::Parse(format!("bad header value {value} for {tok}")))?;
            match key.as_str() {
                "ncols" => ncols = Some(num as usize),
                "nrows" => nrows = Some(num as usize),
                "xllcorner" => x = Some(num),
                "yllcorner" => y = Some(num),
                "xllcenter" => {
                    x = Some(num);
                    x_center = true;
                }
                "yllcenter" => {
                    y = Some(num);
                    y_center = true;
                }
                "cellsize" => cellsize = Some(num),
                "nodata_value" => nodata = num,
                _ => return Err(Error::Parse(format!("unknown header key {tok}"))),
            }
        }

        let missing = |k: &str| Error::Parse(format!("missing header key {k}"));
        let cols = ncols.ok_or_else(|| missing("ncols"))?;
        let rows = nrows.ok_or_else(|| missing("nrows"))?;
        let cell_size = cellsize.ok_or_else(|| missing("cellsize"))?;
        let mut origin_x = x.ok_or_else(|| missing("xllcorner"))?;
        let mut origin_y = y.ok_or_else(|| missing("yllcorner"))?;
        if x_center {
            origin_x -= 0.5 * cell_size;
        }
        if y_center {
            origin_y -= 0.5 * cell_size;
        }

        let cells = tokens
            .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("bad cell value {t}"))))
            .collect::<Result<Vec<_>>>()?;
        if cells.len() != rows * cols {
            return Err(Error::Parse(format!(
                "expected {} cells, found {}",
                rows * cols,
                cells.len()
            )));
        }
        Ok(Self {
            geometry: GridGeometry::new(rows, cols, cell_size, origin_x, origin_y),
            nodata,
            cells,
        })
    }

    pub fn to_text(&self) -> String {
        let g = &self.geometry;
        let mut out = String::with_capacity(64 + g.len() * 8);
        let _ = writeln!(out, "ncols {}", g.cols);
        let _ = writeln!(out, "nrows {}", g.rows);
        let _ = writeln!(out, "xllcorner {}", g.origin_x);
        let _ = writeln!(out, "yllcorner {}", g.origin_y);
        let _ = writeln!(out, "cellsize {}", g.cell_size);
        let _ = writeln!(out, "NODATA_value {}", self.nodata);
        for row in self.cells.chunks(g.cols) {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

impl From<&RasterGrid> for AsciiGrid {
    fn from(r: &RasterGrid) -> Self {
        Self {
            geometry: *r.geometry(),
            nodata: r.nodata(),
            cells: r.values().to_vec(),
        }
    }
}

impl TryFrom<AsciiGrid> for RasterGrid {
    type Error = Error;
    fn try_from(g: AsciiGrid) -> Result<Self> {
        RasterGrid::new(g.geometry, g.cells, g.nodata)
    }
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<RasterGrid> {
    AsciiGrid::read(path)?.try_into()
}

pub fn write_raster(raster: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    AsciiGrid::from(raster).write(path)
}

/// Reads an integer-labelled parcel grid; nodata cells become label 0.
pub fn read_parcels(path: impl AsRef<Path>) -> Result<ParcelMask> {
    let g = AsciiGrid::read(path)?;
    let labels = g
        .cells
        .iter()
        .map(|&v| {
            if v == g.nodata || v <= 0.0 {
                Ok(0)
            } else if v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::Parse(format!("parcel label {v} is not a non-negative integer")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ParcelMask::new(g.geometry, labels)
}

pub fn write_parcels(parcels: &ParcelMask, path: impl AsRef<Path>) -> Result<()> {
    AsciiGrid {
        geometry: *parcels.geometry(),
        nodata: DEFAULT_NODATA,
        cells: parcels.labels().iter().map(|&l| l as f64).collect(),
    }
    .write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "ncols 3\nnrows 2\nxllcorner 100.5\nyllcorner 200\ncellsize 10\nNODATA_value -9999\n0.1 0.2 -9999\n0.4 0.5 0.6\n";

    #[test]
    fn header_order_is_exact() {
        let g = AsciiGrid::parse(SAMPLE).unwrap();
        assert_eq!(g.to_text(), SAMPLE);
    }

    #[test]
    fn parse_into_raster() {
        let r: RasterGrid = AsciiGrid::parse(SAMPLE).unwrap().try_into().unwrap();
        assert_eq!(r.rows(), 2);
        assert_eq!(r.cols(), 3);
        assert_eq!(r.get(0, 2), None);
        assert_eq!(r.get(1, 0), Some(0.4));
        assert_eq!(r.geometry().origin_x, 100.5);
    }

    #[test]
    fn lenient_header() {
        let text = "NCOLS 1\nNROWS 1\nXLLCENTER 5\nYLLCENTER 5\nCELLSIZE 10\n0.3\n";
        let g = AsciiGrid::parse(text).unwrap();
        assert_eq!(g.geometry.origin_x, 0.0);
        assert_eq!(g.nodata, DEFAULT_NODATA);
    }

    #[test]
    fn rejects_short_body() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n";
        assert!(matches!(AsciiGrid::parse(text), Err(Error::Parse(_))));
    }

    #[test]
    fn full_precision_round_trip() {
        let geometry = GridGeometry::new(1, 2, 10.0, 0.0, 0.0);
        let r = RasterGrid::new(geometry, vec![0.1 + 0.2, 1.0 / 3.0], DEFAULT_NODATA).unwrap();
        let back: RasterGrid = AsciiGrid::parse(&AsciiGrid::from(&r).to_text()).unwrap().try_into().unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn parcels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("parcels.asc");
        let p = ParcelMask::new(GridGeometry::new(2, 2, 10.0, 0.0, 0.0), vec![0, 1, 2, 2]).unwrap();
        write_parcels(&p, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with("0 1\n2 2\n"));
        assert_eq!(read_parcels(&path).unwrap(), p);
    }
}
