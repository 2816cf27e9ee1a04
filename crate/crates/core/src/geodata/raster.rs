//! ESRI ASCII grid rasters and zonal aggregation onto grid cells.

use serde::{Deserialize, Serialize};

use super::{GeoPoint, GridCell};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    /// Upper-left corner.
    pub origin: GeoPoint,
    pub cell_size: f64,
    pub ncols: usize,
    pub nrows: usize,
    pub nodata: f64,
    /// Row-major, first row is the northernmost.
    pub values: Vec<f64>,
}

impl RasterGrid {
    pub fn new(origin: GeoPoint, cell_size: f64, ncols: usize, nrows: usize, nodata: f64, values: Vec<f64>) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::argument("raster cell size must be positive"));
        }
        if values.len() != ncols * nrows {
            return Err(Error::argument(format!(
                "raster has {} values, expected {ncols} x {nrows}",
                values.len()
            )));
        }
        Ok(RasterGrid { origin, cell_size, ncols, nrows, nodata, values })
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.values[row * self.ncols + col];
        (v != self.nodata && v.is_finite()).then_some(v)
    }
}

/// Parses the ESRI ASCII grid format (`ncols`, `nrows`, `xllcorner|xllcenter`,
/// `yllcorner|yllcenter`, `cellsize`, optional `NODATA_value`, then rows).
pub fn parse_esri_ascii(text: &str) -> Result<RasterGrid> {
    let mut ncols = None;
    let mut nrows = None;
    let mut xll = None;
    let mut yll = None;
    let mut centered = (false, false);
    let mut cellsize = None;
    let mut nodata = -9999.0;
    let mut values = Vec::new();
    let mut in_header = true;

    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: lineno + 1, column: 1, message: msg };
        if in_header {
            let mut parts = trimmed.split_whitespace();
            let key = parts.next().unwrap_or("").to_ascii_lowercase();
            if key.starts_with(|c: char| c.is_ascii_alphabetic()) {
                let val = parts.next().ok_or_else(|| err(format!("header `{key}` without value")))?;
                let num: f64 = val.parse().map_err(|_| err(format!("bad header value `{val}`")))?;
                match key.as_str() {
                    "ncols" => ncols = Some(num as usize),
                    "nrows" => nrows = Some(num as usize),
                    "xllcorner" => xll = Some(num),
                    "xllcenter" => {
                        xll = Some(num);
                        centered.0 = true;
                    }
                    "yllcorner" => yll = Some(num),
                    "yllcenter" => {
                        yll = Some(num);
                        centered.1 = true;
                    }
                    "cellsize" => cellsize = Some(num),
                    "nodata_value" => nodata = num,
                    _ => return Err(err(format!("unknown header key `{key}`"))),
                }
                continue;
            }
            in_header = false;
        }
        for tok in trimmed.split_whitespace() {
            values.push(tok.parse::<f64>().map_err(|_| err(format!("bad cell value `{tok}`")))?);
        }
    }

    let missing = |k: &str| Error::Format(format!("ESRI ASCII grid missing `{k}`"));
    let ncols = ncols.ok_or_else(|| missing("ncols"))?;
    let nrows = nrows.ok_or_else(|| missing("nrows"))?;
    let cs = cellsize.ok_or_else(|| missing("cellsize"))?;
    let mut x = xll.ok_or_else(|| missing("xllcorner"))?;
    let mut y = yll.ok_or_else(|| missing("yllcorner"))?;
    if centered.0 {
        x -= cs / 2.0;
    }
    if centered.1 {
        y -= cs / 2.0;
    }
    if values.len() != ncols * nrows {
        return Err(Error::Format(format!(
            "ESRI ASCII grid has {} values, header says {ncols} x {nrows}",
            values.len()
        )));
    }
    RasterGrid::new(GeoPoint::new(x, y + nrows as f64 * cs), cs, ncols, nrows, nodata, values)
}

/// Area-weighted mean of the raster cells overlapping `cell`, skipping
/// nodata. `None` when nothing valid overlaps.
pub fn zonal_mean(raster: &RasterGrid, cell: &GridCell) -> Option<f64> {
    let b = &cell.bbox;
    let cs = raster.cell_size;
    let j0 = ((b.west - raster.origin.lon) / cs).floor().max(0.0) as usize;
    let j1 = (((b.east - raster.origin.lon) / cs).ceil().max(0.0) as usize).min(raster.ncols);
    let i0 = ((raster.origin.lat - b.north) / cs).floor().max(0.0) as usize;
    let i1 = (((raster.origin.lat - b.south) / cs).ceil().max(0.0) as usize).min(raster.nrows);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in i0..i1 {
        let north = raster.origin.lat - i as f64 * cs;
        let south = north - cs;
        let (s, n) = (south.max(b.south), north.min(b.north));
        if n <= s {
            continue;
        }
        // spherical zone area is proportional to Δlon · Δsin(lat)
        let dsin = n.to_radians().sin() - s.to_radians().sin();
        for j in j0..j1 {
            let west = raster.origin.lon + j as f64 * cs;
            let (w, e) = (west.max(b.west), (west + cs).min(b.east));
            if e <= w {
                continue;
            }
            if let Some(v) = raster.get(i, j) {
                let wgt = (e - w) * dsin;
                num += wgt * v;
                den += wgt;
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{cell_at, Bbox};

    #[test]
    fn parse_header_variants() {
        let text = "ncols 2\nnrows 2\nxllcenter 0.5\nyllcenter 0.5\ncellsize 1\nNODATA_value -1\n1 2\n3 -1\n";
        let r = parse_esri_ascii(text).unwrap();
        assert_eq!(r.origin, GeoPoint::new(0.0, 2.0));
        assert_eq!(r.get(0, 1), Some(2.0));
        assert_eq!(r.get(1, 1), None);
    }

    #[test]
    fn wrong_value_count() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n";
        assert!(matches!(parse_esri_ascii(text), Err(Error::Format(_))));
        assert!(matches!(parse_esri_ascii("ncols x\n"), Err(Error::Parse { line: 1, .. })));
    }

    fn uniform(v: f64, around: &GridCell) -> RasterGrid {
        let cs = 0.003;
        let origin = GeoPoint::new(around.bbox.west - 0.004, around.bbox.north + 0.005);
        RasterGrid::new(origin, cs, 8, 8, -9999.0, vec![v; 64]).unwrap()
    }

    #[test]
    fn uniform_raster_gives_value() {
        let cell = cell_at(40_000, 5_000);
        let z = zonal_mean(&uniform(7.25, &cell), &cell).unwrap();
        assert!((z - 7.25).abs() < 1e-12);
    }

    #[test]
    fn disjoint_or_all_nodata_is_missing() {
        let cell = cell_at(40_000, 5_000);
        let far = cell_at(41_000, 5_000);
        assert_eq!(zonal_mean(&uniform(1.0, &cell), &far), None);
        let mut r = uniform(1.0, &cell);
        r.values.iter_mut().for_each(|v| *v = -9999.0);
        assert_eq!(zonal_mean(&r, &cell), None);
    }

    #[test]
    fn half_overlapping_two_by_two() {
        // Raster of 2x2 cells, each exactly one grid cell wide, shifted so
        // the grid cell covers the right half of column 0 and the left half
        // of column 1 within raster row 0.
        let cell = cell_at(20_000, 8_000);
        let p = 1.0 / 120.0;
        let origin = GeoPoint::new(cell.bbox.west - p / 2.0, cell.bbox.north);
        let r = RasterGrid::new(origin, p, 2, 2, -9999.0, vec![2.0, 6.0, 100.0, 100.0]).unwrap();
        // equal overlap widths, same latitude band → plain average
        let z = zonal_mean(&r, &cell).unwrap();
        assert!((z - 4.0).abs() < 1e-9, "{z}");
        // quarter/three-quarter split: overlaps p/4 with column 0, 3p/4 with column 1
        let origin = GeoPoint::new(cell.bbox.west - 3.0 * p / 4.0, cell.bbox.north);
        let r = RasterGrid::new(origin, p, 2, 2, -9999.0, vec![2.0, 6.0, 100.0, 100.0]).unwrap();
        let z = zonal_mean(&r, &cell).unwrap();
        assert!((z - (0.25 * 2.0 + 0.75 * 6.0)).abs() < 1e-9, "{z}");
        let _ = Bbox::new(0.0, 0.0, 1.0, 1.0);
    }
}
