//! Geographic inputs, the 30 arc-second grid system and spatial joins.

mod geojson;
mod grid;
mod osm;
mod raster;
pub mod sphere;
mod tabular;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::geojson::{extract_to_geojson, parse_geojson};
pub use self::grid::{
    assign_points, cell_at, cell_index_of, filter_built, make_grid, Bbox, CellId, GridCell,
    PointAssignment, CELL_PITCH_DEG, CELLS_PER_DEGREE,
};
pub use self::osm::parse_osm_xml;
pub use self::raster::{parse_esri_ascii, zonal_mean, RasterGrid};
pub use self::tabular::{parse_cell_values, CellValues};

/// WGS84 longitude/latitude in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub const fn new(lon: f64, lat: f64) -> Self {
        GeoPoint { lon, lat }
    }

    /// Checked constructor enforcing the WGS84 coordinate ranges.
    pub fn try_new(lon: f64, lat: f64) -> Result<Self> {
        if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::argument(format!(
                "coordinate out of range: lon {lon}, lat {lat}"
            )));
        }
        Ok(GeoPoint { lon, lat })
    }
}

/// Closed polygon: `exterior[0] == exterior[last]`, same for every hole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Vec<GeoPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holes: Vec<Vec<GeoPoint>>,
}

impl Polygon {
    /// Builds a polygon, closing the ring if the caller left it open.
    /// Returns `None` for rings with fewer than three distinct vertices.
    pub fn from_ring(mut ring: Vec<GeoPoint>) -> Option<Self> {
        close_ring(&mut ring)?;
        Some(Polygon {
            exterior: ring,
            holes: Vec::new(),
        })
    }

    pub fn bbox(&self) -> Bbox {
        Bbox::around(&self.exterior)
    }

    pub fn to_geo(&self) -> geo::Polygon<f64> {
        let ring = |r: &[GeoPoint]| {
            geo::LineString::from(r.iter().map(|p| (p.lon, p.lat)).collect::<Vec<_>>())
        };
        geo::Polygon::new(
            ring(&self.exterior),
            self.holes.iter().map(|h| ring(h)).collect(),
        )
    }
}

pub(crate) fn close_ring(ring: &mut Vec<GeoPoint>) -> Option<()> {
    if ring.len() < 3 {
        return None;
    }
    if ring.first() != ring.last() {
        ring.push(ring[0]);
    }
    if ring.len() < 4 {
        return None;
    }
    Some(())
}

/// A road way as found in the source: polyline plus its raw `highway` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawWay {
    pub highway: String,
    pub points: Vec<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandUse {
    pub polygon: Polygon,
    pub category: String,
}

/// Everything read from one city's sources.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UrbanExtract {
    pub roads: Vec<RawWay>,
    pub buildings: Vec<Polygon>,
    pub landuse: Vec<LandUse>,
    /// Named point sets, e.g. `poi`, `tweet`, `airbnb`.
    pub points: BTreeMap<String, Vec<GeoPoint>>,
    /// Ways dropped because they referenced nodes absent from the document.
    #[serde(default)]
    pub dropped_ways: usize,
}

impl UrbanExtract {
    pub fn is_empty(&self) -> bool {
        self.roads.is_empty()
            && self.buildings.is_empty()
            && self.landuse.is_empty()
            && self.points.values().all(Vec::is_empty)
    }

    /// Appends another extract (e.g. buildings from a second file).
    pub fn merge(&mut self, other: UrbanExtract) {
        self.roads.extend(other.roads);
        self.buildings.extend(other.buildings);
        self.landuse.extend(other.landuse);
        for (k, v) in other.points {
            self.points.entry(k).or_default().extend(v);
        }
        self.dropped_ways += other.dropped_ways;
    }

    pub fn point_set(&self, kind: &str) -> &[GeoPoint] {
        self.points.get(kind).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parses an OSM XML or GeoJSON document, detected from its first
/// non-whitespace byte. When `bbox` is given only geometries intersecting
/// it are kept.
pub fn parse_extract(document: &[u8], bbox: Option<&Bbox>) -> Result<UrbanExtract> {
    let text = std::str::from_utf8(document).map_err(|e| {
        let (line, column) = line_col(document, e.valid_up_to());
        Error::Parse {
            line,
            column,
            message: "document is not valid UTF-8".into(),
        }
    })?;
    let body = text.trim_start_matches('\u{feff}').trim_start();
    let mut extract = match body.as_bytes().first() {
        Some(b'<') => parse_osm_xml(text)?,
        Some(b'{') => parse_geojson(text)?,
        Some(_) => {
            return Err(Error::Format(
                "expected OSM XML (`<`) or GeoJSON (`{`)".into(),
            ))
        }
        None => return Err(Error::Format("empty document".into())),
    };
    if let Some(bbox) = bbox {
        retain_in_bbox(&mut extract, bbox);
    }
    Ok(extract)
}

fn retain_in_bbox(extract: &mut UrbanExtract, bbox: &Bbox) {
    extract
        .roads
        .retain(|w| bbox.intersects_polyline(&w.points));
    extract.buildings.retain(|p| bbox.intersects_polygon(p));
    extract
        .landuse
        .retain(|l| bbox.intersects_polygon(&l.polygon));
    for pts in extract.points.values_mut() {
        pts.retain(|p| bbox.contains_closed(p));
    }
}

fn line_col(bytes: &[u8], offset: usize) -> (usize, usize) {
    let head = &bytes[..offset.min(bytes.len())];
    let line = head.iter().filter(|&&b| b == b'\n').count() + 1;
    let column = offset - head.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}
