//! The 30 arc-second lattice aligned with the global WorldPop rasters:
//! origin at (-180, 90), columns grow eastward, rows grow southward.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::sphere;
use super::{GeoPoint, Polygon};
use crate::error::{Error, Result};

pub const CELLS_PER_DEGREE: f64 = 120.0;
pub const CELL_PITCH_DEG: f64 = 1.0 / CELLS_PER_DEGREE;

/// Values this close to an integer cell offset are snapped onto it.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub west: f64,
    pub south: f64,
    pub east: f64,
    pub north: f64,
}

impl Bbox {
    pub fn new(west: f64, south: f64, east: f64, north: f64) -> Result<Self> {
        if !(west <= east && south <= north) || [west, south, east, north].iter().any(|v| !v.is_finite()) {
            return Err(Error::argument(format!(
                "inverted or non-finite bbox ({west}, {south}, {east}, {north})"
            )));
        }
        Ok(Bbox { west, south, east, north })
    }

    pub fn around(points: &[GeoPoint]) -> Self {
        let mut b = Bbox {
            west: f64::INFINITY,
            south: f64::INFINITY,
            east: f64::NEG_INFINITY,
            north: f64::NEG_INFINITY,
        };
        for p in points {
            b.west = b.west.min(p.lon);
            b.east = b.east.max(p.lon);
            b.south = b.south.min(p.lat);
            b.north = b.north.max(p.lat);
        }
        b
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint::new((self.west + self.east) / 2.0, (self.south + self.north) / 2.0)
    }

    pub fn contains_closed(&self, p: &GeoPoint) -> bool {
        p.lon >= self.west && p.lon <= self.east && p.lat >= self.south && p.lat <= self.north
    }

    pub fn overlaps(&self, other: &Bbox) -> bool {
        self.west <= other.east
            && other.west <= self.east
            && self.south <= other.north
            && other.south <= self.north
    }

    /// Grows the box by `d` degrees on every side.
    pub fn expand(&self, d: f64) -> Bbox {
        Bbox {
            west: self.west - d,
            south: self.south - d,
            east: self.east + d,
            north: self.north + d,
        }
    }

    pub fn ring(&self) -> Vec<GeoPoint> {
        vec![
            GeoPoint::new(self.west, self.south),
            GeoPoint::new(self.east, self.south),
            GeoPoint::new(self.east, self.north),
            GeoPoint::new(self.west, self.north),
            GeoPoint::new(self.west, self.south),
        ]
    }

    pub fn to_polygon(&self) -> Polygon {
        Polygon {
            exterior: self.ring(),
            holes: Vec::new(),
        }
    }

    pub fn to_geo(&self) -> geo::Polygon<f64> {
        geo::Rect::new(
            geo::coord! { x: self.west, y: self.south },
            geo::coord! { x: self.east, y: self.north },
        )
        .to_polygon()
    }

    /// Liang-Barsky clip of segment `a`-`b` (in lon/lat) to the box.
    /// Returns the parametric interval `[t0, t1]` inside, if any.
    pub fn clip_segment(&self, a: GeoPoint, b: GeoPoint) -> Option<(f64, f64)> {
        let (dx, dy) = (b.lon - a.lon, b.lat - a.lat);
        let mut t0: f64 = 0.0;
        let mut t1: f64 = 1.0;
        let checks = [
            (-dx, a.lon - self.west),
            (dx, self.east - a.lon),
            (-dy, a.lat - self.south),
            (dy, self.north - a.lat),
        ];
        for (p, q) in checks {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }

    pub fn intersects_polyline(&self, pts: &[GeoPoint]) -> bool {
        match pts {
            [] => false,
            [p] => self.contains_closed(p),
            _ => pts.windows(2).any(|w| self.clip_segment(w[0], w[1]).is_some()),
        }
    }

    /// True when the polygon and the box share at least one point.
    pub fn intersects_polygon(&self, poly: &Polygon) -> bool {
        if !self.overlaps(&poly.bbox()) {
            return false;
        }
        if self.intersects_polyline(&poly.exterior) {
            return true;
        }
        // box entirely inside the polygon
        point_in_ring(&self.center(), &poly.exterior)
    }
}

/// Even-odd point-in-ring test.
pub(crate) fn point_in_ring(p: &GeoPoint, ring: &[GeoPoint]) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
            if p.lon < x {
                inside = !inside;
            }
        }
    }
    inside
}

pub type CellId = (i64, i64);

/// One 30″ × 30″ cell of the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub col: i64,
    pub row: i64,
    pub bbox: Bbox,
    pub area_km2: f64,
}

impl GridCell {
    pub fn id(&self) -> CellId {
        (self.col, self.row)
    }

    pub fn centroid(&self) -> GeoPoint {
        self.bbox.center()
    }

    /// Half of the cell's north-south extent, meters.
    pub fn half_width_m(&self) -> f64 {
        (self.bbox.north - self.bbox.south).to_radians() * sphere::EARTH_RADIUS_M / 2.0
    }

    /// West and south edges inclusive, east and north exclusive.
    pub fn contains(&self, p: &GeoPoint) -> bool {
        cell_index_of(p) == self.id()
    }
}

fn snapped(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// The cell `(col, row)` with its WGS84 geodesic area.
pub fn cell_at(col: i64, row: i64) -> GridCell {
    let bbox = Bbox {
        west: col as f64 / CELLS_PER_DEGREE - 180.0,
        east: (col + 1) as f64 / CELLS_PER_DEGREE - 180.0,
        north: 90.0 - row as f64 / CELLS_PER_DEGREE,
        south: 90.0 - (row + 1) as f64 / CELLS_PER_DEGREE,
    };
    let area_km2 = sphere::polygon_area_m2(&bbox.to_polygon()) / 1e6;
    GridCell { col, row, bbox, area_km2 }
}

/// Index of the cell containing `p` under the west/south-inclusive rule.
pub fn cell_index_of(p: &GeoPoint) -> CellId {
    let col = snapped((p.lon + 180.0) * CELLS_PER_DEGREE).floor() as i64;
    let row = snapped((90.0 - p.lat) * CELLS_PER_DEGREE).ceil() as i64 - 1;
    (col, row.max(0))
}

/// Every cell whose extent intersects `bbox`, sorted by (row, col).
pub fn make_grid(bbox: &Bbox) -> Result<Vec<GridCell>> {
    let bbox = Bbox::new(bbox.west, bbox.south, bbox.east, bbox.north)?;
    let c0 = snapped((bbox.west + 180.0) * CELLS_PER_DEGREE).floor() as i64;
    let c1 = (snapped((bbox.east + 180.0) * CELLS_PER_DEGREE).ceil() as i64 - 1).max(c0);
    let r0 = snapped((90.0 - bbox.north) * CELLS_PER_DEGREE).floor() as i64;
    let r1 = (snapped((90.0 - bbox.south) * CELLS_PER_DEGREE).ceil() as i64 - 1).max(r0);
    let mut cells = Vec::with_capacity(((c1 - c0 + 1) * (r1 - r0 + 1)) as usize);
    for row in r0..=r1 {
        for col in c0..=c1 {
            cells.push(cell_at(col, row));
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointAssignment {
    pub buckets: BTreeMap<CellId, Vec<usize>>,
    pub dropped: usize,
}

impl PointAssignment {
    pub fn count(&self, id: CellId) -> usize {
        self.buckets.get(&id).map_or(0, Vec::len)
    }
}

/// Assigns each point to the one cell containing it; points outside every
/// cell are dropped and counted.
pub fn assign_points(points: &[GeoPoint], cells: &[GridCell]) -> PointAssignment {
    let ids: BTreeSet<CellId> = cells.iter().map(GridCell::id).collect();
    let mut out = PointAssignment::default();
    for (i, p) in points.iter().enumerate() {
        let id = cell_index_of(p);
        if ids.contains(&id) {
            out.buckets.entry(id).or_default().push(i);
        } else {
            out.dropped += 1;
        }
    }
    out
}

/// Keeps the cells intersected by at least one building footprint.
pub fn filter_built(cells: &[GridCell], buildings: &[Polygon]) -> Vec<GridCell> {
    let boxes: Vec<Bbox> = buildings.iter().map(Polygon::bbox).collect();
    cells
        .iter()
        .filter(|c| {
            buildings
                .iter()
                .zip(&boxes)
                .any(|(b, bb)| c.bbox.overlaps(bb) && c.bbox.intersects_polygon(b))
        })
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn aligned(col: i64, row: i64) -> (f64, f64) {
        (col as f64 / 120.0 - 180.0, 90.0 - row as f64 / 120.0)
    }

    #[test]
    fn exact_two_by_two() {
        let (w, n) = aligned(34_000, 10_000);
        let (e, s) = aligned(34_002, 10_002);
        let cells = make_grid(&Bbox::new(w, s, e, n).unwrap()).unwrap();
        assert_eq!(cells.len(), 4);
        let ids: Vec<_> = cells.iter().map(GridCell::id).collect();
        assert_eq!(ids, vec![(34_000, 10_000), (34_001, 10_000), (34_000, 10_001), (34_001, 10_001)]);
    }

    #[test]
    fn degenerate_bbox_gives_one_cell() {
        let p = GeoPoint::new(103.8512, 1.2903);
        let cells = make_grid(&Bbox::new(p.lon, p.lat, p.lon, p.lat).unwrap()).unwrap();
        assert_eq!(cells.len(), 1);
        assert!(cells[0].bbox.contains_closed(&p));
        assert!(cells[0].contains(&p));
    }

    #[test]
    fn inverted_bbox_rejected() {
        assert!(Bbox::new(1.0, 0.0, 0.0, 1.0).is_err());
        let b = Bbox { west: 1.0, south: 0.0, east: 0.0, north: 1.0 };
        assert!(make_grid(&b).is_err());
    }

    #[test]
    fn edges_on_worldpop_lattice() {
        let cells = make_grid(&Bbox::new(-0.013, 51.49, 0.011, 51.51).unwrap()).unwrap();
        for c in &cells {
            for v in [c.bbox.west + 180.0, 90.0 - c.bbox.north, 90.0 - c.bbox.south, c.bbox.east + 180.0] {
                let k = v * 120.0;
                assert!((k - k.round()).abs() < 1e-6, "{v}");
            }
            assert!((c.bbox.east - c.bbox.west - CELL_PITCH_DEG).abs() < 1e-12);
            assert!((c.bbox.north - c.bbox.south - CELL_PITCH_DEG).abs() < 1e-12);
            assert!(c.area_km2 > 0.0);
        }
    }

    #[test]
    fn cell_area_shrinks_with_latitude() {
        let eq = cell_at(21_600, 10_799);
        let hi = cell_at(21_600, 3_000);
        // a·Δλ × a(1-e²)·Δφ at the equator = 927.638 m × 921.451 m
        assert!((eq.area_km2 - 0.854_776).abs() < 1e-4, "{}", eq.area_km2);
        assert!(hi.area_km2 < eq.area_km2);
    }

    #[test]
    fn point_on_shared_edge_goes_to_west_south_owner() {
        let left = cell_at(100, 200);
        let right = cell_at(101, 200);
        let below = cell_at(100, 201);
        let on_vertical = GeoPoint::new(left.bbox.east, left.centroid().lat);
        assert_eq!(cell_index_of(&on_vertical), right.id());
        let on_horizontal = GeoPoint::new(left.centroid().lon, left.bbox.south);
        // the shared edge is the south edge of `left` and north edge of `below`
        assert_eq!(cell_index_of(&on_horizontal), left.id());
        assert_ne!(cell_index_of(&on_horizontal), below.id());
    }

    #[test]
    fn empty_points() {
        let cells = vec![cell_at(0, 0)];
        let a = assign_points(&[], &cells);
        assert!(a.buckets.is_empty());
        assert_eq!(a.dropped, 0);
    }

    #[test]
    fn five_points_two_cells() {
        let a = cell_at(500, 300);
        let b = cell_at(501, 300);
        let c = a.centroid();
        let d = CELL_PITCH_DEG;
        let pts = vec![
            c,                                         // a
            GeoPoint::new(c.lon + d, c.lat),           // b
            GeoPoint::new(a.bbox.east, c.lat),         // on edge → b
            GeoPoint::new(a.bbox.west, a.bbox.south),  // a corner → a
            GeoPoint::new(c.lon + 3.0 * d, c.lat),     // outside
        ];
        let asg = assign_points(&pts, &[a, b]);
        assert_eq!(asg.buckets[&a.id()], vec![0, 3]);
        assert_eq!(asg.buckets[&b.id()], vec![1, 2]);
        assert_eq!(asg.dropped, 1);
    }

    fn square(cx: f64, cy: f64, h: f64) -> Polygon {
        Polygon::from_ring(vec![
            GeoPoint::new(cx - h, cy - h),
            GeoPoint::new(cx + h, cy - h),
            GeoPoint::new(cx + h, cy + h),
            GeoPoint::new(cx - h, cy + h),
        ])
        .unwrap()
    }

    #[test]
    fn filter_built_cases() {
        let cells = make_grid(&cell_at(10, 10).bbox.expand(CELL_PITCH_DEG * 0.5)).unwrap();
        assert_eq!(cells.len(), 9);
        let quad: Vec<GridCell> = vec![cell_at(10, 10), cell_at(11, 10), cell_at(10, 11), cell_at(11, 11)];
        assert!(filter_built(&quad, &[]).is_empty());
        let c = cell_at(11, 10).centroid();
        let kept = filter_built(&quad, &[square(c.lon, c.lat, 1e-4)]);
        assert_eq!(kept, vec![cell_at(11, 10)]);
        // straddles the boundary between (10,10) and (11,10)
        let edge = cell_at(10, 10).bbox.east;
        let kept = filter_built(&quad, &[square(edge, c.lat, 1e-4)]);
        assert_eq!(kept.iter().map(GridCell::id).collect::<Vec<_>>(), vec![(10, 10), (11, 10)]);
    }

    proptest! {
        #[test]
        fn grid_tiles_bbox(w in -10.0f64..10.0, s in -10.0f64..10.0, dw in 0.0f64..0.05, ds in 0.0f64..0.05) {
            let bbox = Bbox::new(w, s, w + dw, s + ds).unwrap();
            let cells = make_grid(&bbox).unwrap();
            let cols: BTreeSet<i64> = cells.iter().map(|c| c.col).collect();
            let rows: BTreeSet<i64> = cells.iter().map(|c| c.row).collect();
            // a full rectangle of distinct cells
            prop_assert_eq!(cols.len() * rows.len(), cells.len());
            let ids: BTreeSet<CellId> = cells.iter().map(GridCell::id).collect();
            prop_assert_eq!(ids.len(), cells.len());
            // contiguous index ranges, so interiors are disjoint and there are no gaps
            prop_assert_eq!(*cols.iter().last().unwrap() - *cols.iter().next().unwrap() + 1, cols.len() as i64);
            prop_assert_eq!(*rows.iter().last().unwrap() - *rows.iter().next().unwrap() + 1, rows.len() as i64);
            let west = cells.iter().map(|c| c.bbox.west).fold(f64::INFINITY, f64::min);
            let east = cells.iter().map(|c| c.bbox.east).fold(f64::NEG_INFINITY, f64::max);
            let south = cells.iter().map(|c| c.bbox.south).fold(f64::INFINITY, f64::min);
            let north = cells.iter().map(|c| c.bbox.north).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(west <= bbox.west + 1e-12 && east >= bbox.east - 1e-12);
            prop_assert!(south <= bbox.south + 1e-12 && north >= bbox.north - 1e-12);
        }

        #[test]
        fn assignment_partitions(pts in proptest::collection::vec((-0.02f64..0.02, -0.02f64..0.02), 0..60)) {
            let points: Vec<GeoPoint> = pts.iter().map(|&(x, y)| GeoPoint::new(x, y)).collect();
            let cells = make_grid(&Bbox::new(-0.01, -0.01, 0.01, 0.01).unwrap()).unwrap();
            let a = assign_points(&points, &cells);
            let total: usize = a.buckets.values().map(Vec::len).sum();
            prop_assert_eq!(total + a.dropped, points.len());
        }
    }
}
