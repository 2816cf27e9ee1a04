//! Tiered road graph built from raw ways.

mod blocks;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geodata::sphere::{haversine_m, initial_bearing_deg, polyline_length_m};
use crate::geodata::{GeoPoint, GridCell, RawWay};

pub use self::blocks::{extract_faces, polygonize_blocks, Block};

/// Condensed road hierarchy. Ordering follows importance: `Minor < … < Motorway`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadTier {
    Minor,
    Tertiary,
    Secondary,
    Primary,
    Motorway,
}

impl RoadTier {
    /// From least to most important.
    pub const ASCENDING: [RoadTier; 5] = [
        RoadTier::Minor,
        RoadTier::Tertiary,
        RoadTier::Secondary,
        RoadTier::Primary,
        RoadTier::Motorway,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RoadTier::Minor => "minor",
            RoadTier::Tertiary => "tertiary",
            RoadTier::Secondary => "secondary",
            RoadTier::Primary => "primary",
            RoadTier::Motorway => "motorway",
        }
    }

    /// Tertiary and above.
    pub fn is_major(self) -> bool {
        self >= RoadTier::Tertiary
    }
}

impl fmt::Display for RoadTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoadTier {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        RoadTier::ASCENDING
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| crate::Error::argument(format!("unknown road tier `{s}`")))
    }
}

/// Maps an OSM `highway` value onto a tier; `None` for non-vehicular ways.
pub fn regroup_highway(tag: &str) -> Option<RoadTier> {
    let base = tag.trim().to_ascii_lowercase();
    let base = base.strip_suffix("_link").unwrap_or(&base);
    match base {
        "motorway" | "trunk" => Some(RoadTier::Motorway),
        "primary" => Some(RoadTier::Primary),
        "secondary" => Some(RoadTier::Secondary),
        "tertiary" => Some(RoadTier::Tertiary),
        "footway" | "path" | "cycleway" | "steps" | "pedestrian" | "track" | "bridleway"
        | "corridor" | "elevator" | "platform" | "proposed" | "construction" | "abandoned"
        | "raceway" | "bus_stop" | "crossing" | "via_ferrata" | "" => None,
        _ => Some(RoadTier::Minor),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub point: GeoPoint,
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub tier: RoadTier,
    pub length_m: f64,
    /// Runs from node `a` to node `b`.
    pub polyline: Vec<GeoPoint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoadGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

/// Coordinates equal to within 1e-7 degrees share a node.
fn vertex_key(p: &GeoPoint) -> (i64, i64) {
    ((p.lon * 1e7).round() as i64, (p.lat * 1e7).round() as i64)
}

/// Builds the graph: way endpoints and vertices shared between ways (or
/// repeated within one) become nodes; everything between is edge geometry.
pub fn build_graph(roads: &[RawWay]) -> RoadGraph {
    let tiered: Vec<(RoadTier, &[GeoPoint])> = roads
        .iter()
        .filter_map(|w| regroup_highway(&w.highway).map(|t| (t, w.points.as_slice())))
        .filter(|(_, pts)| pts.len() >= 2)
        .collect();

    let mut uses: HashMap<(i64, i64), usize> = HashMap::new();
    for (_, pts) in &tiered {
        for p in pts.iter() {
            *uses.entry(vertex_key(p)).or_default() += 1;
        }
    }

    let mut graph = RoadGraph::default();
    let mut node_of: HashMap<(i64, i64), usize> = HashMap::new();
    let mut seen: HashSet<(usize, usize, Vec<(i64, i64)>)> = HashSet::new();
    let mut node_id = |graph: &mut RoadGraph, p: GeoPoint| -> usize {
        *node_of.entry(vertex_key(&p)).or_insert_with(|| {
            graph.nodes.push(Node { point: p, degree: 0 });
            graph.nodes.len() - 1
        })
    };

    for (tier, pts) in tiered {
        let last = pts.len() - 1;
        let mut start = 0;
        let mut start_node = node_id(&mut graph, pts[0]);
        for i in 1..=last {
            if i != last && uses[&vertex_key(&pts[i])] < 2 {
                continue;
            }
            let end_node = node_id(&mut graph, pts[i]);
            let polyline: Vec<GeoPoint> = pts[start..=i].to_vec();
            let length_m = polyline_length_m(&polyline);
            if length_m > 0.0 {
                // the same geometry traversed in either direction is one edge
                let mut keys: Vec<(i64, i64)> = polyline.iter().map(vertex_key).collect();
                let (mut lo, mut hi) = (start_node, end_node);
                if (lo, keys.first()) > (hi, keys.last()) {
                    std::mem::swap(&mut lo, &mut hi);
                    keys.reverse();
                }
                if seen.insert((lo, hi, keys)) {
                    graph.nodes[start_node].degree += 1;
                    graph.nodes[end_node].degree += 1;
                    graph.edges.push(Edge { a: start_node, b: end_node, tier, length_m, polyline });
                }
            }
            start = i;
            start_node = end_node;
        }
    }
    graph
}

impl RoadGraph {
    /// Subgraph with edges of at least `min` tier; degrees recomputed,
    /// isolated nodes dropped.
    pub fn filter_tier(&self, min: RoadTier) -> RoadGraph {
        self.filter_edges(|e| e.tier >= min)
    }

    pub fn filter_edges(&self, keep: impl Fn(&Edge) -> bool) -> RoadGraph {
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        let mut out = RoadGraph::default();
        for e in self.edges.iter().filter(|e| keep(e)) {
            let mut id = |n: usize, out: &mut RoadGraph| {
                *remap.entry(n).or_insert_with(|| {
                    out.nodes.push(Node { point: self.nodes[n].point, degree: 0 });
                    out.nodes.len() - 1
                })
            };
            let a = id(e.a, &mut out);
            let b = id(e.b, &mut out);
            out.nodes[a].degree += 1;
            out.nodes[b].degree += 1;
            out.edges.push(Edge { a, b, ..e.clone() });
        }
        out
    }

    pub fn total_edge_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length_m).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Newline-delimited GeoJSON features, one per edge, with a `tier` property.
    pub fn to_geojson_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            let coords: Vec<[f64; 2]> = e.polyline.iter().map(|p| [p.lon, p.lat]).collect();
            let f = serde_json::json!({
                "type": "Feature",
                "properties": { "tier": e.tier.name(), "length_m": e.length_m },
                "geometry": { "type": "LineString", "coordinates": coords },
            });
            out.push_str(&f.to_string());
            out.push('\n');
        }
        out
    }
}

/// Nodes of degree three or more.
pub fn count_intersections(graph: &RoadGraph) -> usize {
    graph.nodes.iter().filter(|n| n.degree >= 3).count()
}

/// Intersections whose node lies inside `cell` (west/south inclusive).
pub fn count_intersections_in(graph: &RoadGraph, cell: &GridCell) -> usize {
    graph
        .nodes
        .iter()
        .filter(|n| n.degree >= 3 && cell.contains(&n.point))
        .count()
}

/// Length in meters of the edge geometry falling inside the cell.
pub fn total_length(graph: &RoadGraph, clip: &GridCell) -> f64 {
    let bbox = &clip.bbox;
    let mut total = 0.0;
    for e in &graph.edges {
        for w in e.polyline.windows(2) {
            let (a, b) = (w[0], w[1]);
            if bbox.contains_closed(&a) && bbox.contains_closed(&b) {
                total += haversine_m(a, b);
            } else if let Some((t0, t1)) = bbox.clip_segment(a, b) {
                if t1 > t0 {
                    let lerp = |t: f64| GeoPoint::new(a.lon + t * (b.lon - a.lon), a.lat + t * (b.lat - a.lat));
                    total += haversine_m(lerp(t0), lerp(t1));
                }
            }
        }
    }
    total
}

/// Length-weighted histogram of undirected segment bearings. Bin `k` is
/// centred on `k · 180/bins` degrees, so bin 0 holds bearings near 0° and
/// near 180°.
pub fn bearing_histogram(graph: &RoadGraph, bins: usize) -> Vec<f64> {
    let bins = bins.max(2);
    let mut hist = vec![0.0; bins];
    let width = 180.0 / bins as f64;
    for e in &graph.edges {
        for w in e.polyline.windows(2) {
            let len = haversine_m(w[0], w[1]);
            if len <= 0.0 {
                continue;
            }
            let b = initial_bearing_deg(w[0], w[1]).rem_euclid(180.0);
            let k = ((b + width / 2.0) / width).floor() as usize % bins;
            hist[k] += len;
        }
    }
    hist
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn way(tag: &str, pts: &[(f64, f64)]) -> RawWay {
        RawWay {
            highway: tag.to_string(),
            points: pts.iter().map(|&(x, y)| GeoPoint::new(x, y)).collect(),
        }
    }

    /// Three east-west and three north-south streets crossing at nine
    /// shared nodes, each running one spacing past the outer crossings.
    pub fn street_grid(origin: (f64, f64), d: f64) -> Vec<RawWay> {
        let mut ways = Vec::new();
        for i in 0..3 {
            let y = origin.1 + i as f64 * d;
            let pts: Vec<(f64, f64)> = (-1..=3).map(|j| (origin.0 + j as f64 * d, y)).collect();
            ways.push(way("residential", &pts));
            let x = origin.0 + i as f64 * d;
            let pts: Vec<(f64, f64)> = (-1..=3).map(|j| (x, origin.1 + j as f64 * d)).collect();
            ways.push(way("tertiary", &pts));
        }
        ways
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::geodata::{cell_at, Bbox};
    use proptest::prelude::*;

    #[test]
    fn regroup() {
        assert_eq!(regroup_highway("motorway"), Some(RoadTier::Motorway));
        assert_eq!(regroup_highway("trunk_link"), Some(RoadTier::Motorway));
        assert_eq!(regroup_highway("primary_link"), Some(RoadTier::Primary));
        assert_eq!(regroup_highway("secondary"), Some(RoadTier::Secondary));
        assert_eq!(regroup_highway("tertiary_link"), Some(RoadTier::Tertiary));
        for t in ["residential", "service", "unclassified", "living_street", "road", "busway"] {
            assert_eq!(regroup_highway(t), Some(RoadTier::Minor), "{t}");
        }
        for t in ["footway", "path", "cycleway", "steps", "pedestrian", "track"] {
            assert_eq!(regroup_highway(t), None, "{t}");
        }
        assert!(RoadTier::Motorway > RoadTier::Primary && RoadTier::Tertiary > RoadTier::Minor);
    }

    #[test]
    fn shared_endpoint() {
        let g = build_graph(&[way("primary", &[(0.0, 0.0), (0.001, 0.0)]), way("primary", &[(0.001, 0.0), (0.002, 0.001)])]);
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.edges.len(), 2);
        let mid = g.nodes.iter().find(|n| n.point == GeoPoint::new(0.001, 0.0)).unwrap();
        assert_eq!(mid.degree, 2);
    }

    #[test]
    fn crossing_at_shared_mid_vertex() {
        let g = build_graph(&[
            way("primary", &[(-0.001, 0.0), (0.0, 0.0), (0.001, 0.0)]),
            way("residential", &[(0.0, -0.001), (0.0, 0.0), (0.0, 0.001)]),
        ]);
        assert_eq!(count_intersections(&g), 1);
        assert_eq!(g.nodes.iter().map(|n| n.degree).max(), Some(4));
        // crossing geometry without a shared vertex stays unnoded
        let g = build_graph(&[
            way("primary", &[(-0.001, 0.0), (0.001, 0.0)]),
            way("residential", &[(0.0, -0.001), (0.0, 0.001)]),
        ]);
        assert_eq!(count_intersections(&g), 0);
    }

    #[test]
    fn excluded_and_duplicate_ways() {
        let g = build_graph(&[
            way("footway", &[(0.0, 0.0), (0.001, 0.0)]),
            way("primary", &[(0.0, 0.0), (0.001, 0.0)]),
            way("primary", &[(0.001, 0.0), (0.0, 0.0)]),
        ]);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.nodes.iter().map(|n| n.degree).sum::<usize>(), 2);
    }

    #[test]
    fn equator_degree_edge() {
        let g = build_graph(&[way("primary", &[(0.0, 0.0), (1.0, 0.0)])]);
        assert!((g.edges[0].length_m - 111_194.9).abs() < 1.0);
    }

    #[test]
    fn intersections_single_and_grid() {
        let g = build_graph(&[way("primary", &[(0.0, 0.0), (0.001, 0.0), (0.002, 0.0005)])]);
        assert_eq!(count_intersections(&g), 0);
        let g = build_graph(&street_grid((10.0, 20.0), 0.001));
        assert_eq!(count_intersections(&g), 9);
        assert_eq!(g.nodes.len(), 21);
        assert_eq!(g.edges.len(), 24);
    }

    #[test]
    fn total_length_cases() {
        let cell = cell_at(22_000, 9_000);
        let c = cell.centroid();
        let h = crate::geodata::CELL_PITCH_DEG / 4.0;
        assert_eq!(total_length(&RoadGraph::default(), &cell), 0.0);
        let inside = build_graph(&[way("primary", &[(c.lon - h, c.lat), (c.lon + h, c.lat)])]);
        assert!((total_length(&inside, &cell) - inside.edges[0].length_m).abs() < 1e-9);
        // straight edge centred on the east boundary: half inside
        let e = cell.bbox.east;
        let half = build_graph(&[way("primary", &[(e - h, c.lat), (e + h, c.lat)])]);
        let got = total_length(&half, &cell);
        assert!((got / (half.edges[0].length_m / 2.0) - 1.0).abs() < 1e-3, "{got}");
    }

    #[test]
    fn bearings() {
        let north = build_graph(&[way("primary", &[(0.0, 0.0), (0.0, 0.01)])]);
        let h = bearing_histogram(&north, 36);
        assert!((h[0] - north.edges[0].length_m).abs() < 1e-9);
        let g = build_graph(&street_grid((0.0, 0.0), 0.001));
        let h = bearing_histogram(&g, 36);
        let total: f64 = h.iter().sum();
        assert!((h[0] + h[18]) / total >= 0.99);
        assert!((total - g.total_edge_length()).abs() < 1e-6);
        assert_eq!(bearing_histogram(&RoadGraph::default(), 36), vec![0.0; 36]);
    }

    #[test]
    fn handshake_and_filter() {
        let g = build_graph(&street_grid((0.0, 0.0), 0.001));
        assert_eq!(g.nodes.iter().map(|n| n.degree).sum::<usize>(), 2 * g.edges.len());
        let major = g.filter_tier(RoadTier::Tertiary);
        assert_eq!(major.edges.len(), 12);
        assert_eq!(count_intersections(&major), 0);
        assert_eq!(major.nodes.iter().map(|n| n.degree).sum::<usize>(), 24);
    }

    #[test]
    fn covering_cell_length_matches_edges() {
        let cell = cell_at(21_600, 10_799);
        let c = cell.centroid();
        let d = crate::geodata::CELL_PITCH_DEG / 10.0;
        let g = build_graph(&street_grid((c.lon - d, c.lat - d), d / 2.0));
        let got = total_length(&g, &cell);
        assert!((got / g.total_edge_length() - 1.0).abs() < 1e-9);
        let _ = Bbox::new(0.0, 0.0, 0.0, 0.0);
    }

    proptest! {
        #[test]
        fn invariants_under_permutation_and_translation(
            seed in 0u64..1000, dx in -1.0f64..1.0, dy in -1.0f64..1.0
        ) {
            let ways = street_grid((0.25, 0.5), 0.001);
            let mut perm = ways.clone();
            let n = perm.len();
            for i in 0..n {
                perm.swap(i, (seed as usize * 7 + i * 13) % n);
            }
            let g = build_graph(&ways);
            let gp = build_graph(&perm);
            prop_assert_eq!(count_intersections(&g), count_intersections(&gp));
            let moved: Vec<RawWay> = ways.iter().map(|w| RawWay {
                highway: w.highway.clone(),
                points: w.points.iter().map(|p| GeoPoint::new(p.lon + dx, p.lat + dy)).collect(),
            }).collect();
            prop_assert_eq!(count_intersections(&build_graph(&moved)), 9);
            prop_assert_eq!(gp.nodes.iter().map(|n| n.degree).sum::<usize>(), 2 * gp.edges.len());
        }

        #[test]
        fn bearing_mass_ignores_direction(flip in proptest::collection::vec(any::<bool>(), 6)) {
            let ways = street_grid((3.0, 4.0), 0.0013);
            let flipped: Vec<RawWay> = ways.iter().zip(&flip).map(|(w, &f)| {
                let mut w = w.clone();
                if f { w.points.reverse(); }
                w
            }).collect();
            let a = bearing_histogram(&build_graph(&ways), 36);
            let b = bearing_histogram(&build_graph(&flipped), 36);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()));
            }
        }
    }
}
