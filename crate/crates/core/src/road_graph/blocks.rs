//! Blocks as bounded faces of the planar road graph.
//!
//! Dangling streets (filaments) are pruned first, then faces are traced on
//! the half-edge structure: leaving a node along the reverse of the arrival
//! half-edge, the next half-edge is the one immediately clockwise. Bounded
//! faces come out counter-clockwise; each component's outer face comes out
//! clockwise and is discarded.

use serde::{Deserialize, Serialize};

use super::RoadGraph;
use crate::geodata::sphere::polygon_area_m2;
use crate::geodata::{GeoPoint, GridCell, Polygon};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// Closed, counter-clockwise.
    pub ring: Vec<GeoPoint>,
    pub area_m2: f64,
}

impl Block {
    pub fn polygon(&self) -> Polygon {
        Polygon {
            exterior: self.ring.clone(),
            holes: Vec::new(),
        }
    }
}

/// Blocks of the whole graph that intersect `clip`.
pub fn polygonize_blocks(graph: &RoadGraph, clip: &GridCell) -> Vec<Block> {
    extract_faces(graph)
        .into_iter()
        .filter(|b| clip.bbox.intersects_polygon(&b.polygon()))
        .collect()
}

/// Every bounded face of the graph.
pub fn extract_faces(graph: &RoadGraph) -> Vec<Block> {
    let active = prune_filaments(graph);
    let n_half = graph.edges.len() * 2;

    // outgoing half-edges per node, sorted counter-clockwise
    let mut outgoing: Vec<Vec<(f64, usize)>> = vec![Vec::new(); graph.nodes.len()];
    for (e, edge) in graph.edges.iter().enumerate() {
        if !active[e] {
            continue;
        }
        let pts = &edge.polyline;
        outgoing[edge.a].push((departure_angle(pts.iter()), 2 * e));
        outgoing[edge.b].push((departure_angle(pts.iter().rev()), 2 * e + 1));
    }
    // position of every half-edge in its origin's rotation
    let mut slot = vec![usize::MAX; n_half];
    for list in &mut outgoing {
        list.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for (i, &(_, h)) in list.iter().enumerate() {
            slot[h] = i;
        }
    }
    let head = |h: usize| {
        let e = &graph.edges[h / 2];
        if h % 2 == 0 {
            e.b
        } else {
            e.a
        }
    };
    let next = |h: usize| {
        let twin = h ^ 1;
        let around = &outgoing[head(h)];
        around[(slot[twin] + around.len() - 1) % around.len()].1
    };

    let mut visited = vec![false; n_half];
    let mut faces = Vec::new();
    for start in 0..n_half {
        if visited[start] || !active[start / 2] {
            continue;
        }
        let mut ring: Vec<GeoPoint> = Vec::new();
        let mut h = start;
        loop {
            visited[h] = true;
            let pts = &graph.edges[h / 2].polyline;
            if h % 2 == 0 {
                ring.extend(&pts[..pts.len() - 1]);
            } else {
                ring.extend(pts[1..].iter().rev());
            }
            h = next(h);
            if h == start || visited[h] {
                break;
            }
        }
        ring.push(ring[0]);
        if ring.len() >= 4 && planar_signed_area(&ring) > 0.0 {
            let area_m2 = polygon_area_m2(&Polygon {
                exterior: ring.clone(),
                holes: Vec::new(),
            });
            if area_m2 > 0.0 {
                faces.push(Block { ring, area_m2 });
            }
        }
    }
    faces
}

/// Marks edges that survive iterative removal of degree-one nodes.
fn prune_filaments(graph: &RoadGraph) -> Vec<bool> {
    let mut degree: Vec<usize> = graph.nodes.iter().map(|n| n.degree).collect();
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); graph.nodes.len()];
    for (i, e) in graph.edges.iter().enumerate() {
        incident[e.a].push(i);
        if e.b != e.a {
            incident[e.b].push(i);
        }
    }
    let mut active = vec![true; graph.edges.len()];
    let mut stack: Vec<usize> = (0..graph.nodes.len()).filter(|&n| degree[n] == 1).collect();
    while let Some(n) = stack.pop() {
        if degree[n] != 1 {
            continue;
        }
        let Some(&e) = incident[n].iter().find(|&&e| active[e]) else {
            continue;
        };
        active[e] = false;
        let edge = &graph.edges[e];
        let other = if edge.a == n { edge.b } else { edge.a };
        degree[n] -= 1;
        degree[other] -= 1;
        if degree[other] == 1 {
            stack.push(other);
        }
    }
    active
}

/// Direction of the first non-degenerate segment, in a local
/// equirectangular frame (radians, counter-clockwise from east).
fn departure_angle<'a>(mut pts: impl Iterator<Item = &'a GeoPoint>) -> f64 {
    let Some(first) = pts.next() else {
        return 0.0;
    };
    let k = first.lat.to_radians().cos();
    for p in pts {
        let (dx, dy) = ((p.lon - first.lon) * k, p.lat - first.lat);
        if dx != 0.0 || dy != 0.0 {
            return dy.atan2(dx);
        }
    }
    0.0
}

fn planar_signed_area(ring: &[GeoPoint]) -> f64 {
    let o = ring[0];
    let k = o.lat.to_radians().cos();
    let mut s = 0.0;
    for w in ring.windows(2) {
        let (x0, y0) = ((w[0].lon - o.lon) * k, w[0].lat - o.lat);
        let (x1, y1) = ((w[1].lon - o.lon) * k, w[1].lat - o.lat);
        s += x0 * y1 - x1 * y0;
    }
    s / 2.0
}
