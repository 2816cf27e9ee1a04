//! Graph-feature fallback classifier.

use serde::{Deserialize, Serialize};

use super::CategoryProbs;
use crate::geodata::sphere::LocalProjection;
use crate::road_graph::{bearing_histogram, RoadGraph, RoadTier};

/// Major-road (tertiary and above) length density, in m/km², below which a
/// network counts as having no pattern.
pub const NO_PATTERN_MAJOR_DENSITY: f64 = 1000.0;

const BINS: usize = 36;
const RADIAL_CONE_DEG: f64 = 15.0;

/// Features and raw scores behind a heuristic classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicScores {
    /// Bearing entropy normalised to `[0, 1]`.
    pub entropy: f64,
    /// Share of bearing mass in the dominant bin pair 90° apart (±1 bin).
    pub orthogonality: f64,
    /// Share of major-road length aimed at the busiest major junction.
    pub radial_fraction: f64,
    /// Major-road length density in m/km².
    pub major_density: f64,
    /// Scores in category order; the probabilities are their softmax.
    pub scores: [f64; 4],
}

impl HeuristicScores {
    pub fn compute(graph: &RoadGraph, extent_m: f64) -> Self {
        let hist = bearing_histogram(graph, BINS);
        let total: f64 = hist.iter().sum();
        let (entropy, orthogonality) = if total > 0.0 {
            let h: f64 = hist.iter().filter(|&&v| v > 0.0).map(|&v| -(v / total) * (v / total).ln()).sum();
            let peak = (0..BINS).max_by(|&a, &b| hist[a].total_cmp(&hist[b]).then(b.cmp(&a))).unwrap_or(0);
            let near = |c: usize| (0..3).map(|d| hist[(c + BINS + d - 1) % BINS]).sum::<f64>();
            (h / (BINS as f64).ln(), (near(peak) + near(peak + BINS / 2)) / total)
        } else {
            (1.0, 0.0)
        };

        let major = graph.filter_tier(RoadTier::Tertiary);
        let area_km2 = (extent_m / 1000.0).powi(2);
        let major_density = if area_km2 > 0.0 { major.total_edge_length() / area_km2 } else { 0.0 };
        let radial_fraction = radial_fraction(&major);

        let sparse = (1.0 - major_density / NO_PATTERN_MAJOR_DENSITY).max(0.0);
        let scores = [
            (1.0 - entropy) + orthogonality,
            1.0 + entropy - orthogonality,
            4.0 * radial_fraction * (1.0 - sparse),
            4.0 * sparse,
        ];
        HeuristicScores { entropy, orthogonality, radial_fraction, major_density, scores }
    }

    pub fn probs(&self) -> CategoryProbs {
        CategoryProbs::softmax(self.scores)
    }
}

/// Length share of major segments whose line passes within the cone of the
/// node with the highest major degree (lowest index on ties).
fn radial_fraction(major: &RoadGraph) -> f64 {
    let mut degree = vec![0usize; major.nodes.len()];
    for e in &major.edges {
        degree[e.a] += 1;
        degree[e.b] += 1;
    }
    let Some(hub) = (0..degree.len()).max_by(|&a, &b| degree[a].cmp(&degree[b]).then(b.cmp(&a))) else {
        return 0.0;
    };
    if degree[hub] < 3 {
        return 0.0;
    }
    let proj = LocalProjection::new(major.nodes[hub].point);
    let cos_cone = RADIAL_CONE_DEG.to_radians().cos();
    let (mut aimed, mut total) = (0.0, 0.0);
    for e in &major.edges {
        for w in e.polyline.windows(2) {
            let (a, b) = (proj.forward(w[0]), proj.forward(w[1]));
            let d = (b.0 - a.0, b.1 - a.1);
            let len = d.0.hypot(d.1);
            if len <= 0.0 {
                continue;
            }
            total += len;
            let m = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
            let r = m.0.hypot(m.1);
            // a segment through the hub trivially points at it
            if r <= len / 2.0 || ((d.0 * m.0 + d.1 * m.1) / (len * r)).abs() >= cos_cone {
                aimed += len;
            }
        }
    }
    if total > 0.0 {
        aimed / total
    } else {
        0.0
    }
}

/// Classifies a road network covering a square of side `extent_m` from its
/// bearing distribution, hub structure, and major-road density.
pub fn classify_heuristic(graph: &RoadGraph, extent_m: f64) -> CategoryProbs {
    HeuristicScores::compute(graph, extent_m).probs()
}
