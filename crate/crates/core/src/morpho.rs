//! Per-cell morphological indices and the regression feature matrix.

use std::collections::BTreeMap;

use geo::BooleanOps;
use serde::{Deserialize, Serialize};

use crate::classifier::CategoryProbs;
use crate::error::{Error, Result};
use crate::geodata::sphere::{multi_area_m2, polygon_area_m2};
use crate::geodata::{CellId, GridCell, Polygon, UrbanExtract};
use crate::road_graph::{count_intersections_in, extract_faces, total_length, Block, RoadGraph, RoadTier};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MorphoVector {
    pub prob_r: f64,
    pub prob_o: f64,
    pub prob_g: f64,
    pub prob_n: f64,
    /// Road length density, m/km².
    pub rd: f64,
    /// Intersections per km².
    pub ind: f64,
    /// Built-up fraction of the cell.
    pub bud: f64,
    /// Mean building footprint area, m².
    pub abfa: f64,
    /// Blocks per km².
    pub bld: f64,
    /// Mean block area, m².
    pub aba: f64,
    /// Land-use mixture, nats.
    pub lum: f64,
}

pub const BASELINE_COLUMNS: [&str; 7] = ["rd", "ind", "bud", "abfa", "bld", "aba", "lum"];
pub const PROB_COLUMNS: [&str; 4] = ["prob_r", "prob_o", "prob_g", "prob_n"];
pub const FEATURES_HEADER: [&str; 14] = [
    "city", "cell_col", "cell_row", "prob_g", "prob_o", "prob_r", "prob_n", "rd", "ind", "bud", "abfa", "bld", "aba", "lum",
];

impl MorphoVector {
    pub fn set_probs(&mut self, p: &CategoryProbs) {
        let [g, o, r, n] = p.0;
        (self.prob_g, self.prob_o, self.prob_r, self.prob_n) = (g, o, r, n);
    }

    pub fn probs(&self) -> [f64; 4] {
        [self.prob_r, self.prob_o, self.prob_g, self.prob_n]
    }

    pub fn baseline(&self) -> [f64; 7] {
        [self.rd, self.ind, self.bud, self.abfa, self.bld, self.aba, self.lum]
    }
}

/// Shannon entropy (natural log) of the shares of `areas`; zero when all
/// areas are zero.
pub fn land_use_mixture(areas: &[f64]) -> Result<f64> {
    if areas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
        return Err(Error::argument("land-use areas must be finite and non-negative"));
    }
    let total: f64 = areas.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok(areas
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| {
            let p = a / total;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorphoOptions {
    /// Lowest tier whose junctions count towards `ind`.
    pub min_tier: RoadTier,
}

impl Default for MorphoOptions {
    fn default() -> Self {
        MorphoOptions { min_tier: RoadTier::Minor }
    }
}

fn clipped_union_area(polys: &[&Polygon], cell: &geo::Polygon<f64>) -> f64 {
    if polys.is_empty() {
        return 0.0;
    }
    let geo_polys: Vec<geo::Polygon<f64>> = polys.iter().map(|p| p.to_geo()).collect();
    let union = geo::unary_union(&geo_polys);
    multi_area_m2(&union.intersection(cell))
}

/// Indices for one cell. `faces` are the blocks of the whole graph (see
/// [`extract_faces`]); the ones intersecting the cell are used.
pub fn compute_indices_with(
    cell: &GridCell,
    extract: &UrbanExtract,
    graph: &RoadGraph,
    faces: &[Block],
    probs: &CategoryProbs,
    opts: &MorphoOptions,
) -> MorphoVector {
    let area_km2 = cell.area_km2;
    let area_m2 = area_km2 * 1e6;
    let cell_poly = cell.bbox.to_geo();

    let rd = total_length(graph, cell) / area_km2;
    let junction_graph = if opts.min_tier > RoadTier::Minor { graph.filter_tier(opts.min_tier) } else { graph.clone() };
    let ind = count_intersections_in(&junction_graph, cell) as f64 / area_km2;

    let footprints: Vec<&Polygon> = extract.buildings.iter().filter(|b| cell.bbox.intersects_polygon(b)).collect();
    let (bud, abfa) = if footprints.is_empty() {
        (0.0, 0.0)
    } else {
        let bud = (clipped_union_area(&footprints, &cell_poly) / area_m2).clamp(0.0, 1.0);
        let mean = footprints.iter().map(|p| polygon_area_m2(p)).sum::<f64>() / footprints.len() as f64;
        (bud, mean)
    };

    let blocks: Vec<&Block> = faces.iter().filter(|b| cell.bbox.intersects_polygon(&b.polygon())).collect();
    let bld = blocks.len() as f64 / area_km2;
    let aba = if blocks.is_empty() { 0.0 } else { blocks.iter().map(|b| b.area_m2).sum::<f64>() / blocks.len() as f64 };

    let mut by_category: BTreeMap<&str, Vec<&Polygon>> = BTreeMap::new();
    for lu in &extract.landuse {
        if cell.bbox.intersects_polygon(&lu.polygon) {
            by_category.entry(lu.category.as_str()).or_default().push(&lu.polygon);
        }
    }
    let areas: Vec<f64> = by_category.values().map(|ps| clipped_union_area(ps, &cell_poly)).collect();
    let lum = land_use_mixture(&areas).expect("areas are non-negative");

    let mut v = MorphoVector { rd, ind, bud, abfa, bld, aba, lum, ..Default::default() };
    v.set_probs(probs);
    v
}

/// [`compute_indices_with`] tracing the blocks of `graph` itself.
pub fn compute_indices(cell: &GridCell, extract: &UrbanExtract, graph: &RoadGraph, probs: &CategoryProbs) -> MorphoVector {
    compute_indices_with(cell, extract, graph, &extract_faces(graph), probs, &MorphoOptions::default())
}

/// Column names and rows of the regression design matrix: the seven
/// baseline indices, preceded by the four probabilities when requested.
pub fn assemble_matrix(vectors: &[MorphoVector], include_probs: bool) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut names: Vec<String> = Vec::new();
    if include_probs {
        names.extend(PROB_COLUMNS.iter().map(|s| s.to_string()));
    }
    names.extend(BASELINE_COLUMNS.iter().map(|s| s.to_string()));
    let rows = vectors
        .iter()
        .map(|v| {
            let mut r = Vec::with_capacity(names.len());
            if include_probs {
                r.extend(v.probs());
            }
            r.extend(v.baseline());
            r
        })
        .collect();
    (names, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFeatures {
    pub city: String,
    pub cell: CellId,
    pub vector: MorphoVector,
}

pub fn write_features_csv(rows: &[CellFeatures]) -> String {
    let mut s = FEATURES_HEADER.join(",");
    s.push('\n');
    for r in rows {
        let v = &r.vector;
        let vals = [v.prob_g, v.prob_o, v.prob_r, v.prob_n, v.rd, v.ind, v.bud, v.abfa, v.bld, v.aba, v.lum];
        s.push_str(&format!("{},{},{}", r.city, r.cell.0, r.cell.1));
        for x in vals {
            s.push_str(&format!(",{x}"));
        }
        s.push('\n');
    }
    s
}

pub fn parse_features_csv(text: &str, source: &str) -> Result<Vec<CellFeatures>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Format(format!("{source}: {e}")))?.clone();
    let idx: Vec<usize> = FEATURES_HEADER
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::Schema { file: source.to_string(), column: name.to_string() })
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| Error::Parse { line, column: 1, message: format!("{source}: {e}") })?;
        let num = |k: usize| -> Result<f64> {
            let f = rec.get(idx[k]).unwrap_or("");
            f.parse::<f64>().map_err(|_| Error::Parse {
                line,
                column: idx[k] + 1,
                message: format!("{source}: `{f}` is not a number in column {}", FEATURES_HEADER[k]),
            })
        };
        let int = |k: usize| -> Result<i64> {
            let f = rec.get(idx[k]).unwrap_or("");
            f.parse::<i64>().map_err(|_| Error::Parse { line, column: idx[k] + 1, message: format!("{source}: bad cell index `{f}`") })
        };
        let vector = MorphoVector {
            prob_g: num(3)?,
            prob_o: num(4)?,
            prob_r: num(5)?,
            prob_n: num(6)?,
            rd: num(7)?,
            ind: num(8)?,
            bud: num(9)?,
            abfa: num(10)?,
            bld: num(11)?,
            aba: num(12)?,
            lum: num(13)?,
        };
        out.push(CellFeatures { city: rec.get(idx[0]).unwrap_or("").to_string(), cell: (int(1)?, int(2)?), vector });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::RoadCategory;
    use crate::geodata::{cell_at, GeoPoint, LandUse};
    use crate::road_graph::build_graph;
    use crate::road_graph::fixtures::{street_grid, way};
    use proptest::prelude::*;

    fn rect(w: f64, s: f64, e: f64, n: f64) -> Polygon {
        Polygon::from_ring(vec![GeoPoint::new(w, s), GeoPoint::new(e, s), GeoPoint::new(e, n), GeoPoint::new(w, n)]).unwrap()
    }

    #[test]
    fn lum_values() {
        assert_eq!(land_use_mixture(&[3.0]).unwrap(), 0.0);
        assert_eq!(land_use_mixture(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((land_use_mixture(&[1.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let oracle = -(0.5f64 * 0.5f64.ln() + 0.3 * 0.3f64.ln() + 0.2 * 0.2f64.ln());
        let got = land_use_mixture(&[0.5, 0.3, 0.2]).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 1.0297).abs() < 1e-4);
        for n in 1..=6 {
            assert!((land_use_mixture(&vec![2.5; n]).unwrap() - (n as f64).ln()).abs() < 1e-12);
        }
        assert!(land_use_mixture(&[-1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn lum_permutation_invariant_and_bounded(mut a in proptest::collection::vec(0.0f64..10.0, 1..7)) {
            let h = land_use_mixture(&a).unwrap();
            prop_assert!(h >= 0.0 && h <= (a.len() as f64).ln() + 1e-12);
            a.reverse();
            prop_assert!((land_use_mixture(&a).unwrap() - h).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_cell_keeps_probs_only() {
        let cell = cell_at(21600, 10800);
        let p = CategoryProbs::one_hot(RoadCategory::Radial);
        let v = compute_indices(&cell, &UrbanExtract::default(), &RoadGraph::default(), &p);
        assert_eq!(v.baseline(), [0.0; 7]);
        assert_eq!(v.prob_r, 1.0);
    }

    #[test]
    fn building_density_uses_union_and_clipping() {
        let cell = cell_at(21600, 10799);
        let b = cell.bbox;
        let (w, h) = (b.east - b.west, b.north - b.south);
        // the west half twice (overlap), plus a footprint straddling the east edge
        let half = rect(b.west, b.south, b.west + w / 2.0, b.north);
        let straddle = rect(b.east - w / 4.0, b.south, b.east + w / 4.0, b.south + h / 2.0);
        let extract = UrbanExtract { buildings: vec![half.clone(), half.clone(), straddle.clone()], ..Default::default() };
        let v = compute_indices(&cell, &extract, &RoadGraph::default(), &CategoryProbs::UNIFORM);
        let expected = (polygon_area_m2(&half) + polygon_area_m2(&straddle) / 2.0) / (cell.area_km2 * 1e6);
        assert!((v.bud - expected).abs() < 1e-3, "{} vs {expected}", v.bud);
        let mean = (2.0 * polygon_area_m2(&half) + polygon_area_m2(&straddle)) / 3.0;
        assert!((v.abfa - mean).abs() < 1e-9 * mean);

        let cover = UrbanExtract { buildings: vec![b.expand(0.001).to_polygon(); 3], ..Default::default() };
        let v = compute_indices(&cell, &cover, &RoadGraph::default(), &CategoryProbs::UNIFORM);
        assert!(v.bud <= 1.0 && v.bud > 0.999);
    }

    #[test]
    fn land_use_in_cell() {
        let cell = cell_at(21600, 10799);
        let b = cell.bbox;
        let mid = (b.west + b.east) / 2.0;
        let lu = |poly: Polygon, c: &str| LandUse { polygon: poly, category: c.to_string() };
        let extract = UrbanExtract {
            landuse: vec![lu(rect(b.west, b.south, mid, b.north), "residential"), lu(rect(mid, b.south, b.east + 1.0, b.north), "commercial")],
            ..Default::default()
        };
        let v = compute_indices(&cell, &extract, &RoadGraph::default(), &CategoryProbs::UNIFORM);
        assert!((v.lum - 2f64.ln()).abs() < 1e-6, "{}", v.lum);
    }

    #[test]
    fn street_grid_cell() {
        let cell = cell_at(21600, 10799);
        let b = cell.bbox;
        let d = (b.east - b.west) / 5.0;
        let g = build_graph(&street_grid((b.west + d, b.south + d), d));
        let v = compute_indices(&cell, &UrbanExtract::default(), &g, &CategoryProbs::UNIFORM);
        assert!((v.ind - 9.0 / cell.area_km2).abs() < 1e-9);
        assert!((v.bld - 4.0 / cell.area_km2).abs() < 1e-9);
        assert!((v.rd - total_length(&g, &cell) / cell.area_km2).abs() < 1e-9);
        let opts = MorphoOptions { min_tier: RoadTier::Primary };
        let v2 = compute_indices_with(&cell, &UrbanExtract::default(), &g, &extract_faces(&g), &CategoryProbs::UNIFORM, &opts);
        assert_eq!(v2.ind, 0.0);
    }

    #[test]
    fn doubling_geometry_doubles_densities() {
        let cell = cell_at(21600, 10799);
        let b = cell.bbox;
        let d = (b.east - b.west) / 12.0;
        let one = street_grid((b.west + 2.0 * d, b.south + 2.0 * d), d);
        let mut two = one.clone();
        two.extend(street_grid((b.west + 7.0 * d, b.south + 7.0 * d), d * 0.999));
        let v1 = compute_indices(&cell, &UrbanExtract::default(), &build_graph(&one), &CategoryProbs::UNIFORM);
        let v2 = compute_indices(&cell, &UrbanExtract::default(), &build_graph(&two), &CategoryProbs::UNIFORM);
        assert!((v2.ind / v1.ind - 2.0).abs() < 1e-9);
        assert!((v2.bld / v1.bld - 2.0).abs() < 1e-9);
        assert!((v2.rd / v1.rd - 2.0).abs() < 2e-3);

        let three = vec![way("primary", &[(b.west + 3.0 * d, b.south), (b.west + 3.0 * d, b.north)])];
        let mut six = three.clone();
        six.push(way("primary", &[(b.west + 6.0 * d, b.south), (b.west + 6.0 * d, b.north)]));
        let r1 = compute_indices(&cell, &UrbanExtract::default(), &build_graph(&three), &CategoryProbs::UNIFORM).rd;
        let r2 = compute_indices(&cell, &UrbanExtract::default(), &build_graph(&six), &CategoryProbs::UNIFORM).rd;
        assert!((r2 / r1 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn matrix_columns() {
        let v = MorphoVector { prob_g: 0.1, prob_o: 0.2, prob_r: 0.3, prob_n: 0.4, rd: 1.0, lum: 7.0, ..Default::default() };
        let (names, rows) = assemble_matrix(&[v], false);
        assert_eq!(names, BASELINE_COLUMNS);
        assert_eq!(rows[0], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 7.0]);
        let (names, rows) = assemble_matrix(&[v], true);
        assert_eq!(names.len(), 11);
        assert_eq!(&names[..4], &PROB_COLUMNS);
        assert_eq!(&rows[0][..5], &[0.3, 0.2, 0.1, 0.4, 1.0]);
        assert_eq!(assemble_matrix(&[v], true).0, names);
    }

    #[test]
    fn features_csv_round_trip() {
        let rows = vec![CellFeatures {
            city: "a".into(),
            cell: (-3, 7),
            vector: MorphoVector { prob_g: 0.1, prob_o: 0.2, prob_r: 0.3, prob_n: 0.4, rd: 22444.9, ind: 1.0 / 3.0, bud: 0.58, abfa: 1e-17, bld: 2.0, aba: 3.0, lum: 1.0297 },
        }];
        let text = write_features_csv(&rows);
        assert!(text.starts_with("city,cell_col,cell_row,prob_g,prob_o,prob_r,prob_n,rd,ind,bud,abfa,bld,aba,lum\n"));
        assert_eq!(parse_features_csv(&text, "f.csv").unwrap(), rows);
        assert!(matches!(parse_features_csv("city,cell_col\n", "f.csv"), Err(Error::Schema { .. })));
    }
}
