//! Post-hoc analyses: city clustering by category shares, per-category
//! vitality statistics, density curves, top-N tables, model comparison
//! and the categorical map.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::classifier::{CategoryProbs, RoadCategory};
use crate::error::{Error, Result};
use crate::gbm::{fit, metrics, GbmParams, Metrics};
use crate::geodata::{CellId, GridCell};
use crate::morpho::MorphoVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityShares {
    pub city: String,
    /// Gridiron, organic, radial.
    pub shares: [f64; 3],
}

/// Shares of the patterned categories per city (sorted by city). Cities
/// without patterned cells are returned separately.
pub fn category_shares(cells: &[(String, RoadCategory)]) -> (Vec<CityShares>, Vec<String>) {
    let mut counts: BTreeMap<&str, [usize; 4]> = BTreeMap::new();
    for (city, c) in cells {
        counts.entry(city.as_str()).or_default()[c.index()] += 1;
    }
    let mut shares = Vec::new();
    let mut excluded = Vec::new();
    for (city, n) in counts {
        let total = n[0] + n[1] + n[2];
        if total == 0 {
            log::warn!("city {city} has no patterned cells; excluded from shares");
            excluded.push(city.to_string());
            continue;
        }
        let t = total as f64;
        shares.push(CityShares { city: city.to_string(), shares: [n[0] as f64 / t, n[1] as f64 / t, n[2] as f64 / t] });
    }
    (shares, excluded)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub centroids: Vec<[f64; 3]>,
    pub inertia: f64,
    /// Restart that produced the result.
    pub restart: usize,
}

pub const KMEANS_RESTARTS: usize = 50;
const KMEANS_MAX_ITER: usize = 300;

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Nearest centroid, ties to the lower index.
fn nearest(p: &[f64; 3], centroids: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(points: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    while centroids.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut idx = points.len() - 1;
            for (i, &w) in d.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick]);
    }
    centroids
}

/// One Lloyd run; returns labels, centroids and the inertia after each
/// assignment step.
fn kmeans_once(points: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<[f64; 3]>, Vec<f64>) {
    let mut centroids = kmeans_pp(points, k, rng);
    let mut labels = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    let mut reseeded = vec![false; k];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            inertia += d;
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
        }
        trace.push(inertia);
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            (0..3).for_each(|d| sums[l][d] += p[d]);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].map(|s| s / counts[j] as f64);
            } else if !reseeded[j] {
                // move an empty cluster onto the worst-served point, once
                reseeded[j] = true;
                let far = (0..points.len())
                    .max_by(|&a, &b| dist2(&points[a], &centroids[labels[a]]).total_cmp(&dist2(&points[b], &centroids[labels[b]])).then(b.cmp(&a)))
                    .expect("points are non-empty");
                centroids[j] = points[far];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (labels, centroids, trace)
}

/// k-means over the share vectors with k-means++ seeding and
/// [`KMEANS_RESTARTS`] restarts; the lowest inertia wins (earliest restart
/// on ties). Labels are renumbered in order of first appearance.
pub fn cluster_cities(shares: &[CityShares], k: usize, seed: u64) -> Result<Clustering> {
    if k < 1 {
        return Err(Error::argument("k must be at least 1"));
    }
    if k > shares.len() {
        return Err(Error::argument(format!("k = {k} exceeds the {} cities", shares.len())));
    }
    let points: Vec<[f64; 3]> = shares.iter().map(|s| s.shares).collect();
    let mut best: Option<Clustering> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(restart as u64));
        let (labels, centroids, _) = kmeans_once(&points, k, &mut rng);
        let inertia: f64 = points.iter().zip(&labels).map(|(p, &l)| dist2(p, &centroids[l])).sum();
        if best.as_ref().map_or(true, |b| inertia < b.inertia) {
            best = Some(Clustering { labels, centroids, inertia, restart });
        }
    }
    let mut b = best.expect("at least one restart");
    let mut remap: Vec<Option<usize>> = vec![None; k];
    let mut next = 0;
    for l in &b.labels {
        if remap[*l].is_none() {
            remap[*l] = Some(next);
            next += 1;
        }
    }
    let mut centroids = vec![[0.0; 3]; k];
    for old in 0..k {
        let new = match remap[old] {
            Some(n) => n,
            None => {
                next += 1;
                next - 1
            }
        };
        centroids[new] = b.centroids[old];
        remap[old] = Some(new);
    }
    b.labels = b.labels.iter().map(|&l| remap[l].expect("mapped")).collect();
    b.centroids = centroids;
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Lower middle value for even counts.
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Some(Summary { n, mean, median: sorted[(n - 1) / 2], std: var.sqrt(), min: sorted[0], max: sorted[n - 1] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: RoadCategory,
    pub summary: Summary,
}

/// Score summaries per category, in category order; empty categories are
/// omitted.
pub fn stats_by_category(scores: &[f64], categories: &[RoadCategory]) -> Result<Vec<CategoryStats>> {
    if scores.len() != categories.len() {
        return Err(Error::argument("scores and categories differ in length"));
    }
    Ok(RoadCategory::ALL
        .iter()
        .filter_map(|&c| {
            let v: Vec<f64> = scores.iter().zip(categories).filter(|(_, &k)| k == c).map(|(s, _)| *s).collect();
            summarize(&v).map(|summary| CategoryStats { category: c, summary })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Category proportions; `None` for an empty bin.
    pub proportions: Option<[f64; 4]>,
}

/// Category mix within the score ranges [0,20), [20,40), [40,60),
/// [60,80) and [80,100].
pub fn proportion_by_range(scores: &[f64], categories: &[RoadCategory]) -> Result<Vec<RangeBin>> {
    if scores.len() != categories.len() {
        return Err(Error::argument("scores and categories differ in length"));
    }
    let mut counts = [[0usize; 4]; 5];
    for (&s, c) in scores.iter().zip(categories) {
        if !(0.0..=100.0).contains(&s) {
            return Err(Error::argument(format!("score {s} outside [0, 100]")));
        }
        let b = ((s / 20.0).floor() as usize).min(4);
        counts[b][c.index()] += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .map(|(b, n)| {
            let count: usize = n.iter().sum();
            RangeBin {
                lo: 20.0 * b as f64,
                hi: 20.0 * (b + 1) as f64,
                count,
                proportions: (count > 0).then(|| n.map(|v| v as f64 / count as f64)),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

pub const KDE_POINTS: usize = 256;

/// Silverman's rule of thumb, `0.9 · min(σ, IQR/1.34) · n^(-1/5)`, falling
/// back to σ and then to 1 for degenerate samples.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1.0
    }
}

/// Gaussian KDE sampled at [`KDE_POINTS`] points over `[0, 100]` widened to
/// cover three bandwidths beyond the sample range.
pub fn kde_curve(samples: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve> {
    if samples.len() < 2 {
        return Err(Error::argument("a density curve needs at least 2 samples"));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(_) => return Err(Error::argument("bandwidth must be positive")),
        None => silverman_bandwidth(samples),
    };
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = ((min - 3.0 * h).min(0.0), (max + 3.0 * h).max(100.0));
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let x: Vec<f64> = (0..KDE_POINTS).map(|i| lo + (hi - lo) * i as f64 / (KDE_POINTS - 1) as f64).collect();
    let density = x
        .iter()
        .map(|&t| norm * samples.iter().map(|s| (-0.5 * ((t - s) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Ok(KdeCurve { bandwidth: h, x, density })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCell {
    pub category: RoadCategory,
    pub score: f64,
    pub vector: MorphoVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopRow {
    pub category: RoadCategory,
    pub n_used: usize,
    /// Fewer cells than requested were available.
    pub short: bool,
    /// Means of the baseline indices, in [`crate::morpho::BASELINE_COLUMNS`] order.
    pub mean_indices: [f64; 7],
    pub mean_score: f64,
}

/// Mean indices and score of the `n` highest-scoring cells of each
/// patterned category (earlier cells win score ties).
pub fn top_n_table(cells: &[ScoredCell], n: usize) -> Vec<TopRow> {
    RoadCategory::PATTERNED
        .iter()
        .filter_map(|&c| {
            let mut members: Vec<&ScoredCell> = cells.iter().filter(|x| x.category == c).collect();
            if members.is_empty() {
                return None;
            }
            members.sort_by(|a, b| b.score.total_cmp(&a.score));
            let used = &members[..n.min(members.len())];
            if used.is_empty() {
                return None;
            }
            let k = used.len() as f64;
            let mut mean_indices = [0.0; 7];
            for m in used {
                for (acc, v) in mean_indices.iter_mut().zip(m.vector.baseline()) {
                    *acc += v;
                }
            }
            Some(TopRow {
                category: c,
                n_used: used.len(),
                short: used.len() < n,
                mean_indices: mean_indices.map(|v| v / k),
                mean_score: used.iter().map(|m| m.score).sum::<f64>() / k,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub n_train: usize,
    pub n_test: usize,
    pub baseline: Metrics,
    pub augmented: Metrics,
    pub delta_r2: Option<f64>,
    pub delta_rmse: f64,
    pub delta_mae: f64,
}

/// Seeded 80/20 split of `0..n`: (train, test), each sorted.
pub fn holdout_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * 0.8).round() as usize;
    let (mut train, mut test) = (order[..n_train].to_vec(), order[n_train..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Fits baseline and augmented models with the same parameters on the same
/// seeded 80/20 split and reports their test metrics.
pub fn compare_models(x_base: &[Vec<f64>], x_aug: &[Vec<f64>], y: &[f64], params: &GbmParams, seed: u64) -> Result<Comparison> {
    if x_base.len() != y.len() || x_aug.len() != y.len() {
        return Err(Error::argument("feature matrices and targets differ in length"));
    }
    let (train, test) = holdout_split(y.len(), seed);
    if train.len() < 2 || test.len() < 2 {
        return Err(Error::argument(format!("{} rows are too few for an 80/20 comparison", y.len())));
    }
    let pick = |x: &[Vec<f64>], idx: &[usize]| idx.iter().map(|&i| x[i].clone()).collect::<Vec<_>>();
    let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let y_test: Vec<f64> = test.iter().map(|&i| y[i]).collect();
    let eval = |x: &[Vec<f64>]| -> Result<Metrics> {
        let model = fit(&pick(x, &train), &y_train, params)?;
        metrics(&y_test, &model.predict(&pick(x, &test))?)
    };
    let baseline = eval(x_base)?;
    let augmented = eval(x_aug)?;
    Ok(Comparison {
        n_train: train.len(),
        n_test: test.len(),
        delta_r2: augmented.r2.zip(baseline.r2).map(|(a, b)| a - b),
        delta_rmse: augmented.rmse - baseline.rmse,
        delta_mae: augmented.mae - baseline.mae,
        baseline,
        augmented,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapCell {
    pub city: String,
    pub cell: GridCell,
    pub probs: CategoryProbs,
    pub category: RoadCategory,
    pub score: Option<f64>,
}

/// One polygon feature per cell carrying category, probabilities and score.
pub fn export_categorical_map(cells: &[MapCell]) -> String {
    let features: Vec<Value> = cells
        .iter()
        .map(|m| {
            let ring: Vec<[f64; 2]> = m.cell.bbox.ring().iter().map(|p| [p.lon, p.lat]).collect();
            json!({
                "type": "Feature",
                "properties": {
                    "city": m.city,
                    "cell_col": m.cell.col,
                    "cell_row": m.cell.row,
                    "category": m.category.name(),
                    "p_gridiron": m.probs.0[0],
                    "p_organic": m.probs.0[1],
                    "p_radial": m.probs.0[2],
                    "p_nopattern": m.probs.0[3],
                    "score": m.score,
                },
                "geometry": { "type": "Polygon", "coordinates": [ring] },
            })
        })
        .collect();
    let fc = json!({ "type": "FeatureCollection", "features": features });
    serde_json::to_string_pretty(&fc).expect("JSON values serialize")
}

/// Reads back `(city, cell, category)` from a categorical map.
pub fn parse_categorical_map(text: &str) -> Result<Vec<(String, CellId, RoadCategory)>> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), column: e.column(), message: e.to_string() })?;
    let features = v["features"].as_array().ok_or_else(|| Error::Format("categorical map has no features array".into()))?;
    features
        .iter()
        .map(|f| {
            let p = &f["properties"];
            let col = p["cell_col"].as_i64().ok_or_else(|| Error::Format("feature without cell_col".into()))?;
            let row = p["cell_row"].as_i64().ok_or_else(|| Error::Format("feature without cell_row".into()))?;
            let cat: RoadCategory = p["category"].as_str().unwrap_or("").parse()?;
            Ok((p["city"].as_str().unwrap_or("").to_string(), (col, row), cat))
        })
        .collect()
}
