//! Gradient-boosted regression trees on quantile histograms, with optional
//! gradient-based one-side sampling (GOSS).

mod cv;
mod io;
mod tree;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::cv::{cv_grid_search, kfold_indices, CvCandidate, CvResult};
pub use self::tree::{RegressionTree, TreeNode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goss {
    pub top_rate: f64,
    pub other_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub num_iterations: usize,
    pub learning_rate: f64,
    pub num_leaves: usize,
    pub min_samples_leaf: usize,
    pub max_bins: usize,
    pub goss: Option<Goss>,
    pub seed: u64,
}

impl Default for GbmParams {
    fn default() -> Self {
        GbmParams {
            num_iterations: 200,
            learning_rate: 0.05,
            num_leaves: 15,
            min_samples_leaf: 5,
            max_bins: 255,
            goss: None,
            seed: 0,
        }
    }
}

impl GbmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::argument("learning_rate must be positive"));
        }
        if self.num_leaves < 2 {
            return Err(Error::argument("num_leaves must be at least 2"));
        }
        if !(2..=255).contains(&self.max_bins) {
            return Err(Error::argument("max_bins must lie in 2..=255"));
        }
        if let Some(g) = self.goss {
            let (a, b) = (g.top_rate, g.other_rate);
            if !(a >= 0.0 && b >= 0.0 && a + b > 0.0 && a + b <= 1.0) {
                return Err(Error::argument("GOSS rates need a, b ≥ 0 and 0 < a + b ≤ 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub n_features: usize,
    pub base_score: f64,
    pub shrinkage: f64,
    /// Upper bin bounds per feature: bin `k` holds `edges[k-1] < x <= edges[k]`.
    pub bin_edges: Vec<Vec<f64>>,
    pub trees: Vec<RegressionTree>,
    pub split_counts: Vec<usize>,
}

fn bin_of(edges: &[f64], x: f64) -> u16 {
    edges.partition_point(|&e| e < x) as u16
}

/// Equal-frequency bin bounds taken from the data values themselves.
fn quantile_edges(values: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut uniq = sorted.clone();
    uniq.dedup();
    if uniq.len() <= max_bins {
        uniq.pop();
        return uniq;
    }
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..max_bins).map(|k| sorted[k * n / max_bins - 1]).collect();
    edges.dedup();
    if edges.last() == uniq.last() {
        edges.pop();
    }
    edges
}

/// Arithmetic mean summed in sorted order, so it does not depend on the
/// order of `v`.
pub fn mean(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum::<f64>() / v.len() as f64
}

fn check_matrix(x: &[Vec<f64>], n_features: Option<usize>) -> Result<usize> {
    let nf = n_features.unwrap_or_else(|| x.first().map_or(0, Vec::len));
    for (i, row) in x.iter().enumerate() {
        if row.len() != nf {
            return Err(Error::argument(format!("row {i} has {} features, expected {nf}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument(format!("row {i} contains a non-finite value")));
        }
    }
    Ok(nf)
}

/// Top `floor(a·n)` rows by |gradient| (ties to lower index) plus a uniform
/// sample of `floor(b·n)` of the rest weighted `(1 − a)/b`. Indices are
/// returned in ascending order.
pub fn goss_sample(gradients: &[f64], top_rate: f64, other_rate: f64, seed: u64) -> (Vec<usize>, Vec<f64>) {
    let n = gradients.len();
    let n_top = ((top_rate * n as f64 + 1e-9).floor() as usize).min(n);
    let n_other = ((other_rate * n as f64 + 1e-9).floor() as usize).min(n - n_top);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| gradients[j].abs().total_cmp(&gradients[i].abs()).then(i.cmp(&j)));
    let mut picked: Vec<(usize, f64)> = order[..n_top].iter().map(|&i| (i, 1.0)).collect();
    if n_other > 0 {
        let rest = &order[n_top..];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (1.0 - top_rate) / other_rate;
        picked.extend(rand::seq::index::sample(&mut rng, rest.len(), n_other).into_iter().map(|k| (rest[k], w)));
    }
    picked.sort_by_key(|p| p.0);
    picked.into_iter().unzip()
}

/// Fits a squared-error boosting model.
pub fn fit(x: &[Vec<f64>], y: &[f64], params: &GbmParams) -> Result<GbmModel> {
    params.validate()?;
    if x.len() != y.len() {
        return Err(Error::argument(format!("{} rows but {} targets", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::argument("at least 2 rows are required"));
    }
    let nf = check_matrix(x, None)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("targets contain a non-finite value"));
    }
    let base_score = mean(y);

    // canonical row order makes every accumulation independent of input order
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| {
        x[i].iter()
            .zip(&x[j])
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(y[i].total_cmp(&y[j]))
    });
    let xs: Vec<&Vec<f64>> = order.iter().map(|&i| &x[i]).collect();
    let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let n = ys.len();

    let bin_edges: Vec<Vec<f64>> = (0..nf)
        .map(|f| quantile_edges(&xs.iter().map(|r| r[f]).collect::<Vec<_>>(), params.max_bins))
        .collect();
    let n_bins: Vec<usize> = bin_edges.iter().map(|e| e.len() + 1).collect();
    let bins: Vec<Vec<u16>> = (0..nf).map(|f| xs.iter().map(|r| bin_of(&bin_edges[f], r[f])).collect()).collect();

    let mut tree_sum = vec![0.0; n];
    let mut residual = vec![0.0; n];
    let all_rows: Vec<usize> = (0..n).collect();
    let unit = vec![1.0; n];
    let mut trees = Vec::with_capacity(params.num_iterations);
    let mut split_counts = vec![0usize; nf];

    for it in 0..params.num_iterations {
        for i in 0..n {
            residual[i] = ys[i] - (base_score + params.learning_rate * tree_sum[i]);
        }
        let (rows, weight) = match params.goss {
            None => (all_rows.clone(), unit.clone()),
            Some(g) => {
                let (idx, w) = goss_sample(&residual, g.top_rate, g.other_rate, params.seed.wrapping_add(it as u64));
                let mut weight = vec![0.0; n];
                for (&i, &wi) in idx.iter().zip(&w) {
                    weight[i] = wi;
                }
                (idx, weight)
            }
        };
        let tree = tree::grow_tree(&tree::GrowInput {
            bins: &bins,
            n_bins: &n_bins,
            rows: &rows,
            residual: &residual,
            weight: &weight,
            num_leaves: params.num_leaves,
            min_samples_leaf: params.min_samples_leaf,
        });
        for f in tree.split_features() {
            split_counts[f] += 1;
        }
        for i in 0..n {
            tree_sum[i] += tree.eval_binned(|f| bins[f][i]);
        }
        trees.push(tree);
    }
    Ok(GbmModel { n_features: nf, base_score, shrinkage: params.learning_rate, bin_edges, trees, split_counts })
}

impl GbmModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let bins: Vec<u16> = row.iter().zip(&self.bin_edges).map(|(&v, e)| bin_of(e, v)).collect();
        let s: f64 = self.trees.iter().map(|t| t.eval_binned(|f| bins[f])).sum();
        self.base_score + self.shrinkage * s
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_matrix(x, Some(self.n_features))?;
        Ok(x.iter().map(|r| self.predict_row(r)).collect())
    }

    pub fn feature_importance(&self) -> Vec<usize> {
        self.split_counts.clone()
    }
}

pub fn feature_importance(model: &GbmModel) -> Vec<usize> {
    model.feature_importance()
}

pub fn predict(model: &GbmModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    model.predict(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when the targets have zero variance.
    pub r2: Option<f64>,
    pub rmse: f64,
    pub mae: f64,
}

pub fn metrics(y: &[f64], y_hat: &[f64]) -> Result<Metrics> {
    if y.len() != y_hat.len() || y.len() < 2 {
        return Err(Error::argument("metrics need two equal-length vectors of at least 2 values"));
    }
    let n = y.len() as f64;
    let m = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let mae = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    Ok(Metrics { r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot), rmse: (ss_res / n).sqrt(), mae })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Level {
    High,
    Medium,
    Low,
    NotRelative,
}

/// Strength of relation for an R² value: above 0.5 high, 0.25 to 0.5
/// medium, below 0.25 low, and not relative once reset to 0.
pub fn r2_level(r2: f64) -> R2Level {
    let r2 = r2.max(0.0);
    if r2 > 0.5 {
        R2Level::High
    } else if r2 >= 0.25 {
        R2Level::Medium
    } else if r2 > 0.0 {
        R2Level::Low
    } else {
        R2Level::NotRelative
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    pub(crate) fn step_fixture(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let y = x.iter().map(|r| if r[0] > 0.0 { 1.0 } else { 0.0 }).collect();
        (x, y)
    }

    /// Independent evaluation: walks each tree comparing raw values against
    /// the stored bin bounds.
    fn oracle_predict(m: &GbmModel, row: &[f64]) -> f64 {
        let mut total = 0.0;
        for t in &m.trees {
            let mut k = 0;
            let v = loop {
                match t.nodes[k] {
                    TreeNode::Leaf { value } => break value,
                    TreeNode::Split { feature, bin, left, right } => {
                        let edges = &m.bin_edges[feature];
                        k = if row[feature] <= edges[bin as usize] { left } else { right };
                    }
                }
            };
            total += v;
        }
        m.base_score + m.shrinkage * total
    }

    #[test]
    fn zero_iterations_predict_mean() {
        let (x, y) = step_fixture(50, 1);
        let m = fit(&x, &y, &GbmParams { num_iterations: 0, ..Default::default() }).unwrap();
        let p = m.predict(&x).unwrap();
        assert!(p.iter().all(|&v| v == mean(&y)));
        assert_eq!(metrics(&y, &p).unwrap().r2, Some(0.0));
        assert_eq!(m.feature_importance(), vec![0, 0]);
    }

    #[test]
    fn constant_target_has_no_splits() {
        let (x, _) = step_fixture(40, 2);
        let y = vec![3.25; 40];
        let m = fit(&x, &y, &GbmParams { num_iterations: 10, ..Default::default() }).unwrap();
        assert!(m.trees.iter().all(|t| t.nodes.len() == 1));
        assert!(m.predict(&x).unwrap().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn step_function_is_learned() {
        let (x, y) = step_fixture(200, 3);
        let m = fit(&x, &y, &GbmParams { num_iterations: 50, learning_rate: 0.3, ..Default::default() }).unwrap();
        let p = m.predict(&x).unwrap();
        assert!(metrics(&y, &p).unwrap().r2.unwrap() >= 0.99);
        for (row, &v) in x.iter().zip(&p) {
            assert!((oracle_predict(&m, row) - v).abs() < 1e-12);
        }
        let imp = m.feature_importance();
        assert!(imp[0] > imp[1]);
        let internal: usize = m.trees.iter().map(|t| t.nodes.len() - t.leaf_count()).sum();
        assert_eq!(imp.iter().sum::<usize>(), internal);
        assert!(m.trees.iter().all(|t| t.leaf_count() <= 15));
    }

    #[test]
    fn single_leaf_tree() {
        let m = GbmModel {
            n_features: 1,
            base_score: 2.0,
            shrinkage: 0.5,
            bin_edges: vec![vec![]],
            trees: vec![RegressionTree::leaf(3.0)],
            split_counts: vec![0],
        };
        assert_eq!(m.predict(&[vec![-7.0], vec![9.0]]).unwrap(), vec![3.5, 3.5]);
        assert!(m.predict(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn training_rmse_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f64>> = (0..150).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| (6.0 * r[0]).sin() + r[1] * r[2] + 0.1 * rng.gen_range(-1.0..1.0)).collect();
        let mut prev = f64::INFINITY;
        for iters in 0..40 {
            let m = fit(&x, &y, &GbmParams { num_iterations: iters, learning_rate: 0.2, ..Default::default() }).unwrap();
            let rmse = metrics(&y, &m.predict(&x).unwrap()).unwrap().rmse;
            assert!(rmse <= prev + 1e-12, "iteration {iters}: {rmse} > {prev}");
            prev = rmse;
        }
    }

    #[test]
    fn goss_examples() {
        let g: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let (idx, w) = goss_sample(&g, 1.0, 0.0, 1);
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert!(w.iter().all(|&v| v == 1.0));
        let (idx, w) = goss_sample(&g, 0.2, 0.1, 1);
        assert_eq!(idx.len(), 3);
        assert!(idx.contains(&9) && idx.contains(&8));
        let sampled: Vec<f64> = idx.iter().zip(&w).filter(|(i, _)| **i < 8).map(|(_, w)| *w).collect();
        assert_eq!(sampled.len(), 1);
        assert!((sampled[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_goss_equals_plain() {
        let (x, y) = step_fixture(120, 6);
        let plain = fit(&x, &y, &GbmParams { num_iterations: 20, ..Default::default() }).unwrap();
        let goss = fit(&x, &y, &GbmParams { num_iterations: 20, goss: Some(Goss { top_rate: 1.0, other_rate: 0.0 }), ..Default::default() }).unwrap();
        assert_eq!(plain.to_checkpoint(), goss.to_checkpoint());
        let sampled = fit(&x, &y, &GbmParams { num_iterations: 20, goss: Some(Goss { top_rate: 0.2, other_rate: 0.3 }), ..Default::default() }).unwrap();
        assert!(metrics(&y, &sampled.predict(&x).unwrap()).unwrap().r2.unwrap() > 0.8);
    }

    #[test]
    fn invalid_inputs() {
        let (mut x, y) = step_fixture(10, 7);
        assert!(fit(&x[..1], &y[..1], &GbmParams::default()).is_err());
        assert!(fit(&x, &y, &GbmParams { learning_rate: 0.0, ..Default::default() }).is_err());
        assert!(fit(&x, &y, &GbmParams { num_leaves: 1, ..Default::default() }).is_err());
        assert!(fit(&x, &y, &GbmParams { goss: Some(Goss { top_rate: 0.8, other_rate: 0.5 }), ..Default::default() }).is_err());
        x[3][1] = f64::NAN;
        assert!(fit(&x, &y, &GbmParams::default()).is_err());
    }

    #[test]
    fn metrics_examples() {
        let y = [1.0, 2.0, 4.0];
        assert_eq!(metrics(&y, &y).unwrap(), Metrics { r2: Some(1.0), rmse: 0.0, mae: 0.0 });
        let m = metrics(&[2.0, 2.0], &[1.0, 3.0]).unwrap();
        assert_eq!((m.r2, m.rmse, m.mae), (None, 1.0, 1.0));
        assert!(metrics(&y, &y[..2]).is_err());
    }

    #[test]
    fn r2_levels() {
        assert_eq!(r2_level(0.6), R2Level::High);
        assert_eq!(r2_level(0.5), R2Level::Medium);
        assert_eq!(r2_level(0.3), R2Level::Medium);
        assert_eq!(r2_level(0.25), R2Level::Medium);
        assert_eq!(r2_level(0.1), R2Level::Low);
        assert_eq!(r2_level(0.0), R2Level::NotRelative);
        assert_eq!(r2_level(-0.2443), R2Level::NotRelative);
    }

    #[test]
    fn quantile_binning() {
        assert_eq!(quantile_edges(&[3.0, 1.0, 2.0, 2.0], 255), vec![1.0, 2.0]);
        let many: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let e = quantile_edges(&many, 4);
        assert_eq!(e, vec![249.0, 499.0, 749.0]);
        assert_eq!(bin_of(&e, 249.0), 0);
        assert_eq!(bin_of(&e, 249.5), 1);
        assert_eq!(bin_of(&e, 1e9), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn row_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let y: Vec<f64> = x.iter().map(|r| r[0] * 3.0 + r[1] * r[1] + rng.gen_range(0.0..0.1)).collect();
            let params = GbmParams { num_iterations: 15, min_samples_leaf: 3, ..Default::default() };
            let a = fit(&x, &y, &params).unwrap();
            let mut perm: Vec<usize> = (0..60).collect();
            perm.shuffle(&mut rng);
            let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let b = fit(&xp, &yp, &params).unwrap();
            prop_assert_eq!(&a.trees, &b.trees);
            prop_assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
        }
    }
}
