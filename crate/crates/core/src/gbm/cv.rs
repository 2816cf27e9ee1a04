//! k-fold cross-validated grid search.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit, metrics, GbmParams, Metrics};
use crate::error::{Error, Result};

/// Seeded disjoint cover of `0..n` by `k` folds whose sizes differ by at
/// most one. Each fold is sorted.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::argument("k-fold needs k ≥ 2"));
    }
    if n < k {
        return Err(Error::argument(format!("{n} rows cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in order.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCandidate {
    pub params: GbmParams,
    pub folds: Vec<Metrics>,
    pub mean_rmse: f64,
    pub mean_mae: f64,
    /// Mean over folds with a defined R².
    pub mean_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_index: usize,
    pub best: GbmParams,
    pub candidates: Vec<CvCandidate>,
}

/// Evaluates every candidate on the same folds; the lowest mean validation
/// RMSE wins, ties going to the earlier candidate.
pub fn cv_grid_search(x: &[Vec<f64>], y: &[f64], grid: &[GbmParams], k: usize, seed: u64) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::argument("parameter grid is empty"));
    }
    if x.len() != y.len() {
        return Err(Error::argument("feature and target lengths differ"));
    }
    let folds = kfold_indices(x.len(), k, seed)?;
    let mut candidates = Vec::with_capacity(grid.len());
    for params in grid {
        let mut per_fold = Vec::with_capacity(k);
        for held in &folds {
            let mut is_held = vec![false; x.len()];
            held.iter().for_each(|&i| is_held[i] = true);
            let (mut xt, mut yt) = (Vec::new(), Vec::new());
            for i in (0..x.len()).filter(|&i| !is_held[i]) {
                xt.push(x[i].clone());
                yt.push(y[i]);
            }
            let model = fit(&xt, &yt, params)?;
            let xv: Vec<Vec<f64>> = held.iter().map(|&i| x[i].clone()).collect();
            let yv: Vec<f64> = held.iter().map(|&i| y[i]).collect();
            let pred = model.predict(&xv)?;
            per_fold.push(if yv.len() >= 2 {
                metrics(&yv, &pred)?
            } else {
                let e = (yv[0] - pred[0]).abs();
                Metrics { r2: None, rmse: e, mae: e }
            });
        }
        let n = per_fold.len() as f64;
        let r2s: Vec<f64> = per_fold.iter().filter_map(|m| m.r2).collect();
        candidates.push(CvCandidate {
            params: *params,
            mean_rmse: per_fold.iter().map(|m| m.rmse).sum::<f64>() / n,
            mean_mae: per_fold.iter().map(|m| m.mae).sum::<f64>() / n,
            mean_r2: (!r2s.is_empty()).then(|| r2s.iter().sum::<f64>() / r2s.len() as f64),
            folds: per_fold,
        });
    }
    let best_index = (0..candidates.len())
        .fold(0, |b, i| if candidates[i].mean_rmse < candidates[b].mean_rmse { i } else { b });
    Ok(CvResult { best_index, best: grid[best_index], candidates })
}
