use serde::{Deserialize, Serialize};

use super::{assign_category, CategoryProbs, RoadCategory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Row = true class, column = predicted; rows normalized by support.
    /// `None` for classes absent from the test set.
    pub confusion: [Option<[f64; 4]>; 4],
    pub counts: [[usize; 4]; 4],
    pub support: [usize; 4],
    pub overall_accuracy: f64,
    /// One-vs-rest AUC, `None` when the class has no positives or no negatives.
    pub auc: [Option<f64>; 4],
    pub roc: [Vec<RocPoint>; 4],
}

impl EvalReport {
    /// Fixed-width text rendering of the confusion matrix and AUCs.
    pub fn to_text(&self) -> String {
        let mut s = String::from("true\\pred  ");
        for c in RoadCategory::ALL {
            s.push_str(&format!("{:>10}", c.name()));
        }
        s.push_str("       AUC     n\n");
        for c in RoadCategory::ALL {
            s.push_str(&format!("{:<11}", c.name()));
            match self.confusion[c.index()] {
                Some(row) => row.iter().for_each(|v| s.push_str(&format!("{v:>10.3}"))),
                None => (0..4).for_each(|_| s.push_str(&format!("{:>10}", "-"))),
            }
            match self.auc[c.index()] {
                Some(a) => s.push_str(&format!("{a:>10.3}")),
                None => s.push_str(&format!("{:>10}", "-")),
            }
            s.push_str(&format!("{:>6}\n", self.support[c.index()]));
        }
        s.push_str(&format!("overall accuracy {:.4}\n", self.overall_accuracy));
        s
    }
}

/// Confusion matrix, accuracy and one-vs-rest ROC/AUC for predicted
/// probabilities against true labels.
pub fn evaluate(predictions: &[(CategoryProbs, RoadCategory)]) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::argument("evaluation set is empty"));
    }
    let mut counts = [[0usize; 4]; 4];
    for (p, truth) in predictions {
        counts[truth.index()][assign_category(p).index()] += 1;
    }
    let support = counts.map(|row| row.iter().sum::<usize>());
    let correct: usize = (0..4).map(|i| counts[i][i]).sum();
    let confusion = std::array::from_fn(|i| {
        (support[i] > 0).then(|| counts[i].map(|c| c as f64 / support[i] as f64))
    });
    let mut auc = [None; 4];
    let mut roc: [Vec<RocPoint>; 4] = Default::default();
    for c in RoadCategory::ALL {
        let scored: Vec<(f64, bool)> = predictions.iter().map(|(p, t)| (p.get(c), *t == c)).collect();
        let (points, area) = roc_curve(&scored);
        roc[c.index()] = points;
        auc[c.index()] = area;
    }
    Ok(EvalReport {
        confusion,
        counts,
        support,
        overall_accuracy: correct as f64 / predictions.len() as f64,
        auc,
        roc,
    })
}

/// Threshold sweep from the highest score down; tied scores move together.
fn roc_curve(scored: &[(f64, bool)]) -> (Vec<RocPoint>, Option<f64>) {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: if neg > 0 { fp as f64 / neg as f64 } else { 0.0 },
            tpr: if pos > 0 { tp as f64 / pos as f64 } else { 0.0 },
        });
    }
    if pos == 0 || neg == 0 {
        return (points, None);
    }
    let area = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    (points, Some(area))
}
