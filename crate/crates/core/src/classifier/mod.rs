//! Four-category road-pattern probabilities from a residual CNN, a graph
//! heuristic or an external CSV, plus evaluation.

pub mod cnn;
mod eval;
mod external;
mod heuristic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::cnn::{cnn_forward, cnn_train, CnnArch, CnnInput, CnnModel, TrainConfig, TrainOutcome};
pub use self::eval::{evaluate, EvalReport, RocPoint};
pub use self::external::{load_external_probs, write_probs_csv, ExternalProbs, PROBS_HEADER};
pub use self::heuristic::{classify_heuristic, HeuristicScores, NO_PATTERN_MAJOR_DENSITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadCategory {
    Gridiron,
    Organic,
    Radial,
    NoPattern,
}

impl RoadCategory {
    pub const ALL: [RoadCategory; 4] = [
        RoadCategory::Gridiron,
        RoadCategory::Organic,
        RoadCategory::Radial,
        RoadCategory::NoPattern,
    ];
    pub const PATTERNED: [RoadCategory; 3] = [RoadCategory::Gridiron, RoadCategory::Organic, RoadCategory::Radial];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RoadCategory::Gridiron => "gridiron",
            RoadCategory::Organic => "organic",
            RoadCategory::Radial => "radial",
            RoadCategory::NoPattern => "nopattern",
        }
    }
}

impl fmt::Display for RoadCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoadCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gridiron" => Ok(RoadCategory::Gridiron),
            "organic" => Ok(RoadCategory::Organic),
            "radial" => Ok(RoadCategory::Radial),
            "nopattern" | "no pattern" | "no_pattern" => Ok(RoadCategory::NoPattern),
            other => Err(Error::argument(format!("unknown road category `{other}`"))),
        }
    }
}

/// Probability vector over [`RoadCategory::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryProbs(pub [f64; 4]);

impl CategoryProbs {
    pub const UNIFORM: CategoryProbs = CategoryProbs([0.25; 4]);

    /// Accepts a vector of probabilities in `[0, 1]` summing to 1 within 1e-6.
    pub fn new(p: [f64; 4]) -> Result<Self> {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::argument(format!("probabilities out of range: {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::argument(format!("probabilities sum to {s}")));
        }
        Ok(CategoryProbs(p))
    }

    /// Numerically stable softmax.
    pub fn softmax(logits: [f64; 4]) -> Self {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = logits.map(|z| (z - m).exp());
        let s: f64 = e.iter().sum();
        CategoryProbs(e.map(|v| v / s))
    }

    pub fn get(&self, c: RoadCategory) -> f64 {
        self.0[c.index()]
    }

    pub fn one_hot(c: RoadCategory) -> Self {
        let mut p = [0.0; 4];
        p[c.index()] = 1.0;
        CategoryProbs(p)
    }
}

/// Highest-probability category; ties go to the lower index.
pub fn assign_category(probs: &CategoryProbs) -> RoadCategory {
    let mut best = 0;
    for i in 1..4 {
        if probs.0[i] > probs.0[best] {
            best = i;
        }
    }
    RoadCategory::ALL[best]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_and_ties() {
        assert_eq!(assign_category(&CategoryProbs([0.1, 0.2, 0.3, 0.4])), RoadCategory::NoPattern);
        assert_eq!(assign_category(&CategoryProbs([1.0, 0.0, 0.0, 0.0])), RoadCategory::Gridiron);
        assert_eq!(assign_category(&CategoryProbs::UNIFORM), RoadCategory::Gridiron);
        assert_eq!(assign_category(&CategoryProbs([0.1, 0.4, 0.4, 0.1])), RoadCategory::Organic);
    }

    #[test]
    fn names_round_trip() {
        for c in RoadCategory::ALL {
            assert_eq!(c.name().parse::<RoadCategory>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.name()));
        }
        assert!("grid".parse::<RoadCategory>().is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        assert_eq!(CategoryProbs::softmax([0.0; 4]), CategoryProbs::UNIFORM);
    }

    #[test]
    fn probs_validation() {
        assert!(CategoryProbs::new([0.5, 0.5, 0.0, 0.0]).is_ok());
        assert!(CategoryProbs::new([0.5, 0.6, 0.0, 0.0]).is_err());
        assert!(CategoryProbs::new([-0.1, 0.6, 0.5, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(z in proptest::array::uniform4(-50.0f64..50.0), c in -100.0f64..100.0) {
            let p = CategoryProbs::softmax(z);
            prop_assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.0.iter().all(|v| (0.0..=1.0).contains(v)));
            let q = CategoryProbs::softmax(z.map(|v| v + c));
            for i in 0..4 {
                prop_assert!((p.0[i] - q.0[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_scale_invariant(p in proptest::array::uniform4(0.0f64..1.0), e in -8i32..8) {
            // powers of two scale exactly
            let k = 2f64.powi(e);
            let a = assign_category(&CategoryProbs(p));
            let b = assign_category(&CategoryProbs(p.map(|v| v * k)));
            prop_assert_eq!(a, b);
        }
    }
}
