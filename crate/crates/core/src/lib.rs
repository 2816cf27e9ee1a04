//! Urban morphology and vitality pipeline.
//!
//! Road networks are rendered into Colored Road Hierarchy Diagrams (CRHDs),
//! classified into four road-pattern categories, and summarised per 30
//! arc-second grid cell together with building, block and land-use indices.
//! Per-cell vitality indicators are standardized into a 0-100 score and a
//! histogram gradient-boosted regression relates morphology to vitality.
//!
//! Stages:
//!
//! * [`geodata`]: OSM XML / GeoJSON / ESRI ASCII ingestion, the grid system, spatial joins.
//! * [`road_graph`]: tiered road graph, intersections, lengths, bearings, blocks.
//! * [`crhd`]: deterministic diagram rasterization.
//! * [`synth`]: procedurally generated labelled road networks.
//! * [`classifier`]: residual CNN, graph heuristic, external probabilities, evaluation.
//! * [`morpho`]: per-cell morphological indices.
//! * [`vitality`]: vitality indicators, standardization, score.
//! * [`gbm`]: gradient-boosted regression trees.
//! * [`analysis`]: post-hoc statistics, clustering and model comparison.
//! * [`pipeline`]: configuration, stage files and the end-to-end run.

pub mod analysis;
pub mod classifier;
pub mod crhd;
pub mod error;
pub mod gbm;
pub mod geodata;
pub mod morpho;
pub mod pipeline;
pub mod road_graph;
pub mod synth;
pub mod vitality;

pub use error::{Error, Result};
