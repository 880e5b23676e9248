//! Aspect-ratio and context aware mixture detection head.
//!
//! The crate covers everything downstream of a convolutional backbone:
//! position-sensitive map projection, mixture RoI pooling with local and
//! global context, per-component templates with MAX selection, the multi-task
//! training objective with hard example mining, a two-stage cascade, and
//! VOC/COCO-style evaluation. A synthetic scene generator stands in for the
//! backbone and the proposal network.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pooling;
pub mod proposals;
pub mod psmap;
pub mod real;
pub mod rng;
pub mod scene;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use geometry::{CenterBox, CornerBox, DetectionRecord, RegressionTarget, ScoredBox};
pub use head::{ComponentScores, Detection, TemplateBank};
pub use model::CascadeModel;
pub use pooling::{CellGrid, PooledFeature};
pub use psmap::{ARConfig, ContextMode, PSMapSet, ProjectionWeights, Role, Tiling};
pub use real::Real;
