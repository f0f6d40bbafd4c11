//! Multi-modal sequential recommendation.
//!
//! Item sequences plus per-item auxiliary vectors (text, image, tabular) feed
//! a unidirectional (`SasRecPlus`) or bidirectional (`Bert4RecPlus`)
//! transformer. Classical baselines, the leave-one-out ranking protocol,
//! significance testing, ablation grids and attention-cluster analysis
//! complete the experiment harness.

pub mod analysis;
pub mod aux;
pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gbdt;
pub mod model;
pub mod numerics;

pub use dataset::{ItemId, UserId};
pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng};
