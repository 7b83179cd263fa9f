//! Geometry-aware stochastic optimization with noise-adaptive layer-wise
//! learning rates.
//!
//! Each layer belongs to a [`GroupId`](norms::GroupId) that fixes its norm,
//! dual norm and linear minimization oracle. The optimizer takes LMO steps
//! on the momentum and rescales each layer's learning rate by how noisy its
//! gradients look, measured in the dual norm.

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod lmo;
pub mod norms;
pub mod optimizer;
pub mod param;
pub mod tasks;

pub use error::{Error, Result};
pub use linalg::{Matrix, SvdResult, Vector};
pub use norms::{EmbeddingDual, GroupId};
pub use param::{Param, Shape};
