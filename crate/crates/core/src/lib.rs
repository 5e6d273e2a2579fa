//! Concept-level analysis of encoder+head classifiers against a
//! vision-language oracle.
//!
//! The pipeline: align the model's embedding space to the oracle space
//! ([`align`]), evaluate concept strength predicates there ([`concept`]),
//! aggregate them into semantic heatmaps ([`heatmap`]), localize
//! misclassifications to the encoder or the head ([`fault`]), and flag
//! defective inputs at runtime ([`detect`]). [`desk`] provides a small
//! synthetic world and differentiable model to exercise all of it without
//! external models.

pub mod align;
pub mod concept;
pub mod desk;
pub mod detect;
pub mod error;
pub mod fault;
pub mod heatmap;
pub mod linalg;
pub mod scalar;
pub mod store;
pub mod workbench;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use scalar::Scalar;

pub type AffineMap32 = align::AffineMap<f32>;
pub type AffineMap64 = align::AffineMap<f64>;
pub type DeskModel32 = desk::DeskModel<f32>;
pub type DeskModel64 = desk::DeskModel<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
