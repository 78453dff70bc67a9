//! Locally adaptive morphable model: a token-per-region mesh auto-encoder
//! whose decoder also takes sparse control-vertex displacements.
//!
//! [`model::LammModel`] holds the network, [`train`] fits it, [`manip`] builds
//! edits on top of it and [`serve`] exposes it over HTTP. [`pca`] is the
//! linear baseline.

pub mod cli;
pub mod error;
pub mod manip;
pub mod mesh;
pub mod model;
pub mod pca;
pub mod serve;
pub mod synth;
pub mod tensor;
pub mod train;
