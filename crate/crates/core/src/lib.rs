//! NIRec: neighborhood-interaction recommendation on heterogeneous
//! information networks.
//!
//! The pipeline turns a typed multigraph plus observed user/item ratings into
//! a click-through-rate model:
//!
//! 1. [`ingest`] reads relation files into a [`hin::HinGraph`] and splits the
//!    rating records into train/valid/test instances.
//! 2. [`sampler`] draws metapath-guided random walks around every user and
//!    item that appears in an instance.
//! 3. [`interaction`] projects the walks into a shared embedding space and
//!    convolves source against target neighborhoods.
//! 4. [`aggregation`] condenses the interaction elements with node-level and
//!    path-level attention.
//! 5. [`model`] wires the pieces into a differentiable forward pass and
//!    [`train`] fits it with mini-batch gradient descent.
//!
//! Supporting modules: [`eval`] (ranking metrics), [`bench`] (convolution
//! backend comparison), [`checkpoint`] (binary model snapshots), [`bundle`]
//! (prepared-dataset directories), [`export`] (attention inspection),
//! [`synthetic`] (generated datasets for tests and demos), and [`gradcheck`]
//! (end-to-end gradient verification).

pub mod aggregation;
pub mod bench;
pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod export;
pub mod gradcheck;
pub mod hin;
pub mod ingest;
pub mod interaction;
pub mod model;
pub mod sampler;
pub mod synthetic;
pub mod train;
