//! Local discovery of higher-order interactions (HOIs).
//!
//! The pipeline embeds a data matrix with a diffusion-potential method,
//! partitions the embedding with k-means, fits a Gaussian total-correlation
//! latent-factor model inside every partition and reports the mutual
//! information between each latent factor and the original features.
//!
//! Modules follow the pipeline order:
//!
//! - [`ingest`]: CSV / IDX / matrix-JSON loading, standardization, concatenation
//! - [`embed`]: affinity kernel, diffusion operator, potential distances, MDS
//! - [`cluster`]: seeded k-means++ / Lloyd partitioning
//! - [`corex`]: the linear total-correlation factor model and its reports
//! - [`eval`]: HOI extraction and group / top-k scoring
//! - [`synth`]: two-cluster synthetic generator and the ablation driver
//! - [`pipeline`]: staged end-to-end runs and JSON artifacts
//! - [`svg`]: scatter, MI heatmap and TC bar figures

pub mod cluster;
pub mod corex;
pub mod embed;
mod error;
pub mod eval;
pub mod ingest;
pub mod linalg;
mod serde_rows;
pub mod pipeline;
pub mod svg;
pub mod synth;

pub use error::{Error, ErrorKind, Result, StageExt};
