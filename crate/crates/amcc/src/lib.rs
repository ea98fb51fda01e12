//! Multi-label crowd consensus with worker grouping and cost-aware active querying.
//!
//! A crowd of workers annotates samples with multi-label judgements (+1 relevant,
//! -1 irrelevant, 0 unobserved). Each worker w is modelled through a label-level
//! self-representation `A_w ≈ A_w (D_w + C_m)`: an individuality matrix `D_w`
//! (row-stochastic, one row per label) private to the worker, plus a commonality
//! matrix `C_m` shared by the worker's group m. Groups are weighted by how well
//! their commonality explains the crowd, and the weighted model yields per-sample
//! consensus label scores. On top of the consensus model sits an active-learning
//! loop that selects (sample, label, worker) query triplets by blending label
//! uncertainty, label-correlation gain, worker credibility, and worker cost.
//!
//! Modules:
//! - [`model`]: core data types (annotation tensor, configuration, fitted model)
//! - [`math`]: small dense numerical kernels (HSIC, simplex projection, SPD solves)
//! - [`consensus`]: the alternating fit loop and consensus inference
//! - [`active`]: query-triplet scoring, selection, and the active loop
//! - [`metrics`]: multi-label evaluation metrics and a majority-vote baseline
//! - [`sim`]: synthetic crowd generation with archetype workers
//! - [`io`]: annotation/feature/report file formats
//! - [`cli`]: experiment commands backing the `amcc` binary
//!
//! All numerics are generic over a floating scalar (see [`Scalar`]); `f64` is the
//! default used by the CLI, and aliases for common instantiations live at the
//! crate root.

pub mod active;
pub mod cli;
pub mod consensus;
mod error;
pub mod io;
pub mod math;
pub mod metrics;
pub mod model;
mod scalar;
pub mod sim;

pub use error::{AmccError, Result};
pub use scalar::{cast, Scalar};

/// `f64` instantiations used by the CLI and most downstream callers.
pub type Config64 = model::AmccConfig<f64>;
pub type Model64 = consensus::FitOutcome<f64>;
pub type LabelCorrelation64 = model::LabelCorrelation<f64>;
pub type Dataset64 = model::Dataset<f64>;
pub type Crowd64 = sim::SimulatedCrowd<f64>;
pub type Ledger64 = active::QueryLedger<f64>;

/// `f32` instantiations for callers trading precision for memory.
pub type Config32 = model::AmccConfig<f32>;
pub type Dataset32 = model::Dataset<f32>;
