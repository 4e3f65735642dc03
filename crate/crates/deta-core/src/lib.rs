//! Denoised few-shot task adaptation over patch grids.
//!
//! A sample is a small grid of patch features (a stand-in for an image seen
//! through a frozen backbone). Given a C-way K-shot episode whose support set
//! may be polluted by in-distribution clutter and mislabeled
//! out-of-distribution samples, the pipeline
//!
//! 1. crops random regions from every support sample and scores each region by
//!    contrasting its in-class and out-of-class cosine relevance ([`cora`]),
//! 2. adapts a small projection head with a clean-prototype loss plus an
//!    entropy-maximization penalty on the detected noisy regions ([`adapt`]),
//! 3. keeps the highest-weight clean regions per class in a memory bank and
//!    uses them both for prototype rectification during training and for a
//!    region-level nearest-centroid classifier at inference ([`infer`]),
//! 4. ships a synthetic episode generator with controllable noise ratios
//!    ([`gen`]) and a benchmark/metrics harness ([`bench`], [`metrics`]).
//!
//! All numeric code is generic over the scalar type via [`Real`] (`f32` or
//! `f64`); the aliases at the crate root fix `f64`, which is what the CLI and
//! the acceptance suite use.

pub mod acceptance;
pub mod adapt;
pub mod bench;
pub mod cora;
pub mod episode;
pub mod error;
pub mod gen;
pub mod infer;
pub mod io;
mod linalg;
pub mod metrics;
pub mod oracles;
mod real;

pub use error::{Error, Result};
pub use real::Real;

/// Guard applied to every vector norm before division.
pub const EPS_NORM: f64 = 1e-12;

// Concrete `f64` aliases for the common entry points.
pub type FeatureVector = episode::FeatureVector<f64>;
pub type PatchGrid = episode::PatchGrid<f64>;
pub type Episode = episode::Episode<f64>;
pub type RegionWeightTable = cora::RegionWeightTable<f64>;
pub type AccumulatorState = cora::AccumulatorState<f64>;
pub type MemoryBank = cora::MemoryBank<f64>;
pub type HeadParams = adapt::HeadParams<f64>;
pub type Prototypes = adapt::Prototypes<f64>;
pub type AdaptOutcome = adapt::AdaptOutcome<f64>;
pub type LocalCentroids = infer::LocalCentroids<f64>;
pub type BenchResult = bench::BenchResult;
