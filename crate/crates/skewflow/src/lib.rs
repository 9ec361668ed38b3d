//! Simulation and verification lab for flows of coupled skew random walks.
//!
//! A skew walk is a lattice walk `X = x0 + B + beta * L` driven by a shared
//! noise `B`, where `L` is the walk's own local time at the origin. Many
//! walks driven by the same noise form a monotone coalescing flow; pairs of
//! walks that meet at the origin and later coalesce trace out "lenses" whose
//! inter-path distance, read on the local-time clock, is an exactly
//! simulable piecewise-linear jump process `(Z, J)`.
//!
//! The crate has three layers:
//!
//! * exact samplers and closed forms for `(Z, J)` and its conditioned
//!   transforms ([`zj`]), plus the lens law built on top of them ([`lens`]),
//! * the coupled lattice flow itself ([`flow`]) and excursion-race
//!   experiments on a single walker ([`semiflat`]),
//! * a small statistics toolkit ([`stats`]) and the named experiment
//!   runners ([`experiments`]) used by the CLI and the acceptance suite.
//!
//! Every sampler is a pure function of its parameters and a seed; replica
//! batches parallelize with bit-identical results for a fixed master seed.

pub mod error;
pub mod experiments;
pub mod flow;
pub mod lens;
pub mod report;
pub mod seed;
pub mod semiflat;
pub mod stats;
pub mod zj;

pub use error::{Error, Result};
pub use flow::{Beta, FlowPaths, NoisePath, WalkerPath};
pub use stats::Estimate;
pub use zj::{Transform, ZjPath, ZjState};
