//! Simulator and training library for blocked photonic tensor cores built
//! from Mach-Zehnder interferometer meshes.
//!
//! A weight matrix is realized as a grid of k×k cores, each computing
//! `W = U Σ V*` with the unitaries parametrized by MZI rotation phases and the
//! singular values by attenuator phases. The simulator models control
//! quantization, per-shifter gain variation, thermal crosstalk, and hidden
//! phase bias between the programmed and the effective phases, and keeps an
//! observability firewall: callers see optical port vectors and the monitored
//! Σ diagonal, never the realized unitaries.
//!
//! On top of the core sit the three on-chip learning stages (identity
//! calibration, parallel mapping with optimal singular-value projection, and
//! sparse subspace learning), a minimal neural-network runtime, and a hardware
//! cost profiler.

pub mod config;
pub mod cost;
pub mod dataset;
pub mod error;
pub mod mesh;
pub mod nn;
pub mod noise;
pub mod pipeline;
pub mod ptc;
pub mod rng;
pub mod sparse;
pub mod stages;
pub mod zoo;

pub use error::{Error, Result};
