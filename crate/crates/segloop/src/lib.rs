//! Desk-scale laboratory for closed-loop prompt-feedback segmentation.
//!
//! The crate models the loop `mask = decode(image, prompt)`,
//! `prompt' = extract(mask)` as a dynamical system over prompt space,
//! measures how tightly attention and masks are coupled along the way,
//! and provides a proximally stabilized variant of the loop together
//! with the statistics needed to compare the two against a re-prompting
//! oracle.
//!
//! Module map:
//!
//! * [`grid`] - attention maps, masks, prompts, resampling, divergences
//! * [`metrics`] - the per-iteration coupling panel (overlap, drift,
//!   stability, leakage, causality, composite score)
//! * [`dynamics`] - prompt-space maps, Jacobians, spectral radii, and
//!   trajectory simulation
//! * [`synth`] - closed-form synthetic decoders with controllable
//!   attention gain, distractor pull, drift, and noise
//! * [`stabilize`] - the feedback pipelines (iterative, stabilized,
//!   oracle) plus candidate scoring and track-keep logic
//! * [`stats`] - paired permutation tests, correlations, aggregation
//! * [`trace`] - a byte-exact on-disk format for loop traces
//! * [`experiment`] - experiment assembly from a single JSON config

pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod metrics;
pub mod stabilize;
pub mod stats;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
