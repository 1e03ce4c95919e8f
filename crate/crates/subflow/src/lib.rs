//! Subclass-conditional linear flow matching with optimized per-subclass
//! Gaussian source distributions, evaluated on seeded synthetic long-tailed
//! benchmarks.
//!
//! Pipeline stages:
//!
//! 1. [`synthbench`] — generate long-tailed multi-modal datasets and compute
//!    the frequency-tier partition plus augmentation targets.
//! 2. [`gmm`] — per-class diagonal Gaussian mixtures on residual latents,
//!    EBIC model selection, hard subclass assignment.
//! 3. [`sourceopt`] — learn per-subclass source means/scales and unit
//!    prototypes under directional-compactness and path-cap losses.
//! 4. [`fm`] — velocity-field training by linear conditional flow matching,
//!    plus exact enumeration checks of the variance-decomposition claims.
//! 5. [`sampler`] — mixture-over-subclass generation by Euler integration.
//! 6. [`eval`] — Gaussian-Fréchet distance, mode recall, downstream
//!    classification, and kNN subclass purity.
//!
//! The [`pipeline`] module ties the stages together behind a single JSON
//! config; the `subflow` binary exposes them as subcommands.

pub mod error;
pub mod eval;
pub mod fm;
pub mod gmm;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod sourceopt;
pub mod synthbench;

mod adam;

pub use error::SubflowError;
