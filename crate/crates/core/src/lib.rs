//! Detector-oblivious keypoint matching and two-view pose evaluation.
//!
//! The matcher consumes keypoint coordinates only. Descriptors are sampled
//! from a dense feature grid ([`descfield`]), lifted by a positional encoder
//! and alternating self/cross attention, scored, and turned into a partial
//! assignment with dustbins by log-domain Sinkhorn ([`assign`]). Matches are
//! evaluated by robust relative-pose estimation ([`posest`]) and the pose AUC,
//! precision and matching-score metrics in [`evalkit`].

pub mod descfield;
pub mod geom;
pub mod io;
pub mod posest;
pub mod evalkit;
pub mod assign;
