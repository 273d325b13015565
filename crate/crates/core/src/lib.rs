//! Motor-imagery classifiers with uncertainty evaluation.
//!
//! The crate covers the full offline pipeline: band-pass preprocessing,
//! covariance and CSP features, minimum-distance-to-Riemannian-mean (MDRM,
//! optionally temperature scaled) and CSP-LDA classifiers, calibration
//! metrics (ECE, NCE, Brier, reliability bins), rejection-accuracy curves,
//! and a within-subject benchmark harness that aggregates results across
//! subjects.

pub mod calibration;
pub mod classifiers;
pub mod config;
pub mod data_io;
pub mod error;
pub mod features;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod signal;
pub mod spd;

pub use error::{Error, Result};
