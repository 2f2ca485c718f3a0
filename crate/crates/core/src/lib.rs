//! Event-based detection of variable-duration events in 1D signals.
//!
//! Events are predicted directly as two output signals (event centers and
//! durations) by a U-Net style network, next to an epoch-based baseline with
//! classical post-processing, an IoU-based event evaluator and a simulator
//! for artefact-detection data.

pub mod autodiff;
pub mod backbone;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod postproc;
pub mod protocol;
pub mod signal;
pub mod simgen;
pub mod trainer;

pub use error::{Error, Result};
pub use signal::{Event, EventList, SignalRecord, TimeGrid};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
