//! Adaptive sensing closed-loop simulator: safety envelope, bandit
//! calibration, synthetic camera, perception oracles and routing.

pub mod calibrator;
pub mod envelope;
pub mod error;
pub mod harness;
pub mod percept;
pub mod rng;
pub mod router;
pub mod sensecam;

pub use calibrator::*;
pub use envelope::*;
pub use error::{AtiError, ConfigError, Result};
pub use harness::*;
pub use percept::*;
pub use rng::{derive_seed, stream_rng, SimRng, Stream};
pub use router::*;
pub use sensecam::*;
