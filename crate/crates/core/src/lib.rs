//! Joint transmit beamforming, RIS phase configuration and uplink power
//! allocation for a full-duplex base station that senses a point target while
//! decoding several uplink users.
//!
//! The crate is organised bottom-up:
//!
//! - [`scenario`]: configuration, geometry, path loss and seeded channel draws.
//! - [`system`]: optimization variables, effective channels, SINRs and rates.
//! - [`qcqp`]: a primal-dual interior-point solver for convex complex QCQPs.
//! - [`blocks`]: the WMMSE auxiliaries and the per-block updates of
//!   `W`, `q`, `{u_k}` and `u_0`.
//! - [`pdd`]: penalty dual decomposition for the unit-modulus RIS phases.
//! - [`orchestrator`]: initialization and the outer block-coordinate sweep.
//! - [`harness`]: Monte-Carlo experiments, baselines, summaries and CSV output.

pub mod blocks;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod orchestrator;
pub mod pdd;
pub mod qcqp;
pub mod scenario;
pub mod system;

pub use error::{Error, Result};
pub use linalg::{CMat, CVec};
