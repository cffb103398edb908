//! Phase evolution of Ti-6Al-4V under laser powder bed fusion thermal histories.
//!
//! The crate is organised bottom-up: [`fastmath`] supplies branch-free
//! transcendental approximations, [`kinetics`] the pointwise phase model,
//! [`integrator`] the time stepping, and [`batch`] the lane-parallel driver
//! over all material points. [`thermal`] and [`scanpath`] provide a voxel
//! heat-conduction model with a moving laser, and [`bench`] measures kernel
//! throughput against a roofline.

pub mod batch;
pub mod bench;
pub mod fastmath;
pub mod integrator;
pub mod kinetics;
pub mod scanpath;
pub mod simd;
pub mod thermal;

pub use integrator::{IntegratorConfig, Scheme, SeedingState};
pub use kinetics::{KineticsParams, PhaseState};

/// Library version.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
