//! Data-driven variational multiscale reduced order models.
//!
//! The crate covers the whole offline/online chain for quadratic
//! (Burgers-type) dynamics:
//!
//! * [`fom`]: linear finite elements + Crank–Nicolson for 1D viscous Burgers,
//!   the snapshot generator.
//! * [`snapshot`]: snapshot sets with their inner-product weight, binary
//!   persistence and time windowing.
//! * [`pod`]: method-of-snapshots POD basis, projection and reconstruction.
//! * [`galerkin`]: Galerkin ROM operators `A`, `B` (square or rectangular).
//! * [`closure`]: exact closure targets, truncated-SVD least squares and
//!   two-/three-scale closure operators.
//! * [`integrate`]: time integration of the G-ROM and the closed ROMs.
//! * [`metrics`]: average L² error and the diagnostic series.
//! * [`sweep`]: optimal truncation searches.
//! * [`experiment`]: the Burgers reconstructive / cross-validation /
//!   predictive experiments wired end to end.

pub mod closure;
pub mod error;
pub mod experiment;
pub mod fom;
pub mod galerkin;
pub mod integrate;
pub mod metrics;
pub mod pod;
pub mod snapshot;
pub mod sweep;

mod binio;

pub use error::{Result, RomError};
