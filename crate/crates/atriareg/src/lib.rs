//! Contour-guided deformable registration for cine cardiac volumes.
//!
//! The crate tracks a segmented structure across the phases of a cine
//! acquisition by registering a reference phase to every other phase with a
//! dense displacement field, then warping the reference mask through the
//! recovered motion. Intensities are restricted to a band around the
//! structure's surface so the match is driven by the wall rather than the
//! blood pool or surrounding anatomy.

pub mod energy;
pub mod error;
pub mod io;
pub mod metrics;
pub mod morphology;
mod numeric;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
