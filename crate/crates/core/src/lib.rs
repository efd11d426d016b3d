//! Simulation of SMC-conflict timing channels on the L1 instruction cache of
//! an SMT core, with the attacks, victims and detectors built on it.

pub mod attacks;
pub mod covert;
pub mod detect;
pub mod error;
pub mod experiments;
pub mod ispectre;
pub mod layout;
pub mod recover;
pub mod sched;
pub mod uarch;
pub mod victims;

pub use error::{Error, Result};
