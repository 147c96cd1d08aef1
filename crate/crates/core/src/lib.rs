//! Trace-driven DDR4 energy modelling and current calibration.
//!
//! The crate is organised as a pipeline: STREAM-like request streams
//! ([`workload`]) are mapped onto DRAM coordinates ([`addrmap`]), scheduled
//! into timing-legal command traces ([`memctrl`]), reduced to command counts
//! and standby dwell ([`tracestats`]), and priced by a linear current model
//! ([`power`]). Measured energies ([`measurement`]) then drive a bounded
//! least-squares fit of the model currents ([`calibrate`]).

pub mod addrmap;
pub mod calibrate;
#[cfg(test)]
pub(crate) mod testutil;
pub mod device;
pub mod measurement;
pub mod memctrl;
pub mod power;
pub mod tracestats;
pub mod workload;

pub use device::{CalibratedCurrents, CurrentBounds, CurrentKind, DeviceSpec};
pub use memctrl::{Command, CommandTrace};
pub use tracestats::CommandStats;
