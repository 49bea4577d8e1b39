//! Cycle-stepped model of a descriptor-based DMA controller with sequential
//! descriptor prefetching, a serialized-fetch reference controller, and the
//! testbench around them.

pub mod backend;
pub mod baseline;
pub mod descriptor;
pub mod driver;
pub mod frontend;
pub mod interconnect;
pub mod mem;
pub mod metrics;
pub mod run;
pub mod sim;
pub mod soc;
pub mod workload;

pub use run::{run_scenario, RunError, RunOutcome, Scenario};
pub use sim::{SimTime, Simulation};
pub use soc::{DmacConfig, Soc};
