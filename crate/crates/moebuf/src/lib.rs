//! File formats, experiment scenarios and the command line for `moebuf`.
//!
//! The numeric work lives in `moebuf-core`; this crate adds what needs the
//! standard library: checkpoints, JSON specs and fixtures, trace files and
//! the scenario runners behind the `moebuf` binary.

pub mod checkpoint;
pub mod error;
pub mod fixture;
pub mod harness;
pub mod spec;
pub mod trace;

pub use error::{Error, Result};
pub use harness::{run, ScenarioReport};
pub use spec::{ExperimentSpec, RoutingKind, Scenario};
