//! Governance kernel for agent workflows.
//!
//! A [`graph::Constitution`] bundles a typed instruction graph, its bindings
//! and policy sets. The [`kernel`] executes it one instruction at a time
//! against a [`hal::Backend`], deciding every transition itself and recording
//! a hash-chained [`state::FlightRecord`] that can be replayed and inspected.
//! [`edlc`] runs a constitution over a golden dataset and gates regressions.

pub mod acf;
pub mod canonical;
pub mod edlc;
pub mod graph;
pub mod hal;
pub mod kernel;
pub mod parallel;
pub mod policy;
pub mod state;
pub mod verify;
#[cfg(feature = "testkit")]
pub mod testkit;
