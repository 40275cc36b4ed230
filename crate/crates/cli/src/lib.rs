//! Workload generation, reporting, A/B comparison and crash injection for
//! the `deferlsm` engine. The `bench` binary is a thin wrapper over these
//! modules.

pub mod ab;
pub mod crashtest;
pub mod ledger_cmd;
pub mod report;
pub mod settings;
pub mod workload;
