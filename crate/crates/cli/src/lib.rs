//! Dataset files, experiment runs and result reports for `ensemblekit-core`.
//!
//! The `ensemblekit` binary is a thin wrapper over [`commands::run_cli`].

pub mod commands;
pub mod io;
pub mod methods;
pub mod records;
pub mod report;
