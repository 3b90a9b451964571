//! Library side of the `brmap` command line tool: file formats, report
//! structures, artifact rendering and the subcommand implementations.

pub mod commands;
pub mod format;
pub mod render;
pub mod reports;
