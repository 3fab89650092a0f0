pub mod checks;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod report;
