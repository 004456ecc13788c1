pub mod app;
pub mod bench;
pub mod checks;
pub mod diagnose;
pub mod error;
pub mod run_config;
pub mod train_cmd;
pub mod verify;

pub use app::{run, Cli};
pub use error::{CliError, CliResult};
pub use run_config::RunConfig;
