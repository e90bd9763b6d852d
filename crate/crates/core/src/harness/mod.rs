//! Training orchestration, persistence and the command-line front end.

pub mod cli;
pub mod config;
pub mod io;
pub mod train;

pub use config::{ProblemConfig, Sampling, TrainConfig};
pub use io::{decode_grid, encode_grid, read_grid, write_grid, Checkpoint};
pub use train::{
    pretrain, reference_for, relative_mse, train, train_skip, Phase, ReportRow, RunReport, Summary,
    TrainOutcome, Trainer,
};
