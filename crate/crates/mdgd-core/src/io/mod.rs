//! Run configuration files and the binary tensor container.

mod config;
mod container;

pub use config::{DataConfig, RunConfig};
pub use container::{
    load_checkpoint, load_dataset, write_checkpoint, write_dataset, FORMAT_VERSION, MAGIC,
};
