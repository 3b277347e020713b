//! Configuration files, checkpoints and result files.

pub mod checkpoint;
pub mod config;
pub mod svg;
pub mod table;

pub use checkpoint::{load_checkpoint, load_raw, save_checkpoint, RawCheckpoint};
pub use config::{apply_override, load_config, parse_config, ExperimentConfig, RunConfig};
pub use svg::{write_svg, PlotSpec};
pub use table::{read_csv, write_csv, write_suite};
