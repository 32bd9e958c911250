//! Compression-ratio sweep harness and its CSV / plot-data outputs.

mod config;
mod output;
mod sweep;

pub use config::parse_config;
pub use output::{emit_csv, emit_plot_data, plot_data, sweep_csv, CSV_HEADER};
pub use sweep::{run_sweep, QuantSetting, SweepConfig, SweepRow};
