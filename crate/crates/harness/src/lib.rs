//! Config-driven experiment runner: seed sweeps, ablation grids, the
//! two-probe boundary figure and step throughput.

pub mod ablation;
pub mod config;
pub mod error;
pub mod figure3;
pub mod run;
pub mod throughput;

pub use ablation::{ablation_suite, Suite};
pub use config::{AugmentationChoice, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use figure3::render_figure3;
pub use run::{run, RunResult};
pub use throughput::measure_throughput;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ENV: &str = "LEMDA_OUT";

/// Reads a config file and applies the `LEMDA_OUT` override.
pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_path(path)?;
    if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|d| !d.is_empty()) {
        config.output_dir = dir.into();
    }
    Ok(config)
}
