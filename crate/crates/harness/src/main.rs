use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lemda_harness::ablation::{self, Suite};
use lemda_harness::throughput::{compare_throughput, to_csv};
use lemda_harness::{load_config, render_figure3, run, AugmentationChoice, HarnessError, Result};

#[derive(Parser)]
#[command(name = "lemda", about = "Learned multimodal augmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one ablation grid around a base config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        suite: String,
    },
    /// Render the two-probe boundary figure as SVG plus a CSV sidecar.
    Figure3 {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Median training steps per second for the configured augmentation and
    /// for no augmentation.
    Throughput {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 30)]
        steps: usize,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let config = load_config(&config)?;
            let result = run(&config)?;
            println!("{result}");
            println!("wrote {}", config.output_dir.display());
        }
        Command::Ablate { config, suite } => {
            let config = load_config(&config)?;
            let suite: Suite = suite.parse()?;
            let rows = ablation::ablation_suite(&config, suite)?;
            print!("{}", ablation::to_csv(&rows));
        }
        Command::Figure3 { out, seed } => {
            if out.extension().is_some_and(|e| e == "csv") {
                return Err(HarnessError::Invalid("--out must not end in .csv; the sidecar uses that name".into()));
            }
            let o = render_figure3(&out, seed)?;
            println!(
                "consistency d1={} d2={} (seed {})",
                o.scenario.d1.consistency, o.scenario.d2.consistency, o.scenario.accepted_seed
            );
            println!("wrote {} and {}", o.svg.display(), o.csv.display());
        }
        Command::Throughput { config, warmup, steps } => {
            let config = load_config(&config)?;
            let mut choices = vec![config.augmentation];
            if config.augmentation != AugmentationChoice::None {
                choices.push(AugmentationChoice::None);
            }
            let reports = compare_throughput(&config, &choices, warmup, steps)?;
            let text = to_csv(&reports);
            std::fs::create_dir_all(&config.output_dir).map_err(|e| HarnessError::Io {
                path: config.output_dir.clone(),
                source: e,
            })?;
            let path = config.output_dir.join("throughput.csv");
            std::fs::write(&path, &text).map_err(|e| HarnessError::Io { path, source: e })?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
