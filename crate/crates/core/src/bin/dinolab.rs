use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dinolab::runtime::{
    evaluate_command, export_maps_command, predict_command, train_command, RunConfig,
};

#[derive(Parser)]
#[command(name = "dinolab", version, about = "Train and run reconstruction-based anomaly detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dotted overrides such as `train.total_iters=500` or `objective.scheme=group4`.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the normal images of the configured dataset.
    Train(ConfigArgs),
    /// Score the test split and export anomaly maps.
    Predict(ConfigArgs),
    /// Compute metrics from exported maps.
    Evaluate {
        #[command(flatten)]
        args: ConfigArgs,
        /// Also pool all categories into one set.
        #[arg(long)]
        unified: bool,
    },
    /// Render exported maps as PNG images.
    ExportMaps(ConfigArgs),
}

fn run(cli: Cli) -> dinolab::Result<()> {
    let load = |a: &ConfigArgs| RunConfig::load(Some(&a.config), &a.overrides);
    match cli.command {
        Command::Train(a) => {
            let cfg = load(&a)?;
            let r = train_command(&cfg)?;
            let last = r.losses.last().map_or(f64::NAN, |l| l.1);
            println!(
                "trained iterations {}..{} ({} skipped), final loss {last:.5}, checkpoint {}",
                r.start_iter,
                r.end_iter,
                r.skipped.len(),
                cfg.checkpoint_path().display()
            );
        }
        Command::Predict(a) => {
            let index = predict_command(&load(&a)?)?;
            println!("wrote {}", index.display());
        }
        Command::Evaluate { args, unified } => {
            let cfg = load(&args)?;
            let report = evaluate_command(&cfg, unified)?;
            for (cat, metric, value) in report.rows() {
                println!("{cat}\t{metric}\t{value:.6}");
            }
            println!("wrote {}", cfg.train.out_dir.join("report.json").display());
        }
        Command::ExportMaps(a) => {
            let (dir, n) = export_maps_command(&load(&a)?)?;
            println!("rendered {n} maps into {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
