use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use situwatch::commands;
use situwatch::config::{ServiceConfig, ENV_DATA_DIR};
use situwatch_core::similarity::{Band, Method, SimilarityConfig};
use situwatch_core::simulator::Scenario;

#[derive(Parser)]
#[command(name = "situwatch", version, about = "Bio-signal situation monitoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the monitoring service.
    Serve {
        /// JSON config file (falls back to SITUWATCH_CONFIG, then defaults).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rank the situation in QUERY against the one in REFERENCE and print the report.
    Compare {
        query: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value = "dtw")]
        method: Method,
        /// Sakoe-Chiba band width, or `full`.
        #[arg(long, default_value = "8")]
        band: Band,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        no_znorm: bool,
        /// Grid points per situation.
        #[arg(long, default_value_t = 90)]
        n: usize,
    },
    /// Generate a synthetic stream and its ground-truth events.
    Simulate {
        /// Scenario JSON; the built-in pain-precursor scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Post a replay file to a running service.
    Replay {
        file: PathBuf,
        /// Data seconds per wall second; 0 sends without pacing.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        target: String,
    },
    /// Inspect the baseline store.
    Baseline {
        /// Store directory (falls back to SITUWATCH_DATA_DIR, then `data`).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[command(subcommand)]
        action: BaselineAction,
    },
}

#[derive(Subcommand)]
enum BaselineAction {
    List,
    Rm { id: String },
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Serve { config } => {
            let cfg = ServiceConfig::load(config.as_deref())?;
            situwatch::server::serve(&cfg).await?;
        }
        Command::Compare {
            query,
            reference,
            method,
            band,
            tau,
            no_znorm,
            n,
        } => {
            let cfg = SimilarityConfig {
                method,
                dtw_band: band,
                tau,
                znormalize: !no_znorm,
                ..SimilarityConfig::default()
            };
            print_json(&commands::compare_files(&query, &reference, n, &cfg)?)?;
        }
        Command::Simulate {
            scenario,
            seed,
            out,
        } => {
            let mut sc = match scenario {
                Some(p) => commands::load_scenario(&p)?,
                None => Scenario::pain_precursor(0),
            };
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            let (csv, events) = commands::simulate_to_dir(&sc, &out)?;
            println!("{}\n{}", csv.display(), events.display());
        }
        Command::Replay {
            file,
            speed,
            target,
        } => {
            let summary = commands::replay(&file, speed, &target)
                .await
                .with_context(|| format!("replaying {}", file.display()))?;
            print_json(&summary)?;
        }
        Command::Baseline { data_dir, action } => {
            let dir = data_dir
                .or_else(|| std::env::var_os(ENV_DATA_DIR).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("data"));
            match action {
                BaselineAction::List => print_json(&commands::list_baselines(&dir)?)?,
                BaselineAction::Rm { id } => {
                    commands::remove_baseline(&dir, &id)?;
                    println!("removed {id}");
                }
            }
        }
    }
    Ok(())
}
