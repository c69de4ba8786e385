//! Command-line front end: run the protocol, run the centralized
//! baseline, compare the two, or replay an exported chain.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedchain::chain::Chain;
use fedchain::sim::{
    default_config, export_csv, export_json, replay_chain, run_fedavg_baseline, run_simulation,
    SimConfig, SimError, SimOutput, Summary,
};

#[derive(Parser)]
#[command(name = "fedchain", about = "Blockchain-coordinated federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// TOML or JSON configuration file; omit for the built-in default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for metrics and chain exports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of rounds from the config.
    #[arg(long)]
    rounds: Option<u64>,
    /// Evaluate the global model every k rounds.
    #[arg(long, value_name = "K")]
    eval_every: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full protocol simulation.
    Run(CommonOpts),
    /// Run the centralized vanilla federated-averaging baseline.
    Baseline(CommonOpts),
    /// Run both and print their summaries side by side.
    Compare(CommonOpts),
    /// Re-validate an exported chain and recompute the final model.
    Replay {
        /// Configuration the chain was produced with.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Exported chain file (binary format).
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(opts: &CommonOpts) -> Result<SimConfig, SimError> {
    let mut cfg = match &opts.config {
        Some(path) => SimConfig::from_file(path)?,
        None => default_config(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(rounds) = opts.rounds {
        cfg.rounds = rounds;
    }
    if let Some(k) = opts.eval_every {
        cfg.eval_every = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_outputs(out: &SimOutput, dir: &Path) -> Result<(), SimError> {
    std::fs::create_dir_all(dir).map_err(|source| SimError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    export_csv(&out.log, &dir.join("metrics.csv"))?;
    export_json(&out.log, &dir.join("metrics.json"))?;
    out.chain.export_binary(&dir.join("chain.bin"))?;
    out.chain.export_json(&dir.join("chain.json"))?;
    Ok(())
}

fn print_summary(label: &str, s: &Summary) {
    println!("[{label}]");
    println!(
        "  accuracy      {:.4} +/- {:.4}  (last {} evaluated rounds)",
        s.mean_accuracy, s.std_accuracy, s.window_rounds
    );
    if s.attack_ratio_degenerate {
        println!("  attack ratio  n/a (no non-empty blocks in window)");
    } else {
        println!("  attack ratio  {:.1}%", 100.0 * s.attack_ratio);
    }
    println!("  empty blocks  {:.1}%", s.empty_block_pct);
    println!(
        "  malicious stake share  {:.3}",
        s.final_malicious_stake_share
    );
}

fn run(cli: Cli) -> Result<(), SimError> {
    match cli.command {
        Command::Run(opts) => {
            let cfg = load_config(&opts)?;
            let out = run_simulation(&cfg)?;
            print_summary("fedchain", &out.log.summary);
            if let Some(dir) = &opts.out {
                write_outputs(&out, dir)?;
                println!("wrote metrics and chain to {}", dir.display());
            }
            Ok(())
        }
        Command::Baseline(opts) => {
            let cfg = load_config(&opts)?;
            let out = run_fedavg_baseline(&cfg)?;
            print_summary("fedavg", &out.log.summary);
            if let Some(dir) = &opts.out {
                std::fs::create_dir_all(dir).map_err(|source| SimError::Io {
                    path: dir.display().to_string(),
                    source,
                })?;
                export_csv(&out.log, &dir.join("baseline_metrics.csv"))?;
                export_json(&out.log, &dir.join("baseline_metrics.json"))?;
                println!("wrote baseline metrics to {}", dir.display());
            }
            Ok(())
        }
        Command::Compare(opts) => {
            let cfg = load_config(&opts)?;
            let protocol = run_simulation(&cfg)?;
            let baseline = run_fedavg_baseline(&cfg)?;
            print_summary("fedchain", &protocol.log.summary);
            print_summary("fedavg", &baseline.log.summary);
            let delta =
                protocol.log.summary.mean_accuracy - baseline.log.summary.mean_accuracy;
            println!("accuracy delta (fedchain - fedavg): {delta:+.4}");
            if let Some(dir) = &opts.out {
                write_outputs(&protocol, dir)?;
                export_csv(&baseline.log, &dir.join("baseline_metrics.csv"))?;
                export_json(&baseline.log, &dir.join("baseline_metrics.json"))?;
                println!("wrote both runs to {}", dir.display());
            }
            Ok(())
        }
        Command::Replay { config, chain, seed } => {
            let mut cfg = match &config {
                Some(path) => SimConfig::from_file(path)?,
                None => default_config(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let chain = Chain::import_binary(&chain)?;
            let model = replay_chain(&chain, &cfg)?;
            let non_empty = chain.blocks()[1..]
                .iter()
                .filter(|b| b.payload.is_some())
                .count();
            println!(
                "replayed {} blocks ({} non-empty); chain valid",
                chain.len() - 1,
                non_empty
            );
            let norm: f64 = model.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            println!("final model: {} parameters, l2 norm {norm:.6}", model.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": e.to_string(),
                "kind": match &e {
                    SimError::InvalidConfig(_) => "invalid_config",
                    SimError::Io { .. } => "io",
                    SimError::Replay(_) => "replay",
                    _ => "runtime",
                },
            });
            eprintln!("{payload}");
            ExitCode::from(2)
        }
    }
}
