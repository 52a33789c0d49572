use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wdnoma::harness::{execute, Command, ExperimentConfig, Mode};

#[derive(Parser)]
#[command(
    name = "wdnoma",
    version,
    about = "Waveform-domain NOMA ISAC link simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Uplink BER sweep for each configured mode.
    Ber(RunArgs),
    /// Velocity and distance NMSE sweep after uplink cancellation.
    Sense(RunArgs),
    /// Affine-domain statistics of the OFDM downlink.
    Stats(RunArgs),
    /// Parse and check a config file without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file; the built-in desk setup when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Restrict to one receiver mode.
    #[arg(long)]
    mode: Option<Mode>,
    /// Comma-separated SNR points in dB.
    #[arg(long, value_delimiter = ',')]
    snr: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn config(&self, command: Command) -> wdnoma::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.sweep.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.sweep.modes = vec![m];
        }
        if let Some(snr) = &self.snr {
            cfg.sweep.snr_db = snr.clone();
        }
        if let Some(t) = self.trials {
            match command {
                Command::Stats => cfg.stats.trials = t,
                _ => cfg.sweep.trials = t,
            }
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> wdnoma::Result<()> {
    let (command, args) = match cli.command {
        Cmd::ValidateConfig { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            println!("{}: ok (hash {})", config.display(), cfg.hash()?);
            return Ok(());
        }
        Cmd::Ber(a) => (Command::Ber, a),
        Cmd::Sense(a) => (Command::Sense, a),
        Cmd::Stats(a) => (Command::Stats, a),
    };
    let cfg = args.config(command)?;
    let manifest = execute(command, &cfg, &args.out, args.workers)?;
    for o in &manifest.outputs {
        println!("{}", args.out.join(o).display());
    }
    eprintln!("done in {:.1} s", manifest.wall_time_s);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
