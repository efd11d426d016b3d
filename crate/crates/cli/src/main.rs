//! `smcsim`: runs the case studies and writes their results as CSV.
//!
//! Exit status is 0 on success, 1 for invalid flags or configuration, and 2
//! when the strategy or profile is not available.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use smcsim::covert::Channel;
use smcsim::detect::DetectorKind;
use smcsim::uarch::{LatencyProfile, ProbeKind};

use config::ExperimentConfig;

const DEFAULT_PROFILE: &str = "intel-cascade-lake";
const DEFAULT_OUT: &str = "smcsim-out";

#[derive(Debug, Parser)]
#[command(name = "smcsim", version, about = "Simulated SMC-conflict timing channel experiments")]
struct Cli {
    /// Built-in profile name or path to a profile file.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Seed for every random choice of the run. Required here or in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for the CSV files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the profile's timer noise (cycles, standard deviation).
    #[arg(long, global = true)]
    noise_sigma: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Probe timings per instruction kind and residency level.
    Histogram {
        /// Kind to time; repeat for several. Defaults to all supported kinds.
        #[arg(long = "kind")]
        kinds: Vec<ProbeKind>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Cross-thread covert channel over one L1i set.
    Covert {
        #[arg(long, value_parser = parse_channel)]
        channel: Option<Channel>,
        #[arg(long)]
        strategy: Option<ProbeKind>,
        #[arg(long)]
        bits: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Key recovery from square-and-multiply exponentiation.
    Rsa {
        #[arg(long)]
        strategy: Option<ProbeKind>,
        #[arg(long)]
        keys: Option<usize>,
        #[arg(long)]
        traces: Option<usize>,
        #[arg(long)]
        key_bits: Option<usize>,
    },
    /// Key recovery from a sliding-window SRP server.
    Srp {
        #[arg(long)]
        strategy: Option<ProbeKind>,
        #[arg(long)]
        group_bits: Option<u32>,
        #[arg(long)]
        keys: Option<usize>,
    },
    /// Bounds-check bypass leaking through the L1i, plus observed support
    /// of every strategy on the profile.
    Ispectre {
        #[arg(long)]
        strategy: Option<ProbeKind>,
        #[arg(long)]
        secret_len: Option<usize>,
    },
    /// Counter-based detectors over the window corpus.
    Detect {
        /// Detector to rank counters with; repeat for several.
        #[arg(long = "detector")]
        detectors: Vec<DetectorKind>,
        /// Generate the corpus from the profile and seed.
        #[arg(long)]
        regenerate: bool,
    },
    /// Library and multiply-set identification from per-set activity.
    Fingerprint {
        #[arg(long)]
        strategy: Option<ProbeKind>,
    },
}

fn parse_channel(s: &str) -> Result<Channel, String> {
    match s {
        "prime-probe" | "pp" => Ok(Channel::PrimeProbe),
        "flush-reload" | "fr" => Ok(Channel::FlushReload),
        other => Err(format!("unknown channel `{other}` (expected prime-probe or flush-reload)")),
    }
}

/// Settings shared by every command after flags and config are merged.
pub struct Run {
    pub profile: Arc<LatencyProfile>,
    pub seed: u64,
    pub out: PathBuf,
}

fn apply_flags(cli: Cli, mut cfg: ExperimentConfig) -> (Command, ExperimentConfig) {
    cfg.profile = cli.profile.or(cfg.profile);
    cfg.seed = cli.seed.or(cfg.seed);
    cfg.out = cli.out.or(cfg.out);
    cfg.noise_sigma = cli.noise_sigma.or(cfg.noise_sigma);
    match &cli.command {
        Command::Histogram { kinds, samples } => {
            if !kinds.is_empty() {
                cfg.histogram.kinds = kinds.clone();
            }
            cfg.histogram.samples = samples.unwrap_or(cfg.histogram.samples);
        }
        Command::Covert { channel, strategy, bits, trials } => {
            let c = &mut cfg.covert;
            c.config.channel = channel.unwrap_or(c.config.channel);
            c.config.strategy = strategy.unwrap_or(c.config.strategy);
            c.bits = bits.unwrap_or(c.bits);
            c.trials = trials.unwrap_or(c.trials);
        }
        Command::Rsa { strategy, keys, traces, key_bits } => {
            let r = &mut cfg.rsa;
            r.config.strategy = strategy.unwrap_or(r.config.strategy);
            r.keys = keys.unwrap_or(r.keys);
            r.config.traces = traces.unwrap_or(r.config.traces);
            r.config.key_bits = key_bits.unwrap_or(r.config.key_bits);
        }
        Command::Srp { strategy, group_bits, keys } => {
            let s = &mut cfg.srp;
            s.strategy = strategy.unwrap_or(s.strategy);
            s.group_bits = group_bits.unwrap_or(s.group_bits);
            s.keys = keys.unwrap_or(s.keys);
        }
        Command::Ispectre { strategy, secret_len } => {
            let i = &mut cfg.ispectre;
            i.config.strategy = strategy.unwrap_or(i.config.strategy);
            i.secret_len = secret_len.unwrap_or(i.secret_len);
        }
        Command::Detect { detectors, regenerate } => {
            if !detectors.is_empty() {
                cfg.detect.detectors = detectors.clone();
            }
            cfg.detect.regenerate |= *regenerate;
        }
        Command::Fingerprint { strategy } => {
            cfg.fingerprint.strategy = strategy.unwrap_or(cfg.fingerprint.strategy);
        }
    }
    (cli.command, cfg)
}

fn resolve(cfg: &ExperimentConfig) -> anyhow::Result<Run> {
    let seed = cfg.seed.ok_or_else(|| anyhow!("a seed is required: pass --seed or set `seed` in the config"))?;
    let mut profile = LatencyProfile::load(cfg.profile.as_deref().unwrap_or(DEFAULT_PROFILE))?;
    if let Some(sigma) = cfg.noise_sigma {
        if !(sigma >= 0.0) {
            return Err(smcsim::Error::Config(format!("noise_sigma must be >= 0, got {sigma}")).into());
        }
        profile = profile.with_noise(sigma);
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(Run {
        profile: Arc::new(profile),
        seed,
        out,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    let (command, cfg) = apply_flags(cli, file);
    let run = resolve(&cfg)?;
    match command {
        Command::Histogram { .. } => commands::histogram(&run, &cfg.histogram),
        Command::Covert { .. } => commands::covert(&run, &cfg.covert),
        Command::Rsa { .. } => commands::rsa(&run, &cfg.rsa),
        Command::Srp { .. } => commands::srp(&run, &cfg.srp),
        Command::Ispectre { .. } => commands::ispectre(&run, &cfg.ispectre),
        Command::Detect { .. } => commands::detect(&run, &cfg.detect),
        Command::Fingerprint { .. } => commands::fingerprint(&run, &cfg.fingerprint),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let unsupported = err
        .chain()
        .filter_map(|e| e.downcast_ref::<smcsim::Error>())
        .any(smcsim::Error::is_unsupported);
    if unsupported {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
