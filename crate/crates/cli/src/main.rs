use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xmodal_cli::commands::{cmd_ablate, cmd_generate, cmd_lp_demo, cmd_noise_sweep, cmd_train, LpDemoOptions};
use xmodal_cli::config::parse_bool;
use xmodal_cli::{exit_code, RunConfig, EXIT_CONFIG};
use xmodal_core::{Error, Result};

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Semi-supervised cross-modal pixel classification on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key = value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value assignments, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Training seed (the scene seed for `generate`).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Module switch, e.g. `--toggle sa=off`; one of il, lp, sa, bn, dropout.
    #[arg(long, value_name = "MODULE=on|off")]
    toggle: Vec<String>,
    /// Training epochs per round.
    #[arg(long)]
    epochs: Option<usize>,
    /// Training rounds (and propagation rounds).
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene and its manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain, train over propagation rounds and evaluate.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        /// Continue from a checkpoint written by an earlier run with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the module grid over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        /// Run the grid cells concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Accuracy under input noise for an SA-enabled and an SA-disabled run.
    NoiseSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        with_sa: PathBuf,
        #[arg(long)]
        without_sa: PathBuf,
        /// Comma-separated SNR values in dB.
        #[arg(long)]
        snr_grid: Option<String>,
    },
    /// Standalone propagation with S, P and Y dumps.
    LpDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        /// Use patch summary features instead of network tap features.
        #[arg(long)]
        raw: bool,
        /// Trained run directory providing the tap features.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Keep at most this many unlabeled samples.
        #[arg(long)]
        subsample: Option<usize>,
        /// Dump every n-th iterate.
        #[arg(long, default_value_t = 1)]
        dump_every: usize,
    },
}

fn resolve(common: &Common, generate: bool) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            key: kv.clone(),
            message: "expected key=value".into(),
        })?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        if generate {
            cfg.scene.seed = seed;
        } else {
            cfg.train.seed = seed;
        }
    }
    for t in &common.toggle {
        let (k, v) = t.split_once('=').ok_or_else(|| Error::Config {
            key: format!("toggle.{t}"),
            message: "expected module=on|off".into(),
        })?;
        let key = format!("toggle.{}", k.trim());
        parse_bool(&key, v.trim())?;
        cfg.set(&key, v)?;
    }
    if let Some(e) = common.epochs {
        cfg.train.optimizer.epochs_per_round = e;
    }
    if let Some(r) = common.rounds {
        cfg.train.optimizer.max_rounds = r;
        cfg.train.lp.max_rounds = r;
    }
    Ok(cfg)
}

fn init_threads() {
    if let Some(n) = std::env::var("XMODAL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn announce(out: &Path) {
    eprintln!("outputs in {}", out.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = resolve(&common, true)?;
            let manifest = cmd_generate(&cfg, &common.out, common.force)?;
            print!("{manifest}");
            announce(&common.out);
        }
        Command::Train { common, scene, resume } => {
            let cfg = resolve(&common, false)?;
            let report = cmd_train(&cfg, &scene, &common.out, common.force, resume.as_deref())?;
            print!("{}", report.summary());
            announce(&common.out);
        }
        Command::Ablate { common, scene, parallel } => {
            let cfg = resolve(&common, false)?;
            print!("{}", cmd_ablate(&cfg, &scene, &common.out, common.force, parallel)?);
            announce(&common.out);
        }
        Command::NoiseSweep {
            common,
            scene,
            with_sa,
            without_sa,
            snr_grid,
        } => {
            let mut cfg = resolve(&common, false)?;
            if let Some(grid) = snr_grid {
                cfg.set("sweep.snr_grid", &grid)?;
            }
            print!(
                "{}",
                cmd_noise_sweep(&cfg, &scene, &with_sa, &without_sa, &common.out, common.force)?
            );
            announce(&common.out);
        }
        Command::LpDemo {
            common,
            scene,
            raw,
            run,
            subsample,
            dump_every,
        } => {
            let mut cfg = resolve(&common, false)?;
            if let Some(n) = subsample {
                cfg.lp_demo_unlabeled = n;
            }
            let audit = cmd_lp_demo(
                &cfg,
                &scene,
                &common.out,
                common.force,
                &LpDemoOptions { raw, run, dump_every },
            )?;
            println!(
                "sigma {} iterations {} max-abs gap to closed form {:e}",
                audit.sigma, audit.iterations, audit.max_abs_gap
            );
            announce(&common.out);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    init_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
