//! The five subcommands. Each writes its resolved config next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use xmodal_core::container::{write_archive, write_container, CHECKPOINT_MAGIC};
use xmodal_core::experiments::{
    ablation_csv, lp_audit, median, noise_csv, noise_curve, AblationCell, LpAudit,
};
use xmodal_core::network::XModalNet;
use xmodal_core::propagation::{select_sigma, DENSE_CAP};
use xmodal_core::synth::{
    extract_patches, generate_scene, load_scene, patch_summary_features, save_scene, Scene, Split,
};
use xmodal_core::train::{TrainConfig, TrainReport, Trainer};
use xmodal_core::{Error, Result, RngState, Tensor};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.xmck";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.xmck";
pub const SUMMARY_FILE: &str = "summary.txt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(io_err(dir))?;
        if entries.next().is_some() && !force {
            return Err(Error::Config {
                key: "out".into(),
                message: format!("{} is not empty; pass --force to overwrite", dir.display()),
            });
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(io_err(&path))
}

fn load_run_config(run: &Path) -> Result<RunConfig> {
    RunConfig::from_file(&run.join(CONFIG_FILE))
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<String> {
    cfg.scene.validate()?;
    let scene = generate_scene(&cfg.scene)?;
    prepare_out(out, force)?;
    let manifest = save_scene(out, &scene)?;
    write_text(out, CONFIG_FILE, &cfg.to_text())?;
    Ok(manifest)
}

fn pretrain_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,modality1,modality2\n");
    for r in &report.pretrain {
        let m2 = r.modality2.map_or(String::new(), |v| format!("{v:e}"));
        let _ = writeln!(s, "{},{:e},{}", r.epoch + 1, r.modality1, m2);
    }
    s
}

fn log_progress(t: &Trainer, (last_epochs, last_pretrain, last_rounds): (usize, usize, usize)) {
    if t.pretrain_log().len() > last_pretrain {
        if let Some(r) = t.pretrain_log().last() {
            eprintln!("pretrain epoch {} L_rec {:.5}", r.epoch + 1, r.modality1);
        }
    }
    if t.epochs().len() > last_epochs {
        if let Some(e) = t.epochs().last() {
            let l = &e.losses;
            eprintln!(
                "round {} epoch {} L_l {:.4} L_pl {:.4} L_rec {:.4} L_adv {:.4} total {:.4} lr {:.3e}",
                e.round + 1,
                e.epoch,
                l.labeled,
                l.pseudo,
                l.reconstruction,
                l.adversarial,
                l.total,
                e.lr
            );
        }
    }
    if t.rounds().len() > last_rounds {
        if let Some(r) = t.rounds().last() {
            eprintln!("round {} pseudo-labels changed {} (sigma {})", r.round, r.changed, r.sigma);
        }
    }
}

/// Trains to completion, writing the run directory. On divergence the state
/// at failure is kept as a diagnostic checkpoint.
pub fn cmd_train(
    cfg: &RunConfig,
    scene_dir: &Path,
    out: &Path,
    force: bool,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    cfg.train.validate()?;
    let scene = load_scene(scene_dir)?;
    prepare_out(out, force)?;
    write_text(out, CONFIG_FILE, &cfg.to_text())?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(&scene, cfg.train.clone(), path)?,
        None => Trainer::new(&scene, cfg.train.clone())?,
    };
    let start = std::time::Instant::now();
    while !trainer.is_done() {
        let seen = (trainer.epochs().len(), trainer.pretrain_log().len(), trainer.rounds().len());
        if let Err(err) = trainer.advance() {
            trainer.save_checkpoint(out.join(DIAGNOSTIC_FILE))?;
            return Err(err);
        }
        log_progress(&trainer, seen);
    }
    trainer.save_checkpoint(out.join(CHECKPOINT_FILE))?;
    let report = trainer.report(start.elapsed().as_secs_f64())?;
    write_text(out, "metrics.csv", &report.metrics_csv())?;
    write_text(out, "rounds.csv", &report.rounds_csv())?;
    write_text(out, "pretrain.csv", &pretrain_csv(&report))?;
    write_text(out, SUMMARY_FILE, &report.summary())?;
    Ok(report)
}

pub fn cmd_ablate(cfg: &RunConfig, scene_dir: &Path, out: &Path, force: bool, parallel: bool) -> Result<String> {
    cfg.validate()?;
    let scene = load_scene(scene_dir)?;
    prepare_out(out, force)?;
    write_text(out, CONFIG_FILE, &cfg.to_text())?;
    let jobs: Vec<(usize, u64)> = (0..cfg.ablate_rows.len())
        .flat_map(|r| cfg.ablate_seeds.iter().map(move |&s| (r, s)))
        .collect();
    let run = |&(r, seed): &(usize, u64)| -> Result<(usize, u64, TrainReport)> {
        let row = cfg.ablate_rows[r];
        let tc = TrainConfig {
            toggles: row.toggles,
            seed,
            ..cfg.train.clone()
        };
        let report = Trainer::new(&scene, tc)?.run()?;
        eprintln!("{} seed {seed}: pixel acc {:.4}", row.name, report.metrics.pixel_acc);
        Ok((r, seed, report))
    };
    let results: Vec<(usize, u64, TrainReport)> = if parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    let mut cells: Vec<AblationCell> = cfg
        .ablate_rows
        .iter()
        .map(|&row| AblationCell { row, runs: Vec::new() })
        .collect();
    for (r, seed, report) in results {
        cells[r].runs.push((seed, report));
    }
    let csv = ablation_csv(&cells);
    write_text(out, "ablation.csv", &csv)?;
    let mut losses = String::from("row,seed,epoch,L_l,L_pl,L_rec,L_adv,total\n");
    for c in &cells {
        for (seed, rep) in &c.runs {
            for e in &rep.epochs {
                let l = &e.losses;
                let _ = writeln!(
                    losses,
                    "{},{seed},{},{:e},{:e},{:e},{:e},{:e}",
                    c.row.name, e.epoch, l.labeled, l.pseudo, l.reconstruction, l.adversarial, l.total
                );
            }
        }
    }
    write_text(out, "ablation_losses.csv", &losses)?;
    Ok(csv)
}

fn restore_net(scene: &Scene, run: &Path) -> Result<(XModalNet, TrainConfig)> {
    let rc = load_run_config(run)?;
    let ckpt = run.join(CHECKPOINT_FILE);
    if !ckpt.exists() {
        return Err(Error::State(format!("missing checkpoint {}", ckpt.display())));
    }
    let trainer = Trainer::resume(scene, rc.train.clone(), &ckpt)?;
    Ok((trainer.net, rc.train))
}

/// Accuracy against SNR for an SA-enabled and an SA-disabled run; the last row is the clean image.
pub fn cmd_noise_sweep(
    cfg: &RunConfig,
    scene_dir: &Path,
    with_sa: &Path,
    without_sa: &Path,
    out: &Path,
    force: bool,
) -> Result<String> {
    cfg.validate()?;
    let scene = load_scene(scene_dir)?;
    let (net_sa, cfg_sa) = restore_net(&scene, with_sa)?;
    let (net_plain, cfg_plain) = restore_net(&scene, without_sa)?;
    prepare_out(out, force)?;
    write_text(out, CONFIG_FILE, &cfg.to_text())?;
    let mut grid = cfg.snr_grid.clone();
    if !grid.contains(&f64::INFINITY) {
        grid.push(f64::INFINITY);
    }
    let seed = cfg.train.seed;
    let a = noise_curve(&net_sa, &scene, cfg_sa.patch, &grid, seed)?;
    let b = noise_curve(&net_plain, &scene, cfg_plain.patch, &grid, seed)?;
    let csv = noise_csv(&["sa", "no_sa"], &[a, b]);
    write_text(out, "noise.csv", &csv)?;
    Ok(csv)
}

#[derive(Clone, Debug)]
pub struct LpDemoOptions {
    pub raw: bool,
    /// Trained run whose tap layer embeds the samples; a fresh network otherwise.
    pub run: Option<PathBuf>,
    pub dump_every: usize,
}

/// Standalone propagation on the training and unlabeled pixels, dumping S, P and Y.
pub fn cmd_lp_demo(cfg: &RunConfig, scene_dir: &Path, out: &Path, force: bool, opts: &LpDemoOptions) -> Result<LpAudit> {
    cfg.validate()?;
    let scene = load_scene(scene_dir)?;
    let labeled_px = scene.pixels(Split::Train);
    let mut unlabeled_px = scene.pixels(Split::Unlabeled);
    if cfg.lp_demo_unlabeled > 0 && unlabeled_px.len() > cfg.lp_demo_unlabeled {
        RngState::new(cfg.train.seed).derive(0x1d).shuffle(&mut unlabeled_px);
        unlabeled_px.truncate(cfg.lp_demo_unlabeled);
        unlabeled_px.sort_unstable();
    }
    let n = labeled_px.len() + unlabeled_px.len();
    if n > DENSE_CAP {
        return Err(Error::Config {
            key: "lp_demo.unlabeled".into(),
            message: format!("{n} samples exceed the dense cap of {DENSE_CAP}; subsample with --subsample"),
        });
    }
    let (train_cfg, net) = match &opts.run {
        Some(run) if !opts.raw => {
            let (net, tc) = restore_net(&scene, run)?;
            (tc, Some(net))
        }
        _ => (cfg.train.clone(), None),
    };
    let lb = extract_patches(&scene, &labeled_px, train_cfg.patch)?;
    let ub = extract_patches(&scene, &unlabeled_px, train_cfg.patch)?;
    let (fl, fu) = if opts.raw {
        (patch_summary_features(&lb.patches)?, patch_summary_features(&ub.patches)?)
    } else {
        let net = match net {
            Some(net) => net,
            None => Trainer::new(&scene, train_cfg.clone())?.net,
        };
        (net.embed(&lb.patches)?, net.embed(&ub.patches)?)
    };
    let sigma = select_sigma(&fl, &lb.labels, scene.classes, &train_cfg.lp)?;
    let audit = lp_audit(&fl, &lb.labels, &fu, scene.classes, sigma, &train_cfg.lp, opts.dump_every)?;
    prepare_out(out, force)?;
    write_text(out, CONFIG_FILE, &cfg.to_text())?;
    write_container(out.join("S.xmdt"), &audit.s)?;
    write_container(out.join("P.xmdt"), &audit.p)?;
    let entries: Vec<(String, Tensor)> = audit
        .iterates
        .iter()
        .map(|(it, y)| (format!("Y/{it:06}"), y.clone()))
        .collect();
    write_archive(out.join("Y.xmck"), CHECKPOINT_MAGIC, &entries)?;
    write_container(out.join("closed_form.xmdt"), &audit.closed_form)?;
    let row_sums: Vec<f64> = (0..n).map(|i| audit.p.row(i).iter().sum()).collect();
    let worst_row = row_sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let text = format!(
        "samples {n}\nlabeled {}\nsigma {}\niterations {}\nmax_abs_gap_closed_form {:e}\nmax_row_sum_error {:e}\nmedian_row_sum {}\n",
        audit.labeled,
        audit.sigma,
        audit.iterations,
        audit.max_abs_gap,
        worst_row,
        median(&row_sums)
    );
    write_text(out, "audit.txt", &text)?;
    Ok(audit)
}
