use std::path::Path;
use std::process::Command;

use xmodal_cli::commands::{
    cmd_ablate, cmd_generate, cmd_lp_demo, cmd_noise_sweep, cmd_train, LpDemoOptions, CHECKPOINT_FILE,
    CONFIG_FILE, SUMMARY_FILE,
};
use xmodal_cli::{exit_code, RunConfig, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_RUNTIME};
use xmodal_core::container::{read_archive, read_container, CHECKPOINT_MAGIC};
use xmodal_core::experiments::ablation_row;
use xmodal_core::Error;

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "scene.height = 20\nscene.width = 20\nscene.classes = 3\nscene.bands_hi = 16\nscene.bands_lo = 4\n\
         scene.label_fraction = 0.1\nnet.patch = 5\ntrain.epochs = 1\ntrain.rounds = 2\ntrain.pretrain_epochs = 1\n\
         train.batch_size = 16\n",
    )
    .unwrap();
    cfg
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xmodal"))
}

#[test]
fn generate_is_deterministic_and_refuses_non_empty_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let a = cmd_generate(&cfg, &tmp.path().join("a"), false).unwrap();
    let b = cmd_generate(&cfg, &tmp.path().join("b"), false).unwrap();
    assert_eq!(a, b);
    assert!(tmp.path().join("a").join(CONFIG_FILE).exists());
    let again = cmd_generate(&cfg, &tmp.path().join("a"), false).unwrap_err();
    assert_eq!(exit_code(&again), EXIT_CONFIG);
    cmd_generate(&cfg, &tmp.path().join("a"), true).unwrap();
}

#[test]
fn train_with_zero_epochs_writes_an_evaluation_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cmd_generate(&cfg, &tmp.path().join("scene"), false).unwrap();
    cfg.set("train.epochs", "0").unwrap();
    let report = cmd_train(&cfg, &tmp.path().join("scene"), &tmp.path().join("run"), false, None).unwrap();
    assert!(report.epochs.is_empty());
    let summary = read(&tmp.path().join("run").join(SUMMARY_FILE));
    assert!(summary.contains("\"pixel_acc\""));
    assert!(summary.contains("\"miou\""));
    let resolved = read(&tmp.path().join("run").join(CONFIG_FILE));
    assert!(resolved.contains("train.epochs = 0"));
}

#[test]
fn train_reruns_reproduce_the_summary_and_resume_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let scene = tmp.path().join("scene");
    cmd_generate(&cfg, &scene, false).unwrap();
    cmd_train(&cfg, &scene, &tmp.path().join("r1"), false, None).unwrap();
    cmd_train(&cfg, &scene, &tmp.path().join("r2"), false, None).unwrap();
    let s1 = read(&tmp.path().join("r1").join(SUMMARY_FILE));
    assert_eq!(s1, read(&tmp.path().join("r2").join(SUMMARY_FILE)));
    assert_eq!(
        read(&tmp.path().join("r1").join("metrics.csv")),
        read(&tmp.path().join("r2").join("metrics.csv"))
    );
    let header = read(&tmp.path().join("r1").join("metrics.csv"));
    assert!(header.starts_with("epoch,L_l,L_pl,L_rec,L_adv,total,lr\n"));

    let entries = read_archive(tmp.path().join("r1").join(CHECKPOINT_FILE), CHECKPOINT_MAGIC).unwrap();
    assert!(entries.iter().any(|(n, _)| n == "state/progress"));
    let resumed = cmd_train(
        &cfg,
        &scene,
        &tmp.path().join("r3"),
        false,
        Some(&tmp.path().join("r1").join(CHECKPOINT_FILE)),
    )
    .unwrap();
    assert_eq!(resumed.summary(), s1);
}

#[test]
fn scene_files_are_not_modified_by_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let scene = tmp.path().join("scene");
    cmd_generate(&cfg, &scene, false).unwrap();
    let before = read_container(scene.join("lo.xmdt")).unwrap();
    let manifest = read(&scene.join("manifest.txt"));
    cmd_train(&cfg, &scene, &tmp.path().join("run"), false, None).unwrap();
    assert_eq!(read_container(scene.join("lo.xmdt")).unwrap(), before);
    assert_eq!(read(&scene.join("manifest.txt")), manifest);
}

#[test]
fn ablation_without_sa_has_zero_adversarial_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    let scene = tmp.path().join("scene");
    cmd_generate(&cfg, &scene, false).unwrap();
    cfg.ablate_rows = vec![ablation_row("il+lp").unwrap(), ablation_row("il+lp+sa").unwrap()];
    cfg.ablate_seeds = vec![0, 1];
    let csv = cmd_ablate(&cfg, &scene, &tmp.path().join("abl"), false, false).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("il+lp,on,on,on,on,off,"));
    let losses = read(&tmp.path().join("abl").join("ablation_losses.csv"));
    let mut with_sa = 0.0;
    for line in losses.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let adv: f64 = f[6].parse().unwrap();
        if f[0] == "il+lp" {
            assert_eq!(adv, 0.0);
        } else {
            with_sa += adv;
        }
    }
    assert!(with_sa > 0.0);
}

#[test]
fn noise_sweep_reports_the_grid_and_a_clean_row() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    let scene = tmp.path().join("scene");
    cmd_generate(&cfg, &scene, false).unwrap();
    cmd_train(&cfg, &scene, &tmp.path().join("sa"), false, None).unwrap();
    cfg.set("toggle.sa", "off").unwrap();
    cmd_train(&cfg, &scene, &tmp.path().join("plain"), false, None).unwrap();
    let csv = cmd_noise_sweep(
        &cfg,
        &scene,
        &tmp.path().join("sa"),
        &tmp.path().join("plain"),
        &tmp.path().join("sweep"),
        false,
    )
    .unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "snr_db,sa_pixel_acc,sa_miou,no_sa_pixel_acc,no_sa_miou");
    let snrs: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(snrs, ["10", "20", "30", "40", "inf"]);
    let clean = |run: &str| -> f64 {
        let s = read(&tmp.path().join(run).join(SUMMARY_FILE));
        let line = s.lines().find(|l| l.contains("\"pixel_acc\"")).unwrap();
        line.split(':').nth(1).unwrap().trim().trim_end_matches(',').parse().unwrap()
    };
    let last: Vec<f64> = rows[5].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!((last[0] - clean("sa")).abs() < 1e-6);
    assert!((last[2] - clean("plain")).abs() < 1e-6);

    let missing = cmd_noise_sweep(
        &cfg,
        &scene,
        &tmp.path().join("nowhere"),
        &tmp.path().join("plain"),
        &tmp.path().join("sweep2"),
        false,
    );
    assert!(missing.is_err());
}

#[test]
fn lp_demo_dumps_a_clamped_row_stochastic_propagation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.set("lp.max_iter", "1000000").unwrap();
    cfg.apply_text("scene.sensor_noise = 0.02\nscene.spectral_noise = 0.04\nscene.brightness_variation = 0.15\n")
        .unwrap();
    let scene = tmp.path().join("scene");
    cmd_generate(&cfg, &scene, false).unwrap();
    let opts = LpDemoOptions {
        raw: true,
        run: None,
        dump_every: 1000,
    };
    let audit = cmd_lp_demo(&cfg, &scene, &tmp.path().join("lp"), false, &opts).unwrap();
    assert!(audit.max_abs_gap < 1e-8, "gap {}", audit.max_abs_gap);
    let p = read_container(tmp.path().join("lp").join("P.xmdt")).unwrap();
    for i in 0..p.shape()[0] {
        assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let ys = read_archive(tmp.path().join("lp").join("Y.xmck"), CHECKPOINT_MAGIC).unwrap();
    assert_eq!(ys.len(), audit.iterates.len());
    assert_eq!(ys.last().unwrap().0, format!("Y/{:06}", audit.iterations));
    let first = &ys[0].1;
    for (_, y) in &ys {
        for i in 0..audit.labeled {
            assert_eq!(y.row(i), first.row(i));
        }
    }
}

#[test]
fn exit_codes_follow_the_error_kind() {
    assert_eq!(
        exit_code(&Error::Config {
            key: "k".into(),
            message: "m".into()
        }),
        EXIT_CONFIG
    );
    assert_eq!(
        exit_code(&Error::Divergence {
            epoch: 3,
            loss: 1e3,
            initial: 1.0
        }),
        EXIT_DIVERGENCE
    );
    assert_eq!(exit_code(&Error::Numeric { op: "x".into() }), EXIT_RUNTIME);
}

#[test]
fn binary_reports_config_errors_with_exit_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["generate", "--set", "scene.label_fraction=1.5", "--out"])
        .arg(tmp.path().join("s"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene.label_fraction"));

    let out = bin()
        .args(["generate", "--set", "scene.nonsense=1", "--out"])
        .arg(tmp.path().join("s"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().args(["train", "--bogus-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn binary_generate_then_train_with_zero_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("small.cfg");
    std::fs::write(&cfg_path, small().to_text()).unwrap();
    let scene = tmp.path().join("scene");
    let st = bin()
        .args(["generate", "--seed", "3", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&scene)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(read(&scene.join(CONFIG_FILE)).contains("scene.seed = 3"));
    let out = bin()
        .args(["train", "--epochs", "0", "--toggle", "sa=off", "--config"])
        .arg(&cfg_path)
        .arg("--scene")
        .arg(&scene)
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = String::from_utf8_lossy(&out.stdout);
    assert!(summary.contains("\"pixel_acc\"") && summary.contains("\"miou\""));
    assert!(read(&tmp.path().join("run").join(CONFIG_FILE)).contains("toggle.sa = off"));
}

#[test]
fn lp_demo_over_the_dense_cap_asks_for_subsampling() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.apply_text("scene.height = 150\nscene.width = 150\nscene.label_fraction = 0.05\nscene.unlabeled_fraction = 0.9\n")
        .unwrap();
    let scene = tmp.path().join("scene");
    cmd_generate(&cfg, &scene, false).unwrap();
    let opts = LpDemoOptions {
        raw: true,
        run: None,
        dump_every: 1,
    };
    let err = cmd_lp_demo(&cfg, &scene, &tmp.path().join("lp"), false, &opts).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);
    assert!(err.to_string().contains("--subsample"));
    assert!(!tmp.path().join("lp").join("P.xmdt").exists());
}
