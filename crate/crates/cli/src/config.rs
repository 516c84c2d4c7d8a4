//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use xmodal_core::experiments::{ablation_row, AblationRow, ABLATION_ROWS};
use xmodal_core::synth::{SceneKind, SyntheticSceneSpec, SNR_GRID};
use xmodal_core::train::TrainConfig;
use xmodal_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SyntheticSceneSpec,
    pub train: TrainConfig,
    pub ablate_seeds: Vec<u64>,
    pub ablate_rows: Vec<AblationRow>,
    pub snr_grid: Vec<f64>,
    /// Unlabeled samples kept by the propagation demo; 0 keeps all.
    pub lp_demo_unlabeled: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SyntheticSceneSpec::default(),
            train: TrainConfig::default(),
            ablate_seeds: (0..5).collect(),
            ablate_rows: ABLATION_ROWS.to_vec(),
            snr_grid: SNR_GRID.to_vec(),
            lp_demo_unlabeled: 0,
        }
    }
}

pub const KEYS: [&str; 46] = [
    "seed",
    "scene.height",
    "scene.width",
    "scene.classes",
    "scene.bands_hi",
    "scene.bands_lo",
    "scene.psf_sigma",
    "scene.label_fraction",
    "scene.unlabeled_fraction",
    "scene.spectral_noise",
    "scene.brightness_variation",
    "scene.sensor_noise",
    "scene.kind",
    "scene.seed",
    "train.lr",
    "train.power",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "train.batch_size",
    "train.epochs",
    "train.rounds",
    "train.pretrain_epochs",
    "train.masking_rate",
    "train.pretrain",
    "train.modality2",
    "train.unlabeled",
    "loss.labeled",
    "loss.pseudo",
    "loss.reconstruction",
    "loss.adversarial",
    "lp.sigma",
    "lp.sigma_grid",
    "lp.max_iter",
    "lp.tolerance",
    "lp.max_rounds",
    "lp.folds",
    "net.patch",
    "net.dropout",
    "toggle.il",
    "toggle.lp",
    "toggle.sa",
    "toggle.bn",
    "toggle.dropout",
    "ablate.seeds",
    "ablate.rows",
];

/// Keys outside [`KEYS`] that are still accepted.
const EXTRA_KEYS: [&str; 2] = ["sweep.snr_grid", "lp_demo.unlabeled"];

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config {
        key: key.to_string(),
        message: format!("`{value}` is not {what}"),
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "a valid number"))
}

fn float(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value)?;
    if v.is_nan() {
        return Err(bad(key, value, "a number"));
    }
    Ok(v)
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "on/off")),
    }
}

fn list<T>(key: &str, value: &str, f: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(bad(key, value, "a non-empty list"));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.scene;
        let t = &mut self.train;
        let o = &mut t.optimizer;
        match key {
            "seed" => t.seed = num(key, v)?,
            "scene.height" => s.height = num(key, v)?,
            "scene.width" => s.width = num(key, v)?,
            "scene.classes" => s.classes = num(key, v)?,
            "scene.bands_hi" => s.bands_hi = num(key, v)?,
            "scene.bands_lo" => s.bands_lo = num(key, v)?,
            "scene.psf_sigma" => s.psf_sigma = float(key, v)?,
            "scene.label_fraction" => s.label_fraction = float(key, v)?,
            "scene.unlabeled_fraction" => s.unlabeled_fraction = float(key, v)?,
            "scene.spectral_noise" => s.spectral_noise = float(key, v)?,
            "scene.brightness_variation" => s.brightness_variation = float(key, v)?,
            "scene.sensor_noise" => s.sensor_noise = float(key, v)?,
            "scene.kind" => {
                s.kind = match v {
                    "optical" => SceneKind::Optical,
                    "sar" => SceneKind::Sar,
                    _ => return Err(bad(key, v, "optical or sar")),
                }
            }
            "scene.seed" => s.seed = num(key, v)?,
            "train.lr" => o.base_lr = float(key, v)?,
            "train.power" => o.power = float(key, v)?,
            "train.beta1" => o.beta1 = float(key, v)?,
            "train.beta2" => o.beta2 = float(key, v)?,
            "train.epsilon" => o.epsilon = float(key, v)?,
            "train.batch_size" => o.batch_size = num(key, v)?,
            "train.epochs" => o.epochs_per_round = num(key, v)?,
            "train.rounds" => o.max_rounds = num(key, v)?,
            "train.pretrain_epochs" => o.pretrain_epochs = num(key, v)?,
            "train.masking_rate" => o.masking_rate = float(key, v)?,
            "train.pretrain" => t.pretrain = parse_bool(key, v)?,
            "train.modality2" => t.use_modality2 = parse_bool(key, v)?,
            "train.unlabeled" => t.use_unlabeled = parse_bool(key, v)?,
            "loss.labeled" => t.weights.labeled = float(key, v)?,
            "loss.pseudo" => t.weights.pseudo = float(key, v)?,
            "loss.reconstruction" => t.weights.reconstruction = float(key, v)?,
            "loss.adversarial" => t.weights.adversarial = float(key, v)?,
            "lp.sigma" => t.lp.sigma = float(key, v)?,
            "lp.sigma_grid" => t.lp.sigma_grid = list(key, v, float)?,
            "lp.max_iter" => t.lp.max_iter = num(key, v)?,
            "lp.tolerance" => t.lp.tolerance = float(key, v)?,
            "lp.max_rounds" => t.lp.max_rounds = num(key, v)?,
            "lp.folds" => t.lp.folds = num(key, v)?,
            "net.patch" => t.patch = num(key, v)?,
            "net.dropout" => t.dropout_rate = float(key, v)?,
            "toggle.il" => t.toggles.il = parse_bool(key, v)?,
            "toggle.lp" => t.toggles.lp = parse_bool(key, v)?,
            "toggle.sa" => t.toggles.sa = parse_bool(key, v)?,
            "toggle.bn" => t.toggles.bn = parse_bool(key, v)?,
            "toggle.dropout" => t.toggles.dropout = parse_bool(key, v)?,
            "ablate.seeds" => self.ablate_seeds = list(key, v, num)?,
            "ablate.rows" => {
                self.ablate_rows = list(key, v, |k, name| {
                    ablation_row(name).ok_or_else(|| bad(k, name, "an ablation row name"))
                })?
            }
            "sweep.snr_grid" => self.snr_grid = list(key, v, float)?,
            "lp_demo.unlabeled" => self.lp_demo_unlabeled = num(key, v)?,
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Applies every assignment of a config text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", n + 1),
                message: format!("expected key = value, got `{line}`"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        if self.ablate_seeds.is_empty() {
            return Err(bad("ablate.seeds", "", "a non-empty list"));
        }
        if let Some(s) = self.snr_grid.iter().find(|s| s.is_nan() || **s == f64::NEG_INFINITY) {
            return Err(bad("sweep.snr_grid", &s.to_string(), "a finite SNR or inf"));
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let t = &self.train;
        let o = &t.optimizer;
        let rows: Vec<&str> = self.ablate_rows.iter().map(|r| r.name).collect();
        let values: [String; 46] = [
            t.seed.to_string(),
            s.height.to_string(),
            s.width.to_string(),
            s.classes.to_string(),
            s.bands_hi.to_string(),
            s.bands_lo.to_string(),
            s.psf_sigma.to_string(),
            s.label_fraction.to_string(),
            s.unlabeled_fraction.to_string(),
            s.spectral_noise.to_string(),
            s.brightness_variation.to_string(),
            s.sensor_noise.to_string(),
            s.kind.name().to_string(),
            s.seed.to_string(),
            o.base_lr.to_string(),
            o.power.to_string(),
            o.beta1.to_string(),
            o.beta2.to_string(),
            o.epsilon.to_string(),
            o.batch_size.to_string(),
            o.epochs_per_round.to_string(),
            o.max_rounds.to_string(),
            o.pretrain_epochs.to_string(),
            o.masking_rate.to_string(),
            on_off(t.pretrain).to_string(),
            on_off(t.use_modality2).to_string(),
            on_off(t.use_unlabeled).to_string(),
            t.weights.labeled.to_string(),
            t.weights.pseudo.to_string(),
            t.weights.reconstruction.to_string(),
            t.weights.adversarial.to_string(),
            t.lp.sigma.to_string(),
            join(&t.lp.sigma_grid),
            t.lp.max_iter.to_string(),
            t.lp.tolerance.to_string(),
            t.lp.max_rounds.to_string(),
            t.lp.folds.to_string(),
            t.patch.to_string(),
            t.dropout_rate.to_string(),
            on_off(t.toggles.il).to_string(),
            on_off(t.toggles.lp).to_string(),
            on_off(t.toggles.sa).to_string(),
            on_off(t.toggles.bn).to_string(),
            on_off(t.toggles.dropout).to_string(),
            join(&self.ablate_seeds),
            rows.join(","),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "{} = {}", EXTRA_KEYS[0], join(&self.snr_grid));
        let _ = writeln!(out, "{} = {}", EXTRA_KEYS[1], self.lp_demo_unlabeled);
        out
    }
}
