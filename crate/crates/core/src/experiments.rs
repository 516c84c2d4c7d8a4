//! Baselines, the module ablation grid, the noise sweep and the propagation audit.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linear::{LinearClassifier, LinearConfig};
use crate::network::XModalNet;
use crate::propagation::{
    closed_form, one_hot, propagate, similarity_matrix, transfer_matrix, LpConfig, DENSE_CAP,
};
use crate::rng::RngState;
use crate::synth::{centre_spectra, extract_patches, inject_noise, Scene, Split};
use crate::tensor::Tensor;
use crate::train::{compute_metrics, evaluate, train, Metrics, Toggles, TrainConfig, TrainReport};

/// Median of a non-empty sample (mean of the two middle values for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Softmax regression on the raw modality-1 spectrum of each pixel.
pub fn linear_baseline(scene: &Scene) -> Result<Metrics> {
    let train_px = scene.pixels(Split::Train);
    let test_px = scene.pixels(Split::Test);
    let tr = extract_patches(scene, &train_px, 1)?;
    let te = extract_patches(scene, &test_px, 1)?;
    let model = LinearClassifier::fit(
        &centre_spectra(&tr.patches)?,
        &tr.labels,
        scene.classes,
        &LinearConfig::default(),
    )?;
    let pred = model.predict(&centre_spectra(&te.patches)?)?;
    compute_metrics(&te.labels, &pred, scene.classes)
}

/// The modality-1 network alone: DAE-pretrained, then fit on the labeled
/// patches only, with every cross-modal and semi-supervised module off.
pub fn unimodal_dae_config(base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        toggles: Toggles {
            il: false,
            lp: false,
            sa: false,
            ..base.toggles
        },
        pretrain: true,
        use_modality2: false,
        use_unlabeled: false,
        ..base.clone()
    }
}

pub fn unimodal_dae_baseline(scene: &Scene, base: &TrainConfig) -> Result<TrainReport> {
    Ok(train(scene, unimodal_dae_config(base))?.1)
}

/// One configuration of the module grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub toggles: Toggles,
}

const fn row(name: &'static str, bn: bool, dropout: bool, il: bool, lp: bool, sa: bool) -> AblationRow {
    AblationRow {
        name,
        toggles: Toggles {
            il,
            lp,
            sa,
            bn,
            dropout,
        },
    }
}

/// The seven module combinations, in table order.
pub const ABLATION_ROWS: [AblationRow; 7] = [
    row("none", true, true, false, false, false),
    row("il", true, true, true, false, false),
    row("il+lp", true, true, true, true, false),
    row("il+lp+sa", true, true, true, true, true),
    row("no-bn-no-dropout", false, false, true, true, true),
    row("no-bn", false, true, true, true, true),
    row("no-dropout", true, false, true, true, true),
];

pub fn ablation_row(name: &str) -> Option<AblationRow> {
    ABLATION_ROWS.iter().copied().find(|r| r.name == name)
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub row: AblationRow,
    /// `(seed, report)` per run.
    pub runs: Vec<(u64, TrainReport)>,
}

impl AblationCell {
    pub fn pixel_accs(&self) -> Vec<f64> {
        self.runs.iter().map(|(_, r)| r.metrics.pixel_acc).collect()
    }

    pub fn median_pixel_acc(&self) -> f64 {
        median(&self.pixel_accs())
    }
}

/// Trains every row for every seed on one scene.
pub fn run_ablation(
    scene: &Scene,
    base: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow, u64, &TrainReport),
) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for r in rows {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                toggles: r.toggles,
                seed,
                ..base.clone()
            };
            let (_, report) = train(scene, cfg)?;
            progress(r, seed, &report);
            runs.push((seed, report));
        }
        cells.push(AblationCell { row: *r, runs });
    }
    Ok(cells)
}

fn flag(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// `row,bn,dropout,il,lp,sa,median_pixel_acc,median_miou,seeds,pixel_accs`
pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut s = String::from("row,bn,dropout,il,lp,sa,median_pixel_acc,median_miou,seeds,pixel_accs\n");
    for c in cells {
        let t = c.row.toggles;
        let mious: Vec<f64> = c.runs.iter().map(|(_, r)| r.metrics.miou).collect();
        let accs: Vec<String> = c.pixel_accs().iter().map(|a| format!("{a:.6}")).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{:.6},{},{}",
            c.row.name,
            flag(t.bn),
            flag(t.dropout),
            flag(t.il),
            flag(t.lp),
            flag(t.sa),
            c.median_pixel_acc(),
            median(&mious),
            c.runs.len(),
            accs.join(";")
        );
    }
    s
}

/// Test-split metrics with white noise injected into the whole modality-1
/// image at each SNR before patches are cut.
pub fn noise_curve(
    net: &XModalNet,
    scene: &Scene,
    patch: usize,
    snr_grid: &[f64],
    seed: u64,
) -> Result<Vec<(f64, Metrics)>> {
    let test = scene.pixels(Split::Test);
    let mut out = Vec::with_capacity(snr_grid.len());
    for (k, &snr) in snr_grid.iter().enumerate() {
        let mut rng = RngState::new(seed).derive(k as u64);
        let noisy = scene.with_lo(inject_noise(&scene.lo, snr, &mut rng)?)?;
        let batch = extract_patches(&noisy, &test, patch)?;
        out.push((snr, evaluate(net, &batch, scene.classes)?));
    }
    Ok(out)
}

/// `snr_db,<model>_pixel_acc,...` with one column per curve.
pub fn noise_csv(names: &[&str], curves: &[Vec<(f64, Metrics)>]) -> String {
    let mut s = String::from("snr_db");
    for n in names {
        let _ = write!(s, ",{n}_pixel_acc,{n}_miou");
    }
    s.push('\n');
    if let Some(first) = curves.first() {
        for (i, (snr, _)) in first.iter().enumerate() {
            let _ = write!(s, "{snr}");
            for c in curves {
                let _ = write!(s, ",{:.6},{:.6}", c[i].1.pixel_acc, c[i].1.miou);
            }
            s.push('\n');
        }
    }
    s
}

/// Every intermediate of one standalone propagation.
#[derive(Clone, Debug)]
pub struct LpAudit {
    pub sigma: f64,
    pub labeled: usize,
    pub s: Tensor,
    pub p: Tensor,
    /// `(iteration, Y)`: the start, every `keep_every`-th update and the last.
    pub iterates: Vec<(usize, Tensor)>,
    pub iterations: usize,
    pub closed_form: Tensor,
    pub max_abs_gap: f64,
}

/// Convergence tolerance used by [`lp_audit`] when the configured one is looser.
pub const AUDIT_TOLERANCE: f64 = 1e-12;

/// Propagates from one-hot labeled rows and uniform unlabeled rows.
pub fn lp_audit(
    features_l: &Tensor,
    labels: &[usize],
    features_u: &Tensor,
    classes: usize,
    sigma: f64,
    cfg: &LpConfig,
    keep_every: usize,
) -> Result<LpAudit> {
    let keep_every = keep_every.max(1);
    let (m, f) = features_l.rows_cols();
    let (u, fu) = features_u.rows_cols();
    if f != fu {
        return Err(Error::dim("lp_audit", features_l.shape(), features_u.shape()));
    }
    if m + u > DENSE_CAP {
        return Err(Error::Parameter(format!(
            "{} samples exceed the dense cap of {DENSE_CAP}; subsample the unlabeled set",
            m + u
        )));
    }
    let mut x = features_l.data().to_vec();
    x.extend_from_slice(features_u.data());
    let x = Tensor::new(vec![m + u, f], x)?;
    let y_l = one_hot(labels, classes);
    let mut y0 = y_l.data().to_vec();
    y0.extend(std::iter::repeat_n(1.0 / classes as f64, u * classes));
    let y0 = Tensor::new(vec![m + u, classes], y0)?;
    let s = similarity_matrix(&x, sigma)?;
    let p = transfer_matrix(&s)?;
    let mut iterates = vec![(0, y0.clone())];
    let mut record = |it: usize, y: &Tensor| {
        if it.is_multiple_of(keep_every) {
            iterates.push((it, y.clone()));
        }
    };
    let tight = LpConfig {
        tolerance: cfg.tolerance.min(AUDIT_TOLERANCE),
        ..cfg.clone()
    };
    let result = propagate(&p, &y0, m, &tight, Some(&mut record))?;
    if iterates.last().map(|(it, _)| *it) != Some(result.iterations) {
        iterates.push((result.iterations, result.y.clone()));
    }
    let closed = closed_form(&p, &y_l, m)?;
    let tail = result.y.select_rows(&(m..m + u).collect::<Vec<_>>());
    let max_abs_gap = tail.max_abs_diff(&closed);
    Ok(LpAudit {
        sigma,
        labeled: m,
        s,
        p,
        iterates,
        iterations: result.iterations,
        closed_form: closed,
        max_abs_gap,
    })
}
