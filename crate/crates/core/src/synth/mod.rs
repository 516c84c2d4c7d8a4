//! Synthetic paired-modality scenes.
//!
//! A scene is a grid of pixels partitioned into class regions. Each pixel has
//! a fine spectrum (modality-2, spatially blurred) and a coarse band
//! response of that spectrum at full spatial detail (modality-1).

mod degrade;

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use sha2::{Digest, Sha256};

pub use degrade::{
    add_noise_unclamped, degrade_spatial, degrade_spectral, gaussian_kernel, inject_noise, reflect,
};

use crate::container::{encode_tensor, decode_tensor, write_bytes};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const SNR_GRID: [f64; 4] = [10.0, 20.0, 30.0, 40.0];
pub const MIN_PROTOTYPE_ANGLE_DEG: f64 = 15.0;
pub const PROTOTYPE_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    /// Linear band response of the spectrum.
    Optical,
    /// Squared band response with multiplicative gamma speckle.
    Sar,
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Optical => "optical",
            SceneKind::Sar => "sar",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Modality-2 band count.
    pub bands_hi: usize,
    /// Modality-1 band count.
    pub bands_lo: usize,
    pub psf_sigma: f64,
    /// `bands_lo x bands_hi`, rows non-negative summing to 1. `None` uses
    /// [`band_response`].
    pub response: Option<Tensor>,
    pub label_fraction: f64,
    pub unlabeled_fraction: f64,
    /// Std of the spectrally correlated per-pixel noise.
    pub spectral_noise: f64,
    /// Std of the per-pixel brightness factor.
    pub brightness_variation: f64,
    /// Std of the modality-1 sensor noise.
    pub sensor_noise: f64,
    pub kind: SceneKind,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            height: 96,
            width: 96,
            classes: 6,
            bands_hi: 64,
            bands_lo: 8,
            psf_sigma: 1.5,
            response: None,
            label_fraction: 0.05,
            unlabeled_fraction: 0.2,
            spectral_noise: 0.06,
            brightness_variation: 0.2,
            sensor_noise: 0.2,
            kind: SceneKind::Optical,
            seed: 0,
        }
    }
}

/// Evenly spaced Gaussian band filters, rows normalised to sum to 1.
pub fn band_response(bands_lo: usize, bands_hi: usize) -> Tensor {
    let spacing = bands_hi as f64 / bands_lo as f64;
    let width = 0.6 * spacing;
    let mut data = Vec::with_capacity(bands_lo * bands_hi);
    for i in 0..bands_lo {
        let centre = (i as f64 + 0.5) * spacing - 0.5;
        let row: Vec<f64> = (0..bands_hi)
            .map(|b| (-((b as f64 - centre) / width).powi(2) / 2.0).exp())
            .collect();
        let total: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|v| v / total));
    }
    Tensor::new(vec![bands_lo, bands_hi], data).expect("response shape")
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(Error::config(format!("scene.{k}"), m));
        if self.height < 4 || self.width < 4 {
            return err("height", format!("grid {}x{} too small", self.height, self.width));
        }
        if self.classes < 2 {
            return err("classes", format!("{} classes, need at least 2", self.classes));
        }
        if self.bands_lo == 0 || self.bands_lo >= self.bands_hi {
            return err(
                "bands_lo",
                format!("need 0 < bands_lo ({}) < bands_hi ({})", self.bands_lo, self.bands_hi),
            );
        }
        if !(self.psf_sigma >= 0.0 && self.psf_sigma.is_finite()) {
            return err("psf_sigma", format!("{} must be non-negative", self.psf_sigma));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction < 1.0) {
            return err("label_fraction", format!("{} not in (0, 1)", self.label_fraction));
        }
        if !(self.unlabeled_fraction >= 0.0 && self.label_fraction + self.unlabeled_fraction < 1.0) {
            return err(
                "unlabeled_fraction",
                format!("{} leaves no test pixels", self.unlabeled_fraction),
            );
        }
        for (k, v) in [
            ("spectral_noise", self.spectral_noise),
            ("brightness_variation", self.brightness_variation),
            ("sensor_noise", self.sensor_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(k, format!("{v} must be non-negative"));
            }
        }
        if let Some(r) = &self.response {
            if r.shape() != [self.bands_lo, self.bands_hi] {
                return err("response", format!("shape {:?}", r.shape()));
            }
            for i in 0..self.bands_lo {
                let row = r.row(i);
                if row.iter().any(|v| *v < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return err("response", format!("row {i} is not a non-negative unit-sum filter"));
                }
            }
        }
        Ok(())
    }

    pub fn response_matrix(&self) -> Tensor {
        self.response
            .clone()
            .unwrap_or_else(|| band_response(self.bands_lo, self.bands_hi))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Unlabeled,
    Test,
}

impl Split {
    fn code(self) -> f64 {
        match self {
            Split::Train => 0.0,
            Split::Unlabeled => 1.0,
            Split::Test => 2.0,
        }
    }

    fn from_code(v: f64) -> Option<Split> {
        match v as i64 {
            0 if v == 0.0 => Some(Split::Train),
            1 if v == 1.0 => Some(Split::Unlabeled),
            2 if v == 2.0 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub classes: usize,
    /// `h x w x d2` in `[0, 1]`.
    pub hi: Tensor,
    /// `h x w x d1` in `[0, 1]`.
    pub lo: Tensor,
    /// Row-major class id per pixel.
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.lo.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.lo.shape()[1]
    }

    pub fn bands_lo(&self) -> usize {
        self.lo.shape()[2]
    }

    pub fn bands_hi(&self) -> usize {
        self.hi.shape()[2]
    }

    pub fn pixels(&self, split: Split) -> Vec<usize> {
        (0..self.split.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn class_histogram(&self, split: Split) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for (i, s) in self.split.iter().enumerate() {
            if *s == split {
                h[self.labels[i]] += 1;
            }
        }
        h
    }

    /// The same scene with modality-1 replaced, e.g. by a noisy copy.
    pub fn with_lo(&self, lo: Tensor) -> Result<Scene> {
        if lo.shape() != self.lo.shape() {
            return Err(Error::dim("with_lo", lo.shape(), self.lo.shape()));
        }
        Ok(Scene { lo, ..self.clone() })
    }
}

fn spectral_angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

fn prototype(rng: &mut RngState, bands: usize) -> Vec<f64> {
    let r = rng.rng();
    let d = bands as f64;
    let mut s = vec![0.05; bands];
    for _ in 0..3 {
        let centre = r.gen_range(0.0..d);
        let width = r.gen_range(d / 12.0..d / 4.0);
        let amp = r.gen_range(0.2..1.0);
        for (b, v) in s.iter_mut().enumerate() {
            *v += amp * (-((b as f64 - centre) / width).powi(2) / 2.0).exp();
        }
    }
    let max = s.iter().copied().fold(0.0, f64::max);
    let level = r.gen_range(0.4..0.8);
    s.iter().map(|v| v / max * level).collect()
}

fn prototypes(rng: &mut RngState, classes: usize, bands: usize) -> Result<Vec<Vec<f64>>> {
    for _ in 0..PROTOTYPE_RETRIES {
        let set: Vec<Vec<f64>> = (0..classes).map(|_| prototype(rng, bands)).collect();
        let ok = (0..classes).all(|i| {
            (i + 1..classes).all(|j| spectral_angle_deg(&set[i], &set[j]) >= MIN_PROTOTYPE_ANGLE_DEG)
        });
        if ok {
            return Ok(set);
        }
    }
    Err(Error::Parameter(format!(
        "no {classes} prototypes {MIN_PROTOTYPE_ANGLE_DEG} degrees apart after {PROTOTYPE_RETRIES} attempts"
    )))
}

/// Nearest-site labels for `4 C` seeded sites, site `k` carrying class `k mod C`.
fn voronoi_labels(rng: &mut RngState, h: usize, w: usize, classes: usize) -> Vec<usize> {
    let sites: Vec<(f64, f64, usize)> = (0..4 * classes)
        .map(|k| {
            let r = rng.rng();
            (r.gen_range(0.0..h as f64), r.gen_range(0.0..w as f64), k % classes)
        })
        .collect();
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
            sites
                .iter()
                .map(|&(sy, sx, c)| ((sy - y).powi(2) + (sx - x).powi(2), c))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, c)| c)
                .expect("at least one site")
        })
        .collect()
}

/// Band-correlated unit-variance noise: a width-5 moving average of white noise.
fn correlated_noise(rng: &mut RngState, bands: usize) -> Vec<f64> {
    const WIN: usize = 5;
    let white: Vec<f64> = (0..bands + WIN - 1)
        .map(|_| StandardNormal.sample(rng.rng()))
        .collect();
    let norm = (WIN as f64).sqrt();
    (0..bands).map(|b| white[b..b + WIN].iter().sum::<f64>() / norm).collect()
}

fn assign_splits(rng: &mut RngState, labels: &[usize], spec: &SyntheticSceneSpec) -> Result<Vec<Split>> {
    let mut split = vec![Split::Test; labels.len()];
    for c in 0..spec.classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < 3 {
            return Err(Error::Degenerate(format!(
                "class {c} covers {} pixels, too few to split",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let n = members.len() as f64;
        let train = ((spec.label_fraction * n).round() as usize).max(1);
        let unl = ((spec.unlabeled_fraction * n).round() as usize).min(members.len() - train - 1);
        for &i in &members[..train] {
            split[i] = Split::Train;
        }
        for &i in &members[train..train + unl] {
            split[i] = Split::Unlabeled;
        }
    }
    Ok(split)
}

pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w, d2) = (spec.height, spec.width, spec.bands_hi);
    let mut rng = RngState::new(spec.seed);
    let protos = prototypes(&mut rng, spec.classes, d2)?;
    let labels = voronoi_labels(&mut rng, h, w, spec.classes);

    let mut spectra = Vec::with_capacity(h * w * d2);
    for &c in &labels {
        let g: f64 = StandardNormal.sample(rng.rng());
        let gain = 1.0 + spec.brightness_variation * g;
        let noise = correlated_noise(&mut rng, d2);
        spectra.extend(
            protos[c]
                .iter()
                .zip(noise)
                .map(|(p, e)| (p * gain + spec.spectral_noise * e).clamp(0.0, 1.0)),
        );
    }
    let spectra = Tensor::new(vec![h, w, d2], spectra)?;
    let response = spec.response_matrix();
    let mut lo = degrade_spectral(&spectra, &response)?;
    let sensor = Normal::new(0.0, spec.sensor_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Parameter(e.to_string()))?;
    match spec.kind {
        SceneKind::Optical => {
            for v in lo.data_mut() {
                *v = (*v + sensor.sample(rng.rng())).clamp(0.0, 1.0);
            }
        }
        SceneKind::Sar => {
            let looks = 4.0;
            let speckle = Gamma::new(looks, 1.0 / looks).map_err(|e| Error::Parameter(e.to_string()))?;
            for v in lo.data_mut() {
                *v = (*v * *v * speckle.sample(rng.rng())).clamp(0.0, 1.0);
            }
        }
    }
    let mut hi = degrade_spatial(&spectra, spec.psf_sigma)?;
    for v in hi.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let split = assign_splits(&mut rng, &labels, spec)?;
    Ok(Scene {
        classes: spec.classes,
        hi,
        lo,
        labels,
        split,
    })
}

/// Paired network inputs for a set of pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    /// `B x d1 x p x p`
    pub patches: Tensor,
    /// `B x d2`
    pub spectra: Tensor,
    pub labels: Vec<usize>,
    pub pixels: Vec<usize>,
}

impl PatchBatch {
    pub fn one_hot(&self, classes: usize) -> Tensor {
        crate::propagation::one_hot(&self.labels, classes)
    }
}

/// Reflect-padded `p x p` modality-1 windows centred on each pixel, with the
/// co-located modality-2 spectra.
pub fn extract_patches(scene: &Scene, pixels: &[usize], p: usize) -> Result<PatchBatch> {
    if p.is_multiple_of(2) {
        return Err(Error::Parameter(format!("patch side {p} must be odd")));
    }
    let (h, w, d1, d2) = (scene.height(), scene.width(), scene.bands_lo(), scene.bands_hi());
    let r = (p / 2) as isize;
    let lo = scene.lo.data();
    let mut patches = vec![0.0; pixels.len() * d1 * p * p];
    let mut spectra = Vec::with_capacity(pixels.len() * d2);
    for (n, &pix) in pixels.iter().enumerate() {
        if pix >= h * w {
            return Err(Error::Contract(format!("pixel {pix} outside {h}x{w}")));
        }
        let (y, x) = ((pix / w) as isize, (pix % w) as isize);
        for dy in 0..p {
            let sy = reflect(y + dy as isize - r, h);
            for dx in 0..p {
                let sx = reflect(x + dx as isize - r, w);
                let src = (sy * w + sx) * d1;
                for c in 0..d1 {
                    patches[((n * d1 + c) * p + dy) * p + dx] = lo[src + c];
                }
            }
        }
        spectra.extend_from_slice(&scene.hi.data()[pix * d2..(pix + 1) * d2]);
    }
    Ok(PatchBatch {
        patches: Tensor::new(vec![pixels.len(), d1, p, p], patches)?,
        spectra: Tensor::new(vec![pixels.len(), d2], spectra)?,
        labels: pixels.iter().map(|&i| scene.labels[i]).collect(),
        pixels: pixels.to_vec(),
    })
}

/// Centre spectrum and patch-mean spectrum of each modality-1 patch.
pub fn patch_summary_features(patches: &Tensor) -> Result<Tensor> {
    let (b, d1, p) = match *patches.shape() {
        [b, d1, p, q] if p == q => (b, d1, p),
        _ => return Err(Error::dim("patch features", patches.shape(), &[0, 0, 0, 0])),
    };
    let x = patches.data();
    let mut out = Vec::with_capacity(b * 2 * d1);
    for n in 0..b {
        let centre = (p / 2) * p + p / 2;
        for c in 0..d1 {
            out.push(x[(n * d1 + c) * p * p + centre]);
        }
        for c in 0..d1 {
            let s = &x[(n * d1 + c) * p * p..(n * d1 + c + 1) * p * p];
            out.push(s.iter().sum::<f64>() / (p * p) as f64);
        }
    }
    Tensor::new(vec![b, 2 * d1], out)
}

/// Centre-pixel modality-1 spectrum of each patch.
pub fn centre_spectra(patches: &Tensor) -> Result<Tensor> {
    let f = patch_summary_features(patches)?;
    let (b, w) = f.rows_cols();
    let d1 = w / 2;
    let data = (0..b).flat_map(|i| f.row(i)[..d1].to_vec()).collect();
    Tensor::new(vec![b, d1], data)
}

pub const SCENE_FILES: [&str; 5] = ["meta", "hi", "lo", "labels", "split"];
pub const MANIFEST: &str = "manifest.txt";

fn scene_tensors(scene: &Scene) -> Result<Vec<(&'static str, Tensor)>> {
    let n = scene.labels.len();
    Ok(vec![
        (
            "meta",
            Tensor::new(
                vec![3],
                vec![scene.height() as f64, scene.width() as f64, scene.classes as f64],
            )?,
        ),
        ("hi", scene.hi.clone()),
        ("lo", scene.lo.clone()),
        ("labels", Tensor::new(vec![n], scene.labels.iter().map(|&c| c as f64).collect())?),
        ("split", Tensor::new(vec![n], scene.split.iter().map(|s| s.code()).collect())?),
    ])
}

/// Writes one container per scene tensor plus a SHA-256 manifest.
pub fn save_scene(dir: impl AsRef<Path>, scene: &Scene) -> Result<String> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (name, t) in scene_tensors(scene)? {
        let bytes = encode_tensor(&t)?;
        let file = format!("{name}.xmdt");
        write_bytes(&dir.join(&file), &bytes)?;
        let _ = writeln!(manifest, "{file} {}", hex::encode(Sha256::digest(&bytes)));
    }
    write_bytes(&dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(manifest)
}

/// Reads a scene written by [`save_scene`], checking every file's hash.
pub fn load_scene(dir: impl AsRef<Path>) -> Result<Scene> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let manifest = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut tensors = Vec::new();
    for name in SCENE_FILES {
        let file = format!("{name}.xmdt");
        let expected = manifest
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{file} ")))
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("manifest lists no {file}"),
            })?;
        let path = dir.join(&file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != expected.trim() {
            return Err(Error::Format {
                offset: 0,
                message: format!("{file} does not match its manifest hash"),
            });
        }
        tensors.push(decode_tensor(&bytes)?);
    }
    let [meta, hi, lo, labels, split]: [Tensor; 5] = tensors.try_into().expect("five scene tensors");
    let bad = |m: &str| Error::Format {
        offset: 0,
        message: m.to_string(),
    };
    let (h, w, classes) = match meta.data() {
        [h, w, c] => (*h as usize, *w as usize, *c as usize),
        _ => return Err(bad("meta must hold height, width, classes")),
    };
    if lo.rank() != 3 || hi.rank() != 3 || lo.shape()[..2] != [h, w] || hi.shape()[..2] != [h, w] {
        return Err(bad("cube shapes disagree with meta"));
    }
    let labels: Vec<usize> = labels.data().iter().map(|&v| v as usize).collect();
    if labels.len() != h * w || labels.iter().any(|&c| c >= classes) {
        return Err(bad("labels disagree with meta"));
    }
    let split = split
        .data()
        .iter()
        .map(|&v| Split::from_code(v))
        .collect::<Option<Vec<_>>>()
        .filter(|s| s.len() == h * w)
        .ok_or_else(|| bad("invalid split codes"))?;
    Ok(Scene {
        classes,
        hi,
        lo,
        labels,
        split,
    })
}
