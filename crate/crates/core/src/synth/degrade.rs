//! Spectral and spatial degradations and additive noise.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{gemm, Tensor};

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

fn cube_dims(cube: &Tensor) -> Result<(usize, usize, usize)> {
    match *cube.shape() {
        [h, w, d] => Ok((h, w, d)),
        _ => Err(Error::dim("cube", cube.shape(), &[0, 0, 0])),
    }
}

/// Per-pixel `response * spectrum` for an `h x w x d2` cube and `d1 x d2` response.
pub fn degrade_spectral(hi: &Tensor, response: &Tensor) -> Result<Tensor> {
    let (h, w, d2) = cube_dims(hi)?;
    if response.rank() != 2 || response.shape()[1] != d2 {
        return Err(Error::dim("degrade_spectral", hi.shape(), response.shape()));
    }
    let d1 = response.shape()[0];
    let mut out = vec![0.0; h * w * d1];
    gemm(h * w, d2, d1, hi.data(), false, response.data(), true, &mut out, false);
    Tensor::new(vec![h, w, d1], out)
}

/// Normalised sampled Gaussian of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable per-band Gaussian blur with reflect padding.
pub fn degrade_spatial(cube: &Tensor, psf_sigma: f64) -> Result<Tensor> {
    if !(psf_sigma >= 0.0 && psf_sigma.is_finite()) {
        return Err(Error::Parameter(format!("psf sigma {psf_sigma} must be non-negative")));
    }
    let (h, w, d) = cube_dims(cube)?;
    if psf_sigma == 0.0 {
        return Ok(cube.clone());
    }
    let k = gaussian_kernel(psf_sigma);
    let r = (k.len() / 2) as isize;
    let src = cube.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for (t, &kv) in k.iter().enumerate() {
                let sx = reflect(x as isize + t as isize - r, w);
                let from = (y * w + sx) * d;
                let to = (y * w + x) * d;
                for b in 0..d {
                    tmp[to + b] += kv * src[from + b];
                }
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for (t, &kv) in k.iter().enumerate() {
            let sy = reflect(y as isize + t as isize - r, h);
            for x in 0..w {
                let from = (sy * w + x) * d;
                let to = (y * w + x) * d;
                for b in 0..d {
                    out[to + b] += kv * tmp[from + b];
                }
            }
        }
    }
    Tensor::new(vec![h, w, d], out)
}

/// `cube + N(0, P / 10^(snr/10))` with `P` the mean squared value, unclamped.
///
/// `snr_db = +inf` returns the cube unchanged.
pub fn add_noise_unclamped(cube: &Tensor, snr_db: f64, rng: &mut RngState) -> Result<Tensor> {
    if snr_db == f64::INFINITY {
        return Ok(cube.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::Parameter(format!("snr {snr_db} dB")));
    }
    let n = cube.len().max(1) as f64;
    let power = cube.data().iter().map(|v| v * v).sum::<f64>() / n;
    let std = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    if std == 0.0 {
        return Ok(cube.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
    let data = cube.data().iter().map(|v| v + normal.sample(rng.rng())).collect();
    Tensor::new(cube.shape().to_vec(), data)
}

/// Additive white Gaussian noise at the given SNR, clamped to `[0, 1]`.
pub fn inject_noise(cube: &Tensor, snr_db: f64, rng: &mut RngState) -> Result<Tensor> {
    let mut noisy = add_noise_unclamped(cube, snr_db, rng)?;
    if snr_db != f64::INFINITY {
        for v in noisy.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(noisy)
}
