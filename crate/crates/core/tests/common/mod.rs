#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal_core::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error with a floor on the denominator so exact zeros compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every coordinate of every input of `f` against central differences.
///
/// The (possibly tensor-valued) output of `f` is reduced to a scalar through a
/// fixed random projection so that every output coordinate matters.
pub fn max_grad_error(
    inputs: &[Tensor],
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> f64 {
    let step = 1e-5;
    let eval = |vals: &[Tensor], want_grads: bool| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let n = tape.value(out).len();
        let mut r = rng(seed);
        let weights: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let weighted = tape.mul_const(out, weights).unwrap();
        let loss = tape.sum(weighted).unwrap();
        let value = tape.value(loss).item().unwrap();
        let mut grads = Vec::new();
        if want_grads {
            tape.backward(loss).unwrap();
            for v in &vars {
                grads.push(
                    tape.grad(*v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.shape(*v))),
                );
            }
        }
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * step);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a.data()[i * k + t] * b.data()[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Direct six-loop "same"-padded cross-correlation with bias.
pub fn naive_conv(input: &Tensor, kernel: &Tensor, bias: &[f64], pad: usize) -> Tensor {
    let s = input.shape();
    let k = kernel.shape();
    let (nb, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (o, kh, kw) = (k[0], k[2], k[3]);
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut out = vec![0.0; nb * o * oh * ow];
    for n in 0..nb {
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = y as isize + i as isize - pad as isize;
                                let sx = x as isize + j as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += input.data()
                                    [((n * c + ic) * h + sy as usize) * w + sx as usize]
                                    * kernel.data()[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((n * o + oc) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    Tensor::new(vec![nb, o, oh, ow], out).unwrap()
}

/// Features `scale * N(0, 1)` in `dims` dimensions.
pub fn gaussian_features(rng: &mut ChaCha8Rng, n: usize, dims: usize, scale: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..n * dims)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(vec![n, dims], data).unwrap()
}

/// `m` one-hot labeled rows (every class used when `m >= classes`) followed by
/// uniform unlabeled rows.
pub fn label_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize, classes: usize) -> Tensor {
    let mut y = Tensor::zeros(&[n, classes]);
    for i in 0..n {
        if i < m {
            let c = if i < classes { i } else { rng.gen_range(0..classes) };
            y.data_mut()[i * classes + c] = 1.0;
        } else {
            for c in 0..classes {
                y.data_mut()[i * classes + c] = 1.0 / classes as f64;
            }
        }
    }
    y
}

/// Gauss-Jordan elimination with full pivoting: solves `a x = b` in place.
pub fn gauss_jordan(a: &mut Vec<Vec<f64>>, b: &mut Vec<Vec<f64>>) {
    let n = a.len();
    let mut col_of = (0..n).collect::<Vec<_>>();
    for k in 0..n {
        let (mut pr, mut pc, mut best) = (k, k, 0.0);
        for i in k..n {
            for j in k..n {
                if a[i][j].abs() > best {
                    best = a[i][j].abs();
                    pr = i;
                    pc = j;
                }
            }
        }
        a.swap(k, pr);
        b.swap(k, pr);
        for row in a.iter_mut() {
            row.swap(k, pc);
        }
        col_of.swap(k, pc);
        let d = a[k][k];
        for j in 0..n {
            a[k][j] /= d;
        }
        for v in b[k].iter_mut() {
            *v /= d;
        }
        for i in 0..n {
            if i != k {
                let f = a[i][k];
                if f != 0.0 {
                    for j in 0..n {
                        a[i][j] -= f * a[k][j];
                    }
                    let bk = b[k].clone();
                    for (v, w) in b[i].iter_mut().zip(bk) {
                        *v -= f * w;
                    }
                }
            }
        }
    }
    let mut x = vec![Vec::new(); n];
    for k in 0..n {
        x[col_of[k]] = b[k].clone();
    }
    *b = x;
}

/// Independent `(I - P_uu)^{-1} P_ul Y_l` from plain nested vectors.
pub fn closed_form_oracle(p: &Tensor, y_l: &Tensor, m: usize) -> Vec<Vec<f64>> {
    let n = p.shape()[0];
    let c = y_l.shape()[1];
    let u = n - m;
    let pv = |i: usize, j: usize| p.data()[i * n + j];
    let mut a: Vec<Vec<f64>> = (0..u)
        .map(|i| (0..u).map(|j| f64::from(u8::from(i == j)) - pv(m + i, m + j)).collect())
        .collect();
    let mut b: Vec<Vec<f64>> = (0..u)
        .map(|i| {
            (0..c)
                .map(|k| (0..m).map(|j| pv(m + i, j) * y_l.data()[j * c + k]).sum())
                .collect()
        })
        .collect();
    gauss_jordan(&mut a, &mut b);
    b
}
