//! Multinomial logistic regression trained by full-batch gradient descent.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            learning_rate: 0.5,
            epochs: 500,
            l2: 1e-4,
        }
    }
}

/// Softmax regression on standardised features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[f + 1, C]`, bias in the last row.
    weights: Tensor,
    classes: usize,
}

fn softmax_rows(z: &mut [f64], classes: usize) {
    for row in z.chunks_mut(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

impl LinearClassifier {
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, cfg: &LinearConfig) -> Result<Self> {
        let (n, f) = x.rows_cols();
        if n != labels.len() {
            return Err(Error::Contract(format!("{n} feature rows for {} labels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::Contract(format!("label {bad} outside {classes} classes")));
        }
        let mut present = vec![false; classes];
        for &c in labels {
            present[c] = true;
        }
        if present.iter().filter(|p| **p).count() < 2 {
            return Err(Error::Degenerate("linear classifier needs at least two classes".into()));
        }
        let mut mean = vec![0.0; f];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; f];
        for i in 0..n {
            for ((s, v), m) in scale.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 1.0 };
        }
        let mut model = LinearClassifier {
            mean,
            scale,
            weights: Tensor::zeros(&[f + 1, classes]),
            classes,
        };
        let xs = model.design(x);
        let mut xt_grad = vec![0.0; (f + 1) * classes];
        let mut probs = vec![0.0; n * classes];
        for _ in 0..cfg.epochs {
            gemm(n, f + 1, classes, xs.data(), false, model.weights.data(), false, &mut probs, false);
            softmax_rows(&mut probs, classes);
            for (i, &c) in labels.iter().enumerate() {
                probs[i * classes + c] -= 1.0;
            }
            gemm(f + 1, n, classes, xs.data(), true, &probs, false, &mut xt_grad, false);
            let w = model.weights.data_mut();
            for (j, (wv, g)) in w.iter_mut().zip(&xt_grad).enumerate() {
                let decay = if j / classes < f { cfg.l2 * *wv } else { 0.0 };
                *wv -= cfg.learning_rate * (g / n as f64 + decay);
            }
        }
        if !model.weights.all_finite() {
            return Err(Error::Numeric {
                op: "linear classifier weights".into(),
            });
        }
        Ok(model)
    }

    /// Standardised features with a trailing constant column.
    fn design(&self, x: &Tensor) -> Tensor {
        let (n, f) = x.rows_cols();
        let mut out = Vec::with_capacity(n * (f + 1));
        for i in 0..n {
            for ((v, m), s) in x.row(i).iter().zip(&self.mean).zip(&self.scale) {
                out.push((v - m) * s);
            }
            out.push(1.0);
        }
        Tensor::new(vec![n, f + 1], out).expect("design shape")
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let (n, f) = x.rows_cols();
        if f + 1 != self.weights.shape()[0] {
            return Err(Error::dim("linear predict", x.shape(), self.weights.shape()));
        }
        let xs = self.design(x);
        let mut probs = vec![0.0; n * self.classes];
        gemm(n, f + 1, self.classes, xs.data(), false, self.weights.data(), false, &mut probs, false);
        softmax_rows(&mut probs, self.classes);
        Tensor::new(vec![n, self.classes], probs)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x)?.argmax_rows())
    }
}
