//! The four-term objective and the per-stream adversarial losses.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, LOG_FLOOR};

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub labeled: f64,
    pub pseudo: f64,
    pub reconstruction: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            labeled: 1.0,
            pseudo: 1.0,
            reconstruction: 1.0,
            adversarial: 1.0,
        }
    }
}

/// Scalar values of one step's objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub labeled: f64,
    pub pseudo: f64,
    pub reconstruction: f64,
    /// Generator-side adversarial term, the one that enters `total`.
    pub adversarial: f64,
    /// Discriminator objective per stream, `o`, `t`, `u`.
    pub adversarial_streams: [f64; 3],
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted total of the four terms; a non-finite term is reported by name.
    pub fn weighted(
        labeled: f64,
        pseudo: f64,
        reconstruction: f64,
        adversarial: f64,
        weights: &LossWeights,
    ) -> Result<Self> {
        for (name, v) in [
            ("L_l", labeled),
            ("L_pl", pseudo),
            ("L_rec", reconstruction),
            ("L_adv", adversarial),
        ] {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    op: format!("loss term {name} is {v}"),
                });
            }
        }
        Ok(LossBreakdown {
            labeled,
            pseudo,
            reconstruction,
            adversarial,
            adversarial_streams: [0.0; 3],
            total: weights.labeled * labeled
                + weights.pseudo * pseudo
                + weights.reconstruction * reconstruction
                + weights.adversarial * adversarial,
        })
    }
}

/// Sum of the cross-entropies of both labeled heads against one-hot `y`.
pub fn loss_labeled(tape: &mut Tape, probs_o: Var, probs_t: Option<Var>, y: &Tensor) -> Result<Var> {
    let rows = y.shape().first().copied().unwrap_or(0);
    for p in std::iter::once(probs_o).chain(probs_t) {
        let got = tape.shape(p).first().copied().unwrap_or(0);
        if got != rows {
            return Err(Error::Contract(format!(
                "labeled batch has {got} predictions for {rows} labels"
            )));
        }
    }
    let mut loss = tape.cross_entropy(probs_o, y)?;
    if let Some(t) = probs_t {
        let lt = tape.cross_entropy(t, y)?;
        loss = tape.add(loss, lt)?;
    }
    Ok(loss)
}

/// Cross-entropy of the unlabeled head against soft pseudo-label rows.
pub fn loss_pseudo(tape: &mut Tape, probs_u: Var, pseudo: &Tensor) -> Result<Var> {
    let (rows, _) = pseudo.rows_cols();
    for i in 0..rows {
        let s: f64 = pseudo.row(i).iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Contract(format!("pseudo-label row {i} sums to {s}")));
        }
    }
    tape.cross_entropy(probs_u, pseudo)
}

/// Sum over `(input, reconstruction)` pairs of the batch-mean squared error.
pub fn loss_reconstruction(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(x, xhat) in pairs {
        let term = tape.mse(x, xhat)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

pub struct AdversarialLoss {
    /// `-mean[log D(real) + log(1 - D(fake))]` summed over streams.
    pub discriminator: Var,
    /// Non-saturating generator term `-mean[log D(fake)]` summed over streams.
    pub generator: Var,
    pub per_stream: Vec<Var>,
}

fn check_probability(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if let Some(bad) = tape.value(v).data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Contract(format!(
            "discriminator {what} output {bad} outside (0, 1)"
        )));
    }
    Ok(())
}

fn neg_mean_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let l = tape.log_clamped(p, LOG_FLOOR)?;
    let m = tape.mean(l)?;
    tape.affine(m, -1.0, 0.0)
}

/// Discriminator and generator losses from `(D(real), D(fake))` per stream.
pub fn loss_adversarial(tape: &mut Tape, outputs: &[(Var, Var)]) -> Result<AdversarialLoss> {
    let mut per_stream = Vec::with_capacity(outputs.len());
    let mut gen_terms = Vec::with_capacity(outputs.len());
    for &(real, fake) in outputs {
        check_probability(tape, real, "real")?;
        check_probability(tape, fake, "fake")?;
        let lr = neg_mean_log(tape, real)?;
        let one_minus = tape.affine(fake, -1.0, 1.0)?;
        let lf = neg_mean_log(tape, one_minus)?;
        per_stream.push(tape.add(lr, lf)?);
        gen_terms.push(neg_mean_log(tape, fake)?);
    }
    let discriminator = sum_vars(tape, &per_stream)?;
    let generator = sum_vars(tape, &gen_terms)?;
    Ok(AdversarialLoss {
        discriminator,
        generator,
        per_stream,
    })
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &v in vars {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Terms of one step; absent terms count as zero.
pub struct LossTerms {
    pub labeled: Var,
    pub pseudo: Option<Var>,
    pub reconstruction: Option<Var>,
    pub adversarial: Option<Var>,
}

/// Weighted objective as a tape scalar together with its breakdown.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let value = |tape: &Tape, v: Option<Var>| v.map_or(Ok(0.0), |v| tape.value(v).item());
    let breakdown = LossBreakdown::weighted(
        value(tape, Some(terms.labeled))?,
        value(tape, terms.pseudo)?,
        value(tape, terms.reconstruction)?,
        value(tape, terms.adversarial)?,
        weights,
    )?;
    let mut scaled = vec![tape.affine(terms.labeled, weights.labeled, 0.0)?];
    for (v, w) in [
        (terms.pseudo, weights.pseudo),
        (terms.reconstruction, weights.reconstruction),
        (terms.adversarial, weights.adversarial),
    ] {
        if let Some(v) = v {
            scaled.push(tape.affine(v, w, 0.0)?);
        }
    }
    let mut total = scaled[0];
    for &s in &scaled[1..] {
        total = tape.add(total, s)?;
    }
    Ok((total, breakdown))
}
