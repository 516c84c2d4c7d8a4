//! Denoising-autoencoder pretraining of each modality's encoder pathway.

use rand::Rng;

use super::optim::{Adam, OptimizerConfig};
use crate::error::Result;
use crate::network::{GradPolicy, Mode, XModalNet};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Mean reconstruction loss of one pretraining epoch per modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub modality1: f64,
    pub modality2: Option<f64>,
}

/// Zeroes each entry independently with probability `rate`.
pub fn mask_inputs(x: &Tensor, rate: f64, rng: &mut RngState) -> Tensor {
    let r = rng.rng();
    let data = x
        .data()
        .iter()
        .map(|&v| if r.gen::<f64>() < rate { 0.0 } else { v })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Index batches of `batch` (a trailing batch smaller than 2 joins the previous one).
pub(crate) fn batches(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn modality_epoch(
    net: &mut XModalNet,
    adam: &mut Adam,
    rng: &mut RngState,
    modality: usize,
    inputs: &Tensor,
    cfg: &OptimizerConfig,
) -> Result<f64> {
    let (n, _) = inputs.rows_cols();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut total = 0.0;
    let groups = batches(&order, cfg.batch_size);
    for idx in &groups {
        let clean = inputs.select_rows(idx);
        let noisy = mask_inputs(&clean, cfg.masking_rate, rng);
        let (loss, grads, bn) = {
            let mut ctx = net.ctx(Mode::Train, GradPolicy::Pretrain, rng);
            let recon = net.autoencode(&mut ctx, modality, &noisy)?;
            let target = ctx.input(clean);
            let loss = ctx.tape.mse(recon, target)?;
            ctx.tape.backward(loss)?;
            (ctx.tape.value(loss).item()?, ctx.param_grads(), ctx.take_bn_updates())
        };
        adam.step(&mut net.store, &grads, cfg.base_lr)?;
        net.apply_bn_updates(&bn);
        total += loss;
    }
    Ok(total / groups.len().max(1) as f64)
}

/// One epoch over each available modality, modality-1 first.
pub fn pretrain_epoch(
    net: &mut XModalNet,
    adam: &mut Adam,
    rng: &mut RngState,
    patches: &Tensor,
    spectra: Option<&Tensor>,
    cfg: &OptimizerConfig,
    epoch: usize,
) -> Result<PretrainRecord> {
    let modality1 = modality_epoch(net, adam, rng, 0, patches, cfg)?;
    let modality2 = match spectra {
        Some(s) if s.shape()[0] >= 2 => Some(modality_epoch(net, adam, rng, 1, s, cfg)?),
        _ => None,
    };
    Ok(PretrainRecord {
        epoch,
        modality1,
        modality2,
    })
}

/// Trains every encoder and reconstruction pathway on the denoising loss
/// alone; classification heads and discriminators are left untouched.
pub fn pretrain_dae(
    net: &mut XModalNet,
    patches: &Tensor,
    spectra: Option<&Tensor>,
    cfg: &OptimizerConfig,
    rng: &mut RngState,
) -> Result<Vec<PretrainRecord>> {
    let mut adam = Adam::new(&net.store, cfg);
    (0..cfg.pretrain_epochs)
        .map(|e| pretrain_epoch(net, &mut adam, rng, patches, spectra, cfg, e))
        .collect()
}
