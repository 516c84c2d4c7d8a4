//! Multi-round semi-supervised training, evaluation and checkpoints.

mod checkpoint;
mod metrics;
mod optim;
mod pretrain;

use std::fmt::Write as _;
use std::time::Instant;

pub use metrics::{compute_metrics, confusion_matrix, Metrics};
pub use optim::{poly_lr, Adam, OptimizerConfig};
pub use pretrain::{mask_inputs, pretrain_dae, pretrain_epoch, PretrainRecord};

use crate::error::{Error, Result};
use crate::losses::{loss_adversarial, loss_labeled, loss_pseudo, loss_reconstruction, total_loss};
use crate::losses::{LossBreakdown, LossTerms, LossWeights};
use crate::network::{
    Ctx, FullBatch, GradPolicy, ModalityShape, Mode, NetConfig, StreamId, XModalNet, DEFAULT_DROPOUT,
};
use crate::propagation::{
    initial_pseudo_labels, one_hot, refresh_pseudo_labels, select_sigma, LpConfig, PseudoLabelState,
    DENSE_CAP,
};
use crate::rng::RngState;
use crate::synth::{extract_patches, patch_summary_features, PatchBatch, Scene, Split};
use crate::tensor::{Tensor, Var};

pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 3;
pub const DEFAULT_PATCH: usize = 7;

/// Module switches of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub il: bool,
    pub lp: bool,
    pub sa: bool,
    pub bn: bool,
    pub dropout: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            il: true,
            lp: true,
            sa: true,
            bn: true,
            dropout: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub lp: LpConfig,
    pub toggles: Toggles,
    pub patch: usize,
    pub dropout_rate: f64,
    pub pretrain: bool,
    /// Feed co-registered modality-2 spectra of the labeled pixels.
    pub use_modality2: bool,
    /// Feed unlabeled modality-1 patches.
    pub use_unlabeled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            lp: LpConfig::default(),
            toggles: Toggles::default(),
            patch: DEFAULT_PATCH,
            dropout_rate: DEFAULT_DROPOUT,
            pretrain: true,
            use_modality2: true,
            use_unlabeled: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.lp.validate().map_err(|e| Error::config("lp", e.to_string()))?;
        if self.patch.is_multiple_of(2) {
            return Err(Error::config("net.patch", format!("{} must be odd", self.patch)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("net.dropout", format!("{} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            interactive: self.toggles.il,
            batch_norm: self.toggles.bn,
            dropout_rate: if self.toggles.dropout { self.dropout_rate } else { 0.0 },
        }
    }

    /// `(rounds, epochs per round)`; without propagation the whole budget is one round.
    pub fn schedule(&self) -> (usize, usize) {
        let o = &self.optimizer;
        if self.toggles.lp {
            (o.max_rounds, o.epochs_per_round)
        } else {
            (1, o.epochs_per_round * o.max_rounds)
        }
    }
}

/// Patches of the three splits.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub classes: usize,
    pub train: PatchBatch,
    pub unlabeled: PatchBatch,
    pub test: PatchBatch,
}

impl TrainData {
    /// The unlabeled set is subsampled uniformly when the propagation graph
    /// would exceed the dense cap.
    pub fn from_scene(scene: &Scene, patch: usize, seed: u64) -> Result<Self> {
        let train = scene.pixels(Split::Train);
        let mut unlabeled = scene.pixels(Split::Unlabeled);
        if train.len() + unlabeled.len() > DENSE_CAP {
            let keep = DENSE_CAP.saturating_sub(train.len());
            RngState::new(seed).derive(0x5eed).shuffle(&mut unlabeled);
            unlabeled.truncate(keep);
            unlabeled.sort_unstable();
        }
        Ok(TrainData {
            classes: scene.classes,
            train: extract_patches(scene, &train, patch)?,
            unlabeled: extract_patches(scene, &unlabeled, patch)?,
            test: extract_patches(scene, &scene.pixels(Split::Test), patch)?,
        })
    }

    pub fn shape(&self) -> ModalityShape {
        let s = self.train.patches.shape();
        ModalityShape {
            d1: s[1],
            patch: s[2],
            d2: self.train.spectra.shape()[1],
            classes: self.classes,
        }
    }
}

/// Inputs of one optimisation step.
pub struct StepBatch {
    pub o: Tensor,
    pub t: Option<Tensor>,
    pub u: Option<Tensor>,
    /// One-hot labels of `o`.
    pub y: Tensor,
    /// Soft targets of `u`.
    pub pseudo: Option<Tensor>,
}

/// The generator-side objective of one step and the adversarial feature pairs.
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// `(stream, z_real, z_fake)` for the discriminator step.
    pub pairs: Vec<(StreamId, Var, Var)>,
}

/// Forward pass and four-term loss for one batch.
pub fn objective(
    net: &XModalNet,
    ctx: &mut Ctx,
    batch: &StepBatch,
    weights: &LossWeights,
    adversarial: bool,
) -> Result<Objective> {
    let out = net.forward_full(
        ctx,
        &FullBatch {
            o: &batch.o,
            t: batch.t.as_ref(),
            u: batch.u.as_ref(),
            trace: false,
        },
    )?;
    let labeled = loss_labeled(&mut ctx.tape, out.o.probs, out.t.as_ref().map(|t| t.probs), &batch.y)?;
    let pseudo = match (&out.u, &batch.pseudo) {
        (Some(u), Some(p)) => Some(loss_pseudo(&mut ctx.tape, u.probs, p)?),
        _ => None,
    };
    let streams: Vec<(StreamId, &crate::network::StreamOutput)> = StreamId::ALL
        .iter()
        .filter_map(|&s| out.stream(s).map(|o| (s, o)))
        .collect();
    let rec_pairs: Vec<(Var, Var)> = streams.iter().map(|(_, s)| (s.input, s.recon)).collect();
    let reconstruction = loss_reconstruction(&mut ctx.tape, &rec_pairs)?;
    let mut pairs = Vec::new();
    let mut adv_streams = [0.0; 3];
    let adversarial_term = if adversarial {
        let mut d_out = Vec::new();
        for (s, o) in &streams {
            let dr = net.discriminate(ctx, *s, o.z_real)?;
            let df = net.discriminate(ctx, *s, o.z_fake)?;
            d_out.push((dr, df));
            pairs.push((*s, o.z_real, o.z_fake));
        }
        let adv = loss_adversarial(&mut ctx.tape, &d_out)?;
        for ((s, _), v) in streams.iter().zip(&adv.per_stream) {
            adv_streams[s.index()] = ctx.tape.value(*v).item()?;
        }
        Some(adv.generator)
    } else {
        None
    };
    let terms = LossTerms {
        labeled,
        pseudo,
        reconstruction: Some(reconstruction),
        adversarial: adversarial_term,
    };
    let (total, mut breakdown) = total_loss(&mut ctx.tape, &terms, weights)?;
    breakdown.adversarial_streams = adv_streams;
    Ok(Objective {
        total,
        breakdown,
        pairs,
    })
}

/// Predictions from modality-1 patches alone.
pub fn evaluate(net: &XModalNet, batch: &PatchBatch, classes: usize) -> Result<Metrics> {
    if batch.labels.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let probs = net.forward_inference(&batch.patches)?;
    compute_metrics(&batch.labels, &probs.argmax_rows(), classes)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub round: usize,
    /// Global training epoch, from 1.
    pub epoch: usize,
    pub losses: LossBreakdown,
    /// Summed discriminator objective.
    pub discriminator: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub sigma: f64,
    /// Unlabeled samples whose pseudo-label argmax changed.
    pub changed: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub seed: u64,
    pub pretrain: Vec<PretrainRecord>,
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
    pub metrics: Metrics,
    pub wall_time_secs: f64,
}

/// Wall time is not part of a report's identity.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.pretrain == other.pretrain
            && self.epochs == other.epochs
            && self.rounds == other.rounds
            && self.metrics == other.metrics
    }
}

impl TrainReport {
    pub fn changed_counts(&self) -> Vec<usize> {
        self.rounds.iter().map(|r| r.changed).collect()
    }

    /// `epoch,L_l,L_pl,L_rec,L_adv,total,lr`
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,L_l,L_pl,L_rec,L_adv,total,lr\n");
        for e in &self.epochs {
            let l = &e.losses;
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{:e}",
                e.epoch, l.labeled, l.pseudo, l.reconstruction, l.adversarial, l.total, e.lr
            );
        }
        s
    }

    pub fn rounds_csv(&self) -> String {
        let mut s = String::from("round,sigma,changed,iterations\n");
        for r in &self.rounds {
            let _ = writeln!(s, "{},{},{},{}", r.round, r.sigma, r.changed, r.iterations);
        }
        s
    }

    /// JSON-style summary; everything but wall time, so reruns compare byte for byte.
    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let iou: Vec<String> = m
            .per_class_iou
            .iter()
            .map(|v| v.map_or("null".to_string(), |x| format!("{x:.6}")))
            .collect();
        let confusion: Vec<String> = m
            .confusion
            .iter()
            .map(|r| format!("[{}]", r.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")))
            .collect();
        let changed: Vec<String> = self.changed_counts().iter().map(usize::to_string).collect();
        let last = self.epochs.last().map_or(0.0, |e| e.losses.total);
        format!(
            "{{\n  \"seed\": {},\n  \"pixel_acc\": {:.6},\n  \"miou\": {:.6},\n  \"per_class_iou\": [{}],\n  \"confusion\": [{}],\n  \"epochs\": {},\n  \"rounds\": {},\n  \"changed_counts\": [{}],\n  \"final_total_loss\": {:.9e}\n}}\n",
            self.seed,
            m.pixel_acc,
            m.miou,
            iou.join(", "),
            confusion.join(", "),
            self.epochs.len(),
            self.rounds.len(),
            changed.join(", "),
            last
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Train,
    Done,
}

/// Resumable training state; every public step ends on an epoch boundary.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub data: TrainData,
    pub net: XModalNet,
    pub adam: Adam,
    rng: RngState,
    pub pseudo: Option<PseudoLabelState>,
    phase: Phase,
    pretrain_epoch: usize,
    round: usize,
    epoch_in_round: usize,
    iteration: usize,
    max_iter: usize,
    diverging: usize,
    initial_loss: Option<f64>,
    pretrain_log: Vec<PretrainRecord>,
    epochs: Vec<EpochRecord>,
    rounds: Vec<RoundRecord>,
}

impl Trainer {
    pub fn new(scene: &Scene, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = TrainData::from_scene(scene, cfg.patch, cfg.seed)?;
        if data.train.labels.len() < 2 {
            return Err(Error::Contract("training split needs at least two pixels".into()));
        }
        let mut rng = RngState::new(cfg.seed);
        let mut net = XModalNet::new(data.shape(), cfg.net_config())?;
        net.init_params(&mut rng);
        let adam = Adam::new(&net.store, &cfg.optimizer);
        let pseudo = if cfg.toggles.lp && cfg.use_unlabeled && !data.unlabeled.labels.is_empty() {
            let fl = patch_summary_features(&data.train.patches)?;
            let fu = patch_summary_features(&data.unlabeled.patches)?;
            let y_u = initial_pseudo_labels(&fl, &data.train.labels, data.classes, &fu)?;
            let y_l = data.train.one_hot(data.classes);
            Some(PseudoLabelState::new(&y_l, &y_u, cfg.lp.sigma)?)
        } else {
            None
        };
        let (rounds, epochs) = cfg.schedule();
        let steps = crate::train::pretrain::batches(
            &(0..data.train.labels.len()).collect::<Vec<_>>(),
            cfg.optimizer.batch_size,
        )
        .len();
        let phase = if cfg.pretrain && cfg.optimizer.pretrain_epochs > 0 {
            Phase::Pretrain
        } else if epochs == 0 {
            Phase::Done
        } else {
            Phase::Train
        };
        Ok(Trainer {
            max_iter: rounds * epochs * steps,
            cfg,
            data,
            net,
            adam,
            rng,
            pseudo,
            phase,
            pretrain_epoch: 0,
            round: 0,
            epoch_in_round: 0,
            iteration: 0,
            diverging: 0,
            initial_loss: None,
            pretrain_log: Vec::new(),
            epochs: Vec::new(),
            rounds: Vec::new(),
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn max_iter(&self) -> usize {
        self.max_iter
    }

    pub fn epochs(&self) -> &[EpochRecord] {
        &self.epochs
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn pretrain_log(&self) -> &[PretrainRecord] {
        &self.pretrain_log
    }

    pub fn rng_state(&self) -> &RngState {
        &self.rng
    }

    fn modality2_spectra(&self) -> Option<&Tensor> {
        self.cfg.use_modality2.then_some(&self.data.train.spectra)
    }

    /// One pretraining epoch or one training epoch (closing the round when due).
    pub fn advance(&mut self) -> Result<()> {
        match self.phase {
            Phase::Pretrain => self.advance_pretrain(),
            Phase::Train => self.advance_train(),
            Phase::Done => Ok(()),
        }
    }

    fn advance_pretrain(&mut self) -> Result<()> {
        let mut inputs = self.data.train.patches.clone();
        if self.cfg.use_unlabeled && !self.data.unlabeled.labels.is_empty() {
            let mut d = inputs.data().to_vec();
            d.extend_from_slice(self.data.unlabeled.patches.data());
            let mut shape = inputs.shape().to_vec();
            shape[0] += self.data.unlabeled.labels.len();
            inputs = Tensor::new(shape, d)?;
        }
        let spectra = self.modality2_spectra().cloned();
        let rec = pretrain_epoch(
            &mut self.net,
            &mut self.adam,
            &mut self.rng,
            &inputs,
            spectra.as_ref(),
            &self.cfg.optimizer,
            self.pretrain_epoch,
        )?;
        self.pretrain_log.push(rec);
        self.pretrain_epoch += 1;
        if self.pretrain_epoch >= self.cfg.optimizer.pretrain_epochs {
            self.adam = Adam::new(&self.net.store, &self.cfg.optimizer);
            self.phase = if self.cfg.schedule().1 == 0 {
                Phase::Done
            } else {
                Phase::Train
            };
        }
        Ok(())
    }

    fn advance_train(&mut self) -> Result<()> {
        let n = self.data.train.labels.len();
        let nu = self.data.unlabeled.labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        self.rng.shuffle(&mut order);
        let mut u_order: Vec<usize> = (0..nu).collect();
        self.rng.shuffle(&mut u_order);
        let use_u = self.cfg.use_unlabeled && nu >= 2;
        let sa = self.cfg.toggles.sa;
        let groups = pretrain::batches(&order, self.cfg.optimizer.batch_size);
        let mut sums = LossBreakdown::default();
        let mut disc_sum = 0.0;
        let mut lr = self.cfg.optimizer.base_lr;
        for (j, idx) in groups.iter().enumerate() {
            let u_idx: Vec<usize> = if use_u {
                (0..idx.len()).map(|k| u_order[(j * self.cfg.optimizer.batch_size + k) % nu]).collect()
            } else {
                Vec::new()
            };
            let batch = StepBatch {
                o: self.data.train.patches.select_rows(idx),
                t: self.cfg.use_modality2.then(|| self.data.train.spectra.select_rows(idx)),
                u: use_u.then(|| self.data.unlabeled.patches.select_rows(&u_idx)),
                y: one_hot(
                    &idx.iter().map(|&i| self.data.train.labels[i]).collect::<Vec<_>>(),
                    self.data.classes,
                ),
                pseudo: match (&self.pseudo, use_u) {
                    (Some(p), true) => {
                        let rows: Vec<usize> = u_idx.iter().map(|&i| p.labeled + i).collect();
                        Some(p.y.select_rows(&rows))
                    }
                    _ => None,
                },
            };
            let o = &self.cfg.optimizer;
            lr = poly_lr(self.iteration, self.max_iter, o.base_lr, o.power)?;
            let (breakdown, grads, bn, detached) = {
                let mut ctx = self.net.ctx(Mode::Train, GradPolicy::Generator, &mut self.rng);
                let obj = objective(&self.net, &mut ctx, &batch, &self.cfg.weights, sa)?;
                ctx.tape.backward(obj.total)?;
                let detached: Vec<(StreamId, Tensor, Tensor)> = obj
                    .pairs
                    .iter()
                    .map(|&(s, r, f)| (s, ctx.tape.value(r).clone(), ctx.tape.value(f).clone()))
                    .collect();
                (obj.breakdown, ctx.param_grads(), ctx.take_bn_updates(), detached)
            };
            self.adam.step(&mut self.net.store, &grads, lr)?;
            self.net.apply_bn_updates(&bn);
            if sa {
                let (d_loss, d_grads) = {
                    let mut ctx = self.net.ctx(Mode::Train, GradPolicy::Discriminator, &mut self.rng);
                    let mut outs = Vec::new();
                    for (s, r, f) in detached {
                        let (r, f) = (ctx.input(r), ctx.input(f));
                        let dr = self.net.discriminate(&mut ctx, s, r)?;
                        let df = self.net.discriminate(&mut ctx, s, f)?;
                        outs.push((dr, df));
                    }
                    let adv = loss_adversarial(&mut ctx.tape, &outs)?;
                    ctx.tape.backward(adv.discriminator)?;
                    (ctx.tape.value(adv.discriminator).item()?, ctx.param_grads())
                };
                self.adam.step(&mut self.net.store, &d_grads, lr)?;
                disc_sum += d_loss;
            }
            sums.labeled += breakdown.labeled;
            sums.pseudo += breakdown.pseudo;
            sums.reconstruction += breakdown.reconstruction;
            sums.adversarial += breakdown.adversarial;
            sums.total += breakdown.total;
            for k in 0..3 {
                sums.adversarial_streams[k] += breakdown.adversarial_streams[k];
            }
            self.iteration += 1;
        }
        let k = groups.len() as f64;
        let mean = LossBreakdown {
            labeled: sums.labeled / k,
            pseudo: sums.pseudo / k,
            reconstruction: sums.reconstruction / k,
            adversarial: sums.adversarial / k,
            adversarial_streams: sums.adversarial_streams.map(|v| v / k),
            total: sums.total / k,
        };
        let epoch = self.epochs.len() + 1;
        self.epochs.push(EpochRecord {
            round: self.round,
            epoch,
            losses: mean,
            discriminator: disc_sum / k,
            lr,
        });
        self.epoch_in_round += 1;
        let initial = *self.initial_loss.get_or_insert(mean.total);
        if mean.total > DIVERGENCE_FACTOR * initial {
            self.diverging += 1;
        } else {
            self.diverging = 0;
        }
        if self.diverging >= DIVERGENCE_PATIENCE {
            return Err(Error::Divergence {
                epoch,
                loss: mean.total,
                initial,
            });
        }
        if self.epoch_in_round >= self.cfg.schedule().1 {
            self.finish_round()?;
        }
        Ok(())
    }

    /// Tap features of every labeled then unlabeled sample.
    pub fn tap_features(&self) -> Result<Tensor> {
        let lf = self.net.embed(&self.data.train.patches)?;
        let uf = self.net.embed(&self.data.unlabeled.patches)?;
        let mut d = lf.data().to_vec();
        d.extend_from_slice(uf.data());
        Tensor::new(vec![lf.shape()[0] + uf.shape()[0], lf.shape()[1]], d)
    }

    fn finish_round(&mut self) -> Result<()> {
        let (planned, _) = self.cfg.schedule();
        let mut stop = self.round + 1 >= planned;
        if self.pseudo.is_some() {
            let features = self.tap_features()?;
            let nl = self.data.train.labels.len();
            let state = self.pseudo.as_mut().expect("checked above");
            if self.round == 0 {
                let fl = features.select_rows(&(0..nl).collect::<Vec<_>>());
                state.sigma = select_sigma(&fl, &self.data.train.labels, self.data.classes, &self.cfg.lp)?;
            }
            let changed = refresh_pseudo_labels(state, &features, &self.cfg.lp)?;
            self.rounds.push(RoundRecord {
                round: self.round + 1,
                sigma: state.sigma,
                changed,
                iterations: state.last_iterations,
            });
            stop |= changed == 0 || self.round + 1 >= self.cfg.lp.max_rounds;
        }
        self.round += 1;
        self.epoch_in_round = 0;
        if stop {
            self.phase = Phase::Done;
        }
        Ok(())
    }

    pub fn evaluate_test(&self) -> Result<Metrics> {
        evaluate(&self.net, &self.data.test, self.data.classes)
    }

    pub fn report(&self, wall_time_secs: f64) -> Result<TrainReport> {
        Ok(TrainReport {
            seed: self.cfg.seed,
            pretrain: self.pretrain_log.clone(),
            epochs: self.epochs.clone(),
            rounds: self.rounds.clone(),
            metrics: self.evaluate_test()?,
            wall_time_secs,
        })
    }

    /// Advances to the end and evaluates on the test split.
    pub fn run(&mut self) -> Result<TrainReport> {
        let start = Instant::now();
        while !self.is_done() {
            self.advance()?;
        }
        self.report(start.elapsed().as_secs_f64())
    }

    /// Advances until `epochs` training epochs have completed or training ends.
    pub fn run_until_epoch(&mut self, epochs: usize) -> Result<()> {
        while !self.is_done() && (self.phase == Phase::Pretrain || self.epochs.len() < epochs) {
            self.advance()?;
        }
        Ok(())
    }
}

/// Builds, trains and evaluates a network on a scene.
pub fn train(scene: &Scene, cfg: TrainConfig) -> Result<(XModalNet, TrainReport)> {
    let mut t = Trainer::new(scene, cfg)?;
    let report = t.run()?;
    Ok((t.net, report))
}
