//! Full trainer state in one `XMCK` archive.

use std::path::Path;

use super::{EpochRecord, Phase, PretrainRecord, RoundRecord, TrainConfig, Trainer};
use crate::container::{read_archive, write_archive, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::rng::RngState;
use crate::synth::Scene;
use crate::tensor::Tensor;

const EPOCH_COLS: usize = 12;

fn row_tensor(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(vec![n], values).expect("rank-1")
}

fn table(rows: &[Vec<f64>], cols: usize) -> Tensor {
    Tensor::new(vec![rows.len(), cols], rows.concat()).expect("rectangular")
}

fn u128_words(v: u128) -> Vec<f64> {
    (0..4).map(|k| ((v >> (32 * k)) & 0xffff_ffff) as f64).collect()
}

fn from_words(w: &[f64]) -> u128 {
    w.iter().enumerate().fold(0u128, |acc, (k, &x)| acc | ((x as u128) << (32 * k)))
}

fn phase_code(p: Phase) -> f64 {
    match p {
        Phase::Pretrain => 0.0,
        Phase::Train => 1.0,
        Phase::Done => 2.0,
    }
}

fn state_err(msg: impl Into<String>) -> Error {
    Error::State(msg.into())
}

struct Entries(Vec<(String, Tensor)>);

impl Entries {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        let i = self
            .0
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| state_err(format!("checkpoint lacks entry `{name}`")))?;
        Ok(self.0.remove(i).1)
    }

    fn take_opt(&mut self, name: &str) -> Option<Tensor> {
        let i = self.0.iter().position(|(n, _)| n == name)?;
        Some(self.0.remove(i).1)
    }

    fn take_shaped(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.take(name)?;
        if t.shape() != shape {
            return Err(state_err(format!(
                "entry `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }
}

impl Trainer {
    fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let mut e = Vec::new();
        for p in self.net.store.params() {
            e.push((format!("param/{}", p.name), p.value.clone()));
        }
        for (name, b) in self.net.store.buffers() {
            e.push((format!("buffer/{name}"), b.clone()));
        }
        for (p, m) in self.net.store.params().iter().zip(&self.adam.m) {
            e.push((format!("adam/m/{}", p.name), m.clone()));
        }
        for (p, v) in self.net.store.params().iter().zip(&self.adam.v) {
            e.push((format!("adam/v/{}", p.name), v.clone()));
        }
        e.push(("adam/t".into(), row_tensor(self.adam.steps.iter().map(|&s| s as f64).collect())));
        let seed = self.rng.seed();
        let mut rng = vec![(seed & 0xffff_ffff) as f64, (seed >> 32) as f64];
        rng.extend(u128_words(self.rng.word_pos()));
        e.push(("state/rng".into(), row_tensor(rng)));
        e.push((
            "state/progress".into(),
            row_tensor(vec![
                phase_code(self.phase),
                self.pretrain_epoch as f64,
                self.round as f64,
                self.epoch_in_round as f64,
                self.iteration as f64,
                self.max_iter as f64,
                self.diverging as f64,
                f64::from(u8::from(self.initial_loss.is_some())),
                self.initial_loss.unwrap_or(0.0),
            ]),
        ));
        if let Some(p) = &self.pseudo {
            e.push(("state/pseudo_y".into(), p.y.clone()));
            e.push((
                "state/pseudo_meta".into(),
                row_tensor(vec![p.labeled as f64, p.sigma, p.round as f64, p.last_iterations as f64]),
            ));
        }
        if !self.epochs.is_empty() {
            let rows: Vec<Vec<f64>> = self
                .epochs
                .iter()
                .map(|r| {
                    let l = &r.losses;
                    vec![
                        r.round as f64,
                        r.epoch as f64,
                        l.labeled,
                        l.pseudo,
                        l.reconstruction,
                        l.adversarial,
                        l.adversarial_streams[0],
                        l.adversarial_streams[1],
                        l.adversarial_streams[2],
                        l.total,
                        r.discriminator,
                        r.lr,
                    ]
                })
                .collect();
            e.push(("state/epochs".into(), table(&rows, EPOCH_COLS)));
        }
        if !self.rounds.is_empty() {
            let rows: Vec<Vec<f64>> = self
                .rounds
                .iter()
                .map(|r| vec![r.round as f64, r.sigma, r.changed as f64, r.iterations as f64])
                .collect();
            e.push(("state/rounds".into(), table(&rows, 4)));
        }
        if !self.pretrain_log.is_empty() {
            let rows: Vec<Vec<f64>> = self
                .pretrain_log
                .iter()
                .map(|r| {
                    vec![
                        r.epoch as f64,
                        r.modality1,
                        f64::from(u8::from(r.modality2.is_some())),
                        r.modality2.unwrap_or(0.0),
                    ]
                })
                .collect();
            e.push(("state/pretrain".into(), table(&rows, 4)));
        }
        e
    }

    /// Writes the complete state; resuming from it continues bit-identically.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        write_archive(path, CHECKPOINT_MAGIC, &self.checkpoint_entries())
    }

    /// Rebuilds a trainer for `scene` and `cfg` and restores the saved state into it.
    pub fn resume(scene: &Scene, cfg: TrainConfig, path: impl AsRef<Path>) -> Result<Trainer> {
        let mut t = Trainer::new(scene, cfg)?;
        let entries = read_archive(path, CHECKPOINT_MAGIC)?;
        t.restore(entries)?;
        Ok(t)
    }

    fn restore(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut e = Entries(entries);
        let ids: Vec<_> = self.net.store.ids().collect();
        for &id in &ids {
            let p = self.net.store.get(id);
            let (name, shape) = (p.name.clone(), p.value.shape().to_vec());
            *self.net.store.value_mut(id) = e.take_shaped(&format!("param/{name}"), &shape)?;
        }
        for (name, b) in self.net.store.buffers_mut() {
            let shape = b.shape().to_vec();
            *b = e.take_shaped(&format!("buffer/{name}"), &shape)?;
        }
        for &id in &ids {
            let p = self.net.store.get(id);
            let (name, shape) = (p.name.clone(), p.value.shape().to_vec());
            self.adam.m[id.index()] = e.take_shaped(&format!("adam/m/{name}"), &shape)?;
            self.adam.v[id.index()] = e.take_shaped(&format!("adam/v/{name}"), &shape)?;
        }
        let steps = e.take_shaped("adam/t", &[ids.len()])?;
        self.adam.steps = steps.data().iter().map(|&s| s as u64).collect();

        let rng = e.take_shaped("state/rng", &[6])?;
        let r = rng.data();
        let seed = (r[0] as u64) | ((r[1] as u64) << 32);
        if seed != self.cfg.seed {
            return Err(state_err(format!(
                "checkpoint seed {seed} differs from configured seed {}",
                self.cfg.seed
            )));
        }
        self.rng = RngState::restore(seed, from_words(&r[2..6]));

        let progress = e.take_shaped("state/progress", &[9])?;
        let g = progress.data();
        self.phase = match g[0] as u8 {
            0 => Phase::Pretrain,
            1 => Phase::Train,
            2 => Phase::Done,
            other => return Err(state_err(format!("unknown phase code {other}"))),
        };
        self.pretrain_epoch = g[1] as usize;
        self.round = g[2] as usize;
        self.epoch_in_round = g[3] as usize;
        self.iteration = g[4] as usize;
        if g[5] as usize != self.max_iter {
            return Err(state_err(format!(
                "checkpoint schedule has {} iterations, configuration gives {}",
                g[5], self.max_iter
            )));
        }
        self.diverging = g[6] as usize;
        self.initial_loss = (g[7] != 0.0).then_some(g[8]);

        match (&mut self.pseudo, e.take_opt("state/pseudo_y")) {
            (Some(state), Some(y)) => {
                if y.shape() != state.y.shape() {
                    return Err(state_err("pseudo-label matrix does not match the data"));
                }
                let meta = e.take_shaped("state/pseudo_meta", &[4])?;
                let m = meta.data();
                state.y = y;
                state.labeled = m[0] as usize;
                state.sigma = m[1];
                state.round = m[2] as usize;
                state.last_iterations = m[3] as usize;
                state.s = None;
                state.p = None;
            }
            (None, None) => {}
            _ => return Err(state_err("checkpoint and configuration disagree on label propagation")),
        }

        self.epochs = match e.take_opt("state/epochs") {
            Some(t) if t.rank() == 2 && t.shape()[1] == EPOCH_COLS => (0..t.shape()[0])
                .map(|i| {
                    let r = t.row(i);
                    EpochRecord {
                        round: r[0] as usize,
                        epoch: r[1] as usize,
                        losses: LossBreakdown {
                            labeled: r[2],
                            pseudo: r[3],
                            reconstruction: r[4],
                            adversarial: r[5],
                            adversarial_streams: [r[6], r[7], r[8]],
                            total: r[9],
                        },
                        discriminator: r[10],
                        lr: r[11],
                    }
                })
                .collect(),
            Some(_) => return Err(state_err("malformed epoch table")),
            None => Vec::new(),
        };
        self.rounds = match e.take_opt("state/rounds") {
            Some(t) if t.rank() == 2 && t.shape()[1] == 4 => (0..t.shape()[0])
                .map(|i| {
                    let r = t.row(i);
                    RoundRecord {
                        round: r[0] as usize,
                        sigma: r[1],
                        changed: r[2] as usize,
                        iterations: r[3] as usize,
                    }
                })
                .collect(),
            Some(_) => return Err(state_err("malformed round table")),
            None => Vec::new(),
        };
        self.pretrain_log = match e.take_opt("state/pretrain") {
            Some(t) if t.rank() == 2 && t.shape()[1] == 4 => (0..t.shape()[0])
                .map(|i| {
                    let r = t.row(i);
                    PretrainRecord {
                        epoch: r[0] as usize,
                        modality1: r[1],
                        modality2: (r[2] != 0.0).then_some(r[3]),
                    }
                })
                .collect(),
            Some(_) => return Err(state_err("malformed pretraining table")),
            None => Vec::new(),
        };
        if let Some((name, _)) = e.0.first() {
            return Err(state_err(format!("unexpected checkpoint entry `{name}`")));
        }
        Ok(())
    }
}
