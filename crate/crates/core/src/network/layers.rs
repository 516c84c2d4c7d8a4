//! Building blocks and the per-pass forward context.

use rand::Rng;

use super::params::{BufferId, ParamId, ParamStore, Role};
use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::{Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which parameters become differentiable leaves in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradPolicy {
    All,
    /// Everything except the discriminators.
    Generator,
    Discriminator,
    /// Encoder, trunk and reconstruction roles only.
    Pretrain,
    None,
}

impl GradPolicy {
    fn wants(self, role: Role) -> bool {
        match self {
            GradPolicy::All => true,
            GradPolicy::Generator => role != Role::Discriminator,
            GradPolicy::Discriminator => role == Role::Discriminator,
            GradPolicy::Pretrain => role.is_encoder_path(),
            GradPolicy::None => false,
        }
    }
}

/// Pending running-statistics update from one train-mode batch norm call.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Global switches that change the forward computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSwitches {
    pub batch_norm: bool,
    pub dropout_rate: f64,
}

/// One forward pass: owns the tape and maps parameters onto it.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    leaves: Vec<Option<Var>>,
    pub mode: Mode,
    pub policy: GradPolicy,
    pub switches: LayerSwitches,
    rng: &'a mut RngState,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(
        store: &'a ParamStore,
        mode: Mode,
        policy: GradPolicy,
        switches: LayerSwitches,
        rng: &'a mut RngState,
    ) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            leaves: vec![None; store.len()],
            mode,
            policy,
            switches,
            rng,
            bn_updates: Vec::new(),
        }
    }

    /// The tape variable for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if self.policy.wants(p.role) {
            self.tape.variable(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let train = self.train();
        self.tape
            .dropout(x, self.switches.dropout_rate, train, self.rng)
    }

    /// Gradients of every differentiable parameter touched in this pass.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.leaves
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.tape.grad(v)?;
                Some((ParamId(i), g.clone()))
            })
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn rng(&mut self) -> &mut RngState {
        self.rng
    }
}

pub(crate) fn glorot(rng: &mut RngState, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.rng().gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, role: Role, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), role, Tensor::zeros(&[fan_in, fan_out])),
            bias: store.add(format!("{name}.bias"), role, Tensor::zeros(&[fan_out])),
            fan_in,
            fan_out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        *store.value_mut(self.weight) = glorot(rng, &[self.fan_in, self.fan_out], self.fan_in, self.fan_out);
        *store.value_mut(self.bias) = Tensor::zeros(&[self.fan_out]);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_bias(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Square-kernel "same" convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub size: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: Role,
        in_ch: usize,
        out_ch: usize,
        size: usize,
    ) -> Self {
        Conv {
            kernel: store.add(
                format!("{name}.kernel"),
                role,
                Tensor::zeros(&[out_ch, in_ch, size, size]),
            ),
            bias: store.add(format!("{name}.bias"), role, Tensor::zeros(&[out_ch])),
            in_ch,
            out_ch,
            size,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        let area = self.size * self.size;
        *store.value_mut(self.kernel) = glorot(
            rng,
            &[self.out_ch, self.in_ch, self.size, self.size],
            self.in_ch * area,
            self.out_ch * area,
        );
        *store.value_mut(self.bias) = Tensor::zeros(&[self.out_ch]);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (k, b) = (ctx.param(self.kernel), ctx.param(self.bias));
        ctx.tape.conv2d(x, k, b, self.size / 2)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.kernel, self.bias]
    }
}

/// Batch norm with one set of running statistics per input modality.
///
/// Affine parameters are shared; statistics are not, because the interactive
/// block feeds both modalities through the same layers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: [(BufferId, BufferId); 2],
    pub width: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, role: Role, width: usize) -> Self {
        let running = [0, 1].map(|m| {
            (
                store.add_buffer(format!("{name}.running_mean.m{m}"), Tensor::zeros(&[width])),
                store.add_buffer(format!("{name}.running_var.m{m}"), Tensor::full(&[width], 1.0)),
            )
        });
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), role, Tensor::full(&[width], 1.0)),
            beta: store.add(format!("{name}.beta"), role, Tensor::zeros(&[width])),
            running,
            width,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        *store.value_mut(self.gamma) = Tensor::full(&[self.width], 1.0);
        *store.value_mut(self.beta) = Tensor::zeros(&[self.width]);
        for (mean, var) in self.running {
            *store.buffer_mut(mean) = Tensor::zeros(&[self.width]);
            *store.buffer_mut(var) = Tensor::full(&[self.width], 1.0);
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, modality: usize) -> Result<Var> {
        if !ctx.switches.batch_norm {
            return Ok(x);
        }
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        let (mean_id, var_id) = self.running[modality];
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, BN_EPS)?;
                ctx.bn_updates.push(BnUpdate {
                    mean: mean_id,
                    var: var_id,
                    batch_mean: stats.mean,
                    batch_var: stats.var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.buffer(mean_id).data().to_vec();
                let var = ctx.store.buffer(var_id).data().to_vec();
                ctx.tape.batch_norm_eval(x, g, b, &mean, &var, BN_EPS)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (dst, src) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
            for (r, b) in store.buffer_mut(dst).data_mut().iter_mut().zip(src) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

/// `Linear + BN (+ Dropout) + activation`.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub linear: Linear,
    pub bn: BatchNorm,
    pub dropout: bool,
    pub activation: Activation,
}

impl DenseBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: Role,
        fan_in: usize,
        fan_out: usize,
        dropout: bool,
        activation: Activation,
    ) -> Self {
        DenseBlock {
            linear: Linear::new(store, &format!("{name}.fc"), role, fan_in, fan_out),
            bn: BatchNorm::new(store, &format!("{name}.bn"), role, fan_out),
            dropout,
            activation,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        self.linear.init(store, rng);
        self.bn.init(store);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, modality: usize) -> Result<Var> {
        let y = self.linear.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y, modality)?;
        let y = if self.dropout { ctx.dropout(y)? } else { y };
        activate(ctx, y, self.activation)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.linear.params(), self.bn.params()].concat()
    }
}

/// `Conv + BN (+ Dropout) + activation`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub dropout: bool,
    pub activation: Activation,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: Role,
        in_ch: usize,
        out_ch: usize,
        size: usize,
        dropout: bool,
        activation: Activation,
    ) -> Self {
        ConvBlock {
            conv: Conv::new(store, &format!("{name}.conv"), role, in_ch, out_ch, size),
            bn: BatchNorm::new(store, &format!("{name}.bn"), role, out_ch),
            dropout,
            activation,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        self.conv.init(store, rng);
        self.bn.init(store);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, modality: usize) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y, modality)?;
        let y = if self.dropout { ctx.dropout(y)? } else { y };
        activate(ctx, y, self.activation)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.conv.params(), self.bn.params()].concat()
    }
}

fn activate(ctx: &mut Ctx, y: Var, activation: Activation) -> Result<Var> {
    match activation {
        Activation::Tanh => ctx.tape.tanh(y),
        Activation::Sigmoid => ctx.tape.sigmoid(y),
    }
}
