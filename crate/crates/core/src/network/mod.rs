//! The hybrid cross-modal network.
//!
//! Three streams run through it while training: labeled modality-1 patches
//! (`O`), the co-registered modality-2 spectra (`T`) and unlabeled modality-1
//! patches (`U`). `O` and `U` are the same parameters end to end, apart from
//! their softmax heads and discriminators. Only modality-1 is needed to
//! predict.

mod layers;
mod params;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use layers::{
    apply_bn_updates, Activation, BatchNorm, BnUpdate, Conv, ConvBlock, Ctx, DenseBlock,
    GradPolicy, LayerSwitches, Linear, Mode, BN_EPS, BN_MOMENTUM,
};
pub use params::{BufferId, Param, ParamId, ParamStore, Role};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Tensor, Var};

pub const EXTRACTOR_CHANNELS: [usize; 2] = [32, 64];
pub const SPECTRAL_WIDTHS: [usize; 2] = [160, 64];
pub const SA_WIDTHS: [usize; 2] = [128, 64];
pub const IL_WIDTH: usize = 64;
pub const PREDICTION_WIDTHS: [usize; 3] = [128, 256, 64];
pub const DISCRIMINATOR_HIDDEN: usize = 64;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_DROPOUT: f64 = 0.5;

/// Width of the propagation tap (output of the first prediction block).
pub const TAP_WIDTH: usize = PREDICTION_WIDTHS[0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamId {
    /// Labeled modality-1.
    O,
    /// Labeled modality-2.
    T,
    /// Unlabeled modality-1.
    U,
}

impl StreamId {
    pub const ALL: [StreamId; 3] = [StreamId::O, StreamId::T, StreamId::U];

    pub fn modality(self) -> usize {
        match self {
            StreamId::O | StreamId::U => 0,
            StreamId::T => 1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            StreamId::O => 0,
            StreamId::T => 1,
            StreamId::U => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            StreamId::O => "o",
            StreamId::T => "t",
            StreamId::U => "u",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModalityShape {
    /// Channels of modality-1 patches.
    pub d1: usize,
    /// Side of the square modality-1 patch.
    pub patch: usize,
    /// Bands of modality-2 spectra.
    pub d2: usize,
    pub classes: usize,
}

impl ModalityShape {
    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 || self.d2 == 0 || self.classes == 0 {
            return Err(Error::Parameter(format!("degenerate modality shape {self:?}")));
        }
        if self.patch.is_multiple_of(2) {
            return Err(Error::Parameter(format!("patch side {} must be odd", self.patch)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    /// Cross-modal weight sharing in the interactive block.
    pub interactive: bool,
    pub batch_norm: bool,
    pub dropout_rate: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            interactive: true,
            batch_norm: true,
            dropout_rate: DEFAULT_DROPOUT,
        }
    }
}

/// Two parallel generator stacks whose outputs are concatenated.
#[derive(Clone, Debug)]
pub struct SaModule {
    pub g1: [DenseBlock; 2],
    pub g2: [DenseBlock; 2],
}

pub struct SaOutput {
    /// Feature stream, the "real" side of the adversarial pair.
    pub z1: Var,
    /// Adversarial stream, the "fake" side.
    pub z2: Var,
    pub z: Var,
}

impl SaModule {
    fn new(store: &mut ParamStore, name: &str, input: usize) -> Self {
        let stack = |store: &mut ParamStore, g: &str| {
            [
                dense(store, &format!("{name}.{g}.0"), Role::SelfAdversarial, input, SA_WIDTHS[0]),
                dense(store, &format!("{name}.{g}.1"), Role::SelfAdversarial, SA_WIDTHS[0], SA_WIDTHS[1]),
            ]
        };
        SaModule {
            g1: stack(store, "g1"),
            g2: stack(store, "g2"),
        }
    }

    pub fn input_width(&self) -> usize {
        self.g1[0].linear.fan_in
    }

    pub fn output_width(&self) -> usize {
        2 * SA_WIDTHS[1]
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, modality: usize) -> Result<SaOutput> {
        let width = ctx.tape.shape(x).get(1).copied().unwrap_or(0);
        if ctx.tape.shape(x).len() != 2 || width != self.input_width() {
            return Err(Error::dim("forward_sa", ctx.tape.shape(x), &[self.input_width()]));
        }
        let z1 = run_stack(ctx, &self.g1, x, modality)?;
        let z2 = run_stack(ctx, &self.g2, x, modality)?;
        let z = ctx.tape.concat(&[z1, z2], 1)?;
        Ok(SaOutput { z1, z2, z })
    }

    fn blocks(&self) -> impl Iterator<Item = &DenseBlock> {
        self.g1.iter().chain(&self.g2)
    }
}

/// Two-block perceptron used by the interactive module.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub blocks: [DenseBlock; 2],
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str) -> Self {
        Mlp {
            blocks: [
                dense(store, &format!("{name}.0"), Role::Interactive, IL_WIDTH, IL_WIDTH),
                dense(store, &format!("{name}.1"), Role::Interactive, IL_WIDTH, IL_WIDTH),
            ],
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, modality: usize) -> Result<Var> {
        run_stack(ctx, &self.blocks, x, modality)
    }
}

/// One perceptron per modality; each is also applied to the other modality.
#[derive(Clone, Debug)]
pub struct IlModule {
    pub mlp1: Mlp,
    pub mlp2: Mlp,
}

impl IlModule {
    fn check(ctx: &Ctx, x: Var) -> Result<()> {
        let s = ctx.tape.shape(x);
        if s.len() != 2 || s[1] != IL_WIDTH {
            return Err(Error::dim("forward_il", s, &[IL_WIDTH]));
        }
        Ok(())
    }

    /// `[MLP1(x1) + MLP2(x1), MLP2(x2) + MLP1(x2)]`, returned as its two halves.
    pub fn forward_halves(&self, ctx: &mut Ctx, x1: Var, x2: Var) -> Result<(Var, Var)> {
        Self::check(ctx, x1)?;
        Self::check(ctx, x2)?;
        let z11 = self.mlp1.forward(ctx, x1, 0)?;
        let z12 = self.mlp2.forward(ctx, x1, 0)?;
        let z22 = self.mlp2.forward(ctx, x2, 1)?;
        let z21 = self.mlp1.forward(ctx, x2, 1)?;
        let h1 = ctx.tape.add(z11, z12)?;
        let h2 = ctx.tape.add(z22, z21)?;
        Ok((h1, h2))
    }

    pub fn forward(&self, ctx: &mut Ctx, x1: Var, x2: Var) -> Result<Var> {
        let (h1, h2) = self.forward_halves(ctx, x1, x2)?;
        ctx.tape.concat(&[h1, h2], 1)
    }

    /// The half of the joint output that needs only one modality.
    pub fn forward_single(&self, ctx: &mut Ctx, x: Var, modality: usize) -> Result<Var> {
        Self::check(ctx, x)?;
        let (own, other) = if modality == 0 {
            (&self.mlp1, &self.mlp2)
        } else {
            (&self.mlp2, &self.mlp1)
        };
        let a = own.forward(ctx, x, modality)?;
        let b = other.forward(ctx, x, modality)?;
        ctx.tape.add(a, b)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub hidden: Linear,
    pub out: Linear,
}

impl Discriminator {
    fn new(store: &mut ParamStore, name: &str) -> Self {
        Discriminator {
            hidden: Linear::new(store, &format!("{name}.0"), Role::Discriminator, SA_WIDTHS[1], DISCRIMINATOR_HIDDEN),
            out: Linear::new(store, &format!("{name}.1"), Role::Discriminator, DISCRIMINATOR_HIDDEN, 1),
        }
    }

    /// Probability in (0, 1) that each row is a "real" feature.
    pub fn forward(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        let h = self.hidden.forward(ctx, z)?;
        let h = ctx.tape.leaky_relu(h, LEAKY_SLOPE)?;
        let o = self.out.forward(ctx, h)?;
        ctx.tape.sigmoid(o)
    }
}

#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub trunk: DenseBlock,
    pub hidden: [DenseBlock; 2],
    pub out: Linear,
}

impl PredictionHead {
    fn new(store: &mut ParamStore, name: &str, classes: usize) -> Self {
        let [w0, w1, w2] = PREDICTION_WIDTHS;
        PredictionHead {
            trunk: dense(store, &format!("{name}.trunk"), Role::PredictionTrunk, IL_WIDTH, w0),
            hidden: [
                dense(store, &format!("{name}.1"), Role::PredictionHead, w0, w1),
                dense(store, &format!("{name}.2"), Role::PredictionHead, w1, w2),
            ],
            out: Linear::new(store, &format!("{name}.out"), Role::PredictionHead, w2, classes),
        }
    }

    fn classify(&self, ctx: &mut Ctx, tap: Var, modality: usize) -> Result<Var> {
        let h = run_stack(ctx, &self.hidden, tap, modality)?;
        let logits = self.out.forward(ctx, h)?;
        ctx.tape.softmax(logits)
    }
}

/// Tap -> modality-1 patch: FC, spatial tiling, 3x3 conv, 5x5 conv.
#[derive(Clone, Debug)]
pub struct PatchDecoder {
    pub fc: DenseBlock,
    pub conv3: ConvBlock,
    pub conv5: ConvBlock,
}

/// Tap -> modality-2 spectrum.
#[derive(Clone, Debug)]
pub struct SpectrumDecoder {
    pub blocks: [DenseBlock; 3],
}

pub struct StreamOutput {
    pub input: Var,
    /// Class probabilities (softmax rows).
    pub probs: Var,
    pub recon: Var,
    pub z_real: Var,
    pub z_fake: Var,
    /// First prediction block output.
    pub tap: Var,
}

/// Recorded activations per stream, in layer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    pub streams: BTreeMap<StreamId, Vec<(String, Tensor)>>,
}

impl ActivationTrace {
    pub fn layer(&self, stream: StreamId, name: &str) -> Option<&Tensor> {
        self.streams
            .get(&stream)?
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// The activation used as label-propagation features.
    pub fn tap(&self, stream: StreamId) -> Option<&Tensor> {
        self.layer(stream, TAP_LAYER)
    }
}

pub const TAP_LAYER: &str = "prediction.trunk";

pub struct FullOutput {
    pub o: StreamOutput,
    pub t: Option<StreamOutput>,
    pub u: Option<StreamOutput>,
    /// Joint interactive representation, present when `T` ran.
    pub z_il: Option<Var>,
    pub trace: Option<ActivationTrace>,
}

impl FullOutput {
    pub fn stream(&self, id: StreamId) -> Option<&StreamOutput> {
        match id {
            StreamId::O => Some(&self.o),
            StreamId::T => self.t.as_ref(),
            StreamId::U => self.u.as_ref(),
        }
    }
}

/// Inputs of one training step.
pub struct FullBatch<'a> {
    /// `[B, d1, p, p]`
    pub o: &'a Tensor,
    /// `[B, d2]`, pixel-aligned with `o`.
    pub t: Option<&'a Tensor>,
    /// `[Bu, d1, p, p]`
    pub u: Option<&'a Tensor>,
    pub trace: bool,
}

fn dense(store: &mut ParamStore, name: &str, role: Role, fan_in: usize, fan_out: usize) -> DenseBlock {
    DenseBlock::new(store, name, role, fan_in, fan_out, true, Activation::Tanh)
}

fn run_stack(ctx: &mut Ctx, blocks: &[DenseBlock], mut x: Var, modality: usize) -> Result<Var> {
    for b in blocks {
        x = b.forward(ctx, x, modality)?;
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct XModalNet {
    pub shape: ModalityShape,
    pub config: NetConfig,
    pub store: ParamStore,
    pub patch_extractor: [ConvBlock; 2],
    pub spectral_extractor: [DenseBlock; 2],
    /// Indexed by modality; streams `O` and `U` share entry 0.
    pub sa: [SaModule; 2],
    /// Projects each concatenated SA output back to the interactive width.
    pub projection: [Linear; 2],
    pub il: IlModule,
    /// Indexed by modality; `U` shares the modality-1 trunk.
    pub prediction: [PredictionHead; 2],
    pub unlabeled_head: Linear,
    pub patch_decoder: PatchDecoder,
    pub spectrum_decoder: SpectrumDecoder,
    /// Indexed by [`StreamId::index`].
    pub discriminators: [Discriminator; 3],
    initialized: bool,
}

impl XModalNet {
    pub fn new(shape: ModalityShape, config: NetConfig) -> Result<Self> {
        shape.validate()?;
        if !(0.0..1.0).contains(&config.dropout_rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {} not in [0, 1)",
                config.dropout_rate
            )));
        }
        let mut s = ParamStore::default();
        let [c1, c2] = EXTRACTOR_CHANNELS;
        let patch_extractor = [
            ConvBlock::new(&mut s, "ext1.0", Role::Extractor, shape.d1, c1, 5, true, Activation::Tanh),
            ConvBlock::new(&mut s, "ext1.1", Role::Extractor, c1, c2, 3, true, Activation::Tanh),
        ];
        let [w1, w2] = SPECTRAL_WIDTHS;
        let spectral_extractor = [
            dense(&mut s, "ext2.0", Role::Extractor, shape.d2, w1),
            dense(&mut s, "ext2.1", Role::Extractor, w1, w2),
        ];
        let sa = [SaModule::new(&mut s, "sa1", c2), SaModule::new(&mut s, "sa2", w2)];
        let projection = [
            Linear::new(&mut s, "proj1", Role::Projection, 2 * SA_WIDTHS[1], IL_WIDTH),
            Linear::new(&mut s, "proj2", Role::Projection, 2 * SA_WIDTHS[1], IL_WIDTH),
        ];
        let il = IlModule {
            mlp1: Mlp::new(&mut s, "il.mlp1"),
            mlp2: Mlp::new(&mut s, "il.mlp2"),
        };
        let prediction = [
            PredictionHead::new(&mut s, "pred1", shape.classes),
            PredictionHead::new(&mut s, "pred2", shape.classes),
        ];
        let unlabeled_head = Linear::new(&mut s, "pred_u.out", Role::UnlabeledHead, TAP_WIDTH, shape.classes);
        let recon = |s: &mut ParamStore, name: &str, fan_in, fan_out, act| {
            DenseBlock::new(s, name, Role::Reconstruction, fan_in, fan_out, false, act)
        };
        let patch_decoder = PatchDecoder {
            fc: recon(&mut s, "rec1.fc", TAP_WIDTH, c2, Activation::Tanh),
            conv3: ConvBlock::new(&mut s, "rec1.conv3", Role::Reconstruction, c2, c1, 3, false, Activation::Tanh),
            conv5: ConvBlock::new(&mut s, "rec1.conv5", Role::Reconstruction, c1, shape.d1, 5, false, Activation::Sigmoid),
        };
        let spectrum_decoder = SpectrumDecoder {
            blocks: [
                recon(&mut s, "rec2.0", TAP_WIDTH, w2, Activation::Tanh),
                recon(&mut s, "rec2.1", w2, w1, Activation::Tanh),
                recon(&mut s, "rec2.2", w1, shape.d2, Activation::Sigmoid),
            ],
        };
        let discriminators = [
            Discriminator::new(&mut s, "disc.o"),
            Discriminator::new(&mut s, "disc.t"),
            Discriminator::new(&mut s, "disc.u"),
        ];
        Ok(XModalNet {
            shape,
            config,
            store: s,
            patch_extractor,
            spectral_extractor,
            sa,
            projection,
            il,
            prediction,
            unlabeled_head,
            patch_decoder,
            spectrum_decoder,
            discriminators,
            initialized: false,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Glorot-uniform weights, zero biases, unit BN scale, zero BN shift.
    pub fn init_params(&mut self, rng: &mut RngState) {
        let store = &mut self.store;
        for b in &self.patch_extractor {
            b.init(store, rng);
        }
        let dense_blocks = self
            .spectral_extractor
            .iter()
            .chain(self.sa.iter().flat_map(|m| m.blocks()))
            .chain(self.il.mlp1.blocks.iter())
            .chain(self.il.mlp2.blocks.iter())
            .chain(self.prediction.iter().flat_map(|p| std::iter::once(&p.trunk).chain(&p.hidden)));
        for b in dense_blocks {
            b.init(store, rng);
        }
        for l in self.projection.iter().chain(self.prediction.iter().map(|p| &p.out)) {
            l.init(store, rng);
        }
        self.unlabeled_head.init(store, rng);
        self.patch_decoder.fc.init(store, rng);
        self.patch_decoder.conv3.init(store, rng);
        self.patch_decoder.conv5.init(store, rng);
        for b in &self.spectrum_decoder.blocks {
            b.init(store, rng);
        }
        for d in &self.discriminators {
            d.hidden.init(store, rng);
            d.out.init(store, rng);
        }
        self.initialized = true;
    }

    pub fn switches(&self) -> LayerSwitches {
        LayerSwitches {
            batch_norm: self.config.batch_norm,
            dropout_rate: self.config.dropout_rate,
        }
    }

    pub fn ctx<'a>(&'a self, mode: Mode, policy: GradPolicy, rng: &'a mut RngState) -> Ctx<'a> {
        Ctx::new(&self.store, mode, policy, self.switches(), rng)
    }

    /// Feature extractor for a modality: `[B, 64]` out.
    pub fn extract(&self, ctx: &mut Ctx, modality: usize, x: Var) -> Result<Var> {
        if modality == 0 {
            let s = ctx.tape.shape(x);
            let want = [self.shape.d1, self.shape.patch, self.shape.patch];
            if s.len() != 4 || s[1..] != want {
                return Err(Error::dim("modality-1 input", s, &want));
            }
            let mut h = x;
            for b in &self.patch_extractor {
                h = b.forward(ctx, h, 0)?;
            }
            ctx.tape.avg_pool(h)
        } else {
            let s = ctx.tape.shape(x);
            if s.len() != 2 || s[1] != self.shape.d2 {
                return Err(Error::dim("modality-2 input", s, &[self.shape.d2]));
            }
            run_stack(ctx, &self.spectral_extractor, x, 1)
        }
    }

    pub fn forward_sa(&self, ctx: &mut Ctx, modality: usize, x: Var) -> Result<SaOutput> {
        self.sa[modality].forward(ctx, x, modality)
    }

    pub fn forward_il(&self, ctx: &mut Ctx, x1: Var, x2: Var) -> Result<Var> {
        self.il.forward(ctx, x1, x2)
    }

    /// Interactive block for one modality; without cross-modal sharing only the
    /// modality's own perceptron runs.
    fn il_single(&self, ctx: &mut Ctx, x: Var, modality: usize) -> Result<Var> {
        if self.config.interactive {
            self.il.forward_single(ctx, x, modality)
        } else if modality == 0 {
            self.il.mlp1.forward(ctx, x, 0)
        } else {
            self.il.mlp2.forward(ctx, x, 1)
        }
    }

    pub fn discriminate(&self, ctx: &mut Ctx, stream: StreamId, z: Var) -> Result<Var> {
        self.discriminators[stream.index()].forward(ctx, z)
    }

    fn decode(&self, ctx: &mut Ctx, modality: usize, tap: Var) -> Result<Var> {
        if modality == 0 {
            let p = self.shape.patch;
            let h = self.patch_decoder.fc.forward(ctx, tap, 0)?;
            let h = ctx.tape.broadcast_spatial(h, p, p)?;
            let h = self.patch_decoder.conv3.forward(ctx, h, 0)?;
            self.patch_decoder.conv5.forward(ctx, h, 0)
        } else {
            run_stack(ctx, &self.spectrum_decoder.blocks, tap, 1)
        }
    }

    /// Evaluates every head of every stream present in `batch`.
    pub fn forward_full(&self, ctx: &mut Ctx, batch: &FullBatch) -> Result<FullOutput> {
        if !self.initialized {
            return Err(Error::State("network parameters are not initialised".into()));
        }
        if let Some(t) = batch.t {
            if t.shape().first() != batch.o.shape().first() {
                return Err(Error::Contract(format!(
                    "paired batches differ in size: {} modality-1 vs {} modality-2",
                    batch.o.shape().first().unwrap_or(&0),
                    t.shape().first().unwrap_or(&0)
                )));
            }
        }
        let mut layers: BTreeMap<StreamId, Vec<(String, Var)>> = BTreeMap::new();
        let mut front = |ctx: &mut Ctx, stream: StreamId, x: &Tensor| -> Result<(Var, SaOutput, Var)> {
            let m = stream.modality();
            let input = ctx.input(x.clone());
            let f = self.extract(ctx, m, input)?;
            let sa = self.forward_sa(ctx, m, f)?;
            let p = self.projection[m].forward(ctx, sa.z)?;
            let rec = layers.entry(stream).or_default();
            rec.push(("extractor".into(), f));
            rec.push(("sa.z1".into(), sa.z1));
            rec.push(("sa.z2".into(), sa.z2));
            rec.push(("sa".into(), sa.z));
            rec.push(("projection".into(), p));
            Ok((input, sa, p))
        };

        let (in_o, sa_o, p_o) = front(ctx, StreamId::O, batch.o)?;
        let t_front = batch.t.map(|t| front(ctx, StreamId::T, t)).transpose()?;
        let u_front = batch.u.map(|u| front(ctx, StreamId::U, u)).transpose()?;

        let mut z_il = None;
        let (h_o, h_t) = match &t_front {
            Some((_, _, p_t)) => {
                let (h1, h2) = if self.config.interactive {
                    self.il.forward_halves(ctx, p_o, *p_t)?
                } else {
                    (self.il_single(ctx, p_o, 0)?, self.il_single(ctx, *p_t, 1)?)
                };
                z_il = Some(ctx.tape.concat(&[h1, h2], 1)?);
                (h1, Some(h2))
            }
            None => (self.il_single(ctx, p_o, 0)?, None),
        };
        let h_u = u_front
            .as_ref()
            .map(|(_, _, p_u)| self.il_single(ctx, *p_u, 0))
            .transpose()?;

        let mut finish = |ctx: &mut Ctx, stream: StreamId, input: Var, sa: &SaOutput, h: Var| -> Result<StreamOutput> {
            let m = stream.modality();
            let head = &self.prediction[m];
            let tap = head.trunk.forward(ctx, h, m)?;
            let probs = if stream == StreamId::U {
                let logits = self.unlabeled_head.forward(ctx, tap)?;
                ctx.tape.softmax(logits)?
            } else {
                head.classify(ctx, tap, m)?
            };
            let recon = self.decode(ctx, m, tap)?;
            let rec = layers.entry(stream).or_default();
            rec.push(("il".into(), h));
            rec.push((TAP_LAYER.into(), tap));
            rec.push(("probs".into(), probs));
            rec.push(("reconstruction".into(), recon));
            Ok(StreamOutput {
                input,
                probs,
                recon,
                z_real: sa.z1,
                z_fake: sa.z2,
                tap,
            })
        };

        let o = finish(ctx, StreamId::O, in_o, &sa_o, h_o)?;
        let t = match (t_front, h_t) {
            (Some((in_t, sa_t, _)), Some(h)) => Some(finish(ctx, StreamId::T, in_t, &sa_t, h)?),
            _ => None,
        };
        let u = match (u_front, h_u) {
            (Some((in_u, sa_u, _)), Some(h)) => Some(finish(ctx, StreamId::U, in_u, &sa_u, h)?),
            _ => None,
        };

        let trace = batch.trace.then(|| ActivationTrace {
            streams: layers
                .into_iter()
                .map(|(s, vars)| {
                    let tensors = vars
                        .into_iter()
                        .map(|(n, v)| (n, ctx.tape.value(v).clone()))
                        .collect();
                    (s, tensors)
                })
                .collect(),
        });
        Ok(FullOutput { o, t, u, z_il, trace })
    }

    /// Encoder, trunk and decoder of one modality: the pretraining autoencoder.
    pub fn autoencode(&self, ctx: &mut Ctx, modality: usize, x: &Tensor) -> Result<Var> {
        let input = ctx.input(x.clone());
        let f = self.extract(ctx, modality, input)?;
        let sa = self.forward_sa(ctx, modality, f)?;
        let p = self.projection[modality].forward(ctx, sa.z)?;
        let h = self.il_single(ctx, p, modality)?;
        let tap = self.prediction[modality].trunk.forward(ctx, h, modality)?;
        self.decode(ctx, modality, tap)
    }

    /// Modality-1 path to the first prediction block (the propagation tap).
    fn modality1_tap(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Var> {
        let input = ctx.input(x.clone());
        let f = self.extract(ctx, 0, input)?;
        let sa = self.forward_sa(ctx, 0, f)?;
        let p = self.projection[0].forward(ctx, sa.z)?;
        let h = self.il_single(ctx, p, 0)?;
        self.prediction[0].trunk.forward(ctx, h, 0)
    }

    fn eval_chunks(&self, x: &Tensor, f: impl Fn(&mut Ctx, &Tensor) -> Result<Var> + Sync) -> Result<Tensor> {
        if !self.initialized {
            return Err(Error::State("network parameters are not initialised".into()));
        }
        const CHUNK: usize = 256;
        let (rows, _) = x.rows_cols();
        let chunks: Vec<Vec<usize>> = (0..rows)
            .collect::<Vec<_>>()
            .chunks(CHUNK)
            .map(<[usize]>::to_vec)
            .collect();
        let parts: Vec<Tensor> = chunks
            .par_iter()
            .map(|idx| {
                let mut rng = RngState::new(0);
                let mut ctx = self.ctx(Mode::Eval, GradPolicy::None, &mut rng);
                let out = f(&mut ctx, &x.select_rows(idx))?;
                Ok(ctx.tape.value(out).clone())
            })
            .collect::<Result<_>>()?;
        let width = parts.first().map_or(0, |p| p.rows_cols().1);
        let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(vec![rows, width], data)
    }

    /// Class probabilities from modality-1 patches alone, in eval mode.
    pub fn forward_inference(&self, patches: &Tensor) -> Result<Tensor> {
        self.eval_chunks(patches, |ctx, x| {
            let tap = self.modality1_tap(ctx, x)?;
            self.prediction[0].classify(ctx, tap, 0)
        })
    }

    /// Propagation-tap features of modality-1 patches, in eval mode.
    pub fn embed(&self, patches: &Tensor) -> Result<Tensor> {
        self.eval_chunks(patches, |ctx, x| self.modality1_tap(ctx, x))
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        apply_bn_updates(&mut self.store, updates);
    }

    /// Parameters of the blocks a stream runs through, in layer order.
    ///
    /// `O` and `U` return the same ids for every shared block.
    pub fn shared_block_params(&self, stream: StreamId) -> Vec<ParamId> {
        let m = stream.modality();
        let mut ids = Vec::new();
        if m == 0 {
            for b in &self.patch_extractor {
                ids.extend(b.params());
            }
        } else {
            for b in &self.spectral_extractor {
                ids.extend(b.params());
            }
        }
        for b in self.sa[m].blocks() {
            ids.extend(b.params());
        }
        ids.extend(self.projection[m].params());
        for b in self.il.mlp1.blocks.iter().chain(&self.il.mlp2.blocks) {
            ids.extend(b.params());
        }
        ids.extend(self.prediction[m].trunk.params());
        if m == 0 {
            ids.extend(self.patch_decoder.fc.params());
            ids.extend(self.patch_decoder.conv3.params());
            ids.extend(self.patch_decoder.conv5.params());
        } else {
            for b in &self.spectrum_decoder.blocks {
                ids.extend(b.params());
            }
        }
        ids
    }

    pub fn params_with_role(&self, role: Role) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.store.get(id).role == role).collect()
    }
}
