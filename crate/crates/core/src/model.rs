//! SegNet-Basic style encoder-decoder with configurable dropout placement.
//!
//! Each encoder unit is conv → batch norm → ReLU → 2x2 max pool (indices
//! kept). Each decoder unit unpools with the indices of the mirrored encoder
//! unit, then conv → batch norm → ReLU. A final 3x3 convolution maps the
//! features to per-class logits.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_eval, batchnorm_train, dropout, maxpool2x2, maxunpool2x2, BatchNormState,
    ChannelStats, ConvSpec, Mode, KERNEL,
};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

/// Where dropout layers go.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropoutVariant {
    None,
    Encoder,
    Decoder,
    EncDec,
    CentralEncDec,
    Center,
    Classifier,
}

impl DropoutVariant {
    pub const ALL: [DropoutVariant; 7] = [
        DropoutVariant::None,
        DropoutVariant::Encoder,
        DropoutVariant::Decoder,
        DropoutVariant::EncDec,
        DropoutVariant::CentralEncDec,
        DropoutVariant::Center,
        DropoutVariant::Classifier,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            DropoutVariant::None => "none",
            DropoutVariant::Encoder => "encoder",
            DropoutVariant::Decoder => "decoder",
            DropoutVariant::EncDec => "enc_dec",
            DropoutVariant::CentralEncDec => "central_enc_dec",
            DropoutVariant::Center => "center",
            DropoutVariant::Classifier => "classifier",
        }
    }

    pub(crate) fn code(self) -> u8 {
        Self::ALL.iter().position(|v| *v == self).expect("listed") as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for DropoutVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for DropoutVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::contract(format!("unknown dropout variant `{s}`")))
    }
}

/// A dropout location, by 1-based unit number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Site {
    /// After the pooling step of encoder unit `n` (1 = shallowest).
    Encoder(usize),
    /// After the conv block of decoder unit `n` (1 = deepest, right after the bottleneck).
    Decoder(usize),
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Encoder(n) => write!(f, "enc{n}"),
            Site::Decoder(n) => write!(f, "dec{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub stages: usize,
    pub features: usize,
    pub dropout_variant: DropoutVariant,
    pub dropout_p: f32,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 3,
            num_classes: 4,
            stages: 4,
            features: 64,
            dropout_variant: DropoutVariant::CentralEncDec,
            dropout_p: 0.5,
            seed: 0,
        }
    }
}

/// Label value 255 is reserved for void, so at most 255 classes.
pub const MAX_CLASSES: usize = 255;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::contract("input_channels must be positive"));
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::contract(format!(
                "num_classes must lie in 2..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.stages == 0 || self.stages > 16 {
            return Err(Error::contract("stages must lie in 1..=16"));
        }
        if self.features == 0 {
            return Err(Error::contract("features must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::contract(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.stages
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match *shape {
            [c, h, w] | [_, c, h, w] => (c, h, w),
            _ => {
                return Err(Error::shape(format!(
                    "model input must be [C,H,W] or [N,C,H,W], got {shape:?}"
                )))
            }
        };
        if c != self.input_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.input_channels
            )));
        }
        let m = self.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by 2^{} = {m}",
                self.stages
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count: every conv has `out·in·9 + out` values and
    /// every batch norm `2·channels`.
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize| cout * cin * KERNEL * KERNEL + cout;
        let f = self.features;
        let unit = conv(f, f) + 2 * f;
        conv(self.input_channels, f)
            + 2 * f
            + (self.stages - 1) * unit
            + self.stages * unit
            + conv(f, self.num_classes)
    }
}

/// Dropout locations for a configuration, in execution order.
pub fn dropout_sites(config: &ModelConfig) -> Vec<Site> {
    let s = config.stages;
    let half = s.div_ceil(2);
    let enc = |r: std::ops::RangeInclusive<usize>| r.map(Site::Encoder).collect::<Vec<_>>();
    let dec = |r: std::ops::RangeInclusive<usize>| r.map(Site::Decoder).collect::<Vec<_>>();
    match config.dropout_variant {
        DropoutVariant::None => Vec::new(),
        DropoutVariant::Encoder => enc(1..=s),
        DropoutVariant::Decoder => dec(1..=s),
        DropoutVariant::EncDec => [enc(1..=s), dec(1..=s)].concat(),
        DropoutVariant::CentralEncDec => [enc(s - half + 1..=s), dec(1..=half)].concat(),
        DropoutVariant::Center => vec![Site::Encoder(s)],
        DropoutVariant::Classifier => vec![Site::Decoder(s)],
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Unit {
    pub conv: ConvSpec,
    pub bn: BatchNormState,
}

/// Instantiated network: configuration, parameters, and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct SegModel {
    config: ModelConfig,
    params: ParamStore,
    encoders: Vec<Unit>,
    decoders: Vec<Unit>,
    classifier: ConvSpec,
    sites: Vec<Site>,
}

/// Build a model, drawing initial weights from `rng`.
pub fn build_model(config: &ModelConfig, rng: &mut Rng) -> Result<SegModel> {
    config.validate()?;
    let mut params = ParamStore::new();
    let f = config.features;
    let mut encoders = Vec::with_capacity(config.stages);
    for s in 1..=config.stages {
        let cin = if s == 1 { config.input_channels } else { f };
        encoders.push(Unit {
            conv: ConvSpec::new(&mut params, &format!("enc{s}.conv"), cin, f, rng)?,
            bn: BatchNormState::new(&mut params, &format!("enc{s}.bn"), f)?,
        });
    }
    let mut decoders = Vec::with_capacity(config.stages);
    for s in 1..=config.stages {
        decoders.push(Unit {
            conv: ConvSpec::new(&mut params, &format!("dec{s}.conv"), f, f, rng)?,
            bn: BatchNormState::new(&mut params, &format!("dec{s}.bn"), f)?,
        });
    }
    let classifier = ConvSpec::new(&mut params, "classifier", f, config.num_classes, rng)?;
    Ok(SegModel {
        sites: dropout_sites(config),
        config: config.clone(),
        params,
        encoders,
        decoders,
        classifier,
    })
}

/// What a forward pass should hand back.
#[derive(Clone, Copy)]
enum Stop {
    Logits,
    /// Input of the `k`-th batch norm (encoders first, then decoders).
    BeforeNorm(usize),
}

impl SegModel {
    /// Build with weights drawn from the configuration's own seed.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        build_model(config, &mut Rng::stream(config.seed, streams::INIT))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn num_norm_layers(&self) -> usize {
        self.encoders.len() + self.decoders.len()
    }

    /// Batch-norm layers in execution order with their names.
    pub fn norm_layers(&self) -> impl Iterator<Item = (String, &BatchNormState)> {
        let enc = self
            .encoders
            .iter()
            .enumerate()
            .map(|(i, u)| (format!("enc{}.bn", i + 1), &u.bn));
        let dec = self
            .decoders
            .iter()
            .enumerate()
            .map(|(i, u)| (format!("dec{}.bn", i + 1), &u.bn));
        enc.chain(dec)
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = &mut BatchNormState> {
        self.encoders
            .iter_mut()
            .chain(self.decoders.iter_mut())
            .map(|u| &mut u.bn)
    }

    fn norm_layer_mut(&mut self, k: usize) -> &mut BatchNormState {
        let s = self.encoders.len();
        if k < s {
            &mut self.encoders[k].bn
        } else {
            &mut self.decoders[k - s].bn
        }
    }

    /// Record a forward pass on `g`.
    ///
    /// In [`Mode::Train`] batch statistics are used and the running estimates
    /// are updated. Other modes read the running statistics.
    pub fn forward_graph(
        &mut self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let mut stats = Vec::new();
        let out = self.run(g, x, mode, rng, &mut stats, Stop::Logits)?;
        for (k, st) in stats.into_iter().enumerate() {
            let bn = self.norm_layer_mut(k);
            let m = bn.momentum;
            for c in 0..bn.channels {
                bn.running_mean[c] = (1.0 - m) * bn.running_mean[c] + m * st.mean[c];
                bn.running_var[c] = (1.0 - m) * bn.running_var[c] + m * st.var[c];
            }
        }
        Ok(out)
    }

    /// Logits for `x` (`[C,H,W]` or `[N,C,H,W]`) without recording adjoints.
    ///
    /// `Mode::Train` is rejected here; training goes through [`SegModel::forward_graph`].
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        if mode == Mode::Train {
            return Err(Error::contract(
                "train-mode forward needs a recording graph",
            ));
        }
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let out = self.run(&mut g, xv, mode, rng, &mut Vec::new(), Stop::Logits)?;
        Ok(g.value(out).clone())
    }

    /// Activations entering batch norm `k` under weight averaging.
    pub fn pre_norm_activations(&self, x: &Tensor, k: usize) -> Result<Tensor> {
        self.pre_norm_activations_in(x, k, Mode::WeightAvg, &mut Rng::new(0))
    }

    /// Activations entering batch norm `k` in a non-training `mode`.
    pub fn pre_norm_activations_in(
        &self,
        x: &Tensor,
        k: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        if mode == Mode::Train {
            return Err(Error::contract(
                "train-mode forward needs a recording graph",
            ));
        }
        if k >= self.num_norm_layers() {
            return Err(Error::contract(format!("no batch norm layer {k}")));
        }
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let out = self.run(&mut g, xv, mode, rng, &mut Vec::new(), Stop::BeforeNorm(k))?;
        Ok(g.value(out).clone())
    }

    fn run(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        rng: &mut Rng,
        stats: &mut Vec<ChannelStats>,
        stop: Stop,
    ) -> Result<Var> {
        self.config.check_input(g.value(x).shape())?;
        let p = self.config.dropout_p;
        let mut norm_index = 0;
        let mut unit =
            |g: &mut Graph, h: Var, u: &Unit, stats: &mut Vec<ChannelStats>| -> Result<Flow> {
                let h = u.conv.forward(g, &self.params, h)?;
                if let Stop::BeforeNorm(k) = stop {
                    if k == norm_index {
                        return Ok(Flow::Tapped(h));
                    }
                }
                norm_index += 1;
                let gamma = g.param(&self.params, u.bn.gamma);
                let beta = g.param(&self.params, u.bn.beta);
                let h = if mode == Mode::Train {
                    let (h, st) = batchnorm_train(g, h, gamma, beta, u.bn.epsilon)?;
                    stats.push(st);
                    h
                } else {
                    batchnorm_eval(
                        g,
                        h,
                        gamma,
                        beta,
                        &u.bn.running_mean,
                        &u.bn.running_var,
                        u.bn.epsilon,
                    )?
                };
                Ok(Flow::Next(g.relu(h)))
            };

        let mut h = x;
        let mut indices = Vec::with_capacity(self.encoders.len());
        for (s, enc) in self.encoders.iter().enumerate() {
            let a = match unit(g, h, enc, stats)? {
                Flow::Next(a) => a,
                Flow::Tapped(t) => return Ok(t),
            };
            let (pooled, idx) = maxpool2x2(g, a)?;
            indices.push(idx);
            h = pooled;
            if self.sites.contains(&Site::Encoder(s + 1)) {
                h = dropout(g, h, p, mode, rng)?;
            }
        }
        for (s, dec) in self.decoders.iter().enumerate() {
            let idx = &indices[indices.len() - 1 - s];
            let up = maxunpool2x2(g, h, idx)?;
            let a = match unit(g, up, dec, stats)? {
                Flow::Next(a) => a,
                Flow::Tapped(t) => return Ok(t),
            };
            h = a;
            if self.sites.contains(&Site::Decoder(s + 1)) {
                h = dropout(g, h, p, mode, rng)?;
            }
        }
        self.classifier.forward(g, &self.params, h)
    }
}

enum Flow {
    Next(Var),
    Tapped(Var),
}
