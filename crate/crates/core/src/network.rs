//! V-Net-style shared encoder with a segmentation decoder and a signed-distance
//! decoder, plus the convolutional discriminator used for adversarial
//! regularization of predicted distance maps.
//!
//! Encoder stage `s` holds `base_channels * 2^s` channels. Each stage is a
//! residual block `e = a + relu(conv3(a))`, where `a` is the stage input (the
//! stem convolution at full resolution, a stride-2 convolution below it).
//! Decoders mirror the encoder with 2x transposed convolutions and additive
//! skip connections. Dropout sits on the bottleneck features entering each
//! decoder and on the features entering each 1x1 output head, which is what
//! Monte Carlo sampling perturbs.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::par;
use crate::seed;
use crate::tensor::{
    apply_mask, dropout_mask, leaky_relu, leaky_relu_backward, lit, relu, relu_backward, Conv3d, Real, Tensor,
    UpConv3d,
};
use crate::volumes::Field;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_shape: [usize; 3],
    #[serde(default = "NetConfig::default_base")]
    pub base_channels: usize,
    #[serde(default = "NetConfig::default_depth")]
    pub depth: usize,
    #[serde(default = "NetConfig::default_dropout")]
    pub dropout_rate: f64,
    /// Width of the first discriminator layer; doubles per layer.
    #[serde(default = "NetConfig::default_disc")]
    pub disc_channels: usize,
    #[serde(default)]
    pub seed: u64,
}

impl NetConfig {
    fn default_base() -> usize {
        16
    }
    fn default_depth() -> usize {
        4
    }
    fn default_dropout() -> f64 {
        0.5
    }
    fn default_disc() -> usize {
        8
    }

    /// Desk-scale network: 4 base channels, two downsampling stages.
    pub fn desk(in_shape: [usize; 3], seed: u64) -> Self {
        Self {
            in_shape,
            base_channels: 4,
            depth: 2,
            dropout_rate: 0.5,
            disc_channels: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("network: {m}")));
        if self.base_channels == 0 || self.disc_channels == 0 {
            return bad("channel counts must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        let f = 1usize << self.depth;
        if self.in_shape.iter().any(|&d| d == 0 || d % f != 0) {
            return bad(format!("input shape {:?} not divisible by 2^{}", self.in_shape, self.depth));
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, activations kept for backpropagation.
    Train,
    /// Dropout disabled; deterministic.
    Eval,
    /// Dropout active for Monte Carlo sampling.
    Mc,
}

/// Visits every named parameter buffer in a fixed order.
pub trait ParamSet<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a [T]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.len());
        n
    }

    fn zero_params(&mut self)
    where
        T: Real,
    {
        self.visit_mut(&mut |_, p| p.iter_mut().for_each(|v| *v = T::zero()));
    }

    fn all_finite(&self) -> bool
    where
        T: Real,
    {
        let mut ok = true;
        self.visit(&mut |_, p| ok &= p.iter().all(|v| v.is_finite()));
        ok
    }

    fn named_params(&self) -> Vec<(String, Vec<T>)>
    where
        T: Clone,
    {
        let mut out = Vec::new();
        self.visit(&mut |n, p| out.push((n, p.to_vec())));
        out
    }
}

fn visit_conv<'a, T>(prefix: &str, c: &'a Conv3d<T>, f: &mut dyn FnMut(String, &'a [T])) {
    f(format!("{prefix}.weight"), &c.weight);
    f(format!("{prefix}.bias"), &c.bias);
}

fn visit_conv_mut<T>(prefix: &str, c: &mut Conv3d<T>, f: &mut dyn FnMut(String, &mut Vec<T>)) {
    f(format!("{prefix}.weight"), &mut c.weight);
    f(format!("{prefix}.bias"), &mut c.bias);
}

fn he_init<T: Real>(w: &mut [T], fan_in: usize, rng: &mut dyn RngCore) {
    let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    w.iter_mut().for_each(|v| *v = lit(n.sample(rng)));
}

fn he_conv<T: Real>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut dyn RngCore) -> Conv3d<T> {
    let mut c = Conv3d::zeros(cin, cout, k, stride, pad);
    let fan_in = c.fan_in();
    he_init(&mut c.weight, fan_in, rng);
    c
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn check_finite<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerics(format!("non-finite activations in {what}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub stem: Conv3d<T>,
    /// `downs[s-1]` takes stage `s-1` features to stage `s`.
    pub downs: Vec<Conv3d<T>>,
    /// Residual convolution of every stage, `blocks[0]` at full resolution.
    pub blocks: Vec<Conv3d<T>>,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    x: Tensor<T>,
    /// Stage inputs after ReLU.
    a: Vec<Tensor<T>>,
    /// `relu(block(a))` per stage.
    r: Vec<Tensor<T>>,
    /// Stage outputs `a + r`.
    pub features: Vec<Tensor<T>>,
}

impl<T: Real> Encoder<T> {
    fn new(cfg: &NetConfig, rng: &mut dyn RngCore) -> Self {
        let stem = he_conv(1, cfg.channels(0), 3, 1, 1, rng);
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        for s in 0..=cfg.depth {
            if s > 0 {
                let d = he_conv(cfg.channels(s - 1), cfg.channels(s), 2, 2, 0, rng);
                downs.push(d);
            }
            let b = he_conv(cfg.channels(s), cfg.channels(s), 3, 1, 1, rng);
            blocks.push(b);
        }
        Self { stem, downs, blocks }
    }

    pub fn depth(&self) -> usize {
        self.downs.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> EncoderTrace<T> {
        let mut a = Vec::new();
        let mut r = Vec::new();
        let mut features: Vec<Tensor<T>> = Vec::new();
        for s in 0..=self.depth() {
            let mut inp = if s == 0 {
                self.stem.forward(x)
            } else {
                self.downs[s - 1].forward(&features[s - 1])
            };
            relu(&mut inp);
            let mut res = self.blocks[s].forward(&inp);
            relu(&mut res);
            let mut e = inp.clone();
            e.add_assign(&res);
            a.push(inp);
            r.push(res);
            features.push(e);
        }
        EncoderTrace {
            x: x.clone(),
            a,
            r,
            features,
        }
    }

    /// `g_features[s]` is the loss gradient w.r.t. stage `s` output.
    fn backward(&self, trace: &EncoderTrace<T>, mut g_features: Vec<Tensor<T>>, grads: &mut Self) {
        for s in (0..=self.depth()).rev() {
            let ge = std::mem::replace(&mut g_features[s], Tensor::zeros(0, [0, 0, 0]));
            let mut g_res = ge.clone();
            relu_backward(&trace.r[s], &mut g_res);
            let mut g_a = self.blocks[s]
                .backward(&trace.a[s], &g_res, &mut grads.blocks[s], true)
                .expect("input grad");
            g_a.add_assign(&ge);
            relu_backward(&trace.a[s], &mut g_a);
            if s == 0 {
                self.stem.backward(&trace.x, &g_a, &mut grads.stem, false);
            } else {
                let g_prev = self.downs[s - 1]
                    .backward(&trace.features[s - 1], &g_a, &mut grads.downs[s - 1], true)
                    .expect("input grad");
                g_features[s - 1].add_assign(&g_prev);
            }
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T])) {
        visit_conv(&format!("{prefix}.stem"), &self.stem, f);
        for (i, d) in self.downs.iter().enumerate() {
            visit_conv(&format!("{prefix}.down{}", i + 1), d, f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            visit_conv(&format!("{prefix}.block{i}"), b, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        visit_conv_mut(&format!("{prefix}.stem"), &mut self.stem, f);
        for (i, d) in self.downs.iter_mut().enumerate() {
            visit_conv_mut(&format!("{prefix}.down{}", i + 1), d, f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_conv_mut(&format!("{prefix}.block{i}"), b, f);
        }
    }
}

/// Output nonlinearity of a decoder head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub head_kind: Head,
    /// `ups[s]` maps stage `s+1` to stage `s`.
    pub ups: Vec<UpConv3d<T>>,
    pub blocks: Vec<Conv3d<T>>,
    pub head: Conv3d<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace<T> {
    bottleneck_mask: Option<Vec<T>>,
    /// Per level, deepest first: input to the up-convolution.
    h_in: Vec<Tensor<T>>,
    /// `relu(up(h_in))`
    ru: Vec<Tensor<T>>,
    /// `ru + skip`
    u: Vec<Tensor<T>>,
    /// `relu(block(u))`
    r: Vec<Tensor<T>>,
    head_mask: Option<Vec<T>>,
    head_in: Tensor<T>,
    /// Activated output.
    pub out: Tensor<T>,
}

impl<T: Real> Decoder<T> {
    fn new(cfg: &NetConfig, head_kind: Head, rng: &mut dyn RngCore) -> Self {
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for s in 0..cfg.depth {
            let mut u = UpConv3d::zeros(cfg.channels(s + 1), cfg.channels(s));
            he_init(&mut u.weight, u.cin, rng);
            ups.push(u);
            let b = he_conv(cfg.channels(s), cfg.channels(s), 3, 1, 1, rng);
            blocks.push(b);
        }
        // zero-initialized head: sigmoid(0) = 0.5, tanh(0) = 0
        let head = Conv3d::zeros(cfg.channels(0), 1, 1, 1, 0);
        Self {
            head_kind,
            ups,
            blocks,
            head,
        }
    }

    fn activate(&self, mut t: Tensor<T>) -> Tensor<T> {
        match self.head_kind {
            Head::Sigmoid => t.data.iter_mut().for_each(|v| *v = sigmoid(*v)),
            Head::Tanh => t.data.iter_mut().for_each(|v| *v = v.tanh()),
        }
        t
    }

    pub fn forward(&self, features: &[Tensor<T>], dropout: Option<(f64, &mut dyn RngCore)>) -> DecoderTrace<T> {
        let depth = self.ups.len();
        let (rate, mut rng) = match dropout {
            Some((r, rng)) if r > 0.0 => (r, Some(rng)),
            _ => (0.0, None),
        };
        let mut h = features[depth].clone();
        let bottleneck_mask = rng.as_mut().map(|rng| {
            let m = dropout_mask(h.data.len(), rate, &mut **rng);
            apply_mask(&mut h, &m);
            m
        });
        let mut trace_h = Vec::new();
        let mut trace_ru = Vec::new();
        let mut trace_u = Vec::new();
        let mut trace_r = Vec::new();
        for s in (0..depth).rev() {
            let mut ru = self.ups[s].forward(&h);
            relu(&mut ru);
            let mut u = ru.clone();
            u.add_assign(&features[s]);
            let mut r = self.blocks[s].forward(&u);
            relu(&mut r);
            let mut next = u.clone();
            next.add_assign(&r);
            trace_h.push(std::mem::replace(&mut h, next));
            trace_ru.push(ru);
            trace_u.push(u);
            trace_r.push(r);
        }
        let head_mask = rng.as_mut().map(|rng| {
            let m = dropout_mask(h.data.len(), rate, &mut **rng);
            apply_mask(&mut h, &m);
            m
        });
        let out = self.activate(self.head.forward(&h));
        DecoderTrace {
            bottleneck_mask,
            h_in: trace_h,
            ru: trace_ru,
            u: trace_u,
            r: trace_r,
            head_mask,
            head_in: h,
            out,
        }
    }

    /// Backpropagates a gradient on the activated output, accumulating
    /// parameter gradients and adding feature gradients into `g_features`.
    fn backward(&self, trace: &DecoderTrace<T>, g_out: &[T], grads: &mut Self, g_features: &mut [Tensor<T>]) {
        let depth = self.ups.len();
        let mut g_logit = trace.out.clone();
        for ((g, &y), &go) in g_logit.data.iter_mut().zip(&trace.out.data).zip(g_out) {
            *g = match self.head_kind {
                Head::Sigmoid => go * y * (T::one() - y),
                Head::Tanh => go * (T::one() - y * y),
            };
        }
        let mut g_h = self
            .head
            .backward(&trace.head_in, &g_logit, &mut grads.head, true)
            .expect("input grad");
        if let Some(m) = &trace.head_mask {
            apply_mask(&mut g_h, m);
        }
        // trace index 0 is the deepest level
        for i in (0..depth).rev() {
            let level = depth - 1 - i;
            let mut g_r = g_h.clone();
            relu_backward(&trace.r[i], &mut g_r);
            let mut g_u = self.blocks[level]
                .backward(&trace.u[i], &g_r, &mut grads.blocks[level], true)
                .expect("input grad");
            g_u.add_assign(&g_h);
            g_features[level].add_assign(&g_u);
            relu_backward(&trace.ru[i], &mut g_u);
            g_h = self.ups[level]
                .backward(&trace.h_in[i], &g_u, &mut grads.ups[level], true)
                .expect("input grad");
        }
        if let Some(m) = &trace.bottleneck_mask {
            apply_mask(&mut g_h, m);
        }
        g_features[depth].add_assign(&g_h);
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T])) {
        for (i, u) in self.ups.iter().enumerate() {
            f(format!("{prefix}.up{i}.weight"), &u.weight);
            f(format!("{prefix}.up{i}.bias"), &u.bias);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            visit_conv(&format!("{prefix}.block{i}"), b, f);
        }
        visit_conv(&format!("{prefix}.head"), &self.head, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        for (i, u) in self.ups.iter_mut().enumerate() {
            f(format!("{prefix}.up{i}.weight"), &mut u.weight);
            f(format!("{prefix}.up{i}.bias"), &mut u.bias);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_conv_mut(&format!("{prefix}.block{i}"), b, f);
        }
        visit_conv_mut(&format!("{prefix}.head"), &mut self.head, f);
    }
}

/// Per-case network outputs as fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    /// Foreground probability.
    pub seg: Field,
    /// Predicted signed-distance field in (-1, 1).
    pub dist: Field,
}

/// Activations of one training forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub encoder: EncoderTrace<T>,
    pub seg: DecoderTrace<T>,
    pub dist: DecoderTrace<T>,
}

impl<T> Trace<T> {
    pub fn seg(&self) -> &Tensor<T> {
        &self.seg.out
    }

    pub fn dist(&self) -> &Tensor<T> {
        &self.dist.out
    }
}

/// Segmentation network: shared encoder, segmentation and distance decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet<T> {
    pub cfg: NetConfig,
    pub encoder: Encoder<T>,
    pub seg: Decoder<T>,
    pub dist: Decoder<T>,
}

impl<T: Real> SegNet<T> {
    /// Seeded He initialization; both output heads start at zero.
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(cfg.seed, 0x5E6, 0);
        let encoder = Encoder::new(&cfg, &mut rng);
        let seg = Decoder::new(&cfg, Head::Sigmoid, &mut rng);
        let dist = Decoder::new(&cfg, Head::Tanh, &mut rng);
        Ok(Self {
            cfg,
            encoder,
            seg,
            dist,
        })
    }

    /// Same architecture, all parameters zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_params();
        z
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels != 1 || x.dims != self.cfg.in_shape {
            return shape_err(format!(
                "network expects 1x{:?}, got {}x{:?}",
                self.cfg.in_shape, x.channels, x.dims
            ));
        }
        Ok(())
    }

    fn dropout_rate(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Eval => 0.0,
            Mode::Train | Mode::Mc => self.cfg.dropout_rate,
        }
    }

    /// Forward pass keeping everything needed by [`SegNet::backward`].
    pub fn forward_train(&self, x: &Tensor<T>, mode: Mode, rng: &mut dyn RngCore) -> Result<Trace<T>> {
        self.check_input(x)?;
        let rate = self.dropout_rate(mode);
        let encoder = self.encoder.forward(x);
        let seg = self.seg.forward(&encoder.features, Some((rate, &mut *rng)));
        let dist = self.dist.forward(&encoder.features, Some((rate, &mut *rng)));
        check_finite(&seg.out, "segmentation head")?;
        check_finite(&dist.out, "distance head")?;
        Ok(Trace { encoder, seg, dist })
    }

    pub fn forward_tensor(&self, x: &Tensor<T>, mode: Mode, rng: &mut dyn RngCore) -> Result<(Tensor<T>, Tensor<T>)> {
        let t = self.forward_train(x, mode, rng)?;
        Ok((t.seg.out, t.dist.out))
    }

    pub fn forward(&self, x: &Field, mode: Mode, rng: &mut dyn RngCore) -> Result<ModelOutputs> {
        let (seg, dist) = self.forward_tensor(&Tensor::from_field(x), mode, rng)?;
        Ok(ModelOutputs {
            seg: seg.channel_to_field(0),
            dist: dist.channel_to_field(0),
        })
    }

    /// Forward over a batch; case `i` draws dropout from its own stream of `seed`.
    pub fn forward_batch(&self, xs: &[&Field], mode: Mode, seed: u64) -> Result<Vec<ModelOutputs>> {
        if xs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        par::map_range(xs.len(), |i| self.forward(xs[i], mode, &mut seed::rng(seed, 0xBA7C, i as u64)))
            .into_iter()
            .collect()
    }

    /// Backpropagates gradients on the activated outputs (probability and
    /// distance), accumulating into `grads`. `None` means a zero gradient.
    pub fn backward(&self, trace: &Trace<T>, g_seg: Option<&[T]>, g_dist: Option<&[T]>, grads: &mut Self) {
        if g_seg.is_none() && g_dist.is_none() {
            return;
        }
        let mut g_features: Vec<Tensor<T>> = trace
            .encoder
            .features
            .iter()
            .map(|f| Tensor::zeros(f.channels, f.dims))
            .collect();
        if let Some(g) = g_seg {
            self.seg.backward(&trace.seg, g, &mut grads.seg, &mut g_features);
        }
        if let Some(g) = g_dist {
            self.dist.backward(&trace.dist, g, &mut grads.dist, &mut g_features);
        }
        self.encoder.backward(&trace.encoder, g_features, &mut grads.encoder);
    }

    /// `n` stochastic segmentation passes sharing one encoder evaluation
    /// (dropout only acts downstream of the encoder). Pass `i` uses its own
    /// seeded stream, so the set is reproducible and order independent.
    pub fn mc_seg_samples(&self, x: &Tensor<T>, n: usize, seed: u64) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let enc = self.encoder.forward(x);
        let rate = self.cfg.dropout_rate;
        let samples = par::map_range(n, |i| {
            let mut rng = seed::rng(seed, 0x3C, i as u64);
            self.seg.forward(&enc.features, Some((rate, &mut rng))).out
        });
        for s in &samples {
            check_finite(s, "Monte Carlo sample")?;
        }
        Ok(samples)
    }
}

impl<T> ParamSet<T> for SegNet<T>
where
    T: Real,
{
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a [T])) {
        self.encoder.visit("encoder", f);
        self.seg.visit("seg", f);
        self.dist.visit("dist", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        self.encoder.visit_mut("encoder", f);
        self.seg.visit_mut("seg", f);
        self.dist.visit_mut("dist", f);
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DISC_LAYERS: usize = 4;

/// Four stride-2 3x3x3 convolutions with leaky ReLU, global average pooling
/// and a linear score. Input channels: (volume, distance field).
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub convs: Vec<Conv3d<T>>,
    pub fc_weight: Vec<T>,
    pub fc_bias: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct DiscTrace<T> {
    input: Tensor<T>,
    acts: Vec<Tensor<T>>,
    pooled: Vec<T>,
    pub score: T,
}

impl<T: Real> Discriminator<T> {
    pub fn new(base_channels: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, 0xD15C, 0);
        let mut convs = Vec::new();
        let mut cin = 2;
        for l in 0..DISC_LAYERS {
            let cout = base_channels << l;
            let c = he_conv(cin, cout, 3, 2, 1, &mut rng);
            convs.push(c);
            cin = cout;
        }
        Self {
            convs,
            fc_weight: vec![T::zero(); cin],
            fc_bias: vec![T::zero()],
        }
    }

    pub fn from_config(cfg: &NetConfig) -> Self {
        Self::new(cfg.disc_channels, seed::derive(cfg.seed, 0xD15C, 1))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_params();
        z
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<DiscTrace<T>> {
        if input.channels != 2 {
            return shape_err(format!("discriminator expects 2 channels, got {}", input.channels));
        }
        let slope = lit(LEAKY_SLOPE);
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let mut y = c.forward(acts.last().unwrap_or(input));
            leaky_relu(&mut y, slope);
            acts.push(y);
        }
        let last = acts.last().expect("at least one layer");
        let n = T::from_usize(last.spatial()).unwrap();
        let pooled: Vec<T> = (0..last.channels).map(|c| last.channel(c).iter().copied().sum::<T>() / n).collect();
        let score = pooled.iter().zip(&self.fc_weight).map(|(a, b)| *a * *b).sum::<T>() + self.fc_bias[0];
        if !score.is_finite() {
            return Err(Error::Numerics("non-finite discriminator score".into()));
        }
        Ok(DiscTrace {
            input: input.clone(),
            acts,
            pooled,
            score,
        })
    }

    /// Accumulates gradients of `g_score * score`; returns the input gradient
    /// when asked.
    pub fn backward(&self, trace: &DiscTrace<T>, g_score: T, grads: &mut Self, need_input_grad: bool) -> Option<Tensor<T>> {
        let slope = lit(LEAKY_SLOPE);
        grads.fc_bias[0] += g_score;
        for (gw, p) in grads.fc_weight.iter_mut().zip(&trace.pooled) {
            *gw += g_score * *p;
        }
        let last = trace.acts.last().unwrap();
        let n = T::from_usize(last.spatial()).unwrap();
        let mut g = Tensor::zeros(last.channels, last.dims);
        let sp = last.spatial();
        for c in 0..last.channels {
            let v = g_score * self.fc_weight[c] / n;
            g.data[c * sp..(c + 1) * sp].iter_mut().for_each(|x| *x = v);
        }
        for l in (0..self.convs.len()).rev() {
            leaky_relu_backward(&trace.acts[l], &mut g, slope);
            let inp = if l == 0 { &trace.input } else { &trace.acts[l - 1] };
            let need = l > 0 || need_input_grad;
            g = self.convs[l].backward(inp, &g, &mut grads.convs[l], need)?;
        }
        Some(g)
    }

    /// Score for a (volume, distance field) pair.
    pub fn score(&self, volume: &Field, dist: &Field) -> Result<f64> {
        if volume.shape() != dist.shape() {
            return shape_err(format!("volume {:?} vs dist {:?}", volume.shape(), dist.shape()));
        }
        let t = self.forward(&Tensor::from_fields(&[volume, dist]))?;
        Ok(t.score.to_f64().unwrap())
    }

    /// Score and its gradient with respect to the distance channel.
    pub fn score_with_dist_grad(&self, volume: &Field, dist: &Field) -> Result<(f64, Field)> {
        if volume.shape() != dist.shape() {
            return shape_err(format!("volume {:?} vs dist {:?}", volume.shape(), dist.shape()));
        }
        let t = self.forward(&Tensor::from_fields(&[volume, dist]))?;
        let mut scratch = self.zeros_like();
        let g = self.backward(&t, T::one(), &mut scratch, true).expect("input grad");
        Ok((t.score.to_f64().unwrap(), g.channel_to_field(1)))
    }
}

impl<T: Real> ParamSet<T> for Discriminator<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a [T])) {
        for (i, c) in self.convs.iter().enumerate() {
            visit_conv(&format!("disc.conv{i}"), c, f);
        }
        f("disc.fc.weight".into(), &self.fc_weight);
        f("disc.fc.bias".into(), &self.fc_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            visit_conv_mut(&format!("disc.conv{i}"), c, f);
        }
        f("disc.fc.weight".into(), &mut self.fc_weight);
        f("disc.fc.bias".into(), &mut self.fc_bias);
    }
}

/// Fills every parameter with small random values (used to give tests
/// non-trivial heads).
pub fn randomize<T: Real, P: ParamSet<T>>(p: &mut P, scale: f64, seed: u64) {
    let mut rng = seed::rng(seed, 0xAA, 0);
    p.visit_mut(&mut |_, v| {
        v.iter_mut().for_each(|x| *x = lit(rng.gen_range(-scale..scale)));
    });
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn input(shape: [usize; 3], seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn zero_heads_give_known_outputs() {
        let net = SegNet::<f64>::new(NetConfig::desk([8, 8, 8], 1)).unwrap();
        let out = net.forward(&input([8, 8, 8], 2), Mode::Train, &mut rng()).unwrap();
        assert!(out.seg.iter().all(|&v| v == 0.5));
        assert!(out.dist.iter().all(|&v| v == 0.0));
        let d = Discriminator::<f64>::new(2, 3);
        assert_eq!(d.score(&input([8, 8, 8], 4), &input([8, 8, 8], 5)).unwrap(), 0.0);
    }

    #[test]
    fn eval_deterministic_mc_stochastic() {
        let mut net = SegNet::<f64>::new(NetConfig::desk([8, 8, 8], 1)).unwrap();
        randomize(&mut net, 0.3, 7);
        let x = input([8, 8, 8], 2);
        let a = net.forward(&x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = net.forward(&x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let mut r = rng();
        let c = net.forward(&x, Mode::Mc, &mut r).unwrap();
        let d = net.forward(&x, Mode::Mc, &mut r).unwrap();
        assert_ne!(c.seg, d.seg);

        let mut cfg = net.cfg.clone();
        cfg.dropout_rate = 0.0;
        let net0 = SegNet { cfg, ..net.clone() };
        let m = net0.forward(&x, Mode::Mc, &mut rng()).unwrap();
        let e = net0.forward(&x, Mode::Eval, &mut rng()).unwrap();
        assert_eq!(m, e);
    }

    #[test]
    fn outputs_in_range_and_shaped() {
        let mut net = SegNet::<f64>::new(NetConfig::desk([8, 8, 4], 1)).unwrap();
        randomize(&mut net, 2.0, 3);
        let out = net.forward(&input([8, 8, 4], 9).mapv(|v| v * 50.0), Mode::Eval, &mut rng()).unwrap();
        assert_eq!(out.seg.shape(), &[8, 8, 4]);
        assert!(out.seg.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.dist.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(matches!(net.forward(&input([8, 8, 8], 1), Mode::Eval, &mut rng()), Err(Error::Shape(_))));
    }

    #[test]
    fn encoder_is_shared() {
        let mut net = SegNet::<f64>::new(NetConfig::desk([8, 8, 8], 1)).unwrap();
        randomize(&mut net, 0.3, 5);
        let x = input([8, 8, 8], 2);
        let before = net.forward(&x, Mode::Eval, &mut rng()).unwrap();
        net.encoder.stem.weight.iter_mut().for_each(|w| *w += 0.1);
        let after = net.forward(&x, Mode::Eval, &mut rng()).unwrap();
        assert_ne!(before.seg, after.seg);
        assert_ne!(before.dist, after.dist);
    }

    #[test]
    fn init_is_seeded() {
        let a = SegNet::<f32>::new(NetConfig::desk([8, 8, 8], 1)).unwrap();
        let b = SegNet::<f32>::new(NetConfig::desk([8, 8, 8], 1)).unwrap();
        let c = SegNet::<f32>::new(NetConfig::desk([8, 8, 8], 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.encoder, c.encoder);
    }

    #[test]
    fn desk_param_count_by_layer() {
        let net = SegNet::<f32>::new(NetConfig::desk([16, 16, 16], 0)).unwrap();
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k * k + cout;
        let up = |cin: usize, cout: usize| cin * cout * 8 + cout;
        let encoder = conv(1, 4, 3) + conv(4, 4, 3) + conv(4, 8, 2) + conv(8, 8, 3) + conv(8, 16, 2) + conv(16, 16, 3);
        let decoder = up(16, 8) + conv(8, 8, 3) + up(8, 4) + conv(4, 4, 3) + conv(4, 1, 1);
        assert_eq!(encoder, 10_516);
        assert_eq!(decoder, 3_469);
        assert_eq!(net.param_count(), encoder + 2 * decoder);
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::desk([10, 16, 16], 0).validate().is_err());
        let mut c = NetConfig::desk([16, 16, 16], 0);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
    }

    /// Full-network gradient check: loss = <r1, seg> + <r2, dist> in eval mode.
    #[test]
    fn segnet_backward_matches_finite_differences() {
        let mut net = SegNet::<f64>::new(NetConfig::desk([4, 4, 4], 3)).unwrap();
        randomize(&mut net, 0.4, 11);
        let x = Tensor::from_field(&input([4, 4, 4], 8));
        let r1 = input([4, 4, 4], 12).into_raw_vec_and_offset().0;
        let r2 = input([4, 4, 4], 13).into_raw_vec_and_offset().0;
        let loss = |n: &SegNet<f64>| {
            let (s, d) = n.forward_tensor(&x, Mode::Eval, &mut rng()).unwrap();
            s.data.iter().zip(&r1).map(|(a, b)| a * b).sum::<f64>() + d.data.iter().zip(&r2).map(|(a, b)| a * b).sum::<f64>()
        };
        let trace = net.forward_train(&x, Mode::Eval, &mut rng()).unwrap();
        let mut grads = net.zeros_like();
        net.backward(&trace, Some(&r1), Some(&r2), &mut grads);
        let analytic: Vec<(String, Vec<f64>)> = grads.named_params();
        let h = 1e-6;
        let mut checked = 0;
        for (name, g) in analytic {
            for i in (0..g.len()).step_by(1 + g.len() / 5) {
                let bump = |delta: f64| {
                    let mut n = net.clone();
                    n.visit_mut(&mut |nm, p| {
                        if nm == name {
                            p[i] += delta;
                        }
                    });
                    loss(&n)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "{name}[{i}]: fd {fd} vs {}", g[i]);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn dropout_backward_uses_same_masks() {
        let mut net = SegNet::<f64>::new(NetConfig::desk([4, 4, 4], 3)).unwrap();
        randomize(&mut net, 0.4, 17);
        let x = Tensor::from_field(&input([4, 4, 4], 8));
        let r1 = input([4, 4, 4], 12).into_raw_vec_and_offset().0;
        let loss = |n: &SegNet<f64>| {
            let (s, _) = n.forward_tensor(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
            s.data.iter().zip(&r1).map(|(a, b)| a * b).sum::<f64>()
        };
        let trace = net.forward_train(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let mut grads = net.zeros_like();
        net.backward(&trace, Some(&r1), None, &mut grads);
        let h = 1e-6;
        for i in [0, 5, 40, 100] {
            let mut p = net.clone();
            p.encoder.blocks[1].weight[i] += h;
            let mut m = net.clone();
            m.encoder.blocks[1].weight[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let g = grads.encoder.blocks[1].weight[i];
            assert!((fd - g).abs() <= 1e-5 * (1.0 + fd.abs()), "{fd} vs {g}");
        }
    }

    #[test]
    fn discriminator_dist_gradient_matches_finite_differences() {
        let mut d = Discriminator::<f64>::new(2, 4);
        randomize(&mut d, 0.5, 21);
        let v = input([8, 8, 8], 1);
        let dist = input([8, 8, 8], 2);
        let (s, g) = d.score_with_dist_grad(&v, &dist).unwrap();
        assert_eq!(s, d.score(&v, &dist).unwrap());
        let h = 1e-6;
        for idx in [(0, 0, 0), (3, 4, 5), (7, 7, 7), (2, 6, 1), (5, 0, 3)] {
            let mut p = dist.clone();
            p[idx] += h;
            let mut m = dist.clone();
            m[idx] -= h;
            let fd = (d.score(&v, &p).unwrap() - d.score(&v, &m).unwrap()) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-3 || (fd - g[idx]).abs() < 1e-9, "{idx:?}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn discriminator_param_gradient() {
        let mut d = Discriminator::<f64>::new(2, 4);
        randomize(&mut d, 0.5, 22);
        let inp = Tensor::from_fields(&[&input([8, 8, 8], 1), &input([8, 8, 8], 2)]);
        let t = d.forward(&inp).unwrap();
        let mut grads = d.zeros_like();
        d.backward(&t, 1.0, &mut grads, false);
        let h = 1e-6;
        for l in 0..DISC_LAYERS {
            for i in [0, 7, 30] {
                let mut p = d.clone();
                p.convs[l].weight[i] += h;
                let mut m = d.clone();
                m.convs[l].weight[i] -= h;
                let fd = (p.forward(&inp).unwrap().score - m.forward(&inp).unwrap().score) / (2.0 * h);
                let g = grads.convs[l].weight[i];
                assert!((fd - g).abs() <= 1e-6 * (1.0 + fd.abs()), "layer {l}[{i}]: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn mc_samples_reproducible() {
        let mut net = SegNet::<f32>::new(NetConfig::desk([8, 8, 8], 1)).unwrap();
        randomize(&mut net, 0.3, 5);
        let x = Tensor::from_field(&input([8, 8, 8], 2));
        let a = net.mc_seg_samples(&x, 4, 10).unwrap();
        let b = net.mc_seg_samples(&x, 4, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }
}
