//! Toy U-shaped enhancer hosting attention reallocation.
//!
//! Layout for widths `(w0, w1)` and input `3×H×W`:
//!
//! ```text
//! encoder.0  conv3x3 3->w0 + relu            (H)    -> avgpool2
//! encoder.1  conv3x3 w0->w1 + relu           (H/2)  -> avgpool2
//! latent     channel attention (w1)          (H/4)
//! decoder.0  upsample2 + skip(encoder.1), conv3x3 w1->w0 + relu, attention
//! decoder.1  upsample2 + skip(encoder.0), conv3x3 w0->w0 + relu, attention
//! head       conv3x3 w0->3, clamp to [0, 1]
//! ```
//!
//! Reallocation blocks are only ever attached to decoder attention.

use serde::{Deserialize, Serialize};

use crate::adr::{AdrBlock, AdrRecord};
use crate::dynbaseline::DynamicConv;
use crate::error::{dim_err, Error, Result};
use crate::numerics::gradcheck::{finite_diff_check_at, sample_coords};
use crate::numerics::{ops, GradCheckReport, Rng, Tape, Tensor, Var};
use crate::params::{join, ParamRole, ParamVars, Parameterized};
use crate::redundancy::psnr;

/// Row-normalisation floor for `Q` and `K` inside attention.
const ATTN_NORM_EPS: f64 = 1e-12;

/// Anything the probes, training loop and checkpoints can drive.
pub trait Enhancer: Parameterized + Clone + Send + Sync {
    fn forward_on(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var>;

    /// Whether every generated-parameter basis is fixed.
    fn is_frozen(&self) -> bool {
        true
    }

    /// Inference without gradient tracking.
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, self, false);
        let xv = tape.constant(x.clone());
        let y = self.forward_on(&mut tape, &pv, xv)?;
        let out = tape.value(y).clone();
        if !out.is_finite() {
            return Err(Error::NonFinite("forward pass output".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdrSettings {
    #[serde(rename = "D_m")]
    pub d_m: usize,
    #[serde(rename = "D_e")]
    pub d_e: usize,
    #[serde(rename = "D_k")]
    pub d_k: usize,
}

impl Default for AdrSettings {
    fn default() -> Self {
        Self {
            d_m: crate::adr::DEFAULT_BOTTLENECK,
            d_e: crate::pog::DEFAULT_EMBED_DIM,
            d_k: crate::adr::DEFAULT_KERNEL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: [usize; 2],
    /// One flag per decoder stage.
    pub adr_enabled: [bool; 2],
    pub adr: AdrSettings,
    pub dynconv_enabled: bool,
    pub dynconv_candidates: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16],
            adr_enabled: [false, false],
            adr: AdrSettings::default(),
            dynconv_enabled: false,
            dynconv_candidates: crate::dynbaseline::DEFAULT_CANDIDATES,
            init_seed: 0,
        }
    }
}

/// 3×3 same-padded convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, rng: &mut Rng) -> Self {
        Self {
            weight: ParamRole::Weight { fan_in: c_in * kernel * kernel }
                .init(&[c_out, c_in, kernel, kernel], rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    fn fan_in(&self) -> usize {
        let s = self.weight.shape();
        s[1] * s[2] * s[3]
    }

    fn forward_on(&self, tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
        let w = pv.get(&join(prefix, "weight"))?;
        let b = pv.get(&join(prefix, "bias"))?;
        let y = tape.conv2d(x, w)?;
        tape.add_channel_bias(y, b)
    }
}

impl Parameterized for ConvLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        f(&join(prefix, "weight"), ParamRole::Weight { fan_in: self.fan_in() }, &self.weight);
        f(&join(prefix, "bias"), ParamRole::Bias, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        let fan_in = self.fan_in();
        f(&join(prefix, "weight"), ParamRole::Weight { fan_in }, &mut self.weight);
        f(&join(prefix, "bias"), ParamRole::Bias, &mut self.bias);
    }
}

/// Transposed (channel-by-channel) attention with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub temperature: Tensor,
    pub adr: Option<AdrBlock>,
    pub out: ConvLayer,
}

impl ChannelAttention {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        let pointwise = |rng: &mut Rng| {
            ParamRole::Weight { fan_in: channels }.init(&[channels, channels, 1, 1], rng)
        };
        Self {
            q: pointwise(rng),
            k: pointwise(rng),
            v: pointwise(rng),
            temperature: Tensor::scalar(1.0),
            adr: None,
            out: ConvLayer::new(channels, channels, 1, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.q.shape()[0]
    }

    /// Block output for `f`, plus the attention matrix `[d, d]` when
    /// `trace` is given.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        prefix: &str,
        f: Var,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        let shape = tape.value(f).shape().to_vec();
        let d = self.channels();
        if shape.len() != 3 || shape[0] != d {
            return Err(dim_err!("attention block over {d} channels got {shape:?}"));
        }
        let hw = shape[1] * shape[2];
        let wq = pv.get(&join(prefix, "q"))?;
        let wk = pv.get(&join(prefix, "k"))?;
        let wv = pv.get(&join(prefix, "v"))?;
        let mut q = tape.conv2d(f, wq)?;
        let mut k = tape.conv2d(f, wk)?;
        let mut v = tape.conv2d(f, wv)?;
        if let Some(adr) = &self.adr {
            let adr_prefix = join(prefix, "adr");
            if let Some(t) = trace.as_deref_mut() {
                let f_in = tape.concat_channels(&[q, k, v])?;
                t.adr_inputs.push((adr_prefix.clone(), tape.value(f_in).clone()));
            }
            (q, k, v) = adr.reallocate_on(tape, pv, &adr_prefix, q, k, v)?;
        }
        let q2 = tape.reshape(q, &[d, hw])?;
        let k2 = tape.reshape(k, &[d, hw])?;
        let v2 = tape.reshape(v, &[d, hw])?;
        let qn = tape.normalize_rows(q2, ATTN_NORM_EPS)?;
        let kn = tape.normalize_rows(k2, ATTN_NORM_EPS)?;
        let knt = tape.transpose(kn)?;
        let logits = tape.matmul(qn, knt)?;
        let tau = pv.get(&join(prefix, "temperature"))?;
        let logits = tape.mul_scalar(logits, tau)?;
        let attn = tape.softmax(logits)?;
        if let Some(t) = trace {
            t.attention.push((prefix.to_string(), tape.value(attn).clone()));
        }
        let mixed = tape.matmul(attn, v2)?;
        let mixed = tape.reshape(mixed, &shape)?;
        let projected = self.out.forward_on(tape, pv, &join(prefix, "out"), mixed)?;
        tape.add(projected, f)
    }

    pub fn apply(&self, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, self, false);
        let fv = tape.constant(f.clone());
        let y = self.forward_on(&mut tape, &pv, "", fv, None)?;
        Ok(tape.value(y).clone())
    }
}

impl Parameterized for ChannelAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        let role = ParamRole::Weight { fan_in: self.channels() };
        f(&join(prefix, "q"), role, &self.q);
        f(&join(prefix, "k"), role, &self.k);
        f(&join(prefix, "v"), role, &self.v);
        f(&join(prefix, "temperature"), ParamRole::Temperature, &self.temperature);
        if let Some(adr) = &self.adr {
            adr.visit(&join(prefix, "adr"), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        let role = ParamRole::Weight { fan_in: self.channels() };
        f(&join(prefix, "q"), role, &mut self.q);
        f(&join(prefix, "k"), role, &mut self.k);
        f(&join(prefix, "v"), role, &mut self.v);
        f(&join(prefix, "temperature"), ParamRole::Temperature, &mut self.temperature);
        if let Some(adr) = &mut self.adr {
            adr.visit_mut(&join(prefix, "adr"), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// The 3×3 convolution of a decoder stage.
#[derive(Debug, Clone, PartialEq)]
pub enum StageConv {
    Static(ConvLayer),
    Dynamic { conv: DynamicConv, bias: Tensor },
}

impl StageConv {
    fn forward_on(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        prefix: &str,
        x: Var,
        trace: Option<&mut Trace>,
    ) -> Result<Var> {
        match self {
            StageConv::Static(c) => c.forward_on(tape, pv, &join(prefix, "conv"), x),
            StageConv::Dynamic { conv, .. } => {
                let p = join(prefix, "dynconv");
                if let Some(t) = trace {
                    t.dynconv_inputs.push((p.clone(), tape.value(x).clone()));
                }
                let y = conv.forward_on(tape, pv, &p, x)?;
                let b = pv.get(&join(&p, "bias"))?;
                tape.add_channel_bias(y, b)
            }
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        match self {
            StageConv::Static(c) => c.visit(&join(prefix, "conv"), f),
            StageConv::Dynamic { conv, bias } => {
                let p = join(prefix, "dynconv");
                conv.visit(&p, f);
                f(&join(&p, "bias"), ParamRole::Bias, bias);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        match self {
            StageConv::Static(c) => c.visit_mut(&join(prefix, "conv"), f),
            StageConv::Dynamic { conv, bias } => {
                let p = join(prefix, "dynconv");
                conv.visit_mut(&p, f);
                f(&join(&p, "bias"), ParamRole::Bias, bias);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage {
    pub conv: StageConv,
    pub attn: ChannelAttention,
}

/// Intermediate values captured during a traced forward pass.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    /// Attention matrices by block prefix.
    pub attention: Vec<(String, Tensor)>,
    /// Concatenated `Q/K/V` entering each reallocation block.
    pub adr_inputs: Vec<(String, Tensor)>,
    /// Inputs to each dynamic convolution.
    pub dynconv_inputs: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEnhancer {
    config: ModelConfig,
    encoder: [ConvLayer; 2],
    latent: ChannelAttention,
    decoder: [DecoderStage; 2],
    head: ConvLayer,
}

impl ToyEnhancer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let [w0, w1] = config.widths;
        if w0 == 0 || w1 == 0 {
            return Err(Error::Config(format!("invalid widths {:?}", config.widths)));
        }
        if config.dynconv_enabled && config.dynconv_candidates == 0 {
            return Err(Error::Config("dynconv needs at least one candidate".into()));
        }
        let mut rng = Rng::new(config.init_seed);
        let encoder = [ConvLayer::new(3, w0, 3, &mut rng), ConvLayer::new(w0, w1, 3, &mut rng)];
        let latent = ChannelAttention::new(w1, &mut rng);
        let stage = |c_in: usize, adr: bool, rng: &mut Rng| -> Result<DecoderStage> {
            let conv = if config.dynconv_enabled {
                StageConv::Dynamic {
                    conv: DynamicConv::new(c_in, w0, 3, config.dynconv_candidates, rng)?,
                    bias: Tensor::zeros(&[w0]),
                }
            } else {
                StageConv::Static(ConvLayer::new(c_in, w0, 3, rng))
            };
            let mut attn = ChannelAttention::new(w0, rng);
            if adr {
                let a = config.adr;
                attn.adr = Some(AdrBlock::new(3 * w0, a.d_m, a.d_k, a.d_e, rng)?);
            }
            Ok(DecoderStage { conv, attn })
        };
        let decoder = [
            stage(w1, config.adr_enabled[0], &mut rng)?,
            stage(w0, config.adr_enabled[1], &mut rng)?,
        ];
        let head = ConvLayer::new(w0, 3, 3, &mut rng);
        Ok(Self {
            config,
            encoder,
            latent,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn decoder(&self) -> &[DecoderStage; 2] {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut [DecoderStage; 2] {
        &mut self.decoder
    }

    pub fn latent(&self) -> &ChannelAttention {
        &self.latent
    }

    pub fn head_mut(&mut self) -> &mut ConvLayer {
        &mut self.head
    }

    /// Records of the attached reallocation blocks, by decoder stage.
    pub fn adr_records(&self) -> Vec<Option<AdrRecord>> {
        self.decoder
            .iter()
            .map(|s| s.attn.adr.as_ref().map(|a| a.record()))
            .collect()
    }

    /// Freeze every generator basis.
    pub fn freeze(&mut self) -> Result<()> {
        for s in &mut self.decoder {
            if let Some(adr) = &mut s.attn.adr {
                adr.freeze()?;
            }
        }
        Ok(())
    }

    /// Forward pass, optionally capturing intermediates.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        x: Var,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) {
            return Err(dim_err!(
                "enhancer input must be 3xHxW with H, W divisible by 4, got {s:?}"
            ));
        }
        let e0 = self.encoder[0].forward_on(tape, pv, "encoder.0.conv", x)?;
        let e0 = tape.relu(e0);
        let p0 = tape.avg_pool2(e0)?;
        let e1 = self.encoder[1].forward_on(tape, pv, "encoder.1.conv", p0)?;
        let e1 = tape.relu(e1);
        let p1 = tape.avg_pool2(e1)?;
        let mut h = self
            .latent
            .forward_on(tape, pv, "latent.attn", p1, trace.as_deref_mut())?;
        for (i, (stage, skip)) in self.decoder.iter().zip([e1, e0]).enumerate() {
            let prefix = format!("decoder.{i}");
            let up = tape.upsample2(h)?;
            let up = tape.add(up, skip)?;
            let c = stage
                .conv
                .forward_on(tape, pv, &prefix, up, trace.as_deref_mut())?;
            let c = tape.relu(c);
            h = stage
                .attn
                .forward_on(tape, pv, &join(&prefix, "attn"), c, trace.as_deref_mut())?;
        }
        let y = self.head.forward_on(tape, pv, "head", h)?;
        Ok(tape.clamp(y, 0.0, 1.0))
    }

    /// Inference that also returns the captured trace.
    pub fn trace(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, self, false);
        let xv = tape.constant(x.clone());
        let mut trace = Trace::default();
        let y = self.forward_traced(&mut tape, &pv, xv, Some(&mut trace))?;
        Ok((tape.value(y).clone(), trace))
    }

    /// Multiply-accumulate count of one forward pass at `h × w`.
    pub fn forward_macs(&self, h: usize, w: usize) -> Result<u64> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, self, false);
        let x = tape.constant(Tensor::full(&[3, h, w], 0.5));
        self.forward_traced(&mut tape, &pv, x, None)?;
        Ok(tape.macs())
    }
}

impl Parameterized for ToyEnhancer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        for (i, e) in self.encoder.iter().enumerate() {
            e.visit(&join(prefix, &format!("encoder.{i}.conv")), f);
        }
        self.latent.visit(&join(prefix, "latent.attn"), f);
        for (i, s) in self.decoder.iter().enumerate() {
            let p = join(prefix, &format!("decoder.{i}"));
            s.conv.visit(&p, f);
            s.attn.visit(&join(&p, "attn"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        for (i, e) in self.encoder.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("encoder.{i}.conv")), f);
        }
        self.latent.visit_mut(&join(prefix, "latent.attn"), f);
        for (i, s) in self.decoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("decoder.{i}"));
            s.conv.visit_mut(&p, f);
            s.attn.visit_mut(&join(&p, "attn"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl Enhancer for ToyEnhancer {
    fn forward_on(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
        self.forward_traced(tape, pv, x, None)
    }

    fn is_frozen(&self) -> bool {
        self.decoder
            .iter()
            .filter_map(|s| s.attn.adr.as_ref())
            .all(|a| a.is_frozen())
    }
}

/// Adam hyperparameters.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 1e-3;

/// Optimiser and bookkeeping state after [`train`].
#[derive(Debug, Clone)]
pub struct TrainState {
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
    pub step: usize,
    pub rng: Rng,
    /// Per-step L1 loss on the sampled pair.
    pub loss_history: Vec<f64>,
    /// Mean L1 over all pairs before the first step.
    pub initial_loss: f64,
    /// Mean L1 over all pairs after the last step.
    pub final_loss: f64,
}

/// Mean L1 loss of `model` over `pairs`.
pub fn dataset_loss<M: Enhancer>(model: &M, pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    let mut total = 0.0;
    for (low, reference) in pairs {
        total += ops::l1(&model.infer(low)?, reference)?;
    }
    Ok(total / pairs.len() as f64)
}

/// L1 loss of one pair, recorded on `tape` with tracked parameters.
pub fn pair_loss_on<M: Enhancer>(
    model: &M,
    tape: &mut Tape,
    pv: &ParamVars,
    low: &Tensor,
    reference: &Tensor,
) -> Result<Var> {
    let x = tape.constant(low.clone());
    let r = tape.constant(reference.clone());
    let y = model.forward_on(tape, pv, x)?;
    tape.l1(y, r)
}

/// Minimise mean L1 with Adam, one pair per step, visiting pairs in a
/// fresh seeded permutation each epoch.
pub fn train<M: Enhancer>(
    model: &mut M,
    pairs: &[(Tensor, Tensor)],
    steps: usize,
    seed: u64,
    lr: f64,
) -> Result<TrainState> {
    if steps == 0 || pairs.is_empty() {
        return Err(Error::Contract("train needs steps >= 1 and at least one pair".into()));
    }
    let params = model.named_params();
    let mut state = TrainState {
        first_moments: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        second_moments: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        step: 0,
        rng: Rng::new(seed),
        loss_history: Vec::with_capacity(steps),
        initial_loss: dataset_loss(model, pairs)?,
        final_loss: f64::NAN,
    };
    let mut order: Vec<usize> = Vec::new();
    for step in 0..steps {
        if order.is_empty() {
            order = (0..pairs.len()).collect();
            state.rng.shuffle(&mut order);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let (low, reference) = &pairs[idx];

        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &*model, true);
        let loss = pair_loss_on(&*model, &mut tape, &pv, low, reference)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Divergence { step, loss: loss_value });
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor> = pv.ordered().iter().map(|&v| tape.grad(v)).collect();
        drop(tape);

        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let mut i = 0;
        let (m_all, v_all) = (&mut state.first_moments, &mut state.second_moments);
        model.visit_mut("", &mut |_, _, p| {
            let (m, v, g) = (&mut m_all[i], &mut v_all[i], &grads[i]);
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let update = lr * (*mv / bc1) / ((*vv / bc2).sqrt() + ADAM_EPS);
                *pv -= update;
            }
            i += 1;
        });
        state.loss_history.push(loss_value);
    }
    state.final_loss = dataset_loss(model, pairs)?;
    if !state.final_loss.is_finite() {
        return Err(Error::Divergence {
            step: steps,
            loss: state.final_loss,
        });
    }
    Ok(state)
}

/// Mean PSNR (dB, peak 1.0) of enhanced outputs against references.
pub fn evaluate<M: Enhancer>(model: &M, pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluate needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (low, reference) in pairs {
        total += psnr(&model.infer(low)?, reference, 1.0)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Offset of the synthetic reference used by [`check_loss_gradients`].
pub const GRADCHECK_REFERENCE_OFFSET: f64 = 0.01;

/// Finite-difference check of the L1 training loss on `samples` uniformly
/// drawn parameter coordinates.
///
/// The reference is the model's own output perturbed by
/// `U[-0.01, 0.01]` per pixel. Keeping the loss near zero keeps roundoff in
/// the differenced loss far below the smallest gradients.
pub fn check_loss_gradients<M: Enhancer>(
    model: &M,
    low: &Tensor,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if samples == 0 {
        return Err(Error::Contract("gradient check needs at least one sample".into()));
    }
    let mut rng = Rng::new(seed);
    let y = model.infer(low)?;
    let reference = Tensor::from_fn(y.shape(), |i| {
        y.data()[i] + GRADCHECK_REFERENCE_OFFSET * rng.uniform(-1.0, 1.0)
    });
    let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, _, t)| t).collect();
    let coords = sample_coords(&params, samples, &mut rng);
    finite_diff_check_at(
        |tape, vars| {
            let pv = ParamVars::from_vars(model, vars)?;
            pair_loss_on(model, tape, &pv, low, &reference)
        },
        &params,
        eps,
        &coords,
    )
}
