//! Whole-network forward and backward passes over a [`TrainState`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, SwsRows};
use super::spec::{init_betas, ActKind, BlockPlan, ConvGeom, GraphSpec, Shape3, Stage};
use crate::error::{Error, Result};

/// Training phase. `Step1` binarizes activations only; `Step2` binarizes
/// weights as well.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Step1,
    Step2,
}

impl Phase {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "step1" | "1" => Ok(Phase::Step1),
            "step2" | "2" => Ok(Phase::Step2),
            _ => Err(Error::Config(format!("phase must be step1 or step2, got `{s}`"))),
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Phase::Step1 => 1,
            Phase::Step2 => 2,
        }
    }
}

/// Which forward is evaluated.
///
/// `Exact` is the real network (sign, rounded exponents). `Surrogate`
/// replaces every non-differentiable piece by the smooth function whose
/// derivative the backward pass uses, so that finite differences of the
/// surrogate check the analytic gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathMode {
    Exact,
    Surrogate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    StemWeight,
    StemBias,
    BinWeight,
    SignBias,
    SlopeExp,
    OffsetIn,
    OffsetOut,
    HeadWeight,
    HeadBias,
}

impl ParamKind {
    /// Matrices whose rows are output channels; these get AGC and weight decay.
    pub fn is_weight_matrix(self) -> bool {
        matches!(self, ParamKind::StemWeight | ParamKind::BinWeight | ParamKind::HeadWeight)
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        use ParamKind::*;
        [StemWeight, StemBias, BinWeight, SignBias, SlopeExp, OffsetIn, OffsetOut, HeadWeight, HeadBias]
            .get(t as usize)
            .copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    /// Number of rows (output channels) for matrices, 1 otherwise.
    pub rows: usize,
    pub values: Vec<f64>,
}

/// Adam first/second moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSlots {
    pub sign_bias: usize,
    pub weight: usize,
    pub slope_exp: Option<usize>,
    pub offset_in: usize,
    pub offset_out: usize,
}

/// Index of every parameter tensor in [`TrainState::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub stem_weight: usize,
    pub stem_bias: usize,
    pub blocks: Vec<BlockSlots>,
    pub head_weight: usize,
    pub head_bias: usize,
}

impl Layout {
    fn build(stages: &[Stage]) -> (Self, Vec<(String, ParamKind, usize, usize)>) {
        let mut specs = Vec::new();
        let mut push = |name: String, kind, rows, len| {
            specs.push((name, kind, rows, len));
            specs.len() - 1
        };
        let mut layout = Layout {
            stem_weight: 0,
            stem_bias: 0,
            blocks: Vec::new(),
            head_weight: 0,
            head_bias: 0,
        };
        for stage in stages {
            match stage {
                Stage::Stem { conv, .. } => {
                    layout.stem_weight = push("stem.weight".into(), ParamKind::StemWeight, conv.c_out, conv.weight_len());
                    layout.stem_bias = push("stem.bias".into(), ParamKind::StemBias, 1, conv.c_out);
                }
                Stage::Block(b) => {
                    let i = b.index;
                    let c_out = b.output.c;
                    let sign_bias = push(format!("block{i}.sign_bias"), ParamKind::SignBias, 1, b.input.c);
                    let weight = push(format!("block{i}.weight"), ParamKind::BinWeight, c_out, b.conv.weight_len());
                    let slope_exp = (b.act == ActKind::Quantized)
                        .then(|| push(format!("block{i}.slope_exp"), ParamKind::SlopeExp, 1, c_out));
                    let offset_in = push(format!("block{i}.offset_in"), ParamKind::OffsetIn, 1, c_out);
                    let offset_out = push(format!("block{i}.offset_out"), ParamKind::OffsetOut, 1, c_out);
                    layout.blocks.push(BlockSlots {
                        sign_bias,
                        weight,
                        slope_exp,
                        offset_in,
                        offset_out,
                    });
                }
                Stage::Head { n_in, n_out } => {
                    layout.head_weight = push("head.weight".into(), ParamKind::HeadWeight, *n_out, n_in * n_out);
                    layout.head_bias = push("head.bias".into(), ParamKind::HeadBias, 1, *n_out);
                }
                Stage::Pool { .. } | Stage::Flatten { .. } => {}
            }
        }
        (layout, specs)
    }
}

/// Everything needed to resume training: parameters, frozen betas and
/// optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub spec: GraphSpec,
    /// Phase the parameters were last trained in.
    pub phase: Phase,
    pub params: Vec<Param>,
    pub moments: Vec<Moments>,
    pub betas: Vec<f64>,
    pub step: u64,
}

/// Default initial value of the quantized-RPReLU exponent (slope 2^-2).
pub const INIT_SLOPE_EXP: f64 = -2.0;

impl TrainState {
    /// Seeded initialization: He-normal stem, unit-normal latent binary
    /// weights, zero biases/offsets and slope exponent -2.
    pub fn init(spec: &GraphSpec, seed: u64) -> Result<Self> {
        let stages = spec.plan()?;
        let (_, descs) = Layout::build(&stages);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(descs.len());
        for (name, kind, rows, len) in descs {
            let values = match kind {
                ParamKind::StemWeight | ParamKind::HeadWeight | ParamKind::BinWeight => {
                    let fan_in = len / rows;
                    let std = match kind {
                        ParamKind::StemWeight => (2.0 / fan_in as f64).sqrt(),
                        ParamKind::HeadWeight => (1.0 / fan_in as f64).sqrt(),
                        _ => 1.0,
                    };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..len).map(|_| normal.sample(&mut rng)).collect()
                }
                ParamKind::SlopeExp => vec![INIT_SLOPE_EXP; len],
                _ => vec![0.0; len],
            };
            params.push(Param { name, kind, rows, values });
        }
        let moments = params.iter().map(|p| Moments::zeros(p.values.len())).collect();
        Ok(Self {
            spec: spec.clone(),
            phase: Phase::Step1,
            params,
            moments,
            betas: init_betas(spec)?,
            step: 0,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::build(&self.spec.plan().expect("state spec was validated")).0
    }

    /// Check that the parameter list has exactly the shapes `spec` implies.
    pub fn check_against(&self, spec: &GraphSpec) -> Result<()> {
        let (_, descs) = Layout::build(&spec.plan()?);
        if descs.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "graph has {} parameter tensors, checkpoint {}",
                descs.len(),
                self.params.len()
            )));
        }
        for ((name, kind, rows, len), p) in descs.iter().zip(&self.params) {
            if *name != p.name || *kind != p.kind || *rows != p.rows || *len != p.values.len() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor `{}` ({:?}, {} rows, {} values) vs graph `{name}` ({kind:?}, {rows} rows, {len} values)",
                    p.name,
                    p.kind,
                    p.rows,
                    p.values.len()
                )));
            }
        }
        let betas = init_betas(spec)?;
        if betas.len() != self.betas.len() {
            return Err(Error::CheckpointMismatch(format!(
                "graph has {} blocks, checkpoint {} betas",
                betas.len(),
                self.betas.len()
            )));
        }
        if let Some(i) = self.betas.iter().position(|b| !(*b > 0.0)) {
            return Err(Error::CheckpointMismatch(format!("block {i} has non-positive beta")));
        }
        Ok(())
    }

    pub fn param(&self, i: usize) -> &[f64] {
        &self.params[i].values
    }

    /// Compute the effective (standardized, possibly binarized) weights of
    /// every block for one phase.
    pub fn prepare(&self, phase: Phase, mode: PathMode) -> Result<Prepared> {
        let stages = self.spec.plan()?;
        let layout = Layout::build(&stages).0;
        let mut blocks = Vec::new();
        for (b, slots) in stages
            .iter()
            .filter_map(|s| match s {
                Stage::Block(b) => Some(b),
                _ => None,
            })
            .zip(&layout.blocks)
        {
            blocks.push(prepare_block(
                &self.params[slots.weight].values,
                b,
                phase,
                mode,
            )?);
        }
        Ok(Prepared {
            phase,
            mode,
            stages,
            layout,
            blocks,
        })
    }
}

/// Effective weights of one binary convolution.
#[derive(Clone, Debug)]
pub struct PreparedBlock {
    pub sws: SwsRows,
    /// Mean absolute standardized weight per output channel.
    pub mean_abs: Vec<f64>,
    /// Per-channel scale applied in step 2 (power of two in exact mode).
    pub kappa: Vec<f64>,
    /// `round(log2(mean_abs))` per channel.
    pub kappa_exp: Vec<i32>,
    /// The binarized factor (sign, or its clamp surrogate).
    pub binary: Vec<f64>,
    pub effective: Vec<f64>,
}

fn prepare_block(latent: &[f64], b: &BlockPlan, phase: Phase, mode: PathMode) -> Result<PreparedBlock> {
    let sws = layers::sws_rows(latent, b.conv.c_out, 1.0, &format!("block{}", b.index))?;
    Ok(binarize_standardized(sws, phase, mode))
}

/// Effective convolution weights from standardized ones. Step 1 uses them
/// as is; step 2 uses `kappa_i * sign(w)` with
/// `kappa_i = 2^round(log2(mean |w_i|))`.
pub fn binarize_standardized(sws: SwsRows, phase: Phase, mode: PathMode) -> PreparedBlock {
    let n = sws.fan_in;
    let rows = sws.std.len();
    let mean_abs: Vec<f64> = sws
        .standardized
        .chunks_exact(n)
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>() / n as f64)
        .collect();
    let kappa_exp: Vec<i32> = mean_abs.iter().map(|m| layers::round_exp(m.log2()) as i32).collect();
    let (kappa, binary, effective) = match phase {
        Phase::Step1 => (vec![1.0; rows], Vec::new(), sws.standardized.clone()),
        Phase::Step2 => {
            let kappa: Vec<f64> = match mode {
                PathMode::Exact => kappa_exp.iter().map(|&e| (e as f64).exp2()).collect(),
                PathMode::Surrogate => mean_abs.clone(),
            };
            let binary: Vec<f64> = sws
                .standardized
                .iter()
                .map(|&w| match mode {
                    PathMode::Exact => crate::bitcore::sign(w),
                    PathMode::Surrogate => w.clamp(-1.0, 1.0),
                })
                .collect();
            let effective = binary
                .iter()
                .enumerate()
                .map(|(j, v)| kappa[j / n] * v)
                .collect();
            (kappa, binary, effective)
        }
    };
    PreparedBlock {
        sws,
        mean_abs,
        kappa,
        kappa_exp,
        binary,
        effective,
    }
}

/// Binary convolution of already-binarized activations with latent weights
/// (standardized first).
pub fn binconv_forward(
    signs: &[f64],
    input: Shape3,
    latent: &[f64],
    conv: &ConvGeom,
    phase: Phase,
) -> Result<Vec<f64>> {
    let output = conv.output(input)?;
    if signs.len() != input.len() || latent.len() != conv.weight_len() {
        return Err(Error::Shape(format!(
            "binconv: {} activations for {input}, {} weights for {conv:?}",
            signs.len(),
            latent.len()
        )));
    }
    let sws = layers::sws_rows(latent, conv.c_out, 1.0, "bin_conv")?;
    let prep = binarize_standardized(sws, phase, PathMode::Exact);
    Ok(layers::conv2d(signs, input, &prep.effective, conv, output))
}

/// Per-phase view of a state ready for repeated forward/backward passes.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub phase: Phase,
    pub mode: PathMode,
    pub stages: Vec<Stage>,
    pub layout: Layout,
    pub blocks: Vec<PreparedBlock>,
}

/// Intermediate values of one block kept for backward.
#[derive(Clone, Debug, Default)]
pub struct BlockTrace {
    pub input: Vec<f64>,
    pub pre_sign: Vec<f64>,
    /// Output of the masked sign (exactly ±1 in exact mode).
    pub signs: Vec<f64>,
    pub conv_out: Vec<f64>,
}

#[derive(Clone, Debug)]
enum StageTrace {
    Stem { input: Vec<f64> },
    Block(BlockTrace),
    Pool,
    Flatten,
    Head { input: Vec<f64> },
}

/// Forward record of one sample.
#[derive(Clone, Debug)]
pub struct Trace {
    stages: Vec<StageTrace>,
    pub logits: Vec<f64>,
}

impl Trace {
    pub fn blocks(&self) -> impl Iterator<Item = &BlockTrace> {
        self.stages.iter().filter_map(|s| match s {
            StageTrace::Block(b) => Some(b),
            _ => None,
        })
    }
}

/// Gradient of every parameter tensor. For binary weights the entry first
/// holds the gradient on the effective weights; [`Prepared::finish_grads`]
/// maps it to the latent weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
    latent: bool,
}

impl Grads {
    pub fn zeros_like(state: &TrainState) -> Self {
        Self {
            tensors: state.params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            latent: false,
        }
    }

    /// Accumulate in a fixed order.
    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            for x in t {
                *x *= k;
            }
        }
    }
}

impl Prepared {
    pub fn forward(&self, state: &TrainState, x: &[f64]) -> Result<Trace> {
        let smooth = self.mode == PathMode::Surrogate;
        let delta = state.spec.delta;
        let mut cur = x.to_vec();
        let mut traces = Vec::with_capacity(self.stages.len());
        let mut bi = 0;
        for stage in &self.stages {
            match stage {
                Stage::Stem { conv, input, output } => {
                    if cur.len() != input.len() {
                        return Err(Error::Shape(format!(
                            "input has {} values, graph expects {input}",
                            cur.len()
                        )));
                    }
                    let w = state.param(self.layout.stem_weight);
                    let b = state.param(self.layout.stem_bias);
                    let mut y = layers::conv2d(&cur, *input, w, conv, *output);
                    let plane = output.h * output.w;
                    for (i, v) in y.iter_mut().enumerate() {
                        *v += b[i / plane];
                    }
                    traces.push(StageTrace::Stem { input: cur });
                    cur = y;
                }
                Stage::Block(plan) => {
                    let slots = &self.layout.blocks[bi];
                    let prep = &self.blocks[bi];
                    let beta = state.betas[bi];
                    let (signs, pre_sign) = layers::masked_sign_forward(
                        &cur,
                        plan.input.c,
                        state.param(slots.sign_bias),
                        beta,
                        delta,
                        smooth,
                    )?;
                    let conv_out = layers::conv2d(&signs, plan.input, &prep.effective, &plan.conv, plan.output);
                    let a = slots.slope_exp.map(|i| state.param(i)).unwrap_or(&[]);
                    let act = layers::qrprelu_forward(
                        &conv_out,
                        plan.output.c,
                        a,
                        state.param(slots.offset_in),
                        state.param(slots.offset_out),
                        plan.act,
                        smooth,
                    )?;
                    let short = layers::shortcut_forward(&cur, plan.input, plan.output)?;
                    let out = layers::nf_residual_combine(&short, &act, plan.alpha_exp)?;
                    traces.push(StageTrace::Block(BlockTrace {
                        input: cur,
                        pre_sign,
                        signs,
                        conv_out,
                    }));
                    cur = out;
                    bi += 1;
                }
                Stage::Pool { input, .. } => {
                    cur = layers::avgpool_forward(&cur, *input)?;
                    traces.push(StageTrace::Pool);
                }
                Stage::Flatten { .. } => traces.push(StageTrace::Flatten),
                Stage::Head { n_in, n_out } => {
                    let w = state.param(self.layout.head_weight);
                    let b = state.param(self.layout.head_bias);
                    let logits = (0..*n_out)
                        .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>())
                        .collect();
                    traces.push(StageTrace::Head { input: cur });
                    cur = logits;
                }
            }
        }
        Ok(Trace {
            stages: traces,
            logits: cur,
        })
    }

    /// Backpropagate `grad_logits` through one recorded sample. The returned
    /// binary-weight entries are gradients on the effective weights.
    pub fn backward(&self, state: &TrainState, trace: &Trace, grad_logits: &[f64]) -> Grads {
        let smooth = self.mode == PathMode::Surrogate;
        let delta = state.spec.delta;
        let mut grads = Grads::zeros_like(state);
        let mut g = grad_logits.to_vec();
        let mut bi = self.blocks.len();
        for (stage, tr) in self.stages.iter().zip(&trace.stages).rev() {
            match (stage, tr) {
                (Stage::Head { n_in, n_out }, StageTrace::Head { input }) => {
                    let w = state.param(self.layout.head_weight);
                    let gw = &mut grads.tensors[self.layout.head_weight];
                    let mut gx = vec![0.0; *n_in];
                    for o in 0..*n_out {
                        for j in 0..*n_in {
                            gw[o * n_in + j] += g[o] * input[j];
                            gx[j] += g[o] * w[o * n_in + j];
                        }
                    }
                    grads.tensors[self.layout.head_bias]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b);
                    g = gx;
                }
                (Stage::Flatten { .. }, _) => {}
                (Stage::Pool { input, .. }, _) => g = layers::avgpool_backward(&g, *input),
                (Stage::Block(plan), StageTrace::Block(bt)) => {
                    bi -= 1;
                    let slots = &self.layout.blocks[bi];
                    let prep = &self.blocks[bi];
                    let alpha = (plan.alpha_exp as f64).exp2();
                    let g_branch: Vec<f64> = g.iter().map(|v| v * alpha).collect();
                    let mut gx = layers::shortcut_backward(&g, plan.input, plan.output);

                    let a = slots.slope_exp.map(|i| state.param(i)).unwrap_or(&[]);
                    let ag = layers::qrprelu_backward(
                        &g_branch,
                        &bt.conv_out,
                        plan.output.c,
                        a,
                        state.param(slots.offset_in),
                        plan.act,
                        smooth,
                    );
                    if let Some(i) = slots.slope_exp {
                        grads.tensors[i] = ag.a;
                    }
                    grads.tensors[slots.offset_in] = ag.xi1;
                    grads.tensors[slots.offset_out] = ag.xi2;

                    let (g_signs, g_eff) = layers::conv2d_backward(
                        &bt.signs,
                        plan.input,
                        &prep.effective,
                        &plan.conv,
                        plan.output,
                        &ag.y,
                        true,
                    );
                    grads.tensors[slots.weight] = g_eff;
                    let (g_in, g_xi) = layers::masked_sign_backward(
                        &g_signs.expect("requested"),
                        &bt.pre_sign,
                        plan.input.c,
                        state.betas[bi],
                        delta,
                    );
                    grads.tensors[slots.sign_bias] = g_xi;
                    for (a, b) in gx.iter_mut().zip(&g_in) {
                        *a += b;
                    }
                    g = gx;
                }
                (Stage::Stem { conv, input, output }, StageTrace::Stem { input: x }) => {
                    let w = state.param(self.layout.stem_weight);
                    let (_, gw) = layers::conv2d_backward(x, *input, w, conv, *output, &g, false);
                    grads.tensors[self.layout.stem_weight] = gw;
                    let plane = output.h * output.w;
                    let gb = &mut grads.tensors[self.layout.stem_bias];
                    for (i, v) in g.iter().enumerate() {
                        gb[i / plane] += v;
                    }
                }
                _ => unreachable!("trace recorded by a different plan"),
            }
        }
        grads
    }

    /// Map gradients on effective binary weights to the latent weights
    /// (through kappa, the sign STE and the standardization).
    pub fn finish_grads(&self, mut grads: Grads) -> Grads {
        if grads.latent {
            return grads;
        }
        for (slots, prep) in self.layout.blocks.iter().zip(&self.blocks) {
            let g_eff = &grads.tensors[slots.weight];
            let n = prep.sws.fan_in;
            let g_hat: Vec<f64> = match self.phase {
                Phase::Step1 => g_eff.clone(),
                Phase::Step2 => {
                    let mut out = vec![0.0; g_eff.len()];
                    for (i, ((ge, bin), (what, dst))) in g_eff
                        .chunks_exact(n)
                        .zip(prep.binary.chunks_exact(n))
                        .zip(prep.sws.standardized.chunks_exact(n).zip(out.chunks_exact_mut(n)))
                        .enumerate()
                    {
                        let kappa = prep.kappa[i];
                        let g_kappa: f64 = ge.iter().zip(bin).map(|(a, b)| a * b).sum();
                        // kappa = 2^round(log2 m) with round passed straight through
                        let g_mean_abs = g_kappa * kappa / prep.mean_abs[i];
                        for j in 0..n {
                            let ste = if what[j].abs() <= 1.0 { kappa * ge[j] } else { 0.0 };
                            dst[j] = ste + g_mean_abs * crate::bitcore::sign(what[j]) / n as f64;
                        }
                    }
                    out
                }
            };
            grads.tensors[slots.weight] = layers::sws_backward(&prep.sws, &g_hat);
        }
        grads.latent = true;
        grads
    }
}
