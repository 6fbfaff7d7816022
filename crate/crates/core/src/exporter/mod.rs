//! Folding a step-2 network into its multiplication-free inference form.
//!
//! Mask layers disappear: `sign(x/beta + xi)` becomes the compare
//! `x >= -xi*beta`. Binary weights are bit-packed with a power-of-two scale
//! per output channel, activation slopes and the residual scale are shift
//! amounts, and every additive constant is a fixed-point number.
//!
//! [`fold_float`] keeps the constants real (the oracle used to check the
//! fold); [`FoldedFloat::quantize`] produces the [`FoldedModel`] that the
//! engine runs and [`abnn`] serializes.

pub mod abnn;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use abnn::{model_from_bytes, model_to_bytes, read_abnn, write_abnn};

use crate::bitcore::{self, BitTensor};
use crate::error::{Error, Result};
use crate::nfgraph::layers;
use crate::nfgraph::network::{PathMode, Phase, TrainState};
use crate::nfgraph::{ActKind, ConvGeom, GraphSpec, Shape3, Stage};

/// Largest magnitude of any stored exponent.
pub const MAX_EXP: i32 = 31;

/// Negative-branch parameters of an activation, per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedAct<T> {
    pub slope_exp: Vec<i8>,
    pub xi1: Vec<T>,
    pub xi2: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldedBlock<T> {
    pub alpha_exp: i8,
    pub input: Shape3,
    pub conv: ConvGeom,
    /// Per input channel: the sign is +1 iff `x >= threshold`.
    pub threshold: Vec<T>,
    /// `sign(W)` with shape `[c_out, kh, kw, c_in]`, one packed row per tap.
    pub weights: BitTensor,
    pub kappa_exp: Vec<i8>,
    pub act: FoldedAct<T>,
}

impl<T> FoldedBlock<T> {
    pub fn output(&self) -> Shape3 {
        self.conv.output(self.input).expect("validated block geometry")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FoldedLayer<T> {
    /// Full-precision boundary convolution, weights `[c_out, c_in, kh, kw]`.
    FirstConv {
        input: Shape3,
        conv: ConvGeom,
        weight: Vec<T>,
        bias: Vec<T>,
    },
    Block(FoldedBlock<T>),
    AvgPool2x2 { input: Shape3 },
    Flatten { len: usize },
    /// Full-precision boundary dense layer, weights `[n_out, n_in]`.
    LastDense {
        n_in: usize,
        n_out: usize,
        weight: Vec<T>,
        bias: Vec<T>,
    },
}

impl<T> FoldedLayer<T> {
    pub fn is_boundary(&self) -> bool {
        matches!(self, FoldedLayer::FirstConv { .. } | FoldedLayer::LastDense { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            FoldedLayer::FirstConv { .. } => "first_conv",
            FoldedLayer::Block(_) => "block",
            FoldedLayer::AvgPool2x2 { .. } => "avgpool2x2",
            FoldedLayer::Flatten { .. } => "flatten",
            FoldedLayer::LastDense { .. } => "last_dense",
        }
    }
}

/// Folded network. `T = f64` for the exact oracle, `T = i32` (raw fixed
/// point with `frac_bits` fraction bits) for the deployable model.
#[derive(Clone, Debug, PartialEq)]
pub struct Folded<T> {
    pub input: Shape3,
    pub frac_bits: u8,
    pub layers: Vec<FoldedLayer<T>>,
}

pub type FoldedFloat = Folded<f64>;
pub type FoldedModel = Folded<i32>;

fn check_exp(e: i32, what: &str) -> Result<i8> {
    if e.abs() > MAX_EXP {
        return Err(Error::Export(format!("{what}: exponent {e} outside -{MAX_EXP}..={MAX_EXP}")));
    }
    Ok(e as i8)
}

fn check_len<T>(v: &[T], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::Shape(format!("{what}: {} values, expected {n}", v.len())));
    }
    Ok(())
}

impl<T> Folded<T> {
    /// Structural check: shapes chain from input to logits, every tensor has
    /// its declared length, every exponent is in range.
    pub fn validate(&self) -> Result<()> {
        if self.frac_bits > 30 {
            return Err(Error::Contract(format!("frac_bits {} > 30", self.frac_bits)));
        }
        let mut cur = self.input;
        let mut flat: Option<usize> = None;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let at = |msg: String| Error::Graph(format!("layer {i} ({}): {msg}", l.name()));
            if flat.is_some() && !matches!(l, FoldedLayer::LastDense { .. }) {
                return Err(at("only last_dense may follow flatten".into()));
            }
            match l {
                FoldedLayer::FirstConv { input, conv, weight, bias } => {
                    if i != 0 || *input != cur || conv.c_in != cur.c {
                        return Err(at(format!("must come first and take {cur}")));
                    }
                    check_len(weight, conv.weight_len(), "first_conv weight")?;
                    check_len(bias, conv.c_out, "first_conv bias")?;
                    cur = conv.output(cur)?;
                }
                FoldedLayer::Block(b) => {
                    if b.input != cur || b.conv.c_in != cur.c {
                        return Err(at(format!("input {} does not match {cur}", b.input)));
                    }
                    let out = b.conv.output(cur)?;
                    let ds = out.h != cur.h || out.w != cur.w;
                    if (ds && (out.h * 2 != cur.h || out.w * 2 != cur.w)) || out.c % cur.c != 0 {
                        return Err(at(format!("unsupported shortcut {cur} -> {out}")));
                    }
                    check_len(&b.threshold, cur.c, "thresholds")?;
                    check_len(&b.kappa_exp, b.conv.c_out, "kappa exponents")?;
                    check_len(&b.act.slope_exp, b.conv.c_out, "slope exponents")?;
                    check_len(&b.act.xi1, b.conv.c_out, "xi1")?;
                    check_len(&b.act.xi2, b.conv.c_out, "xi2")?;
                    if b.weights.shape() != [b.conv.c_out, b.conv.kh, b.conv.kw, b.conv.c_in] {
                        return Err(at(format!("weight bits shaped {:?}", b.weights.shape())));
                    }
                    for &e in b.kappa_exp.iter().chain(&b.act.slope_exp).chain([&b.alpha_exp]) {
                        check_exp(e as i32, "block")?;
                    }
                    cur = out;
                }
                FoldedLayer::AvgPool2x2 { input } => {
                    if *input != cur || cur.h % 2 != 0 || cur.w % 2 != 0 {
                        return Err(at(format!("needs even input {cur}")));
                    }
                    cur = Shape3::new(cur.c, cur.h / 2, cur.w / 2);
                }
                FoldedLayer::Flatten { len } => {
                    if *len != cur.len() {
                        return Err(at(format!("length {len} for {cur}")));
                    }
                    flat = Some(*len);
                }
                FoldedLayer::LastDense { n_in, n_out, weight, bias } => {
                    if i + 1 != n || flat != Some(*n_in) {
                        return Err(at("must be last and follow flatten".into()));
                    }
                    check_len(weight, n_in * n_out, "last_dense weight")?;
                    check_len(bias, *n_out, "last_dense bias")?;
                }
            }
        }
        if !matches!(self.layers.first(), Some(FoldedLayer::FirstConv { .. }))
            || !matches!(self.layers.last(), Some(FoldedLayer::LastDense { .. }))
        {
            return Err(Error::Graph("model must start with first_conv and end with last_dense".into()));
        }
        Ok(())
    }

    pub fn blocks(&self) -> impl Iterator<Item = &FoldedBlock<T>> {
        self.layers.iter().filter_map(|l| match l {
            FoldedLayer::Block(b) => Some(b),
            _ => None,
        })
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(FoldedLayer::LastDense { n_out, .. }) => *n_out,
            _ => 0,
        }
    }

    /// Same layer sequence and shapes as `spec` (parameters ignored).
    pub fn check_topology(&self, spec: &GraphSpec) -> Result<()> {
        let stages = spec.plan()?;
        let mismatch = |i: usize, what: &str| Error::CheckpointMismatch(format!("model layer {i} differs from spec: {what}"));
        if stages.len() != self.layers.len() || spec.input != self.input {
            return Err(Error::CheckpointMismatch(format!(
                "model has {} layers on {}, spec has {} on {}",
                self.layers.len(),
                self.input,
                stages.len(),
                spec.input
            )));
        }
        for (i, (s, l)) in stages.iter().zip(&self.layers).enumerate() {
            let ok = match (s, l) {
                (Stage::Stem { conv, .. }, FoldedLayer::FirstConv { conv: c, .. }) => conv == c,
                (Stage::Block(p), FoldedLayer::Block(b)) => p.conv == b.conv && p.input == b.input && p.alpha_exp == b.alpha_exp as i32,
                (Stage::Pool { input, .. }, FoldedLayer::AvgPool2x2 { input: i2 }) => input == i2,
                (Stage::Flatten { len }, FoldedLayer::Flatten { len: l2 }) => len == l2,
                (Stage::Head { n_in, n_out }, FoldedLayer::LastDense { n_in: a, n_out: b, .. }) => n_in == a && n_out == b,
                _ => false,
            };
            if !ok {
                return Err(mismatch(i, l.name()));
            }
        }
        Ok(())
    }
}

/// Number of random probes per channel used to spot-check folded thresholds.
const THRESHOLD_PROBES: usize = 64;

/// Check `x >= -xi*beta` against `x/beta + xi >= 0` around the threshold,
/// skipping points too close to it for either side to be meaningful.
fn spot_check_threshold(xi: f64, beta: f64, rng: &mut ChaCha8Rng) -> bool {
    let b = -xi * beta;
    (0..THRESHOLD_PROBES).all(|_| {
        let scale = 10f64.powi(rng.random_range(-6..3));
        let x = b + rng.random_range(-1.0..1.0) * scale;
        if (x - b).abs() <= 1e-9 * b.abs().max(1.0) {
            return true;
        }
        (x >= b) == (x / beta + xi >= 0.0)
    })
}

/// Fold a step-2 state into exact real form. `frac_bits` is recorded for
/// later quantization.
pub fn fold_float(state: &TrainState, spec: &GraphSpec, frac_bits: u8) -> Result<FoldedFloat> {
    if state.phase != Phase::Step2 {
        return Err(Error::Export("only a step-2 state (binary weights) can be folded".into()));
    }
    if frac_bits > 30 {
        return Err(Error::Export(format!("frac_bits {frac_bits} > 30")));
    }
    if let Some(i) = state.betas.iter().position(|b| !(*b > 0.0) || !b.is_finite()) {
        return Err(Error::Export(format!("block{i}: beta {} is not positive", state.betas[i])));
    }
    state.check_against(spec)?;
    let prepared = state.prepare(Phase::Step2, PathMode::Exact)?;
    let layout = &prepared.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut layers_out = Vec::new();
    let mut bi = 0;
    for stage in &prepared.stages {
        match stage {
            Stage::Stem { conv, input, .. } => layers_out.push(FoldedLayer::FirstConv {
                input: *input,
                conv: *conv,
                weight: state.param(layout.stem_weight).to_vec(),
                bias: state.param(layout.stem_bias).to_vec(),
            }),
            Stage::Block(plan) => {
                let slots = &layout.blocks[bi];
                let prep = &prepared.blocks[bi];
                let beta = state.betas[bi];
                let name = format!("block{}", plan.index);
                if !(beta > 0.0) || !beta.is_finite() {
                    return Err(Error::Export(format!("{name}: beta {beta} is not positive")));
                }
                let xi = state.param(slots.sign_bias);
                let mut threshold = Vec::with_capacity(xi.len());
                for (c, &x) in xi.iter().enumerate() {
                    if !spot_check_threshold(x, beta, &mut rng) {
                        return Err(Error::Export(format!("{name}: folded threshold of channel {c} disagrees")));
                    }
                    threshold.push(-x * beta);
                }
                let conv = plan.conv;
                let mut kappa_exp = Vec::with_capacity(conv.c_out);
                for (o, (&m, &e)) in prep.mean_abs.iter().zip(&prep.kappa_exp).enumerate() {
                    if !(m > 0.0) {
                        return Err(Error::DegenerateRow { layer: name.clone(), row: o });
                    }
                    kappa_exp.push(check_exp(e, &format!("{name} kappa[{o}]"))?);
                }
                let mut weights = BitTensor::zeros(vec![conv.c_out, conv.kh, conv.kw, conv.c_in]);
                let w = &prep.sws.standardized;
                for o in 0..conv.c_out {
                    for ci in 0..conv.c_in {
                        for ky in 0..conv.kh {
                            for kx in 0..conv.kw {
                                let src = ((o * conv.c_in + ci) * conv.kh + ky) * conv.kw + kx;
                                let dst = ((o * conv.kh + ky) * conv.kw + kx) * conv.c_in + ci;
                                weights.set(dst, w[src] >= 0.0);
                            }
                        }
                    }
                }
                let slope_exp = match plan.act {
                    ActKind::Quantized => state
                        .param(slots.slope_exp.expect("quantized block has slopes"))
                        .iter()
                        .enumerate()
                        .map(|(c, &a)| check_exp(layers::round_exp(a) as i32, &format!("{name} slope[{c}]")))
                        .collect::<Result<Vec<_>>>()?,
                    ActKind::RLeaky { slope_exp } => vec![check_exp(slope_exp, &name)?; conv.c_out],
                };
                layers_out.push(FoldedLayer::Block(FoldedBlock {
                    alpha_exp: check_exp(plan.alpha_exp, &name)?,
                    input: plan.input,
                    conv,
                    threshold,
                    weights,
                    kappa_exp,
                    act: FoldedAct {
                        slope_exp,
                        xi1: state.param(slots.offset_in).to_vec(),
                        xi2: state.param(slots.offset_out).to_vec(),
                    },
                }));
                bi += 1;
            }
            Stage::Pool { input, .. } => layers_out.push(FoldedLayer::AvgPool2x2 { input: *input }),
            Stage::Flatten { len } => layers_out.push(FoldedLayer::Flatten { len: *len }),
            Stage::Head { n_in, n_out } => layers_out.push(FoldedLayer::LastDense {
                n_in: *n_in,
                n_out: *n_out,
                weight: state.param(layout.head_weight).to_vec(),
                bias: state.param(layout.head_bias).to_vec(),
            }),
        }
    }
    let model = Folded {
        input: spec.input,
        frac_bits,
        layers: layers_out,
    };
    model.validate()?;
    Ok(model)
}

/// Fold and quantize in one go.
pub fn fold(state: &TrainState, spec: &GraphSpec, frac_bits: u8) -> Result<FoldedModel> {
    fold_float(state, spec, frac_bits)?.quantize()
}

fn quantize_all(v: &[f64], f: u8, what: &str) -> Result<Vec<i32>> {
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            bitcore::quantize(x, f).ok_or_else(|| {
                Error::Export(format!("{what}[{i}] = {x} is not representable with {f} fraction bits"))
            })
        })
        .collect()
}

impl FoldedFloat {
    /// Round every constant to fixed point; refuses values out of range.
    pub fn quantize(&self) -> Result<FoldedModel> {
        let f = self.frac_bits;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let q = |v: &[f64], what: &str| quantize_all(v, f, &format!("layer {i} {what}"));
            out.push(match l {
                FoldedLayer::FirstConv { input, conv, weight, bias } => FoldedLayer::FirstConv {
                    input: *input,
                    conv: *conv,
                    weight: q(weight, "weight")?,
                    bias: q(bias, "bias")?,
                },
                FoldedLayer::Block(b) => FoldedLayer::Block(FoldedBlock {
                    alpha_exp: b.alpha_exp,
                    input: b.input,
                    conv: b.conv,
                    threshold: q(&b.threshold, "threshold")?,
                    weights: b.weights.clone(),
                    kappa_exp: b.kappa_exp.clone(),
                    act: FoldedAct {
                        slope_exp: b.act.slope_exp.clone(),
                        xi1: q(&b.act.xi1, "xi1")?,
                        xi2: q(&b.act.xi2, "xi2")?,
                    },
                }),
                FoldedLayer::AvgPool2x2 { input } => FoldedLayer::AvgPool2x2 { input: *input },
                FoldedLayer::Flatten { len } => FoldedLayer::Flatten { len: *len },
                FoldedLayer::LastDense { n_in, n_out, weight, bias } => FoldedLayer::LastDense {
                    n_in: *n_in,
                    n_out: *n_out,
                    weight: q(weight, "weight")?,
                    bias: q(bias, "bias")?,
                },
            });
        }
        Ok(Folded {
            input: self.input,
            frac_bits: f,
            layers: out,
        })
    }
}

/// Result of the exact folded-float forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatRun {
    pub logits: Vec<f64>,
    /// Per block: sign-site inputs and the resulting bits.
    pub sign_inputs: Vec<Vec<f64>>,
    pub signs: Vec<Vec<bool>>,
}

/// `sign(W)` of a block as ±1 in training layout `[c_out, c_in, kh, kw]`.
pub fn unpack_weights(b: &FoldedBlock<impl Sized>) -> Vec<f64> {
    let c = b.conv;
    let mut w = vec![0.0; c.weight_len()];
    for o in 0..c.c_out {
        for ci in 0..c.c_in {
            for ky in 0..c.kh {
                for kx in 0..c.kw {
                    let src = ((o * c.kh + ky) * c.kw + kx) * c.c_in + ci;
                    w[((o * c.c_in + ci) * c.kh + ky) * c.kw + kx] = b.weights.value(src) as f64;
                }
            }
        }
    }
    w
}

/// Forward pass of the folded graph with exponents applied as exact powers
/// of two and unquantized constants.
pub fn run_float(model: &FoldedFloat, x: &[f64]) -> Result<FloatRun> {
    if x.len() != model.input.len() {
        return Err(Error::Shape(format!("input has {} values, model expects {}", x.len(), model.input)));
    }
    let mut cur = x.to_vec();
    let mut run = FloatRun {
        logits: Vec::new(),
        sign_inputs: Vec::new(),
        signs: Vec::new(),
    };
    for l in &model.layers {
        match l {
            FoldedLayer::FirstConv { input, conv, weight, bias } => {
                let out = conv.output(*input)?;
                let plane = out.h * out.w;
                cur = layers::conv2d(&cur, *input, weight, conv, out)
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| v + bias[i / plane])
                    .collect();
            }
            FoldedLayer::Block(b) => {
                let out = b.output();
                let plane = b.input.h * b.input.w;
                let bits: Vec<bool> = cur.iter().enumerate().map(|(i, &v)| v >= b.threshold[i / plane]).collect();
                let s: Vec<f64> = bits.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
                let dots = layers::conv2d(&s, b.input, &unpack_weights(b), &b.conv, out);
                let oplane = out.h * out.w;
                let act: Vec<f64> = dots
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| {
                        let c = i / oplane;
                        let y = d * (b.kappa_exp[c] as f64).exp2();
                        if y >= 0.0 {
                            y
                        } else {
                            (b.act.slope_exp[c] as f64).exp2() * (y + b.act.xi1[c]) + b.act.xi2[c]
                        }
                    })
                    .collect();
                let short = layers::shortcut_forward(&cur, b.input, out)?;
                run.sign_inputs.push(std::mem::replace(&mut cur, layers::nf_residual_combine(&short, &act, b.alpha_exp as i32)?));
                run.signs.push(bits);
            }
            FoldedLayer::AvgPool2x2 { input } => cur = layers::avgpool_forward(&cur, *input)?,
            FoldedLayer::Flatten { .. } => {}
            FoldedLayer::LastDense { n_in, n_out, weight, bias } => {
                cur = (0..*n_out)
                    .map(|o| bias[o] + weight[o * n_in..(o + 1) * n_in].iter().zip(&cur).map(|(w, v)| w * v).sum::<f64>())
                    .collect();
            }
        }
    }
    run.logits = cur;
    Ok(run)
}

impl FoldedModel {
    /// Real-valued view of the quantized constants (for comparisons).
    pub fn dequantize(&self) -> FoldedFloat {
        let f = self.frac_bits;
        let d = |v: &[i32]| v.iter().map(|&r| bitcore::to_real(r, f)).collect::<Vec<f64>>();
        Folded {
            input: self.input,
            frac_bits: f,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    FoldedLayer::FirstConv { input, conv, weight, bias } => FoldedLayer::FirstConv {
                        input: *input,
                        conv: *conv,
                        weight: d(weight),
                        bias: d(bias),
                    },
                    FoldedLayer::Block(b) => FoldedLayer::Block(FoldedBlock {
                        alpha_exp: b.alpha_exp,
                        input: b.input,
                        conv: b.conv,
                        threshold: d(&b.threshold),
                        weights: b.weights.clone(),
                        kappa_exp: b.kappa_exp.clone(),
                        act: FoldedAct {
                            slope_exp: b.act.slope_exp.clone(),
                            xi1: d(&b.act.xi1),
                            xi2: d(&b.act.xi2),
                        },
                    }),
                    FoldedLayer::AvgPool2x2 { input } => FoldedLayer::AvgPool2x2 { input: *input },
                    FoldedLayer::Flatten { len } => FoldedLayer::Flatten { len: *len },
                    FoldedLayer::LastDense { n_in, n_out, weight, bias } => FoldedLayer::LastDense {
                        n_in: *n_in,
                        n_out: *n_out,
                        weight: d(weight),
                        bias: d(bias),
                    },
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn step2_state(name: &str, seed: u64) -> (GraphSpec, TrainState) {
        let spec = bundled::spec(name).unwrap();
        let mut state = TrainState::init(&spec, seed).unwrap();
        state.phase = Phase::Step2;
        // move the per-channel scalars away from their zero init
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut state.params {
            if !p.kind.is_weight_matrix() {
                for v in &mut p.values {
                    *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        (spec, state)
    }

    #[test]
    fn threshold_example() {
        let q = bitcore::quantize(-0.5 * 4.0, 16).unwrap();
        assert_eq!(q, -131072);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(spot_check_threshold(0.5, 4.0, &mut rng));
        assert!(spot_check_threshold(0.0, 7.3, &mut rng));
        assert_eq!(-0.0 * 7.3, 0.0);
    }

    #[test]
    fn folded_float_matches_training_graph() {
        for name in bundled::TOYS {
            let (spec, state) = step2_state(name, 4);
            let model = fold_float(&state, &spec, 16).unwrap();
            let prep = state.prepare(Phase::Step2, PathMode::Exact).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..20 {
                let x: Vec<f64> = (0..spec.input.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                let trace = prep.forward(&state, &x).unwrap();
                let run = run_float(&model, &x).unwrap();
                for (tb, bits) in trace.blocks().zip(&run.signs) {
                    let want: Vec<bool> = tb.signs.iter().map(|&s| s > 0.0).collect();
                    assert_eq!(&want, bits);
                }
                let scale = trace.logits.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (a, b) in trace.logits.iter().zip(&run.logits) {
                    assert!((a - b).abs() <= 1e-9 * scale.max(1.0), "{name}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn fold_contains_only_exponents_and_fixed_point() {
        let (spec, state) = step2_state("toy", 2);
        let m = fold(&state, &spec, 16).unwrap();
        m.validate().unwrap();
        m.check_topology(&spec).unwrap();
        // the quantized model has no float field at all; dequantizing back is
        // within half an LSB
        let exact = fold_float(&state, &spec, 16).unwrap();
        for (a, b) in exact.blocks().zip(m.dequantize().blocks()) {
            for (x, y) in a.threshold.iter().zip(&b.threshold) {
                assert!((x - y).abs() <= 2f64.powi(-17));
            }
        }
    }

    #[test]
    fn fold_rejects_bad_states() {
        let (spec, mut state) = step2_state("toy", 2);
        state.phase = Phase::Step1;
        assert!(matches!(fold(&state, &spec, 16), Err(Error::Export(_))));
        state.phase = Phase::Step2;

        let mut s = state.clone();
        s.betas[1] = 0.0;
        assert!(matches!(fold(&s, &spec, 16), Err(Error::Export(_))));

        let layout = state.layout();
        let mut s = state.clone();
        let w = layout.blocks[0].weight;
        let n = s.params[w].values.len() / 4;
        s.params[w].values[2 * n..3 * n].iter_mut().for_each(|v| *v = 0.25);
        match fold(&s, &spec, 16) {
            Err(Error::DegenerateRow { layer, row }) => assert_eq!((layer.as_str(), row), ("block0", 2)),
            other => panic!("{other:?}"),
        }

        let mut s = state.clone();
        s.params[layout.blocks[0].offset_in].values[0] = 1e9;
        assert!(matches!(fold(&s, &spec, 16), Err(Error::Export(_))));

        let mut s = state.clone();
        s.params[layout.blocks[0].slope_exp.unwrap()].values[0] = 40.0;
        assert!(matches!(fold(&s, &spec, 16), Err(Error::Export(_))));
    }

    #[test]
    fn zero_bias_folds_to_zero_threshold() {
        let (spec, mut state) = step2_state("toy", 2);
        let i = state.layout().blocks[0].sign_bias;
        state.params[i].values.iter_mut().for_each(|v| *v = 0.0);
        let m = fold(&state, &spec, 16).unwrap();
        assert!(m.blocks().next().unwrap().threshold.iter().all(|&b| b == 0));
    }
}
