//! Static count of the full-precision multiplications a normalizer-free
//! BNN needs at its alpha, beta, PReLU and average-pool sites, and the same
//! walk for the shift-only (A&B) variant where every such site is a shift
//! or folded into a threshold.
//!
//! Site conventions:
//! - beta divides the block input, so it counts `c_in*h_in*w_in`;
//! - alpha and the PReLU slope act on the block output, `c_out*h_out*w_out`;
//! - a downsampling shortcut pools the input before the channel repeat,
//!   `c_in*h_out*w_out`; a standalone pool counts its own output;
//! - the stem and head are boundary layers and are not counted.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nfgraph::layers;
use crate::nfgraph::network::{PathMode, TrainState};
use crate::nfgraph::{GraphSpec, Shape3, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    ActivationScaling,
    BatchNorm,
    Prelu,
    RealResidual,
    AvgPool,
    Alpha,
    Beta,
}

impl Technique {
    pub fn name(self) -> &'static str {
        match self {
            Technique::ActivationScaling => "activation_scaling",
            Technique::BatchNorm => "batch_norm",
            Technique::Prelu => "prelu",
            Technique::RealResidual => "real_residual",
            Technique::AvgPool => "avg_pool",
            Technique::Alpha => "alpha",
            Technique::Beta => "beta",
        }
    }
}

/// Symbols a formula may need; unset ones are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dims {
    pub c: Option<u64>,
    pub h: Option<u64>,
    pub w: Option<u64>,
    pub c_in: Option<u64>,
    pub c_out: Option<u64>,
    pub h_out: Option<u64>,
    pub w_out: Option<u64>,
    pub k_h: Option<u64>,
    pub k_w: Option<u64>,
}

impl Dims {
    pub fn chw(c: usize, h: usize, w: usize) -> Self {
        Dims {
            c: Some(c as u64),
            h: Some(h as u64),
            w: Some(w as u64),
            ..Default::default()
        }
    }

    pub fn pool(c_out: usize, h_out: usize, w_out: usize) -> Self {
        Dims {
            c_out: Some(c_out as u64),
            h_out: Some(h_out as u64),
            w_out: Some(w_out as u64),
            ..Default::default()
        }
    }
}

fn need(v: Option<u64>, name: &str, t: Technique) -> Result<u64> {
    v.ok_or_else(|| Error::Contract(format!("{} needs dimension `{name}`", t.name())))
}

/// Multiplication operands introduced by one technique.
pub fn mo_formula(t: Technique, d: &Dims) -> Result<u64> {
    let n = |v, s| need(v, s, t);
    Ok(match t {
        Technique::ActivationScaling => (n(d.c, "c")? + 1) * n(d.h, "h")? * n(d.w, "w")?,
        Technique::BatchNorm | Technique::Prelu | Technique::Alpha | Technique::Beta => n(d.c, "c")? * n(d.h, "h")? * n(d.w, "w")?,
        Technique::RealResidual => {
            n(d.c_in, "c_in")? * n(d.c_out, "c_out")? * n(d.h_out, "h_out")? * n(d.w_out, "w_out")? * n(d.k_h, "k_h")? * n(d.k_w, "k_w")?
        }
        Technique::AvgPool => n(d.c_out, "c_out")? * n(d.h_out, "h_out")? * n(d.w_out, "w_out")?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Normalizer-free BNN with real-valued scales.
    BnFree,
    /// Every scale a power of two, thresholds folded.
    Ab,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bnfree" | "bn_free" => Ok(Variant::BnFree),
            "ab" | "a&b" => Ok(Variant::Ab),
            _ => Err(Error::Config(format!("unknown variant `{s}` (expected bnfree or ab)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Implementation {
    Multiply,
    Shift,
    Folded,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MoEntry {
    pub layer: String,
    pub technique: Technique,
    pub formula: String,
    pub implementation: Implementation,
    /// Operand count of the site (what the BN-Free variant multiplies).
    pub operands: u64,
    /// Multiplications charged in this variant.
    pub mo: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MoReport {
    pub variant: Variant,
    pub input: [usize; 3],
    pub entries: Vec<MoEntry>,
    pub totals: BTreeMap<&'static str, u64>,
    pub grand_total: u64,
}

impl MoReport {
    /// Share of each technique in the BN-Free operand count.
    pub fn ratios(&self) -> BTreeMap<&'static str, f64> {
        let mut ops: BTreeMap<&'static str, u64> = BTreeMap::new();
        for e in &self.entries {
            *ops.entry(e.technique.name()).or_default() += e.operands;
        }
        let total: u64 = ops.values().sum();
        ops.into_iter().map(|(k, v)| (k, if total == 0 { 0.0 } else { v as f64 / total as f64 })).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s += &serde_json::to_string(e).expect("plain record");
            s.push('\n');
        }
        let summary = serde_json::json!({
            "variant": self.variant,
            "input": self.input,
            "totals": self.totals,
            "grand_total": self.grand_total,
            "ratios": self.ratios(),
        });
        s += &summary.to_string();
        s.push('\n');
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:<12} {:<10} {:>12}  formula", "layer", "technique", "impl", "MO");
        for e in &self.entries {
            let imp = match e.implementation {
                Implementation::Multiply => "multiply",
                Implementation::Shift => "shift",
                Implementation::Folded => "folded",
            };
            let _ = writeln!(s, "{:<10} {:<12} {:<10} {:>12}  {}", e.layer, e.technique.name(), imp, e.mo, e.formula);
        }
        let _ = writeln!(s, "--");
        let ratios = self.ratios();
        for (k, v) in &self.totals {
            let _ = writeln!(s, "{k:<12} {v:>12}  ({:.1}% of operands)", 100.0 * ratios.get(k).copied().unwrap_or(0.0));
        }
        let _ = writeln!(s, "total MO     {:>12}  ({:.3} M)", self.grand_total, self.grand_total as f64 / 1e6);
        s
    }
}

fn site(entries: &mut Vec<MoEntry>, variant: Variant, layer: &str, t: Technique, d: Dims, formula: String) -> Result<()> {
    let operands = mo_formula(t, &d)?;
    let implementation = match (variant, t) {
        (Variant::BnFree, _) => Implementation::Multiply,
        (Variant::Ab, Technique::Beta) => Implementation::Folded,
        (Variant::Ab, _) => Implementation::Shift,
    };
    entries.push(MoEntry {
        layer: layer.to_string(),
        technique: t,
        formula: format!("{formula} = {operands}"),
        implementation,
        operands,
        mo: if implementation == Implementation::Multiply { operands } else { 0 },
    });
    Ok(())
}

/// Audit a planned stage list.
pub fn audit_stages(stages: &[Stage], variant: Variant, input: Shape3) -> Result<MoReport> {
    let mut entries = Vec::new();
    let mut pool_i = 0;
    for stage in stages {
        match stage {
            Stage::Block(b) => {
                let name = format!("block{}", b.index);
                let (i, o) = (b.input, b.output);
                site(&mut entries, variant, &name, Technique::Beta, Dims::chw(i.c, i.h, i.w), format!("c·h·w {}·{}·{}", i.c, i.h, i.w))?;
                site(&mut entries, variant, &name, Technique::Prelu, Dims::chw(o.c, o.h, o.w), format!("c·h·w {}·{}·{}", o.c, o.h, o.w))?;
                site(&mut entries, variant, &name, Technique::Alpha, Dims::chw(o.c, o.h, o.w), format!("c·h·w {}·{}·{}", o.c, o.h, o.w))?;
                if b.downsamples() {
                    site(
                        &mut entries,
                        variant,
                        &name,
                        Technique::AvgPool,
                        Dims::pool(i.c, o.h, o.w),
                        format!("c_out·h_out·w_out {}·{}·{}", i.c, o.h, o.w),
                    )?;
                }
            }
            Stage::Pool { output, .. } => {
                let name = format!("pool{pool_i}");
                pool_i += 1;
                site(
                    &mut entries,
                    variant,
                    &name,
                    Technique::AvgPool,
                    Dims::pool(output.c, output.h, output.w),
                    format!("c_out·h_out·w_out {}·{}·{}", output.c, output.h, output.w),
                )?;
            }
            Stage::Stem { .. } | Stage::Flatten { .. } | Stage::Head { .. } => {}
        }
    }
    let mut totals = BTreeMap::new();
    for e in &entries {
        *totals.entry(e.technique.name()).or_insert(0) += e.mo;
    }
    let grand_total = entries.iter().map(|e| e.mo).sum();
    Ok(MoReport {
        variant,
        input: [input.c, input.h, input.w],
        entries,
        totals,
        grand_total,
    })
}

/// Audit `spec` at an input resolution (`None` keeps the spec's own).
pub fn audit_graph(spec: &GraphSpec, variant: Variant, input_hw: Option<(usize, usize)>) -> Result<MoReport> {
    let input = match input_hw {
        Some((h, w)) => Shape3::new(spec.input.c, h, w),
        None => spec.input,
    };
    let stages = spec.plan_at(input, input == spec.input)?;
    audit_stages(&stages, variant, input)
}

/// Float forward pass of a BN-Free network that multiplies at every alpha,
/// beta, PReLU and pool site, counting those multiplications as it goes.
/// Returns the logits and the count.
pub fn reference_bnfree_forward(state: &TrainState, x: &[f64]) -> Result<(Vec<f64>, u64)> {
    let prep = state.prepare(state.phase, PathMode::Exact)?;
    let layout = &prep.layout;
    let mut mults = 0u64;
    let mut cur = x.to_vec();
    let mut bi = 0;
    for stage in &prep.stages {
        match stage {
            Stage::Stem { conv, input, output } => {
                if cur.len() != input.len() {
                    return Err(Error::Shape(format!("input has {} values, graph expects {input}", cur.len())));
                }
                let b = state.param(layout.stem_bias);
                let plane = output.h * output.w;
                cur = layers::conv2d(&cur, *input, state.param(layout.stem_weight), conv, *output)
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| v + b[i / plane])
                    .collect();
            }
            Stage::Block(plan) => {
                let slots = &layout.blocks[bi];
                let beta = state.betas[bi];
                let xi = state.param(slots.sign_bias);
                let plane = plan.input.h * plan.input.w;
                let signs: Vec<f64> = cur
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        mults += 1;
                        crate::bitcore::sign(v / beta + xi[i / plane])
                    })
                    .collect();
                let y = layers::conv2d(&signs, plan.input, &prep.blocks[bi].effective, &plan.conv, plan.output);
                let oplane = plan.output.h * plan.output.w;
                let a = slots.slope_exp.map(|i| state.param(i)).unwrap_or(&[]);
                let (xi1, xi2) = (state.param(slots.offset_in), state.param(slots.offset_out));
                let act: Vec<f64> = y
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let c = i / oplane;
                        let slope = layers::act_slope(plan.act, a.get(c).copied().unwrap_or(0.0), false);
                        mults += 1;
                        let neg = slope * (v + xi1[c]) + xi2[c];
                        if v >= 0.0 {
                            v
                        } else {
                            neg
                        }
                    })
                    .collect();
                let pooled = if plan.downsamples() {
                    let p = layers::avgpool_forward(&cur, plan.input)?;
                    mults += p.len() as u64;
                    p
                } else {
                    cur.clone()
                };
                let alpha = (plan.alpha_exp as f64).exp2();
                cur = act
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        mults += 1;
                        pooled[i % pooled.len()] + alpha * v
                    })
                    .collect();
                bi += 1;
            }
            Stage::Pool { input, .. } => {
                cur = layers::avgpool_forward(&cur, *input)?;
                mults += cur.len() as u64;
            }
            Stage::Flatten { .. } => {}
            Stage::Head { n_in, n_out } => {
                let w = state.param(layout.head_weight);
                let b = state.param(layout.head_bias);
                cur = (0..*n_out)
                    .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
            }
        }
    }
    Ok((cur, mults))
}
