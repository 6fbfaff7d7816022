//! Fixed-point execution of a [`FoldedModel`] using XNOR-popcount, adds,
//! compares and shifts, with every arithmetic operation counted.
//!
//! All arithmetic goes through [`Alu`], so each op class has exactly one
//! place where it is counted. Only the boundary layers (stem and head) ever
//! call [`Alu::mul`]; with `strict` they expand each product into shifts
//! and adds over the set bits of the weight instead.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::bitcore::{self, BitTensor, FixedTensor};
use crate::data::IdxArray;
use crate::error::{Error, Result};
use crate::exporter::{FoldedBlock, FoldedLayer, FoldedModel};
use crate::nfgraph::network::{PathMode, Phase, TrainState};
use crate::nfgraph::{ConvGeom, GraphSpec, Shape3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounters {
    pub multiplications: u64,
    pub additions: u64,
    pub shifts: u64,
    /// 64-bit word XNOR+popcount operations.
    pub xnor_popcounts: u64,
    pub comparisons: u64,
    pub saturations: u64,
}

impl OpCounters {
    pub fn minus(&self, o: &OpCounters) -> OpCounters {
        OpCounters {
            multiplications: self.multiplications - o.multiplications,
            additions: self.additions - o.additions,
            shifts: self.shifts - o.shifts,
            xnor_popcounts: self.xnor_popcounts - o.xnor_popcounts,
            comparisons: self.comparisons - o.comparisons,
            saturations: self.saturations - o.saturations,
        }
    }

    pub fn plus(&self, o: &OpCounters) -> OpCounters {
        OpCounters {
            multiplications: self.multiplications + o.multiplications,
            additions: self.additions + o.additions,
            shifts: self.shifts + o.shifts,
            xnor_popcounts: self.xnor_popcounts + o.xnor_popcounts,
            comparisons: self.comparisons + o.comparisons,
            saturations: self.saturations + o.saturations,
        }
    }

    /// Componentwise `self <= o`.
    pub fn le(&self, o: &OpCounters) -> bool {
        self.multiplications <= o.multiplications
            && self.additions <= o.additions
            && self.shifts <= o.shifts
            && self.xnor_popcounts <= o.xnor_popcounts
            && self.comparisons <= o.comparisons
            && self.saturations <= o.saturations
    }
}

/// Counting arithmetic unit.
#[derive(Debug, Default)]
pub struct Alu {
    pub c: OpCounters,
}

impl Alu {
    pub fn add(&mut self, a: i64, b: i64) -> i64 {
        self.c.additions += 1;
        a.saturating_add(b)
    }

    pub fn sub(&mut self, a: i64, b: i64) -> i64 {
        self.c.additions += 1;
        a.saturating_sub(b)
    }

    /// Arithmetic shift (left for `k > 0`, flooring right for `k < 0`).
    pub fn shift(&mut self, v: i64, k: i32) -> i64 {
        self.c.shifts += 1;
        bitcore::shift_i64(v, k)
    }

    /// `a >= b`.
    pub fn ge(&mut self, a: i32, b: i32) -> bool {
        self.c.comparisons += 1;
        a >= b
    }

    pub fn is_neg(&mut self, a: i32) -> bool {
        self.c.comparisons += 1;
        a < 0
    }

    /// Bit-packed ±1 dot product: one XNOR+popcount per word, popcounts
    /// summed, then `2*matches - n` (one shift, one subtraction).
    pub fn xnor_dot(&mut self, a: &[u64], b: &[u64], n: usize) -> i64 {
        let words = a.len() as u64;
        self.c.xnor_popcounts += words;
        self.c.additions += words.saturating_sub(1) + 1;
        self.c.shifts += 1;
        bitcore::xnor_dot_unchecked(a, b, n)
    }

    pub fn mul(&mut self, a: i64, b: i64) -> i128 {
        self.c.multiplications += 1;
        a as i128 * b as i128
    }

    /// `a * b` as a sum of shifted copies of `a`, one per set bit of `|b|`.
    pub fn mul_shift_add(&mut self, a: i64, b: i64) -> i128 {
        let mut mag = b.unsigned_abs();
        let mut acc: i128 = 0;
        let mut k = 0;
        while mag != 0 {
            if mag & 1 == 1 {
                self.c.shifts += 1;
                self.c.additions += 1;
                acc += (a as i128) << k;
            }
            mag >>= 1;
            k += 1;
        }
        if b < 0 {
            self.c.additions += 1;
            acc = -acc;
        }
        acc
    }

    pub fn store(&mut self, v: i64) -> i32 {
        bitcore::saturate(v, &mut self.c.saturations)
    }

    fn store_wide(&mut self, v: i128) -> i32 {
        let clamped = v.clamp(i64::MIN as i128, i64::MAX as i128) as i64;
        self.store(clamped)
    }
}

/// Counters after one layer (cumulative).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCount {
    pub layer: String,
    pub boundary: bool,
    pub after: OpCounters,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignSite {
    pub inputs: Vec<i32>,
    pub bits: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub logits: FixedTensor,
    pub counters: OpCounters,
    /// Part of `counters` spent in the stem and head.
    pub boundary: OpCounters,
    pub per_layer: Vec<LayerCount>,
    /// Sign-site inputs and bits per block when traced.
    pub sites: Vec<SignSite>,
}

impl Inference {
    pub fn non_boundary(&self) -> OpCounters {
        self.counters.minus(&self.boundary)
    }

    pub fn argmax(&self) -> usize {
        let v = &self.logits.values;
        (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
    }

    /// Indices of the `k` largest logits, best first (ties by index).
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let f = self.logits.frac_bits;
        let mut idx: Vec<usize> = (0..self.logits.values.len()).collect();
        idx.sort_by(|&a, &b| self.logits.values[b].cmp(&self.logits.values[a]).then(a.cmp(&b)));
        idx.into_iter().take(k).map(|i| (i, bitcore::to_real(self.logits.values[i], f))).collect()
    }
}

fn boundary_product(alu: &mut Alu, a: i32, w: i32, strict: bool) -> i128 {
    if strict {
        alu.mul_shift_add(a as i64, w as i64)
    } else {
        alu.mul(a as i64, w as i64)
    }
}

fn first_conv(alu: &mut Alu, x: &[i32], input: Shape3, conv: &ConvGeom, w: &[i32], b: &[i32], f: u8, strict: bool) -> Result<Vec<i32>> {
    let out = conv.output(input)?;
    let mut y = Vec::with_capacity(out.len());
    for co in 0..conv.c_out {
        let wrow = &w[co * conv.fan_in()..(co + 1) * conv.fan_in()];
        for oy in 0..out.h {
            for ox in 0..out.w {
                let mut acc: i128 = 0;
                for ci in 0..conv.c_in {
                    for ky in 0..conv.kh {
                        let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        if iy < 0 || iy >= input.h as isize {
                            continue;
                        }
                        for kx in 0..conv.kw {
                            let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                            if ix < 0 || ix >= input.w as isize {
                                continue;
                            }
                            let v = x[(ci * input.h + iy as usize) * input.w + ix as usize];
                            let p = boundary_product(alu, v, wrow[(ci * conv.kh + ky) * conv.kw + kx], strict);
                            alu.c.additions += 1;
                            acc += p;
                        }
                    }
                }
                alu.c.shifts += 1;
                alu.c.additions += 1;
                let r = (acc >> f) + b[co] as i128;
                y.push(alu.store_wide(r));
            }
        }
    }
    Ok(y)
}

fn last_dense(alu: &mut Alu, x: &[i32], n_in: usize, n_out: usize, w: &[i32], b: &[i32], f: u8, strict: bool) -> Vec<i32> {
    (0..n_out)
        .map(|o| {
            let mut acc: i128 = 0;
            for (v, wv) in x.iter().zip(&w[o * n_in..(o + 1) * n_in]) {
                let p = boundary_product(alu, *v, *wv, strict);
                alu.c.additions += 1;
                acc += p;
            }
            alu.c.shifts += 1;
            alu.c.additions += 1;
            alu.store_wide((acc >> f) + b[o] as i128)
        })
        .collect()
}

fn avgpool(alu: &mut Alu, x: &[i32], s: Shape3) -> Vec<i32> {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.c * oh * ow);
    for c in 0..s.c {
        let p = &x[c * s.h * s.w..];
        for oy in 0..oh {
            for ox in 0..ow {
                let (r0, r1) = (2 * oy * s.w + 2 * ox, (2 * oy + 1) * s.w + 2 * ox);
                let t = alu.add(p[r0] as i64, p[r0 + 1] as i64);
                let t = alu.add(t, p[r1] as i64);
                let t = alu.add(t, p[r1 + 1] as i64);
                let t = alu.shift(t, -2);
                out.push(alu.store(t));
            }
        }
    }
    out
}

/// Binary convolution on packed signs: `act` holds one row of `c_in` bits
/// per input pixel (`[h, w, c_in]`), `weights` one row per tap
/// (`[c_out, kh, kw, c_in]`). Each output is the integer ±1 dot product over
/// the in-bounds taps shifted into fixed point by `frac_bits + kappa_exp[o]`
/// (64-bit, before saturation), in `[c_out, h_out, w_out]` order.
pub fn binconv_fixed(
    alu: &mut Alu,
    act: &BitTensor,
    input: Shape3,
    weights: &BitTensor,
    conv: &ConvGeom,
    kappa_exp: &[i8],
    frac_bits: u8,
) -> Vec<i64> {
    let out = conv.output(input).expect("validated geometry");
    let mut y = Vec::with_capacity(out.len());
    for o in 0..conv.c_out {
        let shift = frac_bits as i32 + kappa_exp[o] as i32;
        for oy in 0..out.h {
            for ox in 0..out.w {
                let mut d: i64 = 0;
                for ky in 0..conv.kh {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for kx in 0..conv.kw {
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if ix < 0 || ix >= input.w as isize {
                            continue;
                        }
                        let arow = act.row(iy as usize * input.w + ix as usize);
                        let wrow = weights.row((o * conv.kh + ky) * conv.kw + kx);
                        let t = alu.xnor_dot(arow, wrow, conv.c_in);
                        d = alu.add(d, t);
                    }
                }
                y.push(alu.shift(d, shift));
            }
        }
    }
    y
}

fn block(alu: &mut Alu, x: &[i32], b: &FoldedBlock<i32>, f: u8, site: Option<&mut Vec<SignSite>>) -> Vec<i32> {
    let input = b.input;
    let out = b.output();
    let plane = input.h * input.w;

    // threshold compare into HWC bit rows (one row of c_in bits per pixel)
    let mut bits = BitTensor::zeros(vec![input.h, input.w, input.c]);
    let mut flags = Vec::new();
    for c in 0..input.c {
        for p in 0..plane {
            let pos = alu.ge(x[c * plane + p], b.threshold[c]);
            bits.set(p * input.c + c, pos);
        }
    }
    if let Some(sites) = site {
        flags.extend((0..x.len()).map(|i| bits.get((i % plane) * input.c + i / plane)));
        sites.push(SignSite {
            inputs: x.to_vec(),
            bits: flags,
        });
    }

    let dots = binconv_fixed(alu, &bits, input, &b.weights, &b.conv, &b.kappa_exp, f);
    let oplane = out.h * out.w;
    let mut branch = Vec::with_capacity(out.len());
    for (i, d) in dots.into_iter().enumerate() {
        let o = i / oplane;
        let y = alu.store(d);
        let v = if alu.is_neg(y) {
            let t = alu.add(y as i64, b.act.xi1[o] as i64);
            let t = alu.store(t);
            let t = alu.shift(t as i64, b.act.slope_exp[o] as i32);
            let t = alu.store(t);
            let t = alu.add(t as i64, b.act.xi2[o] as i64);
            alu.store(t)
        } else {
            y
        };
        branch.push(v);
    }

    let pooled;
    let short_src = if out.h != input.h {
        pooled = avgpool(alu, x, input);
        &pooled
    } else {
        x
    };
    let src_len = short_src.len();
    (0..out.len())
        .map(|i| {
            let br = alu.shift(branch[i] as i64, b.alpha_exp as i32);
            let br = alu.store(br);
            let s = alu.add(short_src[i % src_len] as i64, br as i64);
            alu.store(s)
        })
        .collect()
}

fn run(model: &FoldedModel, input: &FixedTensor, strict: bool, trace: bool) -> Result<Inference> {
    if input.frac_bits != model.frac_bits {
        return Err(Error::Contract(format!(
            "input has {} fraction bits, model uses {}",
            input.frac_bits, model.frac_bits
        )));
    }
    if input.values.len() != model.input.len() {
        return Err(Error::Shape(format!(
            "input has {} values, model expects {}",
            input.values.len(),
            model.input
        )));
    }
    let f = model.frac_bits;
    let mut alu = Alu::default();
    let mut boundary = OpCounters::default();
    let mut per_layer = Vec::with_capacity(model.layers.len());
    let mut sites = Vec::new();
    let mut cur = input.values.clone();
    for l in &model.layers {
        let before = alu.c;
        cur = match l {
            FoldedLayer::FirstConv { input, conv, weight, bias } => first_conv(&mut alu, &cur, *input, conv, weight, bias, f, strict)?,
            FoldedLayer::Block(b) => block(&mut alu, &cur, b, f, trace.then_some(&mut sites)),
            FoldedLayer::AvgPool2x2 { input } => avgpool(&mut alu, &cur, *input),
            FoldedLayer::Flatten { .. } => cur,
            FoldedLayer::LastDense { n_in, n_out, weight, bias } => last_dense(&mut alu, &cur, *n_in, *n_out, weight, bias, f, strict),
        };
        if l.is_boundary() {
            boundary = boundary.plus(&alu.c.minus(&before));
        }
        per_layer.push(LayerCount {
            layer: l.name().to_string(),
            boundary: l.is_boundary(),
            after: alu.c,
        });
    }
    let n = cur.len();
    Ok(Inference {
        logits: FixedTensor::new(vec![n], cur, f)?,
        counters: alu.c,
        boundary,
        per_layer,
        sites,
    })
}

/// Run the model on one fixed-point input.
pub fn infer(model: &FoldedModel, input: &FixedTensor, strict: bool) -> Result<Inference> {
    run(model, input, strict, false)
}

/// [`infer`] that also records the input and output of every sign site.
pub fn infer_traced(model: &FoldedModel, input: &FixedTensor, strict: bool) -> Result<Inference> {
    run(model, input, strict, true)
}

/// Quantize a real image for the model; refuses values out of range.
pub fn quantize_input(model: &FoldedModel, x: &[f64]) -> Result<FixedTensor> {
    let f = model.frac_bits;
    let values = x
        .iter()
        .map(|&v| bitcore::quantize(v, f).ok_or_else(|| Error::Data(format!("input value {v} not representable at F={f}"))))
        .collect::<Result<Vec<_>>>()?;
    FixedTensor::new(vec![model.input.c, model.input.h, model.input.w], values, f)
}

pub const FLAT_MAGIC: &[u8; 4] = b"ABFX";

/// Flat input file: `"ABFX" | u8 frac_bits | u8 ndims | u16 reserved |
/// u32 dims[ndims] | i32 raw values`, little-endian, no checksum.
pub fn write_flat(t: &FixedTensor, path: impl AsRef<Path>) -> Result<()> {
    let mut b = Vec::new();
    b.extend_from_slice(FLAT_MAGIC);
    b.push(t.frac_bits);
    b.push(t.shape.len() as u8);
    b.extend_from_slice(&0u16.to_le_bytes());
    for &d in &t.shape {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.values {
        b.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path.as_ref(), b).map_err(|e| Error::io(path, e))
}

pub fn flat_from_bytes(b: &[u8]) -> Result<FixedTensor> {
    let eof = || Error::UnexpectedEof { section: "flat input".into() };
    if b.len() < 8 {
        return Err(eof());
    }
    if &b[..4] != FLAT_MAGIC {
        return Err(Error::format("flat input", "bad magic, expected ABFX"));
    }
    let (f, nd) = (b[4], b[5] as usize);
    let dims_end = 8 + 4 * nd;
    if b.len() < dims_end {
        return Err(eof());
    }
    let shape: Vec<usize> = b[8..dims_end].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let n: usize = shape.iter().product();
    if b.len() != dims_end + 4 * n {
        return Err(if b.len() < dims_end + 4 * n {
            eof()
        } else {
            Error::format("flat input", "trailing bytes")
        });
    }
    let values = b[dims_end..].chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
    FixedTensor::new(shape, values, f).map_err(|e| Error::format("flat input", e.to_string()))
}

/// Load one or more inputs for `model`: an `ABFX` file (raw values at the
/// model's F) or an IDX tensor of real values (`[c,h,w]` or `[n,c,h,w]`;
/// unsigned bytes are scaled to [0, 1]).
pub fn load_inputs(model: &FoldedModel, path: impl AsRef<Path>) -> Result<Vec<FixedTensor>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let per = model.input.len();
    let (f, values): (u8, Vec<i32>) = if bytes.starts_with(FLAT_MAGIC) {
        let t = flat_from_bytes(&bytes)?;
        (t.frac_bits, t.values)
    } else {
        let idx = IdxArray::from_bytes(&bytes)?;
        let real = idx.data.to_f64();
        let vals = real
            .iter()
            .map(|&v| bitcore::quantize(v, model.frac_bits).ok_or_else(|| Error::Data(format!("input value {v} out of range"))))
            .collect::<Result<Vec<_>>>()?;
        (model.frac_bits, vals)
    };
    if f != model.frac_bits {
        return Err(Error::Data(format!("input written at F={f}, model uses F={}", model.frac_bits)));
    }
    if per == 0 || values.len() % per != 0 || values.is_empty() {
        return Err(Error::Data(format!(
            "{}: {} values is not a whole number of {} inputs",
            path.display(),
            values.len(),
            model.input
        )));
    }
    values
        .chunks(per)
        .map(|c| FixedTensor::new(vec![model.input.c, model.input.h, model.input.w], c.to_vec(), f))
        .collect()
}

/// Equivalence report between the training graph and the engine.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub probes: usize,
    pub sign_sites: u64,
    /// Engine signs equal to training-graph signs (`None` without probes).
    pub sign_agreement: Option<f64>,
    /// Sites where the engine's own input compares differently against the
    /// fixed-point and the real threshold.
    pub threshold_flips: u64,
    /// Largest `|x - b_real|` over those flips.
    pub max_flip_distance: f64,
    pub flip_bound: f64,
    pub logit_max_abs: Option<f64>,
    pub logit_max_rel: Option<f64>,
    pub argmax_agreement: Option<f64>,
    pub counters: OpCounters,
    pub non_boundary_multiplications: u64,
    /// True if logits diverged (relative deviation over `DIVERGENCE_REL` or
    /// argmax agreement under 99%).
    pub diverged: bool,
}

pub const DIVERGENCE_REL: f64 = 0.05;

impl VerifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain record")
    }

    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map(|x| format!("{:.4}%", 100.0 * x)).unwrap_or_else(|| "n/a".into());
        let num = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_else(|| "n/a".into());
        format!(
            "probes: {}\nsign sites: {}\nsign agreement: {}\nthreshold flips: {} (max distance {:.3e}, bound {:.3e})\n\
             logit max abs dev: {}\nlogit max rel dev: {}\nargmax agreement: {}\nmultiplications: {} (non-boundary {})\n\
             additions: {}\nshifts: {}\nxnor_popcounts: {}\ncomparisons: {}\nsaturations: {}\ndiverged: {}\n",
            self.probes,
            self.sign_sites,
            pct(self.sign_agreement),
            self.threshold_flips,
            self.max_flip_distance,
            self.flip_bound,
            num(self.logit_max_abs),
            num(self.logit_max_rel),
            pct(self.argmax_agreement),
            self.counters.multiplications,
            self.non_boundary_multiplications,
            self.counters.additions,
            self.counters.shifts,
            self.counters.xnor_popcounts,
            self.counters.comparisons,
            self.counters.saturations,
            self.diverged
        )
    }
}

fn argmax_f(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

/// Compare engine and training graph on `n_probes` seeded N(0,1) inputs.
pub fn verify(model: &FoldedModel, state: &TrainState, spec: &GraphSpec, n_probes: usize, seed: u64, strict: bool) -> Result<VerifyReport> {
    model.check_topology(spec)?;
    state.check_against(spec)?;
    let exact = crate::exporter::fold_float(state, spec, model.frac_bits)?;
    let thresholds: Vec<&Vec<f64>> = exact.blocks().map(|b| &b.threshold).collect();
    let prep = state.prepare(Phase::Step2, PathMode::Exact)?;
    let f = model.frac_bits;
    let mut rep = VerifyReport {
        probes: n_probes,
        flip_bound: 2f64.powi(-(f as i32) - 1),
        ..Default::default()
    };
    if n_probes == 0 {
        return Ok(rep);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut agree, mut arg_agree) = (0u64, 0usize);
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for _ in 0..n_probes {
        let x: Vec<f64> = (0..model.input.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let xq = quantize_input(model, &x)?;
        let xr: Vec<f64> = xq.values.iter().map(|&r| bitcore::to_real(r, f)).collect();
        let trace = prep.forward(state, &xr)?;
        let inf = infer_traced(model, &xq, strict)?;
        for ((tb, site), thr) in trace.blocks().zip(&inf.sites).zip(&thresholds) {
            let plane = site.inputs.len() / thr.len();
            for (i, (&s, &bit)) in tb.signs.iter().zip(&site.bits).enumerate() {
                rep.sign_sites += 1;
                agree += ((s > 0.0) == bit) as u64;
                let xv = bitcore::to_real(site.inputs[i], f);
                let b = thr[i / plane];
                if (xv >= b) != bit {
                    rep.threshold_flips += 1;
                    rep.max_flip_distance = rep.max_flip_distance.max((xv - b).abs());
                }
            }
        }
        let logits: Vec<f64> = inf.logits.values.iter().map(|&r| bitcore::to_real(r, f)).collect();
        let scale = trace.logits.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let dev = logits.iter().zip(&trace.logits).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        max_abs = max_abs.max(dev);
        max_rel = max_rel.max(dev / scale);
        arg_agree += (argmax_f(&logits) == argmax_f(&trace.logits)) as usize;
        rep.counters = rep.counters.plus(&inf.counters);
        rep.non_boundary_multiplications += inf.non_boundary().multiplications;
    }
    rep.sign_agreement = Some(if rep.sign_sites == 0 { 1.0 } else { agree as f64 / rep.sign_sites as f64 });
    rep.logit_max_abs = Some(max_abs);
    rep.logit_max_rel = Some(max_rel);
    rep.argmax_agreement = Some(arg_agree as f64 / n_probes as f64);
    rep.diverged = max_rel > DIVERGENCE_REL || arg_agree * 100 < n_probes * 99;
    Ok(rep)
}
