//! `ABNN` model file.
//!
//! ```text
//! "ABNN" | u32 version=1 | u8 frac_bits | u8 flags=0 | u16 reserved=0
//! u32 layer_count
//! per layer: u8 tag | u32 block_len | block
//! u32 crc32 (IEEE) over all preceding bytes
//! ```
//!
//! Blocks (shapes are u32, exponents i8, constants raw i32, bits u64
//! LSB-first with zero padding):
//!
//! | tag | layer       | block                                                               |
//! |-----|-------------|---------------------------------------------------------------------|
//! | 0   | input       | c h w                                                               |
//! | 1   | first_conv  | c_in c_out kh kw stride pad, weight[c_out*c_in*kh*kw], bias[c_out]  |
//! | 2   | block       | c_in c_out kh kw stride pad, h w, alpha_exp, threshold[c_in], kappa_exp[c_out], n_words, bits, slope_exp[c_out], xi1[c_out], xi2[c_out] |
//! | 3   | avgpool2x2  | c h w                                                               |
//! | 4   | flatten     | len                                                                 |
//! | 5   | last_dense  | n_in n_out, weight[n_out*n_in], bias[n_out]                         |
//!
//! The input layer is the first entry and is counted in `layer_count`.

use std::path::Path;

use super::{FoldedAct, FoldedBlock, FoldedLayer, FoldedModel, MAX_EXP};
use crate::binio::{Reader, Writer};
use crate::bitcore::BitTensor;
use crate::error::{Error, Result};
use crate::nfgraph::{ConvGeom, Shape3};

pub const ABNN_MAGIC: &[u8; 4] = b"ABNN";
pub const ABNN_VERSION: u32 = 1;

const TAG_INPUT: u8 = 0;
const TAG_FIRST_CONV: u8 = 1;
const TAG_BLOCK: u8 = 2;
const TAG_AVGPOOL: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_LAST_DENSE: u8 = 5;

fn put_shape(w: &mut Writer, s: Shape3) -> Result<()> {
    w.len32(s.c)?;
    w.len32(s.h)?;
    w.len32(s.w)
}

fn put_conv(w: &mut Writer, c: &ConvGeom) -> Result<()> {
    for v in [c.c_in, c.c_out, c.kh, c.kw, c.stride, c.pad] {
        w.len32(v)?;
    }
    Ok(())
}

fn layer_block(l: &FoldedLayer<i32>) -> Result<(u8, Vec<u8>)> {
    let mut w = Writer::default();
    let tag = match l {
        FoldedLayer::FirstConv { conv, weight, bias, .. } => {
            put_conv(&mut w, conv)?;
            w.i32s(weight);
            w.i32s(bias);
            TAG_FIRST_CONV
        }
        FoldedLayer::Block(b) => {
            put_conv(&mut w, &b.conv)?;
            w.len32(b.input.h)?;
            w.len32(b.input.w)?;
            w.i8s(&[b.alpha_exp]);
            w.i32s(&b.threshold);
            w.i8s(&b.kappa_exp);
            w.len32(b.weights.words().len())?;
            w.u64s(b.weights.words());
            w.i8s(&b.act.slope_exp);
            w.i32s(&b.act.xi1);
            w.i32s(&b.act.xi2);
            TAG_BLOCK
        }
        FoldedLayer::AvgPool2x2 { input } => {
            put_shape(&mut w, *input)?;
            TAG_AVGPOOL
        }
        FoldedLayer::Flatten { len } => {
            w.len32(*len)?;
            TAG_FLATTEN
        }
        FoldedLayer::LastDense { n_in, n_out, weight, bias } => {
            w.len32(*n_in)?;
            w.len32(*n_out)?;
            w.i32s(weight);
            w.i32s(bias);
            TAG_LAST_DENSE
        }
    };
    Ok((tag, w.buf))
}

/// Serialize a validated model. Identical models give identical bytes.
pub fn model_to_bytes(model: &FoldedModel) -> Result<Vec<u8>> {
    model.validate().map_err(|e| Error::Export(format!("invalid model: {e}")))?;
    let mut w = Writer::default();
    w.bytes(ABNN_MAGIC);
    w.u32(ABNN_VERSION);
    w.u8(model.frac_bits);
    w.u8(0);
    w.u16(0);
    w.len32(model.layers.len() + 1)?;
    let mut input = Writer::default();
    put_shape(&mut input, model.input)?;
    w.u8(TAG_INPUT);
    w.len32(input.buf.len())?;
    w.bytes(&input.buf);
    for l in &model.layers {
        let (tag, block) = layer_block(l)?;
        w.u8(tag);
        w.len32(block.len())?;
        w.bytes(&block);
    }
    Ok(w.finish())
}

fn get_shape(r: &mut Reader) -> Result<Shape3> {
    Ok(Shape3::new(r.usize32()?, r.usize32()?, r.usize32()?))
}

fn get_conv(r: &mut Reader) -> Result<ConvGeom> {
    let v: Vec<usize> = (0..6).map(|_| r.usize32()).collect::<Result<_>>()?;
    let c = ConvGeom {
        c_in: v[0],
        c_out: v[1],
        kh: v[2],
        kw: v[3],
        stride: v[4],
        pad: v[5],
    };
    if c.c_in == 0 || c.c_out == 0 || c.kh == 0 || c.kw == 0 || c.stride == 0 {
        return Err(r.format_err(format!("degenerate convolution {c:?}")));
    }
    // guard allocation sizes against corrupted headers
    if c.weight_len() > r.remaining() * 8 {
        return Err(Error::UnexpectedEof { section: r.section.clone() });
    }
    Ok(c)
}

fn get_exps(r: &mut Reader, n: usize, what: &str) -> Result<Vec<i8>> {
    let v = r.i8s(n)?;
    if let Some(e) = v.iter().find(|e| (**e as i32).abs() > MAX_EXP) {
        return Err(r.format_err(format!("{what} exponent {e} outside -{MAX_EXP}..={MAX_EXP}")));
    }
    Ok(v)
}

fn read_layer(r: &mut Reader, tag: u8) -> Result<FoldedLayer<i32>> {
    Ok(match tag {
        TAG_FIRST_CONV => {
            let conv = get_conv(r)?;
            FoldedLayer::FirstConv {
                input: Shape3::new(conv.c_in, 0, 0),
                weight: r.i32s(conv.weight_len())?,
                bias: r.i32s(conv.c_out)?,
                conv,
            }
        }
        TAG_BLOCK => {
            let conv = get_conv(r)?;
            let input = Shape3::new(conv.c_in, r.usize32()?, r.usize32()?);
            let alpha_exp = get_exps(r, 1, "alpha")?[0];
            let threshold = r.i32s(conv.c_in)?;
            let kappa_exp = get_exps(r, conv.c_out, "kappa")?;
            let n_words = r.usize32()?;
            let words = r.u64s(n_words)?;
            let weights = BitTensor::from_words(vec![conv.c_out, conv.kh, conv.kw, conv.c_in], words)
                .map_err(|e| r.format_err(format!("weight bits: {e}")))?;
            let slope_exp = get_exps(r, conv.c_out, "slope")?;
            let xi1 = r.i32s(conv.c_out)?;
            let xi2 = r.i32s(conv.c_out)?;
            FoldedLayer::Block(FoldedBlock {
                alpha_exp,
                input,
                conv,
                threshold,
                weights,
                kappa_exp,
                act: FoldedAct { slope_exp, xi1, xi2 },
            })
        }
        TAG_AVGPOOL => FoldedLayer::AvgPool2x2 { input: get_shape(r)? },
        TAG_FLATTEN => FoldedLayer::Flatten { len: r.usize32()? },
        TAG_LAST_DENSE => {
            let (n_in, n_out) = (r.usize32()?, r.usize32()?);
            let n = n_in.checked_mul(n_out).filter(|n| *n <= r.remaining() / 4).ok_or_else(|| Error::UnexpectedEof {
                section: r.section.clone(),
            })?;
            FoldedLayer::LastDense {
                n_in,
                n_out,
                weight: r.i32s(n)?,
                bias: r.i32s(n_out)?,
            }
        }
        t => return Err(r.format_err(format!("unknown layer tag {t}"))),
    })
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<FoldedModel> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != ABNN_MAGIC {
        return Err(r.format_err("bad magic, expected ABNN"));
    }
    let version = r.u32()?;
    if version != ABNN_VERSION {
        return Err(r.format_err(format!("unsupported version {version}")));
    }
    let frac_bits = r.u8()?;
    if frac_bits > 30 {
        return Err(r.format_err(format!("frac_bits {frac_bits} > 30")));
    }
    let flags = r.u8()?;
    let reserved = r.u16()?;
    if flags != 0 || reserved != 0 {
        return Err(r.format_err(format!("unknown flags {flags:#x} / reserved {reserved:#x}")));
    }
    let count = r.usize32()?;
    let mut input = None;
    let mut layers = Vec::new();
    for i in 0..count {
        r.enter(format!("layer {i} header"));
        let tag = r.u8()?;
        let len = r.usize32()?;
        r.enter(format!("layer {i} (tag {tag})"));
        let block = r.take(len)?;
        let mut br = Reader::new(block);
        br.enter(r.section.clone());
        if i == 0 {
            if tag != TAG_INPUT {
                return Err(r.format_err("first layer must be the input"));
            }
            input = Some(get_shape(&mut br)?);
        } else {
            layers.push(read_layer(&mut br, tag)?);
        }
        if br.remaining() != 0 {
            return Err(br.format_err(format!("{} unread bytes in layer block", br.remaining())));
        }
    }
    r.finish()?;
    let input = input.ok_or_else(|| Error::format("header", "model has no layers"))?;
    // the stem's spatial input is the model input
    if let Some(FoldedLayer::FirstConv { input: s, .. }) = layers.first_mut() {
        if s.c == input.c {
            *s = input;
        }
    }
    let model = FoldedModel {
        input,
        frac_bits,
        layers,
    };
    model.validate().map_err(|e| Error::format("layers", e.to_string()))?;
    Ok(model)
}

pub fn write_abnn(model: &FoldedModel, path: impl AsRef<Path>) -> Result<()> {
    let bytes = model_to_bytes(model)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn read_abnn(path: impl AsRef<Path>) -> Result<FoldedModel> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
