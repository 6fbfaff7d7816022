//! Forward and manual backward passes of the individual training layers.
//!
//! Activations are channel-major (`c`, `h`, `w`) slices of `f64`. Per-channel
//! parameters are indexed by channel.

use super::spec::{ActKind, ConvGeom, Shape3};
use crate::bitcore::{sign, FloatTensor};
use crate::error::{Error, Result};

/// `round` used for every exponent: half to even.
#[inline]
pub fn round_exp(x: f64) -> f64 {
    x.round_ties_even()
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Surrogate derivative of the masked sign: `delta * s * (1 - s)` with
/// `s = logistic(delta * u)`.
#[inline]
pub fn mask_grad(u: f64, delta: f64) -> f64 {
    let s = logistic(delta * u);
    delta * s * (1.0 - s)
}

/// Smooth stand-in for the sign whose derivative is [`mask_grad`]; used only
/// to check gradients by finite differences.
#[inline]
pub fn mask_value(u: f64, delta: f64) -> f64 {
    logistic(delta * u)
}

/// Per-row statistics kept for the backward pass of [`sws_rows`].
#[derive(Clone, Debug, PartialEq)]
pub struct SwsRows {
    pub standardized: Vec<f64>,
    pub std: Vec<f64>,
    pub fan_in: usize,
    pub gamma: f64,
}

/// Scaled weight standardization of `rows` x `fan_in` weights:
/// `gamma * (w - mean) / (sqrt(N) * std)` per row.
pub fn sws_rows(w: &[f64], rows: usize, gamma: f64, layer: &str) -> Result<SwsRows> {
    if rows == 0 || w.len() % rows != 0 {
        return Err(Error::Shape(format!(
            "{layer}: {} weights do not split into {rows} rows",
            w.len()
        )));
    }
    let n = w.len() / rows;
    if n < 2 {
        return Err(Error::Shape(format!("{layer}: fan-in {n} < 2")));
    }
    let mut out = vec![0.0; w.len()];
    let mut stds = Vec::with_capacity(rows);
    let scale = gamma / (n as f64).sqrt();
    for (i, (row, dst)) in w.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::DegenerateRow {
                layer: layer.to_string(),
                row: i,
            });
        }
        for (d, v) in dst.iter_mut().zip(row) {
            *d = scale * (v - mean) / std;
        }
        stds.push(std);
    }
    Ok(SwsRows {
        standardized: out,
        std: stds,
        fan_in: n,
        gamma,
    })
}

/// Tensor form: rows are indexed by the leading (output-channel) axis.
pub fn sws_standardize(w: &FloatTensor, gamma: f64) -> Result<FloatTensor> {
    let rows = *w
        .shape
        .first()
        .ok_or_else(|| Error::Shape("sws_standardize: scalar weight".into()))?;
    let s = sws_rows(&w.values, rows, gamma, "weights")?;
    FloatTensor::new(w.shape.clone(), s.standardized)
}

/// Backward of [`sws_rows`]: maps a gradient on the standardized weights back
/// to the latent weights.
pub fn sws_backward(s: &SwsRows, grad_hat: &[f64]) -> Vec<f64> {
    let n = s.fan_in;
    let scale = s.gamma / (n as f64).sqrt();
    let mut out = vec![0.0; grad_hat.len()];
    for (i, ((g, xh), dst)) in grad_hat
        .chunks_exact(n)
        .zip(s.standardized.chunks_exact(n))
        .zip(out.chunks_exact_mut(n))
        .enumerate()
    {
        // standardized = scale * xhat, xhat = (w - mean) / std
        let g_mean = g.iter().sum::<f64>() * scale / n as f64;
        let gx_mean = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for j in 0..n {
            let xhat = xh[j] / scale;
            dst[j] = (g[j] * scale - g_mean - xhat * gx_mean) / s.std[i];
        }
    }
    out
}

/// Direct-loop 2-D convolution with zero padding, no bias.
pub fn conv2d(x: &[f64], input: Shape3, w: &[f64], g: &ConvGeom, output: Shape3) -> Vec<f64> {
    let mut y = vec![0.0; output.len()];
    let (ih, iw) = (input.h as isize, input.w as isize);
    for co in 0..g.c_out {
        let wrow = &w[co * g.fan_in()..(co + 1) * g.fan_in()];
        for oy in 0..output.h {
            for ox in 0..output.w {
                let mut acc = 0.0;
                for ci in 0..g.c_in {
                    let plane = &x[ci * input.h * input.w..(ci + 1) * input.h * input.w];
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        let wbase = (ci * g.kh + ky) * g.kw;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= iw {
                                continue;
                            }
                            acc += wrow[wbase + kx] * plane[(iy * iw + ix) as usize];
                        }
                    }
                }
                y[(co * output.h + oy) * output.w + ox] = acc;
            }
        }
    }
    y
}

/// Gradients of [`conv2d`] with respect to its input (optional) and weights.
pub fn conv2d_backward(
    x: &[f64],
    input: Shape3,
    w: &[f64],
    g: &ConvGeom,
    output: Shape3,
    gy: &[f64],
    want_input_grad: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let mut gw = vec![0.0; w.len()];
    let mut gx = want_input_grad.then(|| vec![0.0; x.len()]);
    let (ih, iw) = (input.h as isize, input.w as isize);
    for co in 0..g.c_out {
        let wbase_row = co * g.fan_in();
        for oy in 0..output.h {
            for ox in 0..output.w {
                let go = gy[(co * output.h + oy) * output.w + ox];
                if go == 0.0 {
                    continue;
                }
                for ci in 0..g.c_in {
                    let pbase = ci * input.h * input.w;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        let wbase = wbase_row + (ci * g.kh + ky) * g.kw;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= iw {
                                continue;
                            }
                            let xi = pbase + (iy * iw + ix) as usize;
                            gw[wbase + kx] += go * x[xi];
                            if let Some(gx) = gx.as_mut() {
                                gx[xi] += go * w[wbase + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Forward of the masked sign: `sign(x / beta + xi_c)`.
///
/// With `smooth` set the logistic mask value is returned instead of the sign
/// (gradient checking only). Returns `(output, pre-activation u)`.
pub fn masked_sign_forward(
    x: &[f64],
    channels: usize,
    xi: &[f64],
    beta: f64,
    delta: f64,
    smooth: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(beta > 0.0) {
        return Err(Error::Contract(format!("beta must be positive, got {beta}")));
    }
    check_channels(x.len(), channels, xi.len())?;
    let plane = x.len() / channels.max(1);
    let mut u = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        let ui = v / beta + xi[i / plane];
        u.push(ui);
        out.push(if smooth { mask_value(ui, delta) } else { sign(ui) });
    }
    Ok((out, u))
}

/// Backward of the masked sign. Returns `(grad_x, grad_xi)`.
pub fn masked_sign_backward(
    grad_out: &[f64],
    u: &[f64],
    channels: usize,
    beta: f64,
    delta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let plane = u.len() / channels.max(1);
    let mut gx = Vec::with_capacity(u.len());
    let mut gxi = vec![0.0; channels];
    for (i, (&g, &ui)) in grad_out.iter().zip(u).enumerate() {
        let gu = g * mask_grad(ui, delta);
        gx.push(gu / beta);
        gxi[i / plane] += gu;
    }
    (gx, gxi)
}

fn check_channels(len: usize, channels: usize, params: usize) -> Result<()> {
    if channels == 0 || len % channels != 0 || params != channels {
        return Err(Error::Shape(format!(
            "{len} activations, {channels} channels, {params} per-channel parameters"
        )));
    }
    Ok(())
}

/// Negative-branch slope of one channel.
#[inline]
pub fn act_slope(kind: ActKind, a: f64, smooth: bool) -> f64 {
    match kind {
        ActKind::Quantized if smooth => a.exp2(),
        ActKind::Quantized => round_exp(a).exp2(),
        ActKind::RLeaky { slope_exp } => (slope_exp as f64).exp2(),
    }
}

/// Quantized RPReLU (or RLeakyReLU):
/// `y` if `y >= 0`, else `slope_c * (y + xi1_c) + xi2_c`.
///
/// `a` is ignored for [`ActKind::RLeaky`] and may be empty.
pub fn qrprelu_forward(
    y: &[f64],
    channels: usize,
    a: &[f64],
    xi1: &[f64],
    xi2: &[f64],
    kind: ActKind,
    smooth: bool,
) -> Result<Vec<f64>> {
    check_channels(y.len(), channels, xi1.len())?;
    check_channels(y.len(), channels, xi2.len())?;
    if kind == ActKind::Quantized {
        check_channels(y.len(), channels, a.len())?;
    }
    let plane = y.len() / channels;
    Ok(y.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            if v >= 0.0 {
                v
            } else {
                let s = act_slope(kind, a.get(c).copied().unwrap_or(0.0), smooth);
                s * (v + xi1[c]) + xi2[c]
            }
        })
        .collect())
}

/// Gradients of [`qrprelu_forward`]; `round` is passed straight through.
#[derive(Clone, Debug, PartialEq)]
pub struct ActGrads {
    pub y: Vec<f64>,
    pub a: Vec<f64>,
    pub xi1: Vec<f64>,
    pub xi2: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn qrprelu_backward(
    grad_out: &[f64],
    y: &[f64],
    channels: usize,
    a: &[f64],
    xi1: &[f64],
    kind: ActKind,
    smooth: bool,
) -> ActGrads {
    let plane = y.len() / channels.max(1);
    let mut g = ActGrads {
        y: Vec::with_capacity(y.len()),
        a: vec![0.0; if kind == ActKind::Quantized { channels } else { 0 }],
        xi1: vec![0.0; channels],
        xi2: vec![0.0; channels],
    };
    for (i, (&go, &v)) in grad_out.iter().zip(y).enumerate() {
        if v >= 0.0 {
            g.y.push(go);
            continue;
        }
        let c = i / plane;
        let s = act_slope(kind, a.get(c).copied().unwrap_or(0.0), smooth);
        g.y.push(go * s);
        if kind == ActKind::Quantized {
            g.a[c] += go * std::f64::consts::LN_2 * s * (v + xi1[c]);
        }
        g.xi1[c] += go * s;
        g.xi2[c] += go;
    }
    g
}

/// Non-overlapping 2x2 mean pooling.
pub fn avgpool_forward(x: &[f64], shape: Shape3) -> Result<Vec<f64>> {
    if shape.h % 2 != 0 || shape.w % 2 != 0 {
        return Err(Error::Shape(format!("avgpool2x2 needs even dims, got {shape}")));
    }
    if x.len() != shape.len() {
        return Err(Error::Shape(format!("{} values for shape {shape}", x.len())));
    }
    let (oh, ow) = (shape.h / 2, shape.w / 2);
    let mut out = Vec::with_capacity(shape.c * oh * ow);
    for c in 0..shape.c {
        let p = &x[c * shape.h * shape.w..];
        for oy in 0..oh {
            for ox in 0..ow {
                let (r0, r1) = (2 * oy * shape.w, (2 * oy + 1) * shape.w);
                let s = p[r0 + 2 * ox] + p[r0 + 2 * ox + 1] + p[r1 + 2 * ox] + p[r1 + 2 * ox + 1];
                out.push(s / 4.0);
            }
        }
    }
    Ok(out)
}

pub fn avgpool_backward(grad_out: &[f64], shape: Shape3) -> Vec<f64> {
    let (oh, ow) = (shape.h / 2, shape.w / 2);
    let mut gx = vec![0.0; shape.len()];
    for c in 0..shape.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(c * oh + oy) * ow + ox] / 4.0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    gx[(c * shape.h + 2 * oy + dy) * shape.w + 2 * ox + dx] += g;
                }
            }
        }
    }
    gx
}

/// Residual shortcut: optional 2x2 average pool, then channel repetition.
pub fn shortcut_forward(x: &[f64], input: Shape3, output: Shape3) -> Result<Vec<f64>> {
    let pooled = if output.h != input.h {
        avgpool_forward(x, input)?
    } else {
        x.to_vec()
    };
    let repeat = output.c / input.c;
    let mut out = Vec::with_capacity(output.len());
    for _ in 0..repeat {
        out.extend_from_slice(&pooled);
    }
    Ok(out)
}

pub fn shortcut_backward(grad_out: &[f64], input: Shape3, output: Shape3) -> Vec<f64> {
    let part = grad_out.len() / (output.c / input.c);
    let mut folded = grad_out[..part].to_vec();
    for chunk in grad_out.chunks_exact(part).skip(1) {
        for (f, g) in folded.iter_mut().zip(chunk) {
            *f += g;
        }
    }
    if output.h != input.h {
        avgpool_backward(&folded, input)
    } else {
        folded
    }
}

/// Residual combination `shortcut + 2^alpha_exp * branch`.
pub fn nf_residual_combine(shortcut: &[f64], branch: &[f64], alpha_exp: i32) -> Result<Vec<f64>> {
    if shortcut.len() != branch.len() {
        return Err(Error::Shape(format!(
            "residual: shortcut has {} values, branch {}",
            shortcut.len(),
            branch.len()
        )));
    }
    let alpha = (alpha_exp as f64).exp2();
    Ok(shortcut.iter().zip(branch).map(|(s, b)| s + alpha * b).collect())
}
