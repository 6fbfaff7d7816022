//! Adaptive gradient clipping, applied row by row (one row per output unit).

use crate::error::{Error, Result};

/// Lower bound on the weight norm in the clipping ratio.
pub const AGC_EPS: f64 = 1e-3;

fn frob(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Clip each gradient row so that `|G_i| / max(|W_i|, eps) <= lambda`.
///
/// Rows whose ratio exceeds `lambda` are rescaled to
/// `lambda * max(|W_i|, eps) / |G_i| * G_i`; others are left alone.
/// Returns the number of clipped rows.
pub fn agc_clip(grad: &mut [f64], weights: &[f64], rows: usize, lambda: f64) -> Result<usize> {
    if !(lambda > 0.0) {
        return Err(Error::Contract(format!("AGC lambda must be positive, got {lambda}")));
    }
    if grad.len() != weights.len() || rows == 0 || grad.len() % rows != 0 {
        return Err(Error::Shape(format!(
            "AGC: gradient {} / weights {} / rows {rows}",
            grad.len(),
            weights.len()
        )));
    }
    let n = grad.len() / rows;
    if n == 0 {
        return Ok(0);
    }
    let mut clipped = 0;
    for (g, w) in grad.chunks_exact_mut(n).zip(weights.chunks_exact(n)) {
        let w_norm = frob(w).max(AGC_EPS);
        let g_norm = frob(g);
        if g_norm / w_norm > lambda {
            let scale = lambda * w_norm / g_norm;
            g.iter_mut().for_each(|x| *x *= scale);
            clipped += 1;
        }
    }
    Ok(clipped)
}
