//! Pooling reductions: max pool (argmax-routed gradient) and global average pool.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn max_pool_out_dims(
    h: usize,
    w: usize,
    k: (usize, usize),
    stride: (usize, usize),
) -> Result<(usize, usize)> {
    let (kh, kw) = k;
    let (sh, sw) = stride;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(Error::Shape("max_pool window and stride must be >= 1".into()));
    }
    if kh > h || kw > w {
        return Err(Error::Shape(format!("max_pool window {kh}x{kw} larger than input {h}x{w}")));
    }
    Ok(((h - kh) / sh + 1, (w - kw) / sw + 1))
}

/// Forward max pool over `[N,C,H,W]`. Records the flat input index of each
/// window's maximum (first occurrence on ties) for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn max_pool_forward<S: Scalar>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: (usize, usize),
    stride: (usize, usize),
    x: &[S],
    out: &mut [S],
    argmax: &mut [usize],
) {
    let (kh, kw) = k;
    let (sh, sw) = stride;
    let (h_out, w_out) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
    let plane_in = h * w;
    let plane_out = h_out * w_out;
    for chan in 0..n * c {
        let x_base = chan * plane_in;
        let o_base = chan * plane_out;
        for oh in 0..h_out {
            for ow in 0..w_out {
                let ih0 = oh * sh;
                let iw0 = ow * sw;
                let mut best = x[x_base + ih0 * w + iw0];
                let mut best_idx = x_base + ih0 * w + iw0;
                for dh in 0..kh {
                    for dw in 0..kw {
                        let idx = x_base + (ih0 + dh) * w + (iw0 + dw);
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[o_base + oh * w_out + ow] = best;
                argmax[o_base + oh * w_out + ow] = best_idx;
            }
        }
    }
}

pub fn max_pool_backward<S: Scalar>(gy: &[S], argmax: &[usize], gx: &mut [S]) {
    for (g, &idx) in gy.iter().zip(argmax) {
        gx[idx] = gx[idx] + *g;
    }
}

/// `[N,C,H,W] -> [N,C,1,1]` mean over the spatial extent.
pub fn global_avg_pool_forward<S: Scalar>(n: usize, c: usize, h: usize, w: usize, x: &[S], out: &mut [S]) {
    let plane = h * w;
    let inv = S::fromf(1.0 / plane as f64);
    for chan in 0..n * c {
        let base = chan * plane;
        let mut acc = S::zero();
        for v in &x[base..base + plane] {
            acc = acc + *v;
        }
        out[chan] = acc * inv;
    }
}

pub fn global_avg_pool_backward<S: Scalar>(n: usize, c: usize, h: usize, w: usize, gy: &[S], gx: &mut [S]) {
    let plane = h * w;
    let inv = S::fromf(1.0 / plane as f64);
    for chan in 0..n * c {
        let g = gy[chan] * inv;
        let base = chan * plane;
        for v in &mut gx[base..base + plane] {
            *v = *v + g;
        }
    }
}
