//! Spatial resampling: anti-aliased downsampling (fixed binomial blur +
//! stride-2 subsampling, reflection padding) and the nearest-neighbor
//! expansion used by the attention condenser.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Normalized 1-D binomial taps for the supported filter sizes.
pub fn binomial_taps(filter_size: usize) -> Result<Vec<f64>> {
    match filter_size {
        3 => Ok(vec![1.0 / 4.0, 2.0 / 4.0, 1.0 / 4.0]),
        5 => Ok(vec![1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0]),
        other => Err(Error::Shape(format!("aads filter size must be 3 or 5, got {other}"))),
    }
}

/// Mirror index without repeating the edge sample (…2,1,0 -> 1,2…), applied
/// repeatedly so any offset lands in `[0, n)`.
pub fn reflect101(mut i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub fn blur_down_out_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(2), w.div_ceil(2))
}

/// Per-channel separable blur then stride-2 subsampling. Output row `o`
/// samples input row `2o`; the filter taps are reflected at the borders, so
/// the taps always sum to 1 and a constant image stays constant.
#[allow(clippy::too_many_arguments)]
pub fn blur_down_forward<S: Scalar>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    filter_size: usize,
    x: &[S],
    out: &mut [S],
) -> Result<()> {
    let taps: Vec<S> = binomial_taps(filter_size)?.into_iter().map(S::fromf).collect();
    let r = filter_size as isize / 2;
    let (h_out, w_out) = blur_down_out_dims(h, w);
    let plane_in = h * w;
    let plane_out = h_out * w_out;
    for chan in 0..n * c {
        let x_base = chan * plane_in;
        let o_base = chan * plane_out;
        for oh in 0..h_out {
            for ow in 0..w_out {
                let mut acc = S::zero();
                for (ti, tv) in taps.iter().enumerate() {
                    let ih = reflect101(2 * oh as isize + ti as isize - r, h);
                    for (tj, tw) in taps.iter().enumerate() {
                        let iw = reflect101(2 * ow as isize + tj as isize - r, w);
                        acc = acc + *tv * *tw * x[x_base + ih * w + iw];
                    }
                }
                out[o_base + oh * w_out + ow] = acc;
            }
        }
    }
    Ok(())
}

/// Adjoint of the forward map: scatter each output gradient back through the
/// same reflected taps. Gradient flows to x only (the filter is fixed).
#[allow(clippy::too_many_arguments)]
pub fn blur_down_backward<S: Scalar>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    filter_size: usize,
    gy: &[S],
    gx: &mut [S],
) -> Result<()> {
    let taps: Vec<S> = binomial_taps(filter_size)?.into_iter().map(S::fromf).collect();
    let r = filter_size as isize / 2;
    let (h_out, w_out) = blur_down_out_dims(h, w);
    let plane_in = h * w;
    let plane_out = h_out * w_out;
    for chan in 0..n * c {
        let x_base = chan * plane_in;
        let o_base = chan * plane_out;
        for oh in 0..h_out {
            for ow in 0..w_out {
                let g = gy[o_base + oh * w_out + ow];
                for (ti, tv) in taps.iter().enumerate() {
                    let ih = reflect101(2 * oh as isize + ti as isize - r, h);
                    for (tj, tw) in taps.iter().enumerate() {
                        let iw = reflect101(2 * ow as isize + tj as isize - r, w);
                        gx[x_base + ih * w + iw] = gx[x_base + ih * w + iw] + *tv * *tw * g;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Nearest-neighbor 2x expansion clamped to an explicit output extent, so a
/// condensed map restores the exact pre-condensation shape for odd extents.
#[allow(clippy::too_many_arguments)]
pub fn upsample2x_forward<S: Scalar>(
    n: usize,
    c: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    x: &[S],
    out: &mut [S],
) {
    let plane_in = h_in * w_in;
    let plane_out = h_out * w_out;
    for chan in 0..n * c {
        let x_base = chan * plane_in;
        let o_base = chan * plane_out;
        for oh in 0..h_out {
            let ih = (oh / 2).min(h_in - 1);
            for ow in 0..w_out {
                let iw = (ow / 2).min(w_in - 1);
                out[o_base + oh * w_out + ow] = x[x_base + ih * w_in + iw];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn upsample2x_backward<S: Scalar>(
    n: usize,
    c: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    gy: &[S],
    gx: &mut [S],
) {
    let plane_in = h_in * w_in;
    let plane_out = h_out * w_out;
    for chan in 0..n * c {
        let x_base = chan * plane_in;
        let o_base = chan * plane_out;
        for oh in 0..h_out {
            let ih = (oh / 2).min(h_in - 1);
            for ow in 0..w_out {
                let iw = (ow / 2).min(w_in - 1);
                gx[x_base + ih * w_in + iw] = gx[x_base + ih * w_in + iw] + gy[o_base + oh * w_out + ow];
            }
        }
    }
}
