//! 2-D grouped convolution (cross-correlation convention, zero padding).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// All dimensions of one conv application, validated up front.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let [n, cin, h, w] = match *x_shape {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::Shape(format!("conv2d input must be 4-D, got {x_shape:?}"))),
        };
        let [cout, cin_g, kh, kw] = match *w_shape {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::Shape(format!("conv2d weight must be 4-D, got {w_shape:?}"))),
        };
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        if groups == 0 || sh == 0 || sw == 0 {
            return Err(Error::Shape("conv2d stride and groups must be >= 1".into()));
        }
        if cin % groups != 0 {
            return Err(Error::Shape(format!("conv2d Cin={cin} not divisible by groups={groups}")));
        }
        if cout % groups != 0 {
            return Err(Error::Shape(format!("conv2d Cout={cout} not divisible by groups={groups}")));
        }
        if cin_g != cin / groups {
            return Err(Error::Shape(format!(
                "conv2d weight expects Cin/groups={} input channels per group, got {cin_g}",
                cin / groups
            )));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        let h_out = (h + 2 * ph - kh) / sh + 1;
        let w_out = (w + 2 * pw - kw) / sw + 1;
        Ok(ConvDims { n, cin, h, w, cout, kh, kw, sh, sw, ph, pw, groups, h_out, w_out })
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    pub fn out_numel(&self) -> usize {
        self.n * self.cout * self.h_out * self.w_out
    }

    /// Valid output-column range for one kernel column: all `ow` with
    /// `0 <= ow*sw - pw + kw_i < w`.
    fn ow_range(&self, kw_i: usize) -> (usize, usize) {
        let lo = if kw_i >= self.pw {
            0
        } else {
            (self.pw - kw_i).div_ceil(self.sw)
        };
        let hi_excl = {
            let max_iw = self.w as isize - 1 + self.pw as isize - kw_i as isize;
            if max_iw < 0 {
                0
            } else {
                (max_iw as usize / self.sw + 1).min(self.w_out)
            }
        };
        (lo.min(self.w_out), hi_excl)
    }
}

pub fn conv2d_forward<S: Scalar>(d: &ConvDims, x: &[S], wt: &[S], b: Option<&[S]>, out: &mut [S]) {
    debug_assert_eq!(out.len(), d.out_numel());
    let cin_g = d.cin_per_group();
    let cout_g = d.cout_per_group();
    let plane_in = d.h * d.w;
    let plane_out = d.h_out * d.w_out;

    for img in 0..d.n {
        for co in 0..d.cout {
            let g = co / cout_g;
            let out_base = (img * d.cout + co) * plane_out;
            let bias = b.map_or(S::zero(), |bv| bv[co]);
            out[out_base..out_base + plane_out].fill(bias);
            for ci in 0..cin_g {
                let x_chan = (img * d.cin + g * cin_g + ci) * plane_in;
                let w_chan = (co * cin_g + ci) * d.kh * d.kw;
                for kh_i in 0..d.kh {
                    for kw_i in 0..d.kw {
                        let wv = wt[w_chan + kh_i * d.kw + kw_i];
                        if wv == S::zero() {
                            continue;
                        }
                        let (ow_lo, ow_hi) = d.ow_range(kw_i);
                        for oh in 0..d.h_out {
                            let ih = oh as isize * d.sh as isize - d.ph as isize + kh_i as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            let x_row = x_chan + ih as usize * d.w;
                            let o_row = out_base + oh * d.w_out;
                            // iw = ow*sw - pw + kw_i, guaranteed in range for ow in [ow_lo, ow_hi)
                            let iw0 = (ow_lo * d.sw + kw_i) as isize - d.pw as isize;
                            if d.sw == 1 {
                                let xs = &x[x_row + iw0 as usize..x_row + iw0 as usize + ow_hi - ow_lo];
                                let os = &mut out[o_row + ow_lo..o_row + ow_hi];
                                for (o, xv) in os.iter_mut().zip(xs) {
                                    *o = *o + wv * *xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = iw0 as usize + (ow - ow_lo) * d.sw;
                                    out[o_row + ow] = out[o_row + ow] + wv * x[x_row + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward pass; any of the gradient outputs may be `None` to skip it.
pub fn conv2d_backward<S: Scalar>(
    d: &ConvDims,
    x: &[S],
    wt: &[S],
    gy: &[S],
    mut gx: Option<&mut [S]>,
    mut gw: Option<&mut [S]>,
    gb: Option<&mut [S]>,
) {
    let cin_g = d.cin_per_group();
    let cout_g = d.cout_per_group();
    let plane_in = d.h * d.w;
    let plane_out = d.h_out * d.w_out;

    if let Some(gb) = gb {
        for img in 0..d.n {
            for co in 0..d.cout {
                let base = (img * d.cout + co) * plane_out;
                let mut acc = S::zero();
                for v in &gy[base..base + plane_out] {
                    acc = acc + *v;
                }
                gb[co] = gb[co] + acc;
            }
        }
    }

    for img in 0..d.n {
        for co in 0..d.cout {
            let g = co / cout_g;
            let gy_base = (img * d.cout + co) * plane_out;
            for ci in 0..cin_g {
                let x_chan = (img * d.cin + g * cin_g + ci) * plane_in;
                let w_chan = (co * cin_g + ci) * d.kh * d.kw;
                for kh_i in 0..d.kh {
                    for kw_i in 0..d.kw {
                        let (ow_lo, ow_hi) = d.ow_range(kw_i);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut w_acc = S::zero();
                        let wv = wt[w_chan + kh_i * d.kw + kw_i];
                        for oh in 0..d.h_out {
                            let ih = oh as isize * d.sh as isize - d.ph as isize + kh_i as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            let x_row = x_chan + ih as usize * d.w;
                            let gy_row = gy_base + oh * d.w_out;
                            let iw0 = (ow_lo * d.sw + kw_i) as isize - d.pw as isize;
                            if d.sw == 1 {
                                let xs = &x[x_row + iw0 as usize..x_row + iw0 as usize + ow_hi - ow_lo];
                                let gys = &gy[gy_row + ow_lo..gy_row + ow_hi];
                                if gw.is_some() {
                                    for (xv, g_o) in xs.iter().zip(gys) {
                                        w_acc = w_acc + *xv * *g_o;
                                    }
                                }
                                if let Some(gx) = gx.as_deref_mut() {
                                    if wv != S::zero() {
                                        let gxs = &mut gx
                                            [x_row + iw0 as usize..x_row + iw0 as usize + ow_hi - ow_lo];
                                        for (gxv, g_o) in gxs.iter_mut().zip(gys) {
                                            *gxv = *gxv + wv * *g_o;
                                        }
                                    }
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = (iw0 as usize) + (ow - ow_lo) * d.sw;
                                    let g_o = gy[gy_row + ow];
                                    if gw.is_some() {
                                        w_acc = w_acc + x[x_row + iw] * g_o;
                                    }
                                    if let Some(gx) = gx.as_deref_mut() {
                                        gx[x_row + iw] = gx[x_row + iw] + wv * g_o;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[w_chan + kh_i * d.kw + kw_i] = gw[w_chan + kh_i * d.kw + kw_i] + w_acc;
                        }
                    }
                }
            }
        }
    }
}
