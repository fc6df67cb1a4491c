//! Batch normalization over `[N,C,H,W]` and row softmax.

use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel values saved by the forward pass for backward.
#[derive(Clone, Debug)]
pub struct BnSaved<S: Scalar> {
    /// Normalized input (same size as x).
    pub xhat: Vec<S>,
    /// 1/sqrt(var + eps) per channel (batch stats in train mode, running in eval).
    pub inv_std: Vec<S>,
    pub train: bool,
}

/// Train-mode forward: normalize by batch statistics and update running stats
/// in place (biased variance for normalization, unbiased for the running
/// update when the reduction count allows it).
#[allow(clippy::too_many_arguments)]
pub fn bn_forward_train<S: Scalar>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    x: &[S],
    gamma: &[S],
    beta: &[S],
    running_mean: &mut [S],
    running_var: &mut [S],
    out: &mut [S],
) -> BnSaved<S> {
    let plane = h * w;
    let m = n * plane;
    let inv_m = 1.0 / m as f64;
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for img in 0..n {
            let base = (img * c + ch) * plane;
            for v in &x[base..base + plane] {
                let vf = v.tof();
                sum += vf;
                sum_sq += vf * vf;
            }
        }
        let mean = sum * inv_m;
        let var = (sum_sq * inv_m - mean * mean).max(0.0);
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = S::fromf(istd);

        let var_running = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
        running_mean[ch] =
            S::fromf(running_mean[ch].tof() * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM);
        running_var[ch] =
            S::fromf(running_var[ch].tof() * (1.0 - BN_MOMENTUM) + var_running * BN_MOMENTUM);

        let mean_s = S::fromf(mean);
        let istd_s = S::fromf(istd);
        for img in 0..n {
            let base = (img * c + ch) * plane;
            for i in base..base + plane {
                let xh = (x[i] - mean_s) * istd_s;
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BnSaved { xhat, inv_std, train: true }
}

/// Eval-mode forward: normalize by the provided running statistics.
#[allow(clippy::too_many_arguments)]
pub fn bn_forward_eval<S: Scalar>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    x: &[S],
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
    out: &mut [S],
) -> BnSaved<S> {
    let plane = h * w;
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); c];
    for ch in 0..c {
        let istd = S::fromf(1.0 / (running_var[ch].tof() + BN_EPS).sqrt());
        inv_std[ch] = istd;
        let mean = running_mean[ch];
        for img in 0..n {
            let base = (img * c + ch) * plane;
            for i in base..base + plane {
                let xh = (x[i] - mean) * istd;
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BnSaved { xhat, inv_std, train: false }
}

/// Backward for both modes. In train mode the batch statistics depend on x,
/// which adds the two correction terms; in eval mode the stats are constants.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward<S: Scalar>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    saved: &BnSaved<S>,
    gamma: &[S],
    gy: &[S],
    mut gx: Option<&mut [S]>,
    mut ggamma: Option<&mut [S]>,
    mut gbeta: Option<&mut [S]>,
) {
    let plane = h * w;
    let m = n * plane;
    let inv_m = S::fromf(1.0 / m as f64);
    for ch in 0..c {
        let mut sum_gy = S::zero();
        let mut sum_gy_xhat = S::zero();
        for img in 0..n {
            let base = (img * c + ch) * plane;
            for i in base..base + plane {
                sum_gy = sum_gy + gy[i];
                sum_gy_xhat = sum_gy_xhat + gy[i] * saved.xhat[i];
            }
        }
        if let Some(gg) = ggamma.as_deref_mut() {
            gg[ch] = gg[ch] + sum_gy_xhat;
        }
        if let Some(gb) = gbeta.as_deref_mut() {
            gb[ch] = gb[ch] + sum_gy;
        }
        if let Some(gx) = gx.as_deref_mut() {
            let scale = gamma[ch] * saved.inv_std[ch];
            if saved.train {
                let mean_gy = sum_gy * inv_m;
                let mean_gy_xhat = sum_gy_xhat * inv_m;
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for i in base..base + plane {
                        let t = gy[i] - mean_gy - saved.xhat[i] * mean_gy_xhat;
                        gx[i] = gx[i] + scale * t;
                    }
                }
            } else {
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for i in base..base + plane {
                        gx[i] = gx[i] + scale * gy[i];
                    }
                }
            }
        }
    }
}

/// Row softmax over `[N,K]` with max subtraction.
pub fn softmax_forward<S: Scalar>(n: usize, k: usize, x: &[S], out: &mut [S]) {
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        let mut max = row[0];
        for v in row {
            if *v > max {
                max = *v;
            }
        }
        let mut denom = S::zero();
        for (j, v) in row.iter().enumerate() {
            let e = (*v - max).exp();
            out[i * k + j] = e;
            denom = denom + e;
        }
        let inv = S::one() / denom;
        for j in 0..k {
            out[i * k + j] = out[i * k + j] * inv;
        }
    }
}

/// `gx = y * (gy - sum_j gy_j * y_j)` per row.
pub fn softmax_backward<S: Scalar>(n: usize, k: usize, y: &[S], gy: &[S], gx: &mut [S]) {
    for i in 0..n {
        let base = i * k;
        let mut dot = S::zero();
        for j in 0..k {
            dot = dot + gy[base + j] * y[base + j];
        }
        for j in 0..k {
            gx[base + j] = gx[base + j] + y[base + j] * (gy[base + j] - dot);
        }
    }
}
