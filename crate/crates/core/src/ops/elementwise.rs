//! Same-shape elementwise arithmetic and the per-channel scale broadcast.

use crate::scalar::Scalar;

pub fn add<S: Scalar>(a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..a.len() {
        out[i] = a[i] + b[i];
    }
}

pub fn sub<S: Scalar>(a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..a.len() {
        out[i] = a[i] - b[i];
    }
}

pub fn mul<S: Scalar>(a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..a.len() {
        out[i] = a[i] * b[i];
    }
}

pub fn scale<S: Scalar>(a: &[S], k: S, out: &mut [S]) {
    for i in 0..a.len() {
        out[i] = a[i] * k;
    }
}

pub fn accumulate_scaled<S: Scalar>(dst: &mut [S], src: &[S], k: S) {
    for i in 0..dst.len() {
        dst[i] = dst[i] + src[i] * k;
    }
}

pub fn accumulate_product<S: Scalar>(dst: &mut [S], a: &[S], b: &[S]) {
    for i in 0..dst.len() {
        dst[i] = dst[i] + a[i] * b[i];
    }
}

/// `out[n,c,h,w] = x[n,c,h,w] * s[c]`.
pub fn channel_scale_forward<S: Scalar>(n: usize, c: usize, plane: usize, x: &[S], s: &[S], out: &mut [S]) {
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let k = s[ch];
            for i in base..base + plane {
                out[i] = x[i] * k;
            }
        }
    }
}

/// Gradients of the per-channel scale: `gx += gy*s[c]`, `gs[c] += sum(gy*x)`.
#[allow(clippy::too_many_arguments)]
pub fn channel_scale_backward<S: Scalar>(
    n: usize,
    c: usize,
    plane: usize,
    x: &[S],
    s: &[S],
    gy: &[S],
    mut gx: Option<&mut [S]>,
    mut gs: Option<&mut [S]>,
) {
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            if let Some(gx) = gx.as_deref_mut() {
                let k = s[ch];
                for i in base..base + plane {
                    gx[i] = gx[i] + gy[i] * k;
                }
            }
            if let Some(gs) = gs.as_deref_mut() {
                let mut acc = S::zero();
                for i in base..base + plane {
                    acc = acc + gy[i] * x[i];
                }
                gs[ch] = gs[ch] + acc;
            }
        }
    }
}

pub fn sum_all<S: Scalar>(x: &[S]) -> S {
    let mut acc = S::zero();
    for v in x {
        acc = acc + *v;
    }
    acc
}
