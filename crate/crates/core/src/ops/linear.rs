//! Fully-connected layer: `y = x · wᵀ + b` with `x:[N,D]`, `w:[K,D]`, `b:[K]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn fc_check(x_shape: &[usize], w_shape: &[usize], b_len: usize) -> Result<(usize, usize, usize)> {
    let (n, d) = match *x_shape {
        [n, d] => (n, d),
        _ => return Err(Error::Shape(format!("fc input must be 2-D, got {x_shape:?}"))),
    };
    let (k, dw) = match *w_shape {
        [k, dw] => (k, dw),
        _ => return Err(Error::Shape(format!("fc weight must be 2-D, got {w_shape:?}"))),
    };
    if dw != d {
        return Err(Error::Shape(format!("fc inner dims disagree: input D={d}, weight D={dw}")));
    }
    if b_len != k {
        return Err(Error::Shape(format!("fc bias length {b_len} != K={k}")));
    }
    Ok((n, d, k))
}

pub fn fc_forward<S: Scalar>(n: usize, d: usize, k: usize, x: &[S], w: &[S], b: &[S], out: &mut [S]) {
    for i in 0..n {
        let xr = &x[i * d..(i + 1) * d];
        for j in 0..k {
            let wr = &w[j * d..(j + 1) * d];
            let mut acc = b[j];
            for (xv, wv) in xr.iter().zip(wr) {
                acc = acc + *xv * *wv;
            }
            out[i * k + j] = acc;
        }
    }
}

pub fn fc_backward<S: Scalar>(
    n: usize,
    d: usize,
    k: usize,
    x: &[S],
    w: &[S],
    gy: &[S],
    mut gx: Option<&mut [S]>,
    mut gw: Option<&mut [S]>,
    gb: Option<&mut [S]>,
) {
    if let Some(gb) = gb {
        for i in 0..n {
            for j in 0..k {
                gb[j] = gb[j] + gy[i * k + j];
            }
        }
    }
    if let Some(gw) = gw.as_deref_mut() {
        for i in 0..n {
            let xr = &x[i * d..(i + 1) * d];
            for j in 0..k {
                let g = gy[i * k + j];
                if g == S::zero() {
                    continue;
                }
                let gwr = &mut gw[j * d..(j + 1) * d];
                for (gwv, xv) in gwr.iter_mut().zip(xr) {
                    *gwv = *gwv + g * *xv;
                }
            }
        }
    }
    if let Some(gx) = gx.as_deref_mut() {
        for i in 0..n {
            let gxr = &mut gx[i * d..(i + 1) * d];
            for j in 0..k {
                let g = gy[i * k + j];
                if g == S::zero() {
                    continue;
                }
                let wr = &w[j * d..(j + 1) * d];
                for (gxv, wv) in gxr.iter_mut().zip(wr) {
                    *gxv = *gxv + g * *wv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_zero_bias() {
        let x = vec![1.0f32, 2.0, 3.0, 4.0];
        let w = vec![1.0, 0.0, 0.0, 1.0]; // 2x2 identity
        let b = vec![0.0, 0.0];
        let mut out = vec![0.0; 4];
        fc_forward(2, 2, 2, &x, &w, &b, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn zero_weight_gives_bias_rows() {
        let x = vec![5.0f32; 6];
        let w = vec![0.0; 6];
        let b = vec![7.0, -1.0];
        let mut out = vec![0.0; 4];
        fc_forward(2, 3, 2, &x, &w, &b, &mut out);
        assert_eq!(out, vec![7.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn rejects_inner_dim_mismatch() {
        assert!(fc_check(&[1, 3], &[2, 4], 2).is_err());
        assert!(fc_check(&[1, 3], &[2, 3], 1).is_err());
    }
}
