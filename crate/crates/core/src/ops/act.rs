//! Elementwise activations and the scalar maps used by the loss.

use crate::scalar::Scalar;

pub fn relu_forward<S: Scalar>(x: &[S], out: &mut [S]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = if *v > S::zero() { *v } else { S::zero() };
    }
}

/// Subgradient at exactly 0 is taken as 0.
pub fn relu_backward<S: Scalar>(x: &[S], gy: &[S], gx: &mut [S]) {
    for i in 0..x.len() {
        if x[i] > S::zero() {
            gx[i] = gx[i] + gy[i];
        }
    }
}

/// Numerically stable logistic: branches on sign so neither exp overflows.
pub fn sigmoid_forward<S: Scalar>(x: &[S], out: &mut [S]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = if *v >= S::zero() {
            S::one() / (S::one() + (-*v).exp())
        } else {
            let e = v.exp();
            e / (S::one() + e)
        };
    }
}

pub fn sigmoid_backward<S: Scalar>(y: &[S], gy: &[S], gx: &mut [S]) {
    for i in 0..y.len() {
        gx[i] = gx[i] + gy[i] * y[i] * (S::one() - y[i]);
    }
}

/// `ln(max(x, eps))`; the clamped region has zero slope.
pub fn ln_clamped_forward<S: Scalar>(x: &[S], eps: S, out: &mut [S]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = if *v > eps { v.ln() } else { eps.ln() };
    }
}

pub fn ln_clamped_backward<S: Scalar>(x: &[S], eps: S, gy: &[S], gx: &mut [S]) {
    for i in 0..x.len() {
        if x[i] > eps {
            gx[i] = gx[i] + gy[i] / x[i];
        }
    }
}

pub fn abs_forward<S: Scalar>(x: &[S], out: &mut [S]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = v.abs();
    }
}

/// Subgradient at 0 is taken as 0.
pub fn abs_backward<S: Scalar>(x: &[S], gy: &[S], gx: &mut [S]) {
    for i in 0..x.len() {
        if x[i] > S::zero() {
            gx[i] = gx[i] + gy[i];
        } else if x[i] < S::zero() {
            gx[i] = gx[i] - gy[i];
        }
    }
}
