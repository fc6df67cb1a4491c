//! Composite building blocks: attention condenser, depthwise-separable
//! residual block, batchnorm parameter bundle, and the dual-softmax head.
//!
//! Each block owns its master parameter tensors. Per forward pass the caller
//! pushes them onto a tape with `push_leaves`, records the block with
//! `forward`, and after `backward` copies gradients back with `take_grads`.
//! The `tensors`/`tensors_mut` listings drive the optimizer and the weights
//! file; their order is fixed and part of the serialization contract.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// He-style init: zero-mean normal with variance 2/fan_in. Draws happen in
/// f64 so the f32 model is exactly the rounded f64 model.
pub fn he_normal<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let mut t = Tensor::from_fn(shape, |_| S::fromf(dist.sample(rng)));
    t.requires_grad = true;
    t
}

fn zeros_grad<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    let mut t = Tensor::zeros(shape);
    t.requires_grad = true;
    t
}

fn ones_grad<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    let mut t = Tensor::ones(shape);
    t.requires_grad = true;
    t
}

/// Weight (+ optional bias) of a standalone conv node.
#[derive(Clone, Debug)]
pub struct ConvParams<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Option<Tensor<S>>,
}

pub struct ConvLeaves {
    pub w: NodeId,
    pub b: Option<NodeId>,
}

impl<S: Scalar> ConvParams<S> {
    /// `cin_g` is Cin/groups, the weight's second extent.
    pub fn init(cout: usize, cin_g: usize, kh: usize, kw: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = he_normal(&[cout, cin_g, kh, kw], cin_g * kh * kw, rng);
        let b = bias.then(|| zeros_grad(&[cout]));
        ConvParams { w, b }
    }

    pub fn push_leaves(&self, tape: &mut Tape<S>) -> ConvLeaves {
        ConvLeaves {
            w: tape.leaf(self.w.clone()),
            b: self.b.as_ref().map(|b| tape.leaf(b.clone())),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        lv: &ConvLeaves,
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    ) -> Result<NodeId> {
        tape.conv2d(x, lv.w, lv.b, stride, pad, groups)
    }

    pub fn take_grads(&mut self, tape: &Tape<S>, lv: &ConvLeaves) {
        self.w.grad = tape.grad(lv.w).map(<[S]>::to_vec);
        if let (Some(b), Some(id)) = (self.b.as_mut(), lv.b) {
            b.grad = tape.grad(id).map(<[S]>::to_vec);
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<S>, bool)> {
        let mut v = vec![("w", &self.w, true)];
        if let Some(b) = &self.b {
            v.push(("b", b, true));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>, bool)> {
        let mut v = vec![("w", &mut self.w, true)];
        if let Some(b) = &mut self.b {
            v.push(("b", b, true));
        }
        v
    }
}

/// Batchnorm parameters plus running statistics and an update counter (the
/// counter backs the "eval before any training" warning).
#[derive(Clone, Debug)]
pub struct BnParams<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub updates: usize,
}

pub struct BnLeaves {
    pub gamma: NodeId,
    pub beta: NodeId,
}

impl<S: Scalar> BnParams<S> {
    pub fn init(c: usize) -> Self {
        BnParams {
            gamma: ones_grad(&[c]),
            beta: zeros_grad(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::ones(&[c]),
            updates: 0,
        }
    }

    pub fn push_leaves(&self, tape: &mut Tape<S>) -> BnLeaves {
        BnLeaves { gamma: tape.leaf(self.gamma.clone()), beta: tape.leaf(self.beta.clone()) }
    }

    /// Train-mode forward: normalizes by batch statistics and updates the
    /// running statistics in place.
    pub fn forward_train(&mut self, tape: &mut Tape<S>, x: NodeId, lv: &BnLeaves) -> Result<NodeId> {
        self.updates += 1;
        tape.batchnorm_train(x, lv.gamma, lv.beta, self.running_mean.data_mut(), self.running_var.data_mut())
    }

    /// Eval-mode forward: read-only, normalizes by the stored running stats.
    pub fn forward_eval(&self, tape: &mut Tape<S>, x: NodeId, lv: &BnLeaves) -> Result<NodeId> {
        tape.batchnorm_eval(x, lv.gamma, lv.beta, self.running_mean.data(), self.running_var.data())
    }

    pub fn take_grads(&mut self, tape: &Tape<S>, lv: &BnLeaves) {
        self.gamma.grad = tape.grad(lv.gamma).map(<[S]>::to_vec);
        self.beta.grad = tape.grad(lv.beta).map(<[S]>::to_vec);
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<S>, bool)> {
        vec![
            ("gamma", &self.gamma, true),
            ("beta", &self.beta, true),
            ("running_mean", &self.running_mean, false),
            ("running_var", &self.running_var, false),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>, bool)> {
        vec![
            ("gamma", &mut self.gamma, true),
            ("beta", &mut self.beta, true),
            ("running_mean", &mut self.running_mean, false),
            ("running_var", &mut self.running_var, false),
        ]
    }
}

/// Attention condenser: condense (2x2 max pool), embed (depthwise 3x3 then
/// pointwise to `embed_channels`, relu), expand (nearest 2x upsample back to
/// the input extent, pointwise to C), sigmoid attention map A, then gate the
/// input as `x * (A * S)` with the learnable per-channel scale S. With the
/// residual path (default) the output is `x * (A * S) + x`, so S = 0 makes
/// the block an exact identity.
#[derive(Clone, Debug)]
pub struct AttentionCondenserParams<S: Scalar> {
    pub dw_w: Tensor<S>,
    pub dw_b: Tensor<S>,
    pub embed_w: Tensor<S>,
    pub embed_b: Tensor<S>,
    pub expand_w: Tensor<S>,
    pub expand_b: Tensor<S>,
    pub scale: Tensor<S>,
    pub channels: usize,
    pub embed_channels: usize,
    pub residual: bool,
}

pub struct AcondLeaves {
    pub dw_w: NodeId,
    pub dw_b: NodeId,
    pub embed_w: NodeId,
    pub embed_b: NodeId,
    pub expand_w: NodeId,
    pub expand_b: NodeId,
    pub scale: NodeId,
}

impl<S: Scalar> AttentionCondenserParams<S> {
    pub fn init(channels: usize, embed_channels: usize, residual: bool, rng: &mut ChaCha8Rng) -> Self {
        AttentionCondenserParams {
            dw_w: he_normal(&[channels, 1, 3, 3], 9, rng),
            dw_b: zeros_grad(&[channels]),
            embed_w: he_normal(&[embed_channels, channels, 1, 1], channels, rng),
            embed_b: zeros_grad(&[embed_channels]),
            expand_w: he_normal(&[channels, embed_channels, 1, 1], embed_channels, rng),
            expand_b: zeros_grad(&[channels]),
            scale: ones_grad(&[channels]),
            channels,
            embed_channels,
            residual,
        }
    }

    pub fn push_leaves(&self, tape: &mut Tape<S>) -> AcondLeaves {
        AcondLeaves {
            dw_w: tape.leaf(self.dw_w.clone()),
            dw_b: tape.leaf(self.dw_b.clone()),
            embed_w: tape.leaf(self.embed_w.clone()),
            embed_b: tape.leaf(self.embed_b.clone()),
            expand_w: tape.leaf(self.expand_w.clone()),
            expand_b: tape.leaf(self.expand_b.clone()),
            scale: tape.leaf(self.scale.clone()),
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: NodeId, lv: &AcondLeaves) -> Result<NodeId> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        let condensed = tape.max_pool(x, (2, 2), (2, 2))?;
        let dw = tape.conv2d(condensed, lv.dw_w, Some(lv.dw_b), (1, 1), (1, 1), c)?;
        let embedded = tape.conv2d(dw, lv.embed_w, Some(lv.embed_b), (1, 1), (0, 0), 1)?;
        let embedded = tape.relu(embedded);
        let restored = tape.upsample2x(embedded, h, w)?;
        let expanded = tape.conv2d(restored, lv.expand_w, Some(lv.expand_b), (1, 1), (0, 0), 1)?;
        let attention = tape.sigmoid(expanded);
        let gated = tape.channel_scale(attention, lv.scale)?;
        let weighted = tape.mul(x, gated)?;
        if self.residual {
            tape.add(weighted, x)
        } else {
            Ok(weighted)
        }
    }

    pub fn take_grads(&mut self, tape: &Tape<S>, lv: &AcondLeaves) {
        self.dw_w.grad = tape.grad(lv.dw_w).map(<[S]>::to_vec);
        self.dw_b.grad = tape.grad(lv.dw_b).map(<[S]>::to_vec);
        self.embed_w.grad = tape.grad(lv.embed_w).map(<[S]>::to_vec);
        self.embed_b.grad = tape.grad(lv.embed_b).map(<[S]>::to_vec);
        self.expand_w.grad = tape.grad(lv.expand_w).map(<[S]>::to_vec);
        self.expand_b.grad = tape.grad(lv.expand_b).map(<[S]>::to_vec);
        self.scale.grad = tape.grad(lv.scale).map(<[S]>::to_vec);
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<S>, bool)> {
        vec![
            ("dw_w", &self.dw_w, true),
            ("dw_b", &self.dw_b, true),
            ("embed_w", &self.embed_w, true),
            ("embed_b", &self.embed_b, true),
            ("expand_w", &self.expand_w, true),
            ("expand_b", &self.expand_b, true),
            ("scale", &self.scale, true),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>, bool)> {
        vec![
            ("dw_w", &mut self.dw_w, true),
            ("dw_b", &mut self.dw_b, true),
            ("embed_w", &mut self.embed_w, true),
            ("embed_b", &mut self.embed_b, true),
            ("expand_w", &mut self.expand_w, true),
            ("expand_b", &mut self.expand_b, true),
            ("scale", &mut self.scale, true),
        ]
    }
}

/// Depthwise-separable residual block:
/// `y = x + BN2(pointwise(relu(BN1(depthwise3x3(x)))))`, convs bias-free,
/// stride fixed at 1 (all downsampling in a network is anti-aliased).
#[derive(Clone, Debug)]
pub struct ResBlockParams<S: Scalar> {
    pub dw_w: Tensor<S>,
    pub bn1: BnParams<S>,
    pub pw_w: Tensor<S>,
    pub bn2: BnParams<S>,
    pub channels: usize,
}

pub struct ResBlockLeaves {
    pub dw_w: NodeId,
    pub bn1: BnLeaves,
    pub pw_w: NodeId,
    pub bn2: BnLeaves,
}

impl<S: Scalar> ResBlockParams<S> {
    pub fn init(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlockParams {
            dw_w: he_normal(&[channels, 1, 3, 3], 9, rng),
            bn1: BnParams::init(channels),
            pw_w: he_normal(&[channels, channels, 1, 1], channels, rng),
            bn2: BnParams::init(channels),
            channels,
        }
    }

    pub fn push_leaves(&self, tape: &mut Tape<S>) -> ResBlockLeaves {
        ResBlockLeaves {
            dw_w: tape.leaf(self.dw_w.clone()),
            bn1: self.bn1.push_leaves(tape),
            pw_w: tape.leaf(self.pw_w.clone()),
            bn2: self.bn2.push_leaves(tape),
        }
    }

    pub fn forward_train(&mut self, tape: &mut Tape<S>, x: NodeId, lv: &ResBlockLeaves) -> Result<NodeId> {
        let dw = tape.conv2d(x, lv.dw_w, None, (1, 1), (1, 1), self.channels)?;
        let n1 = self.bn1.forward_train(tape, dw, &lv.bn1)?;
        let act = tape.relu(n1);
        let pw = tape.conv2d(act, lv.pw_w, None, (1, 1), (0, 0), 1)?;
        let n2 = self.bn2.forward_train(tape, pw, &lv.bn2)?;
        tape.add(x, n2)
    }

    pub fn forward_eval(&self, tape: &mut Tape<S>, x: NodeId, lv: &ResBlockLeaves) -> Result<NodeId> {
        let dw = tape.conv2d(x, lv.dw_w, None, (1, 1), (1, 1), self.channels)?;
        let n1 = self.bn1.forward_eval(tape, dw, &lv.bn1)?;
        let act = tape.relu(n1);
        let pw = tape.conv2d(act, lv.pw_w, None, (1, 1), (0, 0), 1)?;
        let n2 = self.bn2.forward_eval(tape, pw, &lv.bn2)?;
        tape.add(x, n2)
    }

    pub fn take_grads(&mut self, tape: &Tape<S>, lv: &ResBlockLeaves) {
        self.dw_w.grad = tape.grad(lv.dw_w).map(<[S]>::to_vec);
        self.bn1.take_grads(tape, &lv.bn1);
        self.pw_w.grad = tape.grad(lv.pw_w).map(<[S]>::to_vec);
        self.bn2.take_grads(tape, &lv.bn2);
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<S>, bool)> {
        let mut v = vec![("dw_w".to_string(), &self.dw_w, true)];
        v.extend(self.bn1.tensors().into_iter().map(|(n, t, l)| (format!("bn1.{n}"), t, l)));
        v.push(("pw_w".to_string(), &self.pw_w, true));
        v.extend(self.bn2.tensors().into_iter().map(|(n, t, l)| (format!("bn2.{n}"), t, l)));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>, bool)> {
        let mut v = vec![("dw_w".to_string(), &mut self.dw_w, true)];
        v.extend(self.bn1.tensors_mut().into_iter().map(|(n, t, l)| (format!("bn1.{n}"), t, l)));
        v.push(("pw_w".to_string(), &mut self.pw_w, true));
        v.extend(self.bn2.tensors_mut().into_iter().map(|(n, t, l)| (format!("bn2.{n}"), t, l)));
        v
    }
}

/// Two independent FC heads over the pooled features; each head applies its
/// own softmax and the aggregate is the arithmetic mean of the two rows.
#[derive(Clone, Debug)]
pub struct DualHeadParams<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub in_features: usize,
    pub classes: usize,
}

pub struct DualHeadLeaves {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// The three probability outputs of the dual head.
#[derive(Clone, Copy, Debug)]
pub struct DualHeadOut {
    pub p1: NodeId,
    pub p2: NodeId,
    pub agg: NodeId,
}

impl<S: Scalar> DualHeadParams<S> {
    pub fn init(in_features: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        DualHeadParams {
            w1: he_normal(&[classes, in_features], in_features, rng),
            b1: zeros_grad(&[classes]),
            w2: he_normal(&[classes, in_features], in_features, rng),
            b2: zeros_grad(&[classes]),
            in_features,
            classes,
        }
    }

    pub fn push_leaves(&self, tape: &mut Tape<S>) -> DualHeadLeaves {
        DualHeadLeaves {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, features: NodeId, lv: &DualHeadLeaves) -> Result<DualHeadOut> {
        let l1 = tape.fully_connected(features, lv.w1, lv.b1)?;
        let p1 = tape.softmax(l1)?;
        let l2 = tape.fully_connected(features, lv.w2, lv.b2)?;
        let p2 = tape.softmax(l2)?;
        let sum = tape.add(p1, p2)?;
        let agg = tape.scale(sum, 0.5);
        Ok(DualHeadOut { p1, p2, agg })
    }

    pub fn take_grads(&mut self, tape: &Tape<S>, lv: &DualHeadLeaves) {
        self.w1.grad = tape.grad(lv.w1).map(<[S]>::to_vec);
        self.b1.grad = tape.grad(lv.b1).map(<[S]>::to_vec);
        self.w2.grad = tape.grad(lv.w2).map(<[S]>::to_vec);
        self.b2.grad = tape.grad(lv.b2).map(<[S]>::to_vec);
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<S>, bool)> {
        vec![
            ("w1", &self.w1, true),
            ("b1", &self.b1, true),
            ("w2", &self.w2, true),
            ("b2", &self.b2, true),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>, bool)> {
        vec![
            ("w1", &mut self.w1, true),
            ("b1", &mut self.b1, true),
            ("w2", &mut self.w2, true),
            ("b2", &mut self.b2, true),
        ]
    }
}
