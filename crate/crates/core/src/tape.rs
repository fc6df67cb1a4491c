//! Reverse-mode autodiff tape.
//!
//! Recording is eager: each method runs the forward kernel immediately, saves
//! whatever the backward pass needs (argmax indices, normalized activations),
//! and returns a [`NodeId`]. [`Tape::backward`] then walks the records in
//! exact reverse order, so every input gradient is fully accumulated before
//! its producer is visited. A tape lives for one forward/backward pass; the
//! surrounding graph re-records leaves from its master parameters each batch.

use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvDims};
use crate::ops::elementwise as ew;
use crate::ops::linear::{fc_backward, fc_check, fc_forward};
use crate::ops::norm::{bn_backward, bn_forward_eval, bn_forward_train, softmax_backward, softmax_forward, BnSaved};
use crate::ops::pool::{
    global_avg_pool_backward, global_avg_pool_forward, max_pool_backward, max_pool_forward,
    max_pool_out_dims,
};
use crate::ops::resample::{
    blur_down_backward, blur_down_forward, blur_down_out_dims, upsample2x_backward,
    upsample2x_forward,
};
use crate::ops::act;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a recorded value; only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S: Scalar> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, dims: ConvDims },
    FullyConnected { x: NodeId, w: NodeId, b: NodeId, n: usize, d: usize, k: usize },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId, n: usize, k: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, n: usize, c: usize, h: usize, w: usize, saved: BnSaved<S> },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    GlobalAvgPool { x: NodeId, n: usize, c: usize, h: usize, w: usize },
    BlurDown { x: NodeId, filter_size: usize, n: usize, c: usize, h: usize, w: usize },
    Upsample2x { x: NodeId, n: usize, c: usize, h_in: usize, w_in: usize, h_out: usize, w_out: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ChannelScale { x: NodeId, s: NodeId, n: usize, c: usize, plane: usize },
    Scale { x: NodeId, k: S },
    LnClamped { x: NodeId, eps: S },
    Abs { x: NodeId },
    SumAll { x: NodeId },
    Reshape { x: NodeId },
}

impl<S: Scalar> Op<S> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                if let Some(b) = b {
                    v.push(*b);
                }
                v
            }
            Op::FullyConnected { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ChannelScale { x, s, .. } => vec![*x, *s],
            Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Softmax { x, .. }
            | Op::MaxPool { x, .. }
            | Op::GlobalAvgPool { x, .. }
            | Op::BlurDown { x, .. }
            | Op::Upsample2x { x, .. }
            | Op::Scale { x, .. }
            | Op::LnClamped { x, .. }
            | Op::Abs { x }
            | Op::SumAll { x }
            | Op::Reshape { x } => vec![*x],
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
    /// Tracked only under debug assertions; `true` in release builds.
    finite: bool,
}

/// Ordered record of op applications over one forward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if it was on
    /// the differentiation path.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[S] {
        self.nodes[id.0].value.data()
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> NodeId {
        let inputs = op.inputs();
        let needs_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => inputs.iter().any(|i| self.ng(*i)),
        };
        let finite = if cfg!(debug_assertions) {
            let inputs_finite = inputs.iter().all(|i| self.nodes[i.0].finite);
            let out_finite = value.all_finite();
            // A leaf computes nothing, so it may carry non-finite data (e.g.
            // weights that diverged); only derived ops are held to this.
            debug_assert!(
                matches!(op, Op::Leaf) || !inputs_finite || out_finite,
                "forward op produced non-finite values from finite inputs"
            );
            out_finite
        } else {
            true
        };
        self.nodes.push(Node { value, op, needs_grad, finite });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input or parameter value. The tensor's `requires_grad` flag
    /// marks it as a gradient target.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    ) -> Result<NodeId> {
        let dims = ConvDims::new(self.shape(x), self.shape(w), stride, pad, groups)?;
        if let Some(b) = b {
            if self.nodes[b.0].value.numel() != dims.cout {
                return Err(Error::Shape(format!(
                    "conv2d bias has {} elements, expected Cout={}",
                    self.nodes[b.0].value.numel(),
                    dims.cout
                )));
            }
        }
        let mut out = Tensor::zeros(&[dims.n, dims.cout, dims.h_out, dims.w_out]);
        conv2d_forward(
            &dims,
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
            out.data_mut(),
        );
        Ok(self.push(out, Op::Conv2d { x, w, b, dims }))
    }

    pub fn fully_connected(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d, k) = fc_check(self.shape(x), self.shape(w), self.nodes[b.0].value.numel())?;
        let mut out = Tensor::zeros(&[n, k]);
        fc_forward(n, d, k, self.data(x), self.data(w), self.data(b), out.data_mut());
        Ok(self.push(out, Op::FullyConnected { x, w, b, n, d, k }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = Tensor::zeros(self.shape(x));
        act::relu_forward(self.data(x), out.data_mut());
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = Tensor::zeros(self.shape(x));
        act::sigmoid_forward(self.data(x), out.data_mut());
        self.push(out, Op::Sigmoid { x })
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, k) = self.nodes[x.0].value.dims2()?;
        let mut out = Tensor::zeros(&[n, k]);
        softmax_forward(n, k, self.data(x), out.data_mut());
        Ok(self.push(out, Op::Softmax { x, n, k }))
    }

    /// Train-mode batchnorm; updates the caller's running statistics in place.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut [S],
        running_var: &mut [S],
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
        self.bn_param_check(gamma, beta, c, running_mean.len(), running_var.len())?;
        let mut out = Tensor::zeros(self.shape(x));
        let saved = bn_forward_train(
            n,
            c,
            h,
            w,
            self.data(x),
            self.data(gamma),
            self.data(beta),
            running_mean,
            running_var,
            out.data_mut(),
        );
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, n, c, h, w, saved }))
    }

    /// Eval-mode batchnorm; normalizes by the provided running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[S],
        running_var: &[S],
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
        self.bn_param_check(gamma, beta, c, running_mean.len(), running_var.len())?;
        let mut out = Tensor::zeros(self.shape(x));
        let saved = bn_forward_eval(
            n,
            c,
            h,
            w,
            self.data(x),
            self.data(gamma),
            self.data(beta),
            running_mean,
            running_var,
            out.data_mut(),
        );
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, n, c, h, w, saved }))
    }

    fn bn_param_check(&self, gamma: NodeId, beta: NodeId, c: usize, rm: usize, rv: usize) -> Result<()> {
        let g = self.nodes[gamma.0].value.numel();
        let b = self.nodes[beta.0].value.numel();
        if g != c || b != c || rm != c || rv != c {
            return Err(Error::Shape(format!(
                "batchnorm over C={c} channels got gamma {g}, beta {b}, running stats {rm}/{rv}"
            )));
        }
        Ok(())
    }

    pub fn max_pool(&mut self, x: NodeId, k: (usize, usize), stride: (usize, usize)) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
        let (h_out, w_out) = max_pool_out_dims(h, w, k, stride)?;
        let mut out = Tensor::zeros(&[n, c, h_out, w_out]);
        let mut argmax = vec![0usize; out.numel()];
        max_pool_forward(n, c, h, w, k, stride, self.data(x), out.data_mut(), &mut argmax);
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// `[N,C,H,W]` -> `[N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
        let mut out = Tensor::zeros(&[n, c, 1, 1]);
        global_avg_pool_forward(n, c, h, w, self.data(x), out.data_mut());
        Ok(self.push(out, Op::GlobalAvgPool { x, n, c, h, w }))
    }

    /// Anti-aliased downsample: fixed binomial blur then stride-2 subsample.
    pub fn blur_down(&mut self, x: NodeId, filter_size: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("aads needs H,W >= 2, got {h}x{w}")));
        }
        let (h_out, w_out) = blur_down_out_dims(h, w);
        let mut out = Tensor::zeros(&[n, c, h_out, w_out]);
        blur_down_forward(n, c, h, w, filter_size, self.data(x), out.data_mut())?;
        Ok(self.push(out, Op::BlurDown { x, filter_size, n, c, h, w }))
    }

    /// Nearest-neighbor 2x upsample, clamped to the requested output extent.
    pub fn upsample2x(&mut self, x: NodeId, h_out: usize, w_out: usize) -> Result<NodeId> {
        let (n, c, h_in, w_in) = self.nodes[x.0].value.dims4()?;
        // A floor-halved extent restores to 2*h or 2*h+1 (odd originals).
        if h_out < h_in || h_out > 2 * h_in + 1 || w_out < w_in || w_out > 2 * w_in + 1 {
            return Err(Error::Shape(format!(
                "upsample2x target {h_out}x{w_out} out of range for input {h_in}x{w_in}"
            )));
        }
        let mut out = Tensor::zeros(&[n, c, h_out, w_out]);
        upsample2x_forward(n, c, h_in, w_in, h_out, w_out, self.data(x), out.data_mut());
        Ok(self.push(out, Op::Upsample2x { x, n, c, h_in, w_in, h_out, w_out }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut out = Tensor::zeros(self.shape(a));
        ew::add(self.data(a), self.data(b), out.data_mut());
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let mut out = Tensor::zeros(self.shape(a));
        ew::sub(self.data(a), self.data(b), out.data_mut());
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let mut out = Tensor::zeros(self.shape(a));
        ew::mul(self.data(a), self.data(b), out.data_mut());
        Ok(self.push(out, Op::Mul { a, b }))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} operands differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `out[n,c,h,w] = x[n,c,h,w] * s[c]` (per-channel broadcast).
    pub fn channel_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
        if self.nodes[s.0].value.numel() != c {
            return Err(Error::Shape(format!(
                "channel scale has {} elements, input has C={c}",
                self.nodes[s.0].value.numel()
            )));
        }
        let mut out = Tensor::zeros(self.shape(x));
        ew::channel_scale_forward(n, c, h * w, self.data(x), self.data(s), out.data_mut());
        Ok(self.push(out, Op::ChannelScale { x, s, n, c, plane: h * w }))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let k = S::fromf(k);
        let mut out = Tensor::zeros(self.shape(x));
        ew::scale(self.data(x), k, out.data_mut());
        self.push(out, Op::Scale { x, k })
    }

    /// `ln(max(x, eps))`; the clamp keeps cross-entropy finite at p = 0.
    pub fn ln_clamped(&mut self, x: NodeId, eps: f64) -> NodeId {
        let eps = S::fromf(eps);
        let mut out = Tensor::zeros(self.shape(x));
        act::ln_clamped_forward(self.data(x), eps, out.data_mut());
        self.push(out, Op::LnClamped { x, eps })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let mut out = Tensor::zeros(self.shape(x));
        act::abs_forward(self.data(x), out.data_mut());
        self.push(out, Op::Abs { x })
    }

    /// Sum of all elements; returns a scalar (shape `[1]`) node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(ew::sum_all(self.data(x)));
        self.push(out, Op::SumAll { x })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let out = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Accumulate dLoss/dNode into every node on the path from `loss` to the
    /// leaves. Nodes recorded with `requires_grad` end up with their gradient
    /// in `value.grad`; the others keep it too for inspection.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..count).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = g;
        }
        Ok(())
    }

    /// Route one node's output gradient to its inputs. Every target buffer is
    /// zero-initialized on first touch and accumulated into, so nodes with
    /// several consumers sum their incoming gradients.
    fn propagate(&self, i: usize, gy: &[S], grads: &mut [Option<Vec<S>>]) {
        // Borrow-split helper: gradient buffer for `id`, made mutable only if
        // that input participates in differentiation.
        macro_rules! gbuf {
            ($id:expr) => {
                if self.ng($id) {
                    Some(
                        grads[$id.0]
                            .get_or_insert_with(|| vec![S::zero(); self.nodes[$id.0].value.numel()])
                            .as_mut_slice(),
                    )
                } else {
                    None
                }
            };
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                // The three buffers live in disjoint slots of `grads`; take
                // them one at a time to keep the borrows obviously disjoint.
                let mut gx = if self.ng(*x) {
                    Some(std::mem::take(&mut grads[x.0]).unwrap_or_else(|| vec![S::zero(); xd.len()]))
                } else {
                    None
                };
                let mut gw = if self.ng(*w) {
                    Some(std::mem::take(&mut grads[w.0]).unwrap_or_else(|| vec![S::zero(); wd.len()]))
                } else {
                    None
                };
                let mut gb = match b {
                    Some(b) if self.ng(*b) => Some(
                        std::mem::take(&mut grads[b.0])
                            .unwrap_or_else(|| vec![S::zero(); self.nodes[b.0].value.numel()]),
                    ),
                    _ => None,
                };
                conv2d_backward(
                    dims,
                    xd,
                    wd,
                    gy,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(g) = gx {
                    grads[x.0] = Some(g);
                }
                if let Some(g) = gw {
                    grads[w.0] = Some(g);
                }
                if let (Some(b), Some(g)) = (b, gb) {
                    grads[b.0] = Some(g);
                }
            }
            Op::FullyConnected { x, w, b, n, d, k } => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut gx = if self.ng(*x) {
                    Some(std::mem::take(&mut grads[x.0]).unwrap_or_else(|| vec![S::zero(); xd.len()]))
                } else {
                    None
                };
                let mut gw = if self.ng(*w) {
                    Some(std::mem::take(&mut grads[w.0]).unwrap_or_else(|| vec![S::zero(); wd.len()]))
                } else {
                    None
                };
                let mut gb = if self.ng(*b) {
                    Some(std::mem::take(&mut grads[b.0]).unwrap_or_else(|| vec![S::zero(); *k]))
                } else {
                    None
                };
                fc_backward(*n, *d, *k, xd, wd, gy, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(g) = gx {
                    grads[x.0] = Some(g);
                }
                if let Some(g) = gw {
                    grads[w.0] = Some(g);
                }
                if let Some(g) = gb {
                    grads[b.0] = Some(g);
                }
            }
            Op::Relu { x } => {
                if let Some(gx) = gbuf!(*x) {
                    act::relu_backward(self.data(*x), gy, gx);
                }
            }
            Op::Sigmoid { x } => {
                if let Some(gx) = gbuf!(*x) {
                    act::sigmoid_backward(self.nodes[i].value.data(), gy, gx);
                }
            }
            Op::Softmax { x, n, k } => {
                if let Some(gx) = gbuf!(*x) {
                    softmax_backward(*n, *k, self.nodes[i].value.data(), gy, gx);
                }
            }
            Op::BatchNorm { x, gamma, beta, n, c, h, w, saved } => {
                let gd = self.data(*gamma);
                let mut gx = if self.ng(*x) {
                    Some(
                        std::mem::take(&mut grads[x.0])
                            .unwrap_or_else(|| vec![S::zero(); self.nodes[x.0].value.numel()]),
                    )
                } else {
                    None
                };
                let mut gg = if self.ng(*gamma) {
                    Some(std::mem::take(&mut grads[gamma.0]).unwrap_or_else(|| vec![S::zero(); *c]))
                } else {
                    None
                };
                let mut gb = if self.ng(*beta) {
                    Some(std::mem::take(&mut grads[beta.0]).unwrap_or_else(|| vec![S::zero(); *c]))
                } else {
                    None
                };
                bn_backward(*n, *c, *h, *w, saved, gd, gy, gx.as_deref_mut(), gg.as_deref_mut(), gb.as_deref_mut());
                if let Some(g) = gx {
                    grads[x.0] = Some(g);
                }
                if let Some(g) = gg {
                    grads[gamma.0] = Some(g);
                }
                if let Some(g) = gb {
                    grads[beta.0] = Some(g);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = gbuf!(*x) {
                    max_pool_backward(gy, argmax, gx);
                }
            }
            Op::GlobalAvgPool { x, n, c, h, w } => {
                if let Some(gx) = gbuf!(*x) {
                    global_avg_pool_backward(*n, *c, *h, *w, gy, gx);
                }
            }
            Op::BlurDown { x, filter_size, n, c, h, w } => {
                if let Some(gx) = gbuf!(*x) {
                    // Filter size was validated at record time.
                    blur_down_backward(*n, *c, *h, *w, *filter_size, gy, gx)
                        .expect("filter size validated on record");
                }
            }
            Op::Upsample2x { x, n, c, h_in, w_in, h_out, w_out } => {
                if let Some(gx) = gbuf!(*x) {
                    upsample2x_backward(*n, *c, *h_in, *w_in, *h_out, *w_out, gy, gx);
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = gbuf!(*a) {
                    ew::accumulate_scaled(ga, gy, S::one());
                }
                if let Some(gb) = gbuf!(*b) {
                    ew::accumulate_scaled(gb, gy, S::one());
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = gbuf!(*a) {
                    ew::accumulate_scaled(ga, gy, S::one());
                }
                if let Some(gb) = gbuf!(*b) {
                    ew::accumulate_scaled(gb, gy, -S::one());
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = gbuf!(*a) {
                    ew::accumulate_product(ga, gy, self.data(*b));
                }
                if let Some(gb) = gbuf!(*b) {
                    ew::accumulate_product(gb, gy, self.data(*a));
                }
            }
            Op::ChannelScale { x, s, n, c, plane } => {
                let (xd, sd) = (self.data(*x), self.data(*s));
                let mut gx = if self.ng(*x) {
                    Some(std::mem::take(&mut grads[x.0]).unwrap_or_else(|| vec![S::zero(); xd.len()]))
                } else {
                    None
                };
                let mut gs = if self.ng(*s) {
                    Some(std::mem::take(&mut grads[s.0]).unwrap_or_else(|| vec![S::zero(); *c]))
                } else {
                    None
                };
                ew::channel_scale_backward(*n, *c, *plane, xd, sd, gy, gx.as_deref_mut(), gs.as_deref_mut());
                if let Some(g) = gx {
                    grads[x.0] = Some(g);
                }
                if let Some(g) = gs {
                    grads[s.0] = Some(g);
                }
            }
            Op::Scale { x, k } => {
                if let Some(gx) = gbuf!(*x) {
                    ew::accumulate_scaled(gx, gy, *k);
                }
            }
            Op::LnClamped { x, eps } => {
                if let Some(gx) = gbuf!(*x) {
                    act::ln_clamped_backward(self.data(*x), *eps, gy, gx);
                }
            }
            Op::Abs { x } => {
                if let Some(gx) = gbuf!(*x) {
                    act::abs_backward(self.data(*x), gy, gx);
                }
            }
            Op::SumAll { x } => {
                if let Some(gx) = gbuf!(*x) {
                    for v in gx.iter_mut() {
                        *v = *v + gy[0];
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = gbuf!(*x) {
                    ew::accumulate_scaled(gx, gy, S::one());
                }
            }
        }
    }
}
