//! Compiles an [`ArchSpec`] into an executable, trainable network.
//!
//! Parameter initialization is node-local: each parameterized node draws from
//! its own RNG seeded by `derive_seed(seed, "init:<node id>")`, so a node
//! keeps identical initial weights across mutants of the same spec as long as
//! its id and hyperparameters survive the mutation.

use std::collections::BTreeMap;

use crate::blocks::{
    AcondLeaves, AttentionCondenserParams, BnLeaves, BnParams, ConvLeaves, ConvParams, DualHeadLeaves,
    DualHeadOut, DualHeadParams, ResBlockLeaves, ResBlockParams,
};
use crate::dsl::{analyze, Analysis, ArchSpec, OpKind, Shape, INPUT_ID};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Seed a parameterized node's initializer draws from.
pub fn node_init_seed(graph_seed: u64, node_id: &str) -> u64 {
    derive_seed(graph_seed, &format!("init:{node_id}"))
}

enum NodeParams<S: Scalar> {
    Stateless,
    Conv(ConvParams<S>),
    Bn(BnParams<S>),
    Acond(AttentionCondenserParams<S>),
    Res(ResBlockParams<S>),
    Head(DualHeadParams<S>),
}

enum NodeLeaves {
    Stateless,
    Conv(ConvLeaves),
    Bn(BnLeaves),
    Acond(AcondLeaves),
    Res(ResBlockLeaves),
    Head(DualHeadLeaves),
}

/// One recorded forward execution: the tape plus per-spec-node tape ids.
pub struct ForwardPass<S: Scalar> {
    pub tape: Tape<S>,
    /// Tape output per spec node id.
    pub outputs: BTreeMap<String, NodeId>,
    /// Output of the spec's declared output node.
    pub output: NodeId,
    /// Present when the output node is a dual head.
    pub head: Option<DualHeadOut>,
    leaves: Vec<NodeLeaves>,
}

/// Executable network: a spec, its analysis, and per-node parameters.
pub struct Graph<S: Scalar> {
    spec: ArchSpec,
    analysis: Analysis,
    seed: u64,
    params: Vec<NodeParams<S>>,
}

/// Build a fresh graph; same `(spec, seed)` yields identical parameters.
pub fn compile<S: Scalar>(spec: &ArchSpec, seed: u64) -> Result<Graph<S>> {
    let analysis = analyze(spec)?;
    let mut params = Vec::with_capacity(spec.nodes.len());
    for node in &spec.nodes {
        let mut rng = seeded_rng(node_init_seed(seed, &node.id));
        let in_shape = analysis.in_shapes[&node.id];
        let p = match node.op {
            OpKind::Conv { k, c, g, .. } => {
                let cin = spatial_channels(in_shape);
                NodeParams::Conv(ConvParams::init(c, cin / g, k, k, true, &mut rng))
            }
            OpKind::DwConv { k, .. } => {
                let cin = spatial_channels(in_shape);
                NodeParams::Conv(ConvParams::init(cin, 1, k, k, true, &mut rng))
            }
            OpKind::PwConv { c, .. } => {
                let cin = spatial_channels(in_shape);
                NodeParams::Conv(ConvParams::init(c, cin, 1, 1, true, &mut rng))
            }
            OpKind::Bn => NodeParams::Bn(BnParams::init(spatial_channels(in_shape))),
            OpKind::Acond { .. } => {
                let c = spatial_channels(in_shape);
                NodeParams::Acond(AttentionCondenserParams::init(c, analysis.embed[&node.id], true, &mut rng))
            }
            OpKind::ResBlock => NodeParams::Res(ResBlockParams::init(spatial_channels(in_shape), &mut rng)),
            OpKind::DualHead { classes } => {
                let d = match in_shape {
                    Shape::Flat { d } => d,
                    Shape::Spatial { .. } => unreachable!("analyze rejects spatial dualhead input"),
                };
                NodeParams::Head(DualHeadParams::init(d, classes, &mut rng))
            }
            OpKind::Aads { .. } | OpKind::Relu | OpKind::MaxPool { .. } | OpKind::Gap => NodeParams::Stateless,
        };
        params.push(p);
    }
    Ok(Graph { spec: spec.clone(), analysis, seed, params })
}

fn spatial_channels(shape: Shape) -> usize {
    match shape {
        Shape::Spatial { c, .. } => c,
        Shape::Flat { .. } => unreachable!("analyze rejects flat input to spatial ops"),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn analysis(&self) -> &Analysis {
        &self.analysis
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.spec.input
    }

    /// Class count of the output dual head, if the spec ends in one.
    pub fn classes(&self) -> Option<usize> {
        self.spec.nodes.iter().find(|n| n.id == self.spec.output).and_then(|n| match n.op {
            OpKind::DualHead { classes } => Some(classes),
            _ => None,
        })
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        let (ec, eh, ew) = self.spec.input;
        if (c, h, w) != (ec, eh, ew) {
            return Err(Error::Shape(format!(
                "input shape {c}x{h}x{w} does not match the declared {ec}x{eh}x{ew}"
            )));
        }
        Ok((n, c, h, w))
    }

    /// Resolve and sum a node's incoming edges on the tape.
    fn join(
        tape: &mut Tape<S>,
        outputs: &BTreeMap<String, NodeId>,
        preds: &[String],
        input_node: NodeId,
    ) -> Result<NodeId> {
        let ids: Vec<NodeId> =
            preds.iter().map(|p| if p == INPUT_ID { input_node } else { outputs[p] }).collect();
        let mut acc = ids[0];
        for &rest in &ids[1..] {
            acc = tape.add(acc, rest)?;
        }
        Ok(acc)
    }

    /// Forward in training mode; batchnorm layers update running statistics.
    pub fn forward_train(&mut self, x: &Tensor<S>) -> Result<ForwardPass<S>> {
        let (n, ..) = self.check_input(x)?;
        let mut tape = Tape::new();
        let input_node = tape.leaf(x.clone());
        let mut outputs = BTreeMap::new();
        let mut head = None;
        let mut leaves: Vec<NodeLeaves> = (0..self.spec.nodes.len()).map(|_| NodeLeaves::Stateless).collect();
        let order = self.analysis.order.clone();
        for idx in order {
            let id = self.spec.nodes[idx].id.clone();
            let op = self.spec.nodes[idx].op;
            let preds = self.analysis.preds[&id].clone();
            let xin = Self::join(&mut tape, &outputs, &preds, input_node)?;
            let lv = push_node_leaves(&self.params[idx], &mut tape);
            let out = match (&mut self.params[idx], &lv) {
                (NodeParams::Bn(p), NodeLeaves::Bn(l)) => p.forward_train(&mut tape, xin, l)?,
                (NodeParams::Res(p), NodeLeaves::Res(l)) => p.forward_train(&mut tape, xin, l)?,
                (p, lv) => apply_frozen(&mut tape, op, p, lv, xin, n, &mut head)?,
            };
            leaves[idx] = lv;
            outputs.insert(id, out);
        }
        let output = outputs[&self.spec.output];
        Ok(ForwardPass { tape, outputs, output, head, leaves })
    }

    /// Forward in evaluation mode; never mutates parameters or statistics.
    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<ForwardPass<S>> {
        let (n, ..) = self.check_input(x)?;
        let mut tape = Tape::new();
        let input_node = tape.leaf(x.clone());
        let mut outputs = BTreeMap::new();
        let mut head = None;
        let mut leaves: Vec<NodeLeaves> = (0..self.spec.nodes.len()).map(|_| NodeLeaves::Stateless).collect();
        for &idx in &self.analysis.order {
            let id = &self.spec.nodes[idx].id;
            let op = self.spec.nodes[idx].op;
            let xin = Self::join(&mut tape, &outputs, &self.analysis.preds[id], input_node)?;
            let lv = push_node_leaves(&self.params[idx], &mut tape);
            let out = match (&self.params[idx], &lv) {
                (NodeParams::Bn(p), NodeLeaves::Bn(l)) => p.forward_eval(&mut tape, xin, l)?,
                (NodeParams::Res(p), NodeLeaves::Res(l)) => p.forward_eval(&mut tape, xin, l)?,
                (p, lv) => apply_frozen_ref(&mut tape, op, p, lv, xin, n, &mut head)?,
            };
            leaves[idx] = lv;
            outputs.insert(id.clone(), out);
        }
        let output = outputs[&self.spec.output];
        Ok(ForwardPass { tape, outputs, output, head, leaves })
    }

    /// Copy gradients from a backward-completed pass into the parameters.
    pub fn take_grads(&mut self, pass: &ForwardPass<S>) {
        for (p, lv) in self.params.iter_mut().zip(&pass.leaves) {
            match (p, lv) {
                (NodeParams::Conv(p), NodeLeaves::Conv(l)) => p.take_grads(&pass.tape, l),
                (NodeParams::Bn(p), NodeLeaves::Bn(l)) => p.take_grads(&pass.tape, l),
                (NodeParams::Acond(p), NodeLeaves::Acond(l)) => p.take_grads(&pass.tape, l),
                (NodeParams::Res(p), NodeLeaves::Res(l)) => p.take_grads(&pass.tape, l),
                (NodeParams::Head(p), NodeLeaves::Head(l)) => p.take_grads(&pass.tape, l),
                _ => {}
            }
        }
    }

    /// Learnable parameters in spec-node order, for the optimizer.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for p in &mut self.params {
            for (_, t, learnable) in node_tensors_mut(p) {
                if learnable {
                    out.push(t);
                }
            }
        }
        out
    }

    /// Every tensor (learnable and running statistics), named
    /// `<node id>.<tensor>`, in spec-node order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (node, p) in self.spec.nodes.iter().zip(&self.params) {
            for (name, t, _) in node_tensors(p) {
                out.push((format!("{}.{}", node.id, name), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (node, p) in self.spec.nodes.iter().zip(&mut self.params) {
            for (name, t, _) in node_tensors_mut(p) {
                out.push((format!("{}.{}", node.id, name), t));
            }
        }
        out
    }

    /// Warnings that make evaluation results suspect (e.g. batchnorm layers
    /// whose running statistics were never updated).
    pub fn eval_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (node, p) in self.spec.nodes.iter().zip(&self.params) {
            let stale = match p {
                NodeParams::Bn(b) => b.updates == 0,
                NodeParams::Res(r) => r.bn1.updates == 0 || r.bn2.updates == 0,
                _ => false,
            };
            if stale {
                out.push(format!(
                    "batchnorm in `{}` has never seen a training batch; eval uses init statistics",
                    node.id
                ));
            }
        }
        out
    }

    /// Declare running statistics valid, e.g. after loading trained weights.
    pub fn mark_stats_loaded(&mut self) {
        for p in &mut self.params {
            match p {
                NodeParams::Bn(b) => b.updates = b.updates.max(1),
                NodeParams::Res(r) => {
                    r.bn1.updates = r.bn1.updates.max(1);
                    r.bn2.updates = r.bn2.updates.max(1);
                }
                _ => {}
            }
        }
    }
}

fn push_node_leaves<S: Scalar>(p: &NodeParams<S>, tape: &mut Tape<S>) -> NodeLeaves {
    match p {
        NodeParams::Stateless => NodeLeaves::Stateless,
        NodeParams::Conv(p) => NodeLeaves::Conv(p.push_leaves(tape)),
        NodeParams::Bn(p) => NodeLeaves::Bn(p.push_leaves(tape)),
        NodeParams::Acond(p) => NodeLeaves::Acond(p.push_leaves(tape)),
        NodeParams::Res(p) => NodeLeaves::Res(p.push_leaves(tape)),
        NodeParams::Head(p) => NodeLeaves::Head(p.push_leaves(tape)),
    }
}

/// Apply any op whose forward does not touch mutable state. Batchnorm-bearing
/// nodes are handled by the callers' mode-specific arms before reaching here.
fn apply_frozen<S: Scalar>(
    tape: &mut Tape<S>,
    op: OpKind,
    p: &mut NodeParams<S>,
    lv: &NodeLeaves,
    xin: NodeId,
    batch: usize,
    head: &mut Option<DualHeadOut>,
) -> Result<NodeId> {
    apply_frozen_ref(tape, op, p, lv, xin, batch, head)
}

fn apply_frozen_ref<S: Scalar>(
    tape: &mut Tape<S>,
    op: OpKind,
    p: &NodeParams<S>,
    lv: &NodeLeaves,
    xin: NodeId,
    batch: usize,
    head: &mut Option<DualHeadOut>,
) -> Result<NodeId> {
    match (op, p, lv) {
        (OpKind::Conv { k, s, g, .. }, NodeParams::Conv(p), NodeLeaves::Conv(l)) => {
            p.forward(tape, xin, l, (s, s), (k / 2, k / 2), g)
        }
        (OpKind::DwConv { k, s }, NodeParams::Conv(p), NodeLeaves::Conv(l)) => {
            let (_, c, _, _) = tape.value(xin).dims4()?;
            p.forward(tape, xin, l, (s, s), (k / 2, k / 2), c)
        }
        (OpKind::PwConv { s, .. }, NodeParams::Conv(p), NodeLeaves::Conv(l)) => {
            p.forward(tape, xin, l, (s, s), (0, 0), 1)
        }
        (OpKind::Aads { k }, ..) => tape.blur_down(xin, k),
        (OpKind::Acond { .. }, NodeParams::Acond(p), NodeLeaves::Acond(l)) => p.forward(tape, xin, l),
        (OpKind::Relu, ..) => Ok(tape.relu(xin)),
        (OpKind::MaxPool { k, s }, ..) => tape.max_pool(xin, (k, k), (s, s)),
        (OpKind::Gap, ..) => {
            let pooled = tape.global_avg_pool(xin)?;
            let c = tape.value(pooled).shape()[1];
            tape.reshape(pooled, &[batch, c])
        }
        (OpKind::DualHead { .. }, NodeParams::Head(p), NodeLeaves::Head(l)) => {
            let out = p.forward(tape, xin, l)?;
            let agg = out.agg;
            *head = Some(out);
            Ok(agg)
        }
        _ => unreachable!("op/params mismatch: {}", op.name()),
    }
}

fn node_tensors<S: Scalar>(p: &NodeParams<S>) -> Vec<(String, &Tensor<S>, bool)> {
    match p {
        NodeParams::Stateless => Vec::new(),
        NodeParams::Conv(p) => owned_names(p.tensors()),
        NodeParams::Bn(p) => owned_names(p.tensors()),
        NodeParams::Acond(p) => owned_names(p.tensors()),
        NodeParams::Res(p) => p.tensors(),
        NodeParams::Head(p) => owned_names(p.tensors()),
    }
}

fn node_tensors_mut<S: Scalar>(p: &mut NodeParams<S>) -> Vec<(String, &mut Tensor<S>, bool)> {
    match p {
        NodeParams::Stateless => Vec::new(),
        NodeParams::Conv(p) => owned_names_mut(p.tensors_mut()),
        NodeParams::Bn(p) => owned_names_mut(p.tensors_mut()),
        NodeParams::Acond(p) => owned_names_mut(p.tensors_mut()),
        NodeParams::Res(p) => p.tensors_mut(),
        NodeParams::Head(p) => owned_names_mut(p.tensors_mut()),
    }
}

fn owned_names<T>(v: Vec<(&'static str, T, bool)>) -> Vec<(String, T, bool)> {
    v.into_iter().map(|(n, t, l)| (n.to_string(), t, l)).collect()
}

fn owned_names_mut<T>(v: Vec<(&'static str, T, bool)>) -> Vec<(String, T, bool)> {
    owned_names(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_arch;

    const SMALL: &str = "input 1x8x8\nnode stem conv k=3,s=1,c=4\nnode b1 resblock\nnode a1 acond\n\
                         node d1 aads k=3\nnode pool gap\nnode head dualhead c=2\n\
                         edge input stem\nedge stem b1\nedge b1 a1\nedge a1 d1\nedge d1 pool\nedge pool head\n\
                         output head\n";

    fn ramp(n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, c, h, w], |i| (i % 17) as f64 / 17.0 - 0.3)
    }

    #[test]
    fn compile_is_deterministic() {
        let spec = parse_arch(SMALL).unwrap();
        let g1: Graph<f64> = compile(&spec, 11).unwrap();
        let g2: Graph<f64> = compile(&spec, 11).unwrap();
        let (t1, t2) = (g1.named_tensors(), g2.named_tensors());
        assert_eq!(t1.len(), t2.len());
        for ((n1, a), (n2, b)) in t1.iter().zip(&t2) {
            assert_eq!(n1, n2);
            assert_eq!(a.data(), b.data(), "{n1} differs across compiles");
        }
        let g3: Graph<f64> = compile(&spec, 12).unwrap();
        let any_diff = g1
            .named_tensors()
            .iter()
            .zip(g3.named_tensors())
            .any(|((_, a), (_, b))| a.data() != b.data());
        assert!(any_diff, "different seeds must differ somewhere");
    }

    #[test]
    fn forward_emits_probability_rows() {
        let spec = parse_arch(SMALL).unwrap();
        let mut g: Graph<f64> = compile(&spec, 3).unwrap();
        let x = ramp(2, 1, 8, 8);
        let pass = g.forward_train(&x).unwrap();
        let out = pass.tape.value(pass.output);
        assert_eq!(out.shape(), &[2, 2]);
        for row in out.data().chunks(2) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
        }
        assert!(pass.head.is_some());
    }

    #[test]
    fn eval_does_not_mutate() {
        let spec = parse_arch(SMALL).unwrap();
        let mut g: Graph<f64> = compile(&spec, 3).unwrap();
        let x = ramp(1, 1, 8, 8);
        // One train pass so running stats are nontrivial.
        g.forward_train(&x).unwrap();
        let before: Vec<Vec<f64>> = g.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
        let p1 = g.forward_eval(&x).unwrap();
        let p2 = g.forward_eval(&x).unwrap();
        let after: Vec<Vec<f64>> = g.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after, "eval must not touch any tensor");
        assert_eq!(p1.tape.value(p1.output).data(), p2.tape.value(p2.output).data());
    }

    #[test]
    fn train_and_eval_modes_diverge_only_via_bn() {
        // With batch statistics equal to running statistics the two modes
        // agree; after one update on skewed data they differ.
        let spec = parse_arch(SMALL).unwrap();
        let mut g: Graph<f64> = compile(&spec, 5).unwrap();
        let x = ramp(2, 1, 8, 8);
        let train_out = g.forward_train(&x).unwrap();
        let eval_out = g.forward_eval(&x).unwrap();
        let a = train_out.tape.value(train_out.output).data().to_vec();
        let b = eval_out.tape.value(eval_out.output).data().to_vec();
        assert_ne!(a, b, "post-update eval should use running, not batch, stats");
    }

    #[test]
    fn backward_fills_all_learnable_grads() {
        let spec = parse_arch(SMALL).unwrap();
        let mut g: Graph<f64> = compile(&spec, 7).unwrap();
        let x = ramp(2, 1, 8, 8);
        let mut pass = g.forward_train(&x).unwrap();
        let loss = pass.tape.sum_all(pass.output);
        pass.tape.backward(loss).unwrap();
        g.take_grads(&pass);
        for p in g.params_mut() {
            assert!(p.grad.is_some(), "learnable parameter missing gradient");
        }
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let spec = parse_arch(SMALL).unwrap();
        let g: Graph<f64> = compile(&spec, 0).unwrap();
        let x = ramp(1, 1, 4, 4);
        assert!(matches!(g.forward_eval(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn join_sums_parallel_columns() {
        let text = "input 1x6x6\nnode stem conv k=3,s=1,c=4\nnode l relu\nnode r relu\nnode j relu\n\
                    node pool gap\nnode head dualhead c=2\n\
                    edge input stem\nedge stem l\nedge stem r\nedge l j\nedge r j\nedge j pool\nedge pool head\n\
                    column l\ncolumn r\noutput head\n";
        let spec = parse_arch(text).unwrap();
        let g: Graph<f64> = compile(&spec, 1).unwrap();
        let x = ramp(1, 1, 6, 6);
        let pass = g.forward_eval(&x).unwrap();
        let stem = pass.tape.value(pass.outputs["stem"]).data().to_vec();
        let joined = pass.tape.value(pass.outputs["j"]).data().to_vec();
        // l == r == relu(stem); join sums them, then j applies relu (no-op on
        // the nonnegative sum), so j == 2*relu(stem).
        for (s, j) in stem.iter().zip(&joined) {
            assert!((2.0 * s.max(0.0) - j).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_bn_warning_clears_after_training_or_load() {
        let spec = parse_arch(SMALL).unwrap();
        let mut g: Graph<f64> = compile(&spec, 2).unwrap();
        assert!(!g.eval_warnings().is_empty());
        let mut h: Graph<f64> = compile(&spec, 2).unwrap();
        h.mark_stats_loaded();
        assert!(h.eval_warnings().is_empty());
        g.forward_train(&ramp(1, 1, 8, 8)).unwrap();
        assert!(g.eval_warnings().is_empty());
    }
}
