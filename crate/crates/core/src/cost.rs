//! Analytic parameter and FLOPs accounting for an [`ArchSpec`].
//!
//! Counting conventions (recorded in every report):
//! - one multiply-accumulate = `flops_per_mac` FLOPs (1 or 2, default 2);
//!   conv and FC costs are MACs times that factor, biases add no FLOPs
//! - activations, pools, softmax: 1 FLOP per output element
//! - batchnorm: 2 FLOPs per element
//! - elementwise gating and residual/join additions: 1 FLOP per element
//! - nearest-neighbor upsampling: 0 FLOPs
//! - parameters count weights, biases, and batchnorm gamma/beta; running
//!   statistics are buffers, not parameters
//!
//! Counts are per sample (batch size 1). The composite blocks are costed as
//! the exact op sequence they execute, so an instrumented run of the same
//! graph reproduces these totals operation by operation.

use serde::Serialize;

use crate::dsl::{analyze, ArchSpec, OpKind, Shape};
use crate::error::{Error, Result};

pub const DEFAULT_FLOPS_PER_MAC: u64 = 2;

#[derive(Clone, Debug, Serialize)]
pub struct NodeCost {
    pub id: String,
    pub op: &'static str,
    pub params: u64,
    pub flops: u64,
}

/// Exact cost of a spec at its declared input shape.
#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub flops_per_mac: u64,
    pub per_node: Vec<NodeCost>,
}

impl CostReport {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn flops_m(&self) -> f64 {
        self.flops as f64 / 1e6
    }
}

/// Cost under the default 2-FLOPs-per-MAC convention.
pub fn cost(spec: &ArchSpec) -> Result<CostReport> {
    cost_with_convention(spec, DEFAULT_FLOPS_PER_MAC)
}

pub fn cost_with_convention(spec: &ArchSpec, flops_per_mac: u64) -> Result<CostReport> {
    if flops_per_mac != 1 && flops_per_mac != 2 {
        return Err(Error::Config(format!("flops_per_mac must be 1 or 2, got {flops_per_mac}")));
    }
    let a = analyze(spec)?;
    let fpm = flops_per_mac;
    let mut per_node = Vec::with_capacity(spec.nodes.len());

    for &i in &a.order {
        let node = &spec.nodes[i];
        let in_shape = a.in_shapes[&node.id];
        let out_shape = a.shapes[&node.id];
        let mut params = 0u64;
        let mut flops = 0u64;

        // An n-way join sums n-1 times over the joined shape.
        let fan_in = a.preds[&node.id].len() as u64;
        if fan_in > 1 {
            flops += (fan_in - 1) * numel(in_shape);
        }

        match node.op {
            OpKind::Conv { k, c, g, .. } => {
                let (cin, _, _) = expect_spatial(in_shape);
                let (k, c, g, cin) = (k as u64, c as u64, g as u64, cin as u64);
                params += c * (cin / g) * k * k + c;
                flops += fpm * c * out_hw(out_shape) * (cin / g) * k * k;
            }
            OpKind::DwConv { k, .. } => {
                let (cin, _, _) = expect_spatial(in_shape);
                let (k, cin) = (k as u64, cin as u64);
                params += cin * k * k + cin;
                flops += fpm * cin * out_hw(out_shape) * k * k;
            }
            OpKind::PwConv { c, .. } => {
                let (cin, _, _) = expect_spatial(in_shape);
                let (c, cin) = (c as u64, cin as u64);
                params += c * cin + c;
                flops += fpm * c * out_hw(out_shape) * cin;
            }
            OpKind::Aads { k } => {
                let (c, _, _) = expect_spatial(in_shape);
                flops += fpm * c as u64 * out_hw(out_shape) * (k * k) as u64;
            }
            OpKind::Acond { .. } => {
                let (c, h, w) = expect_spatial(in_shape);
                let e = a.embed[&node.id] as u64;
                let (c64, h64, w64) = (c as u64, h as u64, w as u64);
                let (h2, w2) = ((h / 2) as u64, (w / 2) as u64);
                // condense: 2x2 max pool
                flops += c64 * h2 * w2;
                // embed: depthwise 3x3 (+bias) then pointwise to e, relu
                params += c64 * 9 + c64;
                flops += fpm * c64 * h2 * w2 * 9;
                params += e * c64 + e;
                flops += fpm * e * h2 * w2 * c64;
                flops += e * h2 * w2;
                // expand: free upsample, pointwise back to c at full extent, sigmoid
                params += c64 * e + c64;
                flops += fpm * c64 * h64 * w64 * e;
                flops += c64 * h64 * w64;
                // gate: A*S, x*(A*S), residual add; per-channel scale S
                params += c64;
                flops += 3 * c64 * h64 * w64;
            }
            OpKind::ResBlock => {
                let (c, h, w) = expect_spatial(in_shape);
                let (c64, hw) = (c as u64, (h * w) as u64);
                // depthwise 3x3 (bias-free), bn, relu, pointwise (bias-free), bn, add
                params += c64 * 9;
                flops += fpm * c64 * hw * 9;
                params += 2 * c64;
                flops += 2 * c64 * hw;
                flops += c64 * hw;
                params += c64 * c64;
                flops += fpm * c64 * hw * c64;
                params += 2 * c64;
                flops += 2 * c64 * hw;
                flops += c64 * hw;
            }
            OpKind::Relu => {
                flops += numel(out_shape);
            }
            OpKind::Bn => {
                let (c, _, _) = expect_spatial(in_shape);
                params += 2 * c as u64;
                flops += 2 * numel(out_shape);
            }
            OpKind::MaxPool { .. } => {
                flops += numel(out_shape);
            }
            OpKind::Gap => {
                flops += numel(out_shape);
            }
            OpKind::DualHead { classes } => {
                let d = match in_shape {
                    Shape::Flat { d } => d as u64,
                    Shape::Spatial { .. } => unreachable!("analyze enforces flat features"),
                };
                let k = classes as u64;
                // two FC heads, two softmaxes, mean aggregation
                params += 2 * (k * d + k);
                flops += 2 * fpm * k * d;
                flops += 2 * k;
                flops += 2 * k;
            }
        }

        per_node.push(NodeCost { id: node.id.clone(), op: node.op.name(), params, flops });
    }

    let params = per_node.iter().map(|n| n.params).sum();
    let flops = per_node.iter().map(|n| n.flops).sum();
    Ok(CostReport { params, flops, flops_per_mac: fpm, per_node })
}

fn numel(s: Shape) -> u64 {
    match s {
        Shape::Spatial { c, h, w } => (c * h * w) as u64,
        Shape::Flat { d } => d as u64,
    }
}

fn out_hw(s: Shape) -> u64 {
    match s {
        Shape::Spatial { h, w, .. } => (h * w) as u64,
        Shape::Flat { .. } => unreachable!("conv-family output is spatial"),
    }
}

fn expect_spatial(s: Shape) -> (usize, usize, usize) {
    match s {
        Shape::Spatial { c, h, w } => (c, h, w),
        Shape::Flat { .. } => unreachable!("analyze enforces spatial input here"),
    }
}
