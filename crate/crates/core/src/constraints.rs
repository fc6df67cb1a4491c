//! The feasibility indicator over architectures.
//!
//! Three checks, each with a stable violation code:
//! - `C1`: total FLOPs must be strictly under the budget (default 100M,
//!   2-FLOPs-per-MAC convention).
//! - `C2`: no pointwise (1x1) convolution may stride, anywhere in the graph;
//!   a strided 1x1 conv discards spatial samples without aggregating them.
//! - `C3`: after the input layer, only anti-aliased downsampling nodes may
//!   reduce spatial extent. The single node fed by the raw input is the input
//!   layer and may downsample by any means. Global average pooling is the
//!   head's feature reduction, not a downsampling stage, and the max pool
//!   inside an attention condenser restores its extent (net reduction zero),
//!   so neither is flagged.

use serde::Serialize;

use crate::cost::cost;
use crate::dsl::{analyze, ArchSpec, OpKind, Shape};
use crate::error::Result;

/// Default FLOPs budget.
pub const DEFAULT_BUDGET_FLOPS: u64 = 100_000_000;

#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    /// `C1`, `C2`, or `C3`.
    pub code: &'static str,
    /// Offending node, when the violation is node-local.
    pub node: Option<String>,
    pub message: String,
}

/// Outcome of the indicator; `feasible` is true exactly when no violation
/// was found.
#[derive(Clone, Debug, Serialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub violations: Vec<Violation>,
    pub flops: u64,
    pub budget_flops: u64,
}

/// Evaluate the indicator for `spec` against a FLOPs budget.
pub fn validate_constraints(spec: &ArchSpec, budget_flops: u64) -> Result<FeasibilityReport> {
    let a = analyze(spec)?;
    let report = cost(spec)?;
    let mut violations = Vec::new();

    if report.flops >= budget_flops {
        violations.push(Violation {
            code: "C1",
            node: None,
            message: format!("total {} FLOPs is not under the budget of {}", report.flops, budget_flops),
        });
    }

    for node in &spec.nodes {
        let pointwise_stride = match node.op {
            OpKind::Conv { k: 1, s, .. } if s > 1 => Some(s),
            OpKind::PwConv { s, .. } if s > 1 => Some(s),
            _ => None,
        };
        if let Some(s) = pointwise_stride {
            violations.push(Violation {
                code: "C2",
                node: Some(node.id.clone()),
                message: format!("`{}` is a pointwise convolution with stride {s}", node.id),
            });
        }
    }

    for node in &spec.nodes {
        if node.id == a.stem || matches!(node.op, OpKind::Aads { .. }) {
            continue;
        }
        let reduces = match (a.in_shapes[&node.id], a.shapes[&node.id]) {
            (Shape::Spatial { h: h0, w: w0, .. }, Shape::Spatial { h: h1, w: w1, .. }) => h1 < h0 || w1 < w0,
            _ => false,
        };
        if reduces {
            violations.push(Violation {
                code: "C3",
                node: Some(node.id.clone()),
                message: format!(
                    "`{}` ({}) reduces spatial extent after the input layer; use aads",
                    node.id,
                    node.op.name()
                ),
            });
        }
    }

    Ok(FeasibilityReport {
        feasible: violations.is_empty(),
        violations,
        flops: report.flops,
        budget_flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_arch;

    fn wrap(body: &str, edges: &str) -> ArchSpec {
        parse_arch(&format!(
            "input 1x16x16\nnode stem conv k=3,s=1,c=4\n{body}node pool gap\nnode head dualhead c=2\n\
             edge input stem\n{edges}edge pool head\noutput head\n"
        ))
        .unwrap()
    }

    #[test]
    fn compliant_spec_is_feasible() {
        let spec = wrap("node d1 aads k=3\n", "edge stem d1\nedge d1 pool\n");
        let r = validate_constraints(&spec, DEFAULT_BUDGET_FLOPS).unwrap();
        assert!(r.feasible, "{:?}", r.violations);
        assert!(r.violations.is_empty());
    }

    #[test]
    fn strided_pointwise_in_body_is_c2() {
        let spec = wrap("node pw pwconv c=8,s=2\n", "edge stem pw\nedge pw pool\n");
        let r = validate_constraints(&spec, DEFAULT_BUDGET_FLOPS).unwrap();
        assert!(!r.feasible);
        // The strided pointwise also reduces extent, so C3 fires too; C2 must
        // name the node.
        assert!(r.violations.iter().any(|v| v.code == "C2" && v.node.as_deref() == Some("pw")));
    }

    #[test]
    fn strided_pointwise_at_input_layer_is_still_c2() {
        let spec = parse_arch(
            "input 1x16x16\nnode stem conv k=1,s=2,c=4\nnode pool gap\nnode head dualhead c=2\n\
             edge input stem\nedge stem pool\nedge pool head\noutput head\n",
        )
        .unwrap();
        let r = validate_constraints(&spec, DEFAULT_BUDGET_FLOPS).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].code, "C2");
    }

    #[test]
    fn body_maxpool_is_c3() {
        let spec = wrap("node mp maxpool k=2,s=2\n", "edge stem mp\nedge mp pool\n");
        let r = validate_constraints(&spec, DEFAULT_BUDGET_FLOPS).unwrap();
        assert!(!r.feasible);
        assert!(r.violations.iter().any(|v| v.code == "C3" && v.node.as_deref() == Some("mp")));
    }

    #[test]
    fn strided_stem_is_exempt_from_c3() {
        let spec = parse_arch(
            "input 1x16x16\nnode stem conv k=3,s=2,c=4\nnode pool gap\nnode head dualhead c=2\n\
             edge input stem\nedge stem pool\nedge pool head\noutput head\n",
        )
        .unwrap();
        let r = validate_constraints(&spec, DEFAULT_BUDGET_FLOPS).unwrap();
        assert!(r.feasible, "{:?}", r.violations);
    }

    #[test]
    fn over_budget_is_c1_and_budget_is_monotone() {
        let spec = wrap("node d1 aads k=3\n", "edge stem d1\nedge d1 pool\n");
        let tight = validate_constraints(&spec, 1).unwrap();
        assert!(!tight.feasible);
        assert_eq!(tight.violations[0].code, "C1");
        // exact boundary: flops >= budget is infeasible, one more passes
        let at = validate_constraints(&spec, tight.flops).unwrap();
        assert!(!at.feasible);
        let above = validate_constraints(&spec, tight.flops + 1).unwrap();
        assert!(above.feasible);
    }

    #[test]
    fn acond_is_not_a_reduction() {
        let spec = wrap("node a acond c=4\n", "edge stem a\nedge a pool\n");
        let r = validate_constraints(&spec, DEFAULT_BUDGET_FLOPS).unwrap();
        assert!(r.feasible, "{:?}", r.violations);
    }
}
