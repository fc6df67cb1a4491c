//! Crafted feasibility suite: each spec carries its exact expected verdict
//! and the exact set of violation codes, covering the three constraints
//! singly and in combination, the stem exemptions, and the budget boundary.

use std::collections::BTreeSet;

use condenser_forge_core::constraints::{validate_constraints, DEFAULT_BUDGET_FLOPS};
use condenser_forge_core::cost::cost;
use condenser_forge_core::dsl::parse_arch;

struct Case {
    name: &'static str,
    source: String,
    budget: u64,
    expect_codes: &'static [&'static str],
}

fn tail() -> &'static str {
    "node pool gap\nnode head dualhead c=2\nedge pool head\noutput head\n"
}

fn cases() -> Vec<Case> {
    let mut v = Vec::new();
    let b = DEFAULT_BUDGET_FLOPS;

    // 1. Minimal compliant chain, no downsampling at all.
    v.push(Case {
        name: "compliant minimal",
        source: format!(
            "input 1x16x16\nnode stem conv k=3,s=1,c=8\n{}edge input stem\nedge stem pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &[],
    });
    // 2. Strided stem conv: the input layer may downsample by any means.
    v.push(Case {
        name: "compliant strided stem",
        source: format!(
            "input 1x32x32\nnode stem conv k=3,s=2,c=8\n{}edge input stem\nedge stem pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &[],
    });
    // 3. Max-pool as the input layer itself: still the stem exemption.
    v.push(Case {
        name: "compliant maxpool stem",
        source: format!(
            "input 1x32x32\nnode stem maxpool k=2,s=2\n{}edge input stem\nedge stem pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &[],
    });
    // 4. AADS in the body: the sanctioned way to reduce spatial extent.
    v.push(Case {
        name: "compliant body aads",
        source: format!(
            "input 1x32x32\nnode stem conv k=3,s=2,c=8\nnode d1 aads k=3\nnode d2 aads k=5\n{}\
             edge input stem\nedge stem d1\nedge d1 d2\nedge d2 pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &[],
    });
    // 5. Attention condenser in the body: pools internally but restores
    // extent, so it is not a reduction.
    v.push(Case {
        name: "compliant body acond",
        source: format!(
            "input 1x32x32\nnode stem conv k=3,s=2,c=8\nnode a acond\n{}\
             edge input stem\nedge stem a\nedge a pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &[],
    });
    // 6. Strided pointwise conv in the body: C2, and it also shrinks the
    // extent outside an AADS node, so C3 rides along.
    v.push(Case {
        name: "body strided pwconv",
        source: format!(
            "input 1x32x32\nnode stem conv k=3,s=1,c=8\nnode pw pwconv c=8,s=2\n{}\
             edge input stem\nedge stem pw\nedge pw pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &["C2", "C3"],
    });
    // 7. Strided pointwise conv as the stem: the C3 stem exemption does not
    // excuse C2, which bans the op anywhere.
    v.push(Case {
        name: "stem strided pwconv",
        source: format!(
            "input 1x32x32\nnode stem pwconv c=8,s=2\n{}edge input stem\nedge stem pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &["C2"],
    });
    // 8. conv with k=1 written as a general conv, stride 2, in the body.
    v.push(Case {
        name: "body k1 strided conv",
        source: format!(
            "input 1x32x32\nnode stem conv k=3,s=1,c=8\nnode c1 conv k=1,s=2,c=8\n{}\
             edge input stem\nedge stem c1\nedge c1 pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &["C2", "C3"],
    });
    // 9. Body max-pool: a non-AADS reduction, C3 only.
    v.push(Case {
        name: "body maxpool",
        source: format!(
            "input 1x32x32\nnode stem conv k=3,s=2,c=8\nnode mp maxpool k=2,s=2\n{}\
             edge input stem\nedge stem mp\nedge mp pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &["C3"],
    });
    // 10. Body strided 3x3 conv: k>1 so no C2, but still a C3 reduction.
    v.push(Case {
        name: "body strided conv3",
        source: format!(
            "input 1x32x32\nnode stem conv k=3,s=1,c=8\nnode c2 conv k=3,s=2,c=8\n{}\
             edge input stem\nedge stem c2\nedge c2 pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &["C3"],
    });
    // 11. Body strided depthwise conv: same story as 10.
    v.push(Case {
        name: "body strided dwconv",
        source: format!(
            "input 1x32x32\nnode stem conv k=3,s=1,c=8\nnode dw dwconv k=3,s=2\n{}\
             edge input stem\nedge stem dw\nedge dw pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &["C3"],
    });
    // 12. Over budget: one wide dense conv at full extent blows 100M FLOPs.
    v.push(Case {
        name: "over budget",
        source: format!(
            "input 3x64x64\nnode stem conv k=3,s=1,c=128\nnode c2 conv k=3,s=1,c=128\n{}\
             edge input stem\nedge stem c2\nedge c2 pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &["C1"],
    });
    // 13. Same topology, narrow: comfortably inside the budget.
    v.push(Case {
        name: "under budget twin",
        source: format!(
            "input 3x64x64\nnode stem conv k=3,s=1,c=8\nnode c2 conv k=3,s=1,c=8\n{}\
             edge input stem\nedge stem c2\nedge c2 pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &[],
    });
    // 14. Everything at once: budget, strided pointwise, and a bare pool.
    v.push(Case {
        name: "all three violated",
        source: format!(
            "input 3x64x64\nnode stem conv k=3,s=1,c=128\nnode c2 conv k=3,s=1,c=128\n\
             node pw pwconv c=128,s=2\nnode mp maxpool k=2,s=2\n{}\
             edge input stem\nedge stem c2\nedge c2 pw\nedge pw mp\nedge mp pool\n",
            tail()
        ),
        budget: b,
        expect_codes: &["C1", "C2", "C3"],
    });

    v
}

#[test]
fn crafted_specs_get_exact_verdicts_and_codes() {
    let cases = cases();
    assert!(cases.len() >= 12);
    for case in &cases {
        let spec = parse_arch(&case.source).unwrap_or_else(|e| panic!("{}: {e}", case.name));
        let report = validate_constraints(&spec, case.budget).unwrap();
        let got: BTreeSet<&str> = report.violations.iter().map(|v| v.code).collect();
        let want: BTreeSet<&str> = case.expect_codes.iter().copied().collect();
        assert_eq!(got, want, "{}: wrong violation set {:?}", case.name, report.violations);
        assert_eq!(
            report.feasible,
            case.expect_codes.is_empty(),
            "{}: feasible flag contradicts the codes",
            case.name
        );
        assert_eq!(report.feasible, report.violations.is_empty());
    }
}

#[test]
fn violations_name_the_offending_node() {
    let spec = parse_arch(
        "input 1x32x32\nnode stem conv k=3,s=1,c=8\nnode pw pwconv c=8,s=2\nnode pool gap\n\
         node head dualhead c=2\nedge input stem\nedge stem pw\nedge pw pool\nedge pool head\noutput head\n",
    )
    .unwrap();
    let report = validate_constraints(&spec, DEFAULT_BUDGET_FLOPS).unwrap();
    assert!(report
        .violations
        .iter()
        .all(|v| v.code == "C1" || v.node.as_deref() == Some("pw")));
}

#[test]
fn budget_verdict_is_strict_and_monotone() {
    let spec = parse_arch(
        "input 1x16x16\nnode stem conv k=3,s=1,c=8\nnode pool gap\nnode head dualhead c=2\n\
         edge input stem\nedge stem pool\nedge pool head\noutput head\n",
    )
    .unwrap();
    let flops = cost(&spec).unwrap().flops;
    // Exactly at the budget is infeasible ("under" is strict); one more is
    // feasible; anything larger stays feasible.
    assert!(!validate_constraints(&spec, flops).unwrap().feasible);
    assert!(validate_constraints(&spec, flops + 1).unwrap().feasible);
    assert!(validate_constraints(&spec, flops * 10).unwrap().feasible);
}
