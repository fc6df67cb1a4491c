//! Cross-checks the analytic cost model against an instrumented naive
//! executor that counts multiply-accumulates and per-element ops by running
//! the actual loops, over a corpus of randomly generated specs and the two
//! hand-built architectures, under both FLOPs-per-MAC conventions.

mod common;

use common::{random_specs, run_instrumented};
use condenser_forge_core::constraints::{validate_constraints, DEFAULT_BUDGET_FLOPS};
use condenser_forge_core::cost::{cost_with_convention, DEFAULT_FLOPS_PER_MAC};
use condenser_forge_core::dsl::{parse_arch, print_arch};
use condenser_forge_core::explore::{reference_arch, seed_prototype};

#[test]
fn analytic_cost_equals_instrumented_execution_on_random_specs() {
    let specs = random_specs(24, 0xC0DE);
    let feasible = specs
        .iter()
        .filter(|s| validate_constraints(s, DEFAULT_BUDGET_FLOPS).unwrap().feasible)
        .collect::<Vec<_>>();
    assert!(feasible.len() >= 20, "only {} feasible specs generated", feasible.len());

    for (i, spec) in feasible.iter().enumerate() {
        for fpm in [1u64, 2] {
            let analytic = cost_with_convention(spec, fpm).unwrap();
            let counted = run_instrumented(spec, fpm);
            assert_eq!(
                (analytic.params, analytic.flops),
                (counted.params, counted.flops),
                "spec {i} (fpm {fpm}) diverged from instrumented run:\n{}",
                print_arch(spec)
            );
        }
    }
}

#[test]
fn analytic_cost_equals_instrumented_execution_on_hand_built_nets() {
    for spec in [
        seed_prototype((1, 64, 64)).unwrap(),
        seed_prototype((3, 20, 28)).unwrap(),
        reference_arch((1, 64, 64)).unwrap(),
        reference_arch((1, 17, 31)).unwrap(),
    ] {
        let analytic = cost_with_convention(&spec, DEFAULT_FLOPS_PER_MAC).unwrap();
        let counted = run_instrumented(&spec, DEFAULT_FLOPS_PER_MAC);
        assert_eq!((analytic.params, analytic.flops), (counted.params, counted.flops));
    }
}

#[test]
fn instrumented_run_agrees_on_join_and_odd_extents() {
    // Parallel columns at an odd spatial extent: joins, condenser pooling,
    // and AADS all see the ceil/floor edge cases.
    let spec = parse_arch(
        "input 3x15x11\n\
         node stem conv k=3,s=2,c=6\n\
         node l resblock\n\
         node r acond c=3\n\
         node j relu\n\
         node d aads k=5\n\
         node p gap\n\
         node h dualhead c=2\n\
         edge input stem\nedge stem l\nedge stem r\nedge l j\nedge r j\n\
         edge j d\nedge d p\nedge p h\noutput h\n",
    )
    .unwrap();
    for fpm in [1u64, 2] {
        let analytic = cost_with_convention(&spec, fpm).unwrap();
        let counted = run_instrumented(&spec, fpm);
        assert_eq!((analytic.params, analytic.flops), (counted.params, counted.flops));
    }
}
