mod common;

use common::{full_net_check, op_suite, NET_MIN_FRACTION, NET_TOL, OP_TOL};

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..20 {
        for (name, report) in op_suite(seed).unwrap() {
            assert!(report.checked() > 0, "{name}: nothing checked");
            assert!(
                report.max_rel_error() < OP_TOL,
                "{name}, seed {seed}: worst {:?}",
                report.worst()
            );
        }
    }
}

#[test]
fn full_network_matches_central_differences() {
    for seed in 0..20 {
        let report = full_net_check(seed).unwrap();
        // relu kinks inside the ±h stencil spoil a handful of elements per seed
        assert!(
            report.fraction_within(NET_TOL) >= NET_MIN_FRACTION,
            "seed {seed}: {} elements, worst {:?}",
            report.checked(),
            report.worst()
        );
    }
}
