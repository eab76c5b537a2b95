use tml_core::gradcheck::gradient_suite;

fn check<T: tml_core::Scalar>(seed: u64, tol: f64) {
    let reports = gradient_suite::<T>(seed, 24).unwrap();
    let mut failed = Vec::new();
    for r in &reports {
        println!("{:<28} probes {:>3}  max rel err {:.3e}", r.name, r.probes, r.max_rel_error);
        assert!(r.probes >= 20, "{} ran only {} probes", r.name, r.probes);
        if !r.passed(tol) {
            failed.push(format!("{} worst {:?}", r.name, r.worst));
        }
    }
    assert!(failed.is_empty(), "failed: {failed:#?}");
}

#[test]
fn f32_suite_within_1e_3() {
    for seed in [1, 2, 3] {
        check::<f32>(seed, 1e-3);
    }
}

// f64 compares like with like; the loose end is the deep UGDC probe whose
// smallest gradients sit near the oracle's rounding floor.
#[test]
fn f64_suite_within_1e_4() {
    check::<f64>(7, 1e-4);
}
