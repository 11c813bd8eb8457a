mod common;

#[test]
fn blocked_scan_matches_recurrence_for_all_lengths() {
    let err = common::scan::blocked_vs_sequential(256, 50, 21);
    assert!(err <= 1e-5, "relative deviation {err}");
}

#[test]
fn memoryless_ss2d_is_four_times_one_direction() {
    for seed in 0..5 {
        let err = common::scan::memoryless_ss2d(seed);
        assert!(err <= 1e-6, "deviation {err}");
    }
}
