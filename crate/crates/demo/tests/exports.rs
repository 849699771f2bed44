use qlr_demo::{lifetime, lifetime_json, round_trip, sweep, SWEEP_BANDWIDTHS};

#[test]
fn sweep_has_one_curve_per_core_count() {
    let s = sweep(19, 128, true).unwrap();
    assert_eq!(s.curves.len(), 4);
    for c in &s.curves {
        assert_eq!(c.mac_per_cycle.len(), SWEEP_BANDWIDTHS.len());
        // more bandwidth never hurts
        assert!(
            c.mac_per_cycle.windows(2).all(|w| w[1] >= w[0] - 1e-9),
            "{c:?}"
        );
    }
    let eight = &s.curves[3].mac_per_cycle;
    assert!(eight[4] > 4.0 * eight[0]);
}

#[test]
fn sweep_rejects_bad_split() {
    assert!(sweep(40, 128, true).is_err());
}

#[test]
fn round_trip_error_within_half_step() {
    let r = round_trip(7, 6.0, 500, 1).unwrap();
    assert!(r.max_error <= r.scale / 2.0 * 1.0001);
    assert_eq!(r.packed_bytes, (500 * 7usize).div_ceil(8));
    assert!(r.codes.iter().all(|&c| (0..128).contains(&c)));
    assert!(round_trip(1, 6.0, 10, 1).is_err());
}

#[test]
fn lifetime_matches_core() {
    let h = lifetime(0.13, 1080.0, 3300.0, 1.8).hours.unwrap();
    assert!((h - 152.3).abs() < 0.1);
    let v: serde_json::Value =
        serde_json::from_str(&lifetime_json(0.0, 1080.0, 3300.0, 1.8)).unwrap();
    assert!(v["hours"].is_null());
}
