use saga_core::harness;

#[test]
fn measured_overhead_tracks_the_model() {
    let t_host = harness::calibrate_t_crypto(20).unwrap();
    let run = harness::measured_overhead(10, 100, 50.0, t_host).unwrap();
    assert_eq!(run.provider_cycles, 10);
    let error = (run.total_ms - run.predicted_total_ms).abs() / run.predicted_total_ms;
    assert!(
        error < 0.25,
        "measured {:.1} ms vs predicted {:.1} ms",
        run.total_ms,
        run.predicted_total_ms
    );
}

#[test]
fn quota_divides_provider_cycles() {
    let one = harness::measured_overhead(1, 100, 0.0, 0.0).unwrap();
    let ten = harness::measured_overhead(10, 100, 0.0, 0.0).unwrap();
    assert_eq!(one.provider_cycles, 100);
    assert_eq!(ten.provider_cycles, 10);
    assert_eq!(one.provider_cycles / ten.provider_cycles, 10);
}

#[test]
fn local_capacity_from_measured_throughput() {
    let t = harness::measure_resolve_throughput(4, 50, saga_core::exec::Execution::Parallel).unwrap();
    assert!(t > 0.0);
    let c = harness::capacity(&harness::CapacityModel {
        throughput_per_minute: t,
        lifetime_seconds: 3600.0,
    });
    assert!((c - t * 60.0).abs() < 1e-6 * c);
}
