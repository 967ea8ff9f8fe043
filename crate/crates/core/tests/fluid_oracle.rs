mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn event_driven_matches_fixed_step_within_tenth_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..50 {
        let m = common::random_micro(&mut rng);
        let err = common::oracle_error(&m);
        assert!(err < 1e-3, "scenario {i}: relative error {err:.2e} in {m:?}");
    }
}

#[test]
fn lone_pull_has_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = common::random_micro(&mut rng);
    m.tenants.clear();
    m.pulls.truncate(1);
    if m.pulls.is_empty() {
        m.pulls.push(common::MicroPull {
            start: 0.0,
            compressed: 500_000_000,
            uncompressed: 1_000_000_000,
        });
    }
    m.cost.registry_per_socket_cap = f64::INFINITY;
    m.cost.download_cpu_per_byte = 0.0;
    m.node.disk_write_bw = 1e12;
    m.node.cpu_cores = 4.0;
    let p = m.pulls[0].clone();
    let expect = p.start + p.compressed as f64 / m.node.net_bw + p.uncompressed as f64 * m.cost.unpack_cpu_per_byte;
    let got = common::run_event_driven(&m)[0];
    assert!((got - expect).abs() < 1e-6 * expect, "{got} vs {expect}");
}
