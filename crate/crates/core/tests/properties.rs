mod common;

use proptest::prelude::*;
use pullsim::metrics::scheduling_delay;
use pullsim::model::{CostModel, NodeConfig};
use pullsim::runner::{run_scenario, RunOptions};
use pullsim::sim::{Action, Simulation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{
    catalog, check_conservation, check_fifo, check_orphans, check_replay, parse, pod, quiet, random_scenario_toml,
};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn images() -> impl Strategy<Value = Vec<(u32, usize)>> {
    prop::collection::vec((50u32..800, 1usize..5), 2..7)
}

proptest! {
    #![proptest_config(config(20))]

    #[test]
    fn same_seed_gives_identical_outputs(seed in any::<u64>()) {
        let cfg = parse(&random_scenario_toml(&mut ChaCha8Rng::seed_from_u64(seed)));
        check_replay(&cfg).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn bytes_are_conserved(seed in any::<u64>()) {
        let cfg = parse(&random_scenario_toml(&mut ChaCha8Rng::seed_from_u64(seed)));
        check_conservation(&cfg, seed).map_err(TestCaseError::fail)?;
        let opts = RunOptions { trials: None, seed: None, out: None, summary_only: true };
        let summary = run_scenario(&cfg, &opts).unwrap();
        for t in &summary.per_trial {
            for run in &t.runs {
                prop_assert!(run.nodes.iter().all(|n| n.bytes_conserved));
            }
        }
    }
}

proptest! {
    #![proptest_config(config(32))]

    #[test]
    fn force_delete_leaves_pulls_untouched(
        sizes in images(),
        gaps in prop::collection::vec(0.0f64..20.0, 7),
        delete_after in 0.0f64..30.0,
        mp in 1usize..4,
    ) {
        check_orphans(&sizes, &gaps, delete_after, mp).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn single_slot_completes_in_enqueue_order(sizes in images(), gaps in prop::collection::vec(0.0f64..5.0, 7)) {
        check_fifo(&sizes, &gaps).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn more_slots_never_slow_an_unconstrained_node(sizes in images()) {
        let cat = catalog(&sizes);
        let cost = CostModel {
            download_cpu_per_byte: 0.0,
            unpack_cpu_per_byte: 0.0,
            unpack_disk_per_byte: 0.0,
            ..CostModel::calibrated()
        };
        let mut prev = f64::INFINITY;
        for mp in 1..=4 {
            let node = NodeConfig { max_parallel_image_pulls: mp, ..NodeConfig::local_testbed() };
            let mut sim = Simulation::new(vec![node], cost.clone(), cat.clone(), quiet());
            for i in 0..sizes.len() {
                sim.schedule(0.0, Action::CreatePod(pod(i))).unwrap();
            }
            sim.run().unwrap();
            let drain = sim.nodes[0].requests().filter_map(|q| q.finish_time).fold(0.0, f64::max);
            prop_assert!(drain <= prev * (1.0 + 1e-9), "mp {mp}: {drain} after {prev}");
            prev = drain;
        }
    }
}

proptest! {
    #![proptest_config(config(100))]

    #[test]
    fn scheduling_delay_is_scale_invariant(d in 1.0f64..1e5, gb in 0.01f64..100.0, c in 1e-3f64..1e3) {
        let a = scheduling_delay(d, gb).unwrap();
        let b = scheduling_delay(d * c, gb * c).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a);
    }
}
