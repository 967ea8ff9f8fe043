//! Reference implementations used by the property and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use pullsim::gc::{bytes_freed, select_evictions, EvictionCandidate};
use pullsim::metrics::TenantWorkload;
use pullsim::model::{
    Catalog, CostModel, Digest, ImageId, ImageSpec, LayerSpec, NodeConfig, NodeId, ObjectId, Owner, PodSpec, PullPolicy,
};
use pullsim::runner::{build_images, build_simulation, replay_check, run_scenario, uniform_image, RunOptions, Variant};
use pullsim::runtime::{NodeRuntime, PullState};
use pullsim::scenario::ScenarioConfig;
use pullsim::sim::{Action, SimSettings, Simulation};
use rand::Rng;

pub const MB: f64 = 1e6;
pub const GB: f64 = 1e9;

#[derive(Clone, Debug)]
pub struct MicroPull {
    pub start: f64,
    pub compressed: u64,
    pub uncompressed: u64,
}

#[derive(Clone, Debug)]
pub struct MicroTenant {
    pub start: f64,
    pub cpu: f64,
    pub io: f64,
    pub work: f64,
}

/// A handful of single-layer pulls and tenant jobs on one node.
#[derive(Clone, Debug)]
pub struct Micro {
    pub node: NodeConfig,
    pub cost: CostModel,
    pub pulls: Vec<MicroPull>,
    pub tenants: Vec<MicroTenant>,
}

pub fn random_micro(rng: &mut impl Rng) -> Micro {
    let flows = rng.gen_range(1..=5);
    let pulls = rng.gen_range(0..=flows.min(4));
    let tenants = flows - pulls;
    let node = NodeConfig {
        max_parallel_image_pulls: 5,
        net_bw: rng.gen_range(50.0..200.0) * MB,
        disk_write_bw: rng.gen_range(80.0..250.0) * MB,
        cpu_cores: [1.0, 2.0, 4.0][rng.gen_range(0..3)],
        disk_capacity_bytes: 1_000_000_000_000,
        ..NodeConfig::local_testbed()
    };
    let cost = CostModel {
        download_cpu_per_byte: rng.gen_range(0.0..4e-8),
        unpack_cpu_per_byte: rng.gen_range(0.5e-8..3e-8),
        unpack_disk_per_byte: 1.0,
        registry_per_socket_cap: if rng.gen_bool(0.3) {
            rng.gen_range(40.0..120.0) * MB
        } else {
            f64::INFINITY
        },
        unpack_max_cores: 1.0,
        manifest_fetch: 0.0,
        layer_request_latency: 0.0,
        layer_commit: 0.0,
    };
    Micro {
        node,
        cost,
        pulls: (0..pulls)
            .map(|_| {
                let c = rng.gen_range(300..1500) as u64 * 1_000_000;
                MicroPull {
                    start: rng.gen_range(0..10) as f64 * 0.5,
                    compressed: c,
                    uncompressed: (c as f64 * rng.gen_range(1.5..2.5)) as u64,
                }
            })
            .collect(),
        tenants: (0..tenants)
            .map(|_| MicroTenant {
                start: rng.gen_range(0..10) as f64 * 0.5,
                cpu: rng.gen_range(0.5..2.0),
                io: if rng.gen_bool(0.5) {
                    rng.gen_range(5.0..60.0) * MB
                } else {
                    0.0
                },
                work: rng.gen_range(5.0..60.0),
            })
            .collect(),
    }
}

/// Completion times from the event-driven simulator: pulls, then tenants.
pub fn run_event_driven(m: &Micro) -> Vec<f64> {
    let mut cat = Catalog::new();
    for (i, p) in m.pulls.iter().enumerate() {
        let layer = LayerSpec::new(Digest(i as u64 + 1), p.compressed, p.uncompressed).unwrap();
        cat.insert(ImageSpec::new(format!("m{i}"), vec![layer]).unwrap())
            .unwrap();
    }
    let settings = SimSettings {
        gc_enabled: false,
        eviction_enabled: false,
        ..SimSettings::default()
    };
    let mut sim = Simulation::new(vec![m.node.clone()], m.cost.clone(), Arc::new(cat), settings);
    for (i, p) in m.pulls.iter().enumerate() {
        let pod = PodSpec {
            name: format!("p{i}"),
            image: ImageId(i as u32),
            pull_policy: PullPolicy::Always,
            node_selector: NodeId(0),
            owner: Owner::Tenant,
        };
        sim.schedule(p.start, Action::CreatePod(pod)).unwrap();
    }
    for (i, t) in m.tenants.iter().enumerate() {
        let workload = TenantWorkload {
            name: format!("t{i}"),
            cpu_demand: t.cpu,
            total_work: t.work,
            io_demand: t.io,
            start: t.start,
        };
        sim.schedule(
            t.start,
            Action::StartTenant {
                node: NodeId(0),
                workload,
            },
        )
        .unwrap();
    }
    sim.run().unwrap();
    let node = &sim.nodes[0];
    let mut out: Vec<f64> = (0..m.pulls.len())
        .map(|i| {
            let r = node.requests().find(|r| r.image == ImageId(i as u32)).unwrap();
            r.finish_time.unwrap()
        })
        .collect();
    // Tenants are recorded in start order; restore declaration order.
    let mut tenants: Vec<(usize, f64)> = sim
        .tenants
        .iter()
        .map(|rec| {
            (
                rec.workload.name[1..].parse().unwrap(),
                node.tenants()[rec.index].finish.unwrap(),
            )
        })
        .collect();
    tenants.sort_by_key(|(i, _)| *i);
    out.extend(tenants.into_iter().map(|(_, t)| t));
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Waiting,
    Download(f64),
    Unpack(f64),
    Finished,
}

/// Fixed-step integration of the same pulls and tenants.
pub fn run_fixed_step(m: &Micro, dt: f64) -> Vec<f64> {
    let n_pulls = m.pulls.len();
    let mut pulls = vec![Stage::Waiting; n_pulls];
    let mut tenants: Vec<Option<f64>> = vec![None; m.tenants.len()];
    let mut done = vec![f64::NAN; n_pulls + m.tenants.len()];
    let node = &m.node;
    let cost = &m.cost;
    let mut t = 0.0;
    let mut step = 0u64;
    while done.iter().any(|d| d.is_nan()) {
        for (i, p) in m.pulls.iter().enumerate() {
            if pulls[i] == Stage::Waiting && p.start <= t + 1e-12 {
                pulls[i] = Stage::Download(p.compressed as f64);
            }
        }
        for (i, j) in m.tenants.iter().enumerate() {
            if tenants[i].is_none() && done[n_pulls + i].is_nan() && j.start <= t + 1e-12 {
                tenants[i] = Some(j.work);
                if j.work == 0.0 {
                    done[n_pulls + i] = t;
                }
            }
        }
        let n = pulls.iter().filter(|s| matches!(s, Stage::Download(_))).count() as f64;
        let u = pulls.iter().filter(|s| matches!(s, Stage::Unpack(_))).count() as f64;
        let live: Vec<usize> = (0..m.tenants.len())
            .filter(|&i| tenants[i].is_some_and(|w| w > 0.0))
            .collect();

        let sock0 = if n > 0.0 {
            cost.registry_per_socket_cap.min(node.net_bw / n)
        } else {
            0.0
        };
        let unp0 =
            (cost.unpack_max_cores / cost.unpack_cpu_per_byte).min(node.disk_write_bw / cost.unpack_disk_per_byte);
        let io: f64 = live.iter().map(|&i| m.tenants[i].io).sum();
        let disk = n * sock0 + u * unp0 * cost.unpack_disk_per_byte + io;
        let s_disk = if disk > node.disk_write_bw {
            node.disk_write_bw / disk
        } else {
            1.0
        };
        let sock1 = sock0 * s_disk;
        let unp1 = unp0 * s_disk;
        let tenant_cpu = |i: usize| m.tenants[i].cpu * if m.tenants[i].io > 0.0 { s_disk } else { 1.0 };
        let cpu = n * sock1 * cost.download_cpu_per_byte
            + u * unp1 * cost.unpack_cpu_per_byte
            + live.iter().map(|&i| tenant_cpu(i)).sum::<f64>();
        let s_cpu = if cpu > node.cpu_cores {
            node.cpu_cores / cpu
        } else {
            1.0
        };
        let sock = if cost.download_cpu_per_byte > 0.0 {
            sock1 * s_cpu
        } else {
            sock1
        };
        let unp = unp1 * s_cpu;

        for (i, s) in pulls.iter_mut().enumerate() {
            match *s {
                Stage::Download(left) => {
                    let moved = sock * dt;
                    if moved >= left {
                        *s = Stage::Unpack(m.pulls[i].uncompressed as f64);
                    } else {
                        *s = Stage::Download(left - moved);
                    }
                }
                Stage::Unpack(left) => {
                    let moved = unp * dt;
                    if moved >= left {
                        done[i] = t + left / unp;
                        *s = Stage::Finished;
                    } else {
                        *s = Stage::Unpack(left - moved);
                    }
                }
                _ => {}
            }
        }
        for &i in &live {
            let rate = tenant_cpu(i) * s_cpu;
            let left = tenants[i].unwrap();
            if rate * dt >= left {
                done[n_pulls + i] = t + left / rate;
                tenants[i] = Some(0.0);
            } else {
                tenants[i] = Some(left - rate * dt);
            }
        }
        step += 1;
        t = step as f64 * dt;
        assert!(t < 1e5, "fixed-step oracle did not terminate");
    }
    done
}

/// Largest relative difference between the two simulators on `m`.
pub fn oracle_error(m: &Micro) -> f64 {
    let a = run_event_driven(m);
    let b = run_fixed_step(m, 1e-3);
    a.iter().zip(&b).map(|(x, y)| ((x - y) / y).abs()).fold(0.0, f64::max)
}

/// A node with cached images and Running Pods, ready for eviction.
pub struct EvictionCase {
    pub node: NodeRuntime,
    pub candidates: Vec<EvictionCandidate>,
    /// Layers of every cached image, for the brute-force byte count.
    pub layers: Vec<Vec<(Digest, u64)>>,
}

fn zero_cost() -> CostModel {
    CostModel {
        download_cpu_per_byte: 0.0,
        unpack_cpu_per_byte: 0.0,
        unpack_disk_per_byte: 0.0,
        registry_per_socket_cap: f64::INFINITY,
        unpack_max_cores: 1.0,
        manifest_fetch: 0.0,
        layer_request_latency: 0.0,
        layer_commit: 0.0,
    }
}

/// Up to `max_pods` Pods over fewer images, some sharing a layer, on a disk
/// filled past the eviction mark.
pub fn random_eviction_case(rng: &mut impl Rng, max_pods: usize) -> EvictionCase {
    let n_images = rng.gen_range(1..=max_pods.min(6));
    let shared = LayerSpec::new(Digest(999), 1000, rng.gen_range(1..4) as u64 * 500_000_000).unwrap();
    let mut cat = Catalog::new();
    let mut layers = Vec::new();
    for i in 0..n_images {
        let own = LayerSpec::new(Digest(i as u64 + 1), 1000, rng.gen_range(1..20) as u64 * 500_000_000).unwrap();
        let spec = if rng.gen_bool(0.4) {
            vec![shared, own]
        } else {
            vec![own]
        };
        layers.push(spec.iter().map(|l| (l.digest, l.uncompressed_bytes)).collect());
        cat.insert(ImageSpec::new(format!("img{i}"), spec).unwrap()).unwrap();
    }
    let cfg = NodeConfig {
        disk_capacity_bytes: 100_000_000_000,
        baseline_disk_used_bytes: 0,
        net_bw: 1e12,
        disk_write_bw: 1e12,
        ..NodeConfig::local_testbed()
    };
    let mut node = NodeRuntime::new(NodeId(0), cfg, zero_cost(), Arc::new(cat));
    for i in 0..n_images {
        node.submit_pull(ImageId(i as u32), ObjectId(1000 + i as u64), false);
        while let Some(t) = node.next_deadline() {
            node.advance_to(t);
            node.process_due();
        }
    }
    let stored = node.disk_used();
    // Baseline puts usage between 90% and 99% of capacity.
    let target = rng.gen_range(0.905..0.99) * 100e9;
    let baseline = (target - stored).max(0.0) as u64;
    node.config.baseline_disk_used_bytes = baseline;
    let n_pods = rng.gen_range(1..=max_pods);
    let mut candidates = Vec::new();
    for p in 0..n_pods {
        let image = ImageId(rng.gen_range(0..n_images) as u32);
        node.acquire(image);
        candidates.push(EvictionCandidate {
            pod: ObjectId(p as u64),
            image,
        });
    }
    EvictionCase {
        node,
        candidates,
        layers,
    }
}

/// Bytes freed by evicting the Pods in `mask`, counted from layer lists.
pub fn brute_freed(case: &EvictionCase, mask: u32) -> u64 {
    let n_images = case.layers.len();
    let mut deleted = vec![false; n_images];
    for (img, d) in deleted.iter_mut().enumerate() {
        let users: Vec<usize> = (0..case.candidates.len())
            .filter(|&p| case.candidates[p].image == ImageId(img as u32))
            .collect();
        *d = !users.is_empty() && users.iter().all(|&p| mask & (1 << p) != 0);
    }
    let kept: BTreeSet<Digest> = (0..n_images)
        .filter(|&i| !deleted[i])
        .flat_map(|i| case.layers[i].iter().map(|(d, _)| *d))
        .collect();
    let mut freed = BTreeSet::new();
    for i in (0..n_images).filter(|&i| deleted[i]) {
        for (d, b) in &case.layers[i] {
            if !kept.contains(d) {
                freed.insert((*d, *b));
            }
        }
    }
    freed.iter().map(|(_, b)| b).sum()
}

/// (cardinality, bytes freed) of the best subset by exhaustive search, or
/// None when no subset is enough.
pub fn brute_best(case: &EvictionCase) -> Option<(usize, u64)> {
    let node = &case.node;
    let need = node.disk_used() - node.config.eviction_hard_pct * node.config.disk_capacity_bytes as f64;
    let n = case.candidates.len();
    let mut best: Option<(usize, u64)> = None;
    for mask in 1u32..(1 << n) {
        let k = mask.count_ones() as usize;
        let freed = brute_freed(case, mask);
        if freed as f64 > need {
            let better = match best {
                None => true,
                Some((bk, bf)) => k < bk || (k == bk && freed > bf),
            };
            if better {
                best = Some((k, freed));
            }
        }
    }
    best
}

/// Checks `select_evictions` against the exhaustive search.
pub fn eviction_matches(case: &EvictionCase) -> Result<(), String> {
    let chosen = select_evictions(&case.node, &case.candidates);
    let freed = bytes_freed(&case.node, &case.candidates, &chosen);
    match brute_best(case) {
        Some((k, f)) => {
            if chosen.len() != k || freed != f {
                return Err(format!(
                    "picked {} pods freeing {freed}, oracle {k} pods freeing {f}",
                    chosen.len()
                ));
            }
        }
        None => {
            if chosen.len() != case.candidates.len() {
                return Err(format!(
                    "no subset suffices but only {} of {} pods picked",
                    chosen.len(),
                    case.candidates.len()
                ));
            }
        }
    }
    Ok(())
}

/// A small attack scenario with custom images and optional tenant and MAGI.
pub fn random_scenario_toml(rng: &mut impl Rng) -> String {
    let strategy = ["ForceDeleteCycle", "SequentialCycle", "NoDelete"][rng.gen_range(0..3)];
    let mut s = format!(
        "[scenario]\nname = \"random\"\ntrials = 2\nseed = {}\n\n[node]\nprofile = \"local_testbed\"\nmax_parallel_image_pulls = {}\n\n",
        rng.gen::<u32>(),
        rng.gen_range(1..=3)
    );
    let n = rng.gen_range(2..5);
    for i in 0..n {
        s += &format!(
            "[[image]]\nname = \"img{i}\"\ncompressed = \"{} MB\"\nlayers = {}\n\n",
            rng.gen_range(50..600),
            rng.gen_range(1..6)
        );
    }
    let names: Vec<String> = (0..n).map(|i| format!("\"img{i}\"")).collect();
    s += &format!(
        "[attack]\nstrategy = \"{strategy}\"\nshuffle = true\nimages = [{}]\n\n",
        names.join(", ")
    );
    if rng.gen_bool(0.5) {
        s += &format!(
            "[[tenant]]\nname = \"job\"\ncpu_demand = {:.2}\ntotal_work = \"{} core-s\"\nio_demand = \"10 MB/s\"\n\n",
            rng.gen_range(0.5..2.0),
            rng.gen_range(20..200)
        );
    }
    if rng.gen_bool(0.5) {
        s += "[magi]\nreact_latency = \"2 s\"\n";
    }
    s
}

pub fn parse(text: &str) -> ScenarioConfig {
    ScenarioConfig::from_toml_str(text, Path::new("random.toml")).unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Runs `cfg` twice into fresh directories and compares every output file.
pub fn check_replay(cfg: &ScenarioConfig) -> Result<(), String> {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let opts = RunOptions {
            trials: None,
            seed: None,
            out: Some(dir.path().to_path_buf()),
            summary_only: false,
        };
        run_scenario(cfg, &opts).map_err(|e| e.to_string())?;
    }
    let files = files_under(a.path());
    if files != files_under(b.path()) {
        return Err("output file lists differ".into());
    }
    if !files.iter().any(|f| f.ends_with("events.log")) {
        return Err("no event log written".into());
    }
    for f in files {
        if !replay_check(&a.path().join(&f), &b.path().join(&f)).unwrap() {
            return Err(format!("{} differs", f.display()));
        }
    }
    Ok(())
}

/// Network bytes match per-request counters, and finished pulls received
/// exactly their plan.
pub fn check_conservation(cfg: &ScenarioConfig, seed: u64) -> Result<(), String> {
    let images = build_images(cfg).map_err(|e| e.to_string())?;
    let mut sim = build_simulation(cfg, &images, Variant::Single, seed).map_err(|e| e.to_string())?;
    sim.run().map_err(|e| e.to_string())?;
    for node in &sim.nodes {
        let received: u64 = node.requests().map(|q| q.received_bytes).sum();
        if received != node.net_bytes {
            return Err(format!(
                "node {}: requests {received} vs network {}",
                node.id.0, node.net_bytes
            ));
        }
        for q in node.requests() {
            let ok = if q.state == PullState::Done {
                q.received_bytes == q.planned_bytes
            } else {
                q.received_bytes <= q.planned_bytes
            };
            if !ok {
                return Err(format!(
                    "request {:?} received {} of {}",
                    q.id, q.received_bytes, q.planned_bytes
                ));
            }
        }
    }
    Ok(())
}

/// Images `img{i}` of `(MB, layers)` with 2:1 expansion.
pub fn catalog(sizes: &[(u32, usize)]) -> Arc<Catalog> {
    let mut cat = Catalog::new();
    for (i, (mb, layers)) in sizes.iter().enumerate() {
        cat.insert(uniform_image(&format!("img{i}"), *mb as u64 * 1_000_000, *layers, 2.0).unwrap())
            .unwrap();
    }
    Arc::new(cat)
}

pub fn quiet() -> SimSettings {
    SimSettings {
        gc_enabled: false,
        eviction_enabled: false,
        ..SimSettings::default()
    }
}

pub fn pod(i: usize) -> PodSpec {
    PodSpec {
        name: format!("pod{i}"),
        image: ImageId(i as u32),
        pull_policy: PullPolicy::Always,
        node_selector: NodeId(0),
        owner: Owner::Attacker,
    }
}

/// Same pulls with and without force-deleting every Pod `delete_after`
/// seconds after creation.
pub fn check_orphans(sizes: &[(u32, usize)], gaps: &[f64], delete_after: f64, mp: usize) -> Result<(), String> {
    let cat = catalog(sizes);
    let node = NodeConfig {
        max_parallel_image_pulls: mp,
        ..NodeConfig::local_testbed()
    };
    let mut runs = Vec::new();
    for delete in [false, true] {
        let mut sim = Simulation::new(vec![node.clone()], CostModel::calibrated(), cat.clone(), quiet());
        let mut t = 0.0;
        for (i, gap) in gaps.iter().enumerate().take(sizes.len()) {
            t += gap;
            sim.schedule(t, Action::CreatePod(pod(i))).unwrap();
            if delete {
                let del = Action::DeletePod {
                    name: format!("pod{i}"),
                    force: true,
                };
                sim.schedule(t + delete_after, del).unwrap();
            }
        }
        sim.run().unwrap();
        let trace: Vec<_> = sim.nodes[0]
            .requests()
            .map(|q| (q.image.0, q.state, q.start_time, q.finish_time, q.received_bytes))
            .collect();
        runs.push(trace);
    }
    // An extra event splits a fluid interval, so times may differ in the last bits.
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * (1.0 + a.abs()),
        (a, b) => a == b,
    };
    if runs[0].len() != runs[1].len() {
        return Err("request count changed".into());
    }
    for (a, b) in runs[0].iter().zip(&runs[1]) {
        if !(a.0 == b.0 && a.1 == b.1 && a.4 == b.4 && close(a.2, b.2) && close(a.3, b.3)) {
            return Err(format!("{a:?} vs {b:?}"));
        }
    }
    Ok(())
}

/// At one slot, each pull starts after and finishes before its successor.
pub fn check_fifo(sizes: &[(u32, usize)], gaps: &[f64]) -> Result<(), String> {
    let mut sim = Simulation::new(
        vec![NodeConfig::local_testbed()],
        CostModel::calibrated(),
        catalog(sizes),
        quiet(),
    );
    let mut t = 0.0;
    for (i, gap) in gaps.iter().enumerate().take(sizes.len()) {
        t += gap;
        sim.schedule(t, Action::CreatePod(pod(i))).unwrap();
    }
    sim.run().unwrap();
    let mut reqs: Vec<_> = sim.nodes[0].requests().collect();
    reqs.sort_by(|a, b| a.enqueue_time.total_cmp(&b.enqueue_time).then(a.id.cmp(&b.id)));
    if reqs.len() != sizes.len() || reqs.iter().any(|q| q.state != PullState::Done) {
        return Err("not every pull finished".into());
    }
    for w in reqs.windows(2) {
        let (f0, s1, f1) = (
            w[0].finish_time.unwrap(),
            w[1].start_time.unwrap(),
            w[1].finish_time.unwrap(),
        );
        if !(f0 <= s1 && f0 < f1) {
            return Err(format!("{:?} finished at {f0}, {:?} started at {s1}", w[0].id, w[1].id));
        }
    }
    Ok(())
}
