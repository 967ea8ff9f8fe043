//! Builds simulations from scenario files, runs trials in parallel and
//! writes logs, gauge CSVs and the JSON summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{run_attack, AttackPlan};
use crate::control::{ObjectKind, Verb};
use crate::error::{ScenarioError, SimError};
use crate::imageset::generate_image_set;
use crate::magi::{MagiSettings, MagiTally};
use crate::metrics::{scheduling_delay_bytes, slowdown, throughput_drop, TenantWorkload};
use crate::model::{Catalog, Digest, ImageId, ImageSpec, LayerSpec, NodeId, Owner, PodSpec, PullPolicy, GB};
use crate::runtime::PullState;
use crate::scenario::{Mode, NodeTargets, ScenarioConfig};
use crate::sim::{Action, SimSettings, Simulation};

/// Images available to a scenario.
#[derive(Clone, Debug)]
pub struct Images {
    pub catalog: Arc<Catalog>,
    /// Members of the generated attack set, in set order.
    pub set: Vec<ImageId>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Equal-layer image named `name`; digests derive from the name.
pub fn uniform_image(name: &str, compressed: u64, layers: usize, expansion: f64) -> Result<ImageSpec, ScenarioError> {
    let per = compressed / layers as u64;
    let mut specs = Vec::with_capacity(layers);
    for i in 0..layers {
        let c = if i + 1 == layers {
            compressed - per * (layers as u64 - 1)
        } else {
            per
        };
        let digest = Digest(fnv1a(&format!("{name}/{i}")));
        specs.push(LayerSpec::new(digest, c, (c as f64 * expansion).round() as u64)?);
    }
    Ok(ImageSpec::new(name, specs)?)
}

pub fn build_images(cfg: &ScenarioConfig) -> Result<Images, ScenarioError> {
    let mut catalog = Catalog::new();
    let mut set = Vec::new();
    if let Some(images) = &cfg.images {
        for img in generate_image_set(images.kind()?, images.seed).images {
            set.push(catalog.insert(img)?);
        }
    }
    for c in &cfg.custom_images {
        catalog.insert(uniform_image(
            &c.name,
            c.compressed.0.round() as u64,
            c.layers,
            c.expansion,
        )?)?;
    }
    Ok(Images {
        catalog: Arc::new(catalog),
        set,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Single,
    Baseline,
    Attacked,
    Mitigated,
}

impl Variant {
    fn attack(self) -> bool {
        self != Variant::Baseline
    }

    fn magi(self, cfg: &ScenarioConfig) -> bool {
        match self {
            Variant::Mitigated => true,
            Variant::Single => cfg.magi.as_ref().is_some_and(|m| m.enabled),
            _ => false,
        }
    }
}

pub fn sim_settings(cfg: &ScenarioConfig, magi: bool) -> SimSettings {
    let s = &cfg.scenario;
    let mut out = SimSettings {
        sample_interval: s.sample_interval.0,
        gc_enabled: s.gc,
        eviction_enabled: s.eviction,
        ..SimSettings::default()
    };
    if let Some(v) = s.horizon {
        out.horizon = v.0;
    }
    if let Some(v) = s.teardown_delay {
        out.teardown_delay = v.0;
    }
    if let Some(v) = s.gc_interval {
        out.gc_interval = v.0;
    }
    if let Some(v) = s.eviction_interval {
        out.eviction_interval = v.0;
    }
    if magi {
        let m = cfg.magi.clone();
        let mut settings = MagiSettings::default();
        if let Some(v) = m.as_ref().and_then(|m| m.react_latency) {
            settings.react_latency = v.0;
        }
        if let Some(v) = m.as_ref().and_then(|m| m.audit_delay) {
            settings.audit_delay = v.0;
        }
        out.magi = Some(settings);
    }
    out
}

/// The attack plan for one trial, if the scenario has an attack.
pub fn attack_plan(
    cfg: &ScenarioConfig,
    images: &Images,
    trial_seed: u64,
) -> Result<Option<AttackPlan>, ScenarioError> {
    let Some(a) = &cfg.attack else { return Ok(None) };
    let ids = match &a.images {
        Some(names) => names
            .iter()
            .map(|n| {
                images
                    .catalog
                    .lookup(n)
                    .ok_or_else(|| SimError::UnknownImage(n.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => images.set.clone(),
    };
    let nodes = match &a.nodes {
        NodeTargets::All(_) => (0..cfg.node.count as u32).map(NodeId).collect(),
        NodeTargets::List(l) => l.iter().map(|n| NodeId(*n)).collect(),
    };
    let mut plan = AttackPlan::new(a.strategy()?, ids, nodes);
    if let Some(v) = a.start {
        plan.start = v.0;
    }
    if let Some(v) = a.inter_step_wait {
        plan.inter_step_wait = v.0;
    }
    if let Some(v) = a.patch_interval {
        plan.patch_interval = v.0;
    }
    if let Some(p) = a.pull_policy {
        plan.pull_policy = p;
    }
    plan.shuffle_seed = a.shuffle.then_some(trial_seed);
    Ok(Some(plan))
}

pub fn build_simulation(
    cfg: &ScenarioConfig,
    images: &Images,
    variant: Variant,
    trial_seed: u64,
) -> Result<Simulation, ScenarioError> {
    let nodes = vec![cfg.node_config(); cfg.node.count];
    let mut sim = Simulation::new(
        nodes,
        cfg.cost_model(),
        images.catalog.clone(),
        sim_settings(cfg, variant.magi(cfg)),
    );
    if variant.attack() {
        if let Some(plan) = attack_plan(cfg, images, trial_seed)? {
            for (t, action) in run_attack(&plan, &images.catalog)? {
                sim.schedule(t, action)?;
            }
        }
    }
    for d in &cfg.deploys {
        let image = images
            .catalog
            .lookup(&d.image)
            .ok_or_else(|| SimError::UnknownImage(d.image.clone()))?;
        let spec = PodSpec {
            name: d.name.clone(),
            image,
            pull_policy: d.pull_policy.unwrap_or(PullPolicy::IfNotPresent),
            node_selector: NodeId(d.node),
            owner: Owner::Tenant,
        };
        sim.schedule(d.at.0, Action::CreatePod(spec))?;
    }
    for t in &cfg.tenants {
        let workload = TenantWorkload {
            name: t.name.clone(),
            cpu_demand: t.cpu_demand,
            total_work: t.total_work.0,
            io_demand: t.io_demand.map_or(0.0, |r| r.0),
            start: t.start.map_or(0.0, |s| s.0),
        };
        sim.schedule(
            workload.start,
            Action::StartTenant {
                node: NodeId(t.node),
                workload,
            },
        )?;
    }
    Ok(sim)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeResult {
    pub node: u32,
    pub attack_duration: Option<f64>,
    pub attack_compressed_bytes: u64,
    pub sd: Option<f64>,
    pub cpu_avg: Option<f64>,
    pub attack_pulls_done: usize,
    pub attack_pulls_cancelled: usize,
    pub net_bytes: u64,
    pub bytes_conserved: bool,
    pub peak_disk_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GcFiring {
    pub time: f64,
    pub node: u32,
    pub deleted: Vec<String>,
    /// Seconds since each deleted image finished pulling.
    pub ages: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvictionRecord {
    pub time: f64,
    pub node: u32,
    pub usage_before: f64,
    pub usage_after: f64,
    pub pods: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TenantResult {
    pub name: String,
    pub completion: Option<f64>,
    pub alone: f64,
    pub slowdown: Option<f64>,
    pub throughput_drop: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeployResult {
    pub name: String,
    pub requested: f64,
    pub running: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub variant: Variant,
    pub end_time: f64,
    pub nodes: Vec<NodeResult>,
    pub sd: Option<f64>,
    pub cpu_avg: Option<f64>,
    pub attack_duration: Option<f64>,
    pub gc_firings: Vec<GcFiring>,
    pub evictions: Vec<EvictionRecord>,
    pub magi: Option<MagiTally>,
    pub tenants: Vec<TenantResult>,
    pub deploys: Vec<DeployResult>,
    /// Time the last legitimate deployment started running.
    pub legit_completion: Option<f64>,
    pub force_delete_events: usize,
    pub patch_events: usize,
}

/// Files produced by one simulation.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub events: String,
    pub audit: String,
    pub gauges: Vec<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Completion time of a tenant job running alone on a fresh node.
pub fn tenant_alone_time(cfg: &ScenarioConfig, workload: &TenantWorkload) -> Result<f64, ScenarioError> {
    let mut sim = Simulation::new(
        vec![cfg.node_config()],
        cfg.cost_model(),
        Arc::new(Catalog::new()),
        SimSettings {
            gc_enabled: false,
            eviction_enabled: false,
            ..SimSettings::default()
        },
    );
    let w = TenantWorkload {
        start: 0.0,
        ..workload.clone()
    };
    sim.schedule(
        0.0,
        Action::StartTenant {
            node: NodeId(0),
            workload: w,
        },
    )?;
    sim.run()?;
    Ok(sim.nodes[0].tenants()[0].finish.unwrap_or(f64::INFINITY))
}

pub fn run_variant(
    cfg: &ScenarioConfig,
    images: &Images,
    variant: Variant,
    trial_seed: u64,
) -> Result<(RunResult, Artifacts), ScenarioError> {
    let mut sim = build_simulation(cfg, images, variant, trial_seed)?;
    let end = sim.run()?;
    let result = summarize(cfg, &sim, variant, end)?;
    let artifacts = Artifacts {
        events: sim.log.to_text(),
        audit: sim.control.audit_text(),
        gauges: sim.traces.iter().map(|t| t.to_csv()).collect(),
    };
    Ok((result, artifacts))
}

pub fn summarize(
    cfg: &ScenarioConfig,
    sim: &Simulation,
    variant: Variant,
    end: f64,
) -> Result<RunResult, ScenarioError> {
    let mut nodes = Vec::new();
    for (i, n) in sim.nodes.iter().enumerate() {
        let id = NodeId(i as u32);
        let bytes = sim.attack_bytes(id);
        let window = sim
            .attack_start
            .zip(sim.attack_end(id))
            .filter(|(s, e)| e > s && e.is_finite());
        let duration = window.map(|(s, e)| e - s);
        let sd = match duration {
            Some(d) if bytes > 0 => Some(scheduling_delay_bytes(d, bytes).expect("bytes > 0")),
            _ => None,
        };
        let cpu_avg = window.and_then(|(s, e)| sim.traces[i].cpu_average(s, e).ok());
        let received: u64 = n.requests().map(|r| r.received_bytes).sum();
        let peak = sim.traces[i]
            .samples
            .iter()
            .map(|s| s.disk_used_pct)
            .fold(0.0, f64::max);
        nodes.push(NodeResult {
            node: i as u32,
            attack_duration: duration,
            attack_compressed_bytes: bytes,
            sd,
            cpu_avg,
            attack_pulls_done: sim.attack_requests_in(id, PullState::Done),
            attack_pulls_cancelled: sim.attack_requests_in(id, PullState::Cancelled),
            net_bytes: n.net_bytes,
            bytes_conserved: received == n.net_bytes,
            peak_disk_pct: peak,
        });
    }
    let gc_firings = sim
        .housekeeping
        .gc_firings
        .iter()
        .map(|(t, node, deleted)| GcFiring {
            time: *t,
            node: node.0,
            deleted: deleted.iter().map(|i| sim.catalog.get(*i).name.clone()).collect(),
            ages: deleted
                .iter()
                .map(|img| {
                    let finish = sim.nodes[node.0 as usize]
                        .requests()
                        .filter(|r| {
                            r.image == *img
                                && r.state == PullState::Done
                                && r.finish_time.unwrap_or(f64::INFINITY) <= *t
                        })
                        .filter_map(|r| r.finish_time)
                        .fold(f64::NEG_INFINITY, f64::max);
                    t - finish
                })
                .collect(),
        })
        .collect();
    let evictions = sim
        .housekeeping
        .evictions
        .iter()
        .map(|(t, node, before, after, pods)| EvictionRecord {
            time: *t,
            node: node.0,
            usage_before: *before,
            usage_after: *after,
            pods: pods.len(),
        })
        .collect();
    let mut tenants = Vec::new();
    for rec in &sim.tenants {
        let job = &sim.nodes[rec.node.0 as usize].tenants()[rec.index];
        let alone = tenant_alone_time(cfg, &rec.workload)?;
        let completion = job.finish.map(|f| f - job.start);
        tenants.push(TenantResult {
            name: rec.workload.name.clone(),
            completion,
            alone,
            slowdown: completion.map(|c| slowdown(c, alone)),
            throughput_drop: completion.map(|c| throughput_drop(c, alone)),
        });
    }
    let deploys: Vec<DeployResult> = cfg
        .deploys
        .iter()
        .map(|d| {
            let obj = sim
                .control
                .objects()
                .find(|o| o.name == d.name && o.owner == Owner::Tenant && o.kind == ObjectKind::Pod);
            DeployResult {
                name: d.name.clone(),
                requested: d.at.0,
                running: obj.and_then(|o| o.running_at),
            }
        })
        .collect();
    let legit_completion = if deploys.is_empty() || deploys.iter().any(|d| d.running.is_none()) {
        None
    } else {
        deploys.iter().filter_map(|d| d.running).reduce(f64::max)
    };
    let audit = sim.control.audit();
    let attacked: Vec<&NodeResult> = nodes.iter().filter(|n| n.attack_duration.is_some()).collect();
    Ok(RunResult {
        variant,
        end_time: end,
        sd: mean(attacked.iter().filter_map(|n| n.sd)),
        cpu_avg: mean(attacked.iter().filter_map(|n| n.cpu_avg)),
        attack_duration: mean(attacked.iter().filter_map(|n| n.attack_duration)),
        nodes,
        gc_firings,
        evictions,
        magi: sim.magi.as_ref().map(|m| m.tally.clone()),
        tenants,
        deploys,
        legit_completion,
        force_delete_events: audit.iter().filter(|a| a.verb == Verb::ForceDelete).count(),
        patch_events: audit.iter().filter(|a| a.verb == Verb::Patch).count(),
    })
}

/// Outcome of one image size in a cutoff sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub compressed_bytes: u64,
    pub killed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub throughput: f64,
    pub react_latency: f64,
    pub points: Vec<SweepPoint>,
    /// Largest size that completed and smallest that was killed.
    pub largest_completed: Option<u64>,
    pub smallest_killed: Option<u64>,
    pub boundary_bytes: Option<f64>,
}

/// Pulls images growing by one layer per step, each deleted the moment it
/// is created, and records which ones the mitigation stopped.
pub fn cutoff_sweep(cfg: &ScenarioConfig, throughput: f64) -> Result<SweepResult, ScenarioError> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| ScenarioError::Validation("missing [sweep]".into()))?;
    let mut node = cfg.node_config();
    node.net_bw = throughput;
    let settings = sim_settings(cfg, true);
    let latency = settings.magi.as_ref().map_or(0.0, |m| m.react_latency);
    let first = sweep.first.0.round() as u64;
    let step = sweep.step.0.round() as u64;
    let last = sweep.last.0.round() as u64;
    let mut points = Vec::new();
    let mut k = 0u64;
    while first + k * step <= last {
        let mut layers = vec![LayerSpec::new(
            Digest(fnv1a("sweep/base")),
            first,
            (first as f64 * sweep.expansion).round() as u64,
        )?];
        for i in 0..k {
            layers.push(LayerSpec::new(
                Digest(fnv1a(&format!("sweep/{i}"))),
                step,
                (step as f64 * sweep.expansion).round() as u64,
            )?);
        }
        let mut catalog = Catalog::new();
        let image = catalog.insert(ImageSpec::new(format!("sweep:{k}"), layers)?)?;
        let mut sim = Simulation::new(
            vec![node.clone()],
            cfg.cost_model(),
            Arc::new(catalog),
            settings.clone(),
        );
        let pod = PodSpec {
            name: "probe".into(),
            image,
            pull_policy: PullPolicy::Always,
            node_selector: NodeId(0),
            owner: Owner::Attacker,
        };
        sim.schedule(0.0, Action::CreatePod(pod))?;
        sim.schedule(
            0.0,
            Action::DeletePod {
                name: "probe".into(),
                force: true,
            },
        )?;
        sim.run()?;
        let killed = sim.attack_requests_in(NodeId(0), PullState::Cancelled) > 0;
        points.push(SweepPoint {
            compressed_bytes: first + k * step,
            killed,
        });
        k += 1;
    }
    let largest_completed = points.iter().filter(|p| !p.killed).map(|p| p.compressed_bytes).max();
    let smallest_killed = points.iter().filter(|p| p.killed).map(|p| p.compressed_bytes).min();
    let boundary_bytes = match (largest_completed, smallest_killed) {
        (Some(a), Some(b)) => Some((a + b) as f64 / 2.0),
        _ => None,
    };
    Ok(SweepResult {
        throughput,
        react_latency: latency,
        points,
        largest_completed,
        smallest_killed,
        boundary_bytes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MagiComparison {
    pub baseline: Option<f64>,
    pub attacked: Option<f64>,
    pub mitigated: Option<f64>,
    pub attacked_ratio: Option<f64>,
    pub mitigated_ratio: Option<f64>,
    pub attack_images: usize,
    pub attack_images_cancelled: usize,
    pub attack_images_completed: usize,
    /// Name of every attack image that was pulled to completion.
    pub completed_images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub runs: Vec<RunResult>,
    pub comparison: Option<MagiComparison>,
    pub sweep: Vec<SweepResult>,
}

impl TrialResult {
    /// The main run: the single run, or the attacked variant.
    pub fn primary(&self) -> Option<&RunResult> {
        self.runs
            .iter()
            .find(|r| r.variant == Variant::Single)
            .or_else(|| self.runs.iter().find(|r| r.variant == Variant::Attacked))
    }
}

/// Seeds for trials `0..n` derived from the scenario seed.
pub fn trial_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

pub fn run_trial(
    cfg: &ScenarioConfig,
    images: &Images,
    trial: usize,
    seed: u64,
) -> Result<(TrialResult, Vec<(Variant, Artifacts)>), ScenarioError> {
    let mut runs = Vec::new();
    let mut artifacts = Vec::new();
    let mut comparison = None;
    let mut sweep = Vec::new();
    match cfg.scenario.mode {
        Mode::Single => {
            let (r, a) = run_variant(cfg, images, Variant::Single, seed)?;
            runs.push(r);
            artifacts.push((Variant::Single, a));
        }
        Mode::MagiCompare => {
            for v in [Variant::Baseline, Variant::Attacked, Variant::Mitigated] {
                let (r, a) = run_variant(cfg, images, v, seed)?;
                runs.push(r);
                artifacts.push((v, a));
            }
            let len = |v: Variant| runs.iter().find(|r| r.variant == v).and_then(|r| r.legit_completion);
            let (b, a, m) = (len(Variant::Baseline), len(Variant::Attacked), len(Variant::Mitigated));
            let mitigated = runs.iter().find(|r| r.variant == Variant::Mitigated).unwrap();
            let mut sim = build_simulation(cfg, images, Variant::Mitigated, seed)?;
            sim.run()?;
            let completed_images = sim
                .nodes
                .iter()
                .flat_map(|n| n.requests())
                .filter(|r| r.attack && r.state == PullState::Done)
                .map(|r| images.catalog.get(r.image).name.clone())
                .collect();
            comparison = Some(MagiComparison {
                baseline: b,
                attacked: a,
                mitigated: m,
                attacked_ratio: a.zip(b).map(|(a, b)| a / b),
                mitigated_ratio: m.zip(b).map(|(m, b)| m / b),
                attack_images: attack_plan(cfg, images, seed)?.map_or(0, |p| p.images.len() * p.target_nodes.len()),
                attack_images_cancelled: mitigated.nodes.iter().map(|n| n.attack_pulls_cancelled).sum(),
                attack_images_completed: mitigated.nodes.iter().map(|n| n.attack_pulls_done).sum(),
                completed_images,
            });
        }
        Mode::CutoffSweep => {
            let r = cfg.sweep.as_ref().map(|s| s.throughput.0).unwrap_or(0.0);
            sweep.push(cutoff_sweep(cfg, r)?);
            sweep.push(cutoff_sweep(cfg, r / 2.0)?);
        }
    }
    Ok((
        TrialResult {
            trial,
            seed,
            runs,
            comparison,
            sweep,
        },
        artifacts,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Option<Stats> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Stats {
            n: xs.len(),
            mean,
            std: var.sqrt(),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MagiOutcomes {
    pub alerts: usize,
    pub killed: usize,
    pub blacklisted: usize,
    pub too_late: usize,
    pub spared: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub mode: Mode,
    pub trials: usize,
    pub seed: u64,
    pub sd: Option<Stats>,
    pub cpu_avg: Option<Stats>,
    pub attack_duration: Option<Stats>,
    pub gc_firings: usize,
    pub evictions: usize,
    pub magi_outcomes: Option<MagiOutcomes>,
    pub tenant_slowdown: BTreeMap<String, Stats>,
    pub per_trial: Vec<TrialResult>,
}

pub fn summarize_trials(cfg: &ScenarioConfig, seed: u64, trials: Vec<TrialResult>) -> Summary {
    let primaries: Vec<&RunResult> = trials.iter().filter_map(|t| t.primary()).collect();
    let collect = |f: &dyn Fn(&RunResult) -> Option<f64>| -> Option<Stats> {
        Stats::of(&primaries.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
    };
    let mut magi: Option<MagiOutcomes> = None;
    for t in &trials {
        for r in &t.runs {
            if let Some(m) = &r.magi {
                let acc = magi.get_or_insert_with(MagiOutcomes::default);
                acc.alerts += m.alerts;
                acc.killed += m.killed;
                acc.blacklisted += m.blacklisted;
                acc.too_late += m.too_late;
                acc.spared += m.spared;
            }
        }
    }
    let mut slow: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &primaries {
        for t in &r.tenants {
            if let Some(s) = t.slowdown {
                slow.entry(t.name.clone()).or_default().push(s);
            }
        }
    }
    Summary {
        scenario: cfg.scenario.name.clone(),
        mode: cfg.scenario.mode,
        trials: trials.len(),
        seed,
        sd: collect(&|r| r.sd),
        cpu_avg: collect(&|r| r.cpu_avg),
        attack_duration: collect(&|r| r.attack_duration),
        gc_firings: primaries.iter().map(|r| r.gc_firings.len()).sum(),
        evictions: primaries.iter().map(|r| r.evictions.len()).sum(),
        magi_outcomes: magi,
        tenant_slowdown: slow
            .into_iter()
            .filter_map(|(k, v)| Stats::of(&v).map(|s| (k, s)))
            .collect(),
        per_trial: trials,
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub summary_only: bool,
}

fn write(path: &Path, text: &str) -> Result<(), ScenarioError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| ScenarioError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs every trial of a scenario and writes its outputs.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<Summary, ScenarioError> {
    let trials = opts.trials.unwrap_or(cfg.scenario.trials);
    let seed = opts.seed.unwrap_or(cfg.scenario.seed);
    if trials == 0 {
        return Err(ScenarioError::Validation("trials must be at least 1".into()));
    }
    let images = build_images(cfg)?;
    let seeds = trial_seeds(seed, trials);
    let mut results: Vec<(TrialResult, Vec<(Variant, Artifacts)>)> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, s)| run_trial(cfg, &images, i, *s))
        .collect::<Result<Vec<_>, _>>()?;
    results.sort_by_key(|(t, _)| t.trial);
    if let Some(out) = &opts.out {
        if !opts.summary_only {
            for (t, artifacts) in &results {
                for (variant, a) in artifacts {
                    let mut dir = out.join(format!("trial-{:03}", t.trial));
                    if *variant != Variant::Single {
                        dir = dir.join(format!("{variant:?}").to_lowercase());
                    }
                    write(&dir.join("events.log"), &a.events)?;
                    write(&dir.join("audit.log"), &a.audit)?;
                    for (n, csv) in a.gauges.iter().enumerate() {
                        write(&dir.join(format!("node-{n}.csv")), csv)?;
                    }
                }
            }
        }
    }
    let summary = summarize_trials(cfg, seed, results.into_iter().map(|(t, _)| t).collect());
    if let Some(out) = &opts.out {
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        write(&out.join("summary.json"), &json)?;
    }
    Ok(summary)
}

/// True iff both files hold identical bytes.
pub fn replay_check(a: &Path, b: &Path) -> Result<bool, ScenarioError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| ScenarioError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    Ok(read(a)? == read(b)?)
}

/// Compressed gigabytes of the generated attack set, base counted once.
pub fn set_compressed_gb(images: &Images) -> f64 {
    let mut seen = std::collections::BTreeSet::new();
    let mut total = 0u64;
    for id in &images.set {
        for l in &images.catalog.get(*id).layers {
            if seen.insert(l.digest) {
                total += l.compressed_bytes;
            }
        }
    }
    total as f64 / GB
}
