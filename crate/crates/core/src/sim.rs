//! The simulation driver: one event queue, the control plane, every node
//! runtime and the optional mitigation, advanced together.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::{ControlPlane, DeploymentSpec, PodPhase};
use crate::engine::{EventKind, EventLog, EventQueue};
use crate::error::SimError;
use crate::gc::{gc_scan, select_evictions, EvictionCandidate};
use crate::magi::{Magi, MagiSettings};
use crate::metrics::{MetricsTrace, TenantWorkload};
use crate::model::{Catalog, CostModel, ImageId, NodeConfig, NodeId, ObjectId, Owner, PodSpec, SimTime, TIME_EPSILON};
use crate::runtime::{NodeNote, NodeRuntime, PullState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub sample_interval: f64,
    pub gc_interval: f64,
    pub eviction_interval: f64,
    /// Delay between a graceful delete and the object disappearing.
    pub teardown_delay: f64,
    pub api_latency: f64,
    /// Hard stop for runs that never drain.
    pub horizon: f64,
    pub gc_enabled: bool,
    pub eviction_enabled: bool,
    pub magi: Option<MagiSettings>,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            sample_interval: 1.0,
            gc_interval: 60.0,
            eviction_interval: 10.0,
            teardown_delay: 1.0,
            api_latency: 0.0,
            horizon: 1.0e6,
            gc_enabled: true,
            eviction_enabled: true,
            magi: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    CreatePod(PodSpec),
    DeletePod {
        name: String,
        force: bool,
    },
    CreateDeployment {
        name: String,
        spec: DeploymentSpec,
        owner: Owner,
    },
    PatchDeployment {
        name: String,
        image: ImageId,
    },
    Teardown(ObjectId),
    AttackStep(String),
    StartTenant {
        node: NodeId,
        workload: TenantWorkload,
    },
    GcScan(NodeId),
    EvictionScan(NodeId),
    Sample,
    MagiAlert {
        node: NodeId,
        image: ImageId,
        pod: ObjectId,
    },
    MagiKill {
        node: NodeId,
        image: ImageId,
    },
}

impl Action {
    fn periodic(&self) -> bool {
        matches!(self, Action::GcScan(_) | Action::EvictionScan(_) | Action::Sample)
    }
}

/// One tenant job started by the scenario.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TenantRecord {
    pub node: NodeId,
    pub index: usize,
    pub workload: TenantWorkload,
}

/// Housekeeping decisions, for reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Housekeeping {
    /// `(time, node, deleted images)` for every GC scan that deleted something.
    pub gc_firings: Vec<(f64, NodeId, Vec<ImageId>)>,
    /// `(time, node, disk fraction before, disk fraction after, evicted pods)`.
    pub evictions: Vec<(f64, NodeId, f64, f64, Vec<ObjectId>)>,
}

pub struct Simulation {
    pub(crate) queue: EventQueue<Action>,
    pub nodes: Vec<NodeRuntime>,
    pub control: ControlPlane,
    pub magi: Option<Magi>,
    pub log: EventLog,
    pub catalog: Arc<Catalog>,
    pub settings: SimSettings,
    pub traces: Vec<MetricsTrace>,
    pub tenants: Vec<TenantRecord>,
    pub housekeeping: Housekeeping,
    /// Time of the first attacker action.
    pub attack_start: Option<f64>,
    scripted: usize,
}

impl Simulation {
    pub fn new(configs: Vec<NodeConfig>, cost: CostModel, catalog: Arc<Catalog>, settings: SimSettings) -> Simulation {
        let nodes: Vec<NodeRuntime> = configs
            .into_iter()
            .enumerate()
            .map(|(i, cfg)| NodeRuntime::new(NodeId(i as u32), cfg, cost.clone(), catalog.clone()))
            .collect();
        let traces = nodes
            .iter()
            .map(|n| MetricsTrace {
                node: Some(n.id),
                ..MetricsTrace::default()
            })
            .collect();
        let magi = settings.magi.clone().map(|s| Magi::new(s, nodes.len()));
        let mut sim = Simulation {
            queue: EventQueue::new(),
            nodes,
            control: ControlPlane::default(),
            magi,
            log: EventLog::default(),
            catalog,
            settings,
            traces,
            tenants: Vec::new(),
            housekeeping: Housekeeping::default(),
            attack_start: None,
            scripted: 0,
        };
        let s = sim.settings.clone();
        for i in 0..sim.nodes.len() {
            let id = NodeId(i as u32);
            if s.gc_enabled {
                sim.push(s.gc_interval, Action::GcScan(id));
            }
            if s.eviction_enabled {
                sim.push(s.eviction_interval, Action::EvictionScan(id));
            }
        }
        sim.push(s.sample_interval, Action::Sample);
        sim
    }

    pub fn now(&self) -> f64 {
        self.queue.clock().secs()
    }

    fn push(&mut self, at: f64, action: Action) {
        self.schedule(at, action)
            .expect("internal events are never in the past");
    }

    /// Queues an action. Fails if `at` is before the current clock.
    pub fn schedule(&mut self, at: f64, action: Action) -> Result<u64, SimError> {
        if !(at.is_finite() && at >= 0.0) {
            return Err(SimError::SchedulingInPast { at, clock: self.now() });
        }
        if !action.periodic() {
            self.scripted += 1;
        }
        let res = self.queue.schedule(SimTime::from_secs(at), action);
        if res.is_err() {
            self.scripted -= 1;
        }
        res
    }

    pub fn node(&self, id: NodeId) -> Result<&NodeRuntime, SimError> {
        self.nodes.get(id.0 as usize).ok_or(SimError::UnknownNode(id))
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Result<&mut NodeRuntime, SimError> {
        self.nodes.get_mut(id.0 as usize).ok_or(SimError::UnknownNode(id))
    }

    pub(crate) fn record(&mut self, kind: EventKind, node: Option<NodeId>, detail: String) {
        let t = self.queue.clock();
        self.log.push(t, kind, node, detail);
    }

    fn next_node_deadline(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| n.next_deadline())
            .min_by(|a, b| a.total_cmp(b))
    }

    /// True once no scripted work is queued and every node is idle.
    pub fn drained(&self) -> bool {
        self.scripted == 0 && self.next_node_deadline().is_none()
    }

    /// Processes one batch at the earliest pending time not after `limit`.
    /// Node completions at a tie run before queued actions.
    fn step(&mut self, limit: f64) -> Result<bool, SimError> {
        let te = self.queue.peek_time().map_or(f64::INFINITY, |t| t.secs());
        let tn = self.next_node_deadline().unwrap_or(f64::INFINITY);
        let t = te.min(tn).max(self.now());
        if t > limit || !t.is_finite() {
            return Ok(false);
        }
        for n in &mut self.nodes {
            n.advance_to(t);
        }
        self.queue.advance_to(SimTime::from_secs(t));
        if tn <= te {
            let eps = TIME_EPSILON * (1.0 + t);
            for n in &mut self.nodes {
                if n.next_deadline().is_some_and(|d| d <= t + eps) {
                    n.process_due();
                }
            }
        } else {
            let ev = self.queue.pop().expect("peeked");
            if !ev.payload.periodic() {
                self.scripted -= 1;
            }
            self.dispatch(ev.payload)?;
        }
        self.drain_nodes()?;
        Ok(true)
    }

    /// Runs every event up to and including `t_end`, then moves the clock there.
    pub fn run_until(&mut self, t_end: f64) -> Result<usize, SimError> {
        let mut count = 0;
        while self.step(t_end)? {
            count += 1;
        }
        if t_end > self.now() {
            for n in &mut self.nodes {
                n.advance_to(t_end);
            }
            self.queue.advance_to(SimTime::from_secs(t_end));
        }
        Ok(count)
    }

    /// Runs until the scenario drains or the horizon is reached. Returns the
    /// end time.
    pub fn run(&mut self) -> Result<f64, SimError> {
        let horizon = self.settings.horizon;
        while !self.drained() {
            if !self.step(horizon)? {
                break;
            }
        }
        let end = self.now();
        self.finish(end);
        Ok(end)
    }

    fn finish(&mut self, end: f64) {
        for (node, trace) in self.nodes.iter_mut().zip(self.traces.iter_mut()) {
            if trace.samples.last().is_none_or(|s| s.time_s < end) {
                trace.samples.push(node.take_sample());
            }
            trace.cpu_steps = node.cpu_steps().to_vec();
        }
    }

    fn dispatch(&mut self, action: Action) -> Result<(), SimError> {
        let now = self.now();
        match action {
            Action::CreatePod(spec) => {
                if spec.owner == Owner::Attacker {
                    self.attack_start.get_or_insert(now);
                }
                self.create_pod(spec, None)?;
            }
            Action::DeletePod { name, force } => {
                let id = self
                    .control
                    .live_by_name(&name)
                    .ok_or(SimError::UnknownObject(u64::MAX))?;
                self.delete_pod(id, force)?;
            }
            Action::CreateDeployment { name, spec, owner } => {
                if owner == Owner::Attacker {
                    self.attack_start.get_or_insert(now);
                }
                self.create_deployment(&name, spec, owner)?;
            }
            Action::PatchDeployment { name, image } => {
                let id = self
                    .control
                    .live_by_name(&name)
                    .ok_or(SimError::UnknownObject(u64::MAX))?;
                self.patch_deployment(id, image)?;
            }
            Action::Teardown(pod) => self.finish_teardown(pod),
            Action::AttackStep(note) => self.record(EventKind::AttackStep, None, note),
            Action::StartTenant { node, workload } => {
                let n = self.node_mut(node)?;
                let index = n.add_tenant(
                    &workload.name,
                    workload.cpu_demand,
                    workload.io_demand,
                    workload.total_work,
                );
                let detail = format!("tenant={} start", workload.name);
                self.tenants.push(TenantRecord { node, index, workload });
                self.record(EventKind::ApiRequest, Some(node), detail);
            }
            Action::GcScan(node) => {
                self.run_gc(node, now);
                let next = now + self.settings.gc_interval;
                self.push(next, Action::GcScan(node));
            }
            Action::EvictionScan(node) => {
                self.run_eviction(node, now);
                let next = now + self.settings.eviction_interval;
                self.push(next, Action::EvictionScan(node));
            }
            Action::Sample => {
                for (n, trace) in self.nodes.iter_mut().zip(self.traces.iter_mut()) {
                    trace.samples.push(n.take_sample());
                }
                let next = now + self.settings.sample_interval;
                self.push(next, Action::Sample);
            }
            Action::MagiAlert { node, image, pod } => self.magi_alert(node, image, pod),
            Action::MagiKill { node, image } => self.magi_kill(node, image),
        }
        Ok(())
    }

    fn run_gc(&mut self, node: NodeId, now: f64) {
        let n = &mut self.nodes[node.0 as usize];
        let before = n.disk_used_fraction();
        let deleted = gc_scan(n, now);
        if deleted.is_empty() {
            return;
        }
        let after = n.disk_used_fraction();
        let names: Vec<String> = deleted.iter().map(|i| self.catalog.get(*i).name.clone()).collect();
        let detail = format!(
            "reason=high_threshold usage={:.4} after={:.4} deleted={}",
            before,
            after,
            names.join(",")
        );
        self.housekeeping.gc_firings.push((now, node, deleted));
        self.record(EventKind::GcScan, Some(node), detail);
    }

    fn run_eviction(&mut self, node: NodeId, now: f64) {
        let candidates: Vec<EvictionCandidate> = self
            .control
            .pods_on(node, PodPhase::Running)
            .map(|(pod, image)| EvictionCandidate { pod, image })
            .collect();
        let n = &self.nodes[node.0 as usize];
        let before = n.disk_used_fraction();
        let chosen = select_evictions(n, &candidates);
        if chosen.is_empty() {
            return;
        }
        let pods: Vec<ObjectId> = chosen.iter().map(|&i| candidates[i].pod).collect();
        let mut images = BTreeSet::new();
        for &i in &chosen {
            self.evict_pod(candidates[i].pod);
            images.insert(candidates[i].image);
        }
        let n = &mut self.nodes[node.0 as usize];
        for img in images {
            if n.cached_images().get(&img).is_some_and(|c| c.in_use == 0) {
                n.delete_image(img);
            }
        }
        let after = n.disk_used_fraction();
        let list: Vec<String> = pods.iter().map(|p| p.to_string()).collect();
        let detail = format!(
            "reason=disk_pressure usage={before:.4} after={after:.4} evicted={}",
            list.join(",")
        );
        self.housekeeping.evictions.push((now, node, before, after, pods));
        self.record(EventKind::EvictionScan, Some(node), detail);
    }

    /// Moves node logs into the event log and reacts to node notes.
    pub(crate) fn drain_nodes(&mut self) -> Result<(), SimError> {
        loop {
            let mut any = false;
            for i in 0..self.nodes.len() {
                let id = self.nodes[i].id;
                for (t, kind, detail) in self.nodes[i].drain_log() {
                    self.log.push(SimTime::from_secs(t), kind, Some(id), detail);
                    any = true;
                }
                for note in self.nodes[i].drain_notes() {
                    any = true;
                    self.on_note(id, note)?;
                }
            }
            if !any {
                return Ok(());
            }
        }
    }

    fn on_note(&mut self, node: NodeId, note: NodeNote) -> Result<(), SimError> {
        match note {
            NodeNote::PullStarted { image, .. } => self.magi_on_dequeue(node, image),
            NodeNote::ImageDone { image, requesters, .. } => {
                for pod in requesters {
                    self.pull_finished_for(pod, node, image);
                }
            }
            NodeNote::PullCancelled { .. } => {}
            NodeNote::TenantDone { .. } => {}
        }
        if let Some(m) = &mut self.magi {
            m.sync_mirror(&self.nodes[node.0 as usize]);
        }
        Ok(())
    }

    /// Latest moment an attack-attributed pull left the live states on
    /// `node`, or `None` if the node never saw one.
    pub fn attack_end(&self, node: NodeId) -> Option<f64> {
        let n = &self.nodes[node.0 as usize];
        let mut end: Option<f64> = None;
        for r in n.requests().filter(|r| r.attack) {
            let t = if r.state.is_live() {
                f64::INFINITY
            } else {
                r.finish_time.unwrap_or(0.0)
            };
            end = Some(end.map_or(t, |e: f64| e.max(t)));
        }
        end
    }

    /// Compressed bytes attack-attributed pulls planned to fetch on `node`.
    pub fn attack_bytes(&self, node: NodeId) -> u64 {
        self.nodes[node.0 as usize]
            .requests()
            .filter(|r| r.attack)
            .map(|r| r.planned_bytes)
            .sum()
    }

    pub fn attack_requests_in(&self, node: NodeId, state: PullState) -> usize {
        self.nodes[node.0 as usize]
            .requests()
            .filter(|r| r.attack && r.state == state)
            .count()
    }
}
