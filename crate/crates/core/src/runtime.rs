//! One worker node's container runtime: pull queue, parallel slots, layer
//! sockets, unpack pipeline, layer store and the shared CPU/disk/network
//! resources.
//!
//! Rates are piecewise constant. Every mutation ends with [`NodeRuntime::refresh`],
//! which starts queued pulls, settles anything that completes instantly and
//! recomputes the rate assignment.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::engine::EventKind;
use crate::model::{
    Catalog, CostModel, Digest, ImageId, LayerSpec, NodeConfig, NodeId, ObjectId, SlotRelease, MB, TIME_EPSILON,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ReqId(pub u64);

impl fmt::Display for ReqId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "req-{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PullState {
    Queued,
    Downloading,
    Unpacking,
    Done,
    Cancelled,
}

impl PullState {
    pub fn is_live(self) -> bool {
        matches!(self, PullState::Queued | PullState::Downloading | PullState::Unpacking)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Phase {
    /// Already in the layer store when the manifest resolved.
    Cached,
    /// Being fetched by another request; usable once it lands.
    External(ReqId),
    Pending,
    Connecting {
        socket: u64,
        ready_at: f64,
    },
    Transferring {
        socket: u64,
        done: f64,
    },
    Downloaded,
    Unpacking {
        done: f64,
    },
    Committing {
        ready_at: f64,
    },
    Unpacked,
}

impl Phase {
    fn downloading(self) -> bool {
        matches!(
            self,
            Phase::External(_) | Phase::Pending | Phase::Connecting { .. } | Phase::Transferring { .. }
        )
    }
}

#[derive(Clone, Debug)]
struct LayerSlot {
    spec: LayerSpec,
    phase: Phase,
}

#[derive(Clone, Debug)]
pub struct PullRequest {
    pub id: ReqId,
    pub image: ImageId,
    pub requesters: Vec<ObjectId>,
    pub attack: bool,
    pub enqueue_time: f64,
    pub start_time: Option<f64>,
    pub finish_time: Option<f64>,
    pub state: PullState,
    /// Compressed bytes this request planned to fetch itself.
    pub planned_bytes: u64,
    /// Compressed bytes received from the network, partial layers floored.
    pub received_bytes: u64,
    manifest_at: Option<f64>,
    layers: Vec<LayerSlot>,
    next_unpack: usize,
    holds_slot: bool,
}

impl PullRequest {
    pub fn open_sockets(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.phase, Phase::Connecting { .. } | Phase::Transferring { .. }))
            .count()
    }

    /// True while any layer still has to arrive.
    pub fn has_unfinished_layers(&self) -> bool {
        self.manifest_at.is_some() || self.layers.iter().any(|l| l.phase.downloading())
    }

    fn unpacking_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l.phase, Phase::Unpacking { .. }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Holder {
    Image(ImageId),
    Request(ReqId),
}

#[derive(Clone, Debug)]
struct StoredLayer {
    bytes: u64,
    holders: BTreeSet<Holder>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CachedImage {
    pub last_pull_finish: f64,
    pub in_use: u32,
    pub bytes: u64,
}

/// A background job competing with the runtime for CPU and disk.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TenantJob {
    pub name: String,
    /// Cores the job would use alone.
    pub cpu_demand: f64,
    /// Disk write bytes per second the job would issue alone.
    pub io_demand: f64,
    pub total_work: f64,
    pub start: f64,
    pub remaining: f64,
    pub finish: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubmitOutcome {
    Enqueued(ReqId),
    Coalesced(ReqId),
}

impl SubmitOutcome {
    pub fn id(self) -> ReqId {
        match self {
            SubmitOutcome::Enqueued(id) | SubmitOutcome::Coalesced(id) => id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CancelOutcome {
    Cancelled,
    AlreadyDone,
    NotFound,
}

/// Things the simulation has to react to.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeNote {
    PullStarted {
        req: ReqId,
        image: ImageId,
    },
    ImageDone {
        req: ReqId,
        image: ImageId,
        requesters: Vec<ObjectId>,
    },
    PullCancelled {
        req: ReqId,
        image: ImageId,
    },
    TenantDone {
        index: usize,
    },
}

/// Rate assignment between two events.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Rates {
    pub socket: f64,
    pub unpack: f64,
    pub tenants: Vec<f64>,
    pub cpu_util: f64,
    pub net: f64,
    pub disk_write: f64,
}

/// Averages over one sampling interval; `disk_used_pct`, `queue_len` and
/// `active_pulls` are instantaneous at the sample time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaugeSample {
    pub time_s: f64,
    pub cpu_util: f64,
    pub net_mb_s: f64,
    pub disk_write_mb_s: f64,
    pub disk_used_pct: f64,
    pub queue_len: usize,
    pub active_pulls: usize,
}

#[derive(Clone, Debug, Default)]
struct Accum {
    since: f64,
    cpu: f64,
    net: f64,
    disk: f64,
}

pub struct NodeRuntime {
    pub id: NodeId,
    pub config: NodeConfig,
    pub cost: CostModel,
    catalog: Arc<Catalog>,
    clock: f64,
    requests: BTreeMap<ReqId, PullRequest>,
    queue: VecDeque<ReqId>,
    active: Vec<ReqId>,
    store: BTreeMap<Digest, StoredLayer>,
    stored_bytes: u64,
    inflight: BTreeMap<Digest, ReqId>,
    /// Layers waiting for the node-wide commit; the front one is committing.
    commits: VecDeque<(ReqId, usize)>,
    images: BTreeMap<ImageId, CachedImage>,
    tenants: Vec<TenantJob>,
    next_req: u64,
    next_socket: u64,
    rates: Rates,
    /// Exact compressed bytes received over the network.
    pub net_bytes: u64,
    cpu_steps: Vec<(f64, f64)>,
    acc: Accum,
    log: Vec<(f64, EventKind, String)>,
    notes: Vec<NodeNote>,
}

impl NodeRuntime {
    pub fn new(id: NodeId, config: NodeConfig, cost: CostModel, catalog: Arc<Catalog>) -> Self {
        NodeRuntime {
            id,
            config,
            cost,
            catalog,
            clock: 0.0,
            requests: BTreeMap::new(),
            queue: VecDeque::new(),
            active: Vec::new(),
            store: BTreeMap::new(),
            stored_bytes: 0,
            inflight: BTreeMap::new(),
            commits: VecDeque::new(),
            images: BTreeMap::new(),
            tenants: Vec::new(),
            next_req: 0,
            next_socket: 0,
            rates: Rates::default(),
            net_bytes: 0,
            cpu_steps: vec![(0.0, 0.0)],
            acc: Accum::default(),
            log: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn rates(&self) -> &Rates {
        &self.rates
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn request(&self, id: ReqId) -> Option<&PullRequest> {
        self.requests.get(&id)
    }

    pub fn requests(&self) -> impl Iterator<Item = &PullRequest> {
        self.requests.values()
    }

    pub fn live_request_for(&self, image: ImageId) -> Option<&PullRequest> {
        self.requests.values().find(|r| r.image == image && r.state.is_live())
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn active_pulls(&self) -> usize {
        self.active.len()
    }

    /// Images in runtime order: slot holders by start time, then the queue.
    pub fn pull_order(&self) -> Vec<ImageId> {
        self.active
            .iter()
            .chain(self.queue.iter())
            .map(|id| self.requests[id].image)
            .collect()
    }

    pub fn cached_images(&self) -> &BTreeMap<ImageId, CachedImage> {
        &self.images
    }

    pub fn is_cached(&self, image: ImageId) -> bool {
        self.images.contains_key(&image)
    }

    pub fn tenants(&self) -> &[TenantJob] {
        &self.tenants
    }

    pub fn cpu_steps(&self) -> &[(f64, f64)] {
        &self.cpu_steps
    }

    pub fn drain_log(&mut self) -> Vec<(f64, EventKind, String)> {
        std::mem::take(&mut self.log)
    }

    pub fn drain_notes(&mut self) -> Vec<NodeNote> {
        std::mem::take(&mut self.notes)
    }

    fn emit(&mut self, kind: EventKind, detail: String) {
        self.log.push((self.clock, kind, detail));
    }

    fn image_name(&self, image: ImageId) -> &str {
        &self.catalog.get(image).name
    }

    /// Bytes on disk, counting transient compressed blobs and partial layers.
    pub fn disk_used(&self) -> f64 {
        let mut transient = 0.0;
        for id in &self.active {
            transient += transient_bytes(&self.requests[id]);
        }
        for r in self.requests.values() {
            if r.state == PullState::Unpacking && !r.holds_slot {
                transient += transient_bytes(r);
            }
        }
        self.config.baseline_disk_used_bytes as f64 + self.stored_bytes as f64 + transient
    }

    pub fn disk_used_fraction(&self) -> f64 {
        self.disk_used() / self.config.disk_capacity_bytes as f64
    }

    pub fn stored_bytes(&self) -> u64 {
        self.stored_bytes
    }

    /// Bytes that deleting all of `images` would free, shared layers counted
    /// only when nothing else holds them.
    pub fn bytes_freed_by(&self, images: &[ImageId]) -> u64 {
        let set: BTreeSet<Holder> = images.iter().map(|&i| Holder::Image(i)).collect();
        self.store
            .values()
            .filter(|l| {
                !l.holders.is_empty()
                    && l.holders.iter().any(|h| set.contains(h))
                    && l.holders.iter().all(|h| set.contains(h))
            })
            .map(|l| l.bytes)
            .sum()
    }

    /// Queues a pull for `image`, or joins a live one for the same image.
    pub fn submit_pull(&mut self, image: ImageId, requester: ObjectId, attack: bool) -> SubmitOutcome {
        if let Some(existing) = self
            .requests
            .values_mut()
            .find(|r| r.image == image && r.state.is_live())
        {
            existing.requesters.push(requester);
            existing.attack |= attack;
            let id = existing.id;
            let detail = format!("{id} image={} coalesced requester={requester}", self.image_name(image));
            self.emit(EventKind::PullQueued, detail);
            return SubmitOutcome::Coalesced(id);
        }
        let id = ReqId(self.next_req);
        self.next_req += 1;
        self.requests.insert(
            id,
            PullRequest {
                id,
                image,
                requesters: vec![requester],
                attack,
                enqueue_time: self.clock,
                start_time: None,
                finish_time: None,
                state: PullState::Queued,
                planned_bytes: 0,
                received_bytes: 0,
                manifest_at: None,
                layers: Vec::new(),
                next_unpack: 0,
                holds_slot: false,
            },
        );
        self.queue.push_back(id);
        let detail = format!("{id} image={} requester={requester}", self.image_name(image));
        self.emit(EventKind::PullQueued, detail);
        self.refresh();
        SubmitOutcome::Enqueued(id)
    }

    /// Stops the live pull of `image` if it is still queued or downloading.
    pub fn cancel_pull(&mut self, image: ImageId) -> CancelOutcome {
        let Some(req) = self.live_request_for(image) else {
            return if self.is_cached(image) {
                CancelOutcome::AlreadyDone
            } else {
                CancelOutcome::NotFound
            };
        };
        let id = req.id;
        match req.state {
            PullState::Queued => {
                self.queue.retain(|q| *q != id);
                let r = self.requests.get_mut(&id).unwrap();
                r.state = PullState::Cancelled;
                r.finish_time = Some(self.clock);
            }
            PullState::Downloading => self.abort_download(id),
            _ => return CancelOutcome::AlreadyDone,
        }
        let detail = format!("{id} image={}", self.image_name(image));
        self.emit(EventKind::PullCancelled, detail);
        self.notes.push(NodeNote::PullCancelled { req: id, image });
        self.refresh();
        CancelOutcome::Cancelled
    }

    fn abort_download(&mut self, id: ReqId) {
        let clock = self.clock;
        let r = self.requests.get_mut(&id).unwrap();
        let mut partial = 0u64;
        for l in &mut r.layers {
            if let Phase::Transferring { done, .. } = l.phase {
                partial += (done.floor() as u64).min(l.spec.compressed_bytes);
            }
            l.phase = Phase::Pending;
        }
        r.received_bytes += partial;
        r.state = PullState::Cancelled;
        r.finish_time = Some(clock);
        r.manifest_at = None;
        r.holds_slot = false;
        self.net_bytes += partial;
        self.active.retain(|a| *a != id);
        self.commits.retain(|(r, _)| *r != id);

        let orphaned: Vec<Digest> = self
            .inflight
            .iter()
            .filter(|(_, owner)| **owner == id)
            .map(|(d, _)| *d)
            .collect();
        for d in &orphaned {
            self.inflight.remove(d);
        }
        self.drop_holder(Holder::Request(id));

        // Anyone waiting on a layer this request was fetching now fetches it.
        let waiting: Vec<ReqId> = self
            .requests
            .values()
            .filter(|r| r.state.is_live() && r.layers.iter().any(|l| l.phase == Phase::External(id)))
            .map(|r| r.id)
            .collect();
        for w in waiting {
            let mut planned = 0;
            let mut claimed = Vec::new();
            let r = self.requests.get_mut(&w).unwrap();
            for l in &mut r.layers {
                if l.phase == Phase::External(id) {
                    match self.inflight.get(&l.spec.digest) {
                        Some(owner) => l.phase = Phase::External(*owner),
                        None => {
                            l.phase = Phase::Pending;
                            planned += l.spec.compressed_bytes;
                            claimed.push(l.spec.digest);
                            self.inflight.insert(l.spec.digest, w);
                        }
                    }
                }
            }
            r.planned_bytes += planned;
            if r.state == PullState::Unpacking {
                r.state = PullState::Downloading;
            }
            if !r.holds_slot {
                // Slot was handed back after downloads finished; take it back
                // without counting against the queue.
                r.holds_slot = true;
                self.active.push(w);
            }
        }
    }

    fn drop_holder(&mut self, holder: Holder) {
        let mut freed = Vec::new();
        for (d, l) in self.store.iter_mut() {
            if l.holders.remove(&holder) && l.holders.is_empty() {
                freed.push(*d);
            }
        }
        for d in freed {
            let l = self.store.remove(&d).unwrap();
            self.stored_bytes -= l.bytes;
        }
    }

    /// Marks one more running container on a cached image.
    pub fn acquire(&mut self, image: ImageId) -> bool {
        match self.images.get_mut(&image) {
            Some(c) => {
                c.in_use += 1;
                true
            }
            None => false,
        }
    }

    pub fn release(&mut self, image: ImageId) {
        if let Some(c) = self.images.get_mut(&image) {
            c.in_use = c.in_use.saturating_sub(1);
        }
    }

    /// Removes an image from the cache; layers no one else holds are freed.
    /// Returns the freed bytes, or `None` if the image was not cached.
    pub fn delete_image(&mut self, image: ImageId) -> Option<u64> {
        self.images.remove(&image)?;
        let before = self.stored_bytes;
        self.drop_holder(Holder::Image(image));
        let freed = before - self.stored_bytes;
        self.refresh();
        Some(freed)
    }

    pub fn add_tenant(&mut self, name: &str, cpu_demand: f64, io_demand: f64, total_work: f64) -> usize {
        let index = self.tenants.len();
        self.tenants.push(TenantJob {
            name: name.to_string(),
            cpu_demand,
            io_demand,
            total_work,
            start: self.clock,
            remaining: total_work,
            finish: None,
        });
        self.refresh();
        index
    }

    /// Starts queued pulls, settles instant completions and recomputes rates.
    pub fn refresh(&mut self) {
        self.settle(self.clock);
    }

    fn start_queued(&mut self) -> bool {
        let mut changed = false;
        while self.active.len() < self.config.max_parallel_image_pulls {
            let Some(id) = self.queue.pop_front() else { break };
            let clock = self.clock;
            let fetch = self.cost.manifest_fetch;
            let r = self.requests.get_mut(&id).unwrap();
            r.state = PullState::Downloading;
            r.start_time = Some(clock);
            r.manifest_at = Some(clock + fetch);
            r.holds_slot = true;
            let image = r.image;
            self.active.push(id);
            self.notes.push(NodeNote::PullStarted { req: id, image });
            changed = true;
        }
        changed
    }

    fn resolve_manifest(&mut self, id: ReqId) {
        let image = self.requests[&id].image;
        let specs = self.catalog.get(image).layers.clone();
        let mut layers = Vec::with_capacity(specs.len());
        let mut planned = 0;
        for spec in specs {
            let phase = if let Some(stored) = self.store.get_mut(&spec.digest) {
                stored.holders.insert(Holder::Request(id));
                Phase::Cached
            } else if let Some(owner) = self.inflight.get(&spec.digest) {
                Phase::External(*owner)
            } else {
                self.inflight.insert(spec.digest, id);
                planned += spec.compressed_bytes;
                Phase::Pending
            };
            layers.push(LayerSlot { spec, phase });
        }
        let r = self.requests.get_mut(&id).unwrap();
        r.manifest_at = None;
        r.layers = layers;
        r.planned_bytes += planned;
    }

    /// Opens sockets for pending layers of every slot holder. Returns true if
    /// anything opened.
    fn open_sockets(&mut self) -> bool {
        let mut opened = false;
        let max = self.config.max_sockets_per_image;
        let latency = self.cost.layer_request_latency;
        let active = self.active.clone();
        for id in active {
            loop {
                let r = &self.requests[&id];
                if r.manifest_at.is_some() || r.open_sockets() >= max {
                    break;
                }
                let Some(idx) = r.layers.iter().position(|l| l.phase == Phase::Pending) else {
                    break;
                };
                let socket = self.next_socket;
                self.next_socket += 1;
                let clock = self.clock;
                let r = self.requests.get_mut(&id).unwrap();
                r.layers[idx].phase = if latency > 0.0 {
                    Phase::Connecting {
                        socket,
                        ready_at: clock + latency,
                    }
                } else {
                    Phase::Transferring { socket, done: 0.0 }
                };
                let digest = r.layers[idx].spec.digest;
                self.emit(EventKind::SocketOpened, format!("{id} socket={socket} layer={digest}"));
                opened = true;
            }
        }
        opened
    }

    /// Moves the unpack cursor of `id` as far as it can go without work.
    fn advance_unpack(&mut self, id: ReqId) -> bool {
        let mut changed = false;
        loop {
            let r = self.requests.get_mut(&id).unwrap();
            let started = matches!(r.state, PullState::Downloading | PullState::Unpacking);
            if r.manifest_at.is_some() || !started {
                return changed;
            }
            if r.next_unpack == r.layers.len() {
                self.complete(id);
                return true;
            }
            let l = &mut r.layers[r.next_unpack];
            match l.phase {
                Phase::Cached | Phase::Unpacked => {
                    r.next_unpack += 1;
                    changed = true;
                }
                Phase::Downloaded => {
                    l.phase = Phase::Unpacking { done: 0.0 };
                    return true;
                }
                _ => return changed,
            }
        }
    }

    fn complete(&mut self, id: ReqId) {
        let clock = self.clock;
        let r = self.requests.get_mut(&id).unwrap();
        r.state = PullState::Done;
        r.finish_time = Some(clock);
        let image = r.image;
        let requesters = r.requesters.clone();
        let digests: Vec<Digest> = r.layers.iter().map(|l| l.spec.digest).collect();
        let held = std::mem::replace(&mut r.holds_slot, false);
        if held {
            self.active.retain(|a| *a != id);
        }
        let mut bytes = 0;
        for d in &digests {
            let stored = self.store.get_mut(d).expect("completed layer is stored");
            stored.holders.insert(Holder::Image(image));
            stored.holders.remove(&Holder::Request(id));
            bytes += stored.bytes;
        }
        let entry = self.images.entry(image).or_insert(CachedImage {
            last_pull_finish: clock,
            in_use: 0,
            bytes,
        });
        entry.last_pull_finish = clock;
        entry.bytes = bytes;
        let detail = format!("{id} image={}", self.image_name(image));
        self.emit(EventKind::ImageDone, detail);
        self.notes.push(NodeNote::ImageDone {
            req: id,
            image,
            requesters,
        });
    }

    /// Updates request states after downloads finish and releases slots.
    fn update_states(&mut self) -> bool {
        let mut changed = false;
        let release = self.config.slot_release == SlotRelease::OnDownloadDone;
        let active = self.active.clone();
        for id in active {
            let r = self.requests.get_mut(&id).unwrap();
            if r.state == PullState::Downloading && !r.has_unfinished_layers() {
                r.state = PullState::Unpacking;
                changed = true;
            }
            if release && r.state == PullState::Unpacking && r.holds_slot {
                r.holds_slot = false;
                self.active.retain(|a| *a != id);
                changed = true;
            }
        }
        changed
    }

    fn land_layer(&mut self, id: ReqId, idx: usize) {
        let r = self.requests.get_mut(&id).unwrap();
        let spec = r.layers[idx].spec;
        r.layers[idx].phase = Phase::Unpacked;
        let entry = self.store.entry(spec.digest).or_insert_with(|| StoredLayer {
            bytes: spec.uncompressed_bytes,
            holders: BTreeSet::new(),
        });
        if entry.holders.is_empty() {
            self.stored_bytes += spec.uncompressed_bytes;
        }
        entry.holders.insert(Holder::Request(id));
        self.inflight.remove(&spec.digest);
        self.emit(EventKind::UnpackDone, format!("{id} layer={}", spec.digest));
        let waiters: Vec<ReqId> = self.requests.keys().copied().collect();
        for w in waiters {
            let r = self.requests.get_mut(&w).unwrap();
            if !r.state.is_live() {
                continue;
            }
            let mut hit = false;
            for l in &mut r.layers {
                if l.spec.digest == spec.digest && l.phase == Phase::External(id) {
                    l.phase = Phase::Unpacked;
                    hit = true;
                }
            }
            if hit {
                self.store
                    .get_mut(&spec.digest)
                    .unwrap()
                    .holders
                    .insert(Holder::Request(w));
            }
        }
    }

    /// Earliest time something on this node completes under current rates.
    pub fn next_deadline(&self) -> Option<f64> {
        let mut best = f64::INFINITY;
        let rates = &self.rates;
        for r in self.requests.values() {
            if !r.state.is_live() {
                continue;
            }
            if let Some(at) = r.manifest_at {
                best = best.min(at);
            }
            for l in &r.layers {
                let t = match l.phase {
                    Phase::Connecting { ready_at, .. } | Phase::Committing { ready_at } => ready_at,
                    Phase::Transferring { done, .. } if rates.socket > 0.0 => {
                        self.clock + (l.spec.compressed_bytes as f64 - done).max(0.0) / rates.socket
                    }
                    Phase::Unpacking { done } if rates.unpack > 0.0 => {
                        self.clock + (l.spec.uncompressed_bytes as f64 - done).max(0.0) / rates.unpack
                    }
                    _ => continue,
                };
                best = best.min(t);
            }
        }
        for (t, rate) in self.tenants.iter().zip(&rates.tenants) {
            if t.finish.is_none() && *rate > 0.0 {
                best = best.min(self.clock + t.remaining.max(0.0) / rate);
            }
        }
        best.is_finite().then_some(best)
    }

    /// Integrates every flow forward to `t` under the current rates.
    pub fn advance_to(&mut self, t: f64) {
        let dt = t - self.clock;
        if dt <= 0.0 {
            return;
        }
        let rates = self.rates.clone();
        for id in &self.active {
            let r = self.requests.get_mut(id).unwrap();
            for l in &mut r.layers {
                if let Phase::Transferring { done, .. } = &mut l.phase {
                    *done = (*done + rates.socket * dt).min(l.spec.compressed_bytes as f64);
                }
            }
        }
        for r in self.requests.values_mut() {
            if !r.state.is_live() {
                continue;
            }
            for l in &mut r.layers {
                if let Phase::Unpacking { done } = &mut l.phase {
                    *done = (*done + rates.unpack * dt).min(l.spec.uncompressed_bytes as f64);
                }
            }
        }
        for (job, rate) in self.tenants.iter_mut().zip(&rates.tenants) {
            if job.finish.is_none() {
                job.remaining = (job.remaining - rate * dt).max(0.0);
            }
        }
        self.acc.cpu += rates.cpu_util * dt;
        self.acc.net += rates.net * dt;
        self.acc.disk += rates.disk_write * dt;
        self.clock = t;
    }

    /// Handles everything due at the current clock, then recomputes rates.
    pub fn process_due(&mut self) {
        self.settle(self.clock);
    }

    fn settle(&mut self, now: f64) {
        let eps = TIME_EPSILON * (1.0 + now.abs());
        for _ in 0..100_000 {
            let mut changed = self.start_queued();
            changed |= self.fire_timers(now, eps);
            changed |= self.open_sockets();
            let ids: Vec<ReqId> = self
                .requests
                .values()
                .filter(|r| r.state.is_live())
                .map(|r| r.id)
                .collect();
            for id in ids {
                changed |= self.advance_unpack(id);
            }
            changed |= self.update_states();
            if !changed {
                self.compute_rates();
                changed = self.fire_flows(eps);
                if !changed {
                    return;
                }
            }
        }
        panic!("node {} failed to settle at t={now}", self.id);
    }

    fn fire_timers(&mut self, now: f64, eps: f64) -> bool {
        let mut changed = false;
        let ids: Vec<ReqId> = self.active.clone();
        for id in ids {
            if self.requests[&id].manifest_at.is_some_and(|at| at <= now + eps) {
                self.resolve_manifest(id);
                changed = true;
            }
            let r = self.requests.get_mut(&id).unwrap();
            for l in &mut r.layers {
                if let Phase::Connecting { socket, ready_at } = l.phase {
                    if ready_at <= now + eps {
                        l.phase = Phase::Transferring { socket, done: 0.0 };
                        changed = true;
                    }
                }
            }
        }
        if let Some(&(id, idx)) = self.commits.front() {
            match self.requests[&id].layers[idx].phase {
                Phase::Committing { ready_at } if ready_at <= now + eps => {
                    self.commits.pop_front();
                    self.land_layer(id, idx);
                    changed = true;
                }
                Phase::Committing { ready_at } if ready_at.is_infinite() => {
                    let at = self.clock + self.cost.layer_commit;
                    self.requests.get_mut(&id).unwrap().layers[idx].phase = Phase::Committing { ready_at: at };
                    changed = true;
                }
                _ => {}
            }
        }
        changed
    }

    /// Completes flows whose remaining work is within the time epsilon.
    fn fire_flows(&mut self, eps: f64) -> bool {
        let mut changed = false;
        let rates = self.rates.clone();
        let clock = self.clock;
        let ids: Vec<ReqId> = self
            .requests
            .values()
            .filter(|r| r.state.is_live())
            .map(|r| r.id)
            .collect();
        for id in ids {
            let mut log = Vec::new();
            let mut commits = Vec::new();
            let r = self.requests.get_mut(&id).unwrap();
            for (idx, l) in r.layers.iter_mut().enumerate() {
                match l.phase {
                    Phase::Transferring { socket, done } => {
                        let left = l.spec.compressed_bytes as f64 - done;
                        if left <= rates.socket * eps || left <= 0.0 {
                            l.phase = Phase::Downloaded;
                            r.received_bytes += l.spec.compressed_bytes;
                            self.net_bytes += l.spec.compressed_bytes;
                            log.push(format!("{id} socket={socket} layer={}", l.spec.digest));
                            changed = true;
                        }
                    }
                    Phase::Unpacking { done } => {
                        let left = l.spec.uncompressed_bytes as f64 - done;
                        if left <= rates.unpack * eps || left <= 0.0 {
                            l.phase = Phase::Committing {
                                ready_at: f64::INFINITY,
                            };
                            commits.push(idx);
                            changed = true;
                        }
                    }
                    _ => {}
                }
            }
            for detail in log {
                self.emit(EventKind::LayerDone, detail);
            }
            self.commits.extend(commits.into_iter().map(|idx| (id, idx)));
        }
        let mut finished = Vec::new();
        for (i, (job, rate)) in self.tenants.iter_mut().zip(&rates.tenants).enumerate() {
            if job.finish.is_none() && (job.remaining <= rate * eps || job.remaining <= 0.0) {
                job.remaining = 0.0;
                job.finish = Some(clock);
                finished.push((i, job.name.clone()));
                changed = true;
            }
        }
        for (i, name) in finished {
            self.emit(EventKind::WorkloadDone, format!("tenant={name}"));
            self.notes.push(NodeNote::TenantDone { index: i });
        }
        changed
    }

    /// Fair-share rate assignment: network first, then disk, then CPU.
    fn compute_rates(&mut self) {
        let cfg = &self.config;
        let cost = &self.cost;
        // A commit flushes the filesystem; no other writes progress meanwhile.
        let disk_bw = if self.commits.is_empty() {
            cfg.disk_write_bw
        } else {
            0.0
        };
        let mut sockets = 0usize;
        let mut unpackers = 0usize;
        for id in &self.active {
            let r = &self.requests[id];
            sockets += r
                .layers
                .iter()
                .filter(|l| matches!(l.phase, Phase::Transferring { .. }))
                .count();
        }
        for r in self.requests.values() {
            if r.state.is_live() && r.unpacking_layer().is_some() {
                unpackers += 1;
            }
        }
        let n = sockets as f64;
        let m = unpackers as f64;
        let socket_nominal = if sockets > 0 {
            cost.registry_per_socket_cap.min(cfg.net_bw / n)
        } else {
            0.0
        };
        let unpack_nominal = {
            let by_cpu = if cost.unpack_cpu_per_byte > 0.0 {
                cost.unpack_max_cores / cost.unpack_cpu_per_byte
            } else {
                f64::INFINITY
            };
            let by_disk = if cost.unpack_disk_per_byte > 0.0 {
                disk_bw / cost.unpack_disk_per_byte
            } else {
                f64::INFINITY
            };
            by_cpu.min(by_disk)
        };
        let live_tenants: Vec<bool> = self.tenants.iter().map(|t| t.finish.is_none()).collect();
        let tenant_io: f64 = self
            .tenants
            .iter()
            .zip(&live_tenants)
            .filter(|(_, live)| **live)
            .map(|(t, _)| t.io_demand)
            .sum();

        let disk_demand = n * socket_nominal + load(m, unpack_nominal, cost.unpack_disk_per_byte) + tenant_io;
        let s_disk = if disk_demand > disk_bw {
            disk_bw / disk_demand
        } else {
            1.0
        };
        let mut socket = socket_nominal * s_disk;
        let mut unpack = unpack_nominal * s_disk;
        let tenant_scale = |t: &TenantJob| if t.io_demand > 0.0 { s_disk } else { 1.0 };

        let tenant_cpu: f64 = self
            .tenants
            .iter()
            .zip(&live_tenants)
            .filter(|(_, live)| **live)
            .map(|(t, _)| t.cpu_demand * tenant_scale(t))
            .sum();
        let cpu_demand =
            load(n, socket, cost.download_cpu_per_byte) + load(m, unpack, cost.unpack_cpu_per_byte) + tenant_cpu;
        let s_cpu = if cpu_demand > cfg.cpu_cores {
            cfg.cpu_cores / cpu_demand
        } else {
            1.0
        };
        if cost.download_cpu_per_byte > 0.0 {
            socket *= s_cpu;
        }
        if cost.unpack_cpu_per_byte > 0.0 {
            unpack *= s_cpu;
        }
        let mut tenant_rates = Vec::with_capacity(self.tenants.len());
        let mut tenant_disk = 0.0;
        for (t, live) in self.tenants.iter().zip(&live_tenants) {
            if !live {
                tenant_rates.push(0.0);
                continue;
            }
            let mut scale = tenant_scale(t);
            if t.cpu_demand > 0.0 {
                scale *= s_cpu;
            }
            tenant_rates.push(t.cpu_demand * scale);
            tenant_disk += t.io_demand * scale;
        }
        let cpu_util = cpu_demand.min(cfg.cpu_cores) / cfg.cpu_cores;
        self.rates = Rates {
            socket,
            unpack,
            tenants: tenant_rates,
            cpu_util,
            net: n * socket,
            disk_write: n * socket + load(m, unpack, cost.unpack_disk_per_byte) + tenant_disk,
        };
        let last = self.cpu_steps.last().copied().unwrap_or((0.0, 0.0));
        if last.1 != cpu_util {
            if last.0 == self.clock {
                self.cpu_steps.pop();
            }
            self.cpu_steps.push((self.clock, cpu_util));
        }
    }

    /// Closes the current sampling interval at the node clock.
    pub fn take_sample(&mut self) -> GaugeSample {
        let t = self.clock;
        let span = t - self.acc.since;
        let avg = |x: f64| if span > 0.0 { x / span } else { 0.0 };
        let sample = GaugeSample {
            time_s: t,
            cpu_util: avg(self.acc.cpu),
            net_mb_s: avg(self.acc.net) / MB,
            disk_write_mb_s: avg(self.acc.disk) / MB,
            disk_used_pct: 100.0 * self.disk_used_fraction(),
            queue_len: self.queue.len(),
            active_pulls: self.active.len(),
        };
        self.acc = Accum {
            since: t,
            ..Accum::default()
        };
        sample
    }
}

/// `count * rate * per_byte`, where a zero cost makes even an unbounded
/// rate free.
fn load(count: f64, rate: f64, per_byte: f64) -> f64 {
    if count == 0.0 || per_byte == 0.0 {
        0.0
    } else {
        count * rate * per_byte
    }
}

fn transient_bytes(r: &PullRequest) -> f64 {
    r.layers
        .iter()
        .map(|l| match l.phase {
            Phase::Transferring { done, .. } => done,
            Phase::Downloaded | Phase::Unpacking { .. } => l.spec.compressed_bytes as f64,
            Phase::Committing { .. } => l.spec.uncompressed_bytes as f64,
            _ => 0.0,
        })
        .sum()
}
