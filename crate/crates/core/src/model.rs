//! Shared value types: time, layers, images, pods and node configuration.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Decimal gigabyte, the unit used for every reported size.
pub const GB: f64 = 1e9;
/// Decimal megabyte.
pub const MB: f64 = 1e6;

/// Completion-time equality tolerance in seconds.
pub const TIME_EPSILON: f64 = 1e-9;

/// Simulation time in seconds since the start of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Panics on negative or non-finite input; time values come from the
    /// engine and the scenario parser, both of which validate first.
    pub fn from_secs(secs: f64) -> Self {
        assert!(secs.is_finite() && secs >= 0.0, "invalid simulation time {secs}");
        SimTime(secs)
    }

    pub fn secs(self) -> f64 {
        self.0
    }

    pub fn after(self, delay: f64) -> Self {
        SimTime::from_secs(self.0 + delay.max(0.0))
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

/// Synthetic content address of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Digest(pub u64);

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sha256:{:016x}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub digest: Digest,
    pub compressed_bytes: u64,
    pub uncompressed_bytes: u64,
}

impl LayerSpec {
    pub fn new(digest: Digest, compressed_bytes: u64, uncompressed_bytes: u64) -> Result<Self, ModelError> {
        if compressed_bytes == 0 {
            return Err(ModelError::EmptyLayer(digest));
        }
        Ok(LayerSpec {
            digest,
            compressed_bytes,
            uncompressed_bytes,
        })
    }

    /// Layer whose compressed size is `round(uncompressed * ratio)`.
    pub fn with_ratio(digest: Digest, uncompressed_bytes: u64, ratio: f64) -> Result<Self, ModelError> {
        let compressed = (uncompressed_bytes as f64 * ratio).round() as u64;
        LayerSpec::new(digest, compressed, uncompressed_bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl ImageSpec {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self, ModelError> {
        let name = name.into();
        if layers.is_empty() {
            return Err(ModelError::NoLayers(name));
        }
        Ok(ImageSpec { name, layers })
    }

    pub fn total_compressed(&self) -> u64 {
        self.layers.iter().map(|l| l.compressed_bytes).sum()
    }

    pub fn total_uncompressed(&self) -> u64 {
        self.layers.iter().map(|l| l.uncompressed_bytes).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSet {
    pub images: Vec<ImageSpec>,
    pub shared_base: Option<LayerSpec>,
}

impl ImageSet {
    pub fn new(images: Vec<ImageSpec>, shared_base: Option<LayerSpec>) -> Result<Self, ModelError> {
        if let Some(base) = shared_base {
            for image in &images {
                if image.layers.first() != Some(&base) {
                    return Err(ModelError::BaseNotFirst(image.name.clone()));
                }
            }
        }
        Ok(ImageSet { images, shared_base })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn unique_layers(&self) -> BTreeMap<Digest, LayerSpec> {
        self.images
            .iter()
            .flat_map(|i| i.layers.iter())
            .map(|l| (l.digest, *l))
            .collect()
    }

    /// Compressed bytes with every digest counted once.
    pub fn dedup_compressed(&self) -> u64 {
        self.unique_layers().values().map(|l| l.compressed_bytes).sum()
    }

    pub fn dedup_uncompressed(&self) -> u64 {
        self.unique_layers().values().map(|l| l.uncompressed_bytes).sum()
    }

    pub fn naive_compressed(&self) -> u64 {
        self.images.iter().map(ImageSpec::total_compressed).sum()
    }
}

/// Index of an image inside a [`Catalog`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageId(pub u32);

/// All images known to a simulation, addressable by id or name.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    images: Vec<ImageSpec>,
    by_name: BTreeMap<String, ImageId>,
    layers: BTreeMap<Digest, LayerSpec>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an image, returning the existing id when the name is already
    /// registered with identical content.
    pub fn insert(&mut self, image: ImageSpec) -> Result<ImageId, ModelError> {
        for layer in &image.layers {
            if let Some(known) = self.layers.get(&layer.digest) {
                if known != layer {
                    return Err(ModelError::DigestConflict(layer.digest));
                }
            }
        }
        if let Some(&id) = self.by_name.get(&image.name) {
            if self.images[id.0 as usize] == image {
                return Ok(id);
            }
            return Err(ModelError::DuplicateImage(image.name));
        }
        for layer in &image.layers {
            self.layers.insert(layer.digest, *layer);
        }
        let id = ImageId(self.images.len() as u32);
        self.by_name.insert(image.name.clone(), id);
        self.images.push(image);
        Ok(id)
    }

    pub fn get(&self, id: ImageId) -> &ImageSpec {
        &self.images[id.0 as usize]
    }

    pub fn lookup(&self, name: &str) -> Option<ImageId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

/// API object identifier (Pods and Deployments share the space).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectId(pub u64);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "obj-{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node-{}", self.0)
    }
}

/// When a parallel-pull slot is handed to the next queued image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotRelease {
    OnDownloadDone,
    OnUnpackDone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub cpu_cores: f64,
    pub disk_capacity_bytes: u64,
    /// Bytes per second.
    pub disk_write_bw: f64,
    /// Bytes per second.
    pub net_bw: f64,
    pub max_parallel_image_pulls: usize,
    pub max_sockets_per_image: usize,
    pub gc_high_pct: f64,
    pub gc_low_pct: f64,
    /// Seconds an image must have been on disk before GC may remove it.
    pub image_ttl: f64,
    pub eviction_hard_pct: f64,
    pub baseline_disk_used_bytes: u64,
    pub slot_release: SlotRelease,
}

impl NodeConfig {
    /// 2 vCPU, 120 GB HDD, 1 Gbit/s worker from the on-premises testbed.
    pub fn local_testbed() -> Self {
        NodeConfig {
            cpu_cores: 2.0,
            disk_capacity_bytes: 120_000_000_000,
            disk_write_bw: 150.0 * MB,
            net_bw: 125.0 * MB,
            max_parallel_image_pulls: 1,
            max_sockets_per_image: 4,
            gc_high_pct: 0.85,
            gc_low_pct: 0.80,
            image_ttl: 120.0,
            eviction_hard_pct: 0.90,
            baseline_disk_used_bytes: 12_000_000_000,
            slot_release: SlotRelease::OnUnpackDone,
        }
    }

    /// e2-standard-2 worker: 2 vCPU, 60 GB balanced disk, 10 Gbit/s NIC.
    /// The kubelet there pulls images in parallel.
    pub fn gke() -> Self {
        NodeConfig {
            cpu_cores: 2.0,
            disk_capacity_bytes: 60_000_000_000,
            disk_write_bw: 150.0 * MB,
            net_bw: 1250.0 * MB,
            max_parallel_image_pulls: 4,
            max_sockets_per_image: 4,
            gc_high_pct: 0.85,
            gc_low_pct: 0.80,
            image_ttl: 120.0,
            eviction_hard_pct: 0.90,
            baseline_disk_used_bytes: 8_000_000_000,
            slot_release: SlotRelease::OnUnpackDone,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ordered = 0.0 < self.gc_low_pct
            && self.gc_low_pct < self.gc_high_pct
            && self.gc_high_pct < self.eviction_hard_pct
            && self.eviction_hard_pct <= 1.0;
        if !ordered {
            return Err(ModelError::Thresholds {
                low: self.gc_low_pct,
                high: self.gc_high_pct,
                hard: self.eviction_hard_pct,
            });
        }
        if self.max_parallel_image_pulls == 0 || self.max_sockets_per_image == 0 {
            return Err(ModelError::ZeroParallelism);
        }
        let rates = [self.cpu_cores, self.disk_write_bw, self.net_bw];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(ModelError::NonPositive("node capacity"));
        }
        if self.image_ttl < 0.0 {
            return Err(ModelError::NonPositive("image_ttl"));
        }
        if self.baseline_disk_used_bytes > self.disk_capacity_bytes {
            return Err(ModelError::BaselineExceedsDisk);
        }
        Ok(())
    }
}

/// Resource cost of pulling images. Rates are per byte moved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Core-seconds per compressed byte received.
    pub download_cpu_per_byte: f64,
    /// Core-seconds per uncompressed byte written by unpack.
    pub unpack_cpu_per_byte: f64,
    /// Disk bytes written per uncompressed byte unpacked.
    pub unpack_disk_per_byte: f64,
    /// Upper bound on a single registry connection, bytes per second.
    pub registry_per_socket_cap: f64,
    /// Cores a single layer decompression can occupy.
    pub unpack_max_cores: f64,
    /// Seconds spent resolving the manifest before any layer socket opens.
    pub manifest_fetch: f64,
    /// Idle seconds between opening a layer socket and the first byte.
    pub layer_request_latency: f64,
    /// Idle seconds to commit a layer snapshot after its bytes are written.
    pub layer_commit: f64,
}

impl CostModel {
    /// Cost model fitted to the local testbed serial-pull anchor.
    pub fn calibrated() -> Self {
        CostModel {
            download_cpu_per_byte: 3.0974e-8,
            unpack_cpu_per_byte: 1.6154e-8,
            unpack_disk_per_byte: 1.0,
            registry_per_socket_cap: f64::INFINITY,
            unpack_max_cores: 1.0,
            manifest_fetch: 0.2,
            layer_request_latency: 0.1,
            layer_commit: 0.09,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let non_negative = [
            self.download_cpu_per_byte,
            self.unpack_cpu_per_byte,
            self.unpack_disk_per_byte,
            self.manifest_fetch,
            self.layer_request_latency,
            self.layer_commit,
        ];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ModelError::NonPositive("cost model rate"));
        }
        if !(self.registry_per_socket_cap > 0.0) || !(self.unpack_max_cores > 0.0) {
            return Err(ModelError::NonPositive("registry_per_socket_cap"));
        }
        Ok(())
    }
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::calibrated()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PullPolicy {
    IfNotPresent,
    Always,
}

/// Who asked for a Pod; attack-attributed pulls drive the delay metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Owner {
    Tenant,
    Attacker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PodSpec {
    pub name: String,
    pub image: ImageId,
    pub pull_policy: PullPolicy,
    pub node_selector: NodeId,
    pub owner: Owner,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(d: u64, c: u64, u: u64) -> LayerSpec {
        LayerSpec::new(Digest(d), c, u).unwrap()
    }

    #[test]
    fn sim_time_orders_totally() {
        let a = SimTime::from_secs(1.0);
        let b = SimTime::from_secs(2.5);
        assert!(a < b);
        assert_eq!(a.after(1.5), b);
        assert_eq!(a.max(b), b);
    }

    #[test]
    fn zero_compressed_layer_is_rejected() {
        assert!(LayerSpec::new(Digest(1), 0, 10).is_err());
        // compression may expand
        assert!(LayerSpec::new(Digest(1), 20, 10).is_ok());
    }

    #[test]
    fn image_totals_sum_layers() {
        let img = ImageSpec::new("a", vec![layer(1, 5, 10), layer(2, 7, 14)]).unwrap();
        assert_eq!(img.total_compressed(), 12);
        assert_eq!(img.total_uncompressed(), 24);
        assert!(ImageSpec::new("empty", vec![]).is_err());
    }

    #[test]
    fn shared_base_must_lead_every_image() {
        let base = layer(1, 5, 10);
        let ok = ImageSpec::new("a", vec![base, layer(2, 1, 2)]).unwrap();
        let bad = ImageSpec::new("b", vec![layer(3, 1, 2), base]).unwrap();
        assert!(ImageSet::new(vec![ok.clone()], Some(base)).is_ok());
        assert!(ImageSet::new(vec![ok, bad], Some(base)).is_err());
    }

    #[test]
    fn catalog_rejects_digest_with_different_sizes() {
        let mut cat = Catalog::new();
        cat.insert(ImageSpec::new("a", vec![layer(1, 5, 10)]).unwrap()).unwrap();
        let err = cat.insert(ImageSpec::new("b", vec![layer(1, 6, 10)]).unwrap());
        assert!(matches!(err, Err(ModelError::DigestConflict(_))));
        let again = cat.insert(ImageSpec::new("a", vec![layer(1, 5, 10)]).unwrap()).unwrap();
        assert_eq!(again, ImageId(0));
    }

    #[test]
    fn node_threshold_ordering_is_enforced() {
        let mut cfg = NodeConfig::local_testbed();
        assert!(cfg.validate().is_ok());
        cfg.gc_low_pct = 0.9;
        assert!(cfg.validate().is_err());
        let mut cfg = NodeConfig::local_testbed();
        cfg.max_parallel_image_pulls = 0;
        assert!(cfg.validate().is_err());
    }
}
