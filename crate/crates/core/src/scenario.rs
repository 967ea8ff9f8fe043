//! Scenario files: TOML with an explicit unit on every physical quantity.
//!
//! Sizes accept `B`, `KB`, `MB`, `GB`, `TB` (powers of 1000); rates accept
//! those over `/s` plus `Mbit/s` and `Gbit/s`; durations accept `ms`, `s`,
//! `min`, `h`; CPU work is given in `core-s` and per-byte costs in
//! `core-s/GB` or `core-s/MB`.

use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize};

use crate::attack::Strategy;
use crate::error::ScenarioError;
use crate::imageset::ImageSetKind;
use crate::model::{CostModel, NodeConfig, PullPolicy, SlotRelease, GB, MB};

fn split_quantity(s: &str) -> Result<(f64, String), String> {
    let s = s.trim();
    let idx = s
        .find(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E' | '_')))
        .unwrap_or(s.len());
    // "1e9" style exponents are digits; a trailing unit starting with 'e' is
    // not supported.
    let (num, unit) = s.split_at(idx);
    let value: f64 = num
        .replace('_', "")
        .parse()
        .map_err(|_| format!("'{s}' does not start with a number"))?;
    if !value.is_finite() {
        return Err(format!("'{s}' is not finite"));
    }
    Ok((value, unit.trim().to_string()))
}

fn byte_unit(unit: &str) -> Option<f64> {
    Some(match unit {
        "B" => 1.0,
        "KB" | "kB" => 1e3,
        "MB" => MB,
        "GB" => GB,
        "TB" => 1e12,
        _ => return None,
    })
}

pub fn parse_bytes(s: &str) -> Result<f64, String> {
    let (v, unit) = split_quantity(s)?;
    let k = byte_unit(&unit).ok_or_else(|| format!("'{s}': expected a size unit (B, KB, MB, GB, TB)"))?;
    Ok(v * k)
}

pub fn parse_rate(s: &str) -> Result<f64, String> {
    let (v, unit) = split_quantity(s)?;
    let k = match unit.as_str() {
        "Mbit/s" => MB / 8.0,
        "Gbit/s" => GB / 8.0,
        u => u
            .strip_suffix("/s")
            .and_then(byte_unit)
            .ok_or_else(|| format!("'{s}': expected a rate unit such as MB/s or Gbit/s"))?,
    };
    Ok(v * k)
}

pub fn parse_seconds(s: &str) -> Result<f64, String> {
    let (v, unit) = split_quantity(s)?;
    let k = match unit.as_str() {
        "ms" => 1e-3,
        "s" => 1.0,
        "min" => 60.0,
        "h" => 3600.0,
        _ => return Err(format!("'{s}': expected a time unit (ms, s, min, h)")),
    };
    Ok(v * k)
}

pub fn parse_work(s: &str) -> Result<f64, String> {
    let (v, unit) = split_quantity(s)?;
    match unit.as_str() {
        "core-s" => Ok(v),
        _ => Err(format!("'{s}': expected core-s")),
    }
}

pub fn parse_cost_per_byte(s: &str) -> Result<f64, String> {
    let (v, unit) = split_quantity(s)?;
    let per = unit
        .strip_prefix("core-s/")
        .and_then(byte_unit)
        .ok_or_else(|| format!("'{s}': expected core-s/GB or core-s/MB"))?;
    Ok(v / per)
}

/// Fractions may be written as `0.85` or `"85%"`.
pub fn parse_fraction(s: &str) -> Result<f64, String> {
    let (v, unit) = split_quantity(s)?;
    match unit.as_str() {
        "" => Ok(v),
        "%" => Ok(v / 100.0),
        _ => Err(format!("'{s}': expected a fraction or percentage")),
    }
}

macro_rules! quantity {
    ($name:ident, $parse:ident, $what:literal) => {
        #[derive(Clone, Copy, Debug, PartialEq, Serialize)]
        #[serde(transparent)]
        pub struct $name(pub f64);

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                struct V;
                impl<'de> de::Visitor<'de> for V {
                    type Value = $name;
                    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                        f.write_str($what)
                    }
                    fn visit_str<E: de::Error>(self, s: &str) -> Result<$name, E> {
                        $parse(s).map($name).map_err(E::custom)
                    }
                }
                d.deserialize_str(V)
            }
        }
    };
}

quantity!(Bytes, parse_bytes, "a size such as \"2 GB\"");
quantity!(Rate, parse_rate, "a rate such as \"125 MB/s\"");
quantity!(Seconds, parse_seconds, "a duration such as \"2 s\"");
quantity!(Work, parse_work, "CPU work such as \"1646.5 core-s\"");
quantity!(PerByte, parse_cost_per_byte, "a cost such as \"20 core-s/GB\"");

/// A fraction given either as a bare number or a percentage string.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Fraction(pub f64);

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = Fraction;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a fraction such as 0.85 or \"85%\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Fraction, E> {
                Ok(Fraction(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Fraction, E> {
                Ok(Fraction(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Fraction, E> {
                Ok(Fraction(v as f64))
            }
            fn visit_str<E: de::Error>(self, s: &str) -> Result<Fraction, E> {
                parse_fraction(s).map(Fraction).map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One simulation per trial.
    #[default]
    Single,
    /// Baseline, attacked and mitigated variants per trial.
    MagiCompare,
    /// Size sweep of single-image kills under the mitigation.
    CutoffSweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    LocalTestbed,
    Gke,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_second")]
    pub sample_interval: Seconds,
    #[serde(default)]
    pub horizon: Option<Seconds>,
    #[serde(default)]
    pub teardown_delay: Option<Seconds>,
    #[serde(default)]
    pub gc_interval: Option<Seconds>,
    #[serde(default)]
    pub eviction_interval: Option<Seconds>,
    #[serde(default = "yes")]
    pub gc: bool,
    #[serde(default = "yes")]
    pub eviction: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn one_second() -> Seconds {
    Seconds(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSection {
    pub profile: Profile,
    #[serde(default = "one")]
    pub count: usize,
    pub cpu_cores: Option<f64>,
    pub disk_capacity: Option<Bytes>,
    pub disk_write_bw: Option<Rate>,
    pub net_bw: Option<Rate>,
    pub max_parallel_image_pulls: Option<usize>,
    pub max_sockets_per_image: Option<usize>,
    pub gc_high_pct: Option<Fraction>,
    pub gc_low_pct: Option<Fraction>,
    pub image_ttl: Option<Seconds>,
    pub eviction_hard_pct: Option<Fraction>,
    pub baseline_disk_used: Option<Bytes>,
    pub slot_release: Option<SlotRelease>,
}

impl NodeSection {
    pub fn build(&self) -> NodeConfig {
        let mut c = match self.profile {
            Profile::LocalTestbed => NodeConfig::local_testbed(),
            Profile::Gke => NodeConfig::gke(),
        };
        if let Some(v) = self.cpu_cores {
            c.cpu_cores = v;
        }
        if let Some(v) = self.disk_capacity {
            c.disk_capacity_bytes = v.0.round() as u64;
        }
        if let Some(v) = self.disk_write_bw {
            c.disk_write_bw = v.0;
        }
        if let Some(v) = self.net_bw {
            c.net_bw = v.0;
        }
        if let Some(v) = self.max_parallel_image_pulls {
            c.max_parallel_image_pulls = v;
        }
        if let Some(v) = self.max_sockets_per_image {
            c.max_sockets_per_image = v;
        }
        if let Some(v) = self.gc_high_pct {
            c.gc_high_pct = v.0;
        }
        if let Some(v) = self.gc_low_pct {
            c.gc_low_pct = v.0;
        }
        if let Some(v) = self.image_ttl {
            c.image_ttl = v.0;
        }
        if let Some(v) = self.eviction_hard_pct {
            c.eviction_hard_pct = v.0;
        }
        if let Some(v) = self.baseline_disk_used {
            c.baseline_disk_used_bytes = v.0.round() as u64;
        }
        if let Some(v) = self.slot_release {
            c.slot_release = v;
        }
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub download_cpu: Option<PerByte>,
    pub unpack_cpu: Option<PerByte>,
    pub unpack_disk_per_byte: Option<f64>,
    pub registry_per_socket_cap: Option<Rate>,
    pub unpack_max_cores: Option<f64>,
    pub manifest_fetch: Option<Seconds>,
    pub layer_request_latency: Option<Seconds>,
    pub layer_commit: Option<Seconds>,
}

impl CostSection {
    /// A section that pins every field to `c`.
    pub fn from_model(c: &CostModel) -> Self {
        CostSection {
            download_cpu: Some(PerByte(c.download_cpu_per_byte)),
            unpack_cpu: Some(PerByte(c.unpack_cpu_per_byte)),
            unpack_disk_per_byte: Some(c.unpack_disk_per_byte),
            registry_per_socket_cap: Some(Rate(c.registry_per_socket_cap)),
            unpack_max_cores: Some(c.unpack_max_cores),
            manifest_fetch: Some(Seconds(c.manifest_fetch)),
            layer_request_latency: Some(Seconds(c.layer_request_latency)),
            layer_commit: Some(Seconds(c.layer_commit)),
        }
    }

    pub fn build(&self) -> CostModel {
        let mut c = CostModel::calibrated();
        if let Some(v) = self.download_cpu {
            c.download_cpu_per_byte = v.0;
        }
        if let Some(v) = self.unpack_cpu {
            c.unpack_cpu_per_byte = v.0;
        }
        if let Some(v) = self.unpack_disk_per_byte {
            c.unpack_disk_per_byte = v;
        }
        if let Some(v) = self.registry_per_socket_cap {
            c.registry_per_socket_cap = v.0;
        }
        if let Some(v) = self.unpack_max_cores {
            c.unpack_max_cores = v;
        }
        if let Some(v) = self.manifest_fetch {
            c.manifest_fetch = v.0;
        }
        if let Some(v) = self.layer_request_latency {
            c.layer_request_latency = v.0;
        }
        if let Some(v) = self.layer_commit {
            c.layer_commit = v.0;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagesSection {
    pub set: String,
    #[serde(default)]
    pub seed: u64,
}

impl ImagesSection {
    pub fn kind(&self) -> Result<ImageSetKind, ScenarioError> {
        self.set.parse().map_err(ScenarioError::Validation)
    }
}

/// A named image built from equal layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomImage {
    pub name: String,
    /// Total compressed size, split evenly over `layers`.
    pub compressed: Bytes,
    #[serde(default = "one")]
    pub layers: usize,
    /// Uncompressed over compressed size.
    #[serde(default = "two")]
    pub expansion: f64,
}

fn two() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeTargets {
    All(String),
    List(Vec<u32>),
}

impl Default for NodeTargets {
    fn default() -> Self {
        NodeTargets::List(vec![0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub strategy: String,
    #[serde(default)]
    pub start: Option<Seconds>,
    #[serde(default)]
    pub inter_step_wait: Option<Seconds>,
    #[serde(default)]
    pub patch_interval: Option<Seconds>,
    /// Reshuffle the image order with the trial seed.
    #[serde(default)]
    pub shuffle: bool,
    #[serde(default)]
    pub nodes: NodeTargets,
    /// Explicit image names; defaults to the whole image set.
    #[serde(default)]
    pub images: Option<Vec<String>>,
    #[serde(default)]
    pub pull_policy: Option<PullPolicy>,
}

impl AttackSection {
    pub fn strategy(&self) -> Result<Strategy, ScenarioError> {
        self.strategy.parse().map_err(ScenarioError::Validation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagiSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub react_latency: Option<Seconds>,
    #[serde(default)]
    pub audit_delay: Option<Seconds>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenantSection {
    pub name: String,
    #[serde(default)]
    pub node: u32,
    pub cpu_demand: f64,
    pub total_work: Work,
    #[serde(default)]
    pub io_demand: Option<Rate>,
    #[serde(default)]
    pub start: Option<Seconds>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploySection {
    pub name: String,
    pub image: String,
    pub at: Seconds,
    #[serde(default)]
    pub node: u32,
    #[serde(default)]
    pub pull_policy: Option<PullPolicy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub first: Bytes,
    pub step: Bytes,
    pub last: Bytes,
    pub throughput: Rate,
    #[serde(default = "two")]
    pub expansion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    pub node: NodeSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub images: Option<ImagesSection>,
    #[serde(default, rename = "image")]
    pub custom_images: Vec<CustomImage>,
    #[serde(default)]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub magi: Option<MagiSection>,
    #[serde(default, rename = "tenant")]
    pub tenants: Vec<TenantSection>,
    #[serde(default, rename = "deploy")]
    pub deploys: Vec<DeploySection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<ScenarioConfig, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        ScenarioConfig::from_toml_str(&text, path)
    }

    pub fn node_config(&self) -> NodeConfig {
        self.node.build()
    }

    pub fn cost_model(&self) -> CostModel {
        self.cost.build()
    }

    /// Names every image the scenario can refer to.
    pub fn image_names(&self) -> Result<Vec<String>, ScenarioError> {
        let mut names: Vec<String> = self.custom_images.iter().map(|i| i.name.clone()).collect();
        if let Some(images) = &self.images {
            let set = crate::imageset::generate_image_set(images.kind()?, images.seed);
            names.extend(set.images.into_iter().map(|i| i.name));
        }
        Ok(names)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Validation(m));
        self.node_config().validate()?;
        self.cost_model().validate()?;
        let s = &self.scenario;
        if s.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if !(s.sample_interval.0 > 0.0) {
            return bad("sample_interval must be positive".into());
        }
        if self.node.count == 0 {
            return bad("node count must be at least 1".into());
        }
        let names = self.image_names()?;
        let known = |n: &str| names.iter().any(|k| k == n);
        for img in &self.custom_images {
            if img.layers == 0 || !(img.compressed.0 >= img.layers as f64) || !(img.expansion > 0.0) {
                return bad(format!("image {} needs layers >= 1 and positive sizes", img.name));
            }
        }
        let node_ok = |n: u32| (n as usize) < self.node.count;
        if let Some(a) = &self.attack {
            a.strategy()?;
            if self.images.is_none() && a.images.is_none() {
                return bad("attack needs an [images] set or an explicit image list".into());
            }
            for n in a.images.iter().flatten() {
                if !known(n) {
                    return bad(format!("attack image '{n}' is not declared"));
                }
            }
            match &a.nodes {
                NodeTargets::All(s) if s == "all" => {}
                NodeTargets::All(s) => return bad(format!("attack nodes must be \"all\" or a list, got '{s}'")),
                NodeTargets::List(l) => {
                    if l.is_empty() || l.iter().any(|n| !node_ok(*n)) {
                        return bad("attack targets an unknown node".into());
                    }
                }
            }
        }
        for t in &self.tenants {
            if !node_ok(t.node) {
                return bad(format!("tenant {} targets an unknown node", t.name));
            }
            if !(t.cpu_demand > 0.0) || t.total_work.0 < 0.0 {
                return bad(format!("tenant {} needs cpu_demand > 0 and total_work >= 0", t.name));
            }
        }
        for d in &self.deploys {
            if !known(&d.image) {
                return bad(format!("deployment {} uses undeclared image '{}'", d.name, d.image));
            }
            if !node_ok(d.node) {
                return bad(format!("deployment {} targets an unknown node", d.name));
            }
        }
        match s.mode {
            Mode::MagiCompare if self.attack.is_none() => bad("magi_compare needs an [attack]".into()),
            Mode::CutoffSweep => match &self.sweep {
                None => bad("cutoff_sweep needs a [sweep] section".into()),
                Some(w) if !(w.step.0 > 0.0 && w.first.0 > 0.0 && w.last.0 >= w.first.0 && w.throughput.0 > 0.0) => {
                    bad("sweep needs first > 0, step > 0, last >= first and positive throughput".into())
                }
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }
}
