//! Kubelet image garbage collection and disk-pressure eviction.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{ImageId, NodeConfig, ObjectId};
use crate::runtime::NodeRuntime;

/// Candidate sets larger than this fall back to the greedy order.
pub const EXACT_EVICTION_LIMIT: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcPolicy {
    pub high_pct: f64,
    pub low_pct: f64,
    pub ttl: f64,
    pub scan_interval: f64,
    pub eviction_interval: f64,
}

impl GcPolicy {
    pub fn from_config(cfg: &NodeConfig) -> Self {
        GcPolicy {
            high_pct: cfg.gc_high_pct,
            low_pct: cfg.gc_low_pct,
            ttl: cfg.image_ttl,
            scan_interval: 60.0,
            eviction_interval: 10.0,
        }
    }
}

/// Images GC would remove right now, oldest pull first.
pub fn gc_candidates(node: &NodeRuntime, now: f64) -> Vec<ImageId> {
    let cfg = &node.config;
    if node.disk_used_fraction() < cfg.gc_high_pct {
        return Vec::new();
    }
    let mut eligible: Vec<(f64, ImageId)> = node
        .cached_images()
        .iter()
        .filter(|(_, c)| c.in_use == 0 && now - c.last_pull_finish >= cfg.image_ttl)
        .map(|(id, c)| (c.last_pull_finish, *id))
        .collect();
    eligible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    eligible.into_iter().map(|(_, id)| id).collect()
}

/// Deletes every eligible image once usage is at or above the high mark.
/// Deletion does not stop at the low mark.
pub fn gc_scan(node: &mut NodeRuntime, now: f64) -> Vec<ImageId> {
    let victims = gc_candidates(node, now);
    for id in &victims {
        node.delete_image(*id);
    }
    victims
}

/// A running Pod the eviction manager may terminate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvictionCandidate {
    pub pod: ObjectId,
    pub image: ImageId,
}

/// Bytes released by evicting `chosen`: an image is deleted only when every
/// Pod using it is in the set, and a layer only when no surviving image or
/// pull holds it.
pub fn bytes_freed(node: &NodeRuntime, candidates: &[EvictionCandidate], chosen: &[usize]) -> u64 {
    let picked: BTreeSet<usize> = chosen.iter().copied().collect();
    let mut images: BTreeSet<ImageId> = chosen.iter().map(|&i| candidates[i].image).collect();
    images.retain(|img| {
        let users_left = candidates
            .iter()
            .enumerate()
            .filter(|(i, c)| c.image == *img && !picked.contains(i))
            .count();
        let in_use = node.cached_images().get(img).map_or(0, |c| c.in_use as usize);
        let users_in_set = candidates
            .iter()
            .enumerate()
            .filter(|(i, c)| c.image == *img && picked.contains(i))
            .count();
        users_left == 0 && in_use <= users_in_set
    });
    let images: Vec<ImageId> = images.into_iter().collect();
    node.bytes_freed_by(&images)
}

/// Smallest set of Pods whose eviction brings usage below the hard mark.
/// Ties prefer freeing more bytes. If no subset is enough, every candidate
/// is returned. Empty when usage is already below the mark.
pub fn select_evictions(node: &NodeRuntime, candidates: &[EvictionCandidate]) -> Vec<usize> {
    let capacity = node.config.disk_capacity_bytes as f64;
    let limit = node.config.eviction_hard_pct * capacity;
    let used = node.disk_used();
    if used < limit || candidates.is_empty() {
        return Vec::new();
    }
    let need = used - limit;
    let enough = |set: &[usize]| bytes_freed(node, candidates, set) as f64 > need;

    let n = candidates.len();
    if n <= EXACT_EVICTION_LIMIT {
        for k in 1..=n {
            let mut best: Option<(u64, Vec<usize>)> = None;
            for_each_combination(n, k, &mut |set| {
                let freed = bytes_freed(node, candidates, set);
                if freed as f64 > need && best.as_ref().is_none_or(|(b, _)| freed > *b) {
                    best = Some((freed, set.to_vec()));
                }
            });
            if let Some((_, set)) = best {
                return set;
            }
        }
        return (0..n).collect();
    }

    let mut order: Vec<usize> = (0..n).collect();
    let size = |i: usize| node.cached_images().get(&candidates[i].image).map_or(0, |c| c.bytes);
    order.sort_by(|&a, &b| size(b).cmp(&size(a)).then(a.cmp(&b)));
    let mut chosen = Vec::new();
    for i in order {
        chosen.push(i);
        if enough(&chosen) {
            break;
        }
    }
    chosen.sort_unstable();
    chosen
}

fn for_each_combination(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..=n - (k - cur.len()) {
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    let mut cur = Vec::with_capacity(k);
    rec(0, n, k, &mut cur, f);
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{Catalog, CostModel, Digest, ImageSpec, LayerSpec, NodeId, GB};

    fn cost() -> CostModel {
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

    /// Node with one cached single-layer image per entry of `sizes_gb`,
    /// pulled at t = 0, 1, 2, ...
    fn node_with(sizes_gb: &[f64], baseline_gb: f64) -> NodeRuntime {
        let mut cat = Catalog::new();
        for (i, gb) in sizes_gb.iter().enumerate() {
            let bytes = (gb * GB) as u64;
            let layer = LayerSpec::new(Digest(i as u64 + 1), 1000, bytes).unwrap();
            cat.insert(ImageSpec::new(format!("img{i}"), vec![layer]).unwrap())
                .unwrap();
        }
        let cfg = NodeConfig {
            disk_capacity_bytes: 100_000_000_000,
            baseline_disk_used_bytes: (baseline_gb * GB) as u64,
            net_bw: 1e12,
            ..NodeConfig::local_testbed()
        };
        let mut node = NodeRuntime::new(NodeId(0), cfg, cost(), Arc::new(cat));
        for i in 0..sizes_gb.len() {
            node.submit_pull(ImageId(i as u32), ObjectId(i as u64), false);
            while let Some(t) = node.next_deadline() {
                node.advance_to(t);
                node.process_due();
            }
            let next = node.clock().ceil() + 1.0;
            node.advance_to(next);
        }
        node
    }

    #[test]
    fn gc_deletes_every_eligible_image_past_low_mark() {
        let mut node = node_with(&[2.0, 2.0, 2.0, 2.0], 78.0);
        assert!(node.disk_used_fraction() >= 0.85);
        let deleted = gc_scan(&mut node, 500.0);
        assert_eq!(deleted, vec![ImageId(0), ImageId(1), ImageId(2), ImageId(3)]);
        assert!(node.disk_used_fraction() < 0.80);
    }

    #[test]
    fn gc_idle_below_high_mark() {
        let mut node = node_with(&[2.0, 2.0], 80.0);
        assert!(node.disk_used_fraction() < 0.85);
        assert!(gc_scan(&mut node, 500.0).is_empty());
    }

    #[test]
    fn gc_spares_young_and_used_images() {
        let mut node = node_with(&[4.0, 4.0], 82.0);
        node.acquire(ImageId(1));
        // image 0 finished around t=1, only 60 s old
        assert!(gc_scan(&mut node, 61.0).is_empty());
        assert_eq!(gc_scan(&mut node, 500.0), vec![ImageId(0)]);
    }

    #[test]
    fn eviction_prefers_the_single_large_pod() {
        let mut node = node_with(&[10.0, 2.0], 79.0);
        node.acquire(ImageId(0));
        node.acquire(ImageId(1));
        // 91 GB used, hard mark 90 GB
        let cands = [
            EvictionCandidate {
                pod: ObjectId(1),
                image: ImageId(0),
            },
            EvictionCandidate {
                pod: ObjectId(2),
                image: ImageId(1),
            },
        ];
        assert_eq!(select_evictions(&node, &cands), vec![0]);
    }

    #[test]
    fn eviction_idle_below_hard_mark() {
        let mut node = node_with(&[5.0], 83.0);
        node.acquire(ImageId(0));
        let cands = [EvictionCandidate {
            pod: ObjectId(1),
            image: ImageId(0),
        }];
        assert!(select_evictions(&node, &cands).is_empty());
    }

    #[test]
    fn shared_image_needs_every_user_evicted() {
        let mut node = node_with(&[6.0], 88.0);
        node.acquire(ImageId(0));
        node.acquire(ImageId(0));
        let cands = [
            EvictionCandidate {
                pod: ObjectId(1),
                image: ImageId(0),
            },
            EvictionCandidate {
                pod: ObjectId(2),
                image: ImageId(0),
            },
        ];
        assert_eq!(bytes_freed(&node, &cands, &[0]), 0);
        assert_eq!(select_evictions(&node, &cands), vec![0, 1]);
    }

    #[test]
    fn combinations_are_complete() {
        let mut count = 0;
        for_each_combination(6, 3, &mut |_| count += 1);
        assert_eq!(count, 20);
    }
}
