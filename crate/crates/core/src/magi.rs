//! Mitigation: a master that correlates the audit stream with pending pulls
//! and per-node agents that cancel orphaned downloads.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::control::{AuditEvent, ObjectKind, Verb};
use crate::engine::EventKind;
use crate::model::{ImageId, NodeId, ObjectId};
use crate::runtime::{CancelOutcome, NodeRuntime, PullState};
use crate::sim::{Action, Simulation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagiSettings {
    pub react_latency: f64,
    pub audit_delay: f64,
}

impl Default for MagiSettings {
    fn default() -> Self {
        MagiSettings {
            react_latency: 2.0,
            audit_delay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingPull {
    pub image: ImageId,
    pub node: NodeId,
    pub pull_complete: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alert {
    pub node: NodeId,
    pub image: ImageId,
    pub pod: ObjectId,
}

/// Cluster-wide bookkeeping of Pods whose pull has not finished.
#[derive(Clone, Debug, Default)]
pub struct MagiMaster {
    pub table: BTreeMap<ObjectId, PendingPull>,
}

impl MagiMaster {
    pub fn on_audit(&mut self, ev: &AuditEvent) -> Option<Alert> {
        if ev.kind != ObjectKind::Pod {
            return None;
        }
        match ev.verb {
            Verb::Create if ev.pull_enqueued => {
                self.table.insert(
                    ev.object,
                    PendingPull {
                        image: ev.image,
                        node: ev.node?,
                        pull_complete: false,
                    },
                );
                None
            }
            Verb::Delete | Verb::ForceDelete => {
                let entry = self.table.remove(&ev.object)?;
                (!entry.pull_complete).then_some(Alert {
                    node: entry.node,
                    image: entry.image,
                    pod: ev.object,
                })
            }
            _ => None,
        }
    }

    /// The pull for `pod` finished; the entry goes once the Pod runs.
    pub fn on_pull_complete(&mut self, pod: ObjectId, running: bool) {
        if running {
            self.table.remove(&pod);
        } else if let Some(e) = self.table.get_mut(&pod) {
            e.pull_complete = true;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum AlertResponse {
    KillScheduled,
    Blacklisted,
    TooLateAlreadyDone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum KillOutcome {
    KilledAfterLatency,
    TooLateAlreadyDone,
    /// Another live Pod still wants the image.
    Spared,
}

/// Per-node agent.
#[derive(Clone, Debug, Default)]
pub struct MagiNode {
    pub queue_mirror: Vec<ImageId>,
    pub blacklist: BTreeSet<ImageId>,
}

impl MagiNode {
    pub fn on_alert(&mut self, runtime: &NodeRuntime, image: ImageId) -> AlertResponse {
        match runtime.live_request_for(image) {
            Some(r) if r.state == PullState::Queued => {
                self.blacklist.insert(image);
                AlertResponse::Blacklisted
            }
            Some(r) if r.state == PullState::Downloading && r.has_unfinished_layers() => AlertResponse::KillScheduled,
            _ => AlertResponse::TooLateAlreadyDone,
        }
    }

    /// A queued image just got a slot; blacklisted ones go down the kill path.
    pub fn on_dequeue(&mut self, image: ImageId) -> bool {
        self.blacklist.remove(&image)
    }
}

/// Tally of decisions for reports.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MagiTally {
    pub alerts: usize,
    pub killed: usize,
    pub blacklisted: usize,
    pub too_late: usize,
    pub spared: usize,
}

pub struct Magi {
    pub settings: MagiSettings,
    pub master: MagiMaster,
    pub nodes: Vec<MagiNode>,
    pub tally: MagiTally,
}

impl Magi {
    pub fn new(settings: MagiSettings, nodes: usize) -> Self {
        Magi {
            settings,
            master: MagiMaster::default(),
            nodes: vec![MagiNode::default(); nodes],
            tally: MagiTally::default(),
        }
    }

    pub fn sync_mirror(&mut self, runtime: &NodeRuntime) {
        self.nodes[runtime.id.0 as usize].queue_mirror = runtime.pull_order();
    }
}

impl Simulation {
    fn schedule_kill(&mut self, node: NodeId, image: ImageId) {
        let latency = self.magi.as_ref().map_or(0.0, |m| m.settings.react_latency);
        let at = self.now() + latency;
        self.schedule(at, Action::MagiKill { node, image })
            .expect("kill is never in the past");
    }

    pub(crate) fn magi_alert(&mut self, node: NodeId, image: ImageId, pod: ObjectId) {
        let Some(m) = &mut self.magi else { return };
        let runtime = &self.nodes[node.0 as usize];
        let response = m.nodes[node.0 as usize].on_alert(runtime, image);
        m.tally.alerts += 1;
        let reason = match response {
            AlertResponse::KillScheduled => "kill_scheduled",
            AlertResponse::Blacklisted => {
                m.tally.blacklisted += 1;
                "blacklisted"
            }
            AlertResponse::TooLateAlreadyDone => {
                m.tally.too_late += 1;
                "too_late"
            }
        };
        let detail = format!("pod={pod} image={} reason={reason}", self.catalog.get(image).name);
        self.record(EventKind::MagiAlert, Some(node), detail);
        if response == AlertResponse::KillScheduled {
            self.schedule_kill(node, image);
        }
    }

    pub(crate) fn magi_on_dequeue(&mut self, node: NodeId, image: ImageId) {
        let Some(m) = &mut self.magi else { return };
        if m.nodes[node.0 as usize].on_dequeue(image) {
            let detail = format!("image={} reason=blacklist_dequeued", self.catalog.get(image).name);
            self.record(EventKind::MagiAlert, Some(node), detail);
            self.schedule_kill(node, image);
        }
    }

    pub(crate) fn magi_kill(&mut self, node: NodeId, image: ImageId) {
        let runtime = &self.nodes[node.0 as usize];
        let outcome = match runtime.live_request_for(image) {
            Some(r) if r.state == PullState::Downloading && r.has_unfinished_layers() => {
                if r.requesters.iter().any(|p| self.control.is_live(*p)) {
                    KillOutcome::Spared
                } else {
                    KillOutcome::KilledAfterLatency
                }
            }
            _ => KillOutcome::TooLateAlreadyDone,
        };
        if outcome == KillOutcome::KilledAfterLatency {
            let res = self.nodes[node.0 as usize].cancel_pull(image);
            debug_assert_eq!(res, CancelOutcome::Cancelled);
        }
        let Some(m) = &mut self.magi else { return };
        let reason = match outcome {
            KillOutcome::KilledAfterLatency => {
                m.tally.killed += 1;
                "killed"
            }
            KillOutcome::TooLateAlreadyDone => {
                m.tally.too_late += 1;
                "too_late"
            }
            KillOutcome::Spared => {
                m.tally.spared += 1;
                "spared_live_requester"
            }
        };
        let detail = format!("image={} reason={reason}", self.catalog.get(image).name);
        self.record(EventKind::MagiKill, Some(node), detail);
    }
}
