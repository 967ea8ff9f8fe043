//! API server and kubelet request path: Pods, Deployments and the audit
//! stream.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::EventKind;
use crate::error::SimError;
use crate::model::{ImageId, NodeId, ObjectId, Owner, PodSpec, PullPolicy, SimTime};
use crate::sim::{Action, Simulation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PodPhase {
    Pending,
    Running,
    Terminating,
    Gone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ObjectKind {
    Pod,
    Deployment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSpec {
    pub replicas: usize,
    pub image: ImageId,
    pub node_spread: Vec<NodeId>,
    pub pull_policy: PullPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApiObject {
    pub id: ObjectId,
    pub name: String,
    pub kind: ObjectKind,
    pub phase: PodPhase,
    pub owner: Owner,
    pub pod: Option<PodSpec>,
    pub deployment: Option<DeploymentSpec>,
    /// Pods currently owned by a Deployment.
    pub children: Vec<ObjectId>,
    pub created_at: f64,
    pub running_at: Option<f64>,
    generation: u32,
    holds_image: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verb {
    Create,
    Delete,
    ForceDelete,
    Patch,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditEvent {
    pub time: SimTime,
    pub seq: u64,
    pub verb: Verb,
    pub object: ObjectId,
    pub kind: ObjectKind,
    pub image: ImageId,
    pub image_name: String,
    pub node: Option<NodeId>,
    /// Set on Pod creation when the kubelet had to request a pull.
    pub pull_enqueued: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ControlPlane {
    objects: BTreeMap<ObjectId, ApiObject>,
    names: BTreeMap<String, ObjectId>,
    audit: Vec<AuditEvent>,
    next_id: u64,
}

impl ControlPlane {
    pub fn get(&self, id: ObjectId) -> Option<&ApiObject> {
        self.objects.get(&id)
    }

    pub fn objects(&self) -> impl Iterator<Item = &ApiObject> {
        self.objects.values()
    }

    pub fn live_by_name(&self, name: &str) -> Option<ObjectId> {
        self.names.get(name).copied()
    }

    pub fn audit(&self) -> &[AuditEvent] {
        &self.audit
    }

    /// Running or pending Pods on `node` in the given phase.
    pub fn pods_on(&self, node: NodeId, phase: PodPhase) -> impl Iterator<Item = (ObjectId, ImageId)> + '_ {
        self.objects.values().filter_map(move |o| {
            let spec = o.pod.as_ref()?;
            (spec.node_selector == node && o.phase == phase).then_some((o.id, spec.image))
        })
    }

    /// Pods that exist and are not being torn down.
    pub fn is_live(&self, id: ObjectId) -> bool {
        self.objects
            .get(&id)
            .is_some_and(|o| matches!(o.phase, PodPhase::Pending | PodPhase::Running))
    }

    fn insert(&mut self, name: &str, kind: ObjectKind, owner: Owner, now: f64) -> ObjectId {
        let id = ObjectId(self.next_id);
        self.next_id += 1;
        self.objects.insert(
            id,
            ApiObject {
                id,
                name: name.to_string(),
                kind,
                phase: PodPhase::Pending,
                owner,
                pod: None,
                deployment: None,
                children: Vec::new(),
                created_at: now,
                running_at: None,
                generation: 0,
                holds_image: false,
            },
        );
        self.names.insert(name.to_string(), id);
        id
    }

    pub fn audit_text(&self) -> String {
        let mut out = String::new();
        for a in &self.audit {
            let node = a.node.map(|n| n.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:.9}\t{}\t{:?}\t{:?}\t{}\t{}\t{}\tpull_enqueued={}",
                a.time.secs(),
                a.seq,
                a.verb,
                a.kind,
                a.object,
                a.image_name,
                node,
                a.pull_enqueued
            );
        }
        out
    }
}

impl Simulation {
    fn emit_audit(
        &mut self,
        verb: Verb,
        object: ObjectId,
        kind: ObjectKind,
        image: ImageId,
        node: Option<NodeId>,
        pull_enqueued: bool,
    ) {
        let ev = AuditEvent {
            time: self.queue.clock(),
            seq: self.control.audit.len() as u64,
            verb,
            object,
            kind,
            image,
            image_name: self.catalog.get(image).name.clone(),
            node,
            pull_enqueued,
        };
        let alert = self.magi.as_mut().and_then(|m| m.master.on_audit(&ev));
        self.control.audit.push(ev);
        if let Some(alert) = alert {
            let at = self.now() + self.magi.as_ref().map_or(0.0, |m| m.settings.audit_delay);
            self.schedule(
                at,
                Action::MagiAlert {
                    node: alert.node,
                    image: alert.image,
                    pod: alert.pod,
                },
            )
            .expect("alert is never in the past");
        }
    }

    /// Creates a Pod; the API answers without waiting for the pull.
    pub fn create_pod(&mut self, spec: PodSpec, parent: Option<ObjectId>) -> Result<ObjectId, SimError> {
        let node = spec.node_selector;
        let cached = self.node(node)?.is_cached(spec.image);
        let now = self.now();
        let id = self.control.insert(&spec.name, ObjectKind::Pod, spec.owner, now);
        let pull = spec.pull_policy == PullPolicy::Always || !cached;
        let detail = format!(
            "create pod={id} name={} image={}",
            spec.name,
            self.catalog.get(spec.image).name
        );
        self.record(EventKind::ApiRequest, Some(node), detail);
        let (image, owner) = (spec.image, spec.owner);
        {
            let obj = self.control.objects.get_mut(&id).unwrap();
            obj.pod = Some(spec);
        }
        if let Some(p) = parent {
            self.control.objects.get_mut(&p).unwrap().children.push(id);
        }
        if pull {
            self.node_mut(node)?.submit_pull(image, id, owner == Owner::Attacker);
        } else {
            self.node_mut(node)?.acquire(image);
            let obj = self.control.objects.get_mut(&id).unwrap();
            obj.phase = PodPhase::Running;
            obj.running_at = Some(now);
            obj.holds_image = true;
        }
        self.emit_audit(Verb::Create, id, ObjectKind::Pod, image, Some(node), pull);
        if !pull {
            self.record(
                EventKind::PodPhase,
                Some(node),
                format!("pod={id} phase=Running cache_hit"),
            );
        }
        Ok(id)
    }

    /// Deletes a Pod. A forced delete drops the object at once and leaves
    /// any pull it started running on the node.
    pub fn delete_pod(&mut self, id: ObjectId, force: bool) -> Result<(), SimError> {
        let obj = self.control.objects.get(&id).ok_or(SimError::UnknownObject(id.0))?;
        let Some(spec) = obj.pod.clone() else {
            return Err(SimError::UnknownObject(id.0));
        };
        if !matches!(obj.phase, PodPhase::Pending | PodPhase::Running) {
            return Err(SimError::UnknownObject(id.0));
        }
        let node = spec.node_selector;
        let verb = if force { Verb::ForceDelete } else { Verb::Delete };
        self.record(
            EventKind::ApiRequest,
            Some(node),
            format!("{verb:?} pod={id}").to_lowercase(),
        );
        if force {
            self.drop_pod(id);
        } else {
            self.control.objects.get_mut(&id).unwrap().phase = PodPhase::Terminating;
            let at = self.now() + self.settings.teardown_delay;
            self.schedule(at, Action::Teardown(id))?;
        }
        self.emit_audit(verb, id, ObjectKind::Pod, spec.image, Some(node), false);
        Ok(())
    }

    fn drop_pod(&mut self, id: ObjectId) {
        let obj = self.control.objects.get_mut(&id).unwrap();
        obj.phase = PodPhase::Gone;
        let spec = obj.pod.clone().unwrap();
        if std::mem::replace(&mut obj.holds_image, false) {
            self.nodes[spec.node_selector.0 as usize].release(spec.image);
        }
        if self.control.names.get(&obj.name) == Some(&id) {
            let name = obj.name.clone();
            self.control.names.remove(&name);
        }
    }

    pub(crate) fn finish_teardown(&mut self, id: ObjectId) {
        let Some(obj) = self.control.objects.get(&id) else {
            return;
        };
        if obj.phase != PodPhase::Terminating {
            return;
        }
        let node = obj.pod.as_ref().unwrap().node_selector;
        self.drop_pod(id);
        self.record(EventKind::PodPhase, Some(node), format!("pod={id} phase=Gone"));
    }

    pub(crate) fn evict_pod(&mut self, id: ObjectId) {
        let node = self.control.objects[&id].pod.as_ref().unwrap().node_selector;
        self.drop_pod(id);
        self.record(
            EventKind::PodPhase,
            Some(node),
            format!("pod={id} phase=Gone reason=evicted"),
        );
    }

    /// Called when the node finished the pull a Pod was waiting on.
    pub(crate) fn pull_finished_for(&mut self, pod: ObjectId, node: NodeId, image: ImageId) {
        let now = self.now();
        let Some(obj) = self.control.objects.get_mut(&pod) else {
            return;
        };
        let running = obj.phase == PodPhase::Pending;
        if running {
            obj.phase = PodPhase::Running;
            obj.running_at = Some(now);
            obj.holds_image = true;
            self.nodes[node.0 as usize].acquire(image);
        }
        if let Some(m) = &mut self.magi {
            m.master.on_pull_complete(pod, running);
        }
        if running {
            self.record(EventKind::PodPhase, Some(node), format!("pod={pod} phase=Running"));
        }
    }

    pub fn create_deployment(&mut self, name: &str, spec: DeploymentSpec, owner: Owner) -> Result<ObjectId, SimError> {
        if spec.replicas == 0 || spec.node_spread.is_empty() {
            return Err(SimError::UnknownObject(u64::MAX));
        }
        for n in &spec.node_spread {
            self.node(*n)?;
        }
        let now = self.now();
        let id = self.control.insert(name, ObjectKind::Deployment, owner, now);
        {
            let obj = self.control.objects.get_mut(&id).unwrap();
            obj.phase = PodPhase::Running;
            obj.deployment = Some(spec.clone());
        }
        self.record(
            EventKind::ApiRequest,
            None,
            format!("create deployment={id} name={name}"),
        );
        self.emit_audit(Verb::Create, id, ObjectKind::Deployment, spec.image, None, false);
        self.spawn_replicas(id)?;
        Ok(id)
    }

    fn spawn_replicas(&mut self, id: ObjectId) -> Result<(), SimError> {
        let obj = &self.control.objects[&id];
        let spec = obj.deployment.clone().unwrap();
        let (name, generation, owner) = (obj.name.clone(), obj.generation, obj.owner);
        for i in 0..spec.replicas {
            let pod = PodSpec {
                name: format!("{name}-{generation}-{i}"),
                image: spec.image,
                pull_policy: spec.pull_policy,
                node_selector: spec.node_spread[i % spec.node_spread.len()],
                owner,
            };
            self.create_pod(pod, Some(id))?;
        }
        Ok(())
    }

    /// Replaces every replica with one running `image`. Old Pods are deleted
    /// gracefully.
    pub fn patch_deployment(&mut self, id: ObjectId, image: ImageId) -> Result<(), SimError> {
        let obj = self.control.objects.get(&id).ok_or(SimError::UnknownObject(id.0))?;
        let Some(spec) = obj.deployment.clone() else {
            return Err(SimError::UnknownObject(id.0));
        };
        self.record(
            EventKind::ApiRequest,
            None,
            format!("patch deployment={id} image={}", self.catalog.get(image).name),
        );
        self.emit_audit(Verb::Patch, id, ObjectKind::Deployment, image, None, false);
        if spec.image == image {
            return Ok(());
        }
        let old = {
            let obj = self.control.objects.get_mut(&id).unwrap();
            obj.generation += 1;
            obj.deployment.as_mut().unwrap().image = image;
            std::mem::take(&mut obj.children)
        };
        for pod in old {
            if self.control.is_live(pod) {
                self.delete_pod(pod, false)?;
            }
        }
        self.spawn_replicas(id)
    }
}
