//! Attack plans and the timed action scripts they expand into.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::DeploymentSpec;
use crate::error::SimError;
use crate::model::{Catalog, ImageId, NodeId, Owner, PodSpec, PullPolicy};
use crate::sim::Action;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    ForceDeleteCycle,
    SequentialCycle,
    DeploymentPatch,
    NoDelete,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "forcedeletecycle" => Ok(Strategy::ForceDeleteCycle),
            "sequentialcycle" => Ok(Strategy::SequentialCycle),
            "deploymentpatch" => Ok(Strategy::DeploymentPatch),
            "nodelete" => Ok(Strategy::NoDelete),
            _ => Err(format!("unknown attack strategy '{s}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub strategy: Strategy,
    pub images: Vec<ImageId>,
    pub inter_step_wait: f64,
    pub shuffle_seed: Option<u64>,
    pub target_nodes: Vec<NodeId>,
    pub start: f64,
    pub patch_interval: f64,
    pub pull_policy: PullPolicy,
}

impl AttackPlan {
    pub fn new(strategy: Strategy, images: Vec<ImageId>, target_nodes: Vec<NodeId>) -> Self {
        AttackPlan {
            strategy,
            images,
            inter_step_wait: 2.0,
            shuffle_seed: None,
            target_nodes,
            start: 0.0,
            patch_interval: 30.0,
            pull_policy: PullPolicy::Always,
        }
    }

    /// Image order the attacker will use.
    pub fn ordered_images(&self, catalog: &Catalog) -> Vec<ImageId> {
        let mut images = self.images.clone();
        match self.strategy {
            Strategy::SequentialCycle => {
                images.sort_by_key(|i| (catalog.get(*i).total_compressed(), *i));
            }
            _ => {
                if let Some(seed) = self.shuffle_seed {
                    images.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                }
            }
        }
        images
    }
}

/// Expands a plan into timed actions.
pub fn run_attack(plan: &AttackPlan, catalog: &Catalog) -> Result<Vec<(f64, Action)>, SimError> {
    if plan.images.is_empty() {
        return Err(SimError::EmptyImageSet);
    }
    if plan.target_nodes.is_empty() {
        return Err(SimError::UnknownObject(u64::MAX));
    }
    let images = plan.ordered_images(catalog);
    let name = |i: ImageId| catalog.get(i).name.clone();
    let mut out = Vec::new();
    let wait = plan.inter_step_wait;
    match plan.strategy {
        Strategy::ForceDeleteCycle | Strategy::SequentialCycle | Strategy::NoDelete => {
            for (step, image) in images.iter().enumerate() {
                let t = plan.start + step as f64 * wait;
                out.push((t, Action::AttackStep(format!("step={step} image={}", name(*image)))));
                for node in &plan.target_nodes {
                    let pod = format!("attack-{}-{step}", node.0);
                    out.push((
                        t,
                        Action::CreatePod(PodSpec {
                            name: pod.clone(),
                            image: *image,
                            pull_policy: plan.pull_policy,
                            node_selector: *node,
                            owner: Owner::Attacker,
                        }),
                    ));
                    if plan.strategy != Strategy::NoDelete {
                        out.push((t + wait, Action::DeletePod { name: pod, force: true }));
                    }
                }
            }
        }
        Strategy::DeploymentPatch => {
            let deploy = "attack-deploy".to_string();
            out.push((
                plan.start,
                Action::AttackStep(format!("step=0 image={}", name(images[0]))),
            ));
            out.push((
                plan.start,
                Action::CreateDeployment {
                    name: deploy.clone(),
                    spec: DeploymentSpec {
                        replicas: plan.target_nodes.len(),
                        image: images[0],
                        node_spread: plan.target_nodes.clone(),
                        pull_policy: plan.pull_policy,
                    },
                    owner: Owner::Attacker,
                },
            ));
            for (step, image) in images.iter().enumerate().skip(1) {
                let t = plan.start + step as f64 * plan.patch_interval;
                out.push((t, Action::AttackStep(format!("step={step} image={}", name(*image)))));
                out.push((
                    t,
                    Action::PatchDeployment {
                        name: deploy.clone(),
                        image: *image,
                    },
                ));
            }
        }
    }
    // Deletes at time t must precede creates at t to keep one live Pod.
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then(rank(&a.1).cmp(&rank(&b.1))));
    Ok(out)
}

fn rank(a: &Action) -> u8 {
    match a {
        Action::DeletePod { .. } => 0,
        Action::AttackStep(_) => 1,
        _ => 2,
    }
}
