//! Backbone adaptation modes and the partition of model tensors into
//! learnable and frozen groups.

mod peft;

use std::collections::HashSet;
use std::sync::Arc;

use serde::Serialize;

pub use peft::{apply_adapter, apply_lora, Adapter, AdaptationMode, LoraPair, LoraTarget};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn::Parameterized;
use crate::tensor::Learnable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParamGroup {
    StageToken,
    /// Prompt-producing weights: the mapping, or the pool in the baseline.
    Mapping,
    BackboneAdapt,
    LossPrototypes,
    FrozenBase,
    FrozenEncoder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistryEntry {
    pub name: String,
    pub group: ParamGroup,
    pub learnable: bool,
    pub numel: usize,
}

/// Every tensor of a [`ModelBundle`], exactly once, with its group.
#[derive(Clone, Debug, Default)]
pub struct ParameterRegistry {
    entries: Vec<RegistryEntry>,
}

impl ParameterRegistry {
    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn is_learnable(&self, name: &str) -> bool {
        self.get(name).is_some_and(|e| e.learnable)
    }

    pub fn learnable_names(&self) -> HashSet<String> {
        self.entries
            .iter()
            .filter(|e| e.learnable)
            .map(|e| e.name.clone())
            .collect()
    }

    /// Tape binding policy matching this partition.
    pub fn learnable(&self) -> Learnable {
        Learnable::Set(Arc::new(self.learnable_names()))
    }

    pub fn group_tensor_count(&self, group: ParamGroup) -> usize {
        self.entries.iter().filter(|e| e.group == group).count()
    }

    pub fn learnable_tensor_count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group && e.learnable)
            .count()
    }

    pub fn learnable_element_count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group && e.learnable)
            .map(|e| e.numel)
            .sum()
    }
}

fn is_adaptation_tensor(name: &str) -> bool {
    name.contains(".lora_q.") || name.contains(".lora_v.") || name.contains(".adapter.")
}

/// Learnable: the current stage token, the prompt weights, the backbone
/// adaptation weights for `mode` and every prototype row. Frozen: previous
/// stage tokens, the encoder and the base backbone (unless fine-tuning).
pub fn partition_parameters(bundle: &ModelBundle, current_stage: usize) -> Result<ParameterRegistry> {
    let current = bundle
        .queue()
        .and_then(|q| q.current())
        .filter(|t| t.stage == current_stage)
        .map(|t| t.token.name().to_string());
    let full_ft = bundle.adaptation == AdaptationMode::FullFt;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    let mut failure = None;
    bundle.visit(&mut |p| {
        if failure.is_some() {
            return;
        }
        let name = p.name();
        if !seen.insert(name.to_string()) {
            failure = Some(Error::CheckpointEntry {
                name: name.to_string(),
                reason: "tensor name registered twice".into(),
            });
            return;
        }
        let (group, learnable) = if name.starts_with("queue.") {
            (ParamGroup::StageToken, current.as_deref() == Some(name))
        } else if name.starts_with("mapping.") || name.starts_with("pool.") {
            (ParamGroup::Mapping, true)
        } else if name.starts_with("backbone.") {
            if is_adaptation_tensor(name) {
                (ParamGroup::BackboneAdapt, true)
            } else if full_ft {
                (ParamGroup::BackboneAdapt, true)
            } else {
                (ParamGroup::FrozenBase, false)
            }
        } else if name.starts_with("encoder.") {
            (ParamGroup::FrozenEncoder, false)
        } else if name == crate::loss::PROTOTYPES_NAME {
            (ParamGroup::LossPrototypes, true)
        } else {
            failure = Some(Error::UnregisteredTensor(name.to_string()));
            return;
        };
        entries.push(RegistryEntry {
            name: name.to_string(),
            group,
            learnable,
            numel: p.value().len(),
        });
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(ParameterRegistry { entries }),
    }
}
