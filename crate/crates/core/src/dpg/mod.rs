//! Dynamic prompt generation: stage tokens, the low-rank mapping and
//! prompt synthesis, plus a static prompt-pool baseline.

mod mapping;
mod pool;
mod queue;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use mapping::{count_mapping_params, mapping_forward, CountConvention, LowRankMap, MappingRank};
pub use pool::{pool_combine, StaticPromptPool};
pub use queue::{token_name, EvictionPolicy, QueueState, StageToken, StageTokenQueue};

use crate::error::{Error, Result};
use crate::nn::{vit_forward, LayerPrefix, MiniViT};
use crate::tensor::{Tape, Var};

/// Prompt geometry `N_p × C × L`: `N_p` prompt rows per layer (half keys,
/// half values) at backbone width `C` for the first `L` layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptLayout {
    pub prompts_per_layer: usize,
    pub width: usize,
    pub layers: usize,
}

impl PromptLayout {
    pub fn numel(&self) -> usize {
        self.prompts_per_layer * self.width * self.layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts_per_layer == 0 || self.prompts_per_layer % 2 != 0 {
            return Err(Error::Config(format!(
                "prompts per layer must be even and positive, got {}",
                self.prompts_per_layer
            )));
        }
        if self.width == 0 || self.layers == 0 {
            return Err(Error::Config("prompt width and layer count must be positive".into()));
        }
        Ok(())
    }

    /// Flat indices of layer `l`'s `[N_p×C]` slice in the row-major
    /// `N_p × C × L` tensor.
    pub fn layer_indices(&self, layer: usize) -> Vec<usize> {
        let (c, l) = (self.width, self.layers);
        (0..self.prompts_per_layer)
            .flat_map(|n| (0..c).map(move |j| n * c * l + j * l + layer))
            .collect()
    }
}

/// Per-layer key/value prefixes produced for one image.
#[derive(Clone, Debug)]
pub struct PromptTensor {
    pub layout: PromptLayout,
    pub layers: Vec<LayerPrefix>,
}

/// Reshapes a flat `[1×(N_p·C·L)]` prompt vector to `N_p × C × L` and
/// splits each layer's `N_p` rows into key and value halves.
pub fn reshape_prompts(tape: &mut Tape, flat: Var, layout: PromptLayout) -> Result<PromptTensor> {
    layout.validate()?;
    let n = tape.value(flat)?.len();
    if n != layout.numel() {
        return Err(Error::Config(format!(
            "prompt vector has {n} elements but layout {}x{}x{} needs {}",
            layout.prompts_per_layer,
            layout.width,
            layout.layers,
            layout.numel()
        )));
    }
    let shape = [layout.prompts_per_layer, layout.width];
    let mut layers = Vec::with_capacity(layout.layers);
    for l in 0..layout.layers {
        let block = tape.gather(flat, Arc::new(layout.layer_indices(l)), &shape)?;
        layers.push(LayerPrefix::split(tape, block)?);
    }
    Ok(PromptTensor { layout, layers })
}

/// Stacks the queue's tokens, in stage order, as `[k×C_enc]` extra tokens.
pub fn bind_stage_tokens(tape: &mut Tape, queue: &StageTokenQueue) -> Result<Option<Var>> {
    if queue.is_empty() {
        return Ok(None);
    }
    let rows: Vec<Var> = queue.tokens().iter().map(|t| tape.param(&t.token)).collect();
    Ok(Some(if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat_rows(&rows)?
    }))
}

/// Runs the frozen encoder on `[image tokens; stage tokens]`, maps its
/// `[CLS]` through the low-rank mapping and reshapes to layer prefixes.
pub fn generate_prompts<R: Rng + ?Sized>(
    tape: &mut Tape,
    image: &crate::tensor::Tensor,
    queue: &StageTokenQueue,
    encoder: &MiniViT,
    map: &LowRankMap,
    layout: PromptLayout,
    training: bool,
    rng: &mut R,
) -> Result<PromptTensor> {
    if map.c_out() != layout.numel() {
        return Err(Error::Config(format!(
            "mapping output {} does not match prompt layout size {}",
            map.c_out(),
            layout.numel()
        )));
    }
    let extra = bind_stage_tokens(tape, queue)?;
    let out = vit_forward(tape, encoder, image, &[], extra)?;
    prompts_from_cls(tape, out.cls, map, layout, training, rng)
}

/// The mapping and reshape half of [`generate_prompts`], for callers that
/// already hold the encoder `[CLS]`.
pub fn prompts_from_cls<R: Rng + ?Sized>(
    tape: &mut Tape,
    cls: Var,
    map: &LowRankMap,
    layout: PromptLayout,
    training: bool,
    rng: &mut R,
) -> Result<PromptTensor> {
    let flat = mapping_forward(tape, map, cls, training, rng)?;
    reshape_prompts(tape, flat, layout)
}
