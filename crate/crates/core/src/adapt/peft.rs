use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Linear, MultiHeadAttention, Parameterized, TransformerBlock};
use crate::tensor::{Param, Result, Tape, Tensor, TensorError, Var};

/// Which attention projections receive a LoRA pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Value,
}

fn default_targets() -> Vec<LoraTarget> {
    vec![LoraTarget::Query, LoraTarget::Value]
}

/// How the backbone is adapted during continual training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdaptationMode {
    /// Backbone contributes no learnable tensors.
    Freeze,
    /// Every backbone tensor is learnable.
    FullFt,
    Lora {
        rank: usize,
        alpha: f64,
        #[serde(default = "default_targets")]
        targets: Vec<LoraTarget>,
    },
    Adapter {
        bottleneck: usize,
    },
}

impl Default for AdaptationMode {
    fn default() -> Self {
        Self::lora(2)
    }
}

impl AdaptationMode {
    /// LoRA on query and value with `alpha = 2 * rank`.
    pub fn lora(rank: usize) -> Self {
        Self::Lora {
            rank,
            alpha: 2.0 * rank as f64,
            targets: default_targets(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Lora { rank: 0, .. } => Err(TensorError::Invalid("LoRA rank must be >= 1".into())),
            Self::Adapter { bottleneck: 0 } => {
                Err(TensorError::Invalid("adapter bottleneck must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Freeze => "freeze",
            Self::FullFt => "full_ft",
            Self::Lora { .. } => "lora",
            Self::Adapter { .. } => "adapter",
        }
    }
}

/// Low-rank additive update `x ↦ scale · (x·down)·up`.
///
/// `up` starts at zero, so a freshly attached pair leaves its host
/// projection unchanged.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub down: Param,
    pub up: Param,
    pub scale: f64,
}

impl LoraPair {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (c_in as f64).sqrt();
        Self {
            down: Param::new(format!("{name}.down"), Tensor::randn(&[c_in, rank], std, rng)),
            up: Param::new(format!("{name}.up"), Tensor::zeros(&[rank, c_out])),
            scale: alpha / rank as f64,
        }
    }

    pub fn rank(&self) -> usize {
        self.down.value().shape()[1]
    }
}

impl Parameterized for LoraPair {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.down);
        f(&self.up);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.down);
        f(&mut self.up);
    }
}

/// Attaches LoRA pairs to the query and value projections. The base
/// weights are left as they are; the update is applied functionally in the
/// forward pass.
pub fn apply_lora<R: Rng + ?Sized>(
    mha: &mut MultiHeadAttention,
    rank: usize,
    alpha: f64,
    targets: &[LoraTarget],
    rng: &mut R,
) -> Result<()> {
    let c = mha.width();
    if rank == 0 || rank >= c {
        return Err(TensorError::Invalid(format!(
            "LoRA rank {rank} must satisfy 1 <= r < width {c}"
        )));
    }
    for target in targets {
        match target {
            LoraTarget::Query => {
                let name = mha.wq.name().replace(".wq", ".lora_q");
                mha.lora_q = Some(LoraPair::new(&name, c, c, rank, alpha, rng));
            }
            LoraTarget::Value => {
                let name = mha.wv.name().replace(".wv", ".lora_v");
                mha.lora_v = Some(LoraPair::new(&name, c, c, rank, alpha, rng));
            }
        }
    }
    Ok(())
}

/// Parallel bottleneck adapter on the MLP sublayer:
/// `up(GELU(down(h)))` added to the MLP output.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new<R: Rng + ?Sized>(name: &str, width: usize, bottleneck: usize, rng: &mut R) -> Self {
        Self {
            down: Linear::new(&format!("{name}.down"), width, bottleneck, rng),
            up: Linear::zeros(&format!("{name}.up"), bottleneck, width),
        }
    }

    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let z = self.down.forward(tape, h)?;
        let z = tape.gelu(z)?;
        self.up.forward(tape, z)
    }
}

impl Parameterized for Adapter {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.down.visit(f);
        self.up.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.down.visit_mut(f);
        self.up.visit_mut(f);
    }
}

pub fn apply_adapter<R: Rng + ?Sized>(
    block: &mut TransformerBlock,
    bottleneck: usize,
    rng: &mut R,
) -> Result<()> {
    let c = block.fc1.in_features();
    if bottleneck == 0 || bottleneck >= c {
        return Err(TensorError::Invalid(format!(
            "adapter bottleneck {bottleneck} must satisfy 1 <= b < width {c}"
        )));
    }
    let name = block.fc1.weight.name().replace(".fc1.weight", ".adapter");
    block.adapter = Some(Adapter::new(&name, c, bottleneck, rng));
    Ok(())
}
