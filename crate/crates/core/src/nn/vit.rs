use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{attention_with_prefix, LayerNormParams, LayerPrefix, Linear, MultiHeadAttention, Parameterized};
use crate::adapt::Adapter;
use crate::tensor::{Param, Result, Tape, Tensor, TensorError, Var};

/// Geometry of a [`MiniViT`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            patch_side: 4,
            width: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(TensorError::Invalid(format!(
                "image side {} is not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(TensorError::Invalid(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(TensorError::Invalid("depth and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Number of patch tokens `T`.
    pub fn tokens(&self) -> usize {
        let per_side = self.image_side / self.patch_side;
        per_side * per_side
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNormParams,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub adapter: Option<Adapter>,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &VitConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.width;
        Ok(Self {
            ln1: LayerNormParams::new(&format!("{name}.ln1"), c),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), c, cfg.heads, rng)?,
            ln2: LayerNormParams::new(&format!("{name}.ln2"), c),
            fc1: Linear::new(&format!("{name}.fc1"), c, c * cfg.mlp_ratio, rng),
            fc2: Linear::new(&format!("{name}.fc2"), c * cfg.mlp_ratio, c, rng),
            adapter: None,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, prefix: Option<&LayerPrefix>) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = attention_with_prefix(tape, h, prefix, &self.attn)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let m = self.fc1.forward(tape, h)?;
        let m = tape.gelu(m)?;
        let mut m = self.fc2.forward(tape, m)?;
        if let Some(adapter) = &self.adapter {
            let side = adapter.forward(tape, h)?;
            m = tape.add(m, side)?;
        }
        tape.add(x, m)
    }
}

impl Parameterized for TransformerBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.ln1.visit(f);
        self.attn.visit(f);
        self.ln2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
        if let Some(a) = &self.adapter {
            a.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ln1.visit_mut(f);
        self.attn.visit_mut(f);
        self.ln2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
        if let Some(a) = &mut self.adapter {
            a.visit_mut(f);
        }
    }
}

/// A small Vision Transformer over single-channel square images.
#[derive(Clone, Debug)]
pub struct MiniViT {
    pub config: VitConfig,
    pub patch_embed: Linear,
    pub cls_token: Param,
    pub pos_embed: Param,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNormParams,
}

/// Result of [`vit_forward`]. All handles live on the tape used for the pass.
#[derive(Clone, Debug)]
pub struct VitOutput {
    /// Final-layer `[CLS]` embedding, `[1×C]`.
    pub cls: Var,
    /// Final-layer tokens, `[(1+T+k)×C]`.
    pub tokens: Var,
    /// Input to each block, in order.
    pub layer_inputs: Vec<Var>,
}

impl MiniViT {
    pub fn new<R: Rng + ?Sized>(name: &str, config: VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let p2 = config.patch_side * config.patch_side;
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::new(&format!("{name}.blocks.{i}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed: Linear::new(&format!("{name}.patch_embed"), p2, c, rng),
            cls_token: Param::new(format!("{name}.cls_token"), Tensor::randn(&[1, c], 0.02, rng)),
            pos_embed: Param::new(
                format!("{name}.pos_embed"),
                Tensor::randn(&[config.tokens() + 1, c], 0.02, rng),
            ),
            norm: LayerNormParams::new(&format!("{name}.norm"), c),
            blocks,
            config,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    /// Cuts a `[side×side]` image into row-major flattened patches, `[T×p²]`.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let side = self.config.image_side;
        let p = self.config.patch_side;
        if image.shape() != [side, side] {
            return Err(TensorError::ShapeMismatch {
                op: "patchify",
                lhs: image.shape().to_vec(),
                rhs: vec![side, side],
            });
        }
        let per_side = side / p;
        let mut out = Vec::with_capacity(side * side);
        for pr in 0..per_side {
            for pc in 0..per_side {
                for r in 0..p {
                    let start = (pr * p + r) * side + pc * p;
                    out.extend_from_slice(&image.data()[start..start + p]);
                }
            }
        }
        Tensor::new(&[per_side * per_side, p * p], out)
    }
}

impl Parameterized for MiniViT {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.patch_embed.visit(f);
        f(&self.cls_token);
        f(&self.pos_embed);
        for b in &self.blocks {
            b.visit(f);
        }
        self.norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.patch_embed.visit_mut(f);
        f(&mut self.cls_token);
        f(&mut self.pos_embed);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.norm.visit_mut(f);
    }
}

/// Patchify → prepend `[CLS]` → add positional embeddings to `[CLS]` and
/// patch tokens → append `extra_tokens` (no positional embedding) → run the
/// blocks, injecting `prefixes[l]` into block `l` → final LayerNorm.
pub fn vit_forward(
    tape: &mut Tape,
    model: &MiniViT,
    image: &Tensor,
    prefixes: &[LayerPrefix],
    extra_tokens: Option<Var>,
) -> Result<VitOutput> {
    if prefixes.len() > model.depth() {
        return Err(TensorError::Invalid(format!(
            "prefix supplied for layer {} but the model has {} layers",
            prefixes.len() - 1,
            model.depth()
        )));
    }
    let patches = tape.constant(model.patchify(image)?);
    let patch_tokens = model.patch_embed.forward(tape, patches)?;
    let cls = tape.param(&model.cls_token);
    let seq = tape.concat_rows(&[cls, patch_tokens])?;
    let pos = tape.param(&model.pos_embed);
    let mut x = tape.add(seq, pos)?;
    if let Some(extra) = extra_tokens {
        let (k, c) = tape.value(extra)?.dims2()?;
        if c != model.width() {
            return Err(TensorError::ShapeMismatch {
                op: "extra tokens",
                lhs: vec![k, c],
                rhs: vec![1, model.width()],
            });
        }
        if k > 0 {
            x = tape.concat_rows(&[x, extra])?;
        }
    }
    let mut layer_inputs = Vec::with_capacity(model.depth());
    for (l, block) in model.blocks.iter().enumerate() {
        layer_inputs.push(x);
        x = block.forward(tape, x, prefixes.get(l))?;
    }
    let tokens = model.norm.forward(tape, x)?;
    let cls = tape.slice_rows(tokens, 0, 1)?;
    Ok(VitOutput {
        cls,
        tokens,
        layer_inputs,
    })
}
