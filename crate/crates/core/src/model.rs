//! The full set of networks trained together: backbone, frozen prompt
//! encoder, prompt source and prototype bank.

use rand::Rng;

use crate::adapt::{apply_adapter, apply_lora, AdaptationMode};
use crate::dpg::{
    generate_prompts, pool_combine, prompts_from_cls, LowRankMap, PromptLayout, PromptTensor, StageTokenQueue,
    StaticPromptPool,
};
use crate::error::{Error, Result};
use crate::loss::PrototypeBank;
use crate::nn::{vit_forward, LayerPrefix, MiniViT, Parameterized};
use crate::tensor::{Param, Tape, Tensor, Var};

/// Dynamic prompt generator: stage tokens plus the low-rank mapping.
#[derive(Clone, Debug)]
pub struct DynamicPrompts {
    pub queue: StageTokenQueue,
    pub map: LowRankMap,
}

#[derive(Clone, Debug)]
pub enum PromptSource {
    None,
    Dynamic(DynamicPrompts),
    Pool(StaticPromptPool),
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub backbone: MiniViT,
    pub encoder: MiniViT,
    pub prompts: PromptSource,
    pub layout: PromptLayout,
    pub bank: PrototypeBank,
    pub adaptation: AdaptationMode,
}

/// Copies `model` with every parameter name prefix `from` replaced by `to`.
pub fn rename_model(model: &MiniViT, from: &str, to: &str) -> MiniViT {
    let mut out = model.clone();
    out.visit_mut(&mut |p: &mut Param| {
        let name = p.name().strip_prefix(from).map(|rest| format!("{to}{rest}"));
        if let Some(name) = name {
            *p = Param::new(name, p.value().clone());
        }
    });
    out
}

impl ModelBundle {
    /// Builds a bundle around a pretrained backbone. The encoder is a frozen
    /// copy of the same weights under the `encoder.` namespace.
    pub fn new<R: Rng + ?Sized>(
        pretrained: &MiniViT,
        prompts: PromptSource,
        layout: PromptLayout,
        adaptation: AdaptationMode,
        rng: &mut R,
    ) -> Result<Self> {
        adaptation.validate()?;
        layout.validate()?;
        let prefix = pretrained
            .patch_embed
            .weight
            .name()
            .split('.')
            .next()
            .unwrap_or_default()
            .to_string();
        let mut backbone = rename_model(pretrained, &format!("{prefix}."), "backbone.");
        let encoder = rename_model(pretrained, &format!("{prefix}."), "encoder.");
        if !matches!(prompts, PromptSource::None) {
            if layout.width != backbone.width() {
                return Err(Error::Config(format!(
                    "prompt width {} does not match backbone width {}",
                    layout.width,
                    backbone.width()
                )));
            }
            if layout.layers > backbone.depth() {
                return Err(Error::Config(format!(
                    "prompts for {} layers but the backbone has {}",
                    layout.layers,
                    backbone.depth()
                )));
            }
        }
        match &adaptation {
            AdaptationMode::Lora { rank, alpha, targets } => {
                for block in &mut backbone.blocks {
                    apply_lora(&mut block.attn, *rank, *alpha, targets, rng)?;
                }
            }
            AdaptationMode::Adapter { bottleneck } => {
                for block in &mut backbone.blocks {
                    apply_adapter(block, *bottleneck, rng)?;
                }
            }
            AdaptationMode::Freeze | AdaptationMode::FullFt => {}
        }
        let bank = PrototypeBank::new(backbone.width());
        Ok(Self {
            backbone,
            encoder,
            prompts,
            layout,
            bank,
            adaptation,
        })
    }

    pub fn queue(&self) -> Option<&StageTokenQueue> {
        match &self.prompts {
            PromptSource::Dynamic(d) => Some(&d.queue),
            _ => None,
        }
    }

    pub fn queue_mut(&mut self) -> Option<&mut StageTokenQueue> {
        match &mut self.prompts {
            PromptSource::Dynamic(d) => Some(&mut d.queue),
            _ => None,
        }
    }

    /// Whether the encoder `[CLS]` of an image is fixed for the whole stage,
    /// so it may be computed once and reused.
    pub fn encoder_cls_is_static(&self) -> bool {
        match &self.prompts {
            PromptSource::None => false,
            PromptSource::Pool(_) => true,
            PromptSource::Dynamic(d) => d.queue.tokens().iter().all(|t| t.frozen),
        }
    }

    /// Frozen-encoder `[CLS]` of `image` with the current stage tokens.
    pub fn encoder_cls(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let extra = match self.queue() {
            Some(q) => crate::dpg::bind_stage_tokens(&mut tape, q)?,
            None => None,
        };
        let out = vit_forward(&mut tape, &self.encoder, image, &[], extra)?;
        Ok(tape.value(out.cls)?.clone())
    }

    /// Prompts for one image. `cached_cls`, when given, replaces the encoder
    /// pass and must equal [`Self::encoder_cls`] for the image.
    pub fn prompts_for<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        cached_cls: Option<&Tensor>,
        training: bool,
        rng: &mut R,
    ) -> Result<Option<PromptTensor>> {
        let cls_var = |tape: &mut Tape| -> Result<Var> {
            match cached_cls {
                Some(c) => Ok(tape.constant(c.clone())),
                None => {
                    let t = self.encoder_cls(image)?;
                    Ok(tape.constant(t))
                }
            }
        };
        match &self.prompts {
            PromptSource::None => Ok(None),
            PromptSource::Pool(pool) => {
                let q = cls_var(tape)?;
                Ok(Some(pool_combine(tape, q, pool, self.layout)?))
            }
            PromptSource::Dynamic(d) => {
                if cached_cls.is_some() || d.queue.tokens().iter().all(|t| t.frozen) {
                    let cls = cls_var(tape)?;
                    Ok(Some(prompts_from_cls(tape, cls, &d.map, self.layout, training, rng)?))
                } else {
                    Ok(Some(generate_prompts(
                        tape,
                        image,
                        &d.queue,
                        &self.encoder,
                        &d.map,
                        self.layout,
                        training,
                        rng,
                    )?))
                }
            }
        }
    }

    /// Backbone `[CLS]` embedding, `[1×C]`, with prompts injected.
    pub fn embed<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        cached_cls: Option<&Tensor>,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let prompts = self.prompts_for(tape, image, cached_cls, training, rng)?;
        let prefixes: Vec<LayerPrefix> = prompts.map(|p| p.layers).unwrap_or_default();
        let out = vit_forward(tape, &self.backbone, image, &prefixes, None)?;
        Ok(out.cls)
    }

    /// Inference embedding as a plain vector.
    pub fn embed_eval(&self, image: &Tensor, cached_cls: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut no_dropout = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let v = self.embed(&mut tape, image, cached_cls, false, &mut no_dropout)?;
        Ok(tape.value(v)?.data().to_vec())
    }
}

impl Parameterized for ModelBundle {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.backbone.visit(f);
        self.encoder.visit(f);
        match &self.prompts {
            PromptSource::None => {}
            PromptSource::Dynamic(d) => {
                for t in d.queue.tokens() {
                    f(&t.token);
                }
                d.map.visit(f);
            }
            PromptSource::Pool(p) => p.visit(f),
        }
        self.bank.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_mut(f);
        self.encoder.visit_mut(f);
        match &mut self.prompts {
            PromptSource::None => {}
            PromptSource::Dynamic(d) => {
                for t in d.queue.tokens_mut() {
                    f(&mut t.token);
                }
                d.map.visit_mut(f);
            }
            PromptSource::Pool(p) => p.visit_mut(f),
        }
        self.bank.visit_mut(f);
    }
}
