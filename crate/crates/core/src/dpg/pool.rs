use rand::Rng;

use super::{reshape_prompts, PromptLayout, PromptTensor};
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::tensor::{Param, Tape, Tensor, Var};

/// Fixed set of prompt components combined by cosine attention over keys.
#[derive(Clone, Debug)]
pub struct StaticPromptPool {
    pub keys: Param,
    pub components: Param,
}

impl StaticPromptPool {
    pub fn new<R: Rng + ?Sized>(size: usize, key_width: usize, layout: PromptLayout, rng: &mut R) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("prompt pool must hold at least one component".into()));
        }
        Ok(Self {
            keys: Param::new("pool.keys", Tensor::randn(&[size, key_width], 1.0, rng)),
            components: Param::new("pool.components", Tensor::randn(&[size, layout.numel()], 1.0, rng)),
        })
    }

    pub fn size(&self) -> usize {
        self.keys.value().shape()[0]
    }
}

impl Parameterized for StaticPromptPool {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.keys);
        f(&self.components);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.keys);
        f(&mut self.components);
    }
}

/// Softmax over `cos(query, key_j)` (temperature 1) weights the components;
/// the weighted sum is reshaped like a generated prompt.
pub fn pool_combine(
    tape: &mut Tape,
    cls_query: Var,
    pool: &StaticPromptPool,
    layout: PromptLayout,
) -> Result<PromptTensor> {
    if pool.size() == 0 {
        return Err(Error::Config("prompt pool is empty".into()));
    }
    let width = pool.components.value().shape()[1];
    if width != layout.numel() {
        return Err(Error::Config(format!(
            "pool component width {width} does not match prompt layout size {}",
            layout.numel()
        )));
    }
    let q = tape.normalize_rows(cls_query)?;
    let keys = tape.param(&pool.keys);
    let keys = tape.normalize_rows(keys)?;
    let cos = tape.matmul_nt(q, keys)?;
    let weights = tape.softmax_rows(cos)?;
    let comps = tape.param(&pool.components);
    let flat = tape.matmul(weights, comps)?;
    reshape_prompts(tape, flat, layout)
}
