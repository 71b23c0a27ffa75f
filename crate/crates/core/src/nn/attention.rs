use rand::Rng;

use super::{Linear, Parameterized};
use crate::adapt::LoraPair;
use crate::tensor::{Param, Result, Tape, Tensor, TensorError, Var};

/// Key and value prefix tokens injected into one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPrefix {
    pub keys: Var,
    pub values: Var,
}

impl LayerPrefix {
    /// Splits an `[N×C]` prompt block into its first-half keys and
    /// second-half values.
    pub fn split(tape: &mut Tape, prompt: Var) -> Result<Self> {
        let (n, _) = tape.value(prompt)?.dims2()?;
        if n == 0 || n % 2 != 0 {
            return Err(TensorError::Invalid(format!(
                "prefix length must be even and positive, got {n}"
            )));
        }
        let keys = tape.slice_rows(prompt, 0, n / 2)?;
        let values = tape.slice_rows(prompt, n / 2, n / 2)?;
        Ok(Self { keys, values })
    }

    /// Number of prefix rows per half.
    pub fn len(&self, tape: &Tape) -> Result<usize> {
        Ok(tape.value(self.keys)?.dims2()?.0)
    }
}

/// Multi-head attention with full-width query/key/value projections; head
/// `i` uses columns `i*d..(i+1)*d` of each, which is the per-head
/// `W^i: [C×(C/H)]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub out: Linear,
    pub lora_q: Option<LoraPair>,
    pub lora_v: Option<LoraPair>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        let std = (1.0 / width as f64).sqrt();
        let mut proj = |suffix: &str| {
            Param::new(format!("{name}.{suffix}"), Tensor::randn(&[width, width], std, rng))
        };
        let wq = proj("wq");
        let wk = proj("wk");
        let wv = proj("wv");
        Ok(Self {
            heads,
            wq,
            wk,
            wv,
            out: Linear::new(&format!("{name}.out"), width, width, rng),
            lora_q: None,
            lora_v: None,
        })
    }

    pub fn width(&self) -> usize {
        self.wq.value().shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }
}

impl Parameterized for MultiHeadAttention {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.wq);
        f(&self.wk);
        f(&self.wv);
        self.out.visit(f);
        if let Some(l) = &self.lora_q {
            l.visit(f);
        }
        if let Some(l) = &self.lora_v {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.wq);
        f(&mut self.wk);
        f(&mut self.wv);
        self.out.visit_mut(f);
        if let Some(l) = &mut self.lora_q {
            l.visit_mut(f);
        }
        if let Some(l) = &mut self.lora_v {
            l.visit_mut(f);
        }
    }
}

struct Projection {
    weight: Var,
    lora: Option<(Var, Var, f64)>,
}

impl Projection {
    fn bind(tape: &mut Tape, weight: &Param, lora: Option<&LoraPair>) -> Self {
        Self {
            weight: tape.param(weight),
            lora: lora.map(|l| (tape.param(&l.down), tape.param(&l.up), l.scale)),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        match self.lora {
            None => Ok(y),
            Some((down, up, scale)) => {
                let h = tape.matmul(x, down)?;
                let h = tape.matmul(h, up)?;
                let h = tape.scale(h, scale)?;
                tape.add(y, h)
            }
        }
    }
}

/// Multi-head attention whose keys and values are prefixed with
/// `prefix.keys` / `prefix.values`. Queries come from `x` only, so the
/// output has as many rows as `x`. Prefixed keys take part in the softmax
/// normalisation; scores are scaled by `1/sqrt(head_dim)`.
pub fn attention_with_prefix(
    tape: &mut Tape,
    x: Var,
    prefix: Option<&LayerPrefix>,
    mha: &MultiHeadAttention,
) -> Result<Var> {
    let width = mha.width();
    let (_, c) = tape.value(x)?.dims2()?;
    if c != width {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: tape.shape(x)?.to_vec(),
            rhs: mha.wq.value().shape().to_vec(),
        });
    }
    if let Some(p) = prefix {
        let ks = tape.value(p.keys)?.dims2()?;
        let vs = tape.value(p.values)?.dims2()?;
        if ks.1 != width || vs.1 != width || ks.0 != vs.0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention prefix",
                lhs: vec![ks.0, ks.1],
                rhs: vec![vs.0, vs.1],
            });
        }
    }

    let q_proj = Projection::bind(tape, &mha.wq, mha.lora_q.as_ref());
    let k_proj = Projection::bind(tape, &mha.wk, None);
    let v_proj = Projection::bind(tape, &mha.wv, mha.lora_v.as_ref());

    let q = q_proj.apply(tape, x)?;
    let mut k = k_proj.apply(tape, x)?;
    let mut v = v_proj.apply(tape, x)?;
    if let Some(p) = prefix {
        // Rows of a product are independent, so projecting the prefix rows
        // separately equals projecting the concatenation [P; X].
        let kp = k_proj.apply(tape, p.keys)?;
        let vp = v_proj.apply(tape, p.values)?;
        k = tape.concat_rows(&[kp, k])?;
        v = tape.concat_rows(&[vp, v])?;
    }

    let d = mha.head_dim();
    let inv_sqrt = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(mha.heads);
    for h in 0..mha.heads {
        let qh = tape.slice_cols(q, h * d, d)?;
        let kh = tape.slice_cols(k, h * d, d)?;
        let vh = tape.slice_cols(v, h * d, d)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, inv_sqrt)?;
        let attn = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    mha.out.forward(tape, joined)
}

/// Plain multi-head self-attention.
pub fn self_attention(tape: &mut Tape, x: Var, mha: &MultiHeadAttention) -> Result<Var> {
    attention_with_prefix(tape, x, None, mha)
}
