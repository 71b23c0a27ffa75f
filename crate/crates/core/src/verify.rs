//! Self-contained property suite: gradient checks, attention and mapping
//! oracles, rank and parameter accounting, queue semantics, metric oracles,
//! freezing and checkpoint contracts.
//!
//! Each property returns a short detail string on success and a reason on
//! failure.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{apply_adapter, apply_lora, LoraTarget};
use crate::data::SyntheticSpec;
use crate::dpg::{
    count_mapping_params, mapping_forward, reshape_prompts, CountConvention, EvictionPolicy, LowRankMap,
    MappingRank, PromptLayout, StageTokenQueue,
};
use crate::driver::{load_checkpoint, save_checkpoint, Experiment, ExperimentConfig, PretrainConfig, PromptConfig};
use crate::error::{Error, Result};
use crate::eval::{avg_recall, forgetting, recall_at_1, EmbeddingSet, EmbeddingSource};
use crate::loss::{arcface_loss, ArcFaceParams};
use crate::nn::{
    attention_with_prefix, dropout_forward, self_attention, LayerNormParams, LayerPrefix, Linear,
    MultiHeadAttention, Parameterized, TransformerBlock, VitConfig,
};
use crate::tensor::{grad_check, Learnable, Tape, Tensor, Var};

/// Deliberate defects used to show that the suite catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// LoRA `up` matrices start nonzero instead of zero.
    LoraNonzeroInit,
}

impl std::str::FromStr for Mutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora_nonzero_init" => Ok(Self::LoraNonzeroInit),
            other => Err(Error::Config(format!("unknown mutation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub mutation: Option<Mutation>,
}

type Check = fn(&VerifyOptions) -> std::result::Result<String, String>;

pub struct Property {
    pub name: &'static str,
    pub summary: &'static str,
    check: Check,
}

impl Property {
    pub fn run(&self, opts: &VerifyOptions) -> PropertyResult {
        let outcome = (self.check)(opts);
        PropertyResult {
            name: self.name,
            passed: outcome.is_ok(),
            detail: outcome.unwrap_or_else(|e| e),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn properties() -> Vec<Property> {
    vec![
        Property {
            name: "gradcheck",
            summary: "central differences for every differentiable component",
            check: check_gradients,
        },
        Property {
            name: "prefix_oracle",
            summary: "prefix attention equals explicit key/value concatenation",
            check: check_prefix_oracle,
        },
        Property {
            name: "mapping_fidelity",
            summary: "mapping composition order and prompt reshaping",
            check: check_mapping_fidelity,
        },
        Property {
            name: "rank_svd",
            summary: "singular values of the low-rank mapping",
            check: check_rank_svd,
        },
        Property {
            name: "param_counts",
            summary: "mapping and LoRA parameter accounting",
            check: check_param_counts,
        },
        Property {
            name: "zero_init",
            summary: "LoRA and adapter leave the base output unchanged at init",
            check: check_zero_init,
        },
        Property {
            name: "queue_semantics",
            summary: "stage-token queue bounds, eviction sets and freezing",
            check: check_queue_semantics,
        },
        Property {
            name: "metric_oracles",
            summary: "forgetting, average recall and brute-force Recall@1",
            check: check_metric_oracles,
        },
        Property {
            name: "freeze_integrity",
            summary: "frozen tensors and stage data access during training",
            check: check_freeze_integrity,
        },
        Property {
            name: "checkpoint_roundtrip",
            summary: "checkpoint bytes and resumed runs",
            check: check_checkpoint_roundtrip,
        },
    ]
}

/// Runs every property whose name contains `only` (all when `None`).
pub fn run_suite(only: Option<&str>, opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    let selected: Vec<Property> = properties()
        .into_iter()
        .filter(|p| only.is_none_or(|o| p.name.contains(o)))
        .collect();
    if selected.is_empty() {
        return Err(Error::Config(format!(
            "no property matches {:?}",
            only.unwrap_or_default()
        )));
    }
    Ok(selected.iter().map(|p| p.run(opts)).collect())
}

fn fail<T>(msg: impl Into<String>) -> std::result::Result<T, String> {
    Err(msg.into())
}

fn ok_or_msg<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn tensor_ok<T>(r: crate::tensor::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

const GRAD_SEEDS: u64 = 10;
const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-6;

/// `Σ y ⊙ w` for a fixed random `w`, a scalar with a generic gradient.
fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> crate::tensor::Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Worst relative error between tape gradients of every tensor in `model`
/// and central differences of `f`.
pub fn param_grad_check<M, F>(model: &mut M, f: F, eps: f64) -> Result<f64>
where
    M: Parameterized,
    F: Fn(&mut Tape, &M) -> Result<Var>,
{
    let mut tape = Tape::with_learnable(Learnable::All);
    let out = f(&mut tape, model)?;
    let grads = tape.backward(out)?.into_params();
    let mut names = Vec::new();
    model.visit(&mut |p| names.push((p.name().to_string(), p.value().len())));
    let eval = |m: &M| -> Result<f64> {
        let mut t = Tape::new();
        let y = f(&mut t, m)?;
        Ok(t.value(y)?.item())
    };
    let nudge = |m: &mut M, name: &str, i: usize, delta: f64| {
        m.visit_mut(&mut |p| {
            if p.name() == name {
                p.value_mut().data_mut()[i] += delta;
            }
        })
    };
    let mut worst: f64 = 0.0;
    for (name, len) in names {
        let analytic = grads
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, g)| g.clone())
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        for i in 0..len {
            let orig = {
                let mut v = 0.0;
                model.visit(&mut |p| {
                    if p.name() == name {
                        v = p.value().data()[i];
                    }
                });
                v
            };
            nudge(model, &name, i, eps);
            let plus = eval(model)?;
            nudge(model, &name, i, -2.0 * eps);
            let minus = eval(model)?;
            model.visit_mut(&mut |p| {
                if p.name() == name {
                    p.value_mut().data_mut()[i] = orig;
                }
            });
            let fd = (plus - minus) / (2.0 * eps);
            worst = worst.max((analytic.data()[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn randomize_zero_init<M: Parameterized>(m: &mut M, rng: &mut ChaCha8Rng) {
    m.visit_mut(&mut |p| {
        if p.name().ends_with(".up") || p.name().ends_with(".up.weight") {
            let shape = p.value().shape().to_vec();
            p.set(Tensor::randn(&shape, 0.5, rng));
        }
    });
}

fn check_gradients(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(err),
        None => worst.push((name, err)),
    };
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);

        let mut lin = Linear::new("lin", 5, 3, &mut rng);
        lin.bias.set(Tensor::randn(&[3], 0.5, &mut rng));
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let fx = |t: &mut Tape, v: Var, l: &Linear| -> crate::tensor::Result<Var> {
            let y = l.forward(t, v)?;
            let y2 = t.mul(y, y)?;
            weighted_sum(t, y2, &w)
        };
        record("linear", tensor_ok(grad_check(|t, v| fx(t, v, &lin), &x, GRAD_EPS))?);
        let xc = x.clone();
        record(
            "linear",
            ok_or_msg(param_grad_check(
                &mut lin,
                |t, l| {
                    let v = t.constant(xc.clone());
                    Ok(fx(t, v, l)?)
                },
                GRAD_EPS,
            ))?,
        );

        let mut ln = LayerNormParams::new("ln", 6);
        ln.gamma.set(Tensor::randn(&[6], 1.0, &mut rng));
        ln.beta.set(Tensor::randn(&[6], 1.0, &mut rng));
        let x = Tensor::randn(&[3, 6], 2.0, &mut rng);
        let w = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let fl = |t: &mut Tape, v: Var, l: &LayerNormParams| -> crate::tensor::Result<Var> {
            let y = l.forward(t, v)?;
            weighted_sum(t, y, &w)
        };
        record("layernorm", tensor_ok(grad_check(|t, v| fl(t, v, &ln), &x, GRAD_EPS))?);
        let xc = x.clone();
        record(
            "layernorm",
            ok_or_msg(param_grad_check(
                &mut ln,
                |t, l| {
                    let v = t.constant(xc.clone());
                    Ok(fl(t, v, l)?)
                },
                GRAD_EPS,
            ))?,
        );

        let mut mha = tensor_ok(MultiHeadAttention::new("attn", 6, 2, &mut rng))?;
        mha.out.bias.set(Tensor::randn(&[6], 0.5, &mut rng));
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let prefix = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let fa = |t: &mut Tape, v: Var, m: &MultiHeadAttention| -> crate::tensor::Result<Var> {
            let y = self_attention(t, v, m)?;
            weighted_sum(t, y, &w)
        };
        let fp = |t: &mut Tape, v: Var, p: Var, m: &MultiHeadAttention| -> crate::tensor::Result<Var> {
            let pre = LayerPrefix::split(t, p)?;
            let y = attention_with_prefix(t, v, Some(&pre), m)?;
            weighted_sum(t, y, &w)
        };
        record("attention", tensor_ok(grad_check(|t, v| fa(t, v, &mha), &x, GRAD_EPS))?);
        let xc = x.clone();
        record(
            "attention",
            ok_or_msg(param_grad_check(
                &mut mha,
                |t, m| {
                    let v = t.constant(xc.clone());
                    Ok(fa(t, v, m)?)
                },
                GRAD_EPS,
            ))?,
        );
        let pc = prefix.clone();
        record(
            "attention_prefix",
            tensor_ok(grad_check(
                |t, v| {
                    let p = t.constant(pc.clone());
                    fp(t, v, p, &mha)
                },
                &x,
                GRAD_EPS,
            ))?,
        );
        let xc = x.clone();
        record(
            "attention_prefix",
            tensor_ok(grad_check(
                |t, p| {
                    let v = t.constant(xc.clone());
                    fp(t, v, p, &mha)
                },
                &prefix,
                GRAD_EPS,
            ))?,
        );
        record(
            "attention_prefix",
            ok_or_msg(param_grad_check(
                &mut mha,
                |t, m| {
                    let v = t.constant(xc.clone());
                    let p = t.constant(pc.clone());
                    Ok(fp(t, v, p, m)?)
                },
                GRAD_EPS,
            ))?,
        );

        let mut map = ok_or_msg(LowRankMap::new(5, 12, MappingRank::Low(3), 0.0, &mut rng))?;
        map.ln.gamma.set(Tensor::randn(&[12], 1.0, &mut rng));
        map.ln.beta.set(Tensor::randn(&[12], 1.0, &mut rng));
        let x = Tensor::randn(&[1, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[1, 12], 1.0, &mut rng);
        let fm = |t: &mut Tape, v: Var, m: &LowRankMap| -> Result<Var> {
            let y = mapping_forward(t, m, v, false, &mut ChaCha8Rng::seed_from_u64(0))?;
            Ok(weighted_sum(t, y, &w)?)
        };
        record(
            "mapping",
            tensor_ok(grad_check(
                |t, v| fm(t, v, &map).map_err(|e| crate::tensor::TensorError::Invalid(e.to_string())),
                &x,
                GRAD_EPS,
            ))?,
        );
        let xc = x.clone();
        record(
            "mapping",
            ok_or_msg(param_grad_check(
                &mut map,
                |t, m| {
                    let v = t.constant(xc.clone());
                    fm(t, v, m)
                },
                GRAD_EPS,
            ))?,
        );

        let mut lora = tensor_ok(MultiHeadAttention::new("attn", 6, 2, &mut rng))?;
        tensor_ok(apply_lora(&mut lora, 2, 4.0, &[LoraTarget::Query, LoraTarget::Value], &mut rng))?;
        randomize_zero_init(&mut lora, &mut rng);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let xc = x.clone();
        let pc = prefix.clone();
        record(
            "lora",
            tensor_ok(grad_check(
                |t, v| {
                    let p = t.constant(pc.clone());
                    fp(t, v, p, &lora)
                },
                &x,
                GRAD_EPS,
            ))?,
        );
        record(
            "lora",
            ok_or_msg(param_grad_check(
                &mut lora,
                |t, m| {
                    let v = t.constant(xc.clone());
                    let p = t.constant(pc.clone());
                    Ok(fp(t, v, p, m)?)
                },
                GRAD_EPS,
            ))?,
        );

        let cfg = VitConfig {
            image_side: 8,
            patch_side: 4,
            width: 6,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        let mut block = tensor_ok(TransformerBlock::new("blk", &cfg, &mut rng))?;
        tensor_ok(apply_adapter(&mut block, 3, &mut rng))?;
        randomize_zero_init(&mut block, &mut rng);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let fb = |t: &mut Tape, v: Var, b: &TransformerBlock| -> crate::tensor::Result<Var> {
            let y = b.forward(t, v, None)?;
            weighted_sum(t, y, &w)
        };
        record("adapter", tensor_ok(grad_check(|t, v| fb(t, v, &block), &x, GRAD_EPS))?);
        let xc = x.clone();
        record(
            "adapter",
            ok_or_msg(param_grad_check(
                &mut block,
                |t, b| {
                    let v = t.constant(xc.clone());
                    Ok(fb(t, v, b)?)
                },
                GRAD_EPS,
            ))?,
        );

        let protos = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let emb = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let label = rng.random_range(0..4);
        let params = ArcFaceParams::default();
        let pc = protos.clone();
        record(
            "arcface",
            tensor_ok(grad_check(
                |t, e| {
                    let p = t.constant(pc.clone());
                    arcface_loss(t, e, label, p, params)
                        .map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))
                },
                &emb,
                GRAD_EPS,
            ))?,
        );
        let ec = emb.clone();
        record(
            "arcface",
            tensor_ok(grad_check(
                |t, p| {
                    let e = t.constant(ec.clone());
                    arcface_loss(t, e, label, p, params)
                        .map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))
                },
                &protos,
                GRAD_EPS,
            ))?,
        );
    }
    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, e)| !(*e < GRAD_TOL))
        .map(|(n, e)| format!("{n} ({e:.2e})"))
        .collect();
    let summary = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    if bad.is_empty() {
        Ok(format!("{GRAD_SEEDS} seeds, worst relative error: {summary}"))
    } else {
        fail(format!("relative error >= {GRAD_TOL:e}: {}", bad.join(", ")))
    }
}

/// Attention over explicit `[P; X]` keys and values, in plain loops.
fn attention_oracle(x: &Tensor, prefix: Option<(&Tensor, &Tensor)>, mha: &MultiHeadAttention) -> Tensor {
    let proj = |m: &Tensor, w: &Tensor| m.matmul(w).expect("widths agree");
    let q = proj(x, mha.wq.value());
    let mut krows: Vec<Vec<f64>> = Vec::new();
    let mut vrows: Vec<Vec<f64>> = Vec::new();
    let (t, c) = x.dims2().expect("rank 2");
    if let Some((pk, pv)) = prefix {
        let kp = proj(pk, mha.wk.value());
        let vp = proj(pv, mha.wv.value());
        for i in 0..kp.shape()[0] {
            krows.push(kp.row(i).to_vec());
            vrows.push(vp.row(i).to_vec());
        }
    }
    let k = proj(x, mha.wk.value());
    let v = proj(x, mha.wv.value());
    for i in 0..t {
        krows.push(k.row(i).to_vec());
        vrows.push(v.row(i).to_vec());
    }
    let d = mha.head_dim();
    let mut joined = vec![0.0; t * c];
    for h in 0..mha.heads {
        for i in 0..t {
            let qi = &q.row(i)[h * d..(h + 1) * d];
            let scores: Vec<f64> = krows
                .iter()
                .map(|kr| qi.iter().zip(&kr[h * d..(h + 1) * d]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..d {
                joined[i * c + h * d + j] = e.iter().zip(&vrows).map(|(a, vr)| a / z * vr[h * d + j]).sum();
            }
        }
    }
    let joined = Tensor::new(&[t, c], joined).expect("t*c");
    let mut out = joined.matmul(mha.out.weight.value()).expect("widths agree");
    let bias = mha.out.bias.value().data().to_vec();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o += bias[i % c];
    }
    out
}

fn check_prefix_oracle(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let head_dim = rng.random_range(1..=4);
        let c = heads * head_dim;
        let t = rng.random_range(1..=9);
        let n = rng.random_range(1..=6);
        let mut mha = tensor_ok(MultiHeadAttention::new("a", c, heads, &mut rng))?;
        mha.out.bias.set(Tensor::randn(&[c], 0.3, &mut rng));
        let x = Tensor::randn(&[t, c], 1.0, &mut rng);
        let pk = Tensor::randn(&[n, c], 1.0, &mut rng);
        let pv = Tensor::randn(&[n, c], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pre = LayerPrefix {
            keys: tape.constant(pk.clone()),
            values: tape.constant(pv.clone()),
        };
        let y = tensor_ok(attention_with_prefix(&mut tape, xv, Some(&pre), &mha))?;
        let got = tensor_ok(tape.value(y))?.clone();
        let want = attention_oracle(&x, Some((&pk, &pv)), &mha);
        let err = got.max_abs_diff(&want);
        if !(err <= 1e-9) {
            return fail(format!("case {case} (T={t}, N={n}, H={heads}): max abs diff {err:e}"));
        }
        worst = worst.max(err);

        let plain = tensor_ok(self_attention(&mut tape, xv, &mha))?;
        let empty = tensor_ok(attention_with_prefix(&mut tape, xv, None, &mha))?;
        if !tensor_ok(tape.value(plain))?.bit_eq(tensor_ok(tape.value(empty))?) {
            return fail(format!("case {case}: empty prefix differs from plain attention"));
        }
        let no_prefix = attention_oracle(&x, None, &mha);
        let err = tensor_ok(tape.value(empty))?.max_abs_diff(&no_prefix);
        if !(err <= 1e-9) {
            return fail(format!("case {case}: unprefixed attention off by {err:e}"));
        }
    }
    Ok(format!("100 instances, max abs diff {worst:.1e}; empty prefix bit-identical"))
}

fn dense_layernorm(h: &Tensor, ln: &LayerNormParams) -> Tensor {
    let (rows, c) = h.dims2().expect("rank 2");
    let mut out = Vec::with_capacity(rows * c);
    for r in 0..rows {
        let row = h.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..c {
            out.push((row[j] - mean) * inv * ln.gamma.value().data()[j] + ln.beta.value().data()[j]);
        }
    }
    Tensor::new(&[rows, c], out).expect("rows*c")
}

fn check_mapping_fidelity(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for (c_in, c_out) in [(8, 20), (16, 48), (12, 12)] {
        let mut map = ok_or_msg(LowRankMap::new(c_in, c_out, MappingRank::Full, 0.3, &mut rng))?;
        map.ln.gamma.set(Tensor::randn(&[c_out], 1.0, &mut rng));
        map.ln.beta.set(Tensor::randn(&[c_out], 1.0, &mut rng));
        let x = Tensor::randn(&[1, c_in], 1.0, &mut rng);
        let dense = map.effective_weight();

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = ok_or_msg(mapping_forward(&mut tape, &map, xv, false, &mut rng))?;
        let want = dense_layernorm(&tensor_ok(x.matmul(&dense))?, &map.ln);
        let err = tensor_ok(tape.value(y))?.max_abs_diff(&want);
        if !(err <= 1e-9) {
            return fail(format!("dropout-off full-rank mapping {c_in}->{c_out} off by {err:e}"));
        }
        worst = worst.max(err);

        // Training mode: dropout must act on the input, before A·Bᵀ.
        let seed = rng.random::<u64>();
        let mut t2 = Tape::new();
        let xv = t2.constant(x.clone());
        let y = ok_or_msg(mapping_forward(&mut t2, &map, xv, true, &mut ChaCha8Rng::seed_from_u64(seed)))?;
        let xd = tensor_ok(dropout_forward(
            &mut t2,
            xv,
            map.dropout_p,
            true,
            &mut ChaCha8Rng::seed_from_u64(seed),
        ))?;
        let xd = tensor_ok(t2.value(xd))?.clone();
        let want = dense_layernorm(&tensor_ok(xd.matmul(&dense))?, &map.ln);
        let err = tensor_ok(t2.value(y))?.max_abs_diff(&want);
        if !(err <= 1e-9) {
            return fail(format!("dropout is not applied before the projection ({err:e})"));
        }
    }

    for (np, c, l) in [(8, 64, 3), (8, 768, 5)] {
        let layout = PromptLayout {
            prompts_per_layer: np,
            width: c,
            layers: l,
        };
        let flat = Tensor::new(&[1, layout.numel()], (0..layout.numel()).map(|i| i as f64).collect())
            .map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let fv = tape.constant(flat);
        let prompts = ok_or_msg(reshape_prompts(&mut tape, fv, layout))?;
        if prompts.layers.len() != l {
            return fail(format!("layout ({np},{c},{l}) produced {} layers", prompts.layers.len()));
        }
        for (layer, pre) in prompts.layers.iter().enumerate() {
            let keys = tensor_ok(tape.value(pre.keys))?;
            let values = tensor_ok(tape.value(pre.values))?;
            if keys.shape() != [np / 2, c] || values.shape() != [np / 2, c] {
                return fail(format!("layout ({np},{c},{l}) layer {layer}: halves have wrong shapes"));
            }
            for n in 0..np {
                let (half, row) = if n < np / 2 { (keys, n) } else { (values, n - np / 2) };
                for ch in 0..c {
                    let want = (n * c * l + ch * l + layer) as f64;
                    if half.get2(row, ch) != want {
                        return fail(format!(
                            "layout ({np},{c},{l}): prompt {n} channel {ch} layer {layer} holds {} not {want}",
                            half.get2(row, ch)
                        ));
                    }
                }
            }
        }
    }
    Ok(format!(
        "dense oracle within {worst:.1e}; dropout precedes A·Bᵀ; layouts (8,64,3) and (8,768,5) reshape and halve correctly"
    ))
}

fn singular_values_above(t: &Tensor, threshold: f64) -> usize {
    let (r, c) = t.dims2().expect("rank 2");
    let m = DMatrix::from_row_slice(r, c, t.data());
    m.singular_values().iter().filter(|&&s| s > threshold).count()
}

fn check_rank_svd(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layout = |np, width, layers| PromptLayout {
        prompts_per_layer: np,
        width,
        layers,
    };
    let mut lines = Vec::new();
    for (label, layout) in [("small", layout(2, 384, 1)), ("vit_b", layout(2, 768, 1))] {
        let c_in = layout.width;
        let c_out = layout.numel();
        for r in [3usize, 64, 256] {
            let map = ok_or_msg(LowRankMap::new(c_in, c_out, MappingRank::Low(r), 0.0, &mut rng))?;
            let count = singular_values_above(&map.effective_weight(), 1e-10);
            if count > r {
                return fail(format!("{label} {c_in}x{c_out} R={r}: {count} singular values above 1e-10"));
            }
            lines.push(format!("{label} R={r}: {count}"));
        }
    }
    // The unrestricted mode must not lose rank.
    let desk = layout(8, 64, 3);
    let full = ok_or_msg(LowRankMap::new(64, desk.numel(), MappingRank::Full, 0.0, &mut rng))?;
    let count = singular_values_above(&full.effective_weight(), 1e-10);
    if count != 64 {
        return fail(format!("full-rank 64x{} mapping has {count} nonzero singular values", desk.numel()));
    }
    lines.push(format!("desk full: {count}"));
    Ok(lines.join(", "))
}

/// Published mapping sizes in units of 0.1M, by rank.
const TABLE3: [(usize, u64); 4] = [(64, 20), (128, 39), (256, 79), (768, 235)];

fn check_param_counts(_: &VerifyOptions) -> std::result::Result<String, String> {
    let c_out = 8 * 768 * 5;
    let expected_exact = [(64, 1_966_080), (128, 3_932_160), (256, 7_864_320), (768, 23_592_960)];
    for ((rank, exact), (_, tenths)) in expected_exact.iter().zip(TABLE3) {
        let got = count_mapping_params(768, c_out, *rank, CountConvention::OutputFactor);
        if got != *exact {
            return fail(format!("rank {rank}: counted {got}, expected {exact}"));
        }
        // Within one unit of the last printed decimal.
        let diff = (got as i64 - tenths as i64 * 100_000).unsigned_abs();
        if diff >= 100_000 {
            return fail(format!("rank {rank}: {got} is not {:.1}M at one decimal", tenths as f64 / 10.0));
        }
    }
    let full = count_mapping_params(768, c_out, 256, CountConvention::Full);
    if full != 8_122_368 {
        return fail(format!("full-convention count at R=256 is {full}, expected 8122368"));
    }
    let lora: usize = 12 * 2 * {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mha = tensor_ok(MultiHeadAttention::new("a", 768, 12, &mut rng))?;
        let before = mha.param_count();
        tensor_ok(apply_lora(&mut mha, 2, 4.0, &[LoraTarget::Query, LoraTarget::Value], &mut rng))?;
        (mha.param_count() - before) / 2
    };
    if lora != 73_728 {
        return fail(format!("LoRA q,v r=2 at C=768, depth 12 counts {lora}, expected 73728"));
    }
    Ok("R·C_out = 1966080 / 3932160 / 7864320 / 23592960 (2.0M / 3.9M / 7.9M / 23.5M); LoRA 73728".into())
}

fn check_zero_init(opts: &VerifyOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = VitConfig {
        image_side: 8,
        patch_side: 4,
        width: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    };
    let base = tensor_ok(TransformerBlock::new("blk", &cfg, &mut rng))?;
    let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let run = |b: &TransformerBlock| -> std::result::Result<Tensor, String> {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = tensor_ok(b.forward(&mut t, v, None))?;
        Ok(tensor_ok(t.value(y))?.clone())
    };
    let want = run(&base)?;

    let mut lora = base.clone();
    tensor_ok(apply_lora(&mut lora.attn, 2, 4.0, &[LoraTarget::Query, LoraTarget::Value], &mut rng))?;
    if opts.mutation == Some(Mutation::LoraNonzeroInit) {
        randomize_zero_init(&mut lora, &mut rng);
    }
    if !run(&lora)?.bit_eq(&want) {
        return fail("LoRA-augmented block output differs from the base block at initialisation");
    }
    let mut adapter = base.clone();
    tensor_ok(apply_adapter(&mut adapter, 2, &mut rng))?;
    if !run(&adapter)?.bit_eq(&want) {
        return fail("adapter-augmented block output differs from the base block at initialisation");
    }
    Ok("LoRA and adapter outputs bit-identical to the base block".into())
}

fn expected_survivors(policy: EvictionPolicy, capacity: usize, stages: &[usize]) -> Option<Vec<usize>> {
    if stages.len() <= capacity {
        return Some(stages.to_vec());
    }
    match policy {
        EvictionPolicy::Fifo => Some(stages[stages.len() - capacity..].to_vec()),
        EvictionPolicy::Filo => {
            let mut s = stages[..capacity - 1].to_vec();
            s.push(*stages.last().expect("nonempty"));
            Some(s)
        }
        EvictionPolicy::Random => None,
    }
}

/// A tiny configuration that trains in well under a second per stage.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        stages: 3,
        epochs: 1,
        batch_size: 4,
        lr: 1e-2,
        data: SyntheticSpec {
            num_train_classes: 6,
            num_test_classes: 3,
            samples_per_class: 3,
            image_side: 8,
            ..SyntheticSpec::default()
        },
        model: VitConfig {
            image_side: 8,
            patch_side: 4,
            width: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        },
        pretrain: PretrainConfig {
            classes: 4,
            samples_per_class: 2,
            epochs: 1,
            batch_size: 4,
            ..PretrainConfig::default()
        },
        prompt: PromptConfig {
            per_layer: 2,
            layers: 1,
            pool_size: 3,
        },
        mapping: crate::driver::MappingConfig {
            rank: MappingRank::Low(2),
            ..Default::default()
        },
        queue: crate::driver::QueueConfig {
            capacity: 2,
            policy: EvictionPolicy::Fifo,
        },
        ..ExperimentConfig::default()
    }
}

fn check_queue_semantics(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let policies = [EvictionPolicy::Fifo, EvictionPolicy::Filo, EvictionPolicy::Random];
    for case in 0..1000 {
        let capacity = rng.random_range(1..=8);
        let policy = policies[case % 3];
        let n = rng.random_range(1..=20);
        let mut q = StageTokenQueue::new(capacity, policy, 2, rng.random());
        let mut inserted = Vec::new();
        for stage in 1..=n {
            let before: BTreeSet<usize> = q.stages().into_iter().collect();
            let evicted = ok_or_msg(q.advance(stage, Tensor::zeros(&[1, 2])))?;
            inserted.push(stage);
            if q.len() > capacity {
                return fail(format!("case {case}: {} tokens exceed capacity {capacity}", q.len()));
            }
            let after: BTreeSet<usize> = q.stages().into_iter().collect();
            let mut expect = before.clone();
            expect.insert(stage);
            if let Some(e) = evicted {
                if !before.contains(&e) || !expect.remove(&e) {
                    return fail(format!("case {case}: evicted stage {e} was not queued"));
                }
            }
            if after != expect {
                return fail(format!("case {case}: queue {after:?} after inserting {stage}, expected {expect:?}"));
            }
            if q.current().map(|t| t.stage) != Some(stage) {
                return fail(format!("case {case}: newest stage {stage} is not current"));
            }
            q.freeze_all();
        }
        let got = q.stages();
        if let Some(want) = expected_survivors(policy, capacity, &inserted) {
            if got != want {
                return fail(format!("case {case}: {policy:?} q={capacity} kept {got:?}, expected {want:?}"));
            }
        } else if got.len() != capacity.min(n) || !got.contains(&n) {
            return fail(format!("case {case}: random eviction kept {got:?}"));
        }
    }
    for (policy, want) in [(EvictionPolicy::Fifo, vec![3, 4, 5, 6, 7]), (EvictionPolicy::Filo, vec![1, 2, 3, 4, 7])] {
        let mut q = StageTokenQueue::new(5, policy, 2, 0);
        for s in 1..=7 {
            ok_or_msg(q.advance(s, Tensor::zeros(&[1, 2])))?;
        }
        if q.stages() != want {
            return fail(format!("{policy:?} q=5 after 7 stages kept {:?}", q.stages()));
        }
    }

    // Train a tiny run and watch earlier tokens across later stages.
    let mut exp = ok_or_msg(Experiment::new(tiny_config(5)))?;
    let mut snapshots: Vec<(usize, Tensor)> = Vec::new();
    for stage in 1..=exp.num_stages() {
        ok_or_msg(exp.train_stage(stage))?;
        let queue = exp.bundle.queue().ok_or("tiny config has no queue")?;
        for (s, t) in &snapshots {
            if let Some(tok) = queue.tokens().iter().find(|tok| tok.stage == *s) {
                if !tok.token.value().bit_eq(t) {
                    return fail(format!("token of stage {s} changed during stage {stage}"));
                }
            }
        }
        let cur = queue.tokens().iter().max_by_key(|t| t.stage).ok_or("empty queue")?;
        snapshots.push((cur.stage, cur.token.value().clone()));
    }
    Ok("1000 random sequences; FIFO {3..7}, FILO {1,2,3,4,7}; earlier tokens bitwise frozen".into())
}

fn brute_force_recall(emb: &[Vec<f64>], labels: &[u32]) -> f64 {
    let n = emb.len();
    let mut hits = 0usize;
    let mut queries = 0usize;
    for i in 0..n {
        if labels.iter().filter(|&&l| l == labels[i]).count() < 2 {
            continue;
        }
        queries += 1;
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..n {
            if j == i {
                continue;
            }
            let d: f64 = emb[i].iter().zip(&emb[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        if labels[best.1] == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / queries as f64
}

fn check_metric_oracles(_: &VerifyOptions) -> std::result::Result<String, String> {
    let f = ok_or_msg(forgetting(&[0.5, 0.6, 0.4]))?;
    if f != 0.1 {
        return fail(format!("forgetting([0.5,0.6,0.4]) = {f:?}, expected 0.1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7007);
    for case in 0..1000 {
        let n = rng.random_range(2..=20);
        let mut r = rng.random::<f64>() * 0.5;
        let seq: Vec<f64> = (0..n)
            .map(|_| {
                r = (r + rng.random::<f64>() * 0.05).min(1.0);
                r
            })
            .collect();
        let f = ok_or_msg(forgetting(&seq))?;
        if f != 0.0 {
            return fail(format!("case {case}: nondecreasing {seq:?} has F_N {f}"));
        }
        let mean = ok_or_msg(avg_recall(&seq))?;
        if !(mean >= seq[0] && mean <= seq[n - 1]) {
            return fail(format!("case {case}: mean {mean} outside sequence range"));
        }
    }
    for case in 0..100 {
        let n = rng.random_range(2..=200);
        let dim = rng.random_range(1..=8);
        let classes = rng.random_range(1..=(n as u32 / 2).max(1));
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        if labels.iter().all(|l| labels.iter().filter(|&&m| m == *l).count() < 2) {
            continue;
        }
        // Coarse integer coordinates make exact ties common.
        let emb: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-3..=3) as f64).collect())
            .collect();
        let set = ok_or_msg(EmbeddingSet::new(
            dim,
            emb.concat(),
            labels.clone(),
            EmbeddingSource::Unified,
        ))?;
        let got = ok_or_msg(recall_at_1(&set))?;
        let want = brute_force_recall(&emb, &labels);
        if got != want {
            return fail(format!("case {case} (n={n}): recall {got} vs brute force {want}"));
        }
    }
    Ok("forgetting([0.5,0.6,0.4]) = 0.1; 1000 monotone sequences F_N = 0; 100 brute-force recall sets agree".into())
}

/// Values of the tensors under `prefix`, excluding LoRA and adapter
/// additions, which are the only backbone tensors allowed to train.
pub fn base_tensors(m: &impl Parameterized, prefix: &str) -> Vec<(String, Tensor)> {
    let mut v = Vec::new();
    m.visit(&mut |p| {
        if p.name().starts_with(prefix) && !p.name().contains(".lora_") && !p.name().contains(".adapter.") {
            v.push((p.name().to_string(), p.value().clone()));
        }
    });
    v
}

/// Names of tensors in `before` whose values differ in `after`.
pub fn changed_tensors(before: &[(String, Tensor)], after: &[(String, Tensor)]) -> Vec<String> {
    before
        .iter()
        .zip(after)
        .filter(|((_, a), (_, b))| !a.bit_eq(b))
        .map(|((n, _), _)| n.clone())
        .collect()
}

fn check_freeze_integrity(_: &VerifyOptions) -> std::result::Result<String, String> {
    let mut exp = ok_or_msg(Experiment::new(tiny_config(11)))?;
    let enc = base_tensors(&exp.bundle, "encoder.");
    let base = base_tensors(&exp.bundle, "backbone.");
    ok_or_msg(exp.run_to_end())?;
    let changed: Vec<String> = changed_tensors(&enc, &base_tensors(&exp.bundle, "encoder."))
        .into_iter()
        .chain(changed_tensors(&base, &base_tensors(&exp.bundle, "backbone.")))
        .collect();
    if !changed.is_empty() {
        return fail(format!("frozen tensors changed: {}", changed.join(", ")));
    }
    for access in exp.access_log() {
        let own: BTreeSet<u32> = ok_or_msg(exp.schedule.classes(access.stage))?.iter().copied().collect();
        if !access.classes.is_subset(&own) {
            return fail(format!("stage {} read classes outside its split", access.stage));
        }
    }
    Ok(format!(
        "{} encoder and {} base tensors bitwise unchanged; no cross-stage reads",
        enc.len(),
        base.len()
    ))
}

fn check_checkpoint_roundtrip(_: &VerifyOptions) -> std::result::Result<String, String> {
    let cfg = tiny_config(21);
    let mut straight = ok_or_msg(Experiment::new(cfg.clone()))?;
    ok_or_msg(straight.run_next_stage())?;
    let bytes = ok_or_msg(straight.checkpoint().and_then(|r| save_checkpoint(&r)))?;
    let record = ok_or_msg(load_checkpoint(&bytes))?;
    if ok_or_msg(save_checkpoint(&record))? != bytes {
        return fail("re-encoding a loaded checkpoint changes its bytes");
    }
    ok_or_msg(straight.run_to_end())?;
    let mut resumed = ok_or_msg(Experiment::resume(&record))?;
    ok_or_msg(resumed.run_to_end())?;
    let a = straight.recalls();
    let b = resumed.recalls();
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
        return fail(format!("resumed recalls {b:?} differ from uninterrupted {a:?}"));
    }
    let fa = ok_or_msg(straight.checkpoint().and_then(|r| save_checkpoint(&r)))?;
    let fb = ok_or_msg(resumed.checkpoint().and_then(|r| save_checkpoint(&r)))?;
    if fa != fb {
        return fail("final checkpoints of resumed and uninterrupted runs differ");
    }
    Ok(format!("{} bytes round-trip; resumed run matches bitwise", bytes.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_properties_pass() {
        for name in ["prefix_oracle", "mapping_fidelity", "param_counts", "zero_init", "metric_oracles"] {
            for r in run_suite(Some(name), &VerifyOptions::default()).unwrap() {
                assert!(r.passed, "{}: {}", r.name, r.detail);
            }
        }
    }

    #[test]
    fn lora_mutation_is_caught_by_name() {
        let opts = VerifyOptions {
            mutation: Some(Mutation::LoraNonzeroInit),
        };
        let r = run_suite(Some("zero_init"), &opts).unwrap();
        assert_eq!(r.len(), 1);
        assert!(!r[0].passed);
        assert!(r[0].detail.contains("LoRA"));
    }

    #[test]
    fn unknown_filter_is_an_error() {
        assert!(run_suite(Some("no_such_property"), &VerifyOptions::default()).is_err());
    }
}
