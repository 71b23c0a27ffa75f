//! Transformer building blocks and a small Vision Transformer with
//! prefix-token attention.

mod attention;
mod layers;
mod vit;

pub use attention::{attention_with_prefix, self_attention, LayerPrefix, MultiHeadAttention};
pub use layers::{dropout_forward, layernorm_forward, LayerNormParams, Linear, Parameterized};
pub use vit::{vit_forward, MiniViT, TransformerBlock, VitConfig, VitOutput};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_vit(depth: usize, rng: &mut ChaCha8Rng) -> MiniViT {
        let cfg = VitConfig {
            image_side: 8,
            patch_side: 4,
            width: 8,
            depth,
            heads: 2,
            mlp_ratio: 2,
        };
        MiniViT::new("vit", cfg, rng).unwrap()
    }

    #[test]
    fn empty_prefix_is_bit_identical_to_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mha = MultiHeadAttention::new("a", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
        let a = attention_with_prefix(&mut tape, x, None, &mha).unwrap();
        let b = self_attention(&mut tape, x, &mha).unwrap();
        assert!(tape.value(a).unwrap().bit_eq(tape.value(b).unwrap()));
    }

    #[test]
    fn prefix_preserves_query_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mha = MultiHeadAttention::new("a", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let p = tape.constant(Tensor::randn(&[8, 8], 1.0, &mut rng));
        let prefix = LayerPrefix::split(&mut tape, p).unwrap();
        let y = attention_with_prefix(&mut tape, x, Some(&prefix), &mha).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[3, 8]);
    }

    #[test]
    fn odd_prefix_and_width_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mha = MultiHeadAttention::new("a", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[3, 8]));
        assert!(LayerPrefix::split(&mut tape, p).is_err());
        let x = tape.constant(Tensor::zeros(&[3, 6]));
        assert!(attention_with_prefix(&mut tape, x, None, &mha).is_err());
        assert!(MultiHeadAttention::new("b", 9, 2, &mut rng).is_err());
    }

    #[test]
    fn vit_shapes_and_extra_token_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vit = small_vit(2, &mut rng);
        let img = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let out = vit_forward(&mut tape, &vit, &img, &[], None).unwrap();
        assert_eq!(tape.shape(out.cls).unwrap(), &[1, 8]);
        assert_eq!(tape.shape(out.tokens).unwrap(), &[5, 8]);

        let extra = tape.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
        let out = vit_forward(&mut tape, &vit, &img, &[], Some(extra)).unwrap();
        for v in &out.layer_inputs {
            assert_eq!(tape.shape(*v).unwrap(), &[10, 8]);
        }
        assert_eq!(tape.shape(out.tokens).unwrap(), &[10, 8]);
    }

    #[test]
    fn vit_rejects_bad_geometry_and_deep_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bad = VitConfig {
            image_side: 10,
            patch_side: 4,
            ..VitConfig::default()
        };
        assert!(MiniViT::new("v", bad, &mut rng).is_err());

        let vit = small_vit(1, &mut rng);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[2, 8]));
        let prefix = LayerPrefix::split(&mut tape, p).unwrap();
        let img = Tensor::zeros(&[8, 8]);
        assert!(vit_forward(&mut tape, &vit, &img, &[prefix, prefix], None).is_err());
        assert!(vit_forward(&mut tape, &vit, &Tensor::zeros(&[4, 4]), &[], None).is_err());
    }

    #[test]
    fn later_layers_match_unprefixed_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vit = small_vit(6, &mut rng);
        let img = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let prefixes: Vec<LayerPrefix> = (0..3)
            .map(|_| {
                let p = tape.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
                LayerPrefix::split(&mut tape, p).unwrap()
            })
            .collect();
        let out = vit_forward(&mut tape, &vit, &img, &prefixes, None).unwrap();
        for l in 3..6 {
            let captured = tape.value(out.layer_inputs[l]).unwrap().clone();
            let next = if l + 1 < 6 {
                tape.value(out.layer_inputs[l + 1]).unwrap().clone()
            } else {
                continue;
            };
            let mut fresh = Tape::new();
            let x = fresh.constant(captured);
            let y = vit.blocks[l].forward(&mut fresh, x, None).unwrap();
            assert!(fresh.value(y).unwrap().bit_eq(&next), "layer {l}");
        }
    }

    #[test]
    fn attention_gradient_check_with_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mha = MultiHeadAttention::new("a", 8, 2, &mut rng).unwrap();
        let prefix = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let p = t.constant(prefix.clone());
                let pre = LayerPrefix::split(t, p)?;
                let y = attention_with_prefix(t, v, Some(&pre), &mha)?;
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
