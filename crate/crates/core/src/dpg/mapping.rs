use std::fmt;

use rand::Rng;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::nn::{dropout_forward, LayerNormParams, Parameterized};
use crate::tensor::{Param, Tape, Tensor, Var};

/// Rank of the mapping weight: a fixed `R` or the full `min(C_in, C_out)`.
///
/// Serialized as an integer or the string `"full"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MappingRank {
    Low(usize),
    Full,
}

impl MappingRank {
    pub fn resolve(self, c_in: usize, c_out: usize) -> usize {
        match self {
            Self::Low(r) => r,
            Self::Full => c_in.min(c_out),
        }
    }
}

impl fmt::Display for MappingRank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Low(r) => write!(f, "{r}"),
            Self::Full => f.write_str("full"),
        }
    }
}

impl Serialize for MappingRank {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Low(r) => s.serialize_u64(*r as u64),
            Self::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for MappingRank {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct RankVisitor;
        impl Visitor<'_> for RankVisitor {
            type Value = MappingRank;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive integer or \"full\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<MappingRank, E> {
                Ok(MappingRank::Low(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<MappingRank, E> {
                usize::try_from(v)
                    .map(MappingRank::Low)
                    .map_err(|_| E::custom("rank must be non-negative"))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<MappingRank, E> {
                match v {
                    "full" => Ok(MappingRank::Full),
                    other => Err(E::unknown_variant(other, &["full"])),
                }
            }
        }
        d.deserialize_any(RankVisitor)
    }
}

/// Parameter accounting convention for [`count_mapping_params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountConvention {
    /// `R·(C_in + C_out) + 2·C_out`: both factors and the LayerNorm affine.
    Full,
    /// `R·C_out`: the output factor only, as commonly reported.
    OutputFactor,
}

/// `LayerNorm(Dropout(x)·A·Bᵀ)` with `A: [C_in×R]`, `B: [C_out×R]`, no bias.
#[derive(Clone, Debug)]
pub struct LowRankMap {
    pub a: Param,
    pub b: Param,
    pub ln: LayerNormParams,
    pub dropout_p: f64,
    full_rank: bool,
}

impl LowRankMap {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        rank: MappingRank,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let r = rank.resolve(c_in, c_out);
        let full_rank = rank == MappingRank::Full;
        if r == 0 || (!full_rank && r >= c_in.min(c_out)) {
            return Err(Error::Config(format!(
                "mapping rank {r} must satisfy 1 <= R < min({c_in}, {c_out}); use \"full\" for full rank"
            )));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Config(format!("mapping dropout {dropout_p} outside [0, 1)")));
        }
        Ok(Self {
            a: Param::new("mapping.a", Tensor::randn(&[c_in, r], (1.0 / c_in as f64).sqrt(), rng)),
            b: Param::new("mapping.b", Tensor::randn(&[c_out, r], (1.0 / r as f64).sqrt(), rng)),
            ln: LayerNormParams::new("mapping.ln", c_out),
            dropout_p,
            full_rank,
        })
    }

    pub fn c_in(&self) -> usize {
        self.a.value().shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.b.value().shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.a.value().shape()[1]
    }

    pub fn is_full_rank(&self) -> bool {
        self.full_rank
    }

    /// The effective dense weight `A·Bᵀ`, `[C_in×C_out]`.
    pub fn effective_weight(&self) -> Tensor {
        self.a
            .value()
            .matmul(&self.b.value().transpose().expect("rank-2"))
            .expect("factor shapes agree")
    }

    pub fn param_count(&self, convention: CountConvention) -> usize {
        count_mapping_params(self.c_in(), self.c_out(), self.rank(), convention)
    }
}

impl Parameterized for LowRankMap {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.a);
        f(&self.b);
        self.ln.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.a);
        f(&mut self.b);
        self.ln.visit_mut(f);
    }
}

/// Counts mapping parameters from geometry alone.
pub fn count_mapping_params(c_in: usize, c_out: usize, rank: usize, convention: CountConvention) -> usize {
    match convention {
        CountConvention::Full => rank * (c_in + c_out) + 2 * c_out,
        CountConvention::OutputFactor => rank * c_out,
    }
}

/// Applies dropout, then `x·A·Bᵀ`, then LayerNorm, in that order.
pub fn mapping_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    map: &LowRankMap,
    x: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let x = dropout_forward(tape, x, map.dropout_p, training, rng)?;
    let a = tape.param(&map.a);
    let b = tape.param(&map.b);
    let h = tape.matmul(x, a)?;
    let h = tape.matmul_nt(h, b)?;
    Ok(map.ln.forward(tape, h)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_factor_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut map = LowRankMap::new(6, 10, MappingRank::Low(2), 0.1, &mut rng).unwrap();
        map.b.set(Tensor::zeros(&[10, 2]));
        let beta = Tensor::randn(&[10], 1.0, &mut rng);
        map.ln.beta.set(beta.clone());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[1, 6], 1.0, &mut rng));
        let y = mapping_forward(&mut tape, &map, x, false, &mut rng).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), beta.data());
    }

    #[test]
    fn rank_bounds_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(LowRankMap::new(6, 10, MappingRank::Low(6), 0.1, &mut rng).is_err());
        assert!(LowRankMap::new(6, 10, MappingRank::Low(0), 0.1, &mut rng).is_err());
        let full = LowRankMap::new(6, 10, MappingRank::Full, 0.1, &mut rng).unwrap();
        assert_eq!(full.rank(), 6);
        assert!(full.is_full_rank());
    }

    #[test]
    fn rank_serde_forms() {
        let r: MappingRank = serde_json::from_str("64").unwrap();
        assert_eq!(r, MappingRank::Low(64));
        let r: MappingRank = serde_json::from_str("\"full\"").unwrap();
        assert_eq!(r, MappingRank::Full);
        assert!(serde_json::from_str::<MappingRank>("\"half\"").is_err());
        assert_eq!(serde_json::to_string(&MappingRank::Full).unwrap(), "\"full\"");
    }

    #[test]
    fn closed_form_counts() {
        assert_eq!(count_mapping_params(768, 30720, 256, CountConvention::Full), 8_122_368);
        assert_eq!(count_mapping_params(768, 30720, 256, CountConvention::OutputFactor), 7_864_320);
    }
}
