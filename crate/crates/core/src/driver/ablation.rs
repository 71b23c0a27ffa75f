//! Variant sweeps derived from a base configuration.

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptationMode;
use crate::dpg::{EvictionPolicy, MappingRank};
use crate::error::{Error, Result};

use super::config::{ExperimentConfig, ExperimentMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    StageOrder,
    Rank,
    Peft,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "stage_order" => Ok(Self::StageOrder),
            "rank" => Ok(Self::Rank),
            "peft" => Ok(Self::Peft),
            other => Err(Error::Config(format!(
                "unknown ablation kind {other:?}; expected stage_order, rank or peft"
            ))),
        }
    }
}

/// Restricted ranks as twelfths of the width: 1/12, 1/6, 1/3, 1/2, 2/3.
const RANK_TWELFTHS: [usize; 5] = [1, 2, 4, 6, 8];

/// Restricted mapping ranks for a width, deduplicated and kept valid.
pub fn rank_sweep(width: usize, c_out: usize) -> Vec<usize> {
    let mut ranks: Vec<usize> = RANK_TWELFTHS
        .iter()
        .map(|&k| ((width * k) as f64 / 12.0).round() as usize)
        .filter(|&r| r >= 1 && r < width.min(c_out))
        .collect();
    ranks.dedup();
    ranks
}

/// Named configurations for one sweep, in report order.
pub fn ablation_variants(kind: AblationKind, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    base.validate()?;
    let mut base = base.clone();
    base.mode = ExperimentMode::Dparl;
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let variants = match kind {
        AblationKind::StageOrder => {
            let capacity = base.queue.capacity.max(1);
            let mut v = vec![("none".to_string(), with(&|c| c.queue.capacity = 0))];
            for (name, policy) in [
                ("fifo", EvictionPolicy::Fifo),
                ("filo", EvictionPolicy::Filo),
                ("random", EvictionPolicy::Random),
            ] {
                v.push((
                    name.to_string(),
                    with(&|c| {
                        c.queue.capacity = capacity;
                        c.queue.policy = policy;
                    }),
                ));
            }
            v
        }
        AblationKind::Rank => {
            let mut v: Vec<(String, ExperimentConfig)> = rank_sweep(base.model.width, base.layout().numel())
                .into_iter()
                .map(|r| (format!("rank_{r}"), with(&|c| c.mapping.rank = MappingRank::Low(r))))
                .collect();
            v.push(("rank_full".into(), with(&|c| c.mapping.rank = MappingRank::Full)));
            v
        }
        AblationKind::Peft => {
            let lora = match &base.adaptation {
                m @ AdaptationMode::Lora { .. } => m.clone(),
                _ => AdaptationMode::lora(2),
            };
            let adapter = match &base.adaptation {
                m @ AdaptationMode::Adapter { .. } => m.clone(),
                _ => AdaptationMode::Adapter {
                    bottleneck: (base.model.width / 4).max(1),
                },
            };
            [AdaptationMode::Freeze, AdaptationMode::FullFt, adapter, lora]
                .into_iter()
                .map(|m| (m.label().to_string(), with(&|c| c.adaptation = m.clone())))
                .collect()
        }
    };
    for (name, cfg) in &variants {
        cfg.validate()
            .map_err(|e| Error::Config(format!("variant {name}: {e}")))?;
    }
    Ok(variants)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_fractions_at_vit_b_width() {
        assert_eq!(rank_sweep(768, 30720), vec![64, 128, 256, 384, 512]);
        assert_eq!(rank_sweep(64, 1536), vec![5, 11, 21, 32, 43]);
    }

    #[test]
    fn sweeps_have_expected_rows() {
        let base = ExperimentConfig::default();
        let names = |k| -> Vec<String> {
            ablation_variants(k, &base).unwrap().into_iter().map(|(n, _)| n).collect()
        };
        assert_eq!(names(AblationKind::StageOrder), ["none", "fifo", "filo", "random"]);
        assert_eq!(names(AblationKind::Peft), ["freeze", "full_ft", "adapter", "lora"]);
        let ranks = names(AblationKind::Rank);
        assert_eq!(ranks.last().unwrap(), "rank_full");
        assert_eq!(ranks.len(), 6);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("STAGE_ORDER".parse::<AblationKind>().unwrap(), AblationKind::StageOrder);
        assert_eq!("stage-order".parse::<AblationKind>().unwrap(), AblationKind::StageOrder);
        assert!("depth".parse::<AblationKind>().is_err());
    }
}
