use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptationMode;
use crate::data::SyntheticSpec;
use crate::dpg::{EvictionPolicy, MappingRank, PromptLayout};
use crate::error::{Error, Result};
use crate::loss::ArcFaceParams;
use crate::nn::VitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    /// Dynamic prompts plus backbone adaptation.
    Dparl,
    /// Dynamic prompts on a frozen backbone.
    DpgFrozen,
    /// Static prompt pool on a frozen backbone.
    StaticPool,
    /// The pretrained backbone, untrained.
    LowerBound,
    /// Dynamic prompts and adaptation trained on all classes in one stage.
    UpperBound,
    /// Backbone adaptation only, no prompts.
    PeftOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageRounding {
    /// Later stages get `round(total / N_s)` classes.
    #[default]
    Round,
    Floor,
    Ceil,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Pretraining classes, disjoint from every benchmark class.
    pub classes: usize,
    pub samples_per_class: usize,
    /// Zero leaves the backbone at its random initialisation.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Pixel noise of pretraining images.
    pub noise_sigma: f64,
    /// Largest translation of pretraining images.
    pub max_shift: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            classes: 200,
            samples_per_class: 10,
            epochs: 3,
            batch_size: 32,
            lr: 1e-3,
            noise_sigma: 0.0,
            max_shift: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueueConfig {
    /// Zero disables stage tokens.
    pub capacity: usize,
    pub policy: EvictionPolicy,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            capacity: 5,
            policy: EvictionPolicy::Fifo,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingConfig {
    pub rank: MappingRank,
    pub dropout: f64,
    /// Initial value of every LayerNorm gain in the mapping.
    pub gain_init: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            rank: MappingRank::Low(8),
            dropout: 0.1,
            gain_init: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// `N_p`, split evenly into key and value rows.
    pub per_layer: usize,
    /// `L`, counted from the first backbone layer.
    pub layers: usize,
    /// Components in the static-pool baseline.
    pub pool_size: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            per_layer: 8,
            layers: 3,
            pool_size: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub rounding: StageRounding,
    /// Assign classes to stages in a seeded random order instead of id order.
    pub shuffle_classes: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            rounding: StageRounding::Round,
            shuffle_classes: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Unit-normalise embeddings before retrieval.
    pub normalize: bool,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            normalize: false,
            histogram_bins: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: ExperimentMode,
    pub stages: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Standard deviation of freshly added prototype rows.
    pub prototype_std: f64,
    pub data: SyntheticSpec,
    pub model: VitConfig,
    pub pretrain: PretrainConfig,
    pub adaptation: AdaptationMode,
    pub queue: QueueConfig,
    pub mapping: MappingConfig,
    pub prompt: PromptConfig,
    pub arcface: ArcFaceParams,
    pub split: SplitConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: ExperimentMode::Dparl,
            stages: 10,
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            prototype_std: 0.1,
            data: SyntheticSpec::default(),
            model: VitConfig::default(),
            pretrain: PretrainConfig::default(),
            adaptation: AdaptationMode::default(),
            queue: QueueConfig::default(),
            mapping: MappingConfig::default(),
            prompt: PromptConfig::default(),
            arcface: ArcFaceParams::default(),
            split: SplitConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stages must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.prototype_std > 0.0) {
            return Err(Error::Config("prototype_std must be > 0".into()));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.adaptation.validate()?;
        self.arcface.validate()?;
        self.layout().validate()?;
        if self.data.image_side != self.model.image_side {
            return Err(Error::Config(format!(
                "data image side {} differs from model image side {}",
                self.data.image_side, self.model.image_side
            )));
        }
        if self.prompt.layers > self.model.depth {
            return Err(Error::Config(format!(
                "prompts for {} layers but the model has depth {}",
                self.prompt.layers, self.model.depth
            )));
        }
        if self.data.num_train_classes < self.effective_stages() {
            return Err(Error::Config(format!(
                "{} training classes cannot fill {} stages",
                self.data.num_train_classes,
                self.effective_stages()
            )));
        }
        if self.data.num_test_classes == 0 {
            return Err(Error::Config("the benchmark needs test classes".into()));
        }
        if self.pretrain.epochs > 0 && (self.pretrain.classes < 2 || self.pretrain.samples_per_class == 0) {
            return Err(Error::Config("pretraining needs >= 2 classes with samples".into()));
        }
        if self.prompt.pool_size == 0 {
            return Err(Error::Config("pool_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.mapping.dropout) {
            return Err(Error::Config("mapping dropout must lie in [0, 1)".into()));
        }
        if let MappingRank::Low(r) = self.mapping.rank {
            let c_out = self.layout().numel();
            if r == 0 || r >= self.model.width.min(c_out) {
                return Err(Error::Config(format!(
                    "mapping rank {r} must satisfy 1 <= R < min({}, {c_out})",
                    self.model.width
                )));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> PromptLayout {
        PromptLayout {
            prompts_per_layer: self.prompt.per_layer,
            width: self.model.width,
            layers: self.prompt.layers,
        }
    }

    /// Stage count after mode overrides.
    pub fn effective_stages(&self) -> usize {
        match self.mode {
            ExperimentMode::UpperBound => 1,
            _ => self.stages,
        }
    }

    /// Backbone adaptation after mode overrides.
    pub fn effective_adaptation(&self) -> AdaptationMode {
        match self.mode {
            ExperimentMode::Dparl | ExperimentMode::UpperBound | ExperimentMode::PeftOnly => {
                self.adaptation.clone()
            }
            ExperimentMode::DpgFrozen | ExperimentMode::StaticPool | ExperimentMode::LowerBound => {
                AdaptationMode::Freeze
            }
        }
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"stages": 3, "epoch": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"queue": {"capacity": 3, "polcy": "fifo"}}"#).is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"mode": "upper_bound", "mapping": {"rank": "full"}, "adaptation": {"kind": "adapter", "bottleneck": 16}}"#,
        )
        .unwrap();
        assert_eq!(cfg.effective_stages(), 1);
        assert_eq!(cfg.mapping.rank, MappingRank::Full);
        assert_eq!(cfg.effective_adaptation(), AdaptationMode::Adapter { bottleneck: 16 });
    }

    #[test]
    fn frozen_modes_force_freeze() {
        for mode in [ExperimentMode::DpgFrozen, ExperimentMode::StaticPool, ExperimentMode::LowerBound] {
            let cfg = ExperimentConfig {
                mode,
                adaptation: AdaptationMode::FullFt,
                ..ExperimentConfig::default()
            };
            assert_eq!(cfg.effective_adaptation(), AdaptationMode::Freeze);
        }
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = [
            r#"{"stages": 0}"#,
            r#"{"prompt": {"per_layer": 3}}"#,
            r#"{"mapping": {"rank": 64}}"#,
            r#"{"prompt": {"layers": 7}}"#,
            r#"{"arcface": {"scale": 30, "margin": 2.0}}"#,
        ];
        for doc in bad {
            assert!(ExperimentConfig::from_json(doc).is_err(), "{doc}");
        }
    }
}
