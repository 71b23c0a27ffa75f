use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use super::checkpoint::{CheckpointRecord, EntryValue};
use super::{adam_step, adam_update, lr_schedule, shuffle_classes, split_classes, AdamState, ExperimentConfig};
use super::{ExperimentMode, StageSchedule};
use crate::adapt::partition_parameters;
use crate::data::{generate_dataset, DatasetSplit, SyntheticSpec};
use crate::dpg::{LowRankMap, QueueState, StageTokenQueue, StaticPromptPool};
use crate::error::{Error, Result};
use crate::eval::{distance_histogram, eval_threads, recall_at_1, EmbeddingSet, EmbeddingSource, HistogramReport};
use crate::eval::MetricsRecord;
use crate::loss::{arcface_loss_for_class, BankLayout, PrototypeBank};
use crate::model::{DynamicPrompts, ModelBundle, PromptSource};
use crate::nn::{vit_forward, MiniViT, Parameterized};
use crate::seeds::{derive_seed, rng_for};
use crate::tensor::{Learnable, Param, Tape, Tensor};

/// First class id used for pretraining data; benchmark ids stay far below.
pub const PRETRAIN_FIRST_CLASS: u32 = 1 << 20;

/// Standard deviation of a freshly inserted stage token.
pub const STAGE_TOKEN_STD: f64 = 0.02;

/// Which training classes a stage read, and how many sample reads it made.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAccess {
    pub stage: usize,
    pub classes: BTreeSet<u32>,
    pub reads: usize,
}

/// Data access for one stage. Reads of classes outside the stage fail and
/// every successful read is logged.
pub struct StageLoader<'a> {
    data: &'a DatasetSplit,
    allowed: HashSet<u32>,
    access: StageAccess,
}

impl<'a> StageLoader<'a> {
    pub fn new(data: &'a DatasetSplit, stage: usize, classes: &[u32]) -> Self {
        Self {
            data,
            allowed: classes.iter().copied().collect(),
            access: StageAccess {
                stage,
                ..StageAccess::default()
            },
        }
    }

    pub fn get(&mut self, class: u32, index: usize) -> Result<&'a Tensor> {
        if !self.allowed.contains(&class) {
            return Err(Error::CrossStageAccess {
                stage: self.access.stage,
                class,
            });
        }
        let samples = self.data.train_class(class).ok_or(Error::UnknownClass(class))?;
        let img = samples.images.get(index).ok_or(Error::UnknownClass(class))?;
        self.access.classes.insert(class);
        self.access.reads += 1;
        Ok(img)
    }

    pub fn into_access(self) -> StageAccess {
        self.access
    }
}

/// Result of one stage: recall on the unseen test classes afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(rename = "R_N")]
    pub r_n: f64,
    #[serde(rename = "F_N")]
    pub f_n: f64,
    pub config_hash: String,
    pub recalls: Vec<f64>,
    pub histogram_gap: f64,
}

#[derive(Serialize, Deserialize)]
struct RunState {
    completed: usize,
    recalls: Vec<f64>,
    queue: Option<QueueState>,
    bank: BankLayout,
    access: Vec<StageAccess>,
}

struct PretrainModel {
    vit: MiniViT,
    bank: PrototypeBank,
}

impl Parameterized for PretrainModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.vit.visit(f);
        self.bank.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.vit.visit_mut(f);
        self.bank.visit_mut(f);
    }
}

fn accumulate(acc: &mut Vec<(String, Tensor)>, index: &mut HashMap<String, usize>, grads: Vec<(String, Tensor)>) {
    for (name, g) in grads {
        match index.get(&name) {
            Some(&i) => acc[i].1.add_assign(&g),
            None => {
                index.insert(name.clone(), acc.len());
                acc.push((name, g));
            }
        }
    }
}

fn mean_grads(mut acc: Vec<(String, Tensor)>, n: usize) -> Vec<(String, Tensor)> {
    let inv = 1.0 / n as f64;
    for (_, g) in &mut acc {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    acc
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed));
    idx
}

fn pretrain_spec(config: &ExperimentConfig) -> SyntheticSpec {
    SyntheticSpec {
        num_train_classes: config.pretrain.classes,
        num_test_classes: 0,
        samples_per_class: config.pretrain.samples_per_class,
        first_class: PRETRAIN_FIRST_CLASS,
        seed: derive_seed(config.seed, "data", 1),
        noise_sigma: config.pretrain.noise_sigma,
        max_shift: config.pretrain.max_shift,
        ..config.data.clone()
    }
}

/// Supervised ArcFace pretraining of a fresh backbone on classes disjoint
/// from the benchmark. With zero epochs the random initialisation is
/// returned.
pub fn pretrain_backbone(config: &ExperimentConfig) -> Result<MiniViT> {
    let mut init = rng_for(config.seed, "init", 0);
    let vit = MiniViT::new("vit", config.model.clone(), &mut init)?;
    let p = &config.pretrain;
    if p.epochs == 0 {
        return Ok(vit);
    }
    let data = generate_dataset(&pretrain_spec(config))?;
    let mut bank = PrototypeBank::new(vit.width());
    bank.extend(0, &data.train_class_ids(), config.prototype_std, &mut init)?;
    let mut model = PretrainModel { vit, bank };
    let samples: Vec<(u32, &Tensor)> = data
        .train
        .iter()
        .flat_map(|c| c.images.iter().map(move |img| (c.class_id, img)))
        .collect();
    let steps_per_epoch = samples.len().div_ceil(p.batch_size);
    let total = steps_per_epoch * p.epochs;
    let mut adam = AdamState::default();
    let mut step = 0;
    for epoch in 0..p.epochs {
        let order = permutation(samples.len(), derive_seed(config.seed, "pretrain.order", epoch as u64));
        for batch in order.chunks(p.batch_size) {
            let mut acc = Vec::new();
            let mut index = HashMap::new();
            for &k in batch {
                let (class, img) = samples[k];
                let mut tape = Tape::with_learnable(Learnable::All);
                let out = vit_forward(&mut tape, &model.vit, img, &[], None)?;
                let loss = arcface_loss_for_class(&mut tape, out.cls, class, &model.bank, config.arcface)?;
                accumulate(&mut acc, &mut index, tape.backward(loss)?.into_params());
            }
            let grads = mean_grads(acc, batch.len());
            adam_update(&mut model, &|_| true, &grads, &mut adam, lr_schedule(step, total, p.lr))?;
            step += 1;
        }
        log::info!("pretrain epoch {}/{} done", epoch + 1, p.epochs);
    }
    Ok(model.vit)
}

fn pretrain_cache() -> &'static Mutex<HashMap<String, Arc<MiniViT>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<MiniViT>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// [`pretrain_backbone`], memoised per process on every input it reads.
pub fn pretrained_backbone(config: &ExperimentConfig) -> Result<Arc<MiniViT>> {
    let key = serde_json::to_string(&(
        config.seed,
        &config.model,
        &config.pretrain,
        &config.data,
        config.prototype_std,
        config.arcface,
    ))?;
    if let Some(v) = pretrain_cache().lock().expect("cache lock").get(&key) {
        return Ok(v.clone());
    }
    let vit = Arc::new(pretrain_backbone(config)?);
    pretrain_cache()
        .lock()
        .expect("cache lock")
        .insert(key, vit.clone());
    Ok(vit)
}

/// Assembles the bundle for `config` around `pretrained`.
pub fn build_bundle(config: &ExperimentConfig, pretrained: &MiniViT) -> Result<ModelBundle> {
    let mut rng = rng_for(config.seed, "init", 1);
    let layout = config.layout();
    let c_enc = pretrained.width();
    let prompts = match config.mode {
        ExperimentMode::Dparl | ExperimentMode::DpgFrozen | ExperimentMode::UpperBound => {
            let mut map = LowRankMap::new(c_enc, layout.numel(), config.mapping.rank, config.mapping.dropout, &mut rng)?;
            map.ln.gamma.set(Tensor::full(&[layout.numel()], config.mapping.gain_init));
            PromptSource::Dynamic(DynamicPrompts {
                queue: StageTokenQueue::new(
                    config.queue.capacity,
                    config.queue.policy,
                    c_enc,
                    derive_seed(config.seed, "order", u64::MAX),
                ),
                map,
            })
        }
        ExperimentMode::StaticPool => {
            PromptSource::Pool(StaticPromptPool::new(config.prompt.pool_size, c_enc, layout, &mut rng)?)
        }
        ExperimentMode::LowerBound | ExperimentMode::PeftOnly => PromptSource::None,
    };
    ModelBundle::new(pretrained, prompts, layout, config.effective_adaptation(), &mut rng)
}

/// Copies every tensor of `record` into `bundle` by name. Fails on the
/// first bundle tensor that is missing or has a different shape, and on
/// any record tensor the bundle does not own.
pub fn load_tensors<P: Parameterized + ?Sized>(bundle: &mut P, record: &CheckpointRecord) -> Result<()> {
    let tensors: HashMap<&str, &Tensor> = record
        .entries
        .iter()
        .filter_map(|e| match &e.value {
            EntryValue::F64(t) => Some((e.name.as_str(), t)),
            EntryValue::Bytes(_) => None,
        })
        .collect();
    let mut failure = None;
    let mut used = HashSet::new();
    bundle.visit_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        match tensors.get(p.name()) {
            None => {
                failure = Some(Error::CheckpointEntry {
                    name: p.name().to_string(),
                    reason: "missing from checkpoint".into(),
                })
            }
            Some(t) if t.shape() != p.value().shape() => {
                failure = Some(Error::CheckpointEntry {
                    name: p.name().to_string(),
                    reason: format!("shape {:?} in checkpoint, {:?} in model", t.shape(), p.value().shape()),
                })
            }
            Some(t) => {
                used.insert(p.name().to_string());
                p.set((*t).clone());
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    for e in &record.entries {
        if matches!(e.value, EntryValue::F64(_)) && !used.contains(&e.name) {
            return Err(Error::CheckpointEntry {
                name: e.name.clone(),
                reason: "unknown tensor name for this model".into(),
            });
        }
    }
    Ok(())
}

/// One continual-learning run: data, schedule, model and metrics so far.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: DatasetSplit,
    pub schedule: StageSchedule,
    pub bundle: ModelBundle,
    completed: usize,
    recalls: Vec<f64>,
    access: Vec<StageAccess>,
}

impl Experiment {
    /// Generates the data, pretrains (or fetches) the backbone and builds
    /// the model.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let pretrained = pretrained_backbone(&config)?;
        Self::with_backbone(config, &pretrained)
    }

    pub fn with_backbone(config: ExperimentConfig, pretrained: &MiniViT) -> Result<Self> {
        config.validate()?;
        let data = generate_dataset(&Self::benchmark_spec(&config))?;
        let schedule = Self::make_schedule(&config, &data)?;
        let bundle = build_bundle(&config, pretrained)?;
        Ok(Self {
            config,
            data,
            schedule,
            bundle,
            completed: 0,
            recalls: Vec::new(),
            access: Vec::new(),
        })
    }

    pub fn benchmark_spec(config: &ExperimentConfig) -> SyntheticSpec {
        SyntheticSpec {
            first_class: 0,
            seed: derive_seed(config.seed, "data", 0),
            ..config.data.clone()
        }
    }

    fn make_schedule(config: &ExperimentConfig, data: &DatasetSplit) -> Result<StageSchedule> {
        let ids = data.train_class_ids();
        let ids = if config.split.shuffle_classes {
            shuffle_classes(&ids, &mut rng_for(config.seed, "order", 0))
        } else {
            ids
        };
        split_classes(&ids, config.effective_stages(), config.split.rounding)
    }

    pub fn completed_stages(&self) -> usize {
        self.completed
    }

    pub fn num_stages(&self) -> usize {
        self.schedule.num_stages()
    }

    pub fn is_finished(&self) -> bool {
        self.completed == self.num_stages()
    }

    pub fn recalls(&self) -> &[f64] {
        &self.recalls
    }

    /// Per-stage data access records.
    pub fn access_log(&self) -> &[StageAccess] {
        &self.access
    }

    /// Trains stage `stage` (1-based) on its own classes only.
    pub fn train_stage(&mut self, stage: usize) -> Result<()> {
        if stage != self.completed + 1 {
            return Err(Error::StageOrder {
                last: self.completed,
                got: stage,
            });
        }
        let classes = self.schedule.classes(stage)?.to_vec();
        if classes.is_empty() {
            return Err(Error::EmptyStage(stage));
        }
        let cfg = &self.config;
        if cfg.mode == ExperimentMode::LowerBound {
            self.access.push(StageAccess {
                stage,
                ..StageAccess::default()
            });
            self.completed = stage;
            return Ok(());
        }
        let seed = cfg.seed;
        let c_enc = self.bundle.encoder.width();
        if let Some(q) = self.bundle.queue_mut() {
            let init = Tensor::randn(&[1, c_enc], STAGE_TOKEN_STD, &mut rng_for(seed, "init.token", stage as u64));
            q.advance(stage, init)?;
        }
        self.bundle.bank.extend(
            stage,
            &classes,
            cfg.prototype_std,
            &mut rng_for(seed, "init.prototype", stage as u64),
        )?;
        let registry = partition_parameters(&self.bundle, stage)?;
        let learnable = registry.learnable();

        let mut loader = StageLoader::new(&self.data, stage, &classes);
        let m = self.data.samples_per_class;
        let samples: Vec<(u32, usize)> = classes.iter().flat_map(|&c| (0..m).map(move |i| (c, i))).collect();
        let cache = if self.bundle.encoder_cls_is_static() {
            let mut out = Vec::with_capacity(samples.len());
            for &(c, i) in &samples {
                out.push(self.bundle.encoder_cls(loader.get(c, i)?)?);
            }
            Some(out)
        } else {
            None
        };

        let batch_size = cfg.batch_size;
        let steps_per_epoch = samples.len().div_ceil(batch_size);
        let total_steps = steps_per_epoch * cfg.epochs;
        let mut adam = AdamState::default();
        let mut dropout_rng = rng_for(seed, "dropout", stage as u64);
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let order = permutation(samples.len(), derive_seed(seed, "order", ((stage as u64) << 32) | epoch as u64));
            for batch in order.chunks(batch_size) {
                let mut acc = Vec::new();
                let mut index = HashMap::new();
                for &k in batch {
                    let (class, i) = samples[k];
                    let img = loader.get(class, i)?;
                    let mut tape = Tape::with_learnable(learnable.clone());
                    let cached = cache.as_ref().map(|c| &c[k]);
                    let e = self.bundle.embed(&mut tape, img, cached, true, &mut dropout_rng)?;
                    let loss = arcface_loss_for_class(&mut tape, e, class, &self.bundle.bank, cfg.arcface)?;
                    accumulate(&mut acc, &mut index, tape.backward(loss)?.into_params());
                }
                let grads = mean_grads(acc, batch.len());
                let lr = lr_schedule(step, total_steps, cfg.lr);
                adam_step(&mut self.bundle, &registry, &grads, &mut adam, lr)?;
                step += 1;
            }
            log::debug!("stage {stage} epoch {}/{} done", epoch + 1, cfg.epochs);
        }
        if let Some(q) = self.bundle.queue_mut() {
            q.freeze_all();
        }
        self.access.push(loader.into_access());
        self.completed = stage;
        Ok(())
    }

    /// Embeddings of every unseen test sample under the current model.
    pub fn embed_test_set(&self) -> Result<EmbeddingSet> {
        let samples = self.data.test_samples();
        let threads = eval_threads().clamp(1, samples.len().max(1));
        let embed_chunk = |part: &[(&Tensor, u32)]| -> Result<Vec<f64>> {
            let mut out = Vec::new();
            for (img, _) in part {
                out.extend(self.bundle.embed_eval(img, None)?);
            }
            Ok(out)
        };
        let embeddings = if threads == 1 {
            embed_chunk(&samples)?
        } else {
            let chunk = samples.len().div_ceil(threads);
            let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
                let handles: Vec<_> = samples.chunks(chunk).map(|p| s.spawn(move || embed_chunk(p))).collect();
                handles.into_iter().map(|h| h.join().expect("embedding worker")).collect()
            });
            let mut all = Vec::new();
            for p in parts {
                all.extend(p?);
            }
            all
        };
        let labels = samples.iter().map(|(_, l)| *l).collect();
        let set = EmbeddingSet::new(self.bundle.backbone.width(), embeddings, labels, EmbeddingSource::Unified)?;
        Ok(if self.config.eval.normalize { set.normalized() } else { set })
    }

    /// Trains the next stage and records test recall.
    pub fn run_next_stage(&mut self) -> Result<StageOutcome> {
        let stage = self.completed + 1;
        if stage > self.num_stages() {
            return Err(Error::StageOrder {
                last: self.completed,
                got: stage,
            });
        }
        self.train_stage(stage)?;
        let recall = recall_at_1(&self.embed_test_set()?)?;
        self.recalls.push(recall);
        log::info!("stage {stage}: recall@1 {recall:.4}");
        Ok(StageOutcome { stage, recall })
    }

    /// Runs every remaining stage.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_next_stage()?;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<MetricsRecord> {
        MetricsRecord::from_recalls(self.recalls.clone())
    }

    pub fn histogram(&self) -> Result<HistogramReport> {
        distance_histogram(&self.embed_test_set()?, self.config.eval.histogram_bins)
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let m = self.metrics()?;
        Ok(RunSummary {
            r_n: m.avg_recall,
            f_n: m.forgetting,
            config_hash: self.config.hash(),
            recalls: m.recalls,
            histogram_gap: self.histogram()?.gap,
        })
    }

    /// Every model tensor plus the configuration and run state.
    pub fn checkpoint(&self) -> Result<CheckpointRecord> {
        let mut record = CheckpointRecord::default();
        self.bundle.visit(&mut |p| record.push_tensor(p.name(), p.value().clone()));
        let state = RunState {
            completed: self.completed,
            recalls: self.recalls.clone(),
            queue: self.bundle.queue().map(|q| q.state()),
            bank: self.bundle.bank.layout(),
            access: self.access.clone(),
        };
        record.push_bytes("meta.config", serde_json::to_vec(&self.config)?);
        record.push_bytes("meta.state", serde_json::to_vec(&state)?);
        Ok(record)
    }

    /// Rebuilds a run from a checkpoint. Data and schedule are regenerated
    /// from the stored configuration; tensors come from the record.
    pub fn resume(record: &CheckpointRecord) -> Result<Self> {
        let mut config: ExperimentConfig = serde_json::from_slice(record.bytes("meta.config")?)?;
        // Skip pretraining: the stored tensors replace every weight.
        config.pretrain.epochs = 0;
        let skeleton = pretrain_backbone(&config)?;
        let config: ExperimentConfig = serde_json::from_slice(record.bytes("meta.config")?)?;
        let mut exp = Self::with_backbone(config, &skeleton)?;
        let state: RunState = serde_json::from_slice(record.bytes("meta.state")?)?;
        if let (Some(q), Some(qs)) = (exp.bundle.queue_mut(), &state.queue) {
            q.restore(qs)?;
        }
        exp.bundle.bank.restore(&state.bank)?;
        load_tensors(&mut exp.bundle, record)?;
        exp.completed = state.completed;
        exp.recalls = state.recalls;
        exp.access = state.access;
        Ok(exp)
    }
}
