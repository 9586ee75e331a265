//! Epoch loop, learning-rate schedule, checkpoint state and the ablation
//! harness.

use serde::{Deserialize, Serialize};

use crate::cm_moco::{train_step, CmcConfig, CmcMode, FeatureQueue, LossBreakdown, StepConfig};
use crate::config::train_config_hash;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, ModelConfig, Sgd};
use crate::objectives::AlignConfig;
use crate::parallel;
use crate::retrieval::{evaluate, evaluate_direction, Direction, Gallery, Modality, RerankConfig, RetrievalReport};
use crate::synth_data::{BatchSampler, Dataset, RngState, SamplerConfig, Split};

/// Seeds of the frozen word table are derived from the run seed with this
/// offset so the table and the initial weights use unrelated streams.
const TABLE_SEED_OFFSET: u64 = 0x7461_626c_65;
/// Offset of the batch sampler's stream.
const SAMPLER_SEED_OFFSET: u64 = 0x7361_6d70;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub sampler: SamplerConfig,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub cmc: CmcConfig,
    pub cmc_mode: CmcMode,
    pub align: AlignConfig,
    pub label_smoothing: f64,
    pub visual_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub rerank: RerankConfig,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Settings of the original experiments.
    pub fn full() -> Self {
        TrainConfig {
            epochs: 80,
            base_lr: 1e-4,
            warmup_epochs: 5,
            warmup_start_lr: 1e-5,
            decay_factor: 0.1,
            decay_epochs: vec![40, 70],
            sampler: SamplerConfig { p: 32, k_inst: 4 },
            momentum: 0.999,
            queue_capacity: 1024,
            cmc: CmcConfig::default(),
            cmc_mode: CmcMode::On,
            align: AlignConfig::default(),
            label_smoothing: 0.1,
            visual_hidden: vec![512],
            feature_dim: 256,
            embed_dim: 512,
            gru_hidden: 128,
            rerank: RerankConfig::default(),
            checkpoint_every: 0,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }

    /// Small setting that trains in seconds on the default synthetic data.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 30,
            // Plain SGD needs a larger step than the full preset uses.
            base_lr: 0.05,
            warmup_start_lr: 0.005,
            decay_epochs: vec![15, 25],
            sampler: SamplerConfig { p: 8, k_inst: 4 },
            queue_capacity: 256,
            embed_dim: 64,
            ..TrainConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay_epochs must be strictly increasing".into()));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("warmup_start_lr", self.warmup_start_lr),
            ("decay_factor", self.decay_factor),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.sampler.p == 0 || self.sampler.k_inst == 0 {
            return Err(Error::Config("batch_p and batch_k must be at least 1".into()));
        }
        if self.sampler.batch_size() < 2 {
            return Err(Error::Config("the alignment loss needs a batch of at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if self.queue_capacity > 0 && self.queue_capacity < self.sampler.batch_size() {
            return Err(Error::Config(format!(
                "queue_size {} is smaller than the batch size {}",
                self.queue_capacity,
                self.sampler.batch_size()
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.feature_dim == 0 || self.embed_dim == 0 || self.gru_hidden == 0 || self.visual_hidden.contains(&0) {
            return Err(Error::Config("layer sizes must be at least 1".into()));
        }
        self.cmc.validate()?;
        self.align.validate()?;
        self.rerank.validate()
    }

    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        ModelConfig {
            input_dim: dataset.input_dim(),
            visual_hidden: self.visual_hidden.clone(),
            feature_dim: self.feature_dim,
            vocab_size: dataset.vocab_size(),
            embed_dim: self.embed_dim,
            gru_hidden: self.gru_hidden,
            max_len: dataset.max_caption_len(),
            classes: dataset.classes(),
            label_smoothing: self.label_smoothing,
            table_seed: self.seed.wrapping_add(TABLE_SEED_OFFSET),
            init_seed: self.seed,
        }
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            cmc: self.cmc.clone(),
            cmc_mode: self.cmc_mode,
            align: self.align.clone(),
            momentum: self.momentum,
        }
    }
}

/// Learning rate at a global step: linear warm-up, then step decay.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let spe = steps_per_epoch.max(1);
    let warmup_steps = cfg.warmup_epochs * spe;
    if step < warmup_steps {
        let t = step as f64 / warmup_steps as f64;
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * t;
    }
    let epoch = step / spe;
    let passed = cfg.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.base_lr * cfg.decay_factor.powi(passed as i32)
}

/// Training steps in one pass over the training pairs.
pub fn steps_per_epoch(dataset: &Dataset, sampler: &SamplerConfig) -> usize {
    (dataset.captions_in(Split::Train).len() / sampler.batch_size()).max(1)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lcmc: f64,
    pub lalign: f64,
    pub lid: f64,
    pub total: f64,
    pub val_rank1: f64,
    pub lr: f64,
}

/// State captured when a step produces a non-finite loss.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub batch_identities: Vec<u32>,
    pub batch_captions: Vec<Vec<u32>>,
    pub losses: LossBreakdown,
    pub param_norms: Vec<(String, f64)>,
}

impl Diagnostic {
    pub fn capture(model: &Model, batch: &Batch, losses: LossBreakdown) -> Self {
        let mut param_norms = Vec::new();
        for (prefix, set) in [
            ("visual.query", &model.visual.query),
            ("visual.key", &model.visual.key),
            ("text.query", &model.text.query),
            ("text.key", &model.text.key),
        ] {
            for (name, t) in set.iter() {
                param_norms.push((format!("{prefix}.{name}"), t.norm()));
            }
        }
        param_norms.push(("head.weight".into(), model.head.weight.norm()));
        Diagnostic {
            batch_identities: batch.identities.clone(),
            batch_captions: batch.captions.clone(),
            losses,
            param_norms,
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub model_config: ModelConfig,
    pub visual_query: Vec<crate::tensor::Tensor>,
    pub visual_key: Vec<crate::tensor::Tensor>,
    pub text_query: Vec<crate::tensor::Tensor>,
    pub text_key: Vec<crate::tensor::Tensor>,
    pub head: crate::tensor::Tensor,
    pub queue: FeatureQueue,
    /// Optimizer slots; plain SGD keeps none.
    pub optimizer_state: Vec<crate::tensor::Tensor>,
    pub sampler: RngState,
    pub epoch: usize,
    pub step: usize,
    pub trace: Vec<EpochMetrics>,
}

impl Checkpoint {
    /// Rebuilds the model stored in this checkpoint.
    pub fn model(&self) -> Result<Model> {
        let cfg = self.model_config.clone();
        let mut fresh = Model::new(cfg.clone())?;
        let fill = |set: &mut crate::encoders::ParamSet, tensors: &[crate::tensor::Tensor], what: &'static str| -> Result<()> {
            if set.len() != tensors.len() {
                return Err(Error::format("checkpoint", format!("{what}: {} tensors, expected {}", tensors.len(), set.len())));
            }
            for (dst, src) in set.tensors_mut().iter_mut().zip(tensors) {
                if dst.shape() != src.shape() {
                    return Err(Error::shape(what, src.shape(), dst.shape()));
                }
                *dst = src.clone();
            }
            Ok(())
        };
        fill(&mut fresh.visual.query, &self.visual_query, "visual query")?;
        fill(&mut fresh.visual.key, &self.visual_key, "visual key")?;
        fill(&mut fresh.text.query, &self.text_query, "text query")?;
        fill(&mut fresh.text.key, &self.text_key, "text key")?;
        if fresh.head.weight.shape() != self.head.shape() {
            return Err(Error::shape("classifier", self.head.shape(), fresh.head.weight.shape()));
        }
        fresh.head.weight = self.head.clone();
        Ok(fresh)
    }
}

/// A resumable training run over one dataset.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    cfg: TrainConfig,
    config_hash: [u8; 32],
    model: Model,
    queue: FeatureQueue,
    sampler: BatchSampler,
    epoch: usize,
    step: usize,
    trace: Vec<EpochMetrics>,
}

/// Model, queue and per-epoch metrics of a finished run.
pub struct TrainOutcome {
    pub model: Model,
    pub queue: FeatureQueue,
    pub trace: Vec<EpochMetrics>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config(dataset))?;
        Ok(Trainer {
            dataset,
            config_hash: train_config_hash(&cfg),
            queue: FeatureQueue::new(cfg.queue_capacity, cfg.feature_dim),
            sampler: BatchSampler::new(cfg.sampler, cfg.seed.wrapping_add(SAMPLER_SEED_OFFSET)),
            cfg,
            model,
            epoch: 0,
            step: 0,
            trace: Vec::new(),
        })
    }

    /// Continues from a checkpoint written under the same configuration.
    pub fn resume(dataset: &'a Dataset, cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let hash = train_config_hash(&cfg);
        if hash != ckpt.config_hash {
            return Err(Error::Config(
                "checkpoint was written under a different configuration; refusing to resume".into(),
            ));
        }
        if ckpt.model_config != cfg.model_config(dataset) {
            return Err(Error::Config("checkpoint does not match the dataset's dimensions".into()));
        }
        Ok(Trainer {
            dataset,
            config_hash: hash,
            model: ckpt.model()?,
            queue: ckpt.queue.clone(),
            sampler: BatchSampler::from_state(cfg.sampler, &ckpt.sampler),
            cfg,
            epoch: ckpt.epoch,
            step: ckpt.step,
            trace: ckpt.trace.clone(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn trace(&self) -> &[EpochMetrics] {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config_hash,
            model_config: self.model.config.clone(),
            visual_query: self.model.visual.query.tensors().to_vec(),
            visual_key: self.model.visual.key.tensors().to_vec(),
            text_query: self.model.text.query.tensors().to_vec(),
            text_key: self.model.text.key.tensors().to_vec(),
            head: self.model.head.weight.clone(),
            queue: self.queue.clone(),
            optimizer_state: Vec::new(),
            sampler: self.sampler.state(),
            epoch: self.epoch,
            step: self.step,
            trace: self.trace.clone(),
        }
    }

    /// Trains one epoch and records its metrics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let spe = steps_per_epoch(self.dataset, &self.cfg.sampler);
        let step_cfg = self.cfg.step_config();
        let lr0 = lr_at(self.step, spe, &self.cfg);
        let mut sums = [0.0; 4];
        for i in 0..spe {
            let batch = self.sampler.sample_batch(self.dataset)?.to_batch(self.dataset)?;
            let lr = lr_at(self.step, spe, &self.cfg);
            let losses = train_step(&batch, &mut self.model, &mut self.queue, &Sgd, lr, &step_cfg).map_err(|e| match e {
                Error::NonFinite {
                    component, diagnostic, ..
                } => Error::NonFinite {
                    epoch: self.epoch,
                    step: i,
                    component,
                    diagnostic,
                },
                other => other,
            })?;
            self.step += 1;
            for (s, v) in sums.iter_mut().zip([losses.cmc, losses.align, losses.id, losses.total]) {
                *s += v;
            }
        }
        let n = spe as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            lcmc: sums[0] / n,
            lalign: sums[1] / n,
            lid: sums[2] / n,
            total: sums[3] / n,
            val_rank1: validation_rank1(&self.model, self.dataset)?,
            lr: lr0,
        };
        self.epoch += 1;
        self.trace.push(metrics.clone());
        Ok(metrics)
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            queue: self.queue,
            trace: self.trace,
        }
    }
}

/// Runs every remaining epoch.
pub fn run_training(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, cfg.clone())?;
    while !trainer.is_done() {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}

/// Query-encoder galleries of one split: `(texts, images)`.
pub fn encode_split(model: &Model, dataset: &Dataset, split: Split) -> Result<(Gallery, Gallery)> {
    let images = dataset.images_in(split);
    let captions = dataset.captions_in(split);
    if images.is_empty() || captions.is_empty() {
        return Err(Error::Contract(format!("split {split:?} has no records")));
    }
    let image_emb = model.encode_images(&dataset.image_matrix(&images)?)?;
    let tokens: Vec<Vec<u32>> = captions.iter().map(|&c| dataset.captions[c].tokens.clone()).collect();
    let text_emb = model.encode_captions(&tokens)?;
    let texts = Gallery::new(
        text_emb,
        captions.iter().map(|&c| dataset.captions[c].identity).collect(),
        Modality::Text,
    )?;
    let images = Gallery::new(
        image_emb,
        images.iter().map(|&i| dataset.images[i].identity).collect(),
        Modality::Image,
    )?;
    Ok((texts, images))
}

/// Held-out split used for per-epoch validation.
pub fn validation_split(dataset: &Dataset) -> Split {
    if dataset.captions_in(Split::Val).is_empty() {
        Split::Test
    } else {
        Split::Val
    }
}

fn validation_rank1(model: &Model, dataset: &Dataset) -> Result<f64> {
    let (texts, images) = encode_split(model, dataset, validation_split(dataset))?;
    let plain = evaluate_direction(Direction::TextToImage, &texts, &images, &RerankConfig::default(), false)?;
    Ok(plain[0].rank1())
}

/// Four test-split reports (see [`evaluate`]).
pub fn evaluate_model(model: &Model, dataset: &Dataset, rerank: &RerankConfig) -> Result<Vec<RetrievalReport>> {
    let (texts, images) = encode_split(model, dataset, Split::Test)?;
    evaluate(&texts, &images, rerank)
}

/// Axis varied by [`run_ablation`].
#[derive(Clone, Debug, PartialEq)]
pub enum AblationAxis {
    QueueSize(Vec<usize>),
    /// Contrastive term on against each listed alternative mode.
    CmcOnOff(Vec<CmcMode>),
    Rerank,
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::QueueSize(_) => "queue_size",
            AblationAxis::CmcOnOff(_) => "cmc_on_off",
            AblationAxis::Rerank => "rerank",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionScores {
    pub rank1: f64,
    /// Absent when the gallery is smaller than the cut-off.
    pub rank5: Option<f64>,
    pub rank10: Option<f64>,
    pub map: f64,
}

impl DirectionScores {
    fn from_report(r: &RetrievalReport) -> Self {
        DirectionScores {
            rank1: r.rank1(),
            rank5: r.rank_k.get(&5).copied(),
            rank10: r.rank_k.get(&10).copied(),
            map: r.map_score,
        }
    }

    fn median(rows: &[&DirectionScores]) -> Self {
        let m = |f: fn(&DirectionScores) -> f64| median(rows.iter().map(|r| f(r)).collect());
        let opt = |f: fn(&DirectionScores) -> Option<f64>| -> Option<f64> {
            rows.iter().map(|r| f(r)).collect::<Option<Vec<f64>>>().map(median)
        };
        DirectionScores {
            rank1: m(|r| r.rank1),
            rank5: opt(|r| r.rank5),
            rank10: opt(|r| r.rank10),
            map: m(|r| r.map),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub reranked: bool,
    pub text_to_image: DirectionScores,
    pub image_to_text: DirectionScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMedian {
    pub variant: String,
    pub reranked: bool,
    pub text_to_image: DirectionScores,
    pub image_to_text: DirectionScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub medians: Vec<AblationMedian>,
}

impl AblationTable {
    pub fn median_of(&self, variant: &str, reranked: bool) -> Option<&AblationMedian> {
        self.medians.iter().find(|m| m.variant == variant && m.reranked == reranked)
    }
}

/// Median with the mean of the two middle values for even counts.
pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn cmc_mode_name(mode: CmcMode) -> &'static str {
    match mode {
        CmcMode::On => "cmc_on",
        CmcMode::Off => "cmc_off",
        CmcMode::PositiveOnly => "cmc_positive_only",
    }
}

struct Job {
    variant: String,
    cfg: TrainConfig,
}

/// Trains and evaluates every variant of `axis` for every seed. Each run
/// contributes a plain and a re-ranked row. Runs are independent and may
/// execute concurrently; rows keep job order.
pub fn run_ablation(dataset: &Dataset, base: &TrainConfig, axis: &AblationAxis, seeds: &[u64]) -> Result<AblationTable> {
    let mut jobs = Vec::new();
    for &seed in seeds {
        let seeded = TrainConfig { seed, ..base.clone() };
        match axis {
            AblationAxis::QueueSize(sizes) => {
                for &q in sizes {
                    jobs.push(Job {
                        variant: format!("queue_{q}"),
                        cfg: TrainConfig {
                            queue_capacity: q,
                            cmc_mode: CmcMode::On,
                            ..seeded.clone()
                        },
                    });
                }
            }
            AblationAxis::CmcOnOff(alternatives) => {
                let mut modes = vec![CmcMode::On];
                modes.extend(alternatives.iter().copied().filter(|m| *m != CmcMode::On));
                for mode in modes {
                    jobs.push(Job {
                        variant: cmc_mode_name(mode).into(),
                        cfg: TrainConfig {
                            cmc_mode: mode,
                            ..seeded.clone()
                        },
                    });
                }
            }
            AblationAxis::Rerank => jobs.push(Job {
                variant: "baseline".into(),
                cfg: seeded.clone(),
            }),
        }
    }
    for job in &jobs {
        job.cfg.validate()?;
    }

    let results = parallel::map_indexed(jobs.len(), parallel::thread_count(), |i| -> Result<Vec<AblationRow>> {
        let job = &jobs[i];
        let outcome = run_training(dataset, &job.cfg)?;
        let reports = evaluate_model(&outcome.model, dataset, &job.cfg.rerank)?;
        let row = |reranked: bool| {
            let pick = |d: Direction| {
                reports
                    .iter()
                    .find(|r| r.direction == d && r.reranked == reranked)
                    .map(DirectionScores::from_report)
                    .expect("evaluate emits every variant")
            };
            AblationRow {
                variant: job.variant.clone(),
                seed: job.cfg.seed,
                reranked,
                text_to_image: pick(Direction::TextToImage),
                image_to_text: pick(Direction::ImageToText),
            }
        };
        Ok(vec![row(false), row(true)])
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }

    let mut variants: Vec<(String, bool)> = Vec::new();
    for r in &rows {
        let key = (r.variant.clone(), r.reranked);
        if !variants.contains(&key) {
            variants.push(key);
        }
    }
    let medians = variants
        .iter()
        .map(|(v, reranked)| {
            let of: Vec<&AblationRow> = rows.iter().filter(|r| &r.variant == v && r.reranked == *reranked).collect();
            AblationMedian {
                variant: v.clone(),
                reranked: *reranked,
                text_to_image: DirectionScores::median(&of.iter().map(|r| &r.text_to_image).collect::<Vec<_>>()),
                image_to_text: DirectionScores::median(&of.iter().map(|r| &r.image_to_text).collect::<Vec<_>>()),
            }
        })
        .collect();
    Ok(AblationTable {
        axis: axis.name().into(),
        seeds: seeds.to_vec(),
        rows,
        medians,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{generate_dataset, DataConfig};

    fn tiny() -> (Dataset, TrainConfig) {
        let ds = generate_dataset(&DataConfig {
            n_ids: 12,
            n_train_ids: 8,
            images_per_id: 2,
            captions_per_image: 2,
            ..DataConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            decay_epochs: vec![2],
            sampler: SamplerConfig { p: 2, k_inst: 2 },
            queue_capacity: 8,
            visual_hidden: vec![8],
            feature_dim: 6,
            embed_dim: 5,
            gru_hidden: 4,
            rerank: RerankConfig { k: 2, ..RerankConfig::default() },
            ..TrainConfig::desk()
        };
        (ds, cfg)
    }

    #[test]
    fn schedule_anchors() {
        let cfg = TrainConfig::full();
        assert_eq!(lr_at(0, 10, &cfg), 1e-5);
        assert_eq!(lr_at(50, 10, &cfg), 1e-4);
        assert!((lr_at(400, 10, &cfg) - 1e-5).abs() < 1e-20);
        assert!((lr_at(700, 10, &cfg) - 1e-6).abs() < 1e-20);
        assert!((lr_at(25, 10, &cfg) - 5.5e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_piecewise_monotone() {
        let cfg = TrainConfig::full();
        let lrs: Vec<f64> = (0..800).map(|s| lr_at(s, 10, &cfg)).collect();
        assert!(lrs[..50].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[50..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            warmup_epochs: 30,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            decay_epochs: vec![20, 10],
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
        let zero = TrainConfig {
            epochs: 0,
            ..TrainConfig::desk()
        };
        assert!(zero.validate().is_ok());
        assert!(TrainConfig::full().validate().is_ok());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (ds, cfg) = tiny();
        let cfg = TrainConfig { epochs: 0, ..cfg };
        let out = run_training(&ds, &cfg).unwrap();
        assert!(out.trace.is_empty());
        let fresh = Model::new(cfg.model_config(&ds)).unwrap();
        assert_eq!(out.model.visual, fresh.visual);
        assert_eq!(out.model.text, fresh.text);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (ds, cfg) = tiny();
        let a = run_training(&ds, &cfg).unwrap();
        let b = run_training(&ds, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model.visual, b.model.visual);
        assert_eq!(a.trace.len(), 3);

        let mut t = Trainer::new(&ds, cfg.clone()).unwrap();
        t.run_epoch().unwrap();
        let ckpt = t.checkpoint();
        let mut resumed = Trainer::resume(&ds, cfg.clone(), &ckpt).unwrap();
        while !resumed.is_done() {
            resumed.run_epoch().unwrap();
        }
        let mut straight = Trainer::new(&ds, cfg.clone()).unwrap();
        while !straight.is_done() {
            straight.run_epoch().unwrap();
        }
        assert_eq!(resumed.checkpoint(), straight.checkpoint());

        let other = TrainConfig { seed: 99, ..cfg };
        assert!(matches!(Trainer::resume(&ds, other, &ckpt), Err(Error::Config(_))));
    }

    #[test]
    fn cmc_off_matches_empty_queue() {
        let (ds, cfg) = tiny();
        let off = run_training(&ds, &TrainConfig { cmc_mode: CmcMode::Off, ..cfg.clone() }).unwrap();
        let empty = run_training(&ds, &TrainConfig { queue_capacity: 0, ..cfg.clone() }).unwrap();
        let pos = run_training(&ds, &TrainConfig { cmc_mode: CmcMode::PositiveOnly, ..cfg }).unwrap();
        assert_eq!(off.trace, empty.trace);
        assert_eq!(off.model.visual, empty.model.visual);
        assert_eq!(off.trace, pos.trace);
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let (ds, cfg) = tiny();
        let cfg = TrainConfig {
            base_lr: 1e300,
            warmup_start_lr: 1e300,
            ..cfg
        };
        match run_training(&ds, &cfg) {
            Err(Error::NonFinite { diagnostic, .. }) => {
                assert_eq!(diagnostic.batch_identities.len(), 4);
                assert!(!diagnostic.param_norms.is_empty());
            }
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("training should have diverged"),
        }
    }

    #[test]
    fn ablation_tables_are_complete_and_repeatable() {
        let (ds, cfg) = tiny();
        let cfg = TrainConfig { epochs: 2, ..cfg };
        let t = run_ablation(&ds, &cfg, &AblationAxis::QueueSize(vec![0, 8, 8]), &[1]).unwrap();
        assert_eq!(t.rows.len(), 6);
        assert_eq!(t.rows[2].variant, "queue_8");
        assert_eq!(t.rows[2], t.rows[4]);
        assert_eq!(t.rows[3], t.rows[5]);
        assert!(t.rows[3].reranked && !t.rows[2].reranked);
        assert_eq!(t.medians.len(), 4);
        let r = run_ablation(&ds, &cfg, &AblationAxis::Rerank, &[1, 2]).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.medians.len(), 2);
        assert!(r.median_of("baseline", true).is_some());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }
}
