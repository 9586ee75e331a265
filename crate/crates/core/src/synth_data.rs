//! Synthetic fine-grained identities.
//!
//! Each identity is a vector of categorical attribute slots. An "image" is
//! the concatenation of per-slot one-hot blocks plus Gaussian noise; a
//! "caption" lists the identity's attribute tokens in a shuffled order with
//! filler tokens mixed in. Splits are disjoint by identity.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

/// Largest vocabulary the on-disk token width can hold.
pub const MAX_VOCAB: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_u8(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_ids: usize,
    pub n_train_ids: usize,
    pub n_val_ids: usize,
    pub images_per_id: usize,
    pub captions_per_image: usize,
    pub slots: usize,
    pub choices: usize,
    pub noise_sigma: f64,
    pub block_scale: f64,
    pub fillers_per_caption: usize,
    pub filler_vocab: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_ids: 64,
            n_train_ids: 48,
            n_val_ids: 0,
            images_per_id: 4,
            captions_per_image: 2,
            slots: 6,
            choices: 8,
            noise_sigma: 0.1,
            block_scale: 1.0,
            fillers_per_caption: 4,
            filler_vocab: 16,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn vocab_size(&self) -> usize {
        self.slots * self.choices + self.filler_vocab
    }

    pub fn input_dim(&self) -> usize {
        self.slots * self.choices
    }

    pub fn caption_len(&self) -> usize {
        self.slots + self.fillers_per_caption
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_ids", self.n_ids),
            ("images_per_id", self.images_per_id),
            ("captions_per_image", self.captions_per_image),
            ("slots", self.slots),
            ("choices", self.choices),
            ("n_train_ids", self.n_train_ids),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_train_ids + self.n_val_ids >= self.n_ids {
            return Err(Error::Config(format!(
                "{} train + {} val identities leave no test identities out of {}",
                self.n_train_ids, self.n_val_ids, self.n_ids
            )));
        }
        if self.fillers_per_caption > 0 && self.filler_vocab == 0 {
            return Err(Error::Config("filler tokens requested but filler_vocab is 0".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.block_scale > 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0 and block_scale > 0".into()));
        }
        if self.vocab_size() > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary overflow: {} tokens exceed the limit of {MAX_VOCAB}",
                self.vocab_size()
            )));
        }
        let distinct = (self.choices as f64).powi(self.slots as i32);
        if distinct < self.n_ids as f64 {
            return Err(Error::Config(format!(
                "{} identities cannot have distinct attributes with {} slots of {} choices",
                self.n_ids, self.slots, self.choices
            )));
        }
        Ok(())
    }

    pub fn split_of(&self, id: u32) -> Split {
        let id = id as usize;
        if id < self.n_train_ids {
            Split::Train
        } else if id < self.n_train_ids + self.n_val_ids {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// Token of choice `choice` in slot `slot`.
    pub fn attribute_token(&self, slot: usize, choice: usize) -> u32 {
        (slot * self.choices + choice) as u32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub id: u32,
    pub attributes: Vec<u16>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub identity: u32,
    pub feature: Vec<f64>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub identity: u32,
    /// Index of the described image in [`Dataset::images`].
    pub image: u32,
    pub tokens: Vec<u32>,
    pub split: Split,
}

/// One aligned image/caption pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRecord<'a> {
    pub identity: u32,
    pub image_feature: &'a [f64],
    pub caption_tokens: &'a [u32],
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub identities: Vec<Identity>,
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
}

impl Dataset {
    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn max_caption_len(&self) -> usize {
        self.captions.iter().map(|c| c.tokens.len()).max().unwrap_or(0)
    }

    /// Number of classifier classes (training identities).
    pub fn classes(&self) -> usize {
        self.config.n_train_ids
    }

    pub fn ids_in(&self, split: Split) -> Vec<u32> {
        self.identities.iter().filter(|i| i.split == split).map(|i| i.id).collect()
    }

    pub fn images_in(&self, split: Split) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.images[i].split == split).collect()
    }

    pub fn captions_in(&self, split: Split) -> Vec<usize> {
        (0..self.captions.len()).filter(|&i| self.captions[i].split == split).collect()
    }

    pub fn pair(&self, caption: usize) -> SampleRecord<'_> {
        let c = &self.captions[caption];
        SampleRecord {
            identity: c.identity,
            image_feature: &self.images[c.image as usize].feature,
            caption_tokens: &c.tokens,
            split: c.split,
        }
    }

    pub fn pairs(&self, split: Split) -> Vec<SampleRecord<'_>> {
        self.captions_in(split).into_iter().map(|c| self.pair(c)).collect()
    }

    /// `N×input_dim` features of the given images.
    pub fn image_matrix(&self, indices: &[usize]) -> Result<Tensor> {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.images[i].feature.as_slice()).collect();
        if rows.is_empty() {
            return Tensor::matrix(0, self.input_dim(), vec![]);
        }
        Tensor::from_rows(&rows)
    }
}

/// Builds a dataset deterministically from its configuration.
pub fn generate_dataset(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut identities: Vec<Identity> = Vec::with_capacity(config.n_ids);
    while identities.len() < config.n_ids {
        let attributes: Vec<u16> = (0..config.slots)
            .map(|_| rng.random_range(0..config.choices) as u16)
            .collect();
        if identities.iter().any(|i| i.attributes == attributes) {
            continue;
        }
        let id = identities.len() as u32;
        identities.push(Identity {
            id,
            attributes,
            split: config.split_of(id),
        });
    }

    let dim = config.input_dim();
    let mut images = Vec::with_capacity(config.n_ids * config.images_per_id);
    let mut captions = Vec::with_capacity(images.capacity() * config.captions_per_image);
    for ident in &identities {
        let mut base = vec![0.0; dim];
        for (slot, &choice) in ident.attributes.iter().enumerate() {
            base[slot * config.choices + choice as usize] = config.block_scale;
        }
        for _ in 0..config.images_per_id {
            let feature: Vec<f64> = base
                .iter()
                .map(|b| {
                    let z: f64 = rng.sample(StandardNormal);
                    b + config.noise_sigma * z
                })
                .collect();
            let image = images.len() as u32;
            images.push(ImageRecord {
                identity: ident.id,
                feature,
                split: ident.split,
            });
            for _ in 0..config.captions_per_image {
                let mut tokens: Vec<u32> = ident
                    .attributes
                    .iter()
                    .enumerate()
                    .map(|(slot, &c)| config.attribute_token(slot, c as usize))
                    .collect();
                tokens.shuffle(&mut rng);
                for _ in 0..config.fillers_per_caption {
                    let at = rng.random_range(0..=tokens.len());
                    let filler = (config.input_dim() + rng.random_range(0..config.filler_vocab)) as u32;
                    tokens.insert(at, filler);
                }
                captions.push(CaptionRecord {
                    identity: ident.id,
                    image,
                    tokens,
                    split: ident.split,
                });
            }
        }
    }
    Ok(Dataset {
        config: config.clone(),
        identities,
        images,
        captions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k_inst: usize,
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k_inst
    }
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// `P×K` batch as dataset record indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub images: Vec<usize>,
    pub captions: Vec<usize>,
    pub identities: Vec<u32>,
}

impl LabeledBatch {
    pub fn to_batch(&self, dataset: &Dataset) -> Result<Batch> {
        Ok(Batch {
            images: dataset.image_matrix(&self.images)?,
            captions: self.captions.iter().map(|&c| dataset.captions[c].tokens.clone()).collect(),
            identities: self.identities.clone(),
            labels: self.identities.iter().map(|&i| i as usize).collect(),
        })
    }
}

/// Identity-balanced sampler over the training split.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(config: SamplerConfig, seed: u64) -> Self {
        BatchSampler {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_state(config: SamplerConfig, state: &RngState) -> Self {
        BatchSampler {
            config,
            rng: state.restore(),
        }
    }

    pub fn state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn config(&self) -> SamplerConfig {
        self.config
    }

    /// `P` distinct training identities with `K` aligned pairs each. Pairs
    /// are drawn without replacement when the identity has enough of them.
    pub fn sample_batch(&mut self, dataset: &Dataset) -> Result<LabeledBatch> {
        let train = dataset.ids_in(Split::Train);
        if train.len() < self.config.p {
            return Err(Error::Config(format!(
                "batch needs {} identities but the training split has {}",
                self.config.p,
                train.len()
            )));
        }
        let chosen: Vec<u32> = train.choose_multiple(&mut self.rng, self.config.p).copied().collect();
        let mut batch = LabeledBatch {
            images: Vec::with_capacity(self.config.batch_size()),
            captions: Vec::with_capacity(self.config.batch_size()),
            identities: Vec::with_capacity(self.config.batch_size()),
        };
        for id in chosen {
            let pool: Vec<usize> = dataset
                .captions
                .iter()
                .enumerate()
                .filter(|(_, c)| c.identity == id)
                .map(|(i, _)| i)
                .collect();
            let picks: Vec<usize> = if pool.len() >= self.config.k_inst {
                pool.choose_multiple(&mut self.rng, self.config.k_inst).copied().collect()
            } else {
                (0..self.config.k_inst)
                    .map(|_| pool[self.rng.random_range(0..pool.len())])
                    .collect()
            };
            for c in picks {
                batch.images.push(dataset.captions[c].image as usize);
                batch.captions.push(c);
                batch.identities.push(id);
            }
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn default_shape() {
        let ds = generate_dataset(&DataConfig::default()).unwrap();
        assert_eq!(ds.identities.len(), 64);
        assert_eq!(ds.images.len(), 256);
        assert_eq!(ds.captions.len(), 512);
        assert_eq!(ds.ids_in(Split::Train).len(), 48);
        assert_eq!(ds.ids_in(Split::Test).len(), 16);
        assert_eq!(ds.vocab_size(), 64);
        assert_eq!(ds.max_caption_len(), 10);
    }

    #[test]
    fn zero_noise_gives_identical_images_per_identity() {
        let ds = generate_dataset(&DataConfig {
            noise_sigma: 0.0,
            ..DataConfig::default()
        })
        .unwrap();
        for id in 0..64u32 {
            let imgs: Vec<&ImageRecord> = ds.images.iter().filter(|i| i.identity == id).collect();
            assert!(imgs.windows(2).all(|w| w[0].feature == w[1].feature));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(&DataConfig::default()).unwrap();
        let b = generate_dataset(&DataConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&DataConfig {
            seed: 1,
            ..DataConfig::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn one_slot_difference_distance_is_root_two_scale() {
        let cfg = DataConfig {
            noise_sigma: 0.0,
            block_scale: 1.5,
            ..DataConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let mut found = 0;
        for a in &ds.identities {
            for b in &ds.identities {
                let diff = a.attributes.iter().zip(&b.attributes).filter(|(x, y)| x != y).count();
                if diff == 1 {
                    let fa = &ds.images[a.id as usize * cfg.images_per_id].feature;
                    let fb = &ds.images[b.id as usize * cfg.images_per_id].feature;
                    let d = fa.iter().zip(fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                    assert!((d - 2f64.sqrt() * 1.5).abs() < 1e-12);
                    found += 1;
                }
            }
        }
        // Small attribute space so that near-identical identities exist.
        let tight = DataConfig {
            slots: 2,
            choices: 9,
            noise_sigma: 0.0,
            ..DataConfig::default()
        };
        let ds = generate_dataset(&tight).unwrap();
        let a = &ds.identities[0];
        let b = ds
            .identities
            .iter()
            .find(|b| a.attributes.iter().zip(&b.attributes).filter(|(x, y)| x != y).count() == 1)
            .expect("pigeonhole guarantees a neighbour");
        let fa = &ds.images[a.id as usize * 4].feature;
        let fb = &ds.images[b.id as usize * 4].feature;
        let d = fa.iter().zip(fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!((d - 2f64.sqrt()).abs() < 1e-12);
        let _ = found;
    }

    #[test]
    fn splits_are_disjoint_by_identity() {
        let ds = generate_dataset(&DataConfig {
            n_val_ids: 4,
            ..DataConfig::default()
        })
        .unwrap();
        let train: Vec<u32> = ds.ids_in(Split::Train);
        let test: Vec<u32> = ds.ids_in(Split::Test);
        let val: Vec<u32> = ds.ids_in(Split::Val);
        assert!(train.iter().all(|i| !test.contains(i) && !val.contains(i)));
        assert!(val.iter().all(|i| !test.contains(i)));
        for c in &ds.captions {
            assert_eq!(c.split, ds.identities[c.identity as usize].split);
        }
    }

    #[test]
    fn captions_contain_all_attribute_tokens() {
        let cfg = DataConfig::default();
        let ds = generate_dataset(&cfg).unwrap();
        for c in &ds.captions {
            let ident = &ds.identities[c.identity as usize];
            for (slot, &choice) in ident.attributes.iter().enumerate() {
                assert!(c.tokens.contains(&cfg.attribute_token(slot, choice as usize)));
            }
            assert!(c.tokens.iter().all(|&t| (t as usize) < cfg.vocab_size()));
        }
    }

    #[test]
    fn invalid_configs() {
        let too_big = DataConfig {
            slots: 300,
            choices: 300,
            ..DataConfig::default()
        };
        assert!(matches!(generate_dataset(&too_big), Err(Error::Config(m)) if m.contains("overflow")));
        let zero = DataConfig {
            images_per_id: 0,
            ..DataConfig::default()
        };
        assert!(generate_dataset(&zero).is_err());
    }

    #[test]
    fn pk_batches() {
        let ds = generate_dataset(&DataConfig::default()).unwrap();
        let cfg = SamplerConfig { p: 2, k_inst: 4 };
        let mut sampler = BatchSampler::new(cfg, 3);
        let batch = sampler.sample_batch(&ds).unwrap();
        assert_eq!(batch.identities.len(), 8);
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for &id in &batch.identities {
            *counts.entry(id).or_default() += 1;
        }
        assert_eq!(counts.len(), 2);
        assert!(counts.values().all(|&c| c == 4));
        for i in 0..8 {
            assert_eq!(ds.captions[batch.captions[i]].identity, batch.identities[i]);
            assert_eq!(ds.images[batch.images[i]].identity, batch.identities[i]);
            assert_eq!(ds.captions[batch.captions[i]].image as usize, batch.images[i]);
            assert_eq!(ds.captions[batch.captions[i]].split, Split::Train);
        }

        let mut s8 = BatchSampler::new(SamplerConfig { p: 8, k_inst: 4 }, 1);
        for _ in 0..24 {
            let b = s8.sample_batch(&ds).unwrap();
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for &id in &b.identities {
                *counts.entry(id).or_default() += 1;
            }
            assert!(counts.values().all(|&c| c == 4));
        }
    }

    #[test]
    fn sampler_is_deterministic_and_resumable() {
        let ds = generate_dataset(&DataConfig::default()).unwrap();
        let cfg = SamplerConfig { p: 8, k_inst: 4 };
        let mut a = BatchSampler::new(cfg, 9);
        let mut b = BatchSampler::new(cfg, 9);
        for _ in 0..5 {
            assert_eq!(a.sample_batch(&ds).unwrap(), b.sample_batch(&ds).unwrap());
        }
        let mut resumed = BatchSampler::from_state(cfg, &a.state());
        assert_eq!(a.sample_batch(&ds).unwrap(), resumed.sample_batch(&ds).unwrap());
    }

    #[test]
    fn too_few_identities_or_instances() {
        let ds = generate_dataset(&DataConfig::default()).unwrap();
        let mut sampler = BatchSampler::new(SamplerConfig { p: 49, k_inst: 1 }, 0);
        assert!(sampler.sample_batch(&ds).is_err());
        // 8 pairs per identity; 10 requested forces resampling with replacement.
        let mut sampler = BatchSampler::new(SamplerConfig { p: 2, k_inst: 10 }, 0);
        let b = sampler.sample_batch(&ds).unwrap();
        assert_eq!(b.identities.len(), 20);
    }
}
