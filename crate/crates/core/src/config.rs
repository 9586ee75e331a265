//! Flat `key = value` configuration covering the dataset, model, training and
//! evaluation settings. Unknown keys are rejected.

use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{Error, Result};
use crate::objectives::Reduction;
use crate::retrieval::Blend;
use crate::synth_data::DataConfig;
use crate::train::{Optimizer, TrainConfig};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl Preset {
    pub fn config(self) -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig::default(),
            train: match self {
                Preset::Desk => TrainConfig::desk(),
                Preset::Full => TrainConfig::full(),
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }
}

struct Entry {
    key: &'static str,
    doc: &'static str,
    value: Value,
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn float(v: f64) -> Value {
    Value::Float(v)
}

fn text(v: &str) -> Value {
    Value::String(v.to_string())
}

fn ints(v: &[usize]) -> Value {
    Value::Array(v.iter().map(|&x| int(x)).collect())
}

fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::Mean => "mean",
        Reduction::Sum => "sum",
    }
}

fn data_entries(d: &DataConfig) -> Vec<Entry> {
    vec![
        Entry { key: "n_ids", doc: "identities in the synthetic dataset", value: int(d.n_ids) },
        Entry { key: "n_train_ids", doc: "identities in the training split", value: int(d.n_train_ids) },
        Entry { key: "n_val_ids", doc: "identities in the validation split (0: validate on test)", value: int(d.n_val_ids) },
        Entry { key: "images_per_id", doc: "images per identity", value: int(d.images_per_id) },
        Entry { key: "captions_per_image", doc: "captions per image", value: int(d.captions_per_image) },
        Entry { key: "slots", doc: "attribute slots per identity", value: int(d.slots) },
        Entry { key: "choices", doc: "choices per attribute slot", value: int(d.choices) },
        Entry { key: "noise_sigma", doc: "standard deviation of image feature noise", value: float(d.noise_sigma) },
        Entry { key: "block_scale", doc: "magnitude of each one-hot attribute block", value: float(d.block_scale) },
        Entry { key: "fillers_per_caption", doc: "filler tokens inserted into each caption", value: int(d.fillers_per_caption) },
        Entry { key: "filler_vocab", doc: "distinct filler tokens", value: int(d.filler_vocab) },
        Entry { key: "data_seed", doc: "dataset generation seed", value: Value::Integer(d.seed as i64) },
    ]
}

fn train_entries(t: &TrainConfig) -> Vec<Entry> {
    vec![
        Entry { key: "epochs", doc: "training epochs", value: int(t.epochs) },
        Entry { key: "base_lr", doc: "learning rate after warm-up", value: float(t.base_lr) },
        Entry { key: "warmup_epochs", doc: "epochs of linear warm-up", value: int(t.warmup_epochs) },
        Entry { key: "warmup_start_lr", doc: "learning rate at step 0", value: float(t.warmup_start_lr) },
        Entry { key: "decay_factor", doc: "learning-rate multiplier at each decay epoch", value: float(t.decay_factor) },
        Entry { key: "decay_epochs", doc: "epochs at which the learning rate decays", value: ints(&t.decay_epochs) },
        Entry { key: "batch_p", doc: "identities per batch", value: int(t.sampler.p) },
        Entry { key: "batch_k", doc: "pairs per identity in a batch", value: int(t.sampler.k_inst) },
        Entry { key: "optimizer", doc: "optimizer (sgd)", value: text("sgd") },
        Entry { key: "momentum", doc: "key-encoder momentum m", value: float(t.momentum) },
        Entry { key: "queue_size", doc: "key queue capacity (0 disables negatives)", value: int(t.queue_capacity) },
        Entry { key: "cmc_mode", doc: "contrastive term: on, off or positive_only", value: text(t.cmc_mode.name()) },
        Entry { key: "tau_c", doc: "contrastive temperature", value: float(t.cmc.tau_c) },
        Entry { key: "cmc_reduction", doc: "contrastive batch reduction: mean or sum", value: text(reduction_name(t.cmc.reduction)) },
        Entry { key: "tau_p", doc: "alignment temperature for positives", value: float(t.align.tau_p) },
        Entry { key: "tau_n", doc: "alignment temperature for negatives", value: float(t.align.tau_n) },
        Entry { key: "alpha", doc: "alignment margin for positives", value: float(t.align.alpha) },
        Entry { key: "beta", doc: "alignment margin for negatives", value: float(t.align.beta) },
        Entry { key: "align_negatives", doc: "aggregation of negative alignment terms: mean or sum", value: text(reduction_name(t.align.negatives)) },
        Entry { key: "label_smoothing", doc: "identity-loss label smoothing", value: float(t.label_smoothing) },
        Entry { key: "visual_hidden", doc: "hidden layer sizes of the visual MLP", value: ints(&t.visual_hidden) },
        Entry { key: "feature_dim", doc: "joint embedding dimension", value: int(t.feature_dim) },
        Entry { key: "embed_dim", doc: "frozen word embedding dimension", value: int(t.embed_dim) },
        Entry { key: "gru_hidden", doc: "GRU hidden size per direction", value: int(t.gru_hidden) },
        Entry { key: "rerank", doc: "report re-ranked results", value: Value::Boolean(t.rerank.enabled) },
        Entry { key: "rerank_k", doc: "neighbours used by re-ranking", value: int(t.rerank.k) },
        Entry { key: "rerank_weight", doc: "weight of the neighbourhood term", value: float(t.rerank.weight) },
        Entry { key: "rerank_include_self", doc: "count an item among its own neighbours", value: Value::Boolean(t.rerank.include_self) },
        Entry {
            key: "rerank_blend",
            doc: "add jaccard similarity or distance",
            value: text(match t.rerank.blend {
                Blend::Similarity => "similarity",
                Blend::Distance => "distance",
            }),
        },
        Entry { key: "checkpoint_every", doc: "epochs between checkpoints (0: final only)", value: int(t.checkpoint_every) },
        Entry { key: "seed", doc: "initialization and sampling seed", value: Value::Integer(t.seed as i64) },
    ]
}

/// Keys accepted in a configuration file.
pub fn known_keys() -> Vec<&'static str> {
    let cfg = ExperimentConfig::default();
    let mut keys = vec!["preset"];
    keys.extend(data_entries(&cfg.data).iter().map(|e| e.key));
    keys.extend(train_entries(&cfg.train).iter().map(|e| e.key));
    keys
}

fn render(entries: &[Entry], out: &mut String) {
    for e in entries {
        out.push_str(&format!("# {}\n{} = {}\n", e.doc, e.key, e.value));
    }
}

/// Canonical text form; parses back to an equal configuration.
pub fn to_toml_string(cfg: &ExperimentConfig) -> String {
    let mut out = String::from("# dataset\n");
    render(&data_entries(&cfg.data), &mut out);
    out.push_str("\n# model and training\n");
    render(&train_entries(&cfg.train), &mut out);
    out
}

/// SHA-256 of the settings that determine a training trajectory.
pub fn train_config_hash(cfg: &TrainConfig) -> [u8; 32] {
    let mut out = String::new();
    let entries: Vec<Entry> = train_entries(cfg).into_iter().filter(|e| e.key != "checkpoint_every").collect();
    render(&entries, &mut out);
    Sha256::digest(out.as_bytes()).into()
}

fn expect_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::Config(format!("`{key}` must be a non-negative integer, got {v}"))),
    }
}

fn expect_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) => Ok(*i as u64),
        _ => Err(Error::Config(format!("`{key}` must be an integer, got {v}"))),
    }
}

fn expect_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("`{key}` must be a number, got {v}"))),
    }
}

fn expect_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::Config(format!("`{key}` must be true or false, got {v}")))
}

fn expect_str<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str().ok_or_else(|| Error::Config(format!("`{key}` must be a string, got {v}")))
}

fn expect_usizes(key: &str, v: &Value) -> Result<Vec<usize>> {
    let arr = v.as_array().ok_or_else(|| Error::Config(format!("`{key}` must be an array, got {v}")))?;
    arr.iter().map(|x| expect_usize(key, x)).collect()
}

fn expect_reduction(key: &str, v: &Value) -> Result<Reduction> {
    match expect_str(key, v)? {
        "mean" => Ok(Reduction::Mean),
        "sum" => Ok(Reduction::Sum),
        other => Err(Error::Config(format!("`{key}` must be mean or sum, got `{other}`"))),
    }
}

fn apply(cfg: &mut ExperimentConfig, key: &str, v: &Value) -> Result<()> {
    let d = &mut cfg.data;
    let t = &mut cfg.train;
    match key {
        "n_ids" => d.n_ids = expect_usize(key, v)?,
        "n_train_ids" => d.n_train_ids = expect_usize(key, v)?,
        "n_val_ids" => d.n_val_ids = expect_usize(key, v)?,
        "images_per_id" => d.images_per_id = expect_usize(key, v)?,
        "captions_per_image" => d.captions_per_image = expect_usize(key, v)?,
        "slots" => d.slots = expect_usize(key, v)?,
        "choices" => d.choices = expect_usize(key, v)?,
        "noise_sigma" => d.noise_sigma = expect_f64(key, v)?,
        "block_scale" => d.block_scale = expect_f64(key, v)?,
        "fillers_per_caption" => d.fillers_per_caption = expect_usize(key, v)?,
        "filler_vocab" => d.filler_vocab = expect_usize(key, v)?,
        "data_seed" => d.seed = expect_u64(key, v)?,
        "epochs" => t.epochs = expect_usize(key, v)?,
        "base_lr" => t.base_lr = expect_f64(key, v)?,
        "warmup_epochs" => t.warmup_epochs = expect_usize(key, v)?,
        "warmup_start_lr" => t.warmup_start_lr = expect_f64(key, v)?,
        "decay_factor" => t.decay_factor = expect_f64(key, v)?,
        "decay_epochs" => t.decay_epochs = expect_usizes(key, v)?,
        "batch_p" => t.sampler.p = expect_usize(key, v)?,
        "batch_k" => t.sampler.k_inst = expect_usize(key, v)?,
        "optimizer" => {
            t.optimizer = match expect_str(key, v)? {
                "sgd" => Optimizer::Sgd,
                other => return Err(Error::Config(format!("unsupported optimizer `{other}`"))),
            }
        }
        "momentum" => t.momentum = expect_f64(key, v)?,
        "queue_size" => t.queue_capacity = expect_usize(key, v)?,
        "cmc_mode" => {
            t.cmc_mode = expect_str(key, v)?
                .parse()
                .map_err(|_| Error::Config(format!("`cmc_mode` must be on, off or positive_only, got {v}")))?
        }
        "tau_c" => t.cmc.tau_c = expect_f64(key, v)?,
        "cmc_reduction" => t.cmc.reduction = expect_reduction(key, v)?,
        "tau_p" => t.align.tau_p = expect_f64(key, v)?,
        "tau_n" => t.align.tau_n = expect_f64(key, v)?,
        "alpha" => t.align.alpha = expect_f64(key, v)?,
        "beta" => t.align.beta = expect_f64(key, v)?,
        "align_negatives" => t.align.negatives = expect_reduction(key, v)?,
        "label_smoothing" => t.label_smoothing = expect_f64(key, v)?,
        "visual_hidden" => t.visual_hidden = expect_usizes(key, v)?,
        "feature_dim" => t.feature_dim = expect_usize(key, v)?,
        "embed_dim" => t.embed_dim = expect_usize(key, v)?,
        "gru_hidden" => t.gru_hidden = expect_usize(key, v)?,
        "rerank" => t.rerank.enabled = expect_bool(key, v)?,
        "rerank_k" => t.rerank.k = expect_usize(key, v)?,
        "rerank_weight" => t.rerank.weight = expect_f64(key, v)?,
        "rerank_include_self" => t.rerank.include_self = expect_bool(key, v)?,
        "rerank_blend" => {
            t.rerank.blend = match expect_str(key, v)? {
                "similarity" => Blend::Similarity,
                "distance" => Blend::Distance,
                other => return Err(Error::Config(format!("`rerank_blend` must be similarity or distance, got `{other}`"))),
            }
        }
        "checkpoint_every" => t.checkpoint_every = expect_usize(key, v)?,
        "seed" => t.seed = expect_u64(key, v)?,
        other => return Err(Error::UnknownKey(other.to_string())),
    }
    Ok(())
}

/// Parses a configuration document. An optional `preset` key selects the
/// defaults the remaining keys override.
pub fn from_toml_str(s: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = s.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let preset = match table.get("preset") {
        Some(v) => expect_str("preset", v)?.parse()?,
        None => Preset::Desk,
    };
    let mut cfg = preset.config();
    for (key, v) in &table {
        if key == "preset" {
            continue;
        }
        if v.is_table() {
            return Err(Error::Config(format!("`{key}`: nested tables are not allowed; keys are flat")));
        }
        apply(&mut cfg, key, v)?;
    }
    cfg.data.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
    from_toml_str(&std::fs::read_to_string(path)?)
}
