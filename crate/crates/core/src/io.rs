//! Little-endian binary formats for feature stores, datasets and
//! checkpoints, and the JSON/JSON-lines text outputs.
//!
//! Feature store layout:
//!
//! ```text
//! "CMMF" | version u16 | modality u8 | count u32 | dim u32
//! count·dim × f32 | count × u32 identity
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cm_moco::{FeatureQueue, QueueEntry};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::retrieval::{Gallery, Modality, RetrievalReport};
use crate::synth_data::{CaptionRecord, DataConfig, Dataset, Identity, ImageRecord, RngState, Split};
use crate::tensor::Tensor;
use crate::train::{AblationTable, Checkpoint, EpochMetrics};

pub const FEATURE_MAGIC: &[u8; 4] = b"CMMF";
pub const DATASET_MAGIC: &[u8; 4] = b"CMMD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMMC";
pub const FORMAT_VERSION: u16 = 1;
pub const FEATURE_HEADER_LEN: usize = 15;
/// Stored feature vectors must be unit-norm to this tolerance.
pub const STORE_NORM_TOL: f64 = 1e-6;

#[derive(Default)]
struct Encoder(Vec<u8>);

impl Encoder {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::format("output", format!("count {n} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.len(d)?;
        }
        self.f64s(t.data());
        Ok(())
    }
    fn tensors(&mut self, ts: &[Tensor]) -> Result<()> {
        self.len(ts.len())?;
        for t in ts {
            self.tensor(t)?;
        }
        Ok(())
    }
}

struct Decoder<'a> {
    kind: &'static str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(kind: &'static str, data: &'a [u8]) -> Self {
        Decoder { kind, data, pos: 0 }
    }
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::format(self.kind, detail)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {} (needed {n} more)", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    /// A count whose elements take at least `min_bytes` each; guards
    /// allocations against corrupt lengths.
    fn count(&mut self, min_bytes: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(min_bytes) > self.data.len() - self.pos {
            return Err(self.err(format!("count {n} exceeds the remaining {} bytes", self.data.len() - self.pos)));
        }
        Ok(n)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.data.len() - self.pos {
            return Err(self.err("truncated float block"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u8()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| self.usize()).collect::<Result<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| self.err("tensor too large"))?;
        let data = self.f64s(n)?;
        Tensor::new(shape, data)
    }
    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.count(1)?;
        (0..n).map(|_| self.tensor()).collect()
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.err("bad magic"));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.err(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

/// Embeddings of one modality as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub modality: Modality,
    pub dim: usize,
    /// Row-major `count×dim`.
    pub vectors: Vec<f32>,
    pub identities: Vec<u32>,
}

impl FeatureStore {
    pub fn from_embeddings(modality: Modality, embeddings: &Tensor, identities: Vec<u32>) -> Result<Self> {
        if embeddings.shape().len() != 2 || embeddings.rows() != identities.len() {
            return Err(Error::shape("feature store", embeddings.shape(), &[identities.len(), embeddings.cols()]));
        }
        let store = FeatureStore {
            modality,
            dim: embeddings.cols(),
            vectors: embeddings.data().iter().map(|&v| v as f32).collect(),
            identities,
        };
        store.check_norms()?;
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn check_norms(&self) -> Result<()> {
        for i in 0..self.len() {
            let norm = self.row(i).iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > STORE_NORM_TOL {
                return Err(Error::format("feature store", format!("vector {i} has norm {norm}")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::default();
        e.bytes(FEATURE_MAGIC);
        e.u16(FORMAT_VERSION);
        e.u8(self.modality.tag());
        e.len(self.len())?;
        e.len(self.dim)?;
        for &v in &self.vectors {
            e.f32(v);
        }
        for &id in &self.identities {
            e.u32(id);
        }
        Ok(e.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new("feature store", bytes);
        d.header(FEATURE_MAGIC)?;
        let tag = d.u8()?;
        let modality = Modality::from_tag(tag).ok_or_else(|| d.err(format!("unknown modality tag {tag}")))?;
        let count = d.usize()?;
        let dim = d.usize()?;
        let expected = (count as u128) * (dim as u128) * 4 + (count as u128) * 4 + FEATURE_HEADER_LEN as u128;
        if bytes.len() as u128 != expected {
            return Err(d.err(format!("length {} does not match {count}×{dim} (expected {expected})", bytes.len())));
        }
        let vectors = (0..count * dim).map(|_| d.f32()).collect::<Result<Vec<_>>>()?;
        let identities = (0..count).map(|_| d.u32()).collect::<Result<Vec<_>>>()?;
        d.finish()?;
        let store = FeatureStore {
            modality,
            dim,
            vectors,
            identities,
        };
        store.check_norms()?;
        Ok(store)
    }

    /// f64 gallery of the stored vectors.
    pub fn to_gallery(&self) -> Result<Gallery> {
        let data = self.vectors.iter().map(|&v| f64::from(v)).collect();
        Gallery::new(Tensor::matrix(self.len(), self.dim, data)?, self.identities.clone(), self.modality)
    }
}

fn encode_data_config(e: &mut Encoder, c: &DataConfig) -> Result<()> {
    for v in [
        c.n_ids,
        c.n_train_ids,
        c.n_val_ids,
        c.images_per_id,
        c.captions_per_image,
        c.slots,
        c.choices,
        c.fillers_per_caption,
        c.filler_vocab,
    ] {
        e.len(v)?;
    }
    e.f64(c.noise_sigma);
    e.f64(c.block_scale);
    e.u64(c.seed);
    Ok(())
}

fn decode_data_config(d: &mut Decoder) -> Result<DataConfig> {
    Ok(DataConfig {
        n_ids: d.usize()?,
        n_train_ids: d.usize()?,
        n_val_ids: d.usize()?,
        images_per_id: d.usize()?,
        captions_per_image: d.usize()?,
        slots: d.usize()?,
        choices: d.usize()?,
        fillers_per_caption: d.usize()?,
        filler_vocab: d.usize()?,
        noise_sigma: d.f64()?,
        block_scale: d.f64()?,
        seed: d.u64()?,
    })
}

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut e = Encoder::default();
    e.bytes(DATASET_MAGIC);
    e.u16(FORMAT_VERSION);
    encode_data_config(&mut e, &ds.config)?;
    e.len(ds.identities.len())?;
    for ident in &ds.identities {
        e.u32(ident.id);
        e.u8(ident.split.as_u8());
        e.len(ident.attributes.len())?;
        for &a in &ident.attributes {
            e.u16(a);
        }
    }
    e.len(ds.images.len())?;
    e.len(ds.input_dim())?;
    for img in &ds.images {
        e.u32(img.identity);
        e.u8(img.split.as_u8());
        e.f64s(&img.feature);
    }
    e.len(ds.captions.len())?;
    for c in &ds.captions {
        e.u32(c.identity);
        e.u32(c.image);
        e.u8(c.split.as_u8());
        e.len(c.tokens.len())?;
        for &t in &c.tokens {
            let t = u16::try_from(t).map_err(|_| Error::format("dataset", format!("token {t} exceeds u16")))?;
            e.u16(t);
        }
    }
    Ok(e.0)
}

fn split(d: &Decoder, v: u8) -> Result<Split> {
    Split::from_u8(v).ok_or_else(|| d.err(format!("unknown split tag {v}")))
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut d = Decoder::new("dataset", bytes);
    d.header(DATASET_MAGIC)?;
    let config = decode_data_config(&mut d)?;
    config.validate().map_err(|e| d.err(format!("stored configuration invalid: {e}")))?;
    let n = d.count(9)?;
    let mut identities = Vec::with_capacity(n);
    for _ in 0..n {
        let id = d.u32()?;
        let s = d.u8()?;
        let split = split(&d, s)?;
        let a = d.count(2)?;
        let attributes = (0..a).map(|_| d.u16()).collect::<Result<_>>()?;
        identities.push(Identity { id, attributes, split });
    }
    let n = d.count(5)?;
    let dim = d.usize()?;
    if dim != config.input_dim() {
        return Err(d.err(format!("feature dimension {dim}, configuration implies {}", config.input_dim())));
    }
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let identity = d.u32()?;
        let s = d.u8()?;
        let split = split(&d, s)?;
        images.push(ImageRecord {
            identity,
            split,
            feature: d.f64s(dim)?,
        });
    }
    let n = d.count(13)?;
    let mut captions = Vec::with_capacity(n);
    for _ in 0..n {
        let identity = d.u32()?;
        let image = d.u32()?;
        let s = d.u8()?;
        let split = split(&d, s)?;
        let len = d.count(2)?;
        let tokens = (0..len).map(|_| d.u16().map(u32::from)).collect::<Result<_>>()?;
        captions.push(CaptionRecord {
            identity,
            image,
            tokens,
            split,
        });
    }
    d.finish()?;
    let vocab = config.vocab_size() as u32;
    for c in &captions {
        if c.image as usize >= images.len() || c.tokens.iter().any(|&t| t >= vocab) {
            return Err(d.err("caption refers to a missing image or token"));
        }
    }
    Ok(Dataset {
        config,
        identities,
        images,
        captions,
    })
}

fn encode_model_config(e: &mut Encoder, c: &ModelConfig) -> Result<()> {
    e.len(c.input_dim)?;
    e.len(c.visual_hidden.len())?;
    for &h in &c.visual_hidden {
        e.len(h)?;
    }
    for v in [c.feature_dim, c.vocab_size, c.embed_dim, c.gru_hidden, c.max_len, c.classes] {
        e.len(v)?;
    }
    e.f64(c.label_smoothing);
    e.u64(c.table_seed);
    e.u64(c.init_seed);
    Ok(())
}

fn decode_model_config(d: &mut Decoder) -> Result<ModelConfig> {
    let input_dim = d.usize()?;
    let n = d.count(4)?;
    let visual_hidden = (0..n).map(|_| d.usize()).collect::<Result<_>>()?;
    Ok(ModelConfig {
        input_dim,
        visual_hidden,
        feature_dim: d.usize()?,
        vocab_size: d.usize()?,
        embed_dim: d.usize()?,
        gru_hidden: d.usize()?,
        max_len: d.usize()?,
        classes: d.usize()?,
        label_smoothing: d.f64()?,
        table_seed: d.u64()?,
        init_seed: d.u64()?,
    })
}

fn encode_metrics(e: &mut Encoder, m: &EpochMetrics) {
    e.u64(m.epoch as u64);
    for v in [m.lcmc, m.lalign, m.lid, m.total, m.val_rank1, m.lr] {
        e.f64(v);
    }
}

fn decode_metrics(d: &mut Decoder) -> Result<EpochMetrics> {
    Ok(EpochMetrics {
        epoch: d.u64()? as usize,
        lcmc: d.f64()?,
        lalign: d.f64()?,
        lid: d.f64()?,
        total: d.f64()?,
        val_rank1: d.f64()?,
        lr: d.f64()?,
    })
}

pub fn checkpoint_to_bytes(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut e = Encoder::default();
    e.bytes(CHECKPOINT_MAGIC);
    e.u16(FORMAT_VERSION);
    e.bytes(&c.config_hash);
    encode_model_config(&mut e, &c.model_config)?;
    e.tensors(&c.visual_query)?;
    e.tensors(&c.visual_key)?;
    e.tensors(&c.text_query)?;
    e.tensors(&c.text_key)?;
    e.tensor(&c.head)?;
    e.len(c.queue.capacity())?;
    e.len(c.queue.dim())?;
    e.len(c.queue.len())?;
    for entry in c.queue.entries() {
        e.f64s(&entry.visual);
        e.f64s(&entry.textual);
        e.u32(entry.identity);
    }
    e.tensors(&c.optimizer_state)?;
    e.bytes(&c.sampler.seed);
    e.u64(c.sampler.stream);
    e.u128(c.sampler.word_pos);
    e.u64(c.epoch as u64);
    e.u64(c.step as u64);
    e.len(c.trace.len())?;
    for m in &c.trace {
        encode_metrics(&mut e, m);
    }
    Ok(e.0)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut d = Decoder::new("checkpoint", bytes);
    d.header(CHECKPOINT_MAGIC)?;
    let config_hash = d.array::<32>()?;
    let model_config = decode_model_config(&mut d)?;
    let visual_query = d.tensors()?;
    let visual_key = d.tensors()?;
    let text_query = d.tensors()?;
    let text_key = d.tensors()?;
    let head = d.tensor()?;
    let capacity = d.usize()?;
    let dim = d.usize()?;
    let n = d.count(4)?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        entries.push(QueueEntry {
            visual: d.f64s(dim)?,
            textual: d.f64s(dim)?,
            identity: d.u32()?,
        });
    }
    let queue = FeatureQueue::from_entries(capacity, dim, entries).map_err(|e| d.err(e.to_string()))?;
    let optimizer_state = d.tensors()?;
    let sampler = RngState {
        seed: d.array::<32>()?,
        stream: d.u64()?,
        word_pos: d.u128()?,
    };
    let epoch = d.u64()? as usize;
    let step = d.u64()? as usize;
    let n = d.count(56)?;
    let trace = (0..n).map(|_| decode_metrics(&mut d)).collect::<Result<_>>()?;
    d.finish()?;
    Ok(Checkpoint {
        config_hash,
        model_config,
        visual_query,
        visual_key,
        text_query,
        text_key,
        head,
        queue,
        optimizer_state,
        sampler,
        epoch,
        step,
        trace,
    })
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_features(path: &Path, store: &FeatureStore) -> Result<()> {
    write_atomic(path, &store.to_bytes()?)
}

pub fn load_features(path: &Path) -> Result<FeatureStore> {
    FeatureStore::from_bytes(&std::fs::read(path)?)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &dataset_to_bytes(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(c)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// One JSON object per line.
pub fn metrics_to_jsonl(trace: &[EpochMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in trace {
        out.push_str(&serde_json::to_string(m).map_err(|e| Error::format("metrics log", e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn metrics_from_jsonl(text: &str) -> Result<Vec<EpochMetrics>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format("metrics log", format!("line {}: {e}", i + 1))))
        .collect()
}

/// Evaluation output written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub query_count: usize,
    pub gallery_count: usize,
    pub rerank_k: usize,
    pub rerank_weight: f64,
    pub reports: Vec<RetrievalReport>,
}

pub fn report_to_json(report: &EvaluationReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::format("report", e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn report_from_json(text: &str) -> Result<EvaluationReport> {
    serde_json::from_str(text).map_err(|e| Error::format("report", e.to_string()))
}

pub fn ablation_to_json(table: &AblationTable) -> Result<String> {
    let mut s = serde_json::to_string_pretty(table).map_err(|e| Error::format("ablation table", e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn ablation_from_json(text: &str) -> Result<AblationTable> {
    serde_json::from_str(text).map_err(|e| Error::format("ablation table", e.to_string()))
}
