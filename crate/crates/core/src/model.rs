//! The two-stream model: visual and textual encoder pairs, the frozen word
//! table and the shared identity classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{EncoderPair, FrozenWordTable, ParamSet, TextConfig, TextEncoder, VisualConfig, VisualEncoder};
use crate::error::{Error, Result};
use crate::objectives::ClassifierHead;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub visual_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub max_len: usize,
    pub classes: usize,
    pub label_smoothing: f64,
    pub table_seed: u64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn visual(&self) -> VisualConfig {
        VisualConfig {
            input_dim: self.input_dim,
            hidden: self.visual_hidden.clone(),
            feature_dim: self.feature_dim,
        }
    }

    pub fn text(&self) -> TextConfig {
        TextConfig {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.gru_hidden,
            feature_dim: self.feature_dim,
            max_len: self.max_len,
        }
    }
}

/// A training batch: aligned image features, captions and identities.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B×input_dim`
    pub images: Tensor,
    pub captions: Vec<Vec<u32>>,
    pub identities: Vec<u32>,
    /// Classifier targets, one per sample.
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Tape handles of the trainable parameters.
#[derive(Clone, Debug)]
pub struct QueryVars {
    pub visual: Vec<Var>,
    pub text: Vec<Var>,
    pub head: Var,
}

pub struct Model {
    pub config: ModelConfig,
    pub visual: EncoderPair,
    pub text: EncoderPair,
    pub head: ClassifierHead,
    table: FrozenWordTable,
    visual_encoder: VisualEncoder,
    text_encoder: TextEncoder,
}

const INFERENCE_CHUNK: usize = 128;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let visual_encoder = VisualEncoder::new(config.visual());
        let text_encoder = TextEncoder::new(config.text());
        let visual = visual_encoder.init(&mut rng);
        let text = text_encoder.init(&mut rng);
        let bound = 1.0 / (config.feature_dim as f64).sqrt();
        let head_data = (0..config.feature_dim * config.classes)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let head = ClassifierHead::new(
            Tensor::matrix(config.feature_dim, config.classes, head_data)?,
            config.label_smoothing,
        )?;
        Model::from_parts(config, EncoderPair::new(visual), EncoderPair::new(text), head)
    }

    /// Reassembles a model from stored parameters, checking them against the
    /// structure the configuration implies.
    pub fn from_parts(config: ModelConfig, visual: EncoderPair, text: EncoderPair, head: ClassifierHead) -> Result<Self> {
        if config.classes == 0 || config.feature_dim == 0 {
            return Err(Error::Config("model needs at least one class and a non-zero feature dimension".into()));
        }
        let visual_encoder = VisualEncoder::new(config.visual());
        let text_encoder = TextEncoder::new(config.text());
        let mut probe = ChaCha8Rng::seed_from_u64(0);
        let expected_visual = visual_encoder.init(&mut probe);
        let expected_text = text_encoder.init(&mut probe);
        for (what, pair, expected) in [("visual", &visual, &expected_visual), ("text", &text, &expected_text)] {
            if !pair.query.same_structure(expected) || !pair.key.same_structure(expected) {
                return Err(Error::Config(format!("{what} parameters do not match the model configuration")));
            }
        }
        if head.weight.shape() != [config.feature_dim, config.classes] {
            return Err(Error::shape(
                "classifier",
                head.weight.shape(),
                &[config.feature_dim, config.classes],
            ));
        }
        let table = FrozenWordTable::new(config.table_seed, config.vocab_size, config.embed_dim);
        Ok(Model {
            config,
            visual,
            text,
            head,
            table,
            visual_encoder,
            text_encoder,
        })
    }

    pub fn table(&self) -> &FrozenWordTable {
        &self.table
    }

    pub fn visual_encoder(&self) -> &VisualEncoder {
        &self.visual_encoder
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text_encoder
    }

    pub fn query_params_finite(&self) -> bool {
        self.visual.query.tensors().iter().all(Tensor::all_finite)
            && self.text.query.tensors().iter().all(Tensor::all_finite)
            && self.head.weight.all_finite()
    }

    pub fn bind_query(&self, tape: &mut Tape) -> QueryVars {
        QueryVars {
            visual: self.visual.query.bind(tape, true),
            text: self.text.query.bind(tape, true),
            head: tape.param(self.head.weight.clone()),
        }
    }

    /// Query features `(V^q, T^q)` of a batch on the given tape.
    pub fn forward(&self, tape: &mut Tape, vars: &QueryVars, batch: &Batch) -> Result<(Var, Var)> {
        let x = tape.constant(batch.images.clone());
        let vq = self.visual_encoder.forward(tape, &vars.visual, x)?;
        let seqs: Vec<&[u32]> = batch.captions.iter().map(Vec::as_slice).collect();
        let tq = self.text_encoder.forward(tape, &vars.text, &self.table, &seqs)?;
        Ok((vq, tq))
    }

    /// Key features `(V^k, T^k)` of a batch, outside of any gradient path.
    pub fn encode_keys(&self, batch: &Batch) -> Result<(Tensor, Tensor)> {
        let v = self.run_visual(&self.visual.key, &batch.images)?;
        let seqs: Vec<&[u32]> = batch.captions.iter().map(Vec::as_slice).collect();
        let t = self.run_text(&self.text.key, &seqs)?;
        Ok((v, t))
    }

    fn run_visual(&self, params: &ParamSet, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.visual_encoder.forward(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }

    fn run_text(&self, params: &ParamSet, seqs: &[&[u32]]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let out = self.text_encoder.forward(&mut tape, &vars, &self.table, seqs)?;
        Ok(tape.value(out).clone())
    }

    /// Query-encoder embeddings of image features (`N×input_dim` → `N×D`).
    pub fn encode_images(&self, features: &Tensor) -> Result<Tensor> {
        let n = features.rows();
        let cols = features.cols();
        let mut data = Vec::with_capacity(n * self.config.feature_dim);
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let chunk = Tensor::matrix(end - start, cols, features.data()[start * cols..end * cols].to_vec())?;
            data.extend(self.run_visual(&self.visual.query, &chunk)?.into_data());
        }
        Tensor::matrix(n, self.config.feature_dim, data)
    }

    /// Query-encoder embeddings of token sequences (`N` → `N×D`).
    pub fn encode_captions(&self, captions: &[Vec<u32>]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(captions.len() * self.config.feature_dim);
        for chunk in captions.chunks(INFERENCE_CHUNK) {
            let seqs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
            data.extend(self.run_text(&self.text.query, &seqs)?.into_data());
        }
        Tensor::matrix(captions.len(), self.config.feature_dim, data)
    }
}

/// Plain stochastic gradient descent.
#[derive(Clone, Debug, Default)]
pub struct Sgd;

impl Sgd {
    /// `θ ← θ − lr·∇θ` for the query encoders and the classifier.
    pub fn apply(&self, model: &mut Model, vars: &QueryVars, grads: &mut Gradients, lr: f64) {
        let step = |t: &mut Tensor, g: Option<Tensor>| {
            if let Some(g) = g {
                for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
        };
        for (t, v) in model.visual.query.tensors_mut().iter_mut().zip(&vars.visual) {
            step(t, grads.take(*v));
        }
        for (t, v) in model.text.query.tensors_mut().iter_mut().zip(&vars.text) {
            step(t, grads.take(*v));
        }
        step(&mut model.head.weight, grads.take(vars.head));
    }
}
