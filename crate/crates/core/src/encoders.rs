//! Visual and textual encoders, each kept as a query/key parameter pair.
//!
//! The visual stream is an MLP over attribute-feature vectors. The textual
//! stream looks every token up in a frozen word table, contextualizes the
//! sequence with a bidirectional GRU, max-pools over time and projects to
//! the shared feature dimension. Both end in an L2 normalization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Unit-norm feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!("embedding norm {norm} is not 1")));
        }
        Ok(Embedding(vector))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Records every tensor on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Euclidean distance over all parameters.
    pub fn distance(&self, other: &ParamSet) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// Query parameters and their momentum-tracked key copy.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair {
    pub query: ParamSet,
    pub key: ParamSet,
}

impl EncoderPair {
    /// The key copy starts identical to the query parameters.
    pub fn new(query: ParamSet) -> Self {
        let key = query.clone();
        EncoderPair { query, key }
    }

    /// `θ_k ← m·θ_k + (1−m)·θ_q`, elementwise.
    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
        }
        for (k, q) in self.key.tensors.iter_mut().zip(&self.query.tensors) {
            for (kv, qv) in k.data_mut().iter_mut().zip(q.data()) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

pub struct VisualEncoder {
    pub config: VisualConfig,
}

impl VisualEncoder {
    pub fn new(config: VisualConfig) -> Self {
        VisualEncoder { config }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut params = ParamSet::new();
        let mut fan_in = self.config.input_dim;
        let widths = self.config.hidden.iter().chain(std::iter::once(&self.config.feature_dim));
        for (i, &width) in widths.enumerate() {
            params.push(format!("layer{i}.weight"), uniform_matrix(rng, fan_in, width));
            params.push(format!("layer{i}.bias"), Tensor::zeros(&[width]));
            fan_in = width;
        }
        params
    }

    /// `B×input_dim` features to `B×D` unit rows.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.config.input_dim {
            return Err(Error::shape("encode_visual", &[self.config.input_dim], &[cols]));
        }
        let layers = vars.len() / 2;
        let mut h = x;
        for l in 0..layers {
            let z = tape.matmul(h, vars[2 * l])?;
            h = tape.add_row(z, vars[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.tanh(h);
            }
        }
        tape.l2_normalize(h)
    }
}

/// Fixed per-token embedding table; never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenWordTable {
    vocab_size: usize,
    embed_dim: usize,
    seed: u64,
    table: Tensor,
}

impl FrozenWordTable {
    /// Rows drawn from a seeded unit Gaussian, then scaled to unit norm.
    pub fn new(seed: u64, vocab_size: usize, embed_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(vocab_size * embed_dim);
        for _ in 0..vocab_size {
            let row: Vec<f64> = (0..embed_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(row.iter().map(|v| v / norm));
        }
        FrozenWordTable {
            vocab_size,
            embed_dim,
            seed,
            table: Tensor::matrix(vocab_size, embed_dim, data).expect("consistent shape"),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lookup(&self, token: u32) -> Result<&[f64]> {
        if token as usize >= self.vocab_size {
            return Err(Error::OutOfVocab {
                token,
                vocab_size: self.vocab_size,
            });
        }
        Ok(self.table.row(token as usize))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden width of each GRU direction.
    pub hidden: usize,
    pub feature_dim: usize,
    pub max_len: usize,
}

/// Tape handles of one GRU direction.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn from_slice(vars: &[Var]) -> Self {
        GruVars {
            w_z: vars[0],
            w_r: vars[1],
            w_h: vars[2],
            b_z: vars[3],
            b_r: vars[4],
            b_h: vars[5],
        }
    }
}

/// One recurrence step:
/// `z = σ(W_z[x,h] + b_z)`, `r = σ(W_r[x,h] + b_r)`,
/// `h̃ = tanh(W_h[x, r⊙h] + b_h)`, `h' = (1−z)⊙h + z⊙h̃`.
///
/// Works row-wise, so `x` and `h` may carry a batch dimension.
pub fn gru_cell(tape: &mut Tape, p: &GruVars, x: Var, h: Var) -> Result<Var> {
    let xh = tape.concat_cols(&[x, h])?;
    let z = tape.matmul(xh, p.w_z)?;
    let z = tape.add_row(z, p.b_z)?;
    let z = tape.sigmoid(z);
    let r = tape.matmul(xh, p.w_r)?;
    let r = tape.add_row(r, p.b_r)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat_cols(&[x, rh])?;
    let cand = tape.matmul(xrh, p.w_h)?;
    let cand = tape.add_row(cand, p.b_h)?;
    let cand = tape.tanh(cand);
    let neg_z = tape.scale(z, -1.0);
    let keep = tape.add_scalar(neg_z, 1.0);
    let kept = tape.mul(keep, h)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(kept, fresh)
}

pub struct TextEncoder {
    pub config: TextConfig,
}

pub const TEXT_PARAM_NAMES: [&str; 14] = [
    "fwd.w_z", "fwd.w_r", "fwd.w_h", "fwd.b_z", "fwd.b_r", "fwd.b_h", "bwd.w_z", "bwd.w_r", "bwd.w_h", "bwd.b_z",
    "bwd.b_r", "bwd.b_h", "proj.weight", "proj.bias",
];

impl TextEncoder {
    pub fn new(config: TextConfig) -> Self {
        TextEncoder { config }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let c = &self.config;
        let mut params = ParamSet::new();
        let fan_in = c.embed_dim + c.hidden;
        for dir in ["fwd", "bwd"] {
            for gate in ["w_z", "w_r", "w_h"] {
                params.push(format!("{dir}.{gate}"), uniform_matrix(rng, fan_in, c.hidden));
            }
            for gate in ["b_z", "b_r", "b_h"] {
                params.push(format!("{dir}.{gate}"), Tensor::zeros(&[c.hidden]));
            }
        }
        params.push("proj.weight", uniform_matrix(rng, 2 * c.hidden, c.feature_dim));
        params.push("proj.bias", Tensor::zeros(&[c.feature_dim]));
        params
    }

    fn validate(&self, table: &FrozenWordTable, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence("encode_text"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Contract(format!(
                "caption length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        for &t in tokens {
            table.lookup(t)?;
        }
        Ok(())
    }

    /// Per-timestep `[h_fwd_t ; h_bwd_t]` for a batch of equal-length
    /// sequences, max-pooled over time: `B×2h`.
    fn pooled_states(&self, tape: &mut Tape, vars: &[Var], table: &FrozenWordTable, seqs: &[&[u32]]) -> Result<Var> {
        let len = seqs[0].len();
        let batch = seqs.len();
        let e = table.embed_dim();
        let inputs: Vec<Var> = (0..len)
            .map(|t| {
                let mut data = Vec::with_capacity(batch * e);
                for s in seqs {
                    data.extend_from_slice(table.lookup(s[t])?);
                }
                Ok(tape.constant(Tensor::matrix(batch, e, data)?))
            })
            .collect::<Result<_>>()?;

        let fwd = GruVars::from_slice(&vars[0..6]);
        let bwd = GruVars::from_slice(&vars[6..12]);
        let h0 = tape.constant(Tensor::zeros(&[batch, self.config.hidden]));

        let mut forward_states = Vec::with_capacity(len);
        let mut h = h0;
        for &x in &inputs {
            h = gru_cell(tape, &fwd, x, h)?;
            forward_states.push(h);
        }
        let mut backward_states = vec![h0; len];
        let mut h = h0;
        for t in (0..len).rev() {
            h = gru_cell(tape, &bwd, inputs[t], h)?;
            backward_states[t] = h;
        }
        let per_step: Vec<Var> = forward_states
            .iter()
            .zip(&backward_states)
            .map(|(f, b)| tape.concat_cols(&[*f, *b]))
            .collect::<Result<_>>()?;
        tape.max_of(&per_step)
    }

    /// Encodes a batch of token sequences to `B×D` unit rows. Sequences of
    /// different lengths are processed in length groups and returned in
    /// input order.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], table: &FrozenWordTable, seqs: &[&[u32]]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::EmptySequence("encode_text batch"));
        }
        if table.vocab_size() != self.config.vocab_size || table.embed_dim() != self.config.embed_dim {
            return Err(Error::shape(
                "encode_text",
                &[self.config.vocab_size, self.config.embed_dim],
                &[table.vocab_size(), table.embed_dim()],
            ));
        }
        for s in seqs {
            self.validate(table, s)?;
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in seqs.iter().enumerate() {
            groups.entry(s.len()).or_default().push(i);
        }
        let pooled = if groups.len() == 1 {
            self.pooled_states(tape, vars, table, seqs)?
        } else {
            let mut parts = Vec::with_capacity(groups.len());
            let mut order = Vec::with_capacity(seqs.len());
            for members in groups.values() {
                let group: Vec<&[u32]> = members.iter().map(|&i| seqs[i]).collect();
                parts.push(self.pooled_states(tape, vars, table, &group)?);
                order.extend_from_slice(members);
            }
            let stacked = tape.concat_rows(&parts)?;
            let mut restore = vec![0; seqs.len()];
            for (pos, &original) in order.iter().enumerate() {
                restore[original] = pos;
            }
            tape.select_rows(stacked, &restore)?
        };
        let projected = tape.matmul(pooled, vars[12])?;
        let projected = tape.add_row(projected, vars[13])?;
        tape.l2_normalize(projected)
    }
}

/// Visual feature vector to embedding, outside of any training graph.
pub fn encode_visual(encoder: &VisualEncoder, params: &ParamSet, x: &Tensor) -> Result<Embedding> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let row = tape.constant(Tensor::matrix(1, x.numel(), x.data().to_vec())?);
    let out = encoder.forward(&mut tape, &vars, row)?;
    Embedding::new(tape.value(out).data().to_vec())
}

/// Token sequence to embedding, outside of any training graph.
pub fn encode_text(
    encoder: &TextEncoder,
    params: &ParamSet,
    table: &FrozenWordTable,
    tokens: &[u32],
) -> Result<Embedding> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let out = encoder.forward(&mut tape, &vars, table, &[tokens])?;
    Embedding::new(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn small_text() -> (TextEncoder, FrozenWordTable) {
        let enc = TextEncoder::new(TextConfig {
            vocab_size: 10,
            embed_dim: 3,
            hidden: 2,
            feature_dim: 4,
            max_len: 8,
        });
        (enc, FrozenWordTable::new(5, 10, 3))
    }

    fn small_visual() -> VisualEncoder {
        VisualEncoder::new(VisualConfig {
            input_dim: 5,
            hidden: vec![6],
            feature_dim: 4,
        })
    }

    #[test]
    fn visual_output_is_unit_norm_and_deterministic() {
        let enc = small_visual();
        let params = enc.init(&mut ChaCha8Rng::seed_from_u64(1));
        let x = Tensor::vector(vec![0.3, -1.0, 2.0, 0.0, 0.5]);
        let a = encode_visual(&enc, &params, &x).unwrap();
        let b = encode_visual(&enc, &params, &x).unwrap();
        let norm: f64 = a.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
        assert_eq!(a, b);
    }

    #[test]
    fn visual_zero_weights_surface_degenerate_error() {
        let enc = small_visual();
        let mut params = enc.init(&mut ChaCha8Rng::seed_from_u64(1));
        for t in params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let x = Tensor::vector(vec![1.0; 5]);
        assert!(matches!(encode_visual(&enc, &params, &x), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn visual_dimension_mismatch() {
        let enc = small_visual();
        let params = enc.init(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(
            encode_visual(&enc, &params, &Tensor::vector(vec![1.0; 4])),
            Err(Error::Shape { .. })
        ));
    }

    fn zero_gru(tape: &mut Tape, e: usize, h: usize) -> GruVars {
        let mut v = Vec::new();
        for _ in 0..3 {
            v.push(tape.constant(Tensor::zeros(&[e + h, h])));
        }
        for _ in 0..3 {
            v.push(tape.constant(Tensor::zeros(&[h])));
        }
        GruVars::from_slice(&v)
    }

    #[test]
    fn gru_zero_params_closed_forms() {
        let mut tape = Tape::new();
        let p = zero_gru(&mut tape, 2, 3);
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.4, -0.9]).unwrap());
        let h0 = tape.constant(Tensor::zeros(&[1, 3]));
        let h1 = gru_cell(&mut tape, &p, x, h0).unwrap();
        assert_eq!(tape.value(h1).data(), &[0.0, 0.0, 0.0]);

        let v = tape.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.25]).unwrap());
        let h2 = gru_cell(&mut tape, &p, x, v).unwrap();
        assert_eq!(tape.value(h2).data(), &[0.5, -1.0, 0.125]);
    }

    /// Scalar, per-element GRU step written independently of the tape.
    fn gru_oracle(w: &[Vec<Vec<f64>>; 3], b: &[Vec<f64>; 3], x: &[f64], h: &[f64]) -> Vec<f64> {
        let hidden = h.len();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let affine = |k: usize, input: &[f64], j: usize| -> f64 {
            let mut acc = b[k][j];
            for (i, v) in input.iter().enumerate() {
                acc += v * w[k][i][j];
            }
            acc
        };
        let xh: Vec<f64> = x.iter().chain(h).cloned().collect();
        let z: Vec<f64> = (0..hidden).map(|j| sig(affine(0, &xh, j))).collect();
        let r: Vec<f64> = (0..hidden).map(|j| sig(affine(1, &xh, j))).collect();
        let xrh: Vec<f64> = x.iter().cloned().chain((0..hidden).map(|j| r[j] * h[j])).collect();
        let cand: Vec<f64> = (0..hidden).map(|j| affine(2, &xrh, j).tanh()).collect();
        (0..hidden).map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j]).collect()
    }

    #[test]
    fn gru_three_steps_match_scalar_oracle() {
        let (e, hd) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rnd = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let w: [Vec<Vec<f64>>; 3] = std::array::from_fn(|_| (0..e + hd).map(|_| rnd(hd)).collect());
        let b: [Vec<f64>; 3] = std::array::from_fn(|_| rnd(hd));
        let xs: Vec<Vec<f64>> = (0..3).map(|_| rnd(e)).collect();

        let mut tape = Tape::new();
        let mut vars = Vec::new();
        for k in 0..3 {
            let flat: Vec<f64> = w[k].iter().flatten().cloned().collect();
            vars.push(tape.constant(Tensor::matrix(e + hd, hd, flat).unwrap()));
        }
        for bk in &b {
            vars.push(tape.constant(Tensor::vector(bk.clone())));
        }
        let p = GruVars::from_slice(&vars);
        let mut h = tape.constant(Tensor::zeros(&[1, hd]));
        let mut h_oracle = vec![0.0; hd];
        for x in &xs {
            let xv = tape.constant(Tensor::matrix(1, e, x.clone()).unwrap());
            h = gru_cell(&mut tape, &p, xv, h).unwrap();
            h_oracle = gru_oracle(&w, &b, x, &h_oracle);
        }
        for (a, o) in tape.value(h).data().iter().zip(&h_oracle) {
            assert!((a - o).abs() <= 1e-12, "{a} vs {o}");
        }
    }

    #[test]
    fn text_output_contracts() {
        let (enc, table) = small_text();
        let params = enc.init(&mut ChaCha8Rng::seed_from_u64(3));
        let emb = encode_text(&enc, &params, &table, &[1, 4, 9, 2]).unwrap();
        assert_eq!(emb.dim(), 4);
        assert!(matches!(
            encode_text(&enc, &params, &table, &[]),
            Err(Error::EmptySequence(_))
        ));
        assert!(matches!(
            encode_text(&enc, &params, &table, &[1, 10]),
            Err(Error::OutOfVocab { token: 10, .. })
        ));
    }

    #[test]
    fn text_length_one_pools_to_the_single_state() {
        let (enc, table) = small_text();
        let params = enc.init(&mut ChaCha8Rng::seed_from_u64(4));
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let pooled = enc.pooled_states(&mut tape, &vars, &table, &[&[7]]).unwrap();

        let x = tape.constant(Tensor::matrix(1, 3, table.lookup(7).unwrap().to_vec()).unwrap());
        let h0 = tape.constant(Tensor::zeros(&[1, 2]));
        let f = gru_cell(&mut tape, &GruVars::from_slice(&vars[0..6]), x, h0).unwrap();
        let b = gru_cell(&mut tape, &GruVars::from_slice(&vars[6..12]), x, h0).unwrap();
        let cat = tape.concat_cols(&[f, b]).unwrap();
        assert_eq!(tape.value(pooled), tape.value(cat));
    }

    #[test]
    fn mixed_lengths_match_one_by_one_encoding() {
        let (enc, table) = small_text();
        let params = enc.init(&mut ChaCha8Rng::seed_from_u64(6));
        let seqs: Vec<&[u32]> = vec![&[1, 2, 3], &[4], &[5, 6, 7], &[8, 9]];
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let out = enc.forward(&mut tape, &vars, &table, &seqs).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let single = encode_text(&enc, &params, &table, s).unwrap();
            for (a, b) in tape.value(out).row(i).iter().zip(single.as_slice()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn frozen_table_gets_no_gradient() {
        let (enc, table) = small_text();
        let before = table.clone();
        let params = enc.init(&mut ChaCha8Rng::seed_from_u64(3));
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let out = enc.forward(&mut tape, &vars, &table, &[&[1, 2, 3]]).unwrap();
        let s = tape.sum(out);
        let grads = tape.backward(s).unwrap();
        // Only the parameter leaves carry gradients; every table lookup is a
        // constant node.
        let with_grad: Vec<usize> = (0..tape.len())
            .filter(|&i| grads.get(Var::from_index(i)).is_some())
            .collect();
        let expected: Vec<usize> = vars.iter().map(|v| v.index()).collect();
        assert_eq!(with_grad, expected);
        assert_eq!(expected.len(), TEXT_PARAM_NAMES.len());
        assert_eq!(before, table);
    }

    #[test]
    fn text_composition_passes_grad_check() {
        let (enc, table) = small_text();
        let params = enc.init(&mut ChaCha8Rng::seed_from_u64(9));
        let target = Tensor::vector(vec![0.5, -0.5, 0.5, 0.5]);
        let report = grad_check(
            |tape, vars| {
                let out = enc.forward(tape, vars, &table, &[&[1, 5, 2], &[3, 3]])?;
                let t = tape.constant(Tensor::from_rows(&[target.data(), target.data()])?);
                let prod = tape.mul(out, t)?;
                Ok(tape.sum(prod))
            },
            params.tensors(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn momentum_update_cases() {
        let mut q = ParamSet::new();
        q.push("w", Tensor::full(&[2, 2], 1.0));
        let mut pair = EncoderPair::new(q.clone());
        pair.momentum_update(0.999).unwrap();
        assert_eq!(pair.key, q);

        pair.key.tensors_mut()[0].data_mut().fill(0.0);
        pair.momentum_update(0.999).unwrap();
        for v in pair.key.tensors()[0].data() {
            assert!((v - 0.001).abs() < 1e-15);
        }
        assert!(matches!(pair.momentum_update(1.5), Err(Error::Config(_))));
        assert!(matches!(pair.momentum_update(-0.1), Err(Error::Config(_))));
    }

    #[test]
    fn momentum_closed_form_matches_iteration() {
        let m: f64 = 0.97;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut q = ParamSet::new();
        q.push("a", Tensor::vector((0..6).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let mut pair = EncoderPair::new(q.clone());
        let k0: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        pair.key.tensors_mut()[0].data_mut().copy_from_slice(&k0);
        let gap0 = pair.key.distance(&pair.query);
        for n in 1..=200 {
            pair.momentum_update(m).unwrap();
            let mn = m.powi(n);
            for ((k, q), k0) in pair.key.tensors()[0].data().iter().zip(q.tensors()[0].data()).zip(&k0) {
                assert!((k - (q + mn * (k0 - q))).abs() <= 1e-10);
            }
            assert!((pair.key.distance(&pair.query) - mn * gap0).abs() <= 1e-9);
        }
    }
}
