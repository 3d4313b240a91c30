//! Transformer encoder with an MLM head and a decoder with cross-attention
//! and a CMLM head. The decoder runs bidirectionally for masked prediction
//! and causally for autoregressive translation, with the same parameters.
//!
//! Layers are pre-norm. Embeddings are shared across encoder, decoder and
//! both output projections unless `tie_embeddings` is off.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{io as tio, Array, Element, Graph, TensorError, Var};
use crate::vocab::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    BadToken { id: usize, vocab: usize },
    #[error("parameter {name:?}: {problem}")]
    Param { name: String, problem: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Length offsets `tgt − src` are classified in `[-MAX_LENGTH_OFFSET, MAX_LENGTH_OFFSET]`.
pub const MAX_LENGTH_OFFSET: i64 = 20;
pub const LENGTH_CLASSES: usize = 2 * MAX_LENGTH_OFFSET as usize + 1;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
    /// Learned position table, initialised from the sinusoid.
    pub learned_positions: bool,
    pub length_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            max_positions: 256,
            vocab_size: 0,
            tie_embeddings: true,
            learned_positions: false,
            length_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.model_dim % 2 != 0 {
            return bad(format!("model_dim {} must be even", self.model_dim));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.max_positions == 0 {
            return bad("vocab_size, ffn_dim and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Scalar parameter count, in closed form.
    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.model_dim, self.ffn_dim, self.vocab_size);
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let mut n = v * d;
        if self.learned_positions {
            n += self.max_positions * d;
        }
        n += 2 * ln + self.enc_layers * (ln + attn + ln + ffn);
        n += 2 * ln + self.dec_layers * (ln + attn + ln + attn + ln + ffn);
        n += 2 * v;
        if !self.tie_embeddings {
            n += 2 * v * d;
        }
        if self.length_head {
            n += d * LENGTH_CLASSES + LENGTH_CLASSES;
        }
        n
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.model_dim, self.ffn_dim, self.vocab_size);
        let mut out: Vec<(String, Vec<usize>)> = vec![("embed".into(), vec![v, d])];
        if self.learned_positions {
            out.push(("positions".into(), vec![self.max_positions, d]));
        }
        let ln = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.g"), vec![d]));
            out.push((format!("{p}.b"), vec![d]));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for m in ["q", "k", "v", "o"] {
                out.push((format!("{p}.{m}.w"), vec![d, d]));
                out.push((format!("{p}.{m}.b"), vec![d]));
            }
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, f]));
            out.push((format!("{p}.b1"), vec![f]));
            out.push((format!("{p}.w2"), vec![f, d]));
            out.push((format!("{p}.b2"), vec![d]));
        };
        for side in ["enc", "dec"] {
            ln(&mut out, &format!("{side}.emb_ln"));
            let layers = if side == "enc" { self.enc_layers } else { self.dec_layers };
            for l in 0..layers {
                ln(&mut out, &format!("{side}.{l}.self_ln"));
                attn(&mut out, &format!("{side}.{l}.self"));
                if side == "dec" {
                    ln(&mut out, &format!("{side}.{l}.cross_ln"));
                    attn(&mut out, &format!("{side}.{l}.cross"));
                }
                ln(&mut out, &format!("{side}.{l}.ffn_ln"));
                ffn(&mut out, &format!("{side}.{l}.ffn"));
            }
            ln(&mut out, &format!("{side}.final_ln"));
        }
        for head in ["mlm", "cmlm"] {
            if !self.tie_embeddings {
                out.push((format!("{head}.proj"), vec![v, d]));
            }
            out.push((format!("{head}.bias"), vec![v]));
        }
        if self.length_head {
            out.push(("length.w".into(), vec![d, LENGTH_CLASSES]));
            out.push(("length.b".into(), vec![LENGTH_CLASSES]));
        }
        out
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/dim))`, `PE(pos, 2i+1) = cos(·)`.
pub fn sinusoidal_positions(length: usize, dim: usize) -> Result<Array<f64>, ModelError> {
    if dim % 2 != 0 {
        return Err(ModelError::Config(format!("position dim {dim} must be even")));
    }
    let mut data = vec![0.0; length * dim];
    for pos in 0..length {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Array::from_vec(&[length, dim], data)?)
}

/// Named parameter arrays plus the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    arrays: Vec<Array<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Element> ModelParams<T> {
    /// Seeded initialisation. Values are drawn in double precision, so
    /// single- and double-precision models from one seed agree up to rounding.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let embed_std = (d as f64).powf(-0.5);
        let mut named = Vec::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name == "positions" {
                sinusoidal_positions(config.max_positions, d)?.into_vec()
            } else if name == "embed" || name.ends_with(".proj") {
                let normal = Normal::new(0.0, embed_std).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with(".g") {
                vec![1.0; n]
            } else if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            };
            let data = data.into_iter().map(T::from_f64_lossy).collect();
            named.push((name, Array::from_vec(&shape, data)?));
        }
        Self::from_named(config.clone(), named)
    }

    /// Builds from named arrays, checking names and shapes against `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Array<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut by_name: BTreeMap<String, Array<T>> = named.into_iter().collect();
        let mut names = Vec::new();
        let mut arrays = Vec::new();
        for (name, shape) in config.param_shapes() {
            let a = by_name
                .remove(&name)
                .ok_or_else(|| ModelError::Param { name: name.clone(), problem: "missing".into() })?;
            if a.shape() != shape.as_slice() {
                return Err(ModelError::Param {
                    name,
                    problem: format!("shape {:?}, expected {:?}", a.shape(), shape),
                });
            }
            names.push(name);
            arrays.push(a);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ModelError::Param { name: extra.clone(), problem: "not part of this config".into() });
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(ModelParams { config, names, arrays, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Array<T>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array<T>] {
        &mut self.arrays
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.position(name).map(|i| &self.arrays[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(Array::all_finite)
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            arrays: self.arrays.iter().map(Array::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        let named: Vec<(String, Array<T>)> = self.names.iter().cloned().zip(self.arrays.iter().cloned()).collect();
        tio::write_named(w, &named)?;
        Ok(())
    }

    pub fn read<R: Read>(config: ModelConfig, r: &mut R) -> Result<Self, ModelError> {
        Self::from_named(config, tio::read_named(r)?)
    }
}

/// Right-padded token batch, row-major `[batch, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Padded {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl Padded {
    pub fn new<S: AsRef<[TokenId]>>(seqs: &[S]) -> Self {
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        Self::with_len(seqs, len)
    }

    /// Pads every row to `len`, which must cover the longest sequence.
    pub fn with_len<S: AsRef<[TokenId]>>(seqs: &[S], len: usize) -> Self {
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            assert!(s.len() <= len, "sequence longer than padded length");
            ids.extend(s.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat(crate::vocab::PAD_ID as usize).take(len - s.len()));
            lengths.push(s.len());
        }
        Padded { ids, batch: seqs.len(), len, lengths }
    }

    pub fn is_pad(&self, b: usize, pos: usize) -> bool {
        pos >= self.lengths[b]
    }

    /// Flat row index of `(b, pos)`.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.len + pos
    }
}

/// Encoder output: hidden rows `[batch·len, dim]`.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub hidden: Var,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Mlm,
    Cmlm,
}

/// One forward pass: a graph with the parameters bound as leaves.
pub struct Forward<'p, T> {
    pub graph: Graph<T>,
    params: &'p ModelParams<T>,
    vars: Vec<Var>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<'p, T: Element> Forward<'p, T> {
    /// `trainable` registers parameters as gradient leaves; `train` enables
    /// dropout drawn from `seed`.
    pub fn new(params: &'p ModelParams<T>, trainable: bool, train: bool, seed: u64) -> Self {
        let mut graph = Graph::new();
        let vars = params
            .arrays
            .iter()
            .map(|a| if trainable { graph.param(a.clone()) } else { graph.constant(a.clone()) })
            .collect();
        Forward { graph, params, vars, train, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn p(&self, name: &str) -> Var {
        self.vars[self.params.index[name]]
    }

    /// Gradients aligned with [`ModelParams::arrays`]; zeros where none flowed.
    pub fn param_grads(&mut self) -> Vec<Array<T>> {
        self.vars
            .clone()
            .into_iter()
            .zip(&self.params.arrays)
            .map(|(v, a)| self.graph.take_grad(v).unwrap_or_else(|| Array::zeros(a.shape())))
            .collect()
    }

    /// Current graph size, for [`Forward::rewind`].
    pub fn mark(&self) -> usize {
        self.graph.len()
    }

    pub fn rewind(&mut self, mark: usize) {
        self.graph.truncate(mark);
    }

    fn check(&self, x: &Padded) -> Result<(), ModelError> {
        let cfg = self.config();
        if x.len > cfg.max_positions {
            return Err(ModelError::TooLong { len: x.len, max: cfg.max_positions });
        }
        if let Some(&id) = x.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(ModelError::BadToken { id, vocab: cfg.vocab_size });
        }
        Ok(())
    }

    fn embed(&mut self, x: &Padded, side: &str) -> Result<Var, ModelError> {
        let d = self.config().model_dim;
        let tok = self.graph.embedding_gather(self.p("embed"), &x.ids)?;
        let tok = self.graph.scale(tok, T::from_f64_lossy((d as f64).sqrt()));
        let pos_ids: Vec<usize> = (0..x.batch).flat_map(|_| 0..x.len).collect();
        let pos = if self.config().learned_positions {
            self.graph.embedding_gather(self.p("positions"), &pos_ids)?
        } else {
            let table = sinusoidal_positions(x.len, d)?;
            let mut data = Vec::with_capacity(pos_ids.len() * d);
            for _ in 0..x.batch {
                data.extend(table.data().iter().map(|v| T::from_f64_lossy(*v)));
            }
            self.graph.constant(Array::from_vec(&[x.batch * x.len, d], data)?)
        };
        let h = self.graph.add(tok, pos)?;
        let h = self.norm(h, &format!("{side}.emb_ln"))?;
        Ok(self.dropout(h))
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.config().dropout;
        self.graph.dropout(x, p, &mut self.rng, self.train)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        Ok(self.graph.layer_norm(x, g, b, T::from_f64_lossy(LN_EPS))?)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var, ModelError> {
        let y = self.graph.matmul(x, self.p(w), false)?;
        Ok(self.graph.add_bias(y, self.p(b))?)
    }

    /// `[batch·len, dim]` → `[batch·heads, len, head_dim]`.
    fn split_heads(&mut self, x: Var, batch: usize, len: usize) -> Result<Var, ModelError> {
        let (h, dh) = (self.config().heads, self.config().head_dim());
        let x = self.graph.reshape(x, &[batch, len, h, dh])?;
        let x = self.graph.permute(x, &[0, 2, 1, 3])?;
        Ok(self.graph.reshape(x, &[batch * h, len, dh])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        prefix: &str,
        xq: Var,
        xkv: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        key_lengths: &[usize],
        causal: bool,
    ) -> Result<Var, ModelError> {
        let (heads, dh, d) = (self.config().heads, self.config().head_dim(), self.config().model_dim);
        let q = self.linear(xq, &format!("{prefix}.q.w"), &format!("{prefix}.q.b"))?;
        let q = self.graph.scale(q, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
        let k = self.linear(xkv, &format!("{prefix}.k.w"), &format!("{prefix}.k.b"))?;
        let v = self.linear(xkv, &format!("{prefix}.v.w"), &format!("{prefix}.v.b"))?;
        let q = self.split_heads(q, batch, lq)?;
        let k = self.split_heads(k, batch, lk)?;
        let v = self.split_heads(v, batch, lk)?;
        let scores = self.graph.bmm(q, k, true)?;
        let mut blocked = Vec::with_capacity(batch * heads * lq * lk);
        for &klen in key_lengths {
            for _ in 0..heads {
                for i in 0..lq {
                    blocked.extend((0..lk).map(|j| j >= klen || (causal && j > i)));
                }
            }
        }
        let scores = self.graph.masked_fill(scores, &blocked, T::neg_infinity())?;
        let probs = self.graph.softmax(scores, 2)?;
        let ctx = self.graph.bmm(probs, v, false)?;
        let ctx = self.graph.reshape(ctx, &[batch, heads, lq, dh])?;
        let ctx = self.graph.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.graph.reshape(ctx, &[batch * lq, d])?;
        self.linear(ctx, &format!("{prefix}.o.w"), &format!("{prefix}.o.b"))
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.graph.gelu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn residual(&mut self, x: Var, branch: Var) -> Result<Var, ModelError> {
        let branch = self.dropout(branch);
        Ok(self.graph.add(x, branch)?)
    }

    pub fn encode(&mut self, src: &Padded) -> Result<Encoded, ModelError> {
        self.check(src)?;
        let (b, l) = (src.batch, src.len);
        let mut h = self.embed(src, "enc")?;
        for layer in 0..self.config().enc_layers {
            let p = format!("enc.{layer}");
            let x = self.norm(h, &format!("{p}.self_ln"))?;
            let a = self.attention(&format!("{p}.self"), x, x, b, l, l, &src.lengths, false)?;
            h = self.residual(h, a)?;
            let x = self.norm(h, &format!("{p}.ffn_ln"))?;
            let f = self.ffn(x, &format!("{p}.ffn"))?;
            h = self.residual(h, f)?;
        }
        let hidden = self.norm(h, "enc.final_ln")?;
        Ok(Encoded { hidden, batch: b, len: l, lengths: src.lengths.clone() })
    }

    /// Repeats a single-sentence encoding `times` times along the batch.
    pub fn repeat_encoded(&mut self, enc: &Encoded, times: usize) -> Result<Encoded, ModelError> {
        assert_eq!(enc.batch, 1, "only single-sentence encodings can be repeated");
        let rows: Vec<usize> = (0..times).flat_map(|_| 0..enc.len).collect();
        let hidden = self.graph.embedding_gather(enc.hidden, &rows)?;
        Ok(Encoded { hidden, batch: times, len: enc.len, lengths: vec![enc.lengths[0]; times] })
    }

    /// Decoder hidden rows `[batch·len, dim]`. `causal` restricts each
    /// position to itself and earlier positions.
    pub fn decode(&mut self, tgt: &Padded, enc: &Encoded, causal: bool) -> Result<Var, ModelError> {
        self.check(tgt)?;
        assert_eq!(tgt.batch, enc.batch, "source and target batch sizes differ");
        let (b, l) = (tgt.batch, tgt.len);
        let mut h = self.embed(tgt, "dec")?;
        for layer in 0..self.config().dec_layers {
            let p = format!("dec.{layer}");
            let x = self.norm(h, &format!("{p}.self_ln"))?;
            let a = self.attention(&format!("{p}.self"), x, x, b, l, l, &tgt.lengths, causal)?;
            h = self.residual(h, a)?;
            let x = self.norm(h, &format!("{p}.cross_ln"))?;
            let a = self.attention(&format!("{p}.cross"), x, enc.hidden, b, l, enc.len, &enc.lengths, false)?;
            h = self.residual(h, a)?;
            let x = self.norm(h, &format!("{p}.ffn_ln"))?;
            let f = self.ffn(x, &format!("{p}.ffn"))?;
            h = self.residual(h, f)?;
        }
        self.norm(h, "dec.final_ln")
    }

    /// Vocabulary logits `[rows.len(), vocab]` for the selected hidden rows.
    pub fn logits(&mut self, hidden: Var, rows: &[usize], head: Head) -> Result<Var, ModelError> {
        let name = match head {
            Head::Mlm => "mlm",
            Head::Cmlm => "cmlm",
        };
        let picked = self.graph.embedding_gather(hidden, rows)?;
        let proj = if self.config().tie_embeddings { self.p("embed") } else { self.p(&format!("{name}.proj")) };
        let out = self.graph.matmul(picked, proj, true)?;
        Ok(self.graph.add_bias(out, self.p(&format!("{name}.bias")))?)
    }

    /// Length-offset logits `[batch, LENGTH_CLASSES]` read at source position 0.
    pub fn length_logits(&mut self, enc: &Encoded) -> Result<Var, ModelError> {
        if !self.config().length_head {
            return Err(ModelError::Config("model has no length head".into()));
        }
        let rows: Vec<usize> = (0..enc.batch).map(|b| b * enc.len).collect();
        let first = self.graph.embedding_gather(enc.hidden, &rows)?;
        self.linear(first, "length.w", "length.b")
    }
}

/// Class index of a length offset, clamped to the representable range.
pub fn length_class(src_len: usize, tgt_len: usize) -> usize {
    let off = (tgt_len as i64 - src_len as i64).clamp(-MAX_LENGTH_OFFSET, MAX_LENGTH_OFFSET);
    (off + MAX_LENGTH_OFFSET) as usize
}

/// Target length implied by a length class, at least 1.
pub fn length_from_class(src_len: usize, class: usize) -> usize {
    (src_len as i64 + class as i64 - MAX_LENGTH_OFFSET).max(1) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
            max_positions: 32,
            vocab_size: vocab,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn sinusoid_values() {
        let t = sinusoidal_positions(3, 4).unwrap();
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        let row1 = &t.data()[4..8];
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in row1.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((row1[0] - 0.841471).abs() < 1e-5 && (row1[3] - 0.999950).abs() < 1e-5);
        assert!(sinusoidal_positions(3, 5).is_err());
    }

    #[test]
    fn sinusoid_rows_distinct() {
        let t = sinusoidal_positions(256, 64).unwrap();
        let rows: Vec<&[f64]> = t.data().chunks(64).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let dist: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(dist > 1e-3, "rows {i} and {j} collide");
            }
        }
    }

    #[test]
    fn param_count_closed_form() {
        for cfg in [
            tiny(30),
            ModelConfig { vocab_size: 100, ..ModelConfig::default() },
            ModelConfig {
                tie_embeddings: false,
                learned_positions: true,
                length_head: false,
                enc_layers: 3,
                dec_layers: 1,
                ..tiny(17)
            },
        ] {
            let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
            assert_eq!(p.scalar_count(), cfg.param_count());
        }
        // hand count for the tiny config: d=8, f=16, V=30
        let (d, f, v) = (8, 16, 30);
        let enc_layer = 2 * d + 4 * (d * d + d) + 2 * d + (2 * d * f + f + d);
        let dec_layer = enc_layer + 2 * d + 4 * (d * d + d);
        let hand = v * d + 2 * (4 * d) + 2 * enc_layer + 2 * dec_layer + 2 * v + 41 * d + 41;
        assert_eq!(tiny(30).param_count(), hand);
    }

    #[test]
    fn shapes_and_errors() {
        let p = ModelParams::<f64>::init(&tiny(20), 1).unwrap();
        let mut f = Forward::new(&p, false, false, 0);
        let src = Padded::new(&[vec![5u32, 6, 7], vec![5, 8]]);
        let enc = f.encode(&src).unwrap();
        assert_eq!(f.graph.shape(enc.hidden), &[6, 8]);
        let rows: Vec<usize> = (0..6).collect();
        let lg = f.logits(enc.hidden, &rows, Head::Mlm).unwrap();
        assert_eq!(f.graph.shape(lg), &[6, 20]);
        let ll = f.length_logits(&enc).unwrap();
        assert_eq!(f.graph.shape(ll), &[2, LENGTH_CLASSES]);
        let long = Padded::new(&[vec![5u32; 40]]);
        assert!(matches!(f.encode(&long), Err(ModelError::TooLong { .. })));
        let bad = Padded::new(&[vec![25u32]]);
        assert!(matches!(f.encode(&bad), Err(ModelError::BadToken { .. })));
    }

    #[test]
    fn all_pad_input_is_defined() {
        let p = ModelParams::<f64>::init(&tiny(20), 1).unwrap();
        let mut f = Forward::new(&p, false, false, 0);
        let src = Padded::with_len(&[Vec::<u32>::new()], 4);
        let enc = f.encode(&src).unwrap();
        assert!(f.graph.value(enc.hidden).all_finite());
    }

    #[test]
    fn length_classes() {
        assert_eq!(length_class(5, 5), 20);
        assert_eq!(length_class(5, 100), 40);
        assert_eq!(length_class(30, 1), 0);
        assert_eq!(length_from_class(5, 20), 5);
        assert_eq!(length_from_class(2, 0), 1);
    }

    #[test]
    fn from_named_rejects_wrong_shapes() {
        let cfg = tiny(20);
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let mut named: Vec<(String, Array<f32>)> = p.names().iter().cloned().zip(p.arrays().iter().cloned()).collect();
        named[0].1 = Array::zeros(&[3, 3]);
        assert!(ModelParams::from_named(cfg.clone(), named).is_err());
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        let q = ModelParams::<f32>::read(cfg, &mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }
}
