//! A small BERT-style encoder: learned token and position embeddings, post-LN
//! transformer layers, attentive pooling and a dense classifier head.
//!
//! Every layer's output is kept in a [`LayerStack`] so the distillation losses
//! can align intermediate hidden states.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{bind_all, Parameters};
use crate::{bail, NodeId, PoolMode, Result, Rng, Scalar, Tape, Tensor};

/// Reserved token ids.
pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 100,
            max_seq_len: 16,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            num_layers: 4,
            dropout: 0.2,
            activation: Activation::Gelu,
            init_std: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            bail!(Config, "vocab_size must cover the reserved ids, got {}", self.vocab_size);
        }
        if self.max_seq_len == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            bail!(Config, "max_seq_len, hidden_dim and ffn_dim must be positive");
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            bail!(Config, "hidden_dim {} is not divisible by num_heads {}", self.hidden_dim, self.num_heads);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout must lie in [0, 1), got {}", self.dropout);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
}

impl<F: Scalar> LayerParams<F> {
    fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let (d, f, s) = (cfg.hidden_dim, cfg.ffn_dim, cfg.init_std);
        let w = |shape: &[usize], rng: &mut Rng| Tensor::randn(shape, s, rng).param();
        let z = |n: usize| Tensor::zeros(&[n]).param();
        let o = |n: usize| Tensor::filled(&[n], F::one()).param();
        Self {
            wq: w(&[d, d], rng),
            bq: z(d),
            wk: w(&[d, d], rng),
            bk: z(d),
            wv: w(&[d, d], rng),
            bv: z(d),
            wo: w(&[d, d], rng),
            bo: z(d),
            ln1_gain: o(d),
            ln1_bias: z(d),
            w1: w(&[d, f], rng),
            b1: z(f),
            w2: w(&[f, d], rng),
            b2: z(d),
            ln2_gain: o(d),
            ln2_bias: z(d),
        }
    }
}

impl<F: Scalar> Parameters<F> for LayerParams<F> {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        let fields: [(&str, &'a mut Tensor<F>); 16] = [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
        ];
        for (name, t) in fields {
            out.push((alloc::format!("{prefix}{name}"), t));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub config: EncoderConfig,
    pub token_embedding: Tensor<F>,
    pub position_embedding: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
}

impl<F: Scalar> Parameters<F> for EncoderParams<F> {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        out.push((alloc::format!("{prefix}token_embedding"), &mut self.token_embedding));
        out.push((alloc::format!("{prefix}position_embedding"), &mut self.position_embedding));
        self.layers.visit_mut(&alloc::format!("{prefix}layer."), out);
    }
}

/// Token ids and padding mask for `batch` sequences of `seq` positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, mask: Vec<bool>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq || mask.len() != batch * seq {
            bail!(Input, "token batch of {batch}×{seq} has {} ids and {} mask entries", ids.len(), mask.len());
        }
        Ok(Self { ids, mask, batch, seq })
    }

    /// Pads one unbatched sequence to `seq` positions.
    pub fn single(tokens: &[u32], seq: usize) -> Result<Self> {
        if tokens.len() > seq {
            bail!(Input, "sequence of {} tokens exceeds {seq}", tokens.len());
        }
        let mut ids = vec![PAD_ID; seq];
        ids[..tokens.len()].copy_from_slice(tokens);
        let mask = (0..seq).map(|i| i < tokens.len()).collect();
        Self::new(ids, mask, 1, seq)
    }
}

/// Hidden states of every layer for a batch: `layers[0]` is the embedding
/// output, `layers[l]` the output of transformer layer `l`. Each node is a
/// `[batch·seq, d]` matrix; rows where `mask` is false are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<NodeId>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    pub dim: usize,
    /// Attention nodes per transformer layer, for inspection.
    pub attention: Vec<NodeId>,
}

impl LayerStack {
    pub fn top(&self) -> NodeId {
        *self.layers.last().expect("stack holds the embedding output")
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    /// The `seq × d` hidden matrix of example `b` at `layer`.
    pub fn example<'t, F: Scalar>(&self, tape: &'t Tape<F>, layer: usize, b: usize) -> &'t [F] {
        let n = self.seq * self.dim;
        &tape.value(self.layers[layer])[b * n..(b + 1) * n]
    }
}

fn param_node<F: Scalar>(t: &Tensor<F>) -> Result<NodeId> {
    match t.node {
        Some(id) => Ok(id),
        None => bail!(Contract, "parameter used before being bound to a tape"),
    }
}

fn dropout<F: Scalar>(tape: &mut Tape<F>, x: NodeId, p: f64, rng: Option<&mut Rng>) -> Result<NodeId> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = F::of(1.0 / (1.0 - p));
            let mask = (0..tape.value(x).len())
                .map(|_| if rng.bernoulli(p) { F::zero() } else { keep })
                .collect();
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

fn dense<F: Scalar>(tape: &mut Tape<F>, x: NodeId, w: &Tensor<F>, b: &Tensor<F>) -> Result<NodeId> {
    let y = tape.matmul(x, param_node(w)?)?;
    tape.add_bias(y, param_node(b)?)
}

impl<F: Scalar> EncoderParams<F> {
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, l, d) = (config.vocab_size, config.max_seq_len, config.hidden_dim);
        let token_embedding = Tensor::randn(&[v, d], config.init_std, rng).param();
        let position_embedding = Tensor::randn(&[l, d], config.init_std, rng).param();
        let layers = (0..config.num_layers).map(|_| LayerParams::init(&config, rng)).collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
        })
    }

    /// Binds all parameters to `tape` and runs [`EncoderParams::encode`].
    pub fn forward(&mut self, tape: &mut Tape<F>, tokens: &TokenBatch, dropout: Option<&mut Rng>) -> Result<LayerStack> {
        bind_all(self, tape);
        self.encode(tape, tokens, dropout)
    }

    /// Post-LN transformer forward pass over already-bound parameters.
    /// Dropout is applied only when `dropout_rng` is given.
    pub fn encode(&self, tape: &mut Tape<F>, tokens: &TokenBatch, mut dropout_rng: Option<&mut Rng>) -> Result<LayerStack> {
        let cfg = &self.config;
        let TokenBatch { ids, mask, batch, seq } = tokens;
        let (batch, seq) = (*batch, *seq);
        if seq > cfg.max_seq_len {
            bail!(Input, "sequence length {seq} exceeds max_seq_len {}", cfg.max_seq_len);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
            bail!(Input, "token id {bad} is outside the vocabulary of {}", cfg.vocab_size);
        }
        let p = cfg.dropout;
        let tok = tape.gather(param_node(&self.token_embedding)?, ids.iter().map(|&i| i as usize).collect())?;
        let pos_ids = (0..batch * seq).map(|i| i % seq).collect();
        let pos = tape.gather(param_node(&self.position_embedding)?, pos_ids)?;
        let emb = tape.add(tok, pos)?;
        let mut x = dropout(tape, emb, p, dropout_rng.as_deref_mut())?;
        let mut layers = vec![x];
        let mut attention = Vec::with_capacity(self.layers.len());
        for lp in &self.layers {
            let q = dense(tape, x, &lp.wq, &lp.bq)?;
            let k = dense(tape, x, &lp.wk, &lp.bk)?;
            let v = dense(tape, x, &lp.wv, &lp.bv)?;
            let a = tape.attention(q, k, v, cfg.num_heads, seq, mask)?;
            attention.push(a);
            let o = dense(tape, a, &lp.wo, &lp.bo)?;
            let o = dropout(tape, o, p, dropout_rng.as_deref_mut())?;
            let r = tape.add(x, o)?;
            let x1 = tape.layer_norm(r, param_node(&lp.ln1_gain)?, param_node(&lp.ln1_bias)?)?;
            let f = dense(tape, x1, &lp.w1, &lp.b1)?;
            let f = match cfg.activation {
                Activation::Gelu => tape.gelu(f),
                Activation::Relu => tape.relu(f),
            };
            let f = dense(tape, f, &lp.w2, &lp.b2)?;
            let f = dropout(tape, f, p, dropout_rng.as_deref_mut())?;
            let r = tape.add(x1, f)?;
            x = tape.layer_norm(r, param_node(&lp.ln2_gain)?, param_node(&lp.ln2_bias)?)?;
            layers.push(x);
        }
        Ok(LayerStack {
            layers,
            mask: mask.clone(),
            batch,
            seq,
            dim: cfg.hidden_dim,
            attention,
        })
    }
}

/// Additive attention pooling: `s_i = u · tanh(W h_i + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentivePooler<F> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
    pub u: Tensor<F>,
}

impl<F: Scalar> AttentivePooler<F> {
    pub fn init(dim: usize, query_dim: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            w: Tensor::randn(&[dim, query_dim], std, rng).param(),
            b: Tensor::zeros(&[query_dim]).param(),
            u: Tensor::randn(&[query_dim, 1], std, rng).param(),
        }
    }

    /// Pools each sequence of the `[batch·seq, d]` matrix `h` into `[batch, d]`.
    pub fn pool(&self, tape: &mut Tape<F>, h: NodeId, seq: usize, mask: &[bool]) -> Result<NodeId> {
        let proj = dense(tape, h, &self.w, &self.b)?;
        let act = tape.tanh(proj);
        let scores = tape.matmul(act, param_node(&self.u)?)?;
        tape.attn_pool(h, scores, seq, mask)
    }
}

impl<F: Scalar> Parameters<F> for AttentivePooler<F> {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        out.push((alloc::format!("{prefix}w"), &mut self.w));
        out.push((alloc::format!("{prefix}b"), &mut self.b));
        out.push((alloc::format!("{prefix}u"), &mut self.u));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<F> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> ClassifierHead<F> {
    pub fn init(dim: usize, classes: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            bail!(Config, "a classifier needs at least 2 classes, got {classes}");
        }
        Ok(Self {
            w: Tensor::randn(&[dim, classes], std, rng).param(),
            b: Tensor::zeros(&[classes]).param(),
        })
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    /// Returns `(logits, softmax(logits / t))`, both `[batch, C]`.
    pub fn classify(&self, tape: &mut Tape<F>, pooled: NodeId, t: F) -> Result<(NodeId, NodeId)> {
        let logits = dense(tape, pooled, &self.w, &self.b)?;
        let probs = tape.softmax_rows(logits, t)?;
        Ok((logits, probs))
    }
}

impl<F: Scalar> Parameters<F> for ClassifierHead<F> {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        out.push((alloc::format!("{prefix}w"), &mut self.w));
        out.push((alloc::format!("{prefix}b"), &mut self.b));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Pooling {
    #[default]
    Attentive,
    Average,
    Max,
    Cls,
}

/// Pooling layer plus classifier head; shared by all teachers during
/// co-finetuning, private to the student.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolHead<F> {
    pub pooling: Pooling,
    pub pooler: AttentivePooler<F>,
    pub head: ClassifierHead<F>,
}

/// Output nodes of a [`PoolHead`] forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub pooled: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

impl<F: Scalar> PoolHead<F> {
    pub fn init(dim: usize, query_dim: usize, classes: usize, pooling: Pooling, std: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            pooling,
            pooler: AttentivePooler::init(dim, query_dim, std, rng),
            head: ClassifierHead::init(dim, classes, std, rng)?,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<F>, stack: &LayerStack, t: F) -> Result<HeadOutput> {
        bind_all(self, tape);
        self.apply(tape, stack, t)
    }

    /// Pools the top layer of `stack` and classifies it; parameters must be bound.
    pub fn apply(&self, tape: &mut Tape<F>, stack: &LayerStack, t: F) -> Result<HeadOutput> {
        let top = stack.top();
        let pooled = match self.pooling {
            Pooling::Attentive => self.pooler.pool(tape, top, stack.seq, &stack.mask)?,
            Pooling::Average => tape.pool(top, stack.seq, &stack.mask, PoolMode::Average)?,
            Pooling::Max => tape.pool(top, stack.seq, &stack.mask, PoolMode::Max)?,
            Pooling::Cls => tape.pool(top, stack.seq, &stack.mask, PoolMode::Cls)?,
        };
        let (logits, probs) = self.head.classify(tape, pooled, t)?;
        Ok(HeadOutput { pooled, logits, probs })
    }
}

impl<F: Scalar> Parameters<F> for PoolHead<F> {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        if self.pooling == Pooling::Attentive {
            self.pooler.visit_mut(&alloc::format!("{prefix}pooler."), out);
        }
        self.head.visit_mut(&alloc::format!("{prefix}head."), out);
    }
}

/// An encoder with its own pooling layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<F> {
    pub encoder: EncoderParams<F>,
    pub head: PoolHead<F>,
}

impl<F: Scalar> Parameters<F> for Classifier<F> {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        self.encoder.visit_mut(&alloc::format!("{prefix}encoder."), out);
        self.head.visit_mut(&alloc::format!("{prefix}head."), out);
    }
}

impl<F: Scalar> Classifier<F> {
    /// Logits `[batch, C]` with dropout disabled.
    pub fn predict_logits(&mut self, tokens: &TokenBatch) -> Result<Vec<F>> {
        let mut tape = Tape::new();
        let stack = self.encoder.forward(&mut tape, tokens, None)?;
        let out = self.head.forward(&mut tape, &stack, F::one())?;
        Ok(tape.value(out.logits).to_vec())
    }
}

fn single_sequence<F: Scalar>(tape: &mut Tape<F>, h: &Tensor<F>, mask: &[bool]) -> Result<(NodeId, usize)> {
    if h.shape().len() != 2 || mask.len() != h.rows() {
        bail!(Input, "hidden matrix {:?} does not match mask of {}", h.shape(), mask.len());
    }
    let seq = h.rows();
    Ok((tape.constant(h.shape().to_vec(), h.values().to_vec())?, seq))
}

/// Attentive pooling of one `L×d` hidden matrix.
pub fn attentive_pool<F: Scalar>(h: &Tensor<F>, mask: &[bool], pooler: &AttentivePooler<F>) -> Result<Vec<F>> {
    let mut tape = Tape::new();
    let mut pooler = pooler.clone();
    bind_all(&mut pooler, &mut tape);
    let (hn, seq) = single_sequence(&mut tape, h, mask)?;
    let out = pooler.pool(&mut tape, hn, seq, mask)?;
    Ok(tape.value(out).to_vec())
}

/// Average, max or first-position pooling of one `L×d` hidden matrix.
pub fn pool_mode_baselines<F: Scalar>(h: &Tensor<F>, mask: &[bool], mode: PoolMode) -> Result<Vec<F>> {
    let mut tape = Tape::new();
    let (hn, seq) = single_sequence(&mut tape, h, mask)?;
    let out = tape.pool(hn, seq, mask, mode)?;
    Ok(tape.value(out).to_vec())
}

/// Logits and tempered probabilities for one pooled vector.
pub fn classify<F: Scalar>(pooled: &[F], head: &ClassifierHead<F>, t: F) -> Result<(Vec<F>, Vec<F>)> {
    let mut tape = Tape::new();
    let mut head = head.clone();
    bind_all(&mut head, &mut tape);
    let x = tape.constant(vec![1, pooled.len()], pooled.to_vec())?;
    let (logits, probs) = head.classify(&mut tape, x, t)?;
    Ok((tape.value(logits).to_vec(), tape.value(probs).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::softmax;

    fn tiny_config(layers: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            max_seq_len: 5,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            num_layers: layers,
            dropout: 0.0,
            activation: Activation::Gelu,
            init_std: 0.3,
        }
    }

    fn tokens() -> TokenBatch {
        TokenBatch::new(
            vec![1, 4, 7, 3, 0, 1, 9, 0, 0, 0],
            vec![true, true, true, true, false, true, true, false, false, false],
            2,
            5,
        )
        .unwrap()
    }

    #[test]
    fn zero_layers_keep_only_embeddings() {
        let mut enc = EncoderParams::<f64>::init(tiny_config(0), &mut Rng::seed(1)).unwrap();
        let mut tape = Tape::new();
        let stack = enc.forward(&mut tape, &tokens(), None).unwrap();
        assert_eq!(stack.layers.len(), 1);
        let emb = stack.example(&tape, 0, 0);
        let tok = enc.token_embedding.values();
        let pos = enc.position_embedding.values();
        for c in 0..8 {
            assert_eq!(emb[8 + c], tok[4 * 8 + c] + pos[8 + c]);
        }
    }

    #[test]
    fn single_unmasked_token_gets_all_attention() {
        let mut enc = EncoderParams::<f64>::init(tiny_config(3), &mut Rng::seed(2)).unwrap();
        let toks = TokenBatch::new(vec![1, 5, 6, 0, 0], vec![true, false, false, false, false], 1, 5).unwrap();
        let mut tape = Tape::new();
        let stack = enc.forward(&mut tape, &toks, None).unwrap();
        for &a in &stack.attention {
            for row in tape.attention_probs(a).unwrap().chunks(5) {
                assert_eq!(row, &[1.0, 0.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut enc = EncoderParams::<f64>::init(tiny_config(1), &mut Rng::seed(3)).unwrap();
        let mut tape = Tape::new();
        let oov = TokenBatch::single(&[1, 12], 5).unwrap();
        assert!(matches!(enc.forward(&mut tape, &oov, None), Err(crate::Error::Input(_))));
        let long = TokenBatch::new(vec![1; 6], vec![true; 6], 1, 6).unwrap();
        assert!(matches!(enc.forward(&mut tape, &long, None), Err(crate::Error::Input(_))));
        assert!(TokenBatch::single(&[1; 6], 5).is_err());
        let mut bad = tiny_config(1);
        bad.num_heads = 3;
        assert!(EncoderParams::<f64>::init(bad, &mut Rng::seed(0)).is_err());
    }

    // Scalar re-implementation of one post-LN encoder, example by example.
    fn reference_forward(enc: &EncoderParams<f64>, ids: &[u32], mask: &[bool]) -> Vec<Vec<f64>> {
        let cfg = &enc.config;
        let (seq, d, heads) = (ids.len(), cfg.hidden_dim, cfg.num_heads);
        let dh = d / heads;
        let mm = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>, n_in: usize, n_out: usize| -> Vec<f64> {
            let mut out = vec![0.0; seq * n_out];
            for r in 0..seq {
                for c in 0..n_out {
                    let mut s = b.values()[c];
                    for k in 0..n_in {
                        s += x[r * n_in + k] * w.values()[k * n_out + c];
                    }
                    out[r * n_out + c] = s;
                }
            }
            out
        };
        let ln = |x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            for r in 0..seq {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                for c in 0..d {
                    out[r * d + c] = (row[c] - mean) / num_traits::Float::sqrt(var + 1e-5) * g.values()[c] + b.values()[c];
                }
            }
            out
        };
        let mut x = vec![0.0; seq * d];
        for r in 0..seq {
            for c in 0..d {
                x[r * d + c] = enc.token_embedding.values()[ids[r] as usize * d + c] + enc.position_embedding.values()[r * d + c];
            }
        }
        let mut outs = vec![x.clone()];
        for lp in &enc.layers {
            let q = mm(&x, &lp.wq, &lp.bq, d, d);
            let k = mm(&x, &lp.wk, &lp.bk, d, d);
            let v = mm(&x, &lp.wv, &lp.bv, d, d);
            let mut a = vec![0.0; seq * d];
            for h in 0..heads {
                for i in 0..seq {
                    let mut scores = vec![f64::NEG_INFINITY; seq];
                    for j in 0..seq {
                        if mask[j] {
                            let mut s = 0.0;
                            for c in 0..dh {
                                s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                            }
                            scores[j] = s / num_traits::Float::sqrt(dh as f64);
                        }
                    }
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| num_traits::Float::exp(s - mx)).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..seq {
                        for c in 0..dh {
                            a[i * d + h * dh + c] += e[j] / z * v[j * d + h * dh + c];
                        }
                    }
                }
            }
            let o = mm(&a, &lp.wo, &lp.bo, d, d);
            let r: Vec<f64> = x.iter().zip(&o).map(|(p, q)| p + q).collect();
            let x1 = ln(&r, &lp.ln1_gain, &lp.ln1_bias);
            let f = mm(&x1, &lp.w1, &lp.b1, d, cfg.ffn_dim);
            let f: Vec<f64> = f.iter().map(|&v| crate::ops::gelu(v)).collect();
            let f = mm(&f, &lp.w2, &lp.b2, cfg.ffn_dim, d);
            let r: Vec<f64> = x1.iter().zip(&f).map(|(p, q)| p + q).collect();
            x = ln(&r, &lp.ln2_gain, &lp.ln2_bias);
            outs.push(x.clone());
        }
        outs
    }

    #[test]
    fn two_layer_forward_matches_scalar_reference() {
        let mut enc = EncoderParams::<f64>::init(tiny_config(2), &mut Rng::seed(9)).unwrap();
        let toks = tokens();
        let mut tape = Tape::new();
        let stack = enc.forward(&mut tape, &toks, None).unwrap();
        for b in 0..2 {
            let want = reference_forward(&enc, &toks.ids[b * 5..b * 5 + 5], &toks.mask[b * 5..b * 5 + 5]);
            for (l, w) in want.iter().enumerate() {
                let got = stack.example(&tape, l, b);
                for (x, y) in got.iter().zip(w) {
                    assert!((x - y).abs() < 1e-10, "layer {l} example {b}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn dropout_is_deterministic_per_seed_and_off_without_rng() {
        let mut cfg = tiny_config(2);
        cfg.dropout = 0.2;
        let mut enc = EncoderParams::<f64>::init(cfg, &mut Rng::seed(4)).unwrap();
        let run = |enc: &mut EncoderParams<f64>, rng: Option<&mut Rng>| {
            let mut tape = Tape::new();
            let s = enc.forward(&mut tape, &tokens(), rng).unwrap();
            tape.value(s.top()).to_vec()
        };
        assert_eq!(run(&mut enc, None), run(&mut enc, None));
        let a = run(&mut enc, Some(&mut Rng::seed(5)));
        let b = run(&mut enc, Some(&mut Rng::seed(5)));
        assert_eq!(a, b);
        assert_ne!(a, run(&mut enc, None));
    }

    #[test]
    fn attentive_pool_cases() {
        let mut rng = Rng::seed(6);
        let pooler = AttentivePooler::<f64>::init(8, 5, 0.5, &mut rng);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let same = Tensor::from_fn(&[4, 8], |k| row[k % 8]);
        let out = attentive_pool(&same, &[true; 4], &pooler).unwrap();
        for (a, b) in out.iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }

        let h = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let out = attentive_pool(&h, &[false, false, true, false], &pooler).unwrap();
        assert_eq!(out.as_slice(), &h.values()[16..24]);
        assert!(attentive_pool(&h, &[false; 4], &pooler).is_err());

        // Scalar oracle: s_i = u · tanh(W h_i + b), α = softmax(s).
        let mask = [true, true, false, true];
        let out = attentive_pool(&h, &mask, &pooler).unwrap();
        let q = 5;
        let mut s = [0.0f64; 4];
        for i in 0..4 {
            for j in 0..q {
                let mut z = pooler.b.values()[j];
                for c in 0..8 {
                    z += h.values()[i * 8 + c] * pooler.w.values()[c * q + j];
                }
                s[i] += pooler.u.values()[j] * num_traits::Float::tanh(z);
            }
        }
        let e: Vec<f64> = (0..4).map(|i| if mask[i] { num_traits::Float::exp(s[i]) } else { 0.0 }).collect();
        let z: f64 = e.iter().sum();
        for c in 0..8 {
            let want: f64 = (0..4).map(|i| e[i] / z * h.values()[i * 8 + c]).sum();
            assert!((out[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_cases() {
        let mut rng = Rng::seed(7);
        let mut head = ClassifierHead::<f64>::init(4, 3, 0.5, &mut rng).unwrap();
        let (_, p) = classify(&[0.0; 4], &head, 1.0).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        head.b = Tensor::new(vec![3], vec![0.3, -0.2, 0.1]).unwrap().param();
        let x = [0.5, -1.0, 2.0, 0.25];
        let (logits, p1) = classify(&x, &head, 1.0).unwrap();
        assert_eq!(p1, softmax(&logits, 1.0));
        for c in 0..3 {
            let want: f64 = head.b.values()[c] + (0..4).map(|k| x[k] * head.w.values()[k * 3 + c]).sum::<f64>();
            assert!((logits[c] - want).abs() < 1e-14);
        }
        let (_, p2) = classify(&x, &head, 2.0).unwrap();
        let scaled: Vec<f64> = logits.iter().map(|v| v / 2.0).collect();
        let want = softmax(&scaled, 1.0);
        for c in 0..3 {
            assert!((p2[c] - want[c]).abs() < 1e-15);
        }
        assert!(ClassifierHead::<f64>::init(4, 1, 0.5, &mut rng).is_err());
    }

    #[test]
    fn pool_baselines_match_scalar_oracle() {
        let mut rng = Rng::seed(8);
        let row = [0.2, -0.4, 1.0];
        let same = Tensor::from_fn(&[3, 3], |k| row[k % 3]);
        for mode in [PoolMode::Average, PoolMode::Max, PoolMode::Cls] {
            assert_eq!(pool_mode_baselines(&same, &[true; 3], mode).unwrap(), row);
        }
        let h = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let mask = [true, false, true, true, false];
        let avg = pool_mode_baselines(&h, &mask, PoolMode::Average).unwrap();
        let max = pool_mode_baselines(&h, &mask, PoolMode::Max).unwrap();
        let cls = pool_mode_baselines(&h, &mask, PoolMode::Cls).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = [0, 2, 3].iter().map(|&i| h.values()[i * 4 + c]).collect();
            assert!((avg[c] - col.iter().sum::<f64>() / 3.0).abs() < 1e-15);
            assert_eq!(max[c], col.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            assert_eq!(cls[c], h.values()[c]);
        }
    }
}
