//! Pre-norm encoder–decoder transformer with a shared source/target
//! vocabulary, inverted dropout and greedy decoding.
//!
//! Parameters are stored as `f64` tensors whose entries are always exactly
//! representable as `f32`, so checkpoints round-trip bit-exactly.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};

use std::collections::HashMap;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::{BOS_ID, EOS_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_layers_enc: 2,
            n_layers_dec: 2,
            ffn_dim: 512,
            dropout_rate: 0.1,
            max_seq_len: 128,
            vocab_size: 8000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Seed and switch for the dropout masks of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutPlan {
    pub seed: u64,
    pub enabled: bool,
}

impl DropoutPlan {
    pub fn off() -> Self {
        DropoutPlan {
            seed: 0,
            enabled: false,
        }
    }

    pub fn on(seed: u64) -> Self {
        DropoutPlan {
            seed,
            enabled: true,
        }
    }
}

/// Per-position next-token distributions. Rows of several sequences may be
/// stacked; `mask[i]` marks real (non-padding) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDistribution {
    pub probs: Tensor,
    pub mask: Vec<bool>,
}

impl PredictionDistribution {
    pub fn new(probs: Tensor) -> Self {
        let mask = vec![true; probs.nrows()];
        PredictionDistribution { probs, mask }
    }

    pub fn positions(&self) -> usize {
        self.probs.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.ncols()
    }

    /// Stacks the rows of several distributions in order.
    pub fn concat(parts: &[PredictionDistribution]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|p| p.probs.view()).collect();
        let probs = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::ShapeMismatch(format!("cannot stack distributions: {e}")))?;
        let mask = parts.iter().flat_map(|p| p.mask.iter().copied()).collect();
        Ok(PredictionDistribution { probs, mask })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingInit {
    MeanInit,
    RandomInit,
}

fn round_to_f32(t: &mut Tensor) {
    t.mapv_inplace(|x| x as f32 as f64);
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut t = Tensor::from_shape_fn((rows, cols), |_| {
        std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    });
    round_to_f32(&mut t);
    t
}

fn sinusoid(len: usize, d: usize) -> Tensor {
    Tensor::from_shape_fn((len, d), |(pos, i)| {
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Dropout state for one pass: `None` when disabled.
struct Dropper {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropper {
    fn new(plan: DropoutPlan, rate: f64) -> Self {
        let rng = (plan.enabled && rate > 0.0).then(|| ChaCha8Rng::seed_from_u64(plan.seed));
        Dropper { rate, rng }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - self.rate;
        let rate = self.rate;
        let mask = Tensor::from_shape_fn(g.value(x).raw_dim(), |_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        });
        g.mul_const(x, mask)
    }
}

impl ModelParameters {
    /// Scaled-normal weights (std 1/√d_model), zero biases, unit
    /// layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.ffn_dim;
        let std = 1.0 / (d as f64).sqrt();
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        let mut weight = |name: String, r: usize, c: usize, entries: &mut Vec<(String, Tensor)>| {
            entries.push((name, normal(&mut rng, r, c, std)));
        };
        let zeros = |name: String, c: usize, entries: &mut Vec<(String, Tensor)>| {
            entries.push((name, Tensor::zeros((1, c))));
        };
        let ones = |name: String, c: usize, entries: &mut Vec<(String, Tensor)>| {
            entries.push((name, Tensor::ones((1, c))));
        };

        weight("embed".into(), config.vocab_size, d, &mut entries);
        let norm = |prefix: &str, entries: &mut Vec<(String, Tensor)>| {
            ones(format!("{prefix}.g"), d, entries);
            zeros(format!("{prefix}.b"), d, entries);
        };
        for l in 0..config.n_layers_enc {
            let p = format!("enc.{l}");
            norm(&format!("{p}.ln1"), &mut entries);
            weight(format!("{p}.attn.qkv"), d, 3 * d, &mut entries);
            zeros(format!("{p}.attn.qkv_b"), 3 * d, &mut entries);
            weight(format!("{p}.attn.out"), d, d, &mut entries);
            zeros(format!("{p}.attn.out_b"), d, &mut entries);
            norm(&format!("{p}.ln2"), &mut entries);
            weight(format!("{p}.ffn.w1"), d, f, &mut entries);
            zeros(format!("{p}.ffn.b1"), f, &mut entries);
            weight(format!("{p}.ffn.w2"), f, d, &mut entries);
            zeros(format!("{p}.ffn.b2"), d, &mut entries);
        }
        norm("enc.ln_f", &mut entries);
        for l in 0..config.n_layers_dec {
            let p = format!("dec.{l}");
            norm(&format!("{p}.ln1"), &mut entries);
            weight(format!("{p}.self.qkv"), d, 3 * d, &mut entries);
            zeros(format!("{p}.self.qkv_b"), 3 * d, &mut entries);
            weight(format!("{p}.self.out"), d, d, &mut entries);
            zeros(format!("{p}.self.out_b"), d, &mut entries);
            norm(&format!("{p}.ln2"), &mut entries);
            weight(format!("{p}.cross.q"), d, d, &mut entries);
            zeros(format!("{p}.cross.q_b"), d, &mut entries);
            weight(format!("{p}.cross.kv"), d, 2 * d, &mut entries);
            zeros(format!("{p}.cross.kv_b"), 2 * d, &mut entries);
            weight(format!("{p}.cross.out"), d, d, &mut entries);
            zeros(format!("{p}.cross.out_b"), d, &mut entries);
            norm(&format!("{p}.ln3"), &mut entries);
            weight(format!("{p}.ffn.w1"), d, f, &mut entries);
            zeros(format!("{p}.ffn.b1"), f, &mut entries);
            weight(format!("{p}.ffn.w2"), f, d, &mut entries);
            zeros(format!("{p}.ffn.b2"), d, &mut entries);
        }
        norm("dec.ln_f", &mut entries);
        weight("output".into(), config.vocab_size, d, &mut entries);
        zeros("output_b".into(), config.vocab_size, &mut entries);

        let (names, tensors) = entries.into_iter().unzip();
        Ok(Self::from_parts(config.clone(), names, tensors))
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        names: Vec<String>,
        tensors: Vec<Tensor>,
    ) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        ModelParameters {
            config,
            names,
            tensors,
            index,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Mutable access for optimizers. Callers keep entries finite.
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Rounds every entry to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(round_to_f32);
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        self.config.dropout_rate = rate;
        self.config.validate()?;
        Ok(self)
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        g.param(self.index[name])
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, ids: &[u32], drop: &mut Dropper) -> Var {
        let d = self.config.d_model;
        let table = self.p(g, "embed");
        let rows = g.gather(table, ids);
        let rows = g.scale(rows, (d as f64).sqrt());
        let pos = g.constant(sinusoid(ids.len(), d));
        let x = g.add(rows, pos);
        drop.apply(g, x)
    }

    fn linear(&self, g: &mut Graph, x: Var, w: &str, b: &str) -> Var {
        let (w, b) = (self.p(g, w), self.p(g, b));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        let gain = self.p(g, &format!("{prefix}.g"));
        let bias = self.p(g, &format!("{prefix}.b"));
        g.layer_norm(x, gain, bias)
    }

    /// Multi-head attention over already projected queries `[n, d]`, keys
    /// and values `[m, d]`.
    fn attention(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
        drop: &mut Dropper,
    ) -> Var {
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores, causal);
            let weights = drop.apply(g, weights);
            heads.push(g.matmul(weights, vh));
        }
        g.concat_cols(&heads)
    }

    fn self_attention(
        &self,
        g: &mut Graph,
        x: Var,
        prefix: &str,
        causal: bool,
        drop: &mut Dropper,
    ) -> Var {
        let d = self.config.d_model;
        let qkv = self.linear(g, x, &format!("{prefix}.qkv"), &format!("{prefix}.qkv_b"));
        let q = g.slice_cols(qkv, 0, d);
        let k = g.slice_cols(qkv, d, d);
        let v = g.slice_cols(qkv, 2 * d, d);
        let mixed = self.attention(g, q, k, v, causal, drop);
        self.linear(
            g,
            mixed,
            &format!("{prefix}.out"),
            &format!("{prefix}.out_b"),
        )
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        let h = self.linear(g, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
        let h = g.gelu(h);
        self.linear(g, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn residual(&self, g: &mut Graph, x: Var, sub: Var, drop: &mut Dropper) -> Var {
        let sub = drop.apply(g, sub);
        g.add(x, sub)
    }

    fn encode(&self, g: &mut Graph, src: &[u32], drop: &mut Dropper) -> Var {
        let mut x = self.embed(g, src, drop);
        for l in 0..self.config.n_layers_enc {
            let p = format!("enc.{l}");
            let h = self.norm(g, x, &format!("{p}.ln1"));
            let a = self.self_attention(g, h, &format!("{p}.attn"), false, drop);
            x = self.residual(g, x, a, drop);
            let h = self.norm(g, x, &format!("{p}.ln2"));
            let f = self.feed_forward(g, h, &format!("{p}.ffn"));
            x = self.residual(g, x, f, drop);
        }
        self.norm(g, x, "enc.ln_f")
    }

    fn decode_hidden(&self, g: &mut Graph, memory: Var, tgt: &[u32], drop: &mut Dropper) -> Var {
        let d = self.config.d_model;
        let mut x = self.embed(g, tgt, drop);
        for l in 0..self.config.n_layers_dec {
            let p = format!("dec.{l}");
            let h = self.norm(g, x, &format!("{p}.ln1"));
            let a = self.self_attention(g, h, &format!("{p}.self"), true, drop);
            x = self.residual(g, x, a, drop);

            let h = self.norm(g, x, &format!("{p}.ln2"));
            let q = self.linear(g, h, &format!("{p}.cross.q"), &format!("{p}.cross.q_b"));
            let kv = self.linear(
                g,
                memory,
                &format!("{p}.cross.kv"),
                &format!("{p}.cross.kv_b"),
            );
            let k = g.slice_cols(kv, 0, d);
            let v = g.slice_cols(kv, d, d);
            let c = self.attention(g, q, k, v, false, drop);
            let c = self.linear(g, c, &format!("{p}.cross.out"), &format!("{p}.cross.out_b"));
            x = self.residual(g, x, c, drop);

            let h = self.norm(g, x, &format!("{p}.ln3"));
            let f = self.feed_forward(g, h, &format!("{p}.ffn"));
            x = self.residual(g, x, f, drop);
        }
        self.norm(g, x, "dec.ln_f")
    }

    fn project(&self, g: &mut Graph, hidden: Var) -> Var {
        let out = self.p(g, "output");
        let bias = self.p(g, "output_b");
        let logits = g.matmul_t(hidden, out);
        g.add_row(logits, bias)
    }

    /// Records a teacher-forced pass on `g` and returns the `[len(tgt), V]`
    /// logits node. Row t predicts the token following `tgt[..=t]`.
    pub fn logits_graph(
        &self,
        g: &mut Graph,
        src: &[u32],
        tgt: &[u32],
        plan: DropoutPlan,
    ) -> Result<Var> {
        self.check_ids(src)?;
        self.check_ids(tgt)?;
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::InvalidArgument(
                "source and target prefixes must be non-empty".into(),
            ));
        }
        let mut drop = Dropper::new(plan, self.config.dropout_rate);
        let memory = self.encode(g, src, &mut drop);
        let hidden = self.decode_hidden(g, memory, tgt, &mut drop);
        Ok(self.project(g, hidden))
    }

    /// Log-probabilities node of a teacher-forced pass.
    pub fn log_probs_graph(
        &self,
        g: &mut Graph,
        src: &[u32],
        tgt: &[u32],
        plan: DropoutPlan,
    ) -> Result<Var> {
        let logits = self.logits_graph(g, src, tgt, plan)?;
        Ok(g.log_softmax_rows(logits))
    }

    pub fn forward_logits(&self, src: &[u32], tgt: &[u32], plan: DropoutPlan) -> Result<Tensor> {
        let mut g = Graph::new(&self.tensors);
        let logits = self.logits_graph(&mut g, src, tgt, plan)?;
        Ok(g.value(logits).clone())
    }

    /// Teacher-forced next-token distributions for one sequence pair.
    pub fn forward(
        &self,
        src: &[u32],
        tgt: &[u32],
        plan: DropoutPlan,
    ) -> Result<PredictionDistribution> {
        let mut g = Graph::new(&self.tensors);
        let lp = self.log_probs_graph(&mut g, src, tgt, plan)?;
        Ok(PredictionDistribution::new(g.value(lp).mapv(f64::exp)))
    }

    /// Two passes with independent dropout masks from sub-seeds `2·seed`
    /// and `2·seed + 1`.
    pub fn dual_forward(
        &self,
        src: &[u32],
        tgt: &[u32],
        seed: u64,
    ) -> Result<(PredictionDistribution, PredictionDistribution)> {
        let (s1, s2) = dual_seeds(seed);
        Ok((
            self.forward(src, tgt, DropoutPlan::on(s1))?,
            self.forward(src, tgt, DropoutPlan::on(s2))?,
        ))
    }

    /// Grows the embedding and output tables to `new_vocab_size` rows.
    /// Existing rows are kept bit-for-bit.
    pub fn resize_embeddings(
        &self,
        new_vocab_size: usize,
        strategy: EmbeddingInit,
        seed: u64,
    ) -> Result<Self> {
        let old = self.config.vocab_size;
        if new_vocab_size < old {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink vocabulary from {old} to {new_vocab_size}"
            )));
        }
        let mut out = self.clone();
        if new_vocab_size == old {
            return Ok(out);
        }
        let added = new_vocab_size - old;
        let d = self.config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in ["embed", "output"] {
            let table = &self.tensors[self.index[name]];
            let fresh = match strategy {
                EmbeddingInit::RandomInit => normal(&mut rng, added, d, std),
                EmbeddingInit::MeanInit => {
                    let mean = table.mean_axis(Axis(0)).expect("non-empty table");
                    let mut t = normal(&mut rng, added, d, 0.1 * std);
                    t += &mean;
                    round_to_f32(&mut t);
                    t
                }
            };
            let grown =
                ndarray::concatenate(Axis(0), &[table.view(), fresh.view()]).expect("same width");
            out.tensors[self.index[name]] = grown;
        }
        let bias = &self.tensors[self.index["output_b"]];
        let fill = match strategy {
            EmbeddingInit::RandomInit => 0.0,
            EmbeddingInit::MeanInit => bias.mean().unwrap_or(0.0) as f32 as f64,
        };
        let fresh = Tensor::from_elem((1, added), fill);
        out.tensors[self.index["output_b"]] =
            ndarray::concatenate(Axis(1), &[bias.view(), fresh.view()]).expect("single row");
        out.config.vocab_size = new_vocab_size;
        Ok(out)
    }

    /// Greedy decoding with dropout off: append the argmax token (lowest id
    /// on ties) until end-of-sequence or `max_len` tokens. The returned
    /// sequence excludes both boundary tokens.
    pub fn greedy_decode(&self, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
        self.check_ids(src)?;
        if src.is_empty() {
            return Err(Error::InvalidArgument("source must be non-empty".into()));
        }
        let memory = {
            let mut g = Graph::new(&self.tensors);
            let mut drop = Dropper::new(DropoutPlan::off(), 0.0);
            let m = self.encode(&mut g, src, &mut drop);
            g.value(m).clone()
        };
        let max_len = max_len.min(self.config.max_seq_len - 1);
        let out_w = &self.tensors[self.index["output"]];
        let out_b = &self.tensors[self.index["output_b"]];
        let mut prefix = vec![BOS_ID];
        while prefix.len() <= max_len {
            let mut g = Graph::new(&self.tensors);
            let mut drop = Dropper::new(DropoutPlan::off(), 0.0);
            let mem = g.constant(memory.clone());
            let hidden = self.decode_hidden(&mut g, mem, &prefix, &mut drop);
            let last = g.value(hidden).row(prefix.len() - 1).to_owned();
            let logits = out_w.dot(&last) + out_b.row(0);
            let next = argmax(logits.iter().copied());
            if next == EOS_ID {
                break;
            }
            prefix.push(next);
        }
        prefix.remove(0);
        Ok(prefix)
    }
}

pub fn dual_seeds(seed: u64) -> (u64, u64) {
    let base = seed.wrapping_mul(2);
    (base, base.wrapping_add(1))
}

fn argmax(values: impl Iterator<Item = f64>) -> u32 {
    let mut best = (0u32, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i as u32, v);
        }
    }
    best.0
}
