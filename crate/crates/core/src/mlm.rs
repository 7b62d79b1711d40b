//! Tiny bidirectional transformer masked language model.
//!
//! The model accepts raw embedding matrices, so continuous prompt vectors can
//! be spliced between token embeddings before the encoder runs. The output
//! head is tied to the token embedding table plus a per-token bias.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, NodeId, ParamId, ParamStore, Parameterized, Tensor};
use crate::error::{Error, Result};
use crate::text::{TokenSequence, MASK};
use crate::training::Adam;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Draw attention and feed-forward matrices with std `1/sqrt(fan_in)`
    /// instead of the flat 0.02.
    #[serde(default)]
    pub fan_in_init: bool,
}

impl MlmConfig {
    /// Default stand-in scale for a given vocabulary.
    pub fn new(vocab_size: usize) -> Self {
        MlmConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_positions: 64,
            dropout_rate: 0.1,
            seed: 0,
            fan_in_init: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads, n_layers and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < crate::text::RESERVED.len() {
            return bad(format!("vocab_size {} is smaller than the reserved set", self.vocab_size));
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct MlmModel {
    config: MlmConfig,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerIds>,
    final_ln_g: ParamId,
    final_ln_b: ParamId,
    out_bias: ParamId,
}

/// Attention probabilities recorded during a forward pass, one node per
/// layer and head, each `T x T`.
#[derive(Debug, Default)]
pub struct AttentionTrace {
    pub heads: Vec<NodeId>,
}

impl MlmModel {
    pub fn new(config: MlmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut p = ParamStore::new();
        let fan_in = config.fan_in_init;
        let mut w = |p: &mut ParamStore, name: String, shape: &[usize]| {
            let std = if fan_in && name.contains(".layer") { 1.0 / (shape[0] as f64).sqrt() } else { INIT_STD };
            p.add(name, Tensor::randn(shape, std, &mut rng))
        };
        let tok_emb = w(&mut p, "mlm.tok_emb".into(), &[v, d]);
        let pos_emb = w(&mut p, "mlm.pos_emb".into(), &[config.max_positions, d]);
        let emb_ln_g = p.add("mlm.emb_ln.gain", Tensor::full(&[d], 1.0));
        let emb_ln_b = p.add("mlm.emb_ln.bias", Tensor::zeros(&[d]));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("mlm.layer{l}.{s}");
            layers.push(LayerIds {
                wq: w(&mut p, n("wq"), &[d, d]),
                bq: p.add(n("bq"), Tensor::zeros(&[d])),
                wk: w(&mut p, n("wk"), &[d, d]),
                bk: p.add(n("bk"), Tensor::zeros(&[d])),
                wv: w(&mut p, n("wv"), &[d, d]),
                bv: p.add(n("bv"), Tensor::zeros(&[d])),
                wo: w(&mut p, n("wo"), &[d, d]),
                bo: p.add(n("bo"), Tensor::zeros(&[d])),
                ln1_g: p.add(n("ln1.gain"), Tensor::full(&[d], 1.0)),
                ln1_b: p.add(n("ln1.bias"), Tensor::zeros(&[d])),
                w1: w(&mut p, n("w1"), &[d, f]),
                b1: p.add(n("b1"), Tensor::zeros(&[f])),
                w2: w(&mut p, n("w2"), &[f, d]),
                b2: p.add(n("b2"), Tensor::zeros(&[d])),
                ln2_g: p.add(n("ln2.gain"), Tensor::full(&[d], 1.0)),
                ln2_b: p.add(n("ln2.bias"), Tensor::zeros(&[d])),
            });
        }
        let final_ln_g = p.add("mlm.final_ln.gain", Tensor::full(&[d], 1.0));
        let final_ln_b = p.add("mlm.final_ln.bias", Tensor::zeros(&[d]));
        let out_bias = p.add("mlm.out_bias", Tensor::zeros(&[v]));
        Ok(MlmModel { config, params: p, tok_emb, pos_emb, emb_ln_g, emb_ln_b, layers, final_ln_g, final_ln_b, out_bias })
    }

    /// Rebuilds a model around an existing parameter store, checking that
    /// names and shapes match what `config` would produce.
    pub fn from_params(config: MlmConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if model.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} MLM tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for id in model.params.ids() {
            if model.params.name(id) != params.name(id) || model.params.get(id).shape() != params.get(id).shape() {
                return Err(Error::Config(format!("MLM tensor `{}` does not match the config", params.name(id))));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &MlmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn token_embedding_table(&self) -> &Tensor {
        self.params.get(self.tok_emb)
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.tok_emb
    }

    pub fn output_bias_id(&self) -> ParamId {
        self.out_bias
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab_size) {
            Some(bad) => Err(Error::Index(format!("token id {bad} >= vocab_size {}", self.config.vocab_size))),
            None => Ok(()),
        }
    }

    /// Rows of the token embedding table, `n x d_model`, without positions.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        self.check_ids(ids)?;
        let table = self.token_embedding_table();
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(table.row(i));
        }
        Tensor::from_vec(vec![ids.len(), d], data)
    }

    /// Graph version of [`embed_tokens`](Self::embed_tokens).
    pub fn embed_tokens_node(&self, g: &mut Graph, ids: &[usize]) -> Result<NodeId> {
        self.check_ids(ids)?;
        let table = g.param(&self.params, self.tok_emb);
        g.index_select(table, 0, ids)
    }

    /// Runs the encoder on a `T x d_model` embedding matrix and returns the
    /// final hidden states. Dropout is active only when `dropout` is given.
    pub fn encode(
        &self,
        g: &mut Graph,
        embeddings: NodeId,
        position_offset: usize,
        mut dropout: Option<&mut dyn RngCore>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<NodeId> {
        let (t, d) = g.value(embeddings).dims2()?;
        if d != self.config.d_model {
            return Err(Error::Shape(format!("embedding width {d} != d_model {}", self.config.d_model)));
        }
        if t == 0 {
            return Err(Error::EmptyInput("template has no rows".into()));
        }
        if position_offset + t > self.config.max_positions {
            return Err(Error::Capacity(format!(
                "template length {} exceeds max_positions {}",
                position_offset + t,
                self.config.max_positions
            )));
        }
        let p = &self.params;
        let pos_table = g.param(p, self.pos_emb);
        let pos = g.slice(pos_table, 0, position_offset, t)?;
        let x = g.add(embeddings, pos)?;
        let (lg, lb) = (g.param(p, self.emb_ln_g), g.param(p, self.emb_ln_b));
        let x = g.layer_norm(x, lg, lb)?;
        let mut x = self.dropout(g, x, reborrow(&mut dropout))?;

        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let (g1, b1) = (g.param(p, layer.ln1_g), g.param(p, layer.ln1_b));
            let xn = g.layer_norm(x, g1, b1)?;
            let proj = |g: &mut Graph, w: ParamId, b: ParamId| -> Result<NodeId> {
                let (w, b) = (g.param(p, w), g.param(p, b));
                let y = g.matmul(xn, w)?;
                g.add_row(y, b)
            };
            let q = proj(g, layer.wq, layer.bq)?;
            let k = proj(g, layer.wk, layer.bk)?;
            let v = proj(g, layer.wv, layer.bv)?;
            let mut ctx = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice(q, 1, h * dh, dh)?;
                let kh = g.slice(k, 1, h * dh, dh)?;
                let vh = g.slice(v, 1, h * dh, dh)?;
                let scores = g.matmul_t(qh, kh, false, true)?;
                let scores = g.scale(scores, scale)?;
                let probs = g.softmax(scores, 1)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.heads.push(probs);
                }
                ctx.push(g.matmul(probs, vh)?);
            }
            let ctx = if heads == 1 { ctx[0] } else { g.concat(&ctx, 1)? };
            let (wo, bo) = (g.param(p, layer.wo), g.param(p, layer.bo));
            let attn = g.matmul(ctx, wo)?;
            let attn = g.add_row(attn, bo)?;
            let attn = self.dropout(g, attn, reborrow(&mut dropout))?;
            x = g.add(x, attn)?;

            let (g2, b2) = (g.param(p, layer.ln2_g), g.param(p, layer.ln2_b));
            let xn = g.layer_norm(x, g2, b2)?;
            let (w1, bb1) = (g.param(p, layer.w1), g.param(p, layer.b1));
            let ff = g.matmul(xn, w1)?;
            let ff = g.add_row(ff, bb1)?;
            let ff = g.gelu(ff)?;
            let (w2, bb2) = (g.param(p, layer.w2), g.param(p, layer.b2));
            let ff = g.matmul(ff, w2)?;
            let ff = g.add_row(ff, bb2)?;
            let ff = self.dropout(g, ff, reborrow(&mut dropout))?;
            x = g.add(x, ff)?;
        }
        let (fg, fb) = (g.param(p, self.final_ln_g), g.param(p, self.final_ln_b));
        let x = g.layer_norm(x, fg, fb)?;
        Ok(x)
    }

    /// Tied vocabulary head: `hidden @ E^T + bias`.
    pub fn vocab_logits(&self, g: &mut Graph, hidden: NodeId) -> Result<NodeId> {
        let table = g.param(&self.params, self.tok_emb);
        let bias = g.param(&self.params, self.out_bias);
        let logits = g.matmul_t(hidden, table, false, true)?;
        g.add_row(logits, bias)
    }

    /// `T x d_model` embeddings in, `T x vocab_size` logits out. Positions are
    /// added by row index.
    pub fn forward_from_embeddings(
        &self,
        g: &mut Graph,
        embeddings: NodeId,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<NodeId> {
        let hidden = self.encode(g, embeddings, 0, dropout, None)?;
        self.vocab_logits(g, hidden)
    }

    fn dropout(&self, g: &mut Graph, x: NodeId, rng: Option<&mut dyn RngCore>) -> Result<NodeId> {
        let rate = self.config.dropout_rate;
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let mask = g.constant(Tensor::from_vec(shape, mask)?)?;
        g.mul(x, mask)
    }
}

impl Parameterized for MlmModel {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.params]
    }
}

/// Shortens the trait-object lifetime so an optional rng can be lent out
/// repeatedly.
pub(crate) fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Masked positions chosen for one sequence: each position independently with
/// probability `mask_prob`, at least one.
pub fn choose_mask_positions(n: usize, mask_prob: f64, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut picked: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < mask_prob).collect();
    if picked.is_empty() && n > 0 {
        picked.push(rng.random_range(0..n));
    }
    picked
}

/// Builds the masked-LM loss graph for a batch: mean cross-entropy of the true
/// tokens at masked positions only.
pub fn mlm_loss(
    model: &MlmModel,
    g: &mut Graph,
    batch: &[TokenSequence],
    mask_prob: f64,
    rng: &mut dyn RngCore,
    train_mode: bool,
    random_offset: bool,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty MLM batch".into()));
    }
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::Config(format!("mask_prob {mask_prob} not in (0, 1)")));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for seq in batch {
        let ids = seq.ids();
        let picked = choose_mask_positions(ids.len(), mask_prob, rng);
        let mut masked = ids.to_vec();
        for &i in &picked {
            masked[i] = MASK;
            targets.push(ids[i]);
        }
            let offset = if random_offset {
            rng.random_range(0..=model.config.max_positions.saturating_sub(ids.len()))
        } else {
            0
        };
        let emb = model.embed_tokens_node(g, &masked)?;
        let hidden = if train_mode {
            model.encode(g, emb, offset, Some(&mut *rng), None)?
        } else {
            model.encode(g, emb, offset, None, None)?
        };
        rows.push(g.index_select(hidden, 0, &picked)?);
    }
    let hidden = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
    let logits = model.vocab_logits(g, hidden)?;
    g.cross_entropy(logits, &targets)
}

/// One optimizer step of masked-LM training on `batch`; returns the loss.
pub fn mlm_pretrain_step(
    model: &mut MlmModel,
    batch: &[TokenSequence],
    mask_prob: f64,
    rng: &mut dyn RngCore,
    optimizer: &mut Adam,
    position_jitter: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = mlm_loss(model, &mut g, batch, mask_prob, rng, true, position_jitter)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    optimizer.step(&mut [model.params_mut()], &grads)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_prob: f64,
    pub seed: u64,
    /// Start each sentence at a random position so every positional
    /// embedding gets trained.
    pub position_jitter: bool,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions { epochs: 4, batch_size: 16, learning_rate: 1e-3, mask_prob: 0.15, seed: 0, position_jitter: false }
    }
}

/// Masked-LM pretraining over `corpus`; returns the mean loss of each epoch.
pub fn pretrain(model: &mut MlmModel, corpus: &[TokenSequence], opts: &PretrainOptions) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("empty pretraining corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.learning_rate);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            total += mlm_pretrain_step(model, &batch, opts.mask_prob, &mut rng, &mut adam, opts.position_jitter)?;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok(history)
}
