//! Adam, regime-dependent freezing, the verbalizer classification loss and
//! the few-shot training loop.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Gradients, Graph, NodeId, ParamKey, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::mlm::{reborrow, MlmModel};
use crate::promptgen::PromptGenLayer;
use crate::template::{
    assemble_hybrid_node, parse_prompt_spec, predict_label, verbalizer_posterior, LabelPosterior, PromptSpec,
    Verbalizer,
};
use crate::text::{LabeledExample, TokenSequence, Vocab, DEFAULT_MAX_LEN};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Numeric format of trainable parameters between steps. Arithmetic is
/// always 64-bit; `F32` rounds each updated tensor to 32-bit values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// One bias-corrected Adam update of `param` in place. `t` is the 1-based
/// step number.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, round_f32: bool) {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        let mut p = param[i] - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        if round_f32 {
            p = p as f32 as f64;
        }
        param[i] = p;
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub precision: Precision,
    step: u64,
    moments: HashMap<ParamKey, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam { learning_rate, precision: Precision::F64, step: 0, moments: HashMap::new() }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, key: &ParamKey) -> Option<(&[f64], &[f64])> {
        self.moments.get(key).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Updates every trainable tensor of `stores` that has a gradient.
    /// Frozen tensors are never touched.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &Gradients) -> Result<()> {
        for store in stores.iter() {
            for id in store.ids() {
                if let Some(g) = grads.param(store, id) {
                    if g.shape() != store.get(id).shape() {
                        return Err(Error::Shape(format!(
                            "gradient {:?} vs parameter {} {:?}",
                            g.shape(),
                            store.name(id),
                            store.get(id).shape()
                        )));
                    }
                }
            }
        }
        self.step += 1;
        let round = self.precision == Precision::F32;
        for store in stores.iter_mut() {
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                if !store.requires_grad(id) {
                    continue;
                }
                let key = store.key(id);
                let Some(g) = grads.by_key(&key) else { continue };
                let n = g.numel();
                let (m, v) = self.moments.entry(key).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                let param = store.get_mut(id).data_mut();
                adam_update(param, g.data(), m, v, self.step, self.learning_rate, round);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegimeKind {
    ZeroShot,
    Hpl,
    ApFull,
    ApFixedLm,
}

impl RegimeKind {
    pub fn uses_prompt_layer(self) -> bool {
        matches!(self, RegimeKind::ApFull | RegimeKind::ApFixedLm)
    }

    pub fn trains(self) -> bool {
        self != RegimeKind::ZeroShot
    }

    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::ZeroShot => "ZERO_SHOT",
            RegimeKind::Hpl => "HPL",
            RegimeKind::ApFull => "AP_FULL",
            RegimeKind::ApFixedLm => "AP_FIXED_LM",
        }
    }
}

impl std::fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "ZERO_SHOT" => Ok(RegimeKind::ZeroShot),
            "HPL" => Ok(RegimeKind::Hpl),
            "AP_FULL" => Ok(RegimeKind::ApFull),
            "AP_FIXED_LM" => Ok(RegimeKind::ApFixedLm),
            _ => Err(Error::Config(format!("unknown regime `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub kind: RegimeKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Regime {
    /// Defaults: batch 5, 20 epochs, lr 1e-5 when the LM is tuned and 1e-3
    /// for the prompt layer alone.
    pub fn new(kind: RegimeKind) -> Self {
        let learning_rate = match kind {
            RegimeKind::ApFixedLm => 1e-3,
            _ => 1e-5,
        };
        Regime { kind, learning_rate, batch_size: 5, epochs: 20 }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Vocabulary, prompt pattern, verbalizer and input length limit shared by
/// every regime of one classification task.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub vocab: Vocab,
    pub pattern: String,
    pub prompt: PromptSpec,
    pub verbalizer: Verbalizer,
    pub max_len: usize,
}

impl Task {
    pub fn new<L: AsRef<str>, W: AsRef<str>>(vocab: Vocab, pattern: &str, verbalizer: &[(L, W)]) -> Result<Self> {
        let prompt = parse_prompt_spec(pattern, &vocab)?;
        let verbalizer = Verbalizer::new(verbalizer, &vocab)?;
        Ok(Task { vocab, pattern: pattern.to_string(), prompt, verbalizer, max_len: DEFAULT_MAX_LEN })
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        self.vocab.encode(text, self.max_len)
    }
}

/// `1 x labels` verbalizer logits at the mask row of the hybrid template.
pub fn label_logits(
    g: &mut Graph,
    model: &MlmModel,
    layer: Option<&PromptGenLayer>,
    task: &Task,
    x: &TokenSequence,
    dropout: Option<&mut dyn RngCore>,
) -> Result<NodeId> {
    let adaptive = match layer {
        Some(layer) => {
            let xe = model.embed_tokens_node(g, x.ids())?;
            Some(layer.generate(g, xe)?.vectors)
        }
        None => None,
    };
    let (emb, layout) = assemble_hybrid_node(g, model, &task.prompt, adaptive, x)?;
    let hidden = model.encode(g, emb, 0, dropout, None)?;
    let at_mask = g.index_select(hidden, 0, &[layout.mask_index])?;
    let ids = task.verbalizer.token_ids();
    let table = g.param(model.params(), model.token_embedding_id());
    let words = g.index_select(table, 0, ids)?;
    let bias = g.param(model.params(), model.output_bias_id());
    let bias = g.index_select(bias, 0, ids)?;
    let logits = g.matmul_t(at_mask, words, false, true)?;
    g.add_row(logits, bias)
}

/// Mean restricted-verbalizer cross-entropy over `batch`.
pub fn classification_loss(
    g: &mut Graph,
    model: &MlmModel,
    layer: Option<&PromptGenLayer>,
    task: &Task,
    batch: &[LabeledExample],
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty training batch".into()));
    }
    let mut rows = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for ex in batch {
        targets.push(task.verbalizer.label_index(&ex.label)?);
        let x = task.encode(&ex.text)?;
        rows.push(label_logits(g, model, layer, task, &x, reborrow(&mut dropout))?);
    }
    let logits = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
    g.cross_entropy(logits, &targets)
}

/// Read-only view used for prediction and evaluation.
#[derive(Clone, Copy)]
pub struct Classifier<'a> {
    pub model: &'a MlmModel,
    pub layer: Option<&'a PromptGenLayer>,
    pub task: &'a Task,
}

impl<'a> Classifier<'a> {
    pub fn new(model: &'a MlmModel, layer: Option<&'a PromptGenLayer>, task: &'a Task) -> Self {
        Classifier { model, layer, task }
    }

    pub fn posterior(&self, text: &str) -> Result<LabelPosterior> {
        let x = self.task.encode(text)?;
        let mut g = Graph::new();
        let logits = label_logits(&mut g, self.model, self.layer, self.task, &x, None)?;
        let ids = self.task.verbalizer.token_ids();
        let mut full = vec![f64::NEG_INFINITY; ids.iter().max().map_or(0, |m| m + 1)];
        for (slot, &id) in ids.iter().enumerate() {
            full[id] = g.value(logits).data()[slot];
        }
        verbalizer_posterior(&full, &self.task.verbalizer)
    }

    pub fn predict(&self, text: &str) -> Result<String> {
        Ok(predict_label(&self.posterior(text)?).to_string())
    }

    /// Fraction of `examples` predicted correctly.
    pub fn accuracy(&self, examples: &[LabeledExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("empty evaluation set".into()));
        }
        let mut correct = 0usize;
        for ex in examples {
            if self.predict(&ex.text)? == ex.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

/// Flags exactly the tensors `kind` may update as trainable and freezes the
/// rest. Returns the keys of the trainable tensors in store order.
pub fn trainable_partition(
    model: &mut MlmModel,
    layer: Option<&mut PromptGenLayer>,
    kind: RegimeKind,
) -> Result<Vec<ParamKey>> {
    if kind.uses_prompt_layer() && layer.is_none() {
        return Err(Error::Config(format!("{kind} needs a prompt layer")));
    }
    let lm = matches!(kind, RegimeKind::Hpl | RegimeKind::ApFull);
    model.params_mut().set_requires_grad_all(lm);
    let mut keys = Vec::new();
    if lm {
        keys.extend(model.params().ids().map(|id| model.params().key(id)));
    }
    if let Some(layer) = layer {
        let on = kind.uses_prompt_layer();
        layer.params_mut().set_requires_grad_all(on);
        if on {
            keys.extend(layer.params().ids().map(|id| layer.params().key(id)));
        }
    }
    Ok(keys)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub seed: u64,
    /// Evaluate on the test split after every epoch instead of only at the end.
    pub eval_each_epoch: bool,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Test accuracy after the last epoch; `None` for an empty test split.
    pub final_accuracy: Option<f64>,
    pub steps: usize,
}

/// Called after every epoch with the epoch number and the current weights.
pub type EpochObserver<'o> = dyn FnMut(usize, &MlmModel, Option<&PromptGenLayer>) -> Result<()> + 'o;

/// Trains the parameters `regime` permits on `train`, evaluating on `test`.
/// ZERO_SHOT skips straight to evaluation.
pub fn train(
    model: &mut MlmModel,
    layer: Option<&mut PromptGenLayer>,
    task: &Task,
    train: &[LabeledExample],
    test: &[LabeledExample],
    regime: &Regime,
    opts: &TrainOptions,
) -> Result<TrainHistory> {
    train_observed(model, layer, task, train, test, regime, opts, &mut |_, _, _| Ok(()))
}

/// [`train`] with a per-epoch callback.
#[allow(clippy::too_many_arguments)]
pub fn train_observed(
    model: &mut MlmModel,
    mut layer: Option<&mut PromptGenLayer>,
    task: &Task,
    train: &[LabeledExample],
    test: &[LabeledExample],
    regime: &Regime,
    opts: &TrainOptions,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainHistory> {
    regime.validate()?;
    trainable_partition(model, layer.as_deref_mut(), regime.kind)?;
    let mut history = TrainHistory::default();
    let uses_layer = regime.kind.uses_prompt_layer();

    if regime.kind.trains() {
        if train.is_empty() {
            return Err(Error::EmptyInput("empty training split".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut adam = Adam::new(regime.learning_rate).with_precision(opts.precision);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=regime.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(regime.batch_size) {
                let batch: Vec<LabeledExample> = chunk.iter().map(|&i| train[i].clone()).collect();
                let mut g = Graph::new();
                let pl = if uses_layer { layer.as_deref() } else { None };
                let loss = classification_loss(&mut g, model, pl, task, &batch, Some(&mut rng))?;
                total += g.value(loss).item() * batch.len() as f64;
                let grads = g.backward(loss)?;
                match layer.as_deref_mut() {
                    Some(l) => adam.step(&mut [model.params_mut(), l.params_mut()], &grads)?,
                    None => adam.step(&mut [model.params_mut()], &grads)?,
                }
                history.steps += 1;
            }
            let pl = if uses_layer { layer.as_deref() } else { None };
            let test_accuracy = if opts.eval_each_epoch && !test.is_empty() {
                Some(Classifier::new(model, pl, task).accuracy(test)?)
            } else {
                None
            };
            history.epochs.push(EpochRecord { epoch, train_loss: total / train.len() as f64, test_accuracy });
            observer(epoch, model, pl)?;
        }
    }

    history.final_accuracy = match history.epochs.last().and_then(|r| r.test_accuracy) {
        Some(a) => Some(a),
        None if test.is_empty() => None,
        None => {
            let pl = if uses_layer { layer.as_deref() } else { None };
            Some(Classifier::new(model, pl, task).accuracy(test)?)
        }
    };
    Ok(history)
}

/// Element-wise `true` when every tensor of `a` is bit-identical to `b`.
pub fn stores_bit_eq(a: &ParamStore, b: &ParamStore) -> bool {
    a.bit_eq(b)
}

/// Snapshot of parameter values, for freeze audits.
pub fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.ids().map(|id| store.get(id).clone()).collect()
}
