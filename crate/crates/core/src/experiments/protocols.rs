//! Experiment specs and the four protocols: prompt comparison, fixed-LM data
//! scale, cross-domain migration and prompt-layer pre-training.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::report::Report;
use super::synth::{by_domain, gen_glosses, gen_synthetic_corpus, SyntheticSpec};
use crate::error::{Error, Result};
use crate::mlm::{pretrain, MlmConfig, MlmModel, PretrainOptions};
use crate::promptgen::{PromptGenConfig, PromptGenLayer};
use crate::text::{load_dataset, sample_few_shot, DatasetSplit, LabeledExample, TokenSequence, Vocab};
use crate::training::{train, train_observed, Classifier, Precision, Regime, RegimeKind, Task, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Protocol {
    ComparePrompts,
    FixedLmScale,
    Migration,
    PreAp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files(Vec<PathBuf>),
}

/// Stand-in model shape; the vocabulary size comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub fan_in_init: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = MlmConfig::new(0);
        ModelSettings {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_positions: c.max_positions,
            dropout_rate: c.dropout_rate,
            fan_in_init: c.fan_in_init,
        }
    }
}

impl ModelSettings {
    pub fn config(&self, vocab_size: usize, seed: u64) -> MlmConfig {
        MlmConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_positions: self.max_positions,
            dropout_rate: self.dropout_rate,
            seed,
            fan_in_init: self.fan_in_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptLayerSettings {
    pub d_hidden: usize,
    pub s: usize,
}

impl Default for PromptLayerSettings {
    fn default() -> Self {
        PromptLayerSettings { d_hidden: 64, s: 4 }
    }
}

/// Optimizer settings per protocol phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub batch_size: usize,
    /// Few-shot epochs.
    pub epochs: usize,
    /// Epochs over large training sets.
    pub large_epochs: usize,
    /// Learning rate whenever the LM is tuned on a few-shot split.
    pub lm_lr: f64,
    pub fixed_lm_lr: f64,
    pub migration_lr: f64,
    pub migration_epochs: usize,
    /// Source-domain phase of PRE_AP.
    pub pre_ap_lr: f64,
    pub pre_ap_epochs: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            batch_size: 5,
            epochs: 20,
            large_epochs: 3,
            lm_lr: 1e-5,
            fixed_lm_lr: 1e-3,
            migration_lr: 2e-6,
            migration_epochs: 3,
            pre_ap_lr: 5e-6,
            pre_ap_epochs: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub protocol: Protocol,
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub prompt_layer: PromptLayerSettings,
    #[serde(default)]
    pub pretrain: PretrainOptions,
    #[serde(default)]
    pub hyper: Hyper,
    pub patterns: Vec<String>,
    pub verbalizer: Vec<(String, String)>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_k")]
    pub k_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Training-set size of the large FIXED_LM_SCALE run.
    #[serde(default = "default_large_k")]
    pub large_k: usize,
    /// Domain to evaluate on; for MIGRATION and PRE_AP it is never trained on
    /// in the source phase. `None` pools every domain.
    #[serde(default)]
    pub target_domain: Option<String>,
    /// Source domains; empty means every domain except the target.
    #[serde(default)]
    pub source_domains: Vec<String>,
    /// Training examples drawn from each source domain.
    #[serde(default = "default_source_k")]
    pub source_per_domain: usize,
    /// Test examples per source domain in MIGRATION's in-domain panel.
    #[serde(default = "default_source_test")]
    pub source_test_per_domain: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub eval_each_epoch: bool,
    #[serde(default)]
    pub precision: Precision,
    /// Minimum token count for the vocabulary.
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

fn default_k() -> usize {
    32
}
fn default_n_test() -> usize {
    600
}
fn default_large_k() -> usize {
    10_000
}
fn default_source_k() -> usize {
    200
}
fn default_source_test() -> usize {
    100
}
fn default_max_len() -> usize {
    crate::text::DEFAULT_MAX_LEN
}
fn default_min_count() -> usize {
    1
}

pub const BENCHMARK_PATTERNS: [&str; 4] = ["it was [MASK] ,", "feel [MASK] ,", "really [MASK] ,", "[MASK] the from"];

impl ExperimentSpec {
    /// The shipped synthetic benchmark for `protocol`.
    pub fn benchmark(protocol: Protocol) -> Self {
        let (target, patterns): (Option<&str>, Vec<&str>) = match protocol {
            Protocol::ComparePrompts => (Some("shopping"), BENCHMARK_PATTERNS.to_vec()),
            Protocol::FixedLmScale => (None, vec![BENCHMARK_PATTERNS[0]]),
            Protocol::Migration => (Some("shopping"), vec![BENCHMARK_PATTERNS[0]]),
            Protocol::PreAp => (Some("movie"), vec![BENCHMARK_PATTERNS[0]]),
        };
        ExperimentSpec {
            protocol,
            data: DataSource::Synthetic(SyntheticSpec::benchmark(4000, 2024)),
            model: ModelSettings { dropout_rate: 0.0, fan_in_init: true, ..ModelSettings::default() },
            prompt_layer: PromptLayerSettings::default(),
            pretrain: PretrainOptions { epochs: 8, ..PretrainOptions::default() },
            hyper: Hyper { lm_lr: 1e-3, fixed_lm_lr: 1e-5, migration_lr: 5e-4, pre_ap_lr: 5e-4, ..Hyper::default() },
            patterns: patterns.into_iter().map(String::from).collect(),
            verbalizer: vec![("positive".into(), "good".into()), ("negative".into(), "bad".into())],
            seeds: vec![1, 2, 3, 4, 5],
            k_train: default_k(),
            n_test: default_n_test(),
            large_k: default_large_k(),
            target_domain: target.map(String::from),
            source_domains: Vec::new(),
            source_per_domain: default_source_k(),
            source_test_per_domain: default_source_test(),
            max_len: default_max_len(),
            eval_each_epoch: false,
            precision: Precision::F64,
            min_count: default_min_count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patterns.is_empty() {
            return Err(Error::Config("no prompt patterns".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        if self.verbalizer.len() < 2 {
            return Err(Error::Config("verbalizer needs at least two labels".into()));
        }
        if self.hyper.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if matches!(self.protocol, Protocol::Migration | Protocol::PreAp) && self.target_domain.is_none() {
            return Err(Error::Config("MIGRATION and PRE_AP need a target_domain".into()));
        }
        if let Some(t) = &self.target_domain {
            if self.source_domains.contains(t) {
                return Err(Error::Config(format!("target domain `{t}` is also a source")));
            }
        }
        Ok(())
    }

    fn train_opts(&self, seed: u64) -> TrainOptions {
        TrainOptions { seed, eval_each_epoch: false, precision: self.precision }
    }

    fn regime(&self, kind: RegimeKind, lr: f64, epochs: usize) -> Regime {
        Regime { kind, learning_rate: lr, batch_size: self.hyper.batch_size, epochs }
    }

    fn few_shot_regime(&self, kind: RegimeKind) -> Regime {
        let lr = if kind == RegimeKind::ApFixedLm { self.hyper.fixed_lm_lr } else { self.hyper.lm_lr };
        self.regime(kind, lr, self.hyper.epochs)
    }
}

/// Labelled corpus, vocabulary and the MLM-pretrained stand-in model every
/// run of a spec starts from.
#[derive(Clone, Debug)]
pub struct Bench {
    pub corpus: Vec<LabeledExample>,
    pub vocab: Vocab,
    pub model: MlmModel,
    pub pretrain_losses: Vec<f64>,
}

pub fn load_corpus(source: &DataSource) -> Result<Vec<LabeledExample>> {
    match source {
        DataSource::Synthetic(s) => gen_synthetic_corpus(s),
        DataSource::Files(paths) => {
            let mut all = Vec::new();
            for p in paths {
                all.extend(load_dataset(p)?);
            }
            Ok(all)
        }
    }
}

impl Bench {
    /// Generates or loads the corpus, builds the vocabulary and pretrains the
    /// stand-in MLM on every text of the corpus plus any synthetic glosses.
    pub fn prepare(spec: &ExperimentSpec) -> Result<Bench> {
        let corpus = load_corpus(&spec.data)?;
        let vocab = Vocab::build(&corpus, spec.min_count)?;
        let config = spec.model.config(vocab.len(), spec.pretrain.seed);
        let mut model = MlmModel::new(config)?;
        let glosses = match &spec.data {
            DataSource::Synthetic(s) => gen_glosses(s)?,
            DataSource::Files(_) => Vec::new(),
        };
        let seqs: Vec<TokenSequence> = corpus
            .iter()
            .map(|e| e.text.as_str())
            .chain(glosses.iter().map(String::as_str))
            .map(|t| vocab.encode(t, spec.max_len))
            .collect::<Result<_>>()?;
        let pretrain_losses = pretrain(&mut model, &seqs, &spec.pretrain)?;
        Ok(Bench { corpus, vocab, model, pretrain_losses })
    }

    pub fn from_parts(corpus: Vec<LabeledExample>, vocab: Vocab, model: MlmModel) -> Self {
        Bench { corpus, vocab, model, pretrain_losses: Vec::new() }
    }

    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.corpus {
            if !out.contains(&e.domain) {
                out.push(e.domain.clone());
            }
        }
        out
    }

    pub fn task(&self, spec: &ExperimentSpec, pattern: &str) -> Result<Task> {
        Ok(Task::new(self.vocab.clone(), pattern, &spec.verbalizer)?.with_max_len(spec.max_len))
    }

    pub fn prompt_layer(&self, spec: &ExperimentSpec, seed: u64) -> Result<PromptGenLayer> {
        PromptGenLayer::new(PromptGenConfig {
            d_model: self.model.d_model(),
            d_hidden: spec.prompt_layer.d_hidden,
            s: spec.prompt_layer.s,
            seed,
        })
    }

    fn pool(&self, domain: Option<&str>) -> Result<Vec<LabeledExample>> {
        let pool = match domain {
            Some(d) => by_domain(&self.corpus, d),
            None => self.corpus.clone(),
        };
        if pool.is_empty() {
            return Err(Error::Config(format!("domain `{}` has no examples", domain.unwrap_or("*"))));
        }
        Ok(pool)
    }

    fn sources(&self, spec: &ExperimentSpec) -> Result<Vec<String>> {
        let target = spec.target_domain.as_deref();
        let sources: Vec<String> = if spec.source_domains.is_empty() {
            self.domains().into_iter().filter(|d| Some(d.as_str()) != target).collect()
        } else {
            spec.source_domains.clone()
        };
        if sources.len() < 2 {
            return Err(Error::Config(format!("need at least two source domains, have {}", sources.len())));
        }
        for s in &sources {
            if !self.domains().contains(s) {
                return Err(Error::Config(format!("unknown source domain `{s}`")));
            }
        }
        Ok(sources)
    }

    /// Fresh copy of the pretrained model and, for AP regimes, a prompt layer
    /// seeded by `seed`, trained under `regime` and scored on `test`.
    fn run(
        &self,
        spec: &ExperimentSpec,
        task: &Task,
        regime: &Regime,
        train_set: &[LabeledExample],
        test: &[LabeledExample],
        seed: u64,
    ) -> Result<f64> {
        let mut model = self.model.clone();
        let mut layer = if regime.kind.uses_prompt_layer() { Some(self.prompt_layer(spec, seed)?) } else { None };
        let h = train(&mut model, layer.as_mut(), task, train_set, test, regime, &spec.train_opts(seed))?;
        h.final_accuracy.ok_or_else(|| Error::EmptyInput("empty test set".into()))
    }
}

/// Accuracy of `predict_label` against gold labels, without dropout.
pub fn evaluate(model: &MlmModel, layer: Option<&PromptGenLayer>, task: &Task, test: &[LabeledExample]) -> Result<f64> {
    Classifier::new(model, layer, task).accuracy(test)
}

fn text_hash(text: &str) -> u64 {
    let mut h = DefaultHasher::new();
    text.hash(&mut h);
    h.finish()
}

/// Fails unless no test text (by hash) occurs in any training set.
pub fn audit_disjoint(train_sets: &[&[LabeledExample]], test: &[LabeledExample]) -> Result<()> {
    let seen: HashSet<u64> = train_sets.iter().flat_map(|s| s.iter()).map(|e| text_hash(&e.text)).collect();
    match test.iter().find(|e| seen.contains(&text_hash(&e.text))) {
        Some(e) => Err(Error::Contract(format!("test text `{}` also occurs in training data", e.text))),
        None => Ok(()),
    }
}

fn checked_split(pool: &[LabeledExample], k: usize, n_test: usize, seed: u64) -> Result<DatasetSplit> {
    let split = sample_few_shot(pool, k, n_test, seed)?;
    audit_disjoint(&[&split.train], &split.test)?;
    Ok(split)
}

/// ZERO_SHOT, HPL and AP_FULL rows for every pattern on identical splits.
pub fn run_compare_prompts(bench: &Bench, spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let pool = bench.pool(spec.target_domain.as_deref())?;
    let splits: Vec<DatasetSplit> =
        spec.seeds.iter().map(|&s| checked_split(&pool, spec.k_train, spec.n_test, s)).collect::<Result<_>>()?;
    let mut report = Report::default();
    for pattern in &spec.patterns {
        let task = bench.task(spec, pattern)?;
        for kind in [RegimeKind::ZeroShot, RegimeKind::Hpl, RegimeKind::ApFull] {
            let regime = spec.few_shot_regime(kind);
            for split in &splits {
                let acc = bench.run(spec, &task, &regime, &split.train, &split.test, split.seed)?;
                report.push_accuracy(pattern, kind.name(), acc, split.test.len(), split.seed);
            }
        }
    }
    Ok(report)
}

/// Label of the large-data row of [`run_fixed_lm_scale`].
pub fn scale_label(k: usize) -> String {
    format!("AP_FIXED_LM@{k}")
}

/// AP_FIXED_LM trained on `large_k` and on `k_train` examples of one
/// distribution, scored on a shared test set.
pub fn run_fixed_lm_scale(bench: &Bench, spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let pool = bench.pool(spec.target_domain.as_deref())?;
    let pattern = &spec.patterns[0];
    let task = bench.task(spec, pattern)?;
    let mut report = Report::default();
    let mut rows_small = Vec::new();
    for &seed in &spec.seeds {
        let large = checked_split(&pool, spec.large_k, spec.n_test, seed)?;
        let small = sample_few_shot(&large.train, spec.k_train, 0, seed)?.train;
        for (k, train_set, epochs) in
            [(spec.large_k, &large.train, spec.hyper.large_epochs), (spec.k_train, &small, spec.hyper.epochs)]
        {
            let regime = spec.regime(RegimeKind::ApFixedLm, spec.hyper.fixed_lm_lr, epochs);
            let mut model = bench.model.clone();
            let mut layer = bench.prompt_layer(spec, seed)?;
            let h = train(&mut model, Some(&mut layer), &task, train_set, &large.test, &regime, &spec.train_opts(seed))?;
            if !model.params().bit_eq(bench.model.params()) {
                return Err(Error::Contract("AP_FIXED_LM changed language-model parameters".into()));
            }
            let acc = h.final_accuracy.ok_or_else(|| Error::EmptyInput("empty test set".into()))?;
            if k == spec.large_k {
                report.push_accuracy(pattern, &scale_label(k), acc, large.test.len(), seed);
            } else {
                rows_small.push((acc, large.test.len(), seed));
            }
        }
    }
    for (acc, n, seed) in rows_small {
        report.push_accuracy(pattern, &scale_label(spec.k_train), acc, n, seed);
    }
    Ok(report)
}

fn pooled_sources(
    bench: &Bench,
    sources: &[String],
    per_domain: usize,
    test_per_domain: usize,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let mut train_set = Vec::new();
    let mut test = Vec::new();
    for (i, d) in sources.iter().enumerate() {
        let split = checked_split(&bench.pool(Some(d))?, per_domain, test_per_domain, seed.wrapping_add(i as u64 * 7919))?;
        train_set.extend(split.train);
        test.extend(split.test);
    }
    Ok((train_set, test))
}

/// Row label of MIGRATION's per-epoch curves.
pub fn curve_label(panel: &str, epoch: usize) -> String {
    format!("AP_FULL/{panel}/epoch{epoch}")
}

/// AP_FULL trained on pooled source domains, scored on a domain it never saw,
/// against ZERO_SHOT on the same held-out test set. The final AP_FULL row
/// holds the held-out accuracy.
pub fn run_migration(bench: &Bench, spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let target = spec.target_domain.as_deref().expect("validated");
    let sources = bench.sources(spec)?;
    let pattern = &spec.patterns[0];
    let task = bench.task(spec, pattern)?;
    let target_pool = bench.pool(Some(target))?;
    let mut report = Report::default();
    for &seed in &spec.seeds {
        let (train_set, in_domain) =
            pooled_sources(bench, &sources, spec.source_per_domain, spec.source_test_per_domain, seed)?;
        let held_out = checked_split(&target_pool, 0, spec.n_test, seed)?.test;
        if train_set.iter().any(|e| e.domain == target) {
            return Err(Error::Contract(format!("held-out domain `{target}` leaked into training")));
        }
        audit_disjoint(&[&train_set], &held_out)?;

        let zero = evaluate(&bench.model, None, &task, &held_out)?;
        report.push_accuracy(pattern, RegimeKind::ZeroShot.name(), zero, held_out.len(), seed);

        let mut model = bench.model.clone();
        let mut layer = bench.prompt_layer(spec, seed)?;
        let regime = spec.regime(RegimeKind::ApFull, spec.hyper.migration_lr, spec.hyper.migration_epochs);
        let mut curves = Vec::new();
        let each = spec.eval_each_epoch;
        let mut observe = |epoch: usize, m: &MlmModel, l: Option<&PromptGenLayer>| -> Result<()> {
            if each {
                curves.push((curve_label("in_domain", epoch), evaluate(m, l, &task, &in_domain)?, in_domain.len()));
                curves.push((curve_label("held_out", epoch), evaluate(m, l, &task, &held_out)?, held_out.len()));
            }
            Ok(())
        };
        let h = train_observed(
            &mut model,
            Some(&mut layer),
            &task,
            &train_set,
            &held_out,
            &regime,
            &spec.train_opts(seed),
            &mut observe,
        )?;
        for (label, acc, n) in curves {
            report.push_accuracy(pattern, &label, acc, n, seed);
        }
        let acc = h.final_accuracy.expect("non-empty held-out set");
        report.push_accuracy(pattern, RegimeKind::ApFull.name(), acc, held_out.len(), seed);
    }
    Ok(report)
}

pub const PRE_AP: &str = "PRE_AP";

/// HPL, AP_FULL from scratch and AP_FULL after source-domain pre-training
/// (PRE_AP), all on the identical target split.
pub fn run_pre_ap(bench: &Bench, spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let target = spec.target_domain.as_deref().expect("validated");
    let sources = bench.sources(spec)?;
    let pattern = &spec.patterns[0];
    let task = bench.task(spec, pattern)?;
    let target_pool = bench.pool(Some(target))?;
    let mut report = Report::default();
    for &seed in &spec.seeds {
        let split = checked_split(&target_pool, spec.k_train, spec.n_test, seed)?;
        let (source_train, _) = pooled_sources(bench, &sources, spec.source_per_domain, 0, seed)?;
        audit_disjoint(&[&split.train, &source_train], &split.test)?;

        for kind in [RegimeKind::Hpl, RegimeKind::ApFull] {
            let acc = bench.run(spec, &task, &spec.few_shot_regime(kind), &split.train, &split.test, seed)?;
            report.push_accuracy(pattern, kind.name(), acc, split.test.len(), seed);
        }

        let mut model = bench.model.clone();
        let mut layer = bench.prompt_layer(spec, seed)?;
        let phase1 = spec.regime(RegimeKind::ApFull, spec.hyper.pre_ap_lr, spec.hyper.pre_ap_epochs);
        train(&mut model, Some(&mut layer), &task, &source_train, &[], &phase1, &spec.train_opts(seed))?;
        let phase2 = spec.few_shot_regime(RegimeKind::ApFull);
        let h = train(&mut model, Some(&mut layer), &task, &split.train, &split.test, &phase2, &spec.train_opts(seed))?;
        report.push_accuracy(pattern, PRE_AP, h.final_accuracy.expect("non-empty"), split.test.len(), seed);
    }
    Ok(report)
}

/// Runs the protocol named by `spec` against a prepared bench.
pub fn run_experiment_with(bench: &Bench, spec: &ExperimentSpec) -> Result<Report> {
    match spec.protocol {
        Protocol::ComparePrompts => run_compare_prompts(bench, spec),
        Protocol::FixedLmScale => run_fixed_lm_scale(bench, spec),
        Protocol::Migration => run_migration(bench, spec),
        Protocol::PreAp => run_pre_ap(bench, spec),
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let bench = Bench::prepare(spec)?;
    run_experiment_with(&bench, spec)
}
