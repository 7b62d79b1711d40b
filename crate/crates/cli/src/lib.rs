//! Command-line driver: synthetic data, MLM pretraining, regime training,
//! evaluation, prediction and the benchmark experiments.

pub mod checkpoint;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use adaprompt_core::experiments::{
    format_aggregates, format_report, gen_glosses, gen_synthetic_corpus, run_experiment, ExperimentSpec, Protocol,
    ReportStyle, SyntheticSpec,
};
use adaprompt_core::mlm::{pretrain, MlmModel};
use adaprompt_core::promptgen::PromptGenLayer;
use adaprompt_core::template::predict_label;
use adaprompt_core::text::{format_dataset, load_dataset, LabeledExample, TokenSequence, Vocab};
use adaprompt_core::training::{train, Classifier, RegimeKind, TrainOptions};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "adaprompt", version, about = "Adaptive-prompt few-shot sentiment classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic multi-domain corpus as JSONL.
    SynthData {
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corpus spec (JSON); the shipped benchmark domains when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n_per_domain: Option<usize>,
        /// Also write the pretraining-only gloss sentences, one per line.
        #[arg(long)]
        glosses: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the masked LM and write a checkpoint.
    PretrainMlm {
        /// Labeled JSONL datasets; only the texts are used.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Extra unlabeled sentences, one per line.
        #[arg(long)]
        extra_text: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one training regime from a checkpoint and write the result.
    Train {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_regime)]
        regime: Option<RegimeKind>,
        /// Training set; overrides the config.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Test set; overrides the config.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the training history here.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Accuracy of a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Label and posterior for one sentence.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a benchmark protocol and print its report.
    Experiment {
        /// Experiment spec (JSON).
        #[arg(long, conflicts_with = "protocol", required_unless_present = "protocol")]
        spec: Option<PathBuf>,
        /// Shipped benchmark protocol.
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        /// Run only this seed instead of the spec's seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = FormatArg::Table)]
        format: FormatArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Compare,
    Scale,
    Migration,
    PreAp,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Compare => Protocol::ComparePrompts,
            ProtocolArg::Scale => Protocol::FixedLmScale,
            ProtocolArg::Migration => Protocol::Migration,
            ProtocolArg::PreAp => Protocol::PreAp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Table,
    Jsonl,
}

fn parse_regime(s: &str) -> std::result::Result<RegimeKind, String> {
    s.to_ascii_uppercase().replace('-', "_").parse::<RegimeKind>().map_err(|e| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let c = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    c.validate()?;
    Ok(c)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_dataset(p)?);
    }
    Ok(out)
}

fn emit(out: &mut dyn Write, file: Option<&Path>, text: &str) -> Result<()> {
    match file {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(value)? + "\n")
}

fn synth_data(
    out: &mut dyn Write,
    file: Option<&Path>,
    spec: Option<&Path>,
    n_per_domain: Option<usize>,
    glosses: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let mut s = match spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => SyntheticSpec::benchmark(4000, seed),
    };
    s.seed = seed;
    if let Some(n) = n_per_domain {
        s.n_per_domain = n;
        if spec.is_none() {
            s.glosses.per_domain = n / 5;
        }
    }
    let corpus = gen_synthetic_corpus(&s)?;
    emit(out, file, &format_dataset(&corpus)?)?;
    if let Some(g) = glosses {
        let mut text = gen_glosses(&s)?.join("\n");
        text.push('\n');
        std::fs::write(g, text)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PretrainSummary<'a> {
    epoch_losses: &'a [f64],
    sentences: usize,
    vocab_size: usize,
    digest: String,
}

fn pretrain_mlm(
    out: &mut dyn Write,
    data: &[PathBuf],
    extra: Option<&Path>,
    config: Option<&Path>,
    file: &Path,
    seed: u64,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.pretrain.seed = seed;
    let mut texts = load_all(data)?;
    if let Some(p) = extra {
        for line in std::fs::read_to_string(p)?.lines().filter(|l| !l.trim().is_empty()) {
            texts.push(LabeledExample::new(line, "", ""));
        }
    }
    let vocab = Vocab::build(&texts, cfg.min_count)?;
    let mut model = MlmModel::new(cfg.model.config(vocab.len(), seed))?;
    let seqs: Vec<TokenSequence> = texts.iter().map(|e| vocab.encode(&e.text, cfg.max_len)).collect::<adaprompt_core::Result<_>>()?;
    let losses = pretrain(&mut model, &seqs, &cfg.pretrain)?;
    let digest = save_checkpoint(&model, None, &vocab, file)?;
    let summary = PretrainSummary { epoch_losses: &losses, sentences: seqs.len(), vocab_size: vocab.len(), digest };
    emit(out, None, &json_line(&summary)?)
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    out: &mut dyn Write,
    checkpoint: &Path,
    config: Option<&Path>,
    regime: Option<RegimeKind>,
    train_path: Option<&Path>,
    test_path: Option<&Path>,
    file: &Path,
    history_path: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(r) = regime {
        cfg.regime = r;
    }
    cfg.seed = seed;
    let Checkpoint { mut model, prompt_layer, vocab } = load_checkpoint(checkpoint)?;
    let mut layer = if cfg.regime.uses_prompt_layer() {
        match prompt_layer {
            Some(l) => Some(l),
            None => {
                cfg.validate()?;
                Some(PromptGenLayer::new(cfg.prompt_gen_config(model.d_model())?)?)
            }
        }
    } else {
        None
    };
    if let Some(l) = &layer {
        if l.config().d_model != model.d_model() {
            return Err(CliError::Config(format!(
                "prompt layer width {} does not match model width {}",
                l.config().d_model,
                model.d_model()
            )));
        }
    } else {
        cfg.validate()?;
    }
    let train_set = match train_path {
        Some(p) => load_dataset(p)?,
        None => load_all(&cfg.train_data)?,
    };
    let test_set = match test_path {
        Some(p) => load_dataset(p)?,
        None => load_all(&cfg.test_data)?,
    };
    let task = cfg.task(&vocab)?;
    let opts = TrainOptions { seed, eval_each_epoch: !test_set.is_empty(), precision: cfg.precision };
    let history = train(&mut model, layer.as_mut(), &task, &train_set, &test_set, &cfg.regime(), &opts)?;
    save_checkpoint(&model, layer.as_ref(), &vocab, file)?;
    let text = json_line(&history)?;
    if let Some(h) = history_path {
        std::fs::write(h, &text)?;
    }
    emit(out, None, &text)
}

#[derive(Serialize)]
struct EvalSummary {
    accuracy: f64,
    n: usize,
}

fn eval_cmd(out: &mut dyn Write, checkpoint: &Path, data: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config_lenient(config)?;
    let ck = load_checkpoint(checkpoint)?;
    let examples = load_dataset(data)?;
    let task = cfg.task(&ck.vocab)?;
    let accuracy = Classifier::new(&ck.model, ck.prompt_layer.as_ref(), &task).accuracy(&examples)?;
    emit(out, None, &json_line(&EvalSummary { accuracy, n: examples.len() })?)
}

#[derive(Serialize)]
struct Prediction {
    label: String,
    posterior: Vec<(String, f64)>,
}

fn predict_cmd(out: &mut dyn Write, checkpoint: &Path, text: &str, config: Option<&Path>) -> Result<()> {
    let cfg = load_config_lenient(config)?;
    let ck = load_checkpoint(checkpoint)?;
    let task = cfg.task(&ck.vocab)?;
    let post = Classifier::new(&ck.model, ck.prompt_layer.as_ref(), &task).posterior(text)?;
    let label = predict_label(&post).to_string();
    let posterior = post.labels.iter().cloned().zip(post.probs.iter().copied()).collect();
    emit(out, None, &json_line(&Prediction { label, posterior })?)
}

/// `eval` and `predict` only read the pattern and verbalizer, so the
/// regime-dependent checks do not apply.
fn load_config_lenient(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn experiment_cmd(
    out: &mut dyn Write,
    spec: Option<&Path>,
    protocol: Option<ProtocolArg>,
    seed: Option<u64>,
    format: FormatArg,
    file: Option<&Path>,
) -> Result<()> {
    let mut s: ExperimentSpec = match (spec, protocol) {
        (Some(p), _) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        (None, Some(p)) => ExperimentSpec::benchmark(p.into()),
        (None, None) => return Err(CliError::Config("either --spec or --protocol is required".into())),
    };
    if let Some(seed) = seed {
        s.seeds = vec![seed];
    }
    let report = run_experiment(&s)?;
    let text = match format {
        FormatArg::Jsonl => format_report(&report, ReportStyle::Jsonl)?,
        FormatArg::Table => format!("{}\n{}", format_report(&report, ReportStyle::Table)?, format_aggregates(&report)?),
    };
    emit(out, file, &text)
}

/// Executes a parsed command, writing its normal output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::SynthData { out: file, spec, n_per_domain, glosses, seed } => {
            synth_data(out, file.as_deref(), spec.as_deref(), n_per_domain, glosses.as_deref(), seed)
        }
        Command::PretrainMlm { data, extra_text, config, out: file, seed } => {
            pretrain_mlm(out, &data, extra_text.as_deref(), config.as_deref(), &file, seed)
        }
        Command::Train { checkpoint, config, regime, train, test, out: file, history, seed } => train_cmd(
            out,
            &checkpoint,
            config.as_deref(),
            regime,
            train.as_deref(),
            test.as_deref(),
            &file,
            history.as_deref(),
            seed,
        ),
        Command::Eval { checkpoint, data, config, .. } => eval_cmd(out, &checkpoint, &data, config.as_deref()),
        Command::Predict { checkpoint, text, config, .. } => predict_cmd(out, &checkpoint, &text, config.as_deref()),
        Command::Experiment { spec, protocol, seed, format, out: file } => {
            experiment_cmd(out, spec.as_deref(), protocol, seed, format, file.as_deref())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = out.write_all(rendered.as_bytes());
            } else {
                let _ = err.write_all(rendered.as_bytes());
            }
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
