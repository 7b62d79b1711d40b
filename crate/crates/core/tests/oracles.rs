use std::collections::HashMap;

use adaprompt_core::diff::grad_check;
use adaprompt_core::experiments::{by_domain, gen_synthetic_corpus, SyntheticSpec, NEGATIVE, POSITIVE};
use adaprompt_core::mlm::{MlmConfig, MlmModel};
use adaprompt_core::promptgen::{PromptGenConfig, PromptGenLayer};
use adaprompt_core::text::{LabeledExample, Vocab};
use adaprompt_core::training::{
    classification_loss, train, trainable_partition, Classifier, Regime, RegimeKind, Task, TrainOptions,
};

/// Unigram counts with add-one smoothing, scored by summed log ratios.
struct BagOfWords {
    weights: HashMap<String, f64>,
}

impl BagOfWords {
    fn fit(examples: &[LabeledExample]) -> Self {
        let mut pos: HashMap<&str, f64> = HashMap::new();
        let mut neg: HashMap<&str, f64> = HashMap::new();
        for e in examples {
            let table = if e.label == POSITIVE { &mut pos } else { &mut neg };
            for w in e.text.split_whitespace() {
                *table.entry(w).or_default() += 1.0;
            }
        }
        let (tp, tn): (f64, f64) = (pos.values().sum(), neg.values().sum());
        let words: Vec<&str> = pos.keys().chain(neg.keys()).copied().collect();
        let v = words.len() as f64;
        let weights = words
            .into_iter()
            .map(|w| {
                let p = (pos.get(w).unwrap_or(&0.0) + 1.0) / (tp + v);
                let n = (neg.get(w).unwrap_or(&0.0) + 1.0) / (tn + v);
                (w.to_string(), (p / n).ln())
            })
            .collect();
        BagOfWords { weights }
    }

    fn accuracy(&self, examples: &[LabeledExample]) -> f64 {
        let hits = examples
            .iter()
            .filter(|e| {
                let score: f64 = e.text.split_whitespace().filter_map(|w| self.weights.get(w)).sum();
                let guess = if score > 0.0 { POSITIVE } else { NEGATIVE };
                guess == e.label
            })
            .count();
        hits as f64 / examples.len() as f64
    }
}

#[test]
fn bag_of_words_transfers_imperfectly_between_domains() {
    let corpus = gen_synthetic_corpus(&SyntheticSpec::benchmark(600, 11)).unwrap();
    let names = ["shopping", "microblog", "takeout", "hotel", "movie"];
    for a in names {
        let da = by_domain(&corpus, a);
        let (fit, held) = da.split_at(400);
        let clf = BagOfWords::fit(fit);
        let in_domain = clf.accuracy(held);
        assert!(in_domain > 0.95, "{a}: in-domain {in_domain}");
        for b in names.iter().filter(|&&b| b != a) {
            let cross = clf.accuracy(&by_domain(&corpus, b));
            assert!(cross < 1.0, "{a} -> {b}: {cross}");
            assert!(cross < in_domain, "{a} -> {b}: {cross} vs {in_domain}");
        }
    }
}

fn words(n: usize) -> String {
    let mut w: Vec<String> = ["it", "was", "good", "bad"].iter().map(|s| s.to_string()).collect();
    w.extend((0..n - 4).map(|i| format!("w{i}")));
    w.join(" ")
}

fn tiny_model(vocab: usize, seed: u64, fan_in_init: bool) -> MlmModel {
    MlmModel::new(MlmConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab,
        max_positions: 24,
        dropout_rate: 0.0,
        seed,
        fan_in_init,
    })
    .unwrap()
}

fn grad_fixture() -> (MlmModel, PromptGenLayer, Task, Vec<LabeledExample>) {
    let vocab = Vocab::build(&[LabeledExample::new(words(25), "x", "d")], 1).unwrap();
    let task = Task::new(vocab.clone(), "it was [MASK]", &[("positive", "good"), ("negative", "bad")]).unwrap();
    let model = tiny_model(vocab.len(), 5, false);
    let layer = PromptGenLayer::new(PromptGenConfig { d_model: 16, d_hidden: 6, s: 3, seed: 6 }).unwrap();
    let batch = vec![
        LabeledExample::new("w1 w2 w3 w4", POSITIVE, "d"),
        LabeledExample::new("w5 w6 good w7 w8 w9", NEGATIVE, "d"),
    ];
    (model, layer, task, batch)
}

#[test]
fn classification_loss_gradients_for_each_regime() {
    for kind in [RegimeKind::Hpl, RegimeKind::ApFull, RegimeKind::ApFixedLm] {
        let (mut model, mut layer, task, batch) = grad_fixture();
        trainable_partition(&mut model, Some(&mut layer), kind).unwrap();
        let report = if kind.uses_prompt_layer() {
            let mut sys = (model, layer);
            grad_check(&mut sys, 1e-4, |(m, l), g| classification_loss(g, m, Some(l), &task, &batch, None)).unwrap()
        } else {
            grad_check(&mut model, 1e-4, |m, g| classification_loss(g, m, None, &task, &batch, None)).unwrap()
        };
        assert!(report.coordinates > 0);
        assert!(report.max_rel_error < 1e-4, "{kind}: {report:?}");
    }
}

#[test]
fn ap_full_memorizes_32_examples() {
    let corpus: Vec<LabeledExample> = (0..32)
        .map(|i| {
            let label = if i % 2 == 0 { POSITIVE } else { NEGATIVE };
            LabeledExample::new(format!("w{} w{} w{}", i % 13, (i * 7) % 17, (i * 5 + 3) % 19), label, "d")
        })
        .collect();
    let mut all = corpus.clone();
    all.push(LabeledExample::new(words(24), "x", "d"));
    let vocab = Vocab::build(&all, 1).unwrap();
    let task = Task::new(vocab.clone(), "it was [MASK]", &[("positive", "good"), ("negative", "bad")]).unwrap();
    let mut model = MlmModel::new(MlmConfig { n_layers: 2, ..tiny_model(vocab.len(), 3, true).config().clone() }).unwrap();
    let mut layer = PromptGenLayer::new(PromptGenConfig { d_model: 16, d_hidden: 16, s: 2, seed: 4 }).unwrap();
    let regime = Regime::new(RegimeKind::ApFull).with_learning_rate(3e-3).with_epochs(50);
    train(&mut model, Some(&mut layer), &task, &corpus, &[], &regime, &TrainOptions::default()).unwrap();
    let acc = Classifier::new(&model, Some(&layer), &task).accuracy(&corpus).unwrap();
    assert_eq!(acc, 1.0);
}

