//! Tokenization, vocabulary, dataset files and few-shot sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];

/// Default cap on encoded sentence length, in tokens.
pub const DEFAULT_MAX_LEN: usize = 32;

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let tokens = tokenize_lenient(text);
    if tokens.is_empty() {
        return Err(Error::EmptyInput("text has no tokens".into()));
    }
    Ok(tokens)
}

/// Like [`tokenize`] but returns an empty list for blank text.
pub(crate) fn tokenize_lenient(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Bijection between token strings and ids. Ids `0..5` are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::Config("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Reserved tokens, then every token seen at least `min_count` times,
    /// ordered by descending frequency and then lexicographically.
    pub fn build(corpus: &[LabeledExample], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for ex in corpus {
            for t in tokenize_lenient(&ex.text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&i| self.token(i).ok_or_else(|| Error::Index(format!("token id {i} out of range"))))
            .collect()
    }

    /// Tokenizes and encodes `text`, truncating from the right at `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        let mut ids = self.encode_tokens(&tokenize(text)?);
        ids.truncate(max_len);
        TokenSequence::new(ids, max_len)
    }
}

/// Encoded input sentence: `1..=max_len` ids, never containing `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, max_len: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("token sequence is empty".into()));
        }
        if ids.len() > max_len {
            return Err(Error::Capacity(format!("{} tokens exceed max_len {max_len}", ids.len())));
        }
        if ids.contains(&MASK) {
            return Err(Error::Contract("input sequences may not contain [MASK]".into()));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: String,
    pub domain: String,
}

impl LabeledExample {
    pub fn new(text: impl Into<String>, label: impl Into<String>, domain: impl Into<String>) -> Self {
        LabeledExample { text: text.into(), label: label.into(), domain: domain.into() }
    }
}

/// Reads one JSON object per line with string fields `text`, `label`, `domain`.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn load_dataset(path: &Path) -> Result<Vec<LabeledExample>> {
    let raw = fs::read_to_string(path)?;
    parse_dataset(&raw)
}

pub fn parse_dataset(raw: &str) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let field = |name: &str| -> Result<String> {
            value
                .get(name)
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .ok_or_else(|| Error::Schema { line: line_no, field: name.to_string() })
        };
        let ex = LabeledExample { text: field("text")?, label: field("label")?, domain: field("domain")? };
        if ex.domain.is_empty() {
            return Err(Error::Schema { line: line_no, field: "domain".into() });
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(format_dataset(examples)?.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn format_dataset(examples: &[LabeledExample]) -> Result<String> {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex)?);
        s.push('\n');
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub seed: u64,
}

impl DatasetSplit {
    /// True when no test text also occurs in train.
    pub fn is_disjoint(&self) -> bool {
        let train: HashSet<&str> = self.train.iter().map(|e| e.text.as_str()).collect();
        self.test.iter().all(|e| !train.contains(e.text.as_str()))
    }
}

/// Label-balanced `k_train`-shot training set plus `n_test` held-out examples
/// whose texts never occur in the training set.
pub fn sample_few_shot(examples: &[LabeledExample], k_train: usize, n_test: usize, seed: u64) -> Result<DatasetSplit> {
    let labels: BTreeSet<&str> = examples.iter().map(|e| e.label.as_str()).collect();
    if labels.len() < 2 {
        return Err(Error::Capacity(format!("need at least two labels, found {}", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_label = k_train / labels.len();
    let extra = k_train % labels.len();

    let mut chosen = vec![false; examples.len()];
    let mut train_idx = Vec::with_capacity(k_train);
    for (li, label) in labels.iter().enumerate() {
        let quota = per_label + usize::from(li < extra);
        let mut pool: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].label == *label).collect();
        if pool.len() < quota {
            return Err(Error::Capacity(format!(
                "label `{label}` has {} examples, {quota} needed",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        for &i in &pool[..quota] {
            chosen[i] = true;
            train_idx.push(i);
        }
    }
    train_idx.shuffle(&mut rng);

    let train_texts: HashSet<&str> = train_idx.iter().map(|&i| examples[i].text.as_str()).collect();
    let mut rest: Vec<usize> = (0..examples.len())
        .filter(|&i| !chosen[i] && !train_texts.contains(examples[i].text.as_str()))
        .collect();
    if rest.len() < n_test {
        return Err(Error::Capacity(format!("{} examples left for a test set of {n_test}", rest.len())));
    }
    rest.shuffle(&mut rng);
    rest.truncate(n_test);

    Ok(DatasetSplit {
        train: train_idx.iter().map(|&i| examples[i].clone()).collect(),
        test: rest.iter().map(|&i| examples[i].clone()).collect(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(text: &str, label: &str) -> LabeledExample {
        LabeledExample::new(text, label, "test")
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The weather is very good").unwrap(), ["the", "weather", "is", "very", "good"]);
        assert_eq!(tokenize("Good!").unwrap(), ["good", "!"]);
        assert!(matches!(tokenize("  "), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn build_vocab_frequency_and_threshold() {
        let corpus = [ex("a b", "x"), ex("a", "y")];
        let v1 = Vocab::build(&corpus, 1).unwrap();
        assert_eq!(&v1.tokens()[5..], ["a", "b"]);
        let v2 = Vocab::build(&corpus, 2).unwrap();
        assert_eq!(&v2.tokens()[5..], ["a"]);
        for v in [&v1, &v2] {
            assert_eq!(v.encode("c", 8).unwrap().ids(), &[UNK]);
            assert_eq!(v.id("[MASK]"), Some(MASK));
        }
        assert!(matches!(Vocab::build(&[], 1), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn vocab_ties_break_lexicographically() {
        let v = Vocab::build(&[ex("zeta alpha mid", "x")], 1).unwrap();
        assert_eq!(&v.tokens()[5..], ["alpha", "mid", "zeta"]);
    }

    #[test]
    fn encode_truncates_from_the_right() {
        let v = Vocab::build(&[ex("a b c d", "x")], 1).unwrap();
        let s = v.encode("a b c d", 2).unwrap();
        assert_eq!(v.decode(s.ids()).unwrap(), ["a", "b"]);
    }

    #[test]
    fn token_sequence_rejects_mask_and_empty() {
        assert!(TokenSequence::new(vec![], 4).is_err());
        assert!(TokenSequence::new(vec![5, MASK], 4).is_err());
        assert!(TokenSequence::new(vec![5; 5], 4).is_err());
    }

    #[test]
    fn dataset_parsing() {
        let one = parse_dataset(r#"{"text":"great phone","label":"positive","domain":"shopping"}"#).unwrap();
        assert_eq!(one, vec![LabeledExample::new("great phone", "positive", "shopping")]);

        let raw = "{\"text\":\"a\",\"label\":\"p\",\"domain\":\"d\"}\n{\"text\":\"b\",\"domain\":\"d\"}\n";
        match parse_dataset(raw) {
            Err(Error::Schema { line, field }) => assert_eq!((line, field.as_str()), (2, "label")),
            other => panic!("expected schema error, got {other:?}"),
        }
        match parse_dataset("{\"text\":\"a\",\"label\":\"p\",\"domain\":\"d\"}\nnot json\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_dataset("").unwrap().is_empty());
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = vec![ex("nice \"quoted\" one", "positive"), ex("awful", "negative")];
        write_dataset(&path, &data).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), data);
        fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    fn balanced(n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| ex(&format!("sentence {i}"), if i % 2 == 0 { "positive" } else { "negative" }))
            .collect()
    }

    #[test]
    fn few_shot_balance_and_determinism() {
        let data = balanced(1000);
        let a = sample_few_shot(&data, 32, 600, 7).unwrap();
        let pos = a.train.iter().filter(|e| e.label == "positive").count();
        assert_eq!((pos, a.train.len() - pos), (16, 16));
        assert_eq!(a.test.len(), 600);
        assert!(a.is_disjoint());
        assert_eq!(a, sample_few_shot(&data, 32, 600, 7).unwrap());
    }

    #[test]
    fn few_shot_capacity_errors() {
        let mut data: Vec<_> = (0..10).map(|i| ex(&format!("p{i}"), "positive")).collect();
        data.extend((0..100).map(|i| ex(&format!("n{i}"), "negative")));
        assert!(matches!(sample_few_shot(&data, 32, 10, 1), Err(Error::Capacity(_))));
        assert!(matches!(sample_few_shot(&balanced(40), 32, 10, 1), Err(Error::Capacity(_))));
    }

    #[test]
    fn few_shot_tiny_split_always_disjoint() {
        let data = balanced(4);
        for seed in 0..200 {
            let s = sample_few_shot(&data, 2, 2, seed).unwrap();
            assert_eq!(s.train.len(), 2);
            assert_eq!(s.test.len(), 2);
            assert!(s.is_disjoint());
            let all: HashSet<_> = s.train.iter().chain(&s.test).map(|e| &e.text).collect();
            assert_eq!(all.len(), 4);
        }
    }

    #[test]
    fn duplicate_texts_never_leak_into_test() {
        let mut data = balanced(20);
        data.extend(balanced(20));
        for seed in 0..50 {
            assert!(sample_few_shot(&data, 8, 4, seed).unwrap().is_disjoint());
        }
    }

    proptest! {
        #[test]
        fn split_invariants(n in 10usize..80, k in 2usize..10, seed in any::<u64>()) {
            let data = balanced(n);
            let n_test = (n - k).min(5);
            let s = sample_few_shot(&data, k, n_test, seed).unwrap();
            let pos = s.train.iter().filter(|e| e.label == "positive").count() as i64;
            prop_assert!((2 * pos - k as i64).abs() <= 1);
            prop_assert!(s.is_disjoint());
        }

        #[test]
        fn decode_encode_identity(ids in proptest::collection::vec(0usize..8, 1..6)) {
            let v = Vocab::build(&[ex("a b c", "x")], 1).unwrap();
            let toks = v.decode(&ids).unwrap();
            prop_assert_eq!(v.encode_tokens(&toks), ids);
        }
    }
}
