//! Hand-crafted prompt patterns, hybrid template assembly and the verbalizer.
//!
//! A hybrid template lays out, top to bottom:
//!
//! ```text
//! e(p_1) .. e(p_i)  e([MASK])  e(p_i+1) .. e(p_m)  h_1 .. h_s  e(x_1) .. e(x_n)
//! ```
//!
//! With no adaptive vectors (`s = 0`) this is the plain hand-crafted cloze
//! template.

use std::ops::Range;

use crate::diff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::mlm::MlmModel;
use crate::promptgen::AdaptivePrompt;
use crate::text::{tokenize_lenient, TokenSequence, Vocab, MASK, RESERVED};

pub const MASK_PLACEHOLDER: &str = "[MASK]";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSpec {
    /// Prompt token ids without the mask.
    pub tokens: Vec<usize>,
    /// The mask goes before `tokens[mask_slot]`.
    pub mask_slot: usize,
}

impl PromptSpec {
    /// Number of hand-crafted tokens, mask excluded.
    pub fn m(&self) -> usize {
        self.tokens.len()
    }

    /// Prompt ids with `[MASK]` inserted at its slot.
    pub fn ids_with_mask(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.tokens.len() + 1);
        ids.extend_from_slice(&self.tokens[..self.mask_slot]);
        ids.push(MASK);
        ids.extend_from_slice(&self.tokens[self.mask_slot..]);
        ids
    }
}

/// Parses literal prompt text containing exactly one `[MASK]`. Every prompt
/// word must already be known to the vocabulary.
pub fn parse_prompt_spec(pattern: &str, vocab: &Vocab) -> Result<PromptSpec> {
    let parts: Vec<&str> = pattern.split(MASK_PLACEHOLDER).collect();
    if parts.len() != 2 {
        return Err(Error::Pattern(format!(
            "`{pattern}` must contain exactly one {MASK_PLACEHOLDER}, found {}",
            parts.len() - 1
        )));
    }
    let lookup = |part: &str| -> Result<Vec<usize>> {
        tokenize_lenient(part)
            .into_iter()
            .map(|t| vocab.id(&t).ok_or(Error::Vocabulary(t)))
            .collect()
    };
    let before = lookup(parts[0])?;
    let after = lookup(parts[1])?;
    let mask_slot = before.len();
    let mut tokens = before;
    tokens.extend(after);
    Ok(PromptSpec { tokens, mask_slot })
}

/// Label words scored at the mask position, in label order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verbalizer {
    labels: Vec<String>,
    words: Vec<String>,
    token_ids: Vec<usize>,
}

impl Verbalizer {
    pub fn new<L: AsRef<str>, W: AsRef<str>>(pairs: &[(L, W)], vocab: &Vocab) -> Result<Self> {
        if pairs.len() < 2 {
            return Err(Error::Config("a verbalizer needs at least two labels".into()));
        }
        let mut labels = Vec::new();
        let mut words = Vec::new();
        let mut token_ids = Vec::new();
        for (label, word) in pairs {
            let (label, word) = (label.as_ref(), word.as_ref());
            let toks = tokenize_lenient(word);
            if toks.len() != 1 {
                return Err(Error::Config(format!("label word `{word}` is not a single token")));
            }
            if RESERVED.contains(&word) {
                return Err(Error::Config(format!("label word `{word}` is reserved")));
            }
            let id = vocab.id(&toks[0]).ok_or_else(|| Error::Vocabulary(toks[0].clone()))?;
            if labels.iter().any(|l| l == label) {
                return Err(Error::Config(format!("duplicate label `{label}`")));
            }
            if token_ids.contains(&id) {
                return Err(Error::Config(format!("label word `{word}` used twice")));
            }
            labels.push(label.to_string());
            words.push(toks[0].clone());
            token_ids.push(id);
        }
        Ok(Verbalizer { labels, words, token_ids })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels.iter().position(|l| l == label).ok_or_else(|| Error::Label(label.to_string()))
    }
}

/// Row ranges of each template segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateLayout {
    pub prompt: Range<usize>,
    pub adaptive: Range<usize>,
    pub input: Range<usize>,
    pub mask_index: usize,
}

impl TemplateLayout {
    pub fn len(&self) -> usize {
        self.input.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridTemplate {
    /// `T x d_model`, positions not yet added.
    pub embeddings: Tensor,
    pub layout: TemplateLayout,
}

impl HybridTemplate {
    pub fn mask_index(&self) -> usize {
        self.layout.mask_index
    }
}

/// Graph version of [`assemble_hybrid`]: `adaptive` is an `s x d_model` node.
pub fn assemble_hybrid_node(
    g: &mut Graph,
    model: &MlmModel,
    prompt: &PromptSpec,
    adaptive: Option<NodeId>,
    x: &TokenSequence,
) -> Result<(NodeId, TemplateLayout)> {
    let prompt_ids = prompt.ids_with_mask();
    let s = match adaptive {
        Some(h) => {
            let (s, d) = g.value(h).dims2()?;
            if d != model.d_model() {
                return Err(Error::Shape(format!("prompt vectors have width {d}, model uses {}", model.d_model())));
            }
            s
        }
        None => 0,
    };
    let p_len = prompt_ids.len();
    let total = p_len + s + x.len();
    if total > model.config().max_positions {
        return Err(Error::Capacity(format!(
            "template of {total} rows exceeds max_positions {}",
            model.config().max_positions
        )));
    }
    let p_rows = model.embed_tokens_node(g, &prompt_ids)?;
    let x_rows = model.embed_tokens_node(g, x.ids())?;
    let parts: Vec<NodeId> = match adaptive {
        Some(h) => vec![p_rows, h, x_rows],
        None => vec![p_rows, x_rows],
    };
    let emb = g.concat(&parts, 0)?;
    let layout = TemplateLayout {
        prompt: 0..p_len,
        adaptive: p_len..p_len + s,
        input: p_len + s..total,
        mask_index: prompt.mask_slot,
    };
    Ok((emb, layout))
}

/// Concatenates prompt embeddings (mask included), the adaptive vectors if
/// any, and the input embeddings.
pub fn assemble_hybrid(
    model: &MlmModel,
    prompt: &PromptSpec,
    adaptive: Option<&AdaptivePrompt>,
    x: &TokenSequence,
) -> Result<HybridTemplate> {
    let mut g = Graph::new();
    let h = adaptive.map(|a| g.constant(a.vectors.clone())).transpose()?;
    let (emb, layout) = assemble_hybrid_node(&mut g, model, prompt, h, x)?;
    Ok(HybridTemplate { embeddings: g.value(emb).clone(), layout })
}

/// Probability of each verbalizer label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelPosterior {
    pub labels: Vec<String>,
    pub probs: Vec<f64>,
}

impl LabelPosterior {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.probs[i])
    }
}

/// Softmax over the verbalizer words' logits only.
pub fn verbalizer_posterior(logits_at_mask: &[f64], verbalizer: &Verbalizer) -> Result<LabelPosterior> {
    let mut picked = Vec::with_capacity(verbalizer.len());
    for &id in verbalizer.token_ids() {
        picked.push(*logits_at_mask.get(id).ok_or_else(|| {
            Error::Shape(format!("logit vector of length {} has no entry {id}", logits_at_mask.len()))
        })?);
    }
    let probs = crate::diff::softmax(&Tensor::vector(picked), 0)?.into_data();
    Ok(LabelPosterior { labels: verbalizer.labels().to_vec(), probs })
}

/// Argmax label; ties go to the earliest label in verbalizer order.
pub fn predict_label(posterior: &LabelPosterior) -> &str {
    let mut best = 0;
    for (i, &p) in posterior.probs.iter().enumerate() {
        if p > posterior.probs[best] {
            best = i;
        }
    }
    &posterior.labels[best]
}
