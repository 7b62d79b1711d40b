//! Synthetic multi-domain sentiment corpus.
//!
//! Each domain has its own positive and negative lexicon, nouns and sentence
//! templates. Domains share function words and a small pool of sentiment cue
//! clauses, which is what lets knowledge move between them.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{tokenize, LabeledExample};

pub const POSITIVE: &str = "positive";
pub const NEGATIVE: &str = "negative";
const ADJ: &str = "{adj}";
const NOUN: &str = "{noun}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub nouns: Vec<String>,
    /// Sentences with `{adj}` and `{noun}` slots.
    pub templates: Vec<String>,
}

/// Sentiment clauses shared by every domain, attached with probability
/// `rate` before or after the sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueSpec {
    pub rate: f64,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub domains: Vec<DomainSpec>,
    pub n_per_domain: usize,
    pub seed: u64,
    pub cues: CueSpec,
    /// Optional sentence openers; one is drawn per sentence, `""` means none.
    #[serde(default)]
    pub openers: Vec<String>,
    #[serde(default)]
    pub glosses: GlossSpec,
}

/// Short unlabeled sentences such as `sturdy is good` that pair each
/// domain adjective with a shared sentiment word. They only feed MLM
/// pretraining, never the labeled corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GlossSpec {
    pub per_domain: usize,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn lines(s: &[&str]) -> Vec<String> {
    s.iter().map(|t| t.to_string()).collect()
}

fn domain(name: &str, pos: &str, neg: &str, nouns: &str, templates: &[&str]) -> DomainSpec {
    DomainSpec { name: name.into(), positive: words(pos), negative: words(neg), nouns: words(nouns), templates: lines(templates) }
}

/// The five shipped domains.
pub fn benchmark_domains() -> Vec<DomainSpec> {
    vec![
        domain(
            "shopping",
            "sturdy reliable durable sleek solid responsive genuine handy speedy flawless lightweight bright accurate powerful compact premium",
            "flimsy faulty broken defective cheap cracked counterfeit sluggish scratched loose noisy dim overpriced unstable bulky leaky",
            "phone charger cable case laptop keyboard headset speaker watch camera package battery",
            &[
                "the {noun} is {adj}",
                "this {noun} feels {adj} and {adj}",
                "bought a {noun} , it arrived {adj}",
                "the {noun} from this store is really {adj}",
            ],
        ),
        domain(
            "microblog",
            "wonderful amazing joyful lovely fantastic cheerful blessed awesome delightful brilliant sunny peaceful exciting grateful fun hopeful",
            "terrible awful miserable gloomy depressing horrible exhausting lonely stressful painful tragic annoying dreadful sad hopeless boring",
            "day weekend morning news trip party evening holiday life week concert friend",
            &[
                "what a {adj} {noun}",
                "my {noun} was {adj}",
                "today the {noun} felt so {adj}",
                "such a {adj} {noun} , {adj} as always",
            ],
        ),
        domain(
            "takeout",
            "tasty delicious fresh crispy savory juicy hot flavorful tender generous prompt yummy aromatic hearty warm filling",
            "bland stale soggy cold greasy salty late undercooked rotten tasteless burnt tiny watery chewy spoiled lukewarm",
            "noodles rice soup burger pizza dumplings salad chicken delivery order portion sauce",
            &[
                "the {noun} was {adj}",
                "ordered the {noun} , {adj} and {adj}",
                "{adj} {noun} from this shop",
                "their {noun} came {adj} tonight",
            ],
        ),
        domain(
            "hotel",
            "clean spacious cozy quiet comfortable friendly tidy welcoming elegant convenient modern luxurious attentive charming airy relaxing",
            "dirty cramped smelly rude filthy shabby dusty moldy stuffy outdated unhelpful damp crowded loud stained creaky",
            "room bed lobby staff bathroom breakfast view pool service location shower carpet",
            &[
                "the {noun} was {adj}",
                "stayed two nights , the {noun} is {adj}",
                "a {adj} {noun} and a {adj} {noun}",
                "our {noun} at the hotel felt {adj}",
            ],
        ),
        domain(
            "movie",
            "gripping moving touching thrilling clever hilarious stunning captivating masterful heartfelt inspiring witty beautiful epic compelling memorable",
            "dull tedious predictable shallow clumsy messy slow forgettable cheesy confusing lame pointless bloated wooden silly weak",
            "movie film plot ending actor script soundtrack director scene sequel cast story",
            &[
                "the {noun} is {adj}",
                "watched the {noun} , {adj} from start to end",
                "a {adj} {noun} with a {adj} {noun}",
                "the {noun} of this film was {adj}",
            ],
        ),
    ]
}

impl SyntheticSpec {
    /// Five domains, `n_per_domain` sentences each.
    pub fn benchmark(n_per_domain: usize, seed: u64) -> Self {
        SyntheticSpec {
            domains: benchmark_domains(),
            n_per_domain,
            seed,
            cues: CueSpec {
                rate: 0.15,
                positive: lines(&["it was good", "feel good", "really good", "i love it", "so happy"]),
                negative: lines(&["it was bad", "feel bad", "really bad", "i hate it", "so upset"]),
            },
            openers: lines(&["", "", "", "honestly ,", "well ,", "overall ,"]),
            glosses: GlossSpec {
                per_domain: n_per_domain / 5,
                positive: lines(&["happy"]),
                negative: lines(&["upset"]),
            },
        }
    }

    pub fn domain_names(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Spec("no domains".into()));
        }
        if !(0.0..=1.0).contains(&self.cues.rate) {
            return Err(Error::Spec(format!("cue rate {} outside [0, 1]", self.cues.rate)));
        }
        if self.cues.rate > 0.0 && (self.cues.positive.is_empty() || self.cues.negative.is_empty()) {
            return Err(Error::Spec("cue rate is positive but a cue list is empty".into()));
        }
        let g = &self.glosses;
        if g.per_domain > 0 && (g.positive.is_empty() || g.negative.is_empty()) {
            return Err(Error::Spec("glosses requested but a gloss word list is empty".into()));
        }
        let mut names = std::collections::HashSet::new();
        for d in &self.domains {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Spec(format!("duplicate domain `{}`", d.name)));
            }
            if d.positive.is_empty() || d.negative.is_empty() {
                return Err(Error::Spec(format!("domain `{}` has an empty lexicon", d.name)));
            }
            if let Some(w) = d.positive.iter().find(|w| d.negative.contains(w)) {
                return Err(Error::Spec(format!("`{w}` is in both lexicons of `{}`", d.name)));
            }
            if d.templates.len() < 2 {
                return Err(Error::Spec(format!("domain `{}` needs at least two templates", d.name)));
            }
            for t in &d.templates {
                if !t.contains(ADJ) {
                    return Err(Error::Spec(format!("template `{t}` has no {ADJ} slot")));
                }
                if t.contains(NOUN) && d.nouns.is_empty() {
                    return Err(Error::Spec(format!("domain `{}` uses {NOUN} but has no nouns", d.name)));
                }
            }
        }
        Ok(())
    }
}

fn fill(template: &str, lexicon: &[String], nouns: &[String], rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    let mut rest = template;
    loop {
        let next = [ADJ, NOUN].iter().filter_map(|slot| rest.find(slot).map(|i| (i, *slot))).min();
        let Some((i, slot)) = next else {
            out.push_str(rest);
            return out;
        };
        out.push_str(&rest[..i]);
        let pool = if slot == ADJ { lexicon } else { nouns };
        out.push_str(pool.choose(rng).expect("validated non-empty"));
        rest = &rest[i + slot.len()..];
    }
}

/// `n_per_domain` examples per domain, labels alternating so every domain is
/// balanced to within one, shuffled within the domain.
pub fn gen_synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.domains.len() * spec.n_per_domain);
    for d in &spec.domains {
        let mut block = Vec::with_capacity(spec.n_per_domain);
        for i in 0..spec.n_per_domain {
            let positive = i % 2 == 0;
            let (lexicon, cues, label) =
                if positive { (&d.positive, &spec.cues.positive, POSITIVE) } else { (&d.negative, &spec.cues.negative, NEGATIVE) };
            let template = d.templates.choose(&mut rng).expect("validated");
            let mut text = fill(template, lexicon, &d.nouns, &mut rng);
            if let Some(opener) = spec.openers.choose(&mut rng) {
                if !opener.is_empty() {
                    text = format!("{opener} {text}");
                }
            }
            if rng.random::<f64>() < spec.cues.rate {
                let cue = cues.choose(&mut rng).expect("validated");
                text = if rng.random::<bool>() { format!("{cue} , {text}") } else { format!("{text} , {cue}") };
            }
            tokenize(&text)?;
            block.push(LabeledExample::new(text, label, d.name.clone()));
        }
        block.shuffle(&mut rng);
        out.extend(block);
    }
    Ok(out)
}

/// Pretraining-only gloss sentences, `per_domain` for each domain with
/// alternating polarity.
pub fn gen_glosses(spec: &SyntheticSpec) -> Result<Vec<String>> {
    spec.validate()?;
    let g = &spec.glosses;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9105_5e5);
    let mut out = Vec::with_capacity(spec.domains.len() * g.per_domain);
    for d in &spec.domains {
        for i in 0..g.per_domain {
            let (lexicon, words) = if i % 2 == 0 { (&d.positive, &g.positive) } else { (&d.negative, &g.negative) };
            let adj = lexicon.choose(&mut rng).expect("validated");
            let word = words.choose(&mut rng).expect("validated");
            out.push(format!("{adj} is {word}"));
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Examples of one domain.
pub fn by_domain(examples: &[LabeledExample], domain: &str) -> Vec<LabeledExample> {
    examples.iter().filter(|e| e.domain == domain).cloned().collect()
}
