//! Concept vocabulary, zero-shot concept assignment, and the pool of
//! pre-generated regularization phrases.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, weighted::WeightedIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ImageFeature, PSEUDO_MARKER};
use crate::error::{Error, Result};
use crate::store;
use crate::util::stable_hash;

/// Prompt prefix shared by concept classification and phrase generation.
pub const PHOTO_PREFIX: &str = "a photo of";

pub fn concept_prompt(concept: &str) -> String {
    format!("{PHOTO_PREFIX} {concept}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptVocabulary {
    concepts: Vec<String>,
}

impl ConceptVocabulary {
    pub fn new(concepts: Vec<String>) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::format("concept vocabulary is empty"));
        }
        let mut seen = HashSet::new();
        for (i, c) in concepts.iter().enumerate() {
            if c.trim().is_empty() {
                return Err(Error::format(format!("concept {i} is blank")));
            }
            if !seen.insert(c.as_str()) {
                return Err(Error::format(format!("duplicate concept {c:?} at line {}", i + 1)));
            }
        }
        Ok(Self { concepts })
    }

    /// Reads a newline-delimited UTF-8 file. Blank lines are skipped; order is kept.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let concepts = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Self::new(concepts).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.concepts.join("\n");
        text.push('\n');
        store::write_atomic(path, text.as_bytes())
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn contains(&self, concept: &str) -> bool {
        self.concepts.iter().any(|c| c == concept)
    }
}

/// The `k` concepts assigned to one image, most similar first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptAssignment {
    pub image_id: String,
    pub concepts: Vec<String>,
}

/// Zero-shot classifier over a fixed vocabulary. Prompt features are computed
/// once and reused for every image.
pub struct ConceptClassifier {
    vocab: ConceptVocabulary,
    prompt_features: Array2<f64>,
}

impl ConceptClassifier {
    pub fn new<B: Backbone + ?Sized>(vocab: ConceptVocabulary, backbone: &B) -> Result<Self> {
        let rows = vocab
            .concepts()
            .par_iter()
            .map(|c| {
                backbone
                    .encode_text(&concept_prompt(c))
                    .and_then(|f| f.normalized())
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = backbone.config().feature_dim;
        let mut prompt_features = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            prompt_features
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from(r.values()));
        }
        Ok(Self {
            vocab,
            prompt_features,
        })
    }

    pub fn vocabulary(&self) -> &ConceptVocabulary {
        &self.vocab
    }

    /// Cosine similarity of the image to every concept prompt, in vocabulary order.
    pub fn scores(&self, feature: &ImageFeature) -> Result<Vec<f64>> {
        if feature.len() != self.prompt_features.ncols() {
            return Err(Error::input(format!(
                "image feature has length {}, expected {}",
                feature.len(),
                self.prompt_features.ncols()
            )));
        }
        let unit = feature.normalized()?;
        Ok(self
            .prompt_features
            .dot(&ndarray::ArrayView1::from(unit.values()))
            .to_vec())
    }

    /// Top-`k` concepts by cosine similarity; ties keep vocabulary order.
    pub fn classify(&self, image_id: &str, feature: &ImageFeature, k: usize) -> Result<ConceptAssignment> {
        if k == 0 || k > self.vocab.len() {
            return Err(Error::input(format!(
                "k = {k} outside 1..={}",
                self.vocab.len()
            )));
        }
        let scores = self.scores(feature)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(ConceptAssignment {
            image_id: image_id.to_string(),
            concepts: order[..k]
                .iter()
                .map(|&i| self.vocab.concepts[i].clone())
                .collect(),
        })
    }
}

/// One-shot classification without keeping the prompt features around.
pub fn classify_concepts<B: Backbone + ?Sized>(
    image_id: &str,
    feature: &ImageFeature,
    vocab: &ConceptVocabulary,
    k: usize,
    backbone: &B,
) -> Result<ConceptAssignment> {
    if k > vocab.len() {
        return Err(Error::input(format!("k = {k} exceeds vocabulary size {}", vocab.len())));
    }
    ConceptClassifier::new(vocab.clone(), backbone)?.classify(image_id, feature, k)
}

pub type GeneratorError = Box<dyn std::error::Error + Send + Sync>;

/// Autoregressive text generator contract. Returns the prompt followed by its
/// continuation.
pub trait TextGenerator: Send + Sync {
    fn generate(
        &self,
        prompt: &str,
        max_tokens: usize,
        temperature: f64,
        seed: u64,
    ) -> std::result::Result<String, GeneratorError>;
}

const SKELETONS: &[&str] = &[
    "that was taken {place} {clause}",
    "{place} {time}",
    "that i saw {place} {time}",
    "with {who} {place}",
    "that looks {adj} {place}",
    "taken by {who} {time}",
    "{clause}",
    "that was {adj} and {adj} {time}",
];
const PLACES: &[&str] = &[
    "in the park",
    "at the beach",
    "on a busy street",
    "in the kitchen",
    "near the river",
    "in a small village",
    "inside the museum",
    "on the mountain trail",
];
const TIMES: &[&str] = &[
    "last summer",
    "early in the morning",
    "at sunset",
    "during the winter holidays",
    "on a rainy day",
    "late at night",
];
const CLAUSES: &[&str] = &[
    "by his owner, who is a friend of mine",
    "while everyone was watching",
    "and shared with the whole family",
    "for a local newspaper",
    "just before the storm arrived",
    "as part of a school project",
];
const WHO: &[&str] = &[
    "my brother",
    "a professional photographer",
    "an old friend",
    "a curious tourist",
    "my neighbor",
];
const ADJ: &[&str] = &["bright", "quiet", "colorful", "old", "beautiful", "strange", "tiny"];

/// Deterministic generator that continues the prompt with one of a fixed set of
/// sentence skeletons. Lower temperatures concentrate on the first choices.
#[derive(Debug, Clone, Default)]
pub struct TemplateGenerator;

fn pick<'a, R: Rng>(options: &[&'a str], temperature: f64, rng: &mut R) -> &'a str {
    if temperature <= 0.0 {
        return options[0];
    }
    let weights: Vec<f64> = (0..options.len())
        .map(|i| (-0.5 * i as f64 / temperature).exp())
        .collect();
    let dist = WeightedIndex::new(&weights).expect("weights are positive");
    options[dist.sample(rng)]
}

impl TextGenerator for TemplateGenerator {
    fn generate(
        &self,
        prompt: &str,
        _max_tokens: usize,
        temperature: f64,
        seed: u64,
    ) -> std::result::Result<String, GeneratorError> {
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(format!("invalid temperature {temperature}").into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skeleton = pick(SKELETONS, temperature, &mut rng);
        let mut out = String::from(prompt);
        out.push(' ');
        let mut rest = skeleton;
        while let Some(start) = rest.find('{') {
            let end = rest[start..].find('}').map(|e| start + e).unwrap_or(rest.len() - 1);
            out.push_str(&rest[..start]);
            let filler = match &rest[start + 1..end] {
                "place" => pick(PLACES, temperature, &mut rng),
                "time" => pick(TIMES, temperature, &mut rng),
                "clause" => pick(CLAUSES, temperature, &mut rng),
                "who" => pick(WHO, temperature, &mut rng),
                _ => pick(ADJ, temperature, &mut rng),
            };
            out.push_str(filler);
            rest = &rest[end + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhraseGenConfig {
    pub n: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PhraseGenConfig {
    fn default() -> Self {
        Self {
            n: 256,
            max_tokens: 35,
            temperature: 0.5,
            seed: 0,
        }
    }
}

/// Cuts `text` at a word boundary so that it holds at most `max_tokens` tokens.
fn clip_to_tokens<B: Backbone + ?Sized>(text: &str, max_tokens: usize, backbone: &B) -> String {
    let mut kept = String::new();
    for word in text.split_whitespace() {
        let candidate = if kept.is_empty() {
            word.to_string()
        } else {
            format!("{kept} {word}")
        };
        if backbone.tokenize(&candidate).len() > max_tokens {
            break;
        }
        kept = candidate;
    }
    kept
}

/// Generates `cfg.n` phrases continuing "a photo of {concept}".
pub fn generate_phrases<B: Backbone + ?Sized>(
    concept: &str,
    generator: &dyn TextGenerator,
    cfg: &PhraseGenConfig,
    backbone: &B,
) -> Result<Vec<String>> {
    let prompt = concept_prompt(concept);
    if backbone.tokenize(&prompt).len() > cfg.max_tokens {
        return Err(Error::Generator {
            concept: concept.to_string(),
            message: format!("prompt alone exceeds {} tokens", cfg.max_tokens),
        });
    }
    (0..cfg.n)
        .map(|i| {
            let seed = stable_hash(cfg.seed, &[concept.as_bytes(), &(i as u64).to_le_bytes()]);
            let raw = generator
                .generate(&prompt, cfg.max_tokens, cfg.temperature, seed)
                .map_err(|e| Error::Generator {
                    concept: concept.to_string(),
                    message: e.to_string(),
                })?;
            if !raw.starts_with(&prompt) {
                return Err(Error::Generator {
                    concept: concept.to_string(),
                    message: format!("output {raw:?} does not continue the prompt"),
                });
            }
            let clipped = clip_to_tokens(&raw, cfg.max_tokens, backbone);
            Ok(if clipped.starts_with(&prompt) { clipped } else { prompt.clone() })
        })
        .collect()
}

/// Concept → pre-generated phrases.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhraseBank {
    entries: BTreeMap<String, Vec<String>>,
}

impl PhraseBank {
    pub fn new(entries: BTreeMap<String, Vec<String>>) -> Result<Self> {
        for (concept, phrases) in &entries {
            if phrases.is_empty() {
                return Err(Error::format(format!("concept {concept:?} has no phrases")));
            }
            let prefix = concept_prompt(concept);
            if let Some(bad) = phrases.iter().find(|p| !p.starts_with(&prefix)) {
                return Err(Error::format(format!(
                    "phrase {bad:?} does not begin with {prefix:?}"
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Generates phrases for every concept, one parallel task per concept.
    pub fn generate<B: Backbone + ?Sized>(
        vocab: &ConceptVocabulary,
        generator: &dyn TextGenerator,
        cfg: &PhraseGenConfig,
        backbone: &B,
    ) -> Result<Self> {
        let shards = vocab
            .concepts()
            .par_iter()
            .map(|c| generate_phrases(c, generator, cfg, backbone).map(|p| (c.clone(), p)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(shards.into_iter().collect())
    }

    /// Checks that every concept in the bank belongs to `vocab`.
    pub fn check_vocabulary(&self, vocab: &ConceptVocabulary) -> Result<()> {
        let known: HashSet<&str> = vocab.concepts().iter().map(String::as_str).collect();
        match self.entries.keys().find(|c| !known.contains(c.as_str())) {
            Some(c) => Err(Error::format(format!("bank concept {c:?} is not in the vocabulary"))),
            None => Ok(()),
        }
    }

    pub fn phrases(&self, concept: &str) -> Option<&[String]> {
        self.entries.get(concept).map(Vec::as_slice)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = store::read_json(path)?;
        Self::new(raw)
    }
}

/// Replaces the first occurrence of `concept` (searched after the
/// "a photo of" prefix when present) with the pseudo-word marker.
pub fn substitute_pseudo(phrase: &str, concept: &str) -> Result<String> {
    if concept.is_empty() {
        return Err(Error::input("empty concept"));
    }
    let start = phrase
        .strip_prefix(PHOTO_PREFIX)
        .map(|_| PHOTO_PREFIX.len())
        .unwrap_or(0);
    let at = phrase[start..]
        .find(concept)
        .map(|i| start + i)
        .ok_or_else(|| Error::input(format!("concept {concept:?} not found in {phrase:?}")))?;
    Ok(format!(
        "{}{PSEUDO_MARKER}{}",
        &phrase[..at],
        &phrase[at + concept.len()..]
    ))
}

/// Draws a concept uniformly from the assignment, then a phrase uniformly
/// from that concept's pool (with replacement across draws).
pub fn sample_phrase<'b, R: Rng + ?Sized>(
    bank: &'b PhraseBank,
    assignment: &ConceptAssignment,
    rng: &mut R,
) -> Result<(&'b str, &'b str)> {
    let concept = assignment
        .concepts
        .choose(rng)
        .ok_or_else(|| Error::input(format!("image {} has no concepts", assignment.image_id)))?;
    let (key, phrases) = bank
        .entries
        .get_key_value(concept.as_str())
        .ok_or_else(|| Error::Lookup(format!("concept {concept:?} missing from phrase bank")))?;
    let phrase = phrases
        .choose(rng)
        .expect("bank invariant: phrase lists are nonempty");
    Ok((key.as_str(), phrase.as_str()))
}
