//! Optimization-based textual inversion: fit one pseudo-word token per image
//! so that template sentences containing it land near the image feature,
//! regularized by generated phrases about the image's concepts.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ImageFeature, Image, PseudoTemplate, PSEUDO_MARKER};
use crate::error::{Error, Result};
use crate::linalg::{self, cosine_with_grad};
use crate::optim::{AdamW, AdamWConfig, Ema};
use crate::phrasebank::{sample_phrase, substitute_pseudo, ConceptClassifier, PhraseBank};
use crate::store;
use crate::util::{config_digest, stable_hash};

/// Neutral templates sampled during inversion.
pub const DEFAULT_TEMPLATES: [&str; 8] = [
    "a photo of ⟨*⟩",
    "a cropped photo of ⟨*⟩",
    "a close-up photo of ⟨*⟩",
    "a bright photo of ⟨*⟩",
    "a good photo of ⟨*⟩",
    "a photo of the ⟨*⟩",
    "a rendition of ⟨*⟩",
    "a picture of ⟨*⟩",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OtiConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda_cos: f64,
    pub lambda_oti_gpt: f64,
    pub ema_decay: f64,
    pub k_concepts: usize,
    pub templates: Vec<String>,
    pub seed: u64,
}

impl Default for OtiConfig {
    fn default() -> Self {
        Self {
            iterations: 350,
            learning_rate: 2e-2,
            weight_decay: 0.01,
            lambda_cos: 1.0,
            lambda_oti_gpt: 0.5,
            ema_decay: 0.99,
            k_concepts: 15,
            templates: DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect(),
            seed: 0,
        }
    }
}

impl OtiConfig {
    /// Zero iterations is accepted and yields the seeded initialization.
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} not in (0, 1)", self.ema_decay)));
        }
        if self.lambda_cos < 0.0 || self.lambda_oti_gpt < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be positive, weight decay non-negative".into()));
        }
        if self.k_concepts == 0 {
            return Err(Error::Config("k_concepts must be positive".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("at least one template is required".into()));
        }
        for t in &self.templates {
            if t.matches(PSEUDO_MARKER).count() != 1 {
                return Err(Error::Config(format!(
                    "template {t:?} must contain exactly one {PSEUDO_MARKER}"
                )));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }
}

/// A learned vector in token-embedding space, bound to the pseudo-word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoToken {
    pub values: Vec<f64>,
    pub source_image_id: String,
}

impl PseudoToken {
    pub fn new(source_image_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("pseudo token has non-finite entries".into()));
        }
        Ok(Self {
            values,
            source_image_id: source_image_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSetManifest {
    pub image_ids: Vec<String>,
    pub token_dim: usize,
    pub config_digest: String,
}

/// One pseudo token per image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoTokenSet {
    tokens: BTreeMap<String, PseudoToken>,
}

impl PseudoTokenSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a token keyed by its source image; replaces any previous one.
    pub fn insert(&mut self, token: PseudoToken) {
        self.tokens.insert(token.source_image_id.clone(), token);
    }

    pub fn get(&self, image_id: &str) -> Option<&PseudoToken> {
        self.tokens.get(image_id)
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.tokens.contains_key(image_id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PseudoToken> {
        self.tokens.values()
    }

    /// Writes `path` (f32 rows) and `path.json` (manifest).
    pub fn save(&self, path: &Path, config_digest: &str) -> Result<()> {
        let dim = self.tokens.values().next().map_or(0, |t| t.values.len());
        let mut rows = Array2::zeros((self.tokens.len(), dim));
        for (i, t) in self.tokens.values().enumerate() {
            if t.values.len() != dim {
                return Err(Error::input("tokens of differing lengths"));
            }
            rows.row_mut(i).assign(&ndarray::ArrayView1::from(&t.values));
        }
        store::write_rows(path, &rows)?;
        store::write_json(
            &store::sidecar_path(path),
            &TokenSetManifest {
                image_ids: self.tokens.keys().cloned().collect(),
                token_dim: dim,
                config_digest: config_digest.to_string(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<(Self, TokenSetManifest)> {
        let manifest: TokenSetManifest = store::read_json(&store::sidecar_path(path))?;
        let rows = store::read_rows(path, manifest.image_ids.len(), manifest.token_dim)?;
        let mut set = Self::new();
        for (id, row) in manifest.image_ids.iter().zip(rows.rows()) {
            if set.contains(id) {
                return Err(Error::format(format!("duplicate image id {id:?} in token set")));
            }
            set.insert(PseudoToken::new(id.clone(), row.to_vec())?);
        }
        Ok((set, manifest))
    }
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - linalg::cosine(a, b)?)
}

/// A phrase about a concept, pre-encoded, together with its marker version
/// ready for splicing.
#[derive(Debug, Clone)]
pub struct GptTarget {
    phrase_feature: Vec<f64>,
    pseudo_phrase: PseudoTemplate,
}

impl GptTarget {
    pub fn prepare<B: Backbone + ?Sized>(concept: &str, phrase: &str, backbone: &B) -> Result<Self> {
        let substituted = substitute_pseudo(phrase, concept)?;
        Ok(Self {
            phrase_feature: backbone.encode_text(phrase)?.into_inner(),
            pseudo_phrase: PseudoTemplate::new(backbone, &substituted)?,
        })
    }

    pub fn loss<B: Backbone + ?Sized>(&self, backbone: &B, pseudo: &[f64]) -> Result<f64> {
        let spliced = self.pseudo_phrase.encode(backbone, pseudo)?;
        cosine_loss(&self.phrase_feature, spliced.values())
    }

    pub fn loss_and_grad<B: Backbone + ?Sized>(&self, backbone: &B, pseudo: &[f64]) -> Result<(f64, Vec<f64>)> {
        let spliced = self.pseudo_phrase.encode(backbone, pseudo)?;
        let (c, _, g_feature) = cosine_with_grad(&self.phrase_feature, spliced.values())?;
        let upstream: Vec<f64> = g_feature.iter().map(|g| -g).collect();
        let grad = self.pseudo_phrase.pullback(backbone, pseudo, &upstream)?;
        Ok((1.0 - c, grad))
    }
}

/// Phrase regularizer: `1 - cos(enc(phrase), enc(phrase with concept -> pseudo))`.
pub fn gpt_regularization_loss<B: Backbone + ?Sized>(
    pseudo: &[f64],
    concept: &str,
    phrase: &str,
    backbone: &B,
) -> Result<f64> {
    GptTarget::prepare(concept, phrase, backbone)?.loss(backbone, pseudo)
}

pub fn gpt_regularization_loss_with_grad<B: Backbone + ?Sized>(
    pseudo: &[f64],
    concept: &str,
    phrase: &str,
    backbone: &B,
) -> Result<(f64, Vec<f64>)> {
    GptTarget::prepare(concept, phrase, backbone)?.loss_and_grad(backbone, pseudo)
}

/// Breakdown of one evaluation of the inversion objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtiLoss {
    pub total: f64,
    pub cos: f64,
    pub gpt: f64,
}

fn image_term<B: Backbone + ?Sized>(
    template: &PseudoTemplate,
    image_feature: &[f64],
    pseudo: &[f64],
    backbone: &B,
) -> Result<(f64, Vec<f64>)> {
    let text = template.encode(backbone, pseudo)?;
    let (c, _, g_text) = cosine_with_grad(image_feature, text.values())?;
    let upstream: Vec<f64> = g_text.iter().map(|g| -g).collect();
    Ok((1.0 - c, template.pullback(backbone, pseudo, &upstream)?))
}

/// `lambda_cos * L_cos + lambda_oti_gpt * L_gpt` together with its gradient
/// with respect to the pseudo token.
#[allow(clippy::too_many_arguments)]
pub fn oti_objective_with_grad<B: Backbone + ?Sized>(
    pseudo: &[f64],
    image_feature: &ImageFeature,
    template: &str,
    concept: &str,
    phrase: &str,
    config: &OtiConfig,
    backbone: &B,
) -> Result<(OtiLoss, Vec<f64>)> {
    let template = PseudoTemplate::new(backbone, template)?;
    let gpt = GptTarget::prepare(concept, phrase, backbone)?;
    objective_parts(pseudo, image_feature.values(), &template, &gpt, config, backbone)
}

pub fn oti_objective<B: Backbone + ?Sized>(
    pseudo: &[f64],
    image_feature: &ImageFeature,
    template: &str,
    concept: &str,
    phrase: &str,
    config: &OtiConfig,
    backbone: &B,
) -> Result<f64> {
    oti_objective_with_grad(pseudo, image_feature, template, concept, phrase, config, backbone)
        .map(|(l, _)| l.total)
}

fn objective_parts<B: Backbone + ?Sized>(
    pseudo: &[f64],
    image_feature: &[f64],
    template: &PseudoTemplate,
    gpt: &GptTarget,
    config: &OtiConfig,
    backbone: &B,
) -> Result<(OtiLoss, Vec<f64>)> {
    let (cos, g_cos) = image_term(template, image_feature, pseudo, backbone)?;
    let (gpt_loss, g_gpt) = gpt.loss_and_grad(backbone, pseudo)?;
    let grad = g_cos
        .iter()
        .zip(&g_gpt)
        .map(|(a, b)| config.lambda_cos * a + config.lambda_oti_gpt * b)
        .collect();
    Ok((
        OtiLoss {
            total: config.lambda_cos * cos + config.lambda_oti_gpt * gpt_loss,
            cos,
            gpt: gpt_loss,
        },
        grad,
    ))
}

/// Shared read-only inputs for inverting many images.
pub struct Inverter<'a, B: Backbone + ?Sized> {
    pub backbone: &'a B,
    pub classifier: &'a ConceptClassifier,
    pub bank: &'a PhraseBank,
    pub config: &'a OtiConfig,
}

/// Per-run record of the image-similarity term.
#[derive(Debug, Clone, PartialEq)]
pub struct OtiTrace {
    /// Mean `L_cos` over all templates at the initial token.
    pub initial_cos_loss: f64,
    /// Mean `L_cos` over all templates at the returned (averaged) token.
    pub final_cos_loss: f64,
    /// Total objective at every iteration.
    pub losses: Vec<f64>,
}

/// Seed for one image, derived from the global seed and the image id so that
/// batch runs are independent of scheduling.
pub fn image_seed(global_seed: u64, image_id: &str) -> u64 {
    stable_hash(global_seed, &[b"oti", image_id.as_bytes()])
}

impl<'a, B: Backbone + ?Sized> Inverter<'a, B> {
    pub fn new(
        backbone: &'a B,
        classifier: &'a ConceptClassifier,
        bank: &'a PhraseBank,
        config: &'a OtiConfig,
    ) -> Result<Self> {
        config.validate()?;
        if config.k_concepts > classifier.vocabulary().len() {
            return Err(Error::Config(format!(
                "k_concepts {} exceeds vocabulary size {}",
                config.k_concepts,
                classifier.vocabulary().len()
            )));
        }
        Ok(Self {
            backbone,
            classifier,
            bank,
            config,
        })
    }

    fn initial_token(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let dim = self.backbone.config().token_dim;
        let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let scale = self.backbone.token_embedding_norm() / linalg::norm(&raw).max(f64::MIN_POSITIVE);
        raw.into_iter().map(|v| v * scale).collect()
    }

    fn mean_cos_loss(&self, templates: &[PseudoTemplate], feature: &[f64], token: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for t in templates {
            total += cosine_loss(feature, t.encode(self.backbone, token)?.values())?;
        }
        Ok(total / templates.len() as f64)
    }

    pub fn invert_feature(&self, image_id: &str, feature: &ImageFeature) -> Result<PseudoToken> {
        self.invert_feature_traced(image_id, feature).map(|(t, _)| t)
    }

    pub fn invert_image(&self, image_id: &str, image: &Image) -> Result<PseudoToken> {
        let feature = self.backbone.encode_image(image)?;
        self.invert_feature(image_id, &feature)
    }

    pub fn invert_feature_traced(
        &self,
        image_id: &str,
        feature: &ImageFeature,
    ) -> Result<(PseudoToken, OtiTrace)> {
        let cfg = self.config;
        let templates = cfg
            .templates
            .iter()
            .map(|t| PseudoTemplate::new(self.backbone, t))
            .collect::<Result<Vec<_>>>()?;
        let assignment = self.classifier.classify(image_id, feature, cfg.k_concepts)?;
        for c in &assignment.concepts {
            if self.bank.phrases(c).is_none() {
                return Err(Error::Lookup(format!(
                    "phrase bank lacks concept {c:?} assigned to image {image_id}"
                )));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, image_id));
        let mut token = self.initial_token(&mut rng);
        let initial_cos_loss = self.mean_cos_loss(&templates, feature.values(), &token)?;
        let mut optimizer = AdamW::new(AdamWConfig::new(cfg.learning_rate, cfg.weight_decay), token.len());
        let mut ema = Ema::new(cfg.ema_decay, &token);
        let mut losses = Vec::with_capacity(cfg.iterations);

        for iteration in 0..cfg.iterations {
            let template = templates.choose(&mut rng).expect("templates validated nonempty");
            let (concept, phrase) = sample_phrase(self.bank, &assignment, &mut rng)?;
            let gpt = GptTarget::prepare(concept, phrase, self.backbone)?;
            let (loss, grad) =
                objective_parts(&token, feature.values(), template, &gpt, cfg, self.backbone)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "image {image_id}: non-finite objective at iteration {iteration} \
                     (cos = {}, gpt = {}, concept = {concept:?})",
                    loss.cos, loss.gpt
                )));
            }
            losses.push(loss.total);
            optimizer.step(&mut token, &grad);
            ema.update(&token);
        }

        let values = ema.into_shadow();
        let final_cos_loss = self.mean_cos_loss(&templates, feature.values(), &values)?;
        Ok((
            PseudoToken::new(image_id, values)?,
            OtiTrace {
                initial_cos_loss,
                final_cos_loss,
                losses,
            },
        ))
    }

    /// Inverts every image; failures are collected rather than aborting the batch.
    /// The result does not depend on `workers`.
    pub fn batch_invert(&self, items: &[(String, ImageFeature)], workers: usize) -> Result<BatchInversion>
    where
        B: Sync,
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let results: Vec<(String, Result<PseudoToken>)> = pool.install(|| {
            items
                .par_iter()
                .map(|(id, feature)| (id.clone(), self.invert_feature(id, feature)))
                .collect()
        });
        let mut out = BatchInversion::default();
        for (id, r) in results {
            match r {
                Ok(t) => out.tokens.insert(t),
                Err(e) => {
                    log::warn!("inversion of {id} failed: {e}");
                    out.failures.push((id, e));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Default)]
pub struct BatchInversion {
    pub tokens: PseudoTokenSet,
    pub failures: Vec<(String, Error)>,
}
