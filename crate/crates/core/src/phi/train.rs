use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::phi_objective_with_grad;
use super::{Mode, PhiArchitecture, PhiNetwork};
use crate::backbone::{Backbone, ImageFeature};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::oti::{GptTarget, PseudoTokenSet};
use crate::phrasebank::{sample_phrase, ConceptAssignment, ConceptClassifier, PhraseBank};
use crate::util::{config_digest, stable_hash};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub lambda_distil: f64,
    pub lambda_phi_gpt: f64,
    pub weight_decay: f64,
    pub k_concepts: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for DistillTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-4,
            batch_size: 256,
            temperature: 0.25,
            lambda_distil: 1.0,
            lambda_phi_gpt: 0.75,
            weight_decay: 0.01,
            k_concepts: 150,
            dropout: 0.5,
            seed: 0,
        }
    }
}

impl DistillTrainConfig {
    /// Schedule for the larger backbone.
    pub fn xl() -> Self {
        Self {
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lambda_distil < 0.0 || self.lambda_phi_gpt < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("loss weights and weight decay must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.k_concepts == 0 {
            return Err(Error::Config("k_concepts must be positive".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }
}

/// One image of the distillation set: its feature and its inversion target.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image_id: String,
    pub feature: Vec<f64>,
    pub target: Vec<f64>,
    pub assignment: ConceptAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub loss_distil: f64,
    pub loss_gpt: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedPhi {
    pub phi: PhiNetwork,
    pub log: Vec<EpochLog>,
}

#[derive(Debug)]
pub enum PhiTrainError {
    /// Inputs or configuration rejected before training started.
    Setup(Error),
    /// A batch produced a non-finite loss; `last_good` holds the weights
    /// before that batch.
    Diverged {
        epoch: usize,
        batch: usize,
        last_good: Box<PhiNetwork>,
        log: Vec<EpochLog>,
    },
}

impl fmt::Display for PhiTrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhiTrainError::Setup(e) => write!(f, "{e}"),
            PhiTrainError::Diverged { epoch, batch, .. } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
        }
    }
}

impl std::error::Error for PhiTrainError {}

impl From<Error> for PhiTrainError {
    fn from(e: Error) -> Self {
        PhiTrainError::Setup(e)
    }
}

/// Pairs every image with its inversion token and its top-`k_concepts`
/// concepts. Image features are unit-normalized before they reach the network.
pub fn prepare_examples(
    images: &[(String, ImageFeature)],
    tokens: &PseudoTokenSet,
    classifier: &ConceptClassifier,
    k_concepts: usize,
) -> Result<Vec<TrainingExample>> {
    images
        .iter()
        .map(|(id, feature)| {
            let target = tokens
                .get(id)
                .ok_or_else(|| Error::input(format!("no inversion token for image {id:?}")))?;
            Ok(TrainingExample {
                image_id: id.clone(),
                feature: feature.normalized()?.into_inner(),
                target: target.values.clone(),
                assignment: classifier.classify(id, feature, k_concepts)?,
            })
        })
        .collect()
}

/// Trains the inversion network with AdamW on shuffled mini-batches.
/// Trailing batches smaller than two are skipped.
pub fn train_phi<B: Backbone + ?Sized>(
    images: &[(String, ImageFeature)],
    tokens: &PseudoTokenSet,
    classifier: &ConceptClassifier,
    bank: &PhraseBank,
    config: &DistillTrainConfig,
    backbone: &B,
) -> std::result::Result<TrainedPhi, PhiTrainError> {
    config.validate()?;
    if config.k_concepts > classifier.vocabulary().len() {
        return Err(Error::Config(format!(
            "k_concepts {} exceeds vocabulary size {}",
            config.k_concepts,
            classifier.vocabulary().len()
        ))
        .into());
    }
    let examples = prepare_examples(images, tokens, classifier, config.k_concepts)?;
    train_on_examples(&examples, bank, config, backbone)
}

pub fn train_on_examples<B: Backbone + ?Sized>(
    examples: &[TrainingExample],
    bank: &PhraseBank,
    config: &DistillTrainConfig,
    backbone: &B,
) -> std::result::Result<TrainedPhi, PhiTrainError> {
    config.validate()?;
    let bb = backbone.config();
    let arch = PhiArchitecture::new(bb.feature_dim, bb.token_dim, config.dropout)?;
    let mut phi = PhiNetwork::init(arch, config.seed)?;
    for ex in examples {
        if ex.feature.len() != arch.input_dim || ex.target.len() != arch.output_dim {
            return Err(Error::input(format!("example {} has wrong dimensions", ex.image_id)).into());
        }
    }

    let mut optimizer = AdamW::new(
        AdamWConfig::new(config.learning_rate, config.weight_decay),
        arch.param_count(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(config.seed, &[b"phi-train"]));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut gpt_cache: HashMap<(String, String), GptTarget> = HashMap::new();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_d, mut sum_g, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mut features = Array2::zeros((chunk.len(), arch.input_dim));
            let mut targets = Array2::zeros((chunk.len(), arch.output_dim));
            let mut gpt = Vec::with_capacity(chunk.len());
            for (row, &i) in chunk.iter().enumerate() {
                let ex = &examples[i];
                features.row_mut(row).assign(&ndarray::ArrayView1::from(&ex.feature));
                targets.row_mut(row).assign(&ndarray::ArrayView1::from(&ex.target));
                let (concept, phrase) = sample_phrase(bank, &ex.assignment, &mut rng)?;
                let key = (concept.to_string(), phrase.to_string());
                let target = match gpt_cache.get(&key) {
                    Some(t) => t.clone(),
                    None => {
                        let t = GptTarget::prepare(concept, phrase, backbone)?;
                        gpt_cache.insert(key, t.clone());
                        t
                    }
                };
                gpt.push(target);
            }
            let (loss, grads) = phi_objective_with_grad(
                &phi,
                &features,
                &targets,
                &gpt,
                config.temperature,
                config.lambda_distil,
                config.lambda_phi_gpt,
                backbone,
                Mode::Train(&mut rng),
            )?;
            if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(PhiTrainError::Diverged {
                    epoch,
                    batch: batch_idx,
                    last_good: Box::new(phi),
                    log,
                });
            }
            optimizer.step(phi.params_mut(), &grads);
            sum += loss.total;
            sum_d += loss.distil;
            sum_g += loss.gpt;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let entry = EpochLog {
            epoch,
            loss: sum / n,
            loss_distil: sum_d / n,
            loss_gpt: sum_g / n,
        };
        log::debug!("epoch {epoch}: loss {:.5}", entry.loss);
        log.push(entry);
    }
    Ok(TrainedPhi { phi, log })
}

/// Writes the per-epoch log as JSON lines.
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut buf = Vec::new();
    for entry in log {
        serde_json::to_writer(&mut buf, entry)?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    crate::store::write_atomic(path, &buf)
}
