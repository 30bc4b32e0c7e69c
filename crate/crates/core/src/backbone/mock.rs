//! Deterministic, differentiable stand-in for a pretrained dual encoder.
//!
//! * Image encoder: a seeded random projection of a pixel-statistics vector
//!   (grid color means, channel spread, and a few values expanded from a
//!   content hash so that distinct images never collide).
//! * Word embeddings: one seeded Gaussian row per token, keyed by a stable hash.
//! * Text encoder: position-weighted mean of the token rows, a seeded affine
//!   map, then `tanh`. Position weights differ per slot, so token order matters.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Backbone, BackboneConfig, Image, ImageFeature, TextFeature, TokenEmbeddingSequence};
use super::PREPROCESS_SIZE;
use crate::error::{Error, Result};
use crate::util::{sha256, stable_hash};

const GRID: u32 = 4;
const HASH_STATS: usize = 16;
const STATS_DIM: usize = (GRID * GRID * 3) as usize + 3 + HASH_STATS;
const EMBEDDING_STD: f64 = 0.5;
const TEXT_GAIN: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct MockBackbone {
    config: BackboneConfig,
    position_weights: Vec<f64>,
    text_weight: Array2<f64>,
    text_bias: Array1<f64>,
    image_weight: Array2<f64>,
    token_norm: f64,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * std)
}

impl MockBackbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(config.seed, &[b"mock-backbone"]));
        let position_weights = (0..config.context_length)
            .map(|_| rng.random_range(0.5..1.5))
            .collect();
        let text_weight = gaussian_matrix(
            &mut rng,
            config.feature_dim,
            config.token_dim,
            TEXT_GAIN / (config.token_dim as f64).sqrt(),
        );
        let text_bias = Array1::from_shape_fn(config.feature_dim, |_| {
            rng.sample::<f64, _>(StandardNormal) * 0.1
        });
        let image_weight = gaussian_matrix(
            &mut rng,
            config.feature_dim,
            STATS_DIM,
            1.0 / (STATS_DIM as f64).sqrt(),
        );
        let mut backbone = Self {
            config,
            position_weights,
            text_weight,
            text_bias,
            image_weight,
            token_norm: 0.0,
        };
        let sample = 256;
        backbone.token_norm = (0..sample)
            .map(|i| crate::linalg::norm(&backbone.token_embedding(&format!("<norm-probe-{i}>"))))
            .sum::<f64>()
            / sample as f64;
        Ok(backbone)
    }

    fn pixel_statistics(&self, image: &Image) -> Vec<f64> {
        let img = image.preprocess(PREPROCESS_SIZE);
        let cell = PREPROCESS_SIZE / GRID;
        let mut stats = Vec::with_capacity(STATS_DIM);
        let mut channel_sum = [0.0f64; 3];
        let mut channel_sq = [0.0f64; 3];
        for gy in 0..GRID {
            for gx in 0..GRID {
                let mut acc = [0.0f64; 3];
                for y in gy * cell..(gy + 1) * cell {
                    for x in gx * cell..(gx + 1) * cell {
                        let p = img.get_pixel(x, y).0;
                        for c in 0..3 {
                            let v = p[c] as f64 / 255.0;
                            acc[c] += v;
                            channel_sum[c] += v;
                            channel_sq[c] += v * v;
                        }
                    }
                }
                let n = (cell * cell) as f64;
                stats.extend(acc.iter().map(|a| a / n - 0.5));
            }
        }
        let total = (PREPROCESS_SIZE * PREPROCESS_SIZE) as f64;
        for c in 0..3 {
            let mean = channel_sum[c] / total;
            let var = (channel_sq[c] / total - mean * mean).max(0.0);
            stats.push(var.sqrt() - 0.25);
        }
        let digest = sha256(image.as_rgb());
        stats.extend(
            digest[..HASH_STATS]
                .iter()
                .map(|&b| (b as f64 / 127.5 - 1.0) * 0.25),
        );
        stats
    }

    fn pooled(&self, seq: &TokenEmbeddingSequence) -> (Array1<f64>, f64) {
        let n = seq.len();
        let weights = &self.position_weights[..n];
        let total: f64 = weights.iter().sum();
        let mut pooled = Array1::zeros(self.config.token_dim);
        for (p, w) in weights.iter().enumerate() {
            pooled.scaled_add(*w / total, &seq.row(p));
        }
        (pooled, total)
    }

    fn check_sequence(&self, seq: &TokenEmbeddingSequence) -> Result<()> {
        if seq.rows().ncols() != self.config.token_dim {
            return Err(Error::input(format!(
                "token rows have width {}, expected {}",
                seq.rows().ncols(),
                self.config.token_dim
            )));
        }
        if seq.len() > self.config.context_length {
            return Err(Error::input(format!(
                "sequence of {} rows exceeds context length {}",
                seq.len(),
                self.config.context_length
            )));
        }
        if seq.rows().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite token embedding".into()));
        }
        Ok(())
    }
}

impl Backbone for MockBackbone {
    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn token_embedding(&self, token: &str) -> Vec<f64> {
        let seed = stable_hash(self.config.seed, &[b"tok", token.as_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.config.token_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * EMBEDDING_STD)
            .collect()
    }

    fn token_embedding_norm(&self) -> f64 {
        self.token_norm
    }

    fn encode_image(&self, image: &Image) -> Result<ImageFeature> {
        let stats = Array1::from(self.pixel_statistics(image));
        Ok(ImageFeature(self.image_weight.dot(&stats).to_vec()))
    }

    fn encode_token_sequence(&self, seq: &TokenEmbeddingSequence) -> Result<TextFeature> {
        self.check_sequence(seq)?;
        let (pooled, _) = self.pooled(seq);
        let z = self.text_weight.dot(&pooled) + &self.text_bias;
        Ok(TextFeature(z.mapv(f64::tanh).to_vec()))
    }

    fn token_sequence_vjp(
        &self,
        seq: &TokenEmbeddingSequence,
        upstream: &[f64],
    ) -> Result<Array2<f64>> {
        self.check_sequence(seq)?;
        if upstream.len() != self.config.feature_dim {
            return Err(Error::input(format!(
                "upstream gradient has length {}, expected {}",
                upstream.len(),
                self.config.feature_dim
            )));
        }
        let (pooled, total) = self.pooled(seq);
        let z = self.text_weight.dot(&pooled) + &self.text_bias;
        let gz: Array1<f64> = z
            .iter()
            .zip(upstream)
            .map(|(zi, u)| u * (1.0 - zi.tanh().powi(2)))
            .collect();
        let g_pooled = self.text_weight.t().dot(&gz);
        let mut grads = Array2::zeros(seq.rows().raw_dim());
        for (p, mut row) in grads.rows_mut().into_iter().enumerate() {
            row.scaled_add(self.position_weights[p] / total, &g_pooled);
        }
        Ok(grads)
    }
}
