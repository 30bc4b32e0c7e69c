//! Dual-encoder abstraction: image encoder, word-embedding layer, text encoder
//! over token embeddings, and a tokenizer.
//!
//! The text path is split in two so that a learned vector can be spliced into
//! the token-embedding sequence before encoding: [`Backbone::embed_text`]
//! produces one row per token, [`Backbone::encode_token_sequence`] maps rows to
//! a feature, and [`Backbone::token_sequence_vjp`] pulls a feature-space
//! gradient back onto the rows.

mod image;
mod mock;

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::image::{Image, PREPROCESS_SIZE};
pub use self::mock::MockBackbone;

/// Reserved pseudo-word marker. Always tokenizes to exactly one token.
pub const PSEUDO_MARKER: &str = "⟨*⟩";

/// File name of the adapter descriptor inside a backbone directory.
pub const BACKBONE_MANIFEST: &str = "backbone.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub feature_dim: usize,
    pub token_dim: usize,
    pub context_length: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            token_dim: 32,
            context_length: 77,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("feature_dim", self.feature_dim),
            ("token_dim", self.token_dim),
            ("context_length", self.context_length),
        ] {
            if value < 8 {
                return Err(Error::Config(format!("{name} must be >= 8, got {value}")));
            }
        }
        Ok(())
    }
}

/// Output of the image encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeature(pub Vec<f64>);

/// Output of the text encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextFeature(pub Vec<f64>);

macro_rules! feature_impl {
    ($ty:ident) => {
        impl $ty {
            pub fn values(&self) -> &[f64] {
                &self.0
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            /// Unit-norm copy of the feature.
            pub fn normalized(&self) -> Result<Self> {
                crate::linalg::normalized(&self.0).map(Self)
            }
        }
    };
}

feature_impl!(ImageFeature);
feature_impl!(TextFeature);

/// Token-embedding rows for one text, with the slots occupied by the
/// pseudo-word marker.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSequence {
    rows: Array2<f64>,
    placeholder_positions: Vec<usize>,
    truncated: bool,
}

impl TokenEmbeddingSequence {
    pub fn new(rows: Array2<f64>, placeholder_positions: Vec<usize>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::input("token sequence must have at least one row"));
        }
        if let Some(&p) = placeholder_positions.iter().find(|&&p| p >= rows.nrows()) {
            return Err(Error::input(format!(
                "placeholder position {p} outside sequence of length {}",
                rows.nrows()
            )));
        }
        Ok(Self {
            rows,
            placeholder_positions,
            truncated: false,
        })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut Array2<f64> {
        &mut self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn placeholder_positions(&self) -> &[usize] {
        &self.placeholder_positions
    }

    /// True when the source text exceeded the context length and was cut.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    /// Copy of the sequence with every placeholder row overwritten by `pseudo`.
    pub fn with_pseudo(&self, pseudo: &[f64]) -> Result<Self> {
        if pseudo.len() != self.rows.ncols() {
            return Err(Error::input(format!(
                "pseudo token has length {}, token rows have {}",
                pseudo.len(),
                self.rows.ncols()
            )));
        }
        let mut out = self.clone();
        for &p in &self.placeholder_positions {
            out.rows
                .row_mut(p)
                .assign(&ArrayView1::from(pseudo));
        }
        Ok(out)
    }
}

/// Lowercase, whitespace-splitting tokenizer. ASCII punctuation becomes its own
/// token and the pseudo-word marker is kept as a single token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for (i, piece) in text.split(PSEUDO_MARKER).enumerate() {
        if i > 0 {
            tokens.push(PSEUDO_MARKER.to_string());
        }
        for word in piece.split_whitespace() {
            let mut current = String::new();
            for ch in word.chars() {
                if ch.is_ascii_punctuation() {
                    if !current.is_empty() {
                        tokens.push(std::mem::take(&mut current));
                    }
                    tokens.push(ch.to_string());
                } else {
                    current.extend(ch.to_lowercase());
                }
            }
            if !current.is_empty() {
                tokens.push(current);
            }
        }
    }
    tokens
}

/// A dual encoder whose text path is differentiable with respect to its
/// token-embedding rows.
pub trait Backbone: Send + Sync {
    fn config(&self) -> &BackboneConfig;

    fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize(text)
    }

    /// Word-embedding row for a single token.
    fn token_embedding(&self, token: &str) -> Vec<f64>;

    /// Typical L2 norm of a word-embedding row.
    fn token_embedding_norm(&self) -> f64;

    fn encode_image(&self, image: &Image) -> Result<ImageFeature>;

    fn encode_token_sequence(&self, seq: &TokenEmbeddingSequence) -> Result<TextFeature>;

    /// Vector-Jacobian product of [`Backbone::encode_token_sequence`]: the
    /// gradient of `<upstream, encode(seq)>` with respect to every row.
    fn token_sequence_vjp(
        &self,
        seq: &TokenEmbeddingSequence,
        upstream: &[f64],
    ) -> Result<Array2<f64>>;

    /// Tokenizes and embeds `text`. Over-length input is truncated to
    /// `context_length` and flagged rather than rejected.
    fn embed_text(&self, text: &str) -> Result<TokenEmbeddingSequence> {
        let mut tokens = self.tokenize(text);
        if tokens.is_empty() {
            return Err(Error::input("text is empty after normalization"));
        }
        let limit = self.config().context_length;
        let truncated = tokens.len() > limit;
        if truncated {
            log::warn!(
                "text with {} tokens truncated to context length {limit}",
                tokens.len()
            );
            tokens.truncate(limit);
        }
        let dim = self.config().token_dim;
        let mut rows = Array2::zeros((tokens.len(), dim));
        let mut placeholders = Vec::new();
        for (i, tok) in tokens.iter().enumerate() {
            if tok == PSEUDO_MARKER {
                placeholders.push(i);
            }
            rows.row_mut(i)
                .assign(&ArrayView1::from(&self.token_embedding(tok)));
        }
        let mut seq = TokenEmbeddingSequence::new(rows, placeholders)?;
        seq.truncated = truncated;
        Ok(seq)
    }

    fn encode_text(&self, text: &str) -> Result<TextFeature> {
        self.encode_token_sequence(&self.embed_text(text)?)
    }

    /// Encodes a template holding exactly one marker with `pseudo` spliced in.
    fn encode_text_with_pseudo(&self, template: &str, pseudo: &[f64]) -> Result<TextFeature> {
        PseudoTemplate::new(self, template)?.encode(self, pseudo)
    }
}

/// A template that has been embedded once and can be re-encoded for many
/// pseudo-token values.
#[derive(Debug, Clone)]
pub struct PseudoTemplate {
    seq: TokenEmbeddingSequence,
}

impl PseudoTemplate {
    pub fn new<B: Backbone + ?Sized>(backbone: &B, template: &str) -> Result<Self> {
        let seq = backbone.embed_text(template)?;
        match seq.placeholder_positions().len() {
            1 => Ok(Self { seq }),
            0 => Err(Error::input(format!(
                "template {template:?} contains no {PSEUDO_MARKER} marker"
            ))),
            n => Err(Error::input(format!(
                "template {template:?} contains {n} markers, expected one"
            ))),
        }
    }

    pub fn sequence(&self) -> &TokenEmbeddingSequence {
        &self.seq
    }

    pub fn encode<B: Backbone + ?Sized>(&self, backbone: &B, pseudo: &[f64]) -> Result<TextFeature> {
        backbone.encode_token_sequence(&self.seq.with_pseudo(pseudo)?)
    }

    /// Encodes and returns the gradient of `<upstream, feature>` w.r.t. the pseudo token.
    pub fn pullback<B: Backbone + ?Sized>(
        &self,
        backbone: &B,
        pseudo: &[f64],
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        let spliced = self.seq.with_pseudo(pseudo)?;
        let row_grads = backbone.token_sequence_vjp(&spliced, upstream)?;
        let mut grad = vec![0.0; pseudo.len()];
        for &p in self.seq.placeholder_positions() {
            for (g, r) in grad.iter_mut().zip(row_grads.row(p)) {
                *g += r;
            }
        }
        Ok(grad)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum BackboneManifest {
    Mock(BackboneConfig),
}

/// Loads a backbone adapter from a directory holding a `backbone.json`
/// descriptor. Only the mock adapter ships with this crate.
pub fn load_backbone(dir: &Path) -> Result<Box<dyn Backbone>> {
    let path = dir.join(BACKBONE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: serde_json::Value = serde_json::from_str(&text)?;
    match manifest.get("kind").and_then(|k| k.as_str()) {
        Some("mock") => {
            let BackboneManifest::Mock(config) = serde_json::from_value(manifest)?;
            Ok(Box::new(MockBackbone::new(config)?))
        }
        Some(other) => Err(Error::Unsupported(format!(
            "backbone kind {other:?} has no adapter in this build"
        ))),
        None => Err(Error::format(format!("{} lacks a \"kind\" field", path.display()))),
    }
}

/// Writes the descriptor for a mock backbone into `dir`.
pub fn save_mock_backbone(dir: &Path, config: &BackboneConfig) -> Result<()> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(BACKBONE_MANIFEST);
    let json = serde_json::to_string_pretty(&BackboneManifest::Mock(*config))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}
