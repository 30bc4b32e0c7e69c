//! Unit-norm embedding index, query composition for the pseudo-word method
//! and its baselines, and exact cosine top-K search.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Image, ImageFeature, TextFeature, PSEUDO_MARKER};
use crate::error::{Error, Result};
use crate::linalg;
use crate::oti::PseudoTokenSet;
use crate::phi::{Mode, PhiNetwork};
use crate::store::{load_features, save_features};

/// Tolerance on row norms accepted when loading an index.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// Image ids with one unit-norm feature row each. Immutable once built.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    matrix: Array2<f64>,
    positions: HashMap<String, usize>,
}

impl EmbeddingIndex {
    /// Normalizes every row of `features`.
    pub fn from_features(ids: Vec<String>, mut features: Array2<f64>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::input("an index needs at least one image"));
        }
        if ids.len() != features.nrows() {
            return Err(Error::input(format!("{} ids for {} feature rows", ids.len(), features.nrows())));
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate image id {id:?}")));
            }
        }
        for (i, mut row) in features.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::Numeric(format!("feature of {:?} has norm {n}", ids[i])));
            }
            row /= n;
        }
        Ok(Self {
            ids,
            matrix: features,
            positions,
        })
    }

    pub fn build<B: Backbone + ?Sized>(images: &[(String, Image)], backbone: &B) -> Result<Self> {
        let features: Vec<ImageFeature> = images
            .par_iter()
            .map(|(_, img)| backbone.encode_image(img))
            .collect::<Result<_>>()?;
        let dim = backbone.config().feature_dim;
        let mut matrix = Array2::zeros((images.len(), dim));
        for (mut row, f) in matrix.axis_iter_mut(Axis(0)).zip(&features) {
            row.assign(&ArrayView1::from(f.values()));
        }
        Self::from_features(images.iter().map(|(id, _)| id.clone()).collect(), matrix)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn row(&self, id: &str) -> Option<ArrayView1<'_, f64>> {
        self.positions.get(id).map(|&i| self.matrix.row(i))
    }

    /// Unit-norm feature of an indexed image.
    pub fn feature(&self, id: &str) -> Result<ImageFeature> {
        self.row(id)
            .map(|r| ImageFeature(r.to_vec()))
            .ok_or_else(|| Error::Lookup(format!("image {id:?} is not in the index")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_features(path, &self.ids, &self.matrix, true)
    }

    /// Loads an index written by [`EmbeddingIndex::save`]. Rows are stored in
    /// single precision and renormalized after the norm check.
    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, rows) = load_features(path)?;
        if !manifest.normalized {
            return Err(Error::format(format!("{} does not hold normalized features", path.display())));
        }
        for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::format(format!(
                    "{}: row {i} has norm {n}, expected 1",
                    path.display()
                )));
            }
        }
        Self::from_features(manifest.ids, rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Searle,
    TextOnly,
    ImageOnly,
    ImagePlusText,
    Captioning,
}

/// One composed query. Pseudo-word and image modes need a reference; text
/// modes need one or two captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub query_id: String,
    pub mode: QueryMode,
    #[serde(default)]
    pub reference_id: Option<String>,
    #[serde(default)]
    pub captions: Vec<String>,
    #[serde(default)]
    pub shared_concept: Option<String>,
}

impl QuerySpec {
    pub fn validate(&self) -> Result<()> {
        let needs_reference = !matches!(self.mode, QueryMode::TextOnly);
        let needs_caption = !matches!(self.mode, QueryMode::ImageOnly);
        if needs_reference && self.reference_id.is_none() {
            return Err(Error::input(format!("query {:?}: mode needs a reference_id", self.query_id)));
        }
        if needs_caption && self.captions.is_empty() {
            return Err(Error::input(format!("query {:?}: mode needs a caption", self.query_id)));
        }
        if self.captions.len() > 2 {
            return Err(Error::input(format!("query {:?}: at most two captions", self.query_id)));
        }
        if self.captions.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::input(format!("query {:?}: empty caption", self.query_id)));
        }
        if self.shared_concept.is_some() && self.captions.len() == 2 {
            return Err(Error::input(format!(
                "query {:?}: a shared concept combines with a single caption only",
                self.query_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub id: String,
    pub score: f64,
}

/// Scores non-increasing; equal scores ordered by ascending id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedResult(pub Vec<ScoredImage>);

impl RankedResult {
    pub fn ids(&self) -> Vec<String> {
        self.0.iter().map(|s| s.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn unit(v: Vec<f64>) -> Result<TextFeature> {
    linalg::normalized(&v).map(TextFeature)
}

pub fn searle_template(caption: &str, shared_concept: Option<&str>) -> String {
    match shared_concept {
        Some(concept) => format!("a photo of {concept} {PSEUDO_MARKER} that {caption}"),
        None => format!("a photo of {PSEUDO_MARKER} that {caption}"),
    }
}

fn require_caption(caption: &str) -> Result<()> {
    if caption.trim().is_empty() {
        return Err(Error::input("relative caption must be non-empty"));
    }
    Ok(())
}

/// Encodes `a photo of [concept] <pseudo> that {caption}` and normalizes it.
pub fn compose_searle_query<B: Backbone + ?Sized>(
    pseudo: &[f64],
    caption: &str,
    backbone: &B,
    shared_concept: Option<&str>,
) -> Result<TextFeature> {
    require_caption(caption)?;
    let concept = shared_concept.map(str::trim).filter(|c| !c.is_empty());
    let feature = backbone.encode_text_with_pseudo(&searle_template(caption, concept), pseudo)?;
    unit(feature.into_inner())
}

/// Mean of the features for "a and b" and "b and a", normalized. The sum is
/// commutative, so swapping the captions gives a bitwise-identical result.
pub fn compose_dual_caption_query<B: Backbone + ?Sized>(
    pseudo: &[f64],
    caption_a: &str,
    caption_b: &str,
    backbone: &B,
) -> Result<TextFeature> {
    require_caption(caption_a)?;
    require_caption(caption_b)?;
    let ab = backbone.encode_text_with_pseudo(&searle_template(&format!("{caption_a} and {caption_b}"), None), pseudo)?;
    let ba = backbone.encode_text_with_pseudo(&searle_template(&format!("{caption_b} and {caption_a}"), None), pseudo)?;
    unit(ab.values().iter().zip(ba.values()).map(|(x, y)| (x + y) / 2.0).collect())
}

/// Describes an image in words for the captioning baseline.
pub trait Captioner: Send + Sync {
    fn caption(&self, image_id: &str) -> Result<String>;
}

fn encode_captions<B: Backbone + ?Sized>(backbone: &B, captions: &[String]) -> Result<TextFeature> {
    match captions {
        [single] => unit(backbone.encode_text(single)?.into_inner()),
        [a, b] => {
            let ab = backbone.encode_text(&format!("{a} and {b}"))?;
            let ba = backbone.encode_text(&format!("{b} and {a}"))?;
            unit(ab.values().iter().zip(ba.values()).map(|(x, y)| (x + y) / 2.0).collect())
        }
        _ => Err(Error::input("expected one or two captions")),
    }
}

/// Query feature for the non-pseudo-word baselines.
pub fn compose_baseline_query<B: Backbone + ?Sized>(
    spec: &QuerySpec,
    backbone: &B,
    index: &EmbeddingIndex,
    captioner: Option<&dyn Captioner>,
) -> Result<TextFeature> {
    spec.validate()?;
    let reference = || {
        let id = spec.reference_id.as_deref().expect("validated");
        index.feature(id)
    };
    match spec.mode {
        QueryMode::Searle => Err(Error::input("pseudo-word queries need an inversion source")),
        QueryMode::TextOnly => encode_captions(backbone, &spec.captions),
        QueryMode::ImageOnly => Ok(TextFeature(reference()?.into_inner())),
        QueryMode::ImagePlusText => {
            let img = reference()?;
            let text = encode_captions(backbone, &spec.captions)?;
            unit(img.values().iter().zip(text.values()).map(|(x, y)| x + y).collect())
        }
        QueryMode::Captioning => {
            let captioner = captioner.ok_or_else(|| {
                Error::Unsupported("captioning mode needs a captioner adapter".into())
            })?;
            let description = captioner.caption(spec.reference_id.as_deref().expect("validated"))?;
            let compose = |caption: &str| backbone.encode_text(&format!("a photo of {description} that {caption}"));
            match spec.captions.as_slice() {
                [single] => unit(compose(single)?.into_inner()),
                [a, b] => {
                    let ab = compose(&format!("{a} and {b}"))?;
                    let ba = compose(&format!("{b} and {a}"))?;
                    unit(ab.values().iter().zip(ba.values()).map(|(x, y)| (x + y) / 2.0).collect())
                }
                _ => unreachable!("validated"),
            }
        }
    }
}

/// Where pseudo-word tokens for reference images come from.
pub enum InversionSource<'a> {
    /// Single forward pass of the inversion network on the indexed feature.
    Network(&'a PhiNetwork),
    /// Precomputed optimization-based tokens.
    Tokens(&'a PseudoTokenSet),
}

impl InversionSource<'_> {
    pub fn token(&self, reference_id: &str, index: &EmbeddingIndex) -> Result<Vec<f64>> {
        match self {
            InversionSource::Network(phi) => {
                let feature = index.feature(reference_id)?;
                Ok(phi.forward(reference_id, &feature, Mode::Eval)?.values)
            }
            InversionSource::Tokens(set) => set
                .get(reference_id)
                .map(|t| t.values.clone())
                .ok_or_else(|| Error::Lookup(format!("no pseudo token for image {reference_id:?}"))),
        }
    }
}

/// Composes any query. Pseudo-word queries draw their token from `source`.
pub fn compose_query<B: Backbone + ?Sized>(
    spec: &QuerySpec,
    backbone: &B,
    index: &EmbeddingIndex,
    source: Option<&InversionSource<'_>>,
    captioner: Option<&dyn Captioner>,
) -> Result<TextFeature> {
    if spec.mode != QueryMode::Searle {
        return compose_baseline_query(spec, backbone, index, captioner);
    }
    spec.validate()?;
    let source = source.ok_or_else(|| Error::Config("pseudo-word queries need a network or token set".into()))?;
    let token = source.token(spec.reference_id.as_deref().expect("validated"), index)?;
    match spec.captions.as_slice() {
        [single] => compose_searle_query(&token, single, backbone, spec.shared_concept.as_deref()),
        [a, b] => compose_dual_caption_query(&token, a, b, backbone),
        _ => unreachable!("validated"),
    }
}

fn rank_order(a: &ScoredImage, b: &ScoredImage) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

/// Top-K rows by cosine similarity to `query`, skipping `exclude`.
pub fn search(
    query: &[f64],
    index: &EmbeddingIndex,
    k: usize,
    exclude: Option<&HashSet<String>>,
) -> Result<RankedResult> {
    if query.len() != index.dim() {
        return Err(Error::input(format!(
            "query has dimension {}, index has {}",
            query.len(),
            index.dim()
        )));
    }
    let excluded = exclude.map_or(0, |ex| ex.iter().filter(|id| index.contains(id)).count());
    let available = index.len() - excluded;
    if k == 0 || k > available {
        return Err(Error::input(format!("K = {k} outside 1..={available}")));
    }
    let q = Array1::from(linalg::normalized(query)?);
    let scores = index.matrix.dot(&q);
    let mut scored: Vec<ScoredImage> = index
        .ids
        .iter()
        .zip(scores.iter())
        .filter(|(id, _)| exclude.is_none_or(|ex| !ex.contains(*id)))
        .map(|(id, &score)| ScoredImage { id: id.clone(), score })
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(RankedResult(scored))
}

/// Drops entries whose score is strictly greater than `threshold`.
pub fn near_duplicate_filter(candidates: RankedResult, threshold: f64) -> RankedResult {
    RankedResult(candidates.0.into_iter().filter(|c| c.score <= threshold).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_index() -> EmbeddingIndex {
        let rows = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 4 + j) as f64 * 0.61).cos());
        EmbeddingIndex::from_features((0..6).map(|i| format!("img{i}")).collect(), rows).unwrap()
    }

    #[test]
    fn rows_are_unit_norm() {
        let index = small_index();
        for row in index.matrix().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let rows = Array2::ones((2, 3));
        assert!(EmbeddingIndex::from_features(vec!["a".into(), "a".into()], rows).is_err());
    }

    #[test]
    fn query_equal_to_a_row_ranks_it_first() {
        let index = small_index();
        let q = index.row("img3").unwrap().to_vec();
        let r = search(&q, &index, 6, None).unwrap();
        assert_eq!(r.0[0].id, "img3");
        assert!((r.0[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let rows = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let index = EmbeddingIndex::from_features(vec!["b".into(), "a".into(), "c".into()], rows).unwrap();
        let r = search(&[1.0, 0.0], &index, 3, None).unwrap();
        assert_eq!(r.ids(), vec!["a", "b", "c"]);
    }

    #[test]
    fn exclusion_and_k_range() {
        let index = small_index();
        let ex: HashSet<String> = ["img0".to_string(), "nope".to_string()].into();
        let q = index.row("img0").unwrap().to_vec();
        let r = search(&q, &index, 5, Some(&ex)).unwrap();
        assert!(!r.ids().contains(&"img0".to_string()));
        assert!(search(&q, &index, 6, Some(&ex)).is_err());
        assert!(search(&q, &index, 0, None).is_err());
    }

    #[test]
    fn near_duplicate_threshold_is_strict() {
        let r = RankedResult(
            [0.95, 0.92, 0.80]
                .iter()
                .enumerate()
                .map(|(i, &s)| ScoredImage { id: i.to_string(), score: s })
                .collect(),
        );
        let kept: Vec<f64> = near_duplicate_filter(r, 0.92).0.iter().map(|s| s.score).collect();
        assert_eq!(kept, vec![0.92, 0.80]);
    }

    #[test]
    fn spec_validation() {
        let spec = QuerySpec {
            query_id: "q".into(),
            mode: QueryMode::Searle,
            reference_id: None,
            captions: vec!["x".into()],
            shared_concept: None,
        };
        assert!(spec.validate().is_err());
        let spec = QuerySpec {
            mode: QueryMode::TextOnly,
            captions: vec![],
            ..spec
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn searle_templates() {
        assert_eq!(searle_template("shows the dog running", None), "a photo of ⟨*⟩ that shows the dog running");
        assert_eq!(
            searle_template("is outdoors", Some("a close-up dog wearing a hat indoors")),
            "a photo of a close-up dog wearing a hat indoors ⟨*⟩ that is outdoors"
        );
    }
}
