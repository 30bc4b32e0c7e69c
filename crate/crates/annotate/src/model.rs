//! Wire types shared by the HTTP layer and the workflow.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use zscir_core::datasets::{CircoQuery, SemanticAspect, Split};
use zscir_core::retrieval::ScoredImage;

/// Fixed lead-in shown above the caption field; never stored with the caption.
pub const CAPTION_PREFIX: &str = "Unlike the provided image, I want a photo of {shared concept} that";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supercategory {
    Person,
    Animal,
    Sports,
    Vehicle,
    Food,
    Accessory,
    Electronic,
    Kitchen,
    Furniture,
    Indoor,
    Outdoor,
    Appliance,
}

impl Supercategory {
    pub const ALL: [Supercategory; 12] = [
        Self::Person,
        Self::Animal,
        Self::Sports,
        Self::Vehicle,
        Self::Food,
        Self::Accessory,
        Self::Electronic,
        Self::Kitchen,
        Self::Furniture,
        Self::Indoor,
        Self::Outdoor,
        Self::Appliance,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Person => "person",
            Self::Animal => "animal",
            Self::Sports => "sports",
            Self::Vehicle => "vehicle",
            Self::Food => "food",
            Self::Accessory => "accessory",
            Self::Electronic => "electronic",
            Self::Kitchen => "kitchen",
            Self::Furniture => "furniture",
            Self::Indoor => "indoor",
            Self::Outdoor => "outdoor",
            Self::Appliance => "appliance",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == label)
    }
}

impl fmt::Display for Supercategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PairSelection,
    Captioning,
    GtSelection,
}

/// Per-supercategory counts of completed and in-flight references.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuotaState {
    pub completed: BTreeMap<Supercategory, usize>,
    pub pending: BTreeMap<Supercategory, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub phase: Phase,
    pub current_reference_id: Option<String>,
    pub current_triplet_id: Option<String>,
    pub quota: QuotaState,
    pub caption_prefix: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceView {
    pub reference_id: String,
    pub supercategory: Supercategory,
    pub image_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGallery {
    pub reference_id: String,
    pub candidates: Vec<ScoredImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRequest {
    pub session_id: String,
    pub target_id: String,
    pub shared_concept: String,
    /// Continuation after the fixed prefix.
    pub relative_caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletCreated {
    pub triplet_id: String,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GallerySource {
    /// Retrieved with the composed query.
    Retrieval,
    /// Visually similar to the target.
    SimilarToTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtCandidate {
    pub id: String,
    pub score: f64,
    pub source: GallerySource,
    /// True only for the annotated target, which must stay selected.
    pub prechecked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtGallery {
    pub triplet_id: String,
    pub query_text: String,
    pub candidates: Vec<GtCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRequest {
    pub session_id: String,
    pub triplet_id: String,
    pub gt_ids: Vec<String>,
    #[serde(default)]
    pub semantic_aspects: Vec<String>,
}

/// A completed query before it is assigned to a split.
/// `gt_img_ids[0]` is the annotated target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredQuery {
    pub id: String,
    pub reference_img_id: String,
    pub relative_caption: String,
    pub shared_concept: String,
    pub gt_img_ids: Vec<String>,
    pub semantic_aspects: Vec<SemanticAspect>,
    pub supercategory: Supercategory,
}

impl StoredQuery {
    pub fn to_circo(&self, split: Split) -> CircoQuery {
        CircoQuery {
            id: self.id.clone(),
            reference_img_id: self.reference_img_id.clone(),
            relative_caption: self.relative_caption.clone(),
            shared_concept: self.shared_concept.clone(),
            gt_img_ids: self.gt_img_ids.clone(),
            semantic_aspects: self.semantic_aspects.clone(),
            split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    /// `ready` once the index and the inversion network are loaded,
    /// `degraded` when the network is missing.
    pub status: String,
    pub index_size: usize,
    pub phi_loaded: bool,
    pub completed_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offending_ids: Vec<String>,
}
