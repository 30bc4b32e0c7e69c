//! Canonical annotation schemas for CIRCO, CIRR and FashionIQ-style data,
//! adapters for the public release layouts, and dataset-level statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::store::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SemanticAspect {
    Cardinality,
    Addition,
    Negation,
    #[serde(rename = "Direct Addressing")]
    DirectAddressing,
    #[serde(rename = "Compare & Change")]
    CompareChange,
    #[serde(rename = "Comparative Statement")]
    ComparativeStatement,
    #[serde(rename = "Statement with Conjunction")]
    StatementWithConjunction,
    #[serde(rename = "Spatial Relations & Background")]
    SpatialRelationsBackground,
    Viewpoint,
}

impl SemanticAspect {
    /// Fixed display order.
    pub const ALL: [SemanticAspect; 9] = [
        Self::Cardinality,
        Self::Addition,
        Self::Negation,
        Self::DirectAddressing,
        Self::CompareChange,
        Self::ComparativeStatement,
        Self::StatementWithConjunction,
        Self::SpatialRelationsBackground,
        Self::Viewpoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cardinality => "Cardinality",
            Self::Addition => "Addition",
            Self::Negation => "Negation",
            Self::DirectAddressing => "Direct Addressing",
            Self::CompareChange => "Compare & Change",
            Self::ComparativeStatement => "Comparative Statement",
            Self::StatementWithConjunction => "Statement with Conjunction",
            Self::SpatialRelationsBackground => "Spatial Relations & Background",
            Self::Viewpoint => "Viewpoint",
        }
    }
}

impl fmt::Display for SemanticAspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SemanticAspect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::input(format!("unknown semantic aspect {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FashionCategory {
    Shirt,
    Dress,
    Toptee,
}

impl FashionCategory {
    pub const ALL: [FashionCategory; 3] = [Self::Shirt, Self::Dress, Self::Toptee];

    pub fn name(self) -> &'static str {
        match self {
            Self::Shirt => "shirt",
            Self::Dress => "dress",
            Self::Toptee => "toptee",
        }
    }
}

impl FromStr for FashionCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::input(format!("unknown FashionIQ category {s:?}")))
    }
}

/// Accepts ids written either as JSON strings or as non-negative integers.
fn id_string<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    match Value::deserialize(d)? {
        Value::String(s) => Ok(s),
        Value::Number(n) if n.is_u64() => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!("expected an id, found {other}"))),
    }
}

fn id_list<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    let values = Vec::<Value>::deserialize(d)?;
    values
        .into_iter()
        .map(|v| match v {
            Value::String(s) => Ok(s),
            Value::Number(n) if n.is_u64() => Ok(n.to_string()),
            other => Err(serde::de::Error::custom(format!("expected an id, found {other}"))),
        })
        .collect()
}

/// One multi-ground-truth query. `gt_img_ids[0]` is the annotated target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircoQuery {
    #[serde(deserialize_with = "id_string")]
    pub id: String,
    #[serde(deserialize_with = "id_string")]
    pub reference_img_id: String,
    pub relative_caption: String,
    pub shared_concept: String,
    #[serde(deserialize_with = "id_list")]
    pub gt_img_ids: Vec<String>,
    pub semantic_aspects: Vec<SemanticAspect>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CirrTriplet {
    #[serde(deserialize_with = "id_string")]
    pub id: String,
    pub reference_img_id: String,
    pub target_img_id: String,
    pub relative_caption: String,
    pub subset_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FashionIqTriplet {
    pub id: String,
    pub reference_img_id: String,
    pub target_img_id: String,
    pub captions: Vec<String>,
    pub category: FashionCategory,
}

fn invalid(index: usize, field: &str, message: impl fmt::Display) -> Error {
    Error::format(format!("record {index}: field `{field}`: {message}"))
}

fn require_text(index: usize, field: &str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        return Err(invalid(index, field, "must be non-empty"));
    }
    Ok(())
}

fn require_unique<'a>(index: usize, field: &str, ids: impl IntoIterator<Item = &'a String>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(invalid(index, field, format!("duplicate id {id:?}")));
        }
    }
    Ok(())
}

impl CircoQuery {
    pub fn validate(&self, index: usize) -> Result<()> {
        require_text(index, "id", &self.id)?;
        require_text(index, "reference_img_id", &self.reference_img_id)?;
        require_text(index, "relative_caption", &self.relative_caption)?;
        require_text(index, "shared_concept", &self.shared_concept)?;
        if self.gt_img_ids.is_empty() {
            return Err(invalid(index, "gt_img_ids", "must be non-empty"));
        }
        require_unique(index, "gt_img_ids", &self.gt_img_ids)?;
        if self.gt_img_ids.contains(&self.reference_img_id) {
            return Err(invalid(index, "gt_img_ids", "contains the reference image"));
        }
        let mut seen = HashSet::new();
        for a in &self.semantic_aspects {
            if !seen.insert(a) {
                return Err(invalid(index, "semantic_aspects", format!("duplicate aspect {a}")));
            }
        }
        Ok(())
    }
}

impl CirrTriplet {
    pub fn validate(&self, index: usize) -> Result<()> {
        require_text(index, "id", &self.id)?;
        require_text(index, "relative_caption", &self.relative_caption)?;
        if self.target_img_id == self.reference_img_id {
            return Err(invalid(index, "target_img_id", "equals the reference"));
        }
        if self.subset_ids.len() != 6 {
            return Err(invalid(
                index,
                "subset_ids",
                format!("must hold 6 ids, found {}", self.subset_ids.len()),
            ));
        }
        require_unique(index, "subset_ids", &self.subset_ids)?;
        for (field, id) in [("reference_img_id", &self.reference_img_id), ("target_img_id", &self.target_img_id)] {
            if !self.subset_ids.contains(id) {
                return Err(invalid(index, field, "not a member of subset_ids"));
            }
        }
        Ok(())
    }
}

impl FashionIqTriplet {
    pub fn validate(&self, index: usize) -> Result<()> {
        require_text(index, "id", &self.id)?;
        require_text(index, "reference_img_id", &self.reference_img_id)?;
        require_text(index, "target_img_id", &self.target_img_id)?;
        if self.captions.len() != 2 {
            return Err(invalid(
                index,
                "captions",
                format!("must hold 2 captions, found {}", self.captions.len()),
            ));
        }
        for c in &self.captions {
            require_text(index, "captions", c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Circo,
    Cirr,
    #[serde(rename = "fashioniq")]
    FashionIq,
}

impl DatasetFormat {
    pub fn name(self) -> &'static str {
        match self {
            Self::Circo => "circo",
            Self::Cirr => "cirr",
            Self::FashionIq => "fashioniq",
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circo" => Ok(Self::Circo),
            "cirr" => Ok(Self::Cirr),
            "fashioniq" => Ok(Self::FashionIq),
            _ => Err(Error::Config(format!(
                "unknown dataset format {s:?} (expected circo, cirr or fashioniq)"
            ))),
        }
    }
}

/// A validated dataset. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Circo(Vec<CircoQuery>),
    Cirr(Vec<CirrTriplet>),
    FashionIq(Vec<FashionIqTriplet>),
}

impl Dataset {
    pub fn format(&self) -> DatasetFormat {
        match self {
            Dataset::Circo(_) => DatasetFormat::Circo,
            Dataset::Cirr(_) => DatasetFormat::Cirr,
            Dataset::FashionIq(_) => DatasetFormat::FashionIq,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Circo(q) => q.len(),
            Dataset::Cirr(q) => q.len(),
            Dataset::FashionIq(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Validates every record and the uniqueness of record ids.
    pub fn validate(&self) -> Result<()> {
        let ids: Vec<&String> = match self {
            Dataset::Circo(q) => {
                q.iter().enumerate().try_for_each(|(i, r)| r.validate(i))?;
                q.iter().map(|r| &r.id).collect()
            }
            Dataset::Cirr(q) => {
                q.iter().enumerate().try_for_each(|(i, r)| r.validate(i))?;
                q.iter().map(|r| &r.id).collect()
            }
            Dataset::FashionIq(q) => {
                q.iter().enumerate().try_for_each(|(i, r)| r.validate(i))?;
                q.iter().map(|r| &r.id).collect()
            }
        };
        let mut seen = HashSet::new();
        for (i, id) in ids.into_iter().enumerate() {
            if !seen.insert(id) {
                return Err(invalid(i, "id", format!("duplicate record id {id:?}")));
            }
        }
        Ok(())
    }

    /// Canonical, byte-stable JSON: pretty-printed with a trailing newline.
    pub fn to_canonical_json(&self) -> Result<Vec<u8>> {
        let mut out = match self {
            Dataset::Circo(q) => serde_json::to_vec_pretty(q)?,
            Dataset::Cirr(q) => serde_json::to_vec_pretty(q)?,
            Dataset::FashionIq(q) => serde_json::to_vec_pretty(q)?,
        };
        out.push(b'\n');
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, &self.to_canonical_json()?)
    }
}

fn parse_records<T: serde::de::DeserializeOwned>(records: Vec<Value>) -> Result<Vec<T>> {
    records
        .into_iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value(v).map_err(|e| Error::format(format!("record {i}: {e}"))))
        .collect()
}

/// Public CIRR release record (`cap.rc2.{split}.json`).
#[derive(Deserialize)]
struct CirrPublic {
    pairid: u64,
    reference: String,
    target_hard: String,
    caption: String,
    img_set: CirrImgSet,
}

#[derive(Deserialize)]
struct CirrImgSet {
    members: Vec<String>,
}

/// Public FashionIQ release record (`cap.{category}.{split}.json`).
#[derive(Deserialize)]
struct FashionIqPublic {
    candidate: String,
    target: String,
    captions: Vec<String>,
}

fn category_from_path(path: &Path) -> Result<FashionCategory> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.split('.')
        .find_map(|part| part.parse::<FashionCategory>().ok())
        .ok_or_else(|| {
            Error::format(format!(
                "{}: public FashionIQ files must be named cap.{{shirt|dress|toptee}}.{{split}}.json",
                path.display()
            ))
        })
}

/// Parses a JSON array in canonical form or, for CIRR and FashionIQ, in the
/// public release layout, then validates every record.
pub fn parse_dataset(bytes: &[u8], format: DatasetFormat, source: &Path) -> Result<Dataset> {
    let value: Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::format(format!("{}: {e}", source.display())))?;
    let Value::Array(records) = value else {
        return Err(Error::format(format!("{}: expected a JSON array", source.display())));
    };
    let public_key = |key: &str| records.first().and_then(Value::as_object).is_some_and(|o| o.contains_key(key));
    let dataset = match format {
        DatasetFormat::Circo => Dataset::Circo(parse_records(records)?),
        DatasetFormat::Cirr if public_key("pairid") => {
            let public: Vec<CirrPublic> = parse_records(records)?;
            Dataset::Cirr(
                public
                    .into_iter()
                    .map(|r| CirrTriplet {
                        id: r.pairid.to_string(),
                        reference_img_id: r.reference,
                        target_img_id: r.target_hard,
                        relative_caption: r.caption,
                        subset_ids: r.img_set.members,
                    })
                    .collect(),
            )
        }
        DatasetFormat::Cirr => Dataset::Cirr(parse_records(records)?),
        DatasetFormat::FashionIq if public_key("candidate") => {
            let category = category_from_path(source)?;
            let public: Vec<FashionIqPublic> = parse_records(records)?;
            Dataset::FashionIq(
                public
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| FashionIqTriplet {
                        id: format!("{}-{i}", category.name()),
                        reference_img_id: r.candidate,
                        target_img_id: r.target,
                        captions: r.captions,
                        category,
                    })
                    .collect(),
            )
        }
        DatasetFormat::FashionIq => Dataset::FashionIq(parse_records(records)?),
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&bytes, format, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageEstimate {
    pub gt_found_by_method: u64,
    pub gt_total_labeled: u64,
    pub recall_at_100: f64,
    pub estimated_total: f64,
    pub coverage_fraction: f64,
}

/// Estimates the total number of ground truths from the share found by the
/// retrieval method and that method's recall, then the fraction labeled.
pub fn coverage_estimate(gt_found_by_method: u64, gt_total_labeled: u64, recall_at_100: f64) -> Result<CoverageEstimate> {
    if gt_found_by_method == 0 || gt_total_labeled == 0 {
        return Err(Error::input("ground-truth counts must be positive"));
    }
    if !(recall_at_100 > 0.0 && recall_at_100 <= 1.0) {
        return Err(Error::input(format!("recall must lie in (0, 1], got {recall_at_100}")));
    }
    let estimated_total = gt_found_by_method as f64 / recall_at_100;
    let coverage_fraction = gt_total_labeled as f64 / estimated_total;
    // estimator noise may push coverage slightly above one, never far
    if coverage_fraction > 1.05 {
        return Err(Error::Numeric(format!(
            "coverage {coverage_fraction:.4} exceeds 1.05; inputs are inconsistent"
        )));
    }
    Ok(CoverageEstimate {
        gt_found_by_method,
        gt_total_labeled,
        recall_at_100,
        estimated_total,
        coverage_fraction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_queries: usize,
    pub mean_ground_truths: f64,
    pub max_ground_truths: usize,
    /// Most frequent ground-truth count; ties resolve to the smaller count.
    pub mode_ground_truths: usize,
    pub mean_caption_words: f64,
    /// Percentage of queries tagged with each aspect (multi-label, so the
    /// values need not sum to 100). Empty for datasets without aspects.
    pub aspect_coverage: BTreeMap<String, f64>,
}

impl DatasetStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("statistic,value\n");
        out += &format!("num_queries,{}\n", self.num_queries);
        out += &format!("mean_ground_truths,{:.4}\n", self.mean_ground_truths);
        out += &format!("max_ground_truths,{}\n", self.max_ground_truths);
        out += &format!("mode_ground_truths,{}\n", self.mode_ground_truths);
        out += &format!("mean_caption_words,{:.4}\n", self.mean_caption_words);
        for aspect in SemanticAspect::ALL {
            if let Some(p) = self.aspect_coverage.get(aspect.name()) {
                out += &format!("\"{}\",{p:.4}\n", aspect.name());
            }
        }
        out
    }
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

pub fn dataset_stats(dataset: &Dataset) -> DatasetStats {
    let (gt_counts, caption_words, aspects): (Vec<usize>, Vec<usize>, Option<Vec<&[SemanticAspect]>>) = match dataset {
        Dataset::Circo(q) => (
            q.iter().map(|r| r.gt_img_ids.len()).collect(),
            q.iter().map(|r| word_count(&r.relative_caption)).collect(),
            Some(q.iter().map(|r| r.semantic_aspects.as_slice()).collect()),
        ),
        Dataset::Cirr(q) => (
            vec![1; q.len()],
            q.iter().map(|r| word_count(&r.relative_caption)).collect(),
            None,
        ),
        Dataset::FashionIq(q) => (
            vec![1; q.len()],
            q.iter().flat_map(|r| r.captions.iter().map(|c| word_count(c))).collect(),
            None,
        ),
    };
    let n = gt_counts.len();
    let mean = |v: &[usize]| if v.is_empty() { 0.0 } else { v.iter().sum::<usize>() as f64 / v.len() as f64 };
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for &g in &gt_counts {
        *histogram.entry(g).or_default() += 1;
    }
    let mode = histogram
        .iter()
        .fold((0, 0), |(best, best_n), (&g, &c)| if c > best_n { (g, c) } else { (best, best_n) })
        .0;
    let mut aspect_coverage = BTreeMap::new();
    if let Some(aspects) = aspects {
        for aspect in SemanticAspect::ALL {
            let hits = aspects.iter().filter(|a| a.contains(&aspect)).count();
            let pct = if n == 0 { 0.0 } else { 100.0 * hits as f64 / n as f64 };
            aspect_coverage.insert(aspect.name().to_string(), pct);
        }
    }
    DatasetStats {
        num_queries: n,
        mean_ground_truths: mean(&gt_counts),
        max_ground_truths: gt_counts.iter().copied().max().unwrap_or(0),
        mode_ground_truths: mode,
        mean_caption_words: mean(&caption_words),
        aspect_coverage,
    }
}

// Histogram of ground-truth counts for the synthetic full-size CIRCO fixture:
// 1020 queries, 4624 ground truths, maximum 21, mode 2.
const CIRCO_GT_HISTOGRAM: [(usize, usize); 21] = [
    (1, 117),
    (2, 260),
    (3, 150),
    (4, 113),
    (5, 80),
    (6, 93),
    (7, 45),
    (8, 35),
    (9, 28),
    (10, 22),
    (11, 18),
    (12, 14),
    (13, 11),
    (14, 9),
    (15, 7),
    (16, 5),
    (17, 4),
    (18, 3),
    (19, 3),
    (20, 2),
    (21, 1),
];

// Queries per aspect out of 1020, matching the published coverage to 0.1%.
const CIRCO_ASPECT_COUNTS: [usize; 9] = [225, 272, 124, 517, 326, 360, 766, 466, 231];

const FIXTURE_WORDS: [&str; 16] = [
    "has", "two", "dogs", "instead", "of", "one", "and", "is", "shown", "from", "above", "on", "a", "sunny", "beach",
    "today",
];

/// A synthetic dataset with the aggregate shape of the full CIRCO release:
/// 1020 queries split 220/800, 4624 ground truths, captions averaging 10.4
/// words. Image ids and captions are placeholders.
pub fn synthetic_circo(seed: u64) -> Vec<CircoQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gt_counts: Vec<usize> = CIRCO_GT_HISTOGRAM
        .iter()
        .flat_map(|&(g, n)| std::iter::repeat(g).take(n))
        .collect();
    gt_counts.shuffle(&mut rng);
    let n = gt_counts.len();

    let mut aspect_sets: Vec<Vec<SemanticAspect>> = vec![Vec::new(); n];
    for (aspect, &count) in SemanticAspect::ALL.iter().zip(&CIRCO_ASPECT_COUNTS) {
        let mut holders: Vec<usize> = (0..n).collect();
        holders.shuffle(&mut rng);
        for &q in &holders[..count] {
            aspect_sets[q].push(*aspect);
        }
    }
    for set in &mut aspect_sets {
        set.sort();
    }

    // 408 captions of 11 words and 612 of 10 give a mean of 10.4
    let mut lengths: Vec<usize> = (0..n).map(|i| if i < 408 { 11 } else { 10 }).collect();
    lengths.shuffle(&mut rng);

    let mut splits: Vec<Split> = (0..n).map(|i| if i < 220 { Split::Val } else { Split::Test }).collect();
    splits.shuffle(&mut rng);

    let mut next_image = 0usize;
    let mut fresh = || {
        next_image += 1;
        format!("{next_image:012}")
    };
    (0..n)
        .map(|q| {
            let reference_img_id = fresh();
            let gt_img_ids = (0..gt_counts[q]).map(|_| fresh()).collect();
            let relative_caption = (0..lengths[q])
                .map(|w| FIXTURE_WORDS[(q + w) % FIXTURE_WORDS.len()])
                .collect::<Vec<_>>()
                .join(" ");
            CircoQuery {
                id: q.to_string(),
                reference_img_id,
                relative_caption,
                shared_concept: "a photo of something".into(),
                gt_img_ids,
                semantic_aspects: std::mem::take(&mut aspect_sets[q]),
                split: splits[q],
            }
        })
        .collect()
}
