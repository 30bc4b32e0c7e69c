use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zscir_core::backbone::{Backbone, ImageFeature};
use zscir_core::datasets::{Dataset, SemanticAspect, Split};
use zscir_core::phi::{Mode, PhiNetwork};
use zscir_core::phrasebank::{ConceptClassifier, ConceptVocabulary};
use zscir_core::retrieval::{compose_searle_query, near_duplicate_filter, search, searle_template, EmbeddingIndex};
use zscir_core::store::write_atomic;

use crate::model::*;

pub const EVENT_LOG: &str = "events.jsonl";
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{message}")]
    Validation { message: String, offending_ids: Vec<String> },
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    NotReady(String),
    #[error(transparent)]
    Core(#[from] zscir_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(message: impl Into<String>) -> ServiceError {
    ServiceError::Validation {
        message: message.into(),
        offending_ids: Vec::new(),
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub candidate_gallery_size: usize,
    pub near_duplicate_threshold: f64,
    pub retrieval_depth: usize,
    pub target_neighbors: usize,
    /// Completed references allowed per supercategory; unlimited when absent.
    pub bucket_quota: Option<usize>,
    pub validation_ratio: f64,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            candidate_gallery_size: 50,
            near_duplicate_threshold: 0.92,
            retrieval_depth: 100,
            target_neighbors: 50,
            bucket_quota: None,
            validation_ratio: 220.0 / 1020.0,
            seed: 0,
        }
    }
}

/// Immutable inputs shared by every request.
pub struct Resources {
    pub backbone: Arc<dyn Backbone>,
    pub index: Arc<EmbeddingIndex>,
    pub phi: Option<Arc<PhiNetwork>>,
    /// Image id to file on disk, for ids present in the index.
    pub image_files: HashMap<String, PathBuf>,
}

struct Session {
    phase: Phase,
    reference: Option<String>,
    candidates: Vec<String>,
    triplet_id: Option<String>,
    skipped: HashSet<String>,
}

struct Triplet {
    id: String,
    session_id: String,
    reference_id: String,
    target_id: String,
    shared_concept: String,
    relative_caption: String,
    supercategory: Supercategory,
    gallery: Option<Vec<String>>,
    completed: bool,
}

struct Inner {
    sessions: HashMap<String, Session>,
    completed: Vec<StoredQuery>,
    used_references: HashSet<String>,
    /// Reference id to the session holding it.
    pending: HashMap<String, String>,
    quota: QuotaState,
    rng: ChaCha8Rng,
    next_session: u64,
    next_triplet: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Triplet {
        triplet_id: String,
        session_id: String,
        reference_id: String,
        target_id: String,
        shared_concept: String,
        relative_caption: String,
    },
    Skip {
        session_id: String,
        reference_id: String,
    },
    GroundTruths {
        query: StoredQuery,
    },
}

pub struct AnnotationService {
    res: Resources,
    config: ServiceConfig,
    categories: HashMap<String, Supercategory>,
    inner: Mutex<Inner>,
    triplets: Mutex<HashMap<String, Arc<Mutex<Triplet>>>>,
    log: Mutex<File>,
    data_dir: PathBuf,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // a panicked writer leaves plain data behind; keep serving
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Zero-shot supercategory of every indexed image.
pub fn assign_supercategories(
    index: &EmbeddingIndex,
    backbone: &dyn Backbone,
) -> zscir_core::Result<HashMap<String, Supercategory>> {
    let labels = ConceptVocabulary::new(Supercategory::ALL.iter().map(|c| c.label().to_string()).collect())?;
    let classifier = ConceptClassifier::new(labels, backbone)?;
    index
        .ids()
        .iter()
        .map(|id| {
            let feature = index.feature(id)?;
            let a = classifier.classify(id, &feature, 1)?;
            let label = Supercategory::from_label(&a.concepts[0]).expect("labels are the supercategories");
            Ok((id.clone(), label))
        })
        .collect()
}

impl AnnotationService {
    /// Opens (or creates) the data directory and replays its event log.
    pub fn open(res: Resources, config: ServiceConfig, data_dir: &Path) -> ServiceResult<Self> {
        let io = |source| ServiceError::Io {
            path: data_dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(data_dir).map_err(io)?;
        let categories = assign_supercategories(&res.index, res.backbone.as_ref())?;
        let mut inner = Inner {
            sessions: HashMap::new(),
            completed: Vec::new(),
            used_references: HashSet::new(),
            pending: HashMap::new(),
            quota: QuotaState::default(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            next_session: 0,
            next_triplet: 0,
        };
        for c in Supercategory::ALL {
            inner.quota.completed.insert(c, 0);
            inner.quota.pending.insert(c, 0);
        }

        let log_path = data_dir.join(EVENT_LOG);
        if log_path.exists() {
            let file = File::open(&log_path).map_err(io)?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: Event = match serde_json::from_str(&line) {
                    Ok(e) => e,
                    Err(e) => {
                        // a torn final line after a crash; earlier lines are intact
                        log::warn!("{}: skipping line {}: {e}", log_path.display(), n + 1);
                        continue;
                    }
                };
                match event {
                    Event::Triplet { triplet_id, .. } => {
                        if let Ok(n) = triplet_id.parse::<u64>() {
                            inner.next_triplet = inner.next_triplet.max(n + 1);
                        }
                    }
                    Event::Skip { .. } => {}
                    Event::GroundTruths { query } => {
                        *inner.quota.completed.entry(query.supercategory).or_default() += 1;
                        inner.used_references.insert(query.reference_img_id.clone());
                        inner.completed.push(query);
                    }
                }
            }
            log::info!("replayed {} completed queries", inner.completed.len());
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io)?;
        Ok(Self {
            res,
            config,
            categories,
            inner: Mutex::new(inner),
            triplets: Mutex::new(HashMap::new()),
            log: Mutex::new(log),
            data_dir: data_dir.to_path_buf(),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn supercategory(&self, id: &str) -> Option<Supercategory> {
        self.categories.get(id).copied()
    }

    fn append(&self, event: &Event) -> ServiceResult<()> {
        let path = self.data_dir.join(EVENT_LOG);
        let mut line = serde_json::to_vec(event).map_err(zscir_core::Error::from)?;
        line.push(b'\n');
        let mut file = lock(&self.log);
        file.write_all(&line)
            .and_then(|_| file.flush())
            .and_then(|_| file.sync_data())
            .map_err(|source| ServiceError::Io { path, source })
    }

    /// Flushes the event log to disk.
    pub fn flush(&self) -> ServiceResult<()> {
        lock(&self.log).sync_all().map_err(|source| ServiceError::Io {
            path: self.data_dir.join(EVENT_LOG),
            source,
        })
    }

    pub fn health(&self) -> Health {
        let phi_loaded = self.res.phi.is_some();
        Health {
            status: if phi_loaded { "ready" } else { "degraded" }.into(),
            index_size: self.res.index.len(),
            phi_loaded,
            completed_queries: lock(&self.inner).completed.len(),
        }
    }

    fn view(&self, id: &str, s: &Session, quota: &QuotaState) -> SessionView {
        SessionView {
            session_id: id.to_string(),
            phase: s.phase,
            current_reference_id: s.reference.clone(),
            current_triplet_id: s.triplet_id.clone(),
            quota: quota.clone(),
            caption_prefix: CAPTION_PREFIX.into(),
        }
    }

    pub fn create_session(&self) -> SessionView {
        let mut inner = lock(&self.inner);
        inner.next_session += 1;
        let tag: u32 = inner.rng.random();
        let id = format!("s{:04}-{tag:08x}", inner.next_session);
        let session = Session {
            phase: Phase::PairSelection,
            reference: None,
            candidates: Vec::new(),
            triplet_id: None,
            skipped: HashSet::new(),
        };
        let view = self.view(&id, &session, &inner.quota);
        inner.sessions.insert(id, session);
        view
    }

    pub fn session(&self, session_id: &str) -> ServiceResult<SessionView> {
        let inner = lock(&self.inner);
        let s = inner
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session {session_id:?}")))?;
        Ok(self.view(session_id, s, &inner.quota))
    }

    fn bucket_fill(&self, inner: &Inner, c: Supercategory) -> usize {
        inner.quota.completed.get(&c).copied().unwrap_or(0) + inner.quota.pending.get(&c).copied().unwrap_or(0)
    }

    /// Draws from the least-filled supercategory, falling back to the next
    /// one when a bucket has no eligible image left.
    fn draw_reference(&self, inner: &mut Inner, session_id: &str) -> ServiceResult<String> {
        let skipped = &inner.sessions[session_id].skipped;
        let mut by_bucket: HashMap<Supercategory, Vec<&String>> = HashMap::new();
        for id in self.res.index.ids() {
            if !inner.used_references.contains(id) && !inner.pending.contains_key(id) && !skipped.contains(id) {
                by_bucket.entry(self.categories[id]).or_default().push(id);
            }
        }
        let mut order: Vec<Supercategory> = Supercategory::ALL
            .into_iter()
            .filter(|c| {
                self.config
                    .bucket_quota
                    .is_none_or(|q| inner.quota.completed.get(c).copied().unwrap_or(0) < q)
            })
            .collect();
        order.sort_by_key(|&c| (self.bucket_fill(inner, c), c));
        let preferred = order.first().copied();
        let pick = order
            .iter()
            .find_map(|c| by_bucket.get(c).filter(|ids| !ids.is_empty()).map(|ids| (*c, ids)));
        let Some((bucket, ids)) = pick else {
            return Err(ServiceError::Conflict("no reference images left to annotate".into()));
        };
        if Some(bucket) != preferred {
            log::warn!(
                "bucket {} has no eligible images; drawing from {bucket}",
                preferred.map_or("-", Supercategory::label)
            );
        }
        let id = (*ids.choose(&mut inner.rng).expect("non-empty")).clone();
        inner.pending.insert(id.clone(), session_id.to_string());
        *inner.quota.pending.entry(bucket).or_default() += 1;
        Ok(id)
    }

    fn release(&self, inner: &mut Inner, reference: &str) {
        if inner.pending.remove(reference).is_some() {
            let c = self.categories[reference];
            if let Some(n) = inner.quota.pending.get_mut(&c) {
                *n = n.saturating_sub(1);
            }
        }
    }

    /// Current reference of the session, drawing one if needed. `skip`
    /// discards the current reference without counting it.
    pub fn reference(&self, session_id: &str, skip: bool) -> ServiceResult<ReferenceView> {
        let mut guard = lock(&self.inner);
        let inner = &mut *guard;
        let session = inner
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session {session_id:?}")))?;
        if session.phase == Phase::GtSelection {
            return Err(ServiceError::Conflict(
                "finish ground-truth selection before requesting a new reference".into(),
            ));
        }
        let current = session.reference.clone();
        let reference = match current {
            Some(r) if !skip => r,
            current => {
                if let Some(old) = current {
                    self.release(inner, &old);
                    let s = inner.sessions.get_mut(session_id).expect("checked");
                    s.skipped.insert(old.clone());
                    self.append(&Event::Skip {
                        session_id: session_id.to_string(),
                        reference_id: old,
                    })?;
                }
                let r = self.draw_reference(inner, session_id)?;
                let s = inner.sessions.get_mut(session_id).expect("checked");
                s.reference = Some(r.clone());
                s.candidates.clear();
                s.phase = Phase::PairSelection;
                r
            }
        };
        Ok(ReferenceView {
            supercategory: self.categories[&reference],
            image_url: format!("/images/{reference}"),
            reference_id: reference,
        })
    }

    fn candidate_gallery(&self, reference_id: &str) -> ServiceResult<Vec<zscir_core::retrieval::ScoredImage>> {
        let index = &self.res.index;
        if index.len() < 2 {
            return Ok(Vec::new());
        }
        let row = index.feature(reference_id)?;
        let exclude = HashSet::from([reference_id.to_string()]);
        let ranked = search(row.values(), index, index.len() - 1, Some(&exclude))?;
        let mut kept = near_duplicate_filter(ranked, self.config.near_duplicate_threshold).0;
        kept.truncate(self.config.candidate_gallery_size);
        Ok(kept)
    }

    /// Serves the candidate targets for the session's reference and moves the
    /// session to captioning.
    pub fn candidates(&self, session_id: &str, reference_id: &str) -> ServiceResult<CandidateGallery> {
        if !self.res.index.contains(reference_id) {
            return Err(ServiceError::NotFound(format!("image {reference_id:?} is not indexed")));
        }
        {
            let inner = lock(&self.inner);
            let s = inner
                .sessions
                .get(session_id)
                .ok_or_else(|| ServiceError::NotFound(format!("unknown session {session_id:?}")))?;
            if s.reference.as_deref() != Some(reference_id) {
                return Err(ServiceError::Conflict(format!(
                    "{reference_id:?} is not the current reference of this session"
                )));
            }
            if s.phase == Phase::GtSelection {
                return Err(ServiceError::Conflict("session is selecting ground truths".into()));
            }
        }
        let candidates = self.candidate_gallery(reference_id)?;
        let mut inner = lock(&self.inner);
        let s = inner.sessions.get_mut(session_id).expect("sessions are never removed");
        if s.reference.as_deref() != Some(reference_id) || s.phase == Phase::GtSelection {
            return Err(ServiceError::Conflict("session changed while building the gallery".into()));
        }
        s.candidates = candidates.iter().map(|c| c.id.clone()).collect();
        s.phase = Phase::Captioning;
        Ok(CandidateGallery {
            reference_id: reference_id.to_string(),
            candidates,
        })
    }

    pub fn submit_triplet(&self, req: &TripletRequest) -> ServiceResult<TripletCreated> {
        let mut guard = lock(&self.inner);
        let inner = &mut *guard;
        let s = inner
            .sessions
            .get(&req.session_id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session {:?}", req.session_id)))?;
        if s.phase != Phase::Captioning {
            return Err(ServiceError::Conflict(format!(
                "a triplet can be submitted only while captioning (phase is {:?})",
                s.phase
            )));
        }
        if req.shared_concept.trim().is_empty() {
            return Err(invalid("shared_concept must be non-empty"));
        }
        if req.relative_caption.trim().is_empty() {
            return Err(invalid("relative_caption must be non-empty"));
        }
        if !s.candidates.contains(&req.target_id) {
            return Err(ServiceError::Validation {
                message: "target is not in the served gallery".into(),
                offending_ids: vec![req.target_id.clone()],
            });
        }
        let reference_id = s.reference.clone().expect("captioning implies a reference");
        let triplet_id = inner.next_triplet.to_string();
        self.append(&Event::Triplet {
            triplet_id: triplet_id.clone(),
            session_id: req.session_id.clone(),
            reference_id: reference_id.clone(),
            target_id: req.target_id.clone(),
            shared_concept: req.shared_concept.clone(),
            relative_caption: req.relative_caption.clone(),
        })?;
        inner.next_triplet += 1;
        let triplet = Triplet {
            id: triplet_id.clone(),
            session_id: req.session_id.clone(),
            supercategory: self.categories[&reference_id],
            reference_id,
            target_id: req.target_id.clone(),
            shared_concept: req.shared_concept.clone(),
            relative_caption: req.relative_caption.clone(),
            gallery: None,
            completed: false,
        };
        lock(&self.triplets).insert(triplet_id.clone(), Arc::new(Mutex::new(triplet)));
        let s = inner.sessions.get_mut(&req.session_id).expect("checked");
        s.phase = Phase::GtSelection;
        s.triplet_id = Some(triplet_id.clone());
        Ok(TripletCreated {
            triplet_id,
            phase: Phase::GtSelection,
        })
    }

    fn triplet(&self, triplet_id: &str) -> ServiceResult<Arc<Mutex<Triplet>>> {
        lock(&self.triplets)
            .get(triplet_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown triplet {triplet_id:?}")))
    }

    /// Gallery for multi-ground-truth selection: the composed-query results
    /// followed by the target's nearest neighbours, first occurrence kept.
    pub fn gt_candidates(&self, triplet_id: &str) -> ServiceResult<GtGallery> {
        let phi = self
            .res
            .phi
            .as_ref()
            .ok_or_else(|| ServiceError::NotReady("no inversion network loaded".into()))?;
        let handle = self.triplet(triplet_id)?;
        let mut t = lock(&handle);
        if t.completed {
            return Err(ServiceError::Conflict(format!("triplet {triplet_id} is already complete")));
        }
        let index = &self.res.index;
        let backbone = self.res.backbone.as_ref();
        let exclude = HashSet::from([t.reference_id.clone()]);
        let available = index.len() - 1;

        let reference: ImageFeature = index.feature(&t.reference_id)?;
        let token = phi.forward(&t.reference_id, &reference, Mode::Eval)?;
        let query = compose_searle_query(&token.values, &t.relative_caption, backbone, Some(&t.shared_concept))?;
        let mut candidates: Vec<GtCandidate> = Vec::new();
        let mut seen = HashSet::new();
        if available > 0 {
            let retrieved = search(query.values(), index, self.config.retrieval_depth.min(available), Some(&exclude))?;
            let target = index.feature(&t.target_id)?;
            let similar = search(target.values(), index, self.config.target_neighbors.min(available), Some(&exclude))?;
            let tagged = retrieved
                .0
                .into_iter()
                .map(|s| (s, GallerySource::Retrieval))
                .chain(similar.0.into_iter().map(|s| (s, GallerySource::SimilarToTarget)));
            for (s, source) in tagged {
                if seen.insert(s.id.clone()) {
                    candidates.push(GtCandidate {
                        prechecked: s.id == t.target_id,
                        id: s.id,
                        score: s.score,
                        source,
                    });
                }
            }
        }
        t.gallery = Some(candidates.iter().map(|c| c.id.clone()).collect());
        Ok(GtGallery {
            triplet_id: t.id.clone(),
            query_text: searle_template(&t.relative_caption, Some(&t.shared_concept)),
            candidates,
        })
    }

    pub fn submit_ground_truths(&self, req: &GroundTruthRequest) -> ServiceResult<StoredQuery> {
        let handle = self.triplet(&req.triplet_id)?;
        let mut t = lock(&handle);
        if t.session_id != req.session_id {
            return Err(ServiceError::Conflict("triplet belongs to another session".into()));
        }
        if t.completed {
            return Err(ServiceError::Conflict(format!("triplet {} is already complete", t.id)));
        }
        let gallery = t
            .gallery
            .as_ref()
            .ok_or_else(|| ServiceError::Conflict("request the ground-truth gallery first".into()))?;
        let mut seen = HashSet::new();
        let duplicates: Vec<String> = req.gt_ids.iter().filter(|id| !seen.insert(*id)).cloned().collect();
        if !duplicates.is_empty() {
            return Err(ServiceError::Validation {
                message: "ground truths listed more than once".into(),
                offending_ids: duplicates,
            });
        }
        let outside: Vec<String> = req.gt_ids.iter().filter(|id| !gallery.contains(id)).cloned().collect();
        if !outside.is_empty() {
            return Err(ServiceError::Validation {
                message: "ground truths outside the served gallery".into(),
                offending_ids: outside,
            });
        }
        if !req.gt_ids.contains(&t.target_id) {
            return Err(ServiceError::Validation {
                message: "the annotated target must be among the ground truths".into(),
                offending_ids: vec![t.target_id.clone()],
            });
        }
        let mut aspects = Vec::new();
        for a in &req.semantic_aspects {
            let parsed: SemanticAspect = a.parse().map_err(|_| invalid(format!("unknown semantic aspect {a:?}")))?;
            if !aspects.contains(&parsed) {
                aspects.push(parsed);
            }
        }
        aspects.sort();
        let gt_img_ids: Vec<String> = std::iter::once(t.target_id.clone())
            .chain(req.gt_ids.iter().filter(|id| **id != t.target_id).cloned())
            .collect();
        let query = StoredQuery {
            id: t.id.clone(),
            reference_img_id: t.reference_id.clone(),
            relative_caption: t.relative_caption.clone(),
            shared_concept: t.shared_concept.clone(),
            gt_img_ids,
            semantic_aspects: aspects,
            supercategory: t.supercategory,
        };
        query
            .to_circo(Split::Test)
            .validate(0)
            .map_err(|e| invalid(e.to_string()))?;

        let mut guard = lock(&self.inner);
        let inner = &mut *guard;
        self.append(&Event::GroundTruths { query: query.clone() })?;
        t.completed = true;
        self.release(inner, &t.reference_id);
        inner.used_references.insert(t.reference_id.clone());
        *inner.quota.completed.entry(t.supercategory).or_default() += 1;
        inner.completed.push(query.clone());
        if let Some(s) = inner.sessions.get_mut(&req.session_id) {
            s.phase = Phase::PairSelection;
            s.reference = None;
            s.candidates.clear();
            s.triplet_id = None;
        }
        let snapshot = split_queries(&inner.completed, self.config.validation_ratio, self.config.seed);
        drop(guard);
        if let Ok(dataset) = snapshot {
            let bytes = dataset.to_canonical_json()?;
            write_atomic(&self.data_dir.join(DATASET_FILE), &bytes)?;
        }
        Ok(query)
    }

    /// Canonical dataset of every completed query with a seeded split.
    pub fn export(&self, ratio: Option<f64>, seed: Option<u64>) -> ServiceResult<Dataset> {
        let ratio = ratio.unwrap_or(self.config.validation_ratio);
        if !(0.0..=1.0).contains(&ratio) {
            return Err(invalid(format!("ratio must lie in [0, 1], got {ratio}")));
        }
        let completed = lock(&self.inner).completed.clone();
        if completed.is_empty() {
            return Err(ServiceError::Conflict("no completed queries to export".into()));
        }
        split_queries(&completed, ratio, seed.unwrap_or(self.config.seed))
    }

    pub fn image_file(&self, id: &str) -> ServiceResult<&Path> {
        if !self.res.index.contains(id) {
            return Err(ServiceError::NotFound(format!("image {id:?} is not indexed")));
        }
        self.res
            .image_files
            .get(id)
            .map(PathBuf::as_path)
            .ok_or_else(|| ServiceError::NotFound(format!("no file for image {id:?}")))
    }
}

/// Assigns `round(ratio * n)` queries to validation after a seeded shuffle of
/// the id-sorted queries.
pub fn split_queries(queries: &[StoredQuery], ratio: f64, seed: u64) -> ServiceResult<Dataset> {
    let mut sorted: Vec<&StoredQuery> = queries.iter().collect();
    sorted.sort_by(|a, b| {
        let key = |q: &StoredQuery| (q.id.parse::<u64>().unwrap_or(u64::MAX), q.id.clone());
        key(a).cmp(&key(b))
    });
    let mut order: Vec<usize> = (0..sorted.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (ratio * sorted.len() as f64).round() as usize;
    let val: HashSet<usize> = order[..n_val].iter().copied().collect();
    let dataset = Dataset::Circo(
        sorted
            .iter()
            .enumerate()
            .map(|(i, q)| q.to_circo(if val.contains(&i) { Split::Val } else { Split::Test }))
            .collect(),
    );
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stored(id: usize) -> StoredQuery {
        StoredQuery {
            id: id.to_string(),
            reference_img_id: format!("r{id}"),
            relative_caption: "is red".into(),
            shared_concept: "a car".into(),
            gt_img_ids: vec![format!("g{id}")],
            semantic_aspects: vec![],
            supercategory: Supercategory::Vehicle,
        }
    }

    #[test]
    fn split_sizes_follow_the_ratio_and_the_seed() {
        let queries: Vec<StoredQuery> = (0..10).map(stored).collect();
        let Dataset::Circo(a) = split_queries(&queries, 0.2, 4).unwrap() else { panic!() };
        assert_eq!(a.iter().filter(|q| q.split == Split::Val).count(), 2);
        let mut reversed = queries.clone();
        reversed.reverse();
        let Dataset::Circo(b) = split_queries(&reversed, 0.2, 4).unwrap() else { panic!() };
        assert_eq!(a, b);
    }
}
