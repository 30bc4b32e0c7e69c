use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use zscir_annotate::{AnnotationService, Resources, ServiceConfig, ServiceError};
use zscir_core::backbone::{load_backbone, save_mock_backbone, Backbone, BackboneConfig, Image, ImageFeature};
use zscir_core::datasets::{dataset_stats, load_dataset, coverage_estimate, Dataset, DatasetFormat};
use zscir_core::fixtures::{circo_queries, write_image_corpus, write_vocabulary};
use zscir_core::metrics::{evaluate, MetricPlan, Rankings};
use zscir_core::oti::{Inverter, OtiConfig, PseudoTokenSet};
use zscir_core::phi::{load_checkpoint, save_checkpoint, train_phi, write_training_log, DistillTrainConfig, PhiNetwork, PhiTrainError};
use zscir_core::phrasebank::{ConceptClassifier, ConceptVocabulary, PhraseBank, PhraseGenConfig, TemplateGenerator};
use zscir_core::retrieval::{compose_query, search, EmbeddingIndex, InversionSource, QueryMode, QuerySpec, RankedResult};
use zscir_core::store::{write_atomic, write_json};

use crate::*;

type CmdResult = Result<(), CliError>;

/// Failures while reading and checking inputs are validation errors.
fn prep<T>(r: zscir_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Config(e.to_string()))
}

fn need_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn need_dir(path: &Path, what: &str) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} directory {} does not exist", path.display())))
    }
}

fn backbone(dir: &Path) -> Result<Box<dyn Backbone>, CliError> {
    need_dir(dir, "backbone")?;
    prep(load_backbone(dir))
}

fn vocabulary(path: &Path) -> Result<ConceptVocabulary, CliError> {
    need_file(path, "vocabulary")?;
    prep(ConceptVocabulary::load(path))
}

/// Loads the bank and checks that it has phrases for every concept.
fn phrase_bank(path: &Path, vocab: &ConceptVocabulary) -> Result<PhraseBank, CliError> {
    need_file(path, "phrase bank")?;
    let bank = prep(PhraseBank::load(path))?;
    if let Some(c) = vocab.concepts().iter().find(|c| bank.phrases(c).is_none_or(|p| p.is_empty())) {
        return Err(CliError::Config(format!("phrase bank has no phrases for concept {c:?}")));
    }
    Ok(bank)
}

fn index(path: &Path) -> Result<EmbeddingIndex, CliError> {
    need_file(path, "index")?;
    prep(EmbeddingIndex::load(path))
}

fn checkpoint(path: &Path) -> Result<PhiNetwork, CliError> {
    need_file(path, "checkpoint")?;
    Ok(prep(load_checkpoint(path, None))?.phi)
}

/// Image files in `dir` keyed by file stem, in id order.
pub fn image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    need_dir(dir, "image")?;
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let mut files = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Runtime(e.to_string()))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "webp")) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        if let Some(other) = files.insert(stem.clone(), path.clone()) {
            return Err(CliError::Config(format!(
                "image id {stem:?} is shared by {} and {}",
                other.display(),
                path.display()
            )));
        }
    }
    if files.is_empty() {
        return Err(CliError::Config(format!("no images in {}", dir.display())));
    }
    Ok(files.into_iter().collect())
}

fn decode_images(dir: &Path) -> Result<Vec<(String, Image)>, CliError> {
    image_files(dir)?
        .into_iter()
        .map(|(id, path)| Ok((id, prep(Image::open(&path))?)))
        .collect()
}

pub fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::InitBackbone(a) => init_backbone(a),
        Command::Fixtures(a) => fixtures(a),
        Command::GenPhrases(a) => gen_phrases(a),
        Command::Index(a) => build_index(a),
        Command::Oti(a) => oti(a),
        Command::TrainPhi(a) => train(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Serve(a) => serve(a),
        Command::Stats(a) => stats(a),
        Command::Coverage(a) => coverage(a),
    }
}

fn init_backbone(a: InitBackboneArgs) -> CmdResult {
    let config = BackboneConfig {
        feature_dim: a.feature_dim,
        token_dim: a.token_dim,
        context_length: a.context_length,
        seed: a.seed,
    };
    prep(config.validate())?;
    save_mock_backbone(&a.out, &config)?;
    log::info!("wrote mock backbone to {}", a.out.display());
    Ok(())
}

fn fixtures(a: FixturesArgs) -> CmdResult {
    if a.images < 4 {
        return Err(CliError::Config("the fixture corpus needs at least four images".into()));
    }
    let ids = write_image_corpus(&a.out.join("images"), a.images, a.seed)?;
    write_vocabulary(&a.out.join("vocab.txt"))?;
    Dataset::Circo(circo_queries(&ids, a.queries, a.seed)?).save(&a.out.join("queries.json"))?;
    log::info!("wrote {} images and {} queries to {}", ids.len(), a.queries, a.out.display());
    Ok(())
}

fn gen_phrases(a: GenPhrasesArgs) -> CmdResult {
    let bb = backbone(&a.backbone)?;
    let vocab = vocabulary(&a.vocab)?;
    if a.n == 0 || a.max_tokens == 0 {
        return Err(CliError::Config("--n and --max-tokens must be positive".into()));
    }
    if !(a.temperature >= 0.0 && a.temperature.is_finite()) {
        return Err(CliError::Config(format!("temperature {} must be finite and non-negative", a.temperature)));
    }
    let cfg = PhraseGenConfig {
        n: a.n,
        max_tokens: a.max_tokens,
        temperature: a.temperature,
        seed: a.seed,
    };
    let bank = PhraseBank::generate(&vocab, &TemplateGenerator, &cfg, bb.as_ref())?;
    bank.save(&a.out)?;
    log::info!("wrote phrases for {} concepts to {}", bank.len(), a.out.display());
    Ok(())
}

fn build_index(a: IndexArgs) -> CmdResult {
    let bb = backbone(&a.backbone)?;
    let images = decode_images(&a.images)?;
    let index = EmbeddingIndex::build(&images, bb.as_ref())?;
    index.save(&a.out)?;
    log::info!("indexed {} images into {}", index.len(), a.out.display());
    Ok(())
}

fn oti(a: OtiArgs) -> CmdResult {
    let bb = backbone(&a.backbone)?;
    let vocab = vocabulary(&a.vocab)?;
    let bank = phrase_bank(&a.bank, &vocab)?;
    let defaults = OtiConfig::default();
    let config = OtiConfig {
        iterations: a.iterations.unwrap_or(defaults.iterations),
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        weight_decay: a.weight_decay.unwrap_or(defaults.weight_decay),
        lambda_cos: a.lambda_cos.unwrap_or(defaults.lambda_cos),
        lambda_oti_gpt: a.lambda_gpt.unwrap_or(defaults.lambda_oti_gpt),
        ema_decay: a.ema_decay.unwrap_or(defaults.ema_decay),
        k_concepts: a.k_concepts.unwrap_or(defaults.k_concepts),
        seed: a.seed,
        ..defaults
    };
    let classifier = prep(ConceptClassifier::new(vocab, bb.as_ref()))?;
    let inverter = prep(Inverter::new(bb.as_ref(), &classifier, &bank, &config))?;
    if a.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }

    let mut items: Vec<(String, ImageFeature)> = match (&a.features, &a.images) {
        (Some(path), _) => {
            let index = index(path)?;
            index
                .ids()
                .iter()
                .map(|id| Ok((id.clone(), index.feature(id)?)))
                .collect::<zscir_core::Result<_>>()?
        }
        (None, Some(dir)) => decode_images(dir)?
            .into_iter()
            .map(|(id, img)| Ok((id, bb.encode_image(&img)?)))
            .collect::<zscir_core::Result<_>>()?,
        (None, None) => unreachable!("clap requires one source"),
    };

    let digest = config.digest();
    let mut tokens = PseudoTokenSet::new();
    if a.resume && a.out.exists() {
        let (existing, manifest) = prep(PseudoTokenSet::load(&a.out))?;
        if manifest.config_digest != digest {
            return Err(CliError::Config(format!(
                "{} was written with a different configuration; rerun without --resume",
                a.out.display()
            )));
        }
        items.retain(|(id, _)| !existing.contains(id));
        log::info!("resuming: {} tokens kept, {} images left", existing.len(), items.len());
        tokens = existing;
    }

    let batch = inverter.batch_invert(&items, a.workers)?;
    for t in batch.tokens.iter() {
        tokens.insert(t.clone());
    }
    tokens.save(&a.out, &digest)?;
    log::info!("wrote {} tokens to {}", tokens.len(), a.out.display());
    if !batch.failures.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} images failed to invert (first: {}: {})",
            batch.failures.len(),
            batch.failures[0].0,
            batch.failures[0].1
        )));
    }
    Ok(())
}

fn train(a: TrainPhiArgs) -> CmdResult {
    let bb = backbone(&a.backbone)?;
    let vocab = vocabulary(&a.vocab)?;
    let bank = phrase_bank(&a.bank, &vocab)?;
    let index = index(&a.features)?;
    need_file(&a.tokens, "token set")?;
    let (tokens, _) = prep(PseudoTokenSet::load(&a.tokens))?;
    let base = if a.xl { DistillTrainConfig::xl() } else { DistillTrainConfig::default() };
    let config = DistillTrainConfig {
        epochs: a.epochs.unwrap_or(base.epochs),
        learning_rate: a.learning_rate.unwrap_or(base.learning_rate),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        temperature: a.temperature.unwrap_or(base.temperature),
        lambda_distil: a.lambda_distil.unwrap_or(base.lambda_distil),
        lambda_phi_gpt: a.lambda_gpt.unwrap_or(base.lambda_phi_gpt),
        weight_decay: a.weight_decay.unwrap_or(base.weight_decay),
        k_concepts: a.k_concepts.unwrap_or(base.k_concepts),
        dropout: a.dropout.unwrap_or(base.dropout),
        seed: a.seed,
    };
    prep(config.validate())?;
    if config.k_concepts > vocab.len() {
        return Err(CliError::Config(format!(
            "--k-concepts {} exceeds the vocabulary size {}",
            config.k_concepts,
            vocab.len()
        )));
    }
    let mut images = Vec::new();
    for id in index.ids() {
        if tokens.contains(id) {
            images.push((id.clone(), index.feature(id)?));
        } else {
            log::warn!("no inversion token for {id}; skipped");
        }
    }
    if images.is_empty() {
        return Err(CliError::Config("no indexed image has an inversion token".into()));
    }
    let classifier = prep(ConceptClassifier::new(vocab, bb.as_ref()))?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    match train_phi(&images, &tokens, &classifier, &bank, &config, bb.as_ref()) {
        Ok(trained) => {
            save_checkpoint(&trained.phi, &config.digest(), &a.out)?;
            write_training_log(&log_path, &trained.log)?;
            log::info!("trained on {} images for {} epochs; wrote {}", images.len(), config.epochs, a.out.display());
            Ok(())
        }
        Err(PhiTrainError::Setup(e)) => Err(e.into()),
        Err(PhiTrainError::Diverged {
            epoch,
            batch,
            last_good,
            log,
        }) => {
            let mut rescue = a.out.clone().into_os_string();
            rescue.push(".last-good");
            let rescue = PathBuf::from(rescue);
            save_checkpoint(&last_good, &config.digest(), &rescue)?;
            write_training_log(&log_path, &log)?;
            Err(CliError::Runtime(format!(
                "training diverged at epoch {epoch}, batch {batch}; last finite weights in {}",
                rescue.display()
            )))
        }
    }
}

/// One query per dataset record. Multi-caption records use both captions.
pub fn dataset_queries(dataset: &Dataset, mode: QueryMode) -> Vec<QuerySpec> {
    let spec = |id: &str, reference: &str, captions: Vec<String>| QuerySpec {
        query_id: id.to_string(),
        mode,
        reference_id: Some(reference.to_string()),
        captions,
        shared_concept: None,
    };
    match dataset {
        Dataset::Circo(q) => q
            .iter()
            .map(|q| spec(&q.id, &q.reference_img_id, vec![q.relative_caption.clone()]))
            .collect(),
        Dataset::Cirr(t) => t
            .iter()
            .map(|t| spec(&t.id, &t.reference_img_id, vec![t.relative_caption.clone()]))
            .collect(),
        Dataset::FashionIq(t) => t
            .iter()
            .map(|t| spec(&t.id, &t.reference_img_id, t.captions.clone()))
            .collect(),
    }
}

fn query_mode(m: RetrievalMode) -> QueryMode {
    match m {
        RetrievalMode::Searle | RetrievalMode::SearleOti => QueryMode::Searle,
        RetrievalMode::TextOnly => QueryMode::TextOnly,
        RetrievalMode::ImageOnly => QueryMode::ImageOnly,
        RetrievalMode::ImagePlusText => QueryMode::ImagePlusText,
        RetrievalMode::Captioning => QueryMode::Captioning,
    }
}

fn retrieve(a: RetrieveArgs) -> CmdResult {
    let bb = backbone(&a.backbone)?;
    let index = index(&a.index)?;
    let mut specs: Vec<QuerySpec> = match (&a.dataset, &a.queries) {
        (Some(path), _) => {
            need_file(path, "dataset")?;
            let format: DatasetFormat = a.format.expect("clap requires --format with --dataset").into();
            let mode = a
                .mode
                .ok_or_else(|| CliError::Config("--mode is required with --dataset".into()))?;
            dataset_queries(&prep(load_dataset(path, format))?, query_mode(mode))
        }
        (None, Some(path)) => {
            need_file(path, "query file")?;
            prep(zscir_core::store::read_json(path))?
        }
        (None, None) => unreachable!("clap requires one query source"),
    };
    if let Some(m) = a.mode {
        specs.iter_mut().for_each(|s| s.mode = query_mode(m));
    }
    let mut seen = HashSet::new();
    for s in &specs {
        prep(s.validate())?;
        if !seen.insert(s.query_id.as_str()) {
            return Err(CliError::Config(format!("duplicate query id {:?}", s.query_id)));
        }
        if let Some(r) = &s.reference_id {
            if !index.contains(r) {
                return Err(CliError::Config(format!("query {:?}: reference {r:?} is not indexed", s.query_id)));
            }
        }
        if s.mode == QueryMode::Captioning {
            return Err(CliError::Config("captioning mode needs a captioner adapter and none is configured".into()));
        }
    }

    let phi = a.checkpoint.as_deref().map(checkpoint).transpose()?;
    let tokens = match &a.tokens {
        Some(p) => {
            need_file(p, "token set")?;
            Some(prep(PseudoTokenSet::load(p))?.0)
        }
        None => None,
    };
    match a.mode {
        Some(RetrievalMode::Searle) if phi.is_none() => {
            return Err(CliError::Config("mode searle needs --checkpoint".into()));
        }
        Some(RetrievalMode::SearleOti) if tokens.is_none() => {
            return Err(CliError::Config("mode searle-oti needs --tokens".into()));
        }
        _ => {}
    }
    if let Some(phi) = &phi {
        let arch = phi.architecture();
        if arch.input_dim != index.dim() || arch.output_dim != bb.config().token_dim {
            return Err(CliError::Config(format!(
                "checkpoint maps {} to {}, but the index has dimension {} and the backbone tokens {}",
                arch.input_dim,
                arch.output_dim,
                index.dim(),
                bb.config().token_dim
            )));
        }
    }
    let source = match (&phi, &tokens) {
        (Some(phi), _) => Some(InversionSource::Network(phi)),
        (None, Some(t)) => Some(InversionSource::Tokens(t)),
        (None, None) => None,
    };
    if source.is_none() && specs.iter().any(|s| s.mode == QueryMode::Searle) {
        return Err(CliError::Config("pseudo-word queries need --checkpoint or --tokens".into()));
    }
    if a.k == 0 {
        return Err(CliError::Config("--k must be at least 1".into()));
    }

    let mut out: BTreeMap<String, RankedResult> = BTreeMap::new();
    let mut clamped = false;
    for s in &specs {
        let query = compose_query(s, bb.as_ref(), &index, source.as_ref(), None)?;
        let exclude: Option<HashSet<String>> = a
            .exclude_reference
            .then(|| s.reference_id.iter().cloned().collect());
        let available = index.len() - exclude.as_ref().map_or(0, |e| e.len());
        if available == 0 {
            return Err(CliError::Config(format!("query {:?}: no candidates left after exclusion", s.query_id)));
        }
        clamped |= a.k > available;
        out.insert(s.query_id.clone(), search(query.values(), &index, a.k.min(available), exclude.as_ref())?);
    }
    if clamped {
        log::warn!("--k {} exceeds the candidates available; results were shortened", a.k);
    }
    write_json(&a.out, &out)?;
    log::info!("wrote rankings for {} queries to {}", out.len(), a.out.display());
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RankingEntry {
    Ids(Vec<String>),
    Scored(RankedResult),
}

/// Reads a rankings file: query id to either ranked ids or scored results.
pub fn read_rankings(path: &Path) -> Result<Rankings, CliError> {
    need_file(path, "rankings")?;
    let raw: BTreeMap<String, RankingEntry> = prep(zscir_core::store::read_json(path))?;
    Ok(raw
        .into_iter()
        .map(|(q, e)| {
            let ids = match e {
                RankingEntry::Ids(ids) => ids,
                RankingEntry::Scored(r) => r.ids(),
            };
            (q, ids)
        })
        .collect())
}

fn evaluate_cmd(a: EvaluateArgs) -> CmdResult {
    need_file(&a.dataset, "dataset")?;
    let format: DatasetFormat = a.format.into();
    let dataset = prep(load_dataset(&a.dataset, format))?;
    let rankings = read_rankings(&a.rankings)?;
    let mut plan = MetricPlan::default_for(format);
    if !a.map_ks.is_empty() {
        plan.map_ks = a.map_ks;
    }
    if !a.recall_ks.is_empty() {
        plan.recall_ks = a.recall_ks;
    }
    if !a.subset_ks.is_empty() {
        plan.subset_ks = a.subset_ks;
    }
    let report = prep(evaluate(&dataset, &rankings, &plan))?;
    if let Some(p) = &a.json {
        write_atomic(p, report.to_json()?.as_bytes())?;
    }
    if let Some(p) = &a.csv {
        write_atomic(p, report.to_csv().as_bytes())?;
    }
    for (name, by_k) in &report.metrics {
        for (k, v) in by_k {
            log::info!("{name}@{k} = {:.2}", v * 100.0);
        }
    }
    Ok(())
}

fn service_error(e: ServiceError) -> CliError {
    match e {
        ServiceError::Core(e) => e.into(),
        ServiceError::Validation { message, .. } => CliError::Config(message),
        other => CliError::Runtime(other.to_string()),
    }
}

fn serve(a: ServeArgs) -> CmdResult {
    let bb = backbone(&a.backbone)?;
    let index = index(&a.index)?;
    let files: HashMap<String, PathBuf> = image_files(&a.images)?
        .into_iter()
        .filter(|(id, _)| index.contains(id))
        .collect();
    let missing = index.ids().iter().filter(|id| !files.contains_key(*id)).count();
    if missing > 0 {
        log::warn!("{missing} indexed images have no file in {}", a.images.display());
    }
    let phi = match &a.checkpoint {
        Some(p) => Some(Arc::new(checkpoint(p)?)),
        None => {
            log::warn!("no checkpoint given; ground-truth galleries are unavailable");
            None
        }
    };
    let res = Resources {
        backbone: Arc::from(bb),
        index: Arc::new(index),
        phi,
        image_files: files,
    };
    let config = ServiceConfig {
        bucket_quota: a.bucket_quota,
        seed: a.seed,
        ..ServiceConfig::default()
    };
    let service = Arc::new(AnnotationService::open(res, config, &a.data).map_err(service_error)?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime
        .block_on(zscir_annotate::serve(a.addr, service, async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        }))
        .map_err(|e| CliError::Runtime(format!("annotation service: {e}")))
}

fn stats(a: StatsArgs) -> CmdResult {
    need_file(&a.dataset, "dataset")?;
    let dataset = prep(load_dataset(&a.dataset, a.format.into()))?;
    let stats = dataset_stats(&dataset);
    if let Some(p) = &a.csv {
        write_atomic(p, stats.to_csv().as_bytes())?;
    }
    if let Some(p) = &a.json {
        write_json(p, &stats)?;
    }
    Ok(())
}

fn coverage(a: CoverageArgs) -> CmdResult {
    let estimate = prep(coverage_estimate(a.found, a.labeled, a.recall))?;
    log::info!(
        "estimated total {:.4}, coverage {:.5}",
        estimate.estimated_total,
        estimate.coverage_fraction
    );
    write_json(&a.out, &estimate)?;
    Ok(())
}
