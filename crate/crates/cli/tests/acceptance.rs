//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use zscir_core::backbone::{Backbone, BackboneConfig, ImageFeature, MockBackbone};
use zscir_core::datasets::coverage_estimate;
use zscir_core::fixtures::{image_corpus, FIXTURE_CONCEPTS};
use zscir_core::metrics::{average_precision_at_k, map_at_k, recall_subset_at_k, MetricsReport, Rankings, RelevanceJudgment};
use zscir_core::oti::{oti_objective, oti_objective_with_grad, GptTarget, Inverter, OtiConfig, DEFAULT_TEMPLATES};
use zscir_core::phi::{
    distillation_loss, phi_objective, phi_objective_with_grad, train_phi, DistillTrainConfig, Mode, PhiArchitecture,
    PhiNetwork,
};
use zscir_core::phrasebank::{ConceptClassifier, ConceptVocabulary, PhraseBank, PhraseGenConfig, TemplateGenerator};
use zscir_core::retrieval::{compose_dual_caption_query, search, EmbeddingIndex};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(elapsed < limit, format!("{detail}; {:.2} s (limit {} s)", elapsed.as_secs_f64(), limit.as_secs()))
}

fn ids(xs: impl IntoIterator<Item = usize>) -> Vec<String> {
    xs.into_iter().map(|i| format!("i{i}")).collect()
}

/// Precision recomputed from scratch at every relevant rank.
fn oracle_ap(ranking: &[String], gts: &HashSet<String>, k: usize) -> f64 {
    let mut sum = 0.0;
    for rank in 1..=k {
        if ranking.get(rank - 1).is_some_and(|id| gts.contains(id)) {
            let hits = (0..rank).filter(|&i| ranking.get(i).is_some_and(|id| gts.contains(id))).count();
            sum += hits as f64 / rank as f64;
        }
    }
    sum / k.min(gts.len()) as f64
}

fn map_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let index_size = rng.random_range(8..=200);
        let n_queries = rng.random_range(1..=50);
        let k = *[5usize, 10, 25, 50].choose(&mut rng).unwrap();
        let pool = ids(0..index_size);
        let mut rankings = Rankings::new();
        let mut judgments = Vec::new();
        let mut oracle_sum = 0.0;
        for q in 0..n_queries {
            let g = rng.random_range(1..=8);
            let mut shuffled = pool.clone();
            shuffled.shuffle(&mut rng);
            let gts: Vec<String> = pool.choose_multiple(&mut rng, g).cloned().collect();
            let depth = rng.random_range(1..=index_size);
            shuffled.truncate(depth);
            let gt_set: HashSet<String> = gts.iter().cloned().collect();
            oracle_sum += oracle_ap(&shuffled, &gt_set, k);
            rankings.insert(q.to_string(), shuffled);
            judgments.push(RelevanceJudgment::new(q.to_string(), gts));
        }
        let got = map_at_k(&rankings, &judgments, k).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle_sum / n_queries as f64).abs());
    }
    let elapsed = start.elapsed();
    if worst >= 1e-9 {
        return Err(format!("max abs error {worst:e}"));
    }
    within(elapsed, Duration::from_secs(10), format!("1000 instances, max abs error {worst:e}"))
}

fn ulps_apart(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn hand_derived_ap() -> Outcome {
    let ranking = ids(1..=10);
    // ground truths at ranks 1 and 3
    let a = average_precision_at_k(&ranking, &ids([1, 3]), 5);
    let b = average_precision_at_k(&ranking, &ids([2]), 5);
    let c = average_precision_at_k(&ranking, &ids(1..=4), 5);
    // 5/6 has no finite binary form; the two rounding paths may land one ulp apart
    let detail = format!("{{1,3}}: {a:?} (5/6 = {:?}), rank 2: {b:?}, perfect: {c:?}", 5.0 / 6.0);
    check(ulps_apart(a, 5.0 / 6.0) <= 1 && b == 0.5 && c == 1.0, detail)
}

fn coverage_paper_check() -> Outcome {
    let e = coverage_estimate(4097, 4624, 0.8215).map_err(|e| e.to_string())?;
    check(
        (e.estimated_total - 4987.0).abs() <= 1.0 && (e.coverage_fraction - 0.927).abs() <= 0.001,
        format!("total {:.4}, coverage {:.5}", e.estimated_total, e.coverage_fraction),
    )
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (unit(a), unit(b));
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

/// Literal transcription of the symmetric contrastive loss, one scalar at a time.
fn naive_distillation(p: &Array2<f64>, t: &Array2<f64>, tau: f64) -> f64 {
    let b = p.nrows();
    let row = |m: &Array2<f64>, i: usize| m.row(i).to_vec();
    let e = |x: f64| (x / tau).exp();
    let mut total = 0.0;
    for k in 0..b {
        let (pk, tk) = (row(p, k), row(t, k));
        let mut den1 = 0.0;
        let mut den2 = 0.0;
        for j in 0..b {
            den1 += e(cos(&pk, &row(t, j)));
            den2 += e(cos(&tk, &row(p, j)));
            if j != k {
                den1 += e(cos(&tk, &row(t, j)));
                den2 += e(cos(&pk, &row(p, j)));
            }
        }
        total -= (e(cos(&pk, &tk)) / den1).ln();
        total -= (e(cos(&tk, &pk)) / den2).ln();
    }
    total / b as f64
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

fn distillation_loss_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut asymmetric = 0;
    for b in 2..=8 {
        for _ in 0..20 {
            let d = rng.random_range(2..24);
            let tau = rng.random_range(0.05..1.0);
            let (p, t) = (gaussian(&mut rng, b, d), gaussian(&mut rng, b, d));
            let got = distillation_loss(&p, &t, tau).map_err(|e| e.to_string())?;
            worst = worst.max((got - naive_distillation(&p, &t, tau)).abs());
            if got != distillation_loss(&t, &p, tau).map_err(|e| e.to_string())? {
                asymmetric += 1;
            }
        }
    }
    let single = distillation_loss(&gaussian(&mut rng, 1, 8), &gaussian(&mut rng, 1, 8), 0.25).map_err(|e| e.to_string())?;
    let eye = Array2::from_shape_fn((2, 2), |(i, j)| if i == j { 1.0 } else { 0.0 });
    let scalar = distillation_loss(&eye, &eye, 0.25).map_err(|e| e.to_string())?;
    let expected = 2.0 * (1.0 + 2.0 * (-4.0f64).exp()).ln();
    check(
        worst < 1e-8 && asymmetric == 0 && single == 0.0 && (scalar - expected).abs() < 1e-12,
        format!(
            "max abs error {worst:e} over 140 batches, {asymmetric} swap mismatches, B=1 -> {single}, orthonormal pair {scalar} (expected {expected})"
        ),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(f64::MIN_POSITIVE)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let bb = MockBackbone::new(BackboneConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = OtiConfig::default();
    let h = 1e-5;

    let mut oti_worst: f64 = 0.0;
    for trial in 0..6 {
        let token: Vec<f64> = (0..bb.config().token_dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
        let feature = ImageFeature((0..bb.config().feature_dim).map(|_| rng.sample(StandardNormal)).collect());
        let template = DEFAULT_TEMPLATES[trial % DEFAULT_TEMPLATES.len()];
        let concept = FIXTURE_CONCEPTS[12 + trial];
        let phrase = format!("a photo of {concept} lying on a wooden table");
        let (_, grad) = oti_objective_with_grad(&token, &feature, template, concept, &phrase, &cfg, &bb).map_err(|e| e.to_string())?;
        let mut fd = vec![0.0; token.len()];
        for i in 0..token.len() {
            let mut plus = token.clone();
            let mut minus = token.clone();
            plus[i] += h;
            minus[i] -= h;
            let f = |t: &[f64]| oti_objective(t, &feature, template, concept, &phrase, &cfg, &bb).unwrap();
            fd[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        oti_worst = oti_worst.max(rel_err(&grad, &fd));
    }

    let arch = PhiArchitecture::new(32, 32, 0.5).unwrap();
    let phi = PhiNetwork::init(arch, 1).unwrap();
    let b = 6;
    let features = gaussian(&mut rng, b, 32);
    let targets = gaussian(&mut rng, b, 32);
    let gpt: Vec<GptTarget> = (0..b)
        .map(|i| {
            let c = FIXTURE_CONCEPTS[20 + i];
            GptTarget::prepare(c, &format!("a photo of {c} next to a window"), &bb).unwrap()
        })
        .collect();
    // a fixed seed gives every evaluation the same dropout mask
    let objective = |net: &PhiNetwork| {
        let mut mask = ChaCha8Rng::seed_from_u64(77);
        phi_objective(net, &features, &targets, &gpt, 0.25, 1.0, 0.75, &bb, Mode::Train(&mut mask)).unwrap().total
    };
    let mut mask = ChaCha8Rng::seed_from_u64(77);
    let (_, grad) = phi_objective_with_grad(&phi, &features, &targets, &gpt, 0.25, 1.0, 0.75, &bb, Mode::Train(&mut mask))
        .map_err(|e| e.to_string())?;
    let coords: Vec<usize> = (0..phi.params().len()).collect::<Vec<_>>().choose_multiple(&mut rng, 400).copied().collect();
    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    let mut probe = phi.clone();
    for &i in &coords {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = objective(&probe);
        probe.params_mut()[i] = orig - h;
        let down = objective(&probe);
        probe.params_mut()[i] = orig;
        fd.push((up - down) / (2.0 * h));
        analytic.push(grad[i]);
    }
    let phi_err = rel_err(&analytic, &fd);
    let elapsed = start.elapsed();
    let detail = format!("OTI rel error {oti_worst:e} (6 instances), network rel error {phi_err:e} (400 coordinates)");
    if oti_worst >= 1e-4 || phi_err >= 1e-3 {
        return Err(detail);
    }
    within(elapsed, Duration::from_secs(60), detail)
}

fn fixture_setup(bb: &MockBackbone, phrases: usize) -> (ConceptClassifier, PhraseBank) {
    let vocab = ConceptVocabulary::new(FIXTURE_CONCEPTS.iter().map(|c| c.to_string()).collect()).unwrap();
    let cfg = PhraseGenConfig {
        n: phrases,
        ..PhraseGenConfig::default()
    };
    let bank = PhraseBank::generate(&vocab, &TemplateGenerator, &cfg, bb).unwrap();
    (ConceptClassifier::new(vocab, bb).unwrap(), bank)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn oti_efficacy() -> Outcome {
    let bb = MockBackbone::new(BackboneConfig::default()).unwrap();
    let (classifier, bank) = fixture_setup(&bb, 16);
    let corpus = image_corpus(10, 7).unwrap();
    let features: Vec<ImageFeature> = corpus.iter().map(|(_, img)| bb.encode_image(img).unwrap()).collect();
    let mut initial = Vec::new();
    let mut last = Vec::new();
    for seed in 0..10u64 {
        let cfg = OtiConfig {
            seed,
            ..OtiConfig::default()
        };
        let inverter = Inverter::new(&bb, &classifier, &bank, &cfg).map_err(|e| e.to_string())?;
        let (mut a, mut b) = (0.0, 0.0);
        for ((id, _), f) in corpus.iter().zip(&features) {
            let (_, trace) = inverter.invert_feature_traced(id, f).map_err(|e| e.to_string())?;
            a += trace.initial_cos_loss;
            b += trace.final_cos_loss;
        }
        initial.push(a / corpus.len() as f64);
        last.push(b / corpus.len() as f64);
    }
    let (mi, mf) = (median(initial), median(last));
    check(mf < 0.5 * mi, format!("median L_cos {mi:.4} -> {mf:.4} (ratio {:.3})", mf / mi))
}

fn distillation_efficacy() -> Outcome {
    let start = Instant::now();
    let bb = MockBackbone::new(BackboneConfig::default()).unwrap();
    let (classifier, bank) = fixture_setup(&bb, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let pairs: Vec<(String, ImageFeature)> = (0..1000)
        .map(|i| {
            let f: Vec<f64> = (0..bb.config().feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            (format!("s{i:04}"), ImageFeature(f))
        })
        .collect();
    let oti_cfg = OtiConfig::default();
    let inverter = Inverter::new(&bb, &classifier, &bank, &oti_cfg).map_err(|e| e.to_string())?;
    let tokens = inverter.batch_invert(&pairs, 4).map_err(|e| e.to_string())?.tokens;
    let (train, held) = pairs.split_at(900);
    let config = DistillTrainConfig {
        epochs: 30,
        learning_rate: 1e-3,
        batch_size: 64,
        k_concepts: 15,
        ..DistillTrainConfig::default()
    };
    let trained = train_phi(train, &tokens, &classifier, &bank, &config, &bb).map_err(|e| e.to_string())?;
    let predicted: Vec<Vec<f64>> = held
        .iter()
        .map(|(id, f)| trained.phi.forward(id, f, Mode::Eval).map(|t| t.values))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let targets: Vec<&[f64]> = held.iter().map(|(id, _)| tokens.get(id).unwrap().values()).collect();
    let hits = predicted
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let best = (0..targets.len()).max_by(|&a, &b| cos(p, targets[a]).total_cmp(&cos(p, targets[b]))).unwrap();
            best == *i
        })
        .count();
    let accuracy = hits as f64 / held.len() as f64;
    let elapsed = start.elapsed();
    let detail = format!("held-out nearest-neighbour accuracy {:.1}% ({hits}/{})", accuracy * 100.0, held.len());
    if accuracy < 0.95 {
        return Err(detail);
    }
    within(elapsed, Duration::from_secs(300), detail)
}

fn brute_force_ranking(rows: &Array2<f64>, names: &[String], q: &[f64]) -> Vec<String> {
    let mut scored: Vec<(f64, &String)> = rows.rows().into_iter().zip(names).map(|(r, id)| (cos(&r.to_vec(), q), id)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().map(|(_, id)| id.clone()).collect()
}

fn retrieval_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = 0;
    let mut scale_changes = 0;
    let mut instances = 0;
    for _ in 0..20 {
        let n = rng.random_range(2..=120);
        let d = rng.random_range(2..=32);
        let rows = gaussian(&mut rng, n, d);
        let names: Vec<String> = (0..n).map(|i| format!("r{i:03}")).collect();
        let index = EmbeddingIndex::from_features(names.clone(), rows.clone()).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            instances += 1;
            let q: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let got = search(&q, &index, n, None).map_err(|e| e.to_string())?.ids();
            mismatches += usize::from(got != brute_force_ranking(&rows, &names, &q));
            let s: f64 = rng.random_range(1e-3..1e3);
            let scaled: Vec<f64> = q.iter().map(|x| x * s).collect();
            scale_changes += usize::from(search(&scaled, &index, n, None).map_err(|e| e.to_string())?.ids() != got);
        }
    }

    let bb = MockBackbone::new(BackboneConfig::default()).unwrap();
    let captions = ["is red", "has two dogs on the grass", "shows it from above", "is smaller and made of glass"];
    let mut asymmetric = 0;
    for _ in 0..25 {
        let token: Vec<f64> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
        let a = captions.choose(&mut rng).unwrap();
        let b = captions.choose(&mut rng).unwrap();
        let ab = compose_dual_caption_query(&token, a, b, &bb).map_err(|e| e.to_string())?;
        let ba = compose_dual_caption_query(&token, b, a, &bb).map_err(|e| e.to_string())?;
        asymmetric += usize::from(ab != ba);
    }

    let pool: Vec<String> = (0..60).map(|i| format!("g{i:02}")).collect();
    let mut rankings = Rankings::new();
    let mut judgments = Vec::new();
    for q in 0..10_000 {
        let subset: Vec<String> = pool.choose_multiple(&mut rng, 6).cloned().collect();
        let mut ranking = pool.clone();
        ranking.shuffle(&mut rng);
        rankings.insert(q.to_string(), ranking);
        judgments.push(RelevanceJudgment {
            query_id: q.to_string(),
            reference_id: Some(subset[0].clone()),
            ground_truth_ids: vec![subset[1].clone()],
            subset_ids: Some(subset),
        });
    }
    let r1 = recall_subset_at_k(&rankings, &judgments, 1).map_err(|e| e.to_string())?;
    let r3 = recall_subset_at_k(&rankings, &judgments, 3).map_err(|e| e.to_string())?;
    check(
        mismatches == 0 && scale_changes == 0 && asymmetric == 0 && (r1 - 0.2).abs() <= 0.03 && (r3 - 0.6).abs() <= 0.03,
        format!(
            "{mismatches}/{instances} argsort mismatches, {scale_changes} scaling changes, {asymmetric}/25 asymmetric dual queries, random Recall_Subset@1 {r1:.4}, @3 {r3:.4}"
        ),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_zscir"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)))
    }
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let common = ["--backbone", "bb", "--vocab", "fx/vocab.txt", "--bank", "bank.json"];
    let steps: Vec<Vec<&str>> = vec![
        vec!["fixtures", "--out", "fx", "--images", "20", "--queries", "20", "--seed", "1"],
        vec!["init-backbone", "--out", "bb"],
        vec!["gen-phrases", "--backbone", "bb", "--vocab", "fx/vocab.txt", "--out", "bank.json"],
        vec!["index", "--backbone", "bb", "--images", "fx/images", "--out", "index.bin"],
        [&["oti"][..], &common, &["--features", "index.bin", "--out", "tokens.bin"]].concat(),
        [&["train-phi"][..], &common, &["--features", "index.bin", "--tokens", "tokens.bin", "--out", "phi.ckpt", "--k-concepts", "15"]].concat(),
        vec![
            "retrieve", "--backbone", "bb", "--index", "index.bin", "--mode", "searle", "--checkpoint", "phi.ckpt",
            "--dataset", "fx/queries.json", "--format", "circo", "--out", "rankings.json",
        ],
        vec![
            "evaluate", "--dataset", "fx/queries.json", "--format", "circo", "--rankings", "rankings.json", "--json",
            "metrics.json", "--csv", "metrics.csv",
        ],
    ];
    for step in &steps {
        run_cli(d, step)?;
    }
    let text = std::fs::read_to_string(d.join("metrics.json")).map_err(|e| e.to_string())?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let report: MetricsReport = serde_json::from_value(value.clone()).map_err(|e| format!("not a MetricsReport: {e}"))?;
    let top: Vec<&String> = value.as_object().map(|o| o.keys().collect()).unwrap_or_default();
    let columns: Vec<usize> = report.metrics.get("mAP").map(|m| m.keys().copied().collect()).unwrap_or_default();
    let in_range = report.metrics.values().flat_map(BTreeMap::values).all(|v| (0.0..=1.0).contains(v));
    let csv = std::fs::read_to_string(d.join("metrics.csv")).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let ok = top == ["metrics", "num_queries"]
        && report.num_queries == 20
        && report.metrics.len() == 1
        && columns == [5, 10, 25, 50]
        && in_range
        && csv.starts_with("mAP@5,mAP@10,mAP@25,mAP@50\n");
    let detail = format!("{} steps, mAP columns {columns:?}, values {:?}", steps.len(), report.metrics.get("mAP"));
    if !ok {
        return Err(detail);
    }
    within(elapsed, Duration::from_secs(300), detail)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("mAP oracle equivalence", map_oracle_equivalence),
        ("hand-derived AP cases", hand_derived_ap),
        ("coverage estimator check", coverage_paper_check),
        ("distillation loss correctness", distillation_loss_correctness),
        ("gradient suite", gradient_suite),
        ("OTI efficacy", oti_efficacy),
        ("distillation efficacy", distillation_efficacy),
        ("retrieval invariants", retrieval_invariants),
        ("end-to-end pipeline", end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
