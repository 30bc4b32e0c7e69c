//! Recall@K, subset recall and mAP@K over per-query rankings.
//!
//! Rankings shorter than K are treated as padded with non-relevant items.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, DatasetFormat, FashionCategory};
use crate::error::{Error, Result};

/// Query id to ranked image ids, best first.
pub type Rankings = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub query_id: String,
    #[serde(default)]
    pub reference_id: Option<String>,
    pub ground_truth_ids: Vec<String>,
    #[serde(default)]
    pub subset_ids: Option<Vec<String>>,
}

impl RelevanceJudgment {
    pub fn new(query_id: impl Into<String>, ground_truth_ids: Vec<String>) -> Self {
        Self {
            query_id: query_id.into(),
            reference_id: None,
            ground_truth_ids,
            subset_ids: None,
        }
    }
}

fn ranking_for<'r>(rankings: &'r Rankings, judgment: &RelevanceJudgment) -> Result<&'r [String]> {
    let ranking = rankings
        .get(&judgment.query_id)
        .ok_or_else(|| Error::input(format!("no ranking for query {:?}", judgment.query_id)))?;
    let mut seen = HashSet::with_capacity(ranking.len());
    if let Some(dup) = ranking.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::input(format!(
            "ranking for query {:?} lists {dup:?} twice",
            judgment.query_id
        )));
    }
    Ok(ranking)
}

fn check_inputs(judgments: &[RelevanceJudgment], k: usize) -> Result<()> {
    if judgments.is_empty() {
        return Err(Error::input("no queries to evaluate"));
    }
    if k == 0 {
        return Err(Error::input("K must be at least 1"));
    }
    for j in judgments {
        if j.ground_truth_ids.is_empty() {
            return Err(Error::input(format!("query {:?} has no ground truths", j.query_id)));
        }
    }
    Ok(())
}

/// Fraction of queries with at least one ground truth in the top K.
pub fn recall_at_k(rankings: &Rankings, judgments: &[RelevanceJudgment], k: usize) -> Result<f64> {
    check_inputs(judgments, k)?;
    let mut hits = 0usize;
    for j in judgments {
        let ranking = ranking_for(rankings, j)?;
        if ranking.iter().take(k).any(|id| j.ground_truth_ids.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / judgments.len() as f64)
}

/// Recall@K after restricting each ranking to its query's subset, with the
/// reference image removed.
pub fn recall_subset_at_k(rankings: &Rankings, judgments: &[RelevanceJudgment], k: usize) -> Result<f64> {
    check_inputs(judgments, k)?;
    let mut hits = 0usize;
    for j in judgments {
        let subset = j
            .subset_ids
            .as_ref()
            .ok_or_else(|| Error::input(format!("query {:?} has no subset", j.query_id)))?;
        let ranking = ranking_for(rankings, j)?;
        let hit = ranking
            .iter()
            .filter(|id| subset.contains(id) && j.reference_id.as_ref() != Some(*id))
            .take(k)
            .any(|id| j.ground_truth_ids.contains(id));
        if hit {
            hits += 1;
        }
    }
    Ok(hits as f64 / judgments.len() as f64)
}

/// Average precision at K of one ranking against `ground_truth`.
pub fn average_precision_at_k(ranking: &[String], ground_truth: &[String], k: usize) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (rank, id) in ranking.iter().take(k).enumerate() {
        if ground_truth.contains(id) {
            found += 1;
            sum += found as f64 / (rank + 1) as f64;
        }
    }
    sum / k.min(ground_truth.len()) as f64
}

/// Mean over queries of AP@K, normalized by `min(K, G_n)`.
pub fn map_at_k(rankings: &Rankings, judgments: &[RelevanceJudgment], k: usize) -> Result<f64> {
    check_inputs(judgments, k)?;
    let mut total = 0.0;
    for j in judgments {
        total += average_precision_at_k(ranking_for(rankings, j)?, &j.ground_truth_ids, k);
    }
    Ok(total / judgments.len() as f64)
}

/// Which metrics to compute and at which cutoffs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPlan {
    pub format: DatasetFormat,
    #[serde(default)]
    pub map_ks: Vec<usize>,
    #[serde(default)]
    pub recall_ks: Vec<usize>,
    #[serde(default)]
    pub subset_ks: Vec<usize>,
}

impl MetricPlan {
    pub fn default_for(format: DatasetFormat) -> Self {
        match format {
            DatasetFormat::Circo => Self {
                format,
                map_ks: vec![5, 10, 25, 50],
                recall_ks: vec![],
                subset_ks: vec![],
            },
            DatasetFormat::Cirr => Self {
                format,
                map_ks: vec![],
                recall_ks: vec![1, 5, 10, 50],
                subset_ks: vec![1, 2, 3],
            },
            DatasetFormat::FashionIq => Self {
                format,
                map_ks: vec![],
                recall_ks: vec![10, 50],
                subset_ks: vec![],
            },
        }
    }

    fn check(&self, dataset: &Dataset) -> Result<()> {
        if self.format != dataset.format() {
            return Err(Error::Config(format!(
                "{} plan cannot evaluate a {} dataset",
                self.format,
                dataset.format()
            )));
        }
        if !self.map_ks.is_empty() && self.format != DatasetFormat::Circo {
            return Err(Error::Config("mAP needs a multi-ground-truth dataset".into()));
        }
        if !self.subset_ks.is_empty() && self.format != DatasetFormat::Cirr {
            return Err(Error::Config("subset recall needs a dataset with subsets".into()));
        }
        if self.map_ks.iter().chain(&self.recall_ks).chain(&self.subset_ks).any(|&k| k == 0) {
            return Err(Error::Config("cutoffs must be at least 1".into()));
        }
        if self.map_ks.is_empty() && self.recall_ks.is_empty() && self.subset_ks.is_empty() {
            return Err(Error::Config("plan requests no metrics".into()));
        }
        Ok(())
    }
}

/// `metrics[name][K]`, every value in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_queries: usize,
    pub metrics: BTreeMap<String, BTreeMap<usize, f64>>,
}

impl MetricsReport {
    /// One header row of `name@K` columns and one row of values in percent.
    pub fn to_csv(&self) -> String {
        let mut header = Vec::new();
        let mut values = Vec::new();
        for (name, by_k) in &self.metrics {
            for (k, v) in by_k {
                header.push(format!("{name}@{k}"));
                values.push(format!("{:.2}", v * 100.0));
            }
        }
        format!("{}\n{}\n", header.join(","), values.join(","))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Relevance judgments derived from a dataset; FashionIQ judgments are
/// returned alongside their categories.
pub fn judgments(dataset: &Dataset) -> Vec<(RelevanceJudgment, Option<FashionCategory>)> {
    match dataset {
        Dataset::Circo(q) => q
            .iter()
            .map(|r| {
                (
                    RelevanceJudgment {
                        query_id: r.id.clone(),
                        reference_id: Some(r.reference_img_id.clone()),
                        ground_truth_ids: r.gt_img_ids.clone(),
                        subset_ids: None,
                    },
                    None,
                )
            })
            .collect(),
        Dataset::Cirr(q) => q
            .iter()
            .map(|r| {
                (
                    RelevanceJudgment {
                        query_id: r.id.clone(),
                        reference_id: Some(r.reference_img_id.clone()),
                        ground_truth_ids: vec![r.target_img_id.clone()],
                        subset_ids: Some(r.subset_ids.clone()),
                    },
                    None,
                )
            })
            .collect(),
        Dataset::FashionIq(q) => q
            .iter()
            .map(|r| {
                (
                    RelevanceJudgment {
                        query_id: r.id.clone(),
                        reference_id: Some(r.reference_img_id.clone()),
                        ground_truth_ids: vec![r.target_img_id.clone()],
                        subset_ids: None,
                    },
                    Some(r.category),
                )
            })
            .collect(),
    }
}

/// Runs `plan` over every query of `dataset`.
///
/// CIRCO reports `mAP`; CIRR reports `Recall` and `Recall_Subset`; FashionIQ
/// reports per-category recall under the category name plus `average`, the
/// arithmetic mean over the categories present.
pub fn evaluate(dataset: &Dataset, rankings: &Rankings, plan: &MetricPlan) -> Result<MetricsReport> {
    plan.check(dataset)?;
    if dataset.is_empty() {
        return Err(Error::input("dataset has no queries"));
    }
    let all = judgments(dataset);
    let plain: Vec<RelevanceJudgment> = all.iter().map(|(j, _)| j.clone()).collect();
    let mut metrics: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut put = |name: &str, k: usize, v: f64| {
        metrics.entry(name.to_string()).or_default().insert(k, v);
    };

    for &k in &plan.map_ks {
        put("mAP", k, map_at_k(rankings, &plain, k)?);
    }
    for &k in &plan.subset_ks {
        put("Recall_Subset", k, recall_subset_at_k(rankings, &plain, k)?);
    }
    if plan.format == DatasetFormat::FashionIq {
        let mut per_category: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for category in FashionCategory::ALL {
            let subset: Vec<RelevanceJudgment> = all
                .iter()
                .filter(|(_, c)| *c == Some(category))
                .map(|(j, _)| j.clone())
                .collect();
            if subset.is_empty() {
                log::warn!("no {} queries; category omitted from the report", category.name());
                continue;
            }
            for &k in &plan.recall_ks {
                let r = recall_at_k(rankings, &subset, k)?;
                put(category.name(), k, r);
                per_category.entry(k).or_default().push(r);
            }
        }
        for (k, values) in per_category {
            put("average", k, values.iter().sum::<f64>() / values.len() as f64);
        }
    } else {
        for &k in &plan.recall_ks {
            put("Recall", k, recall_at_k(rankings, &plain, k)?);
        }
    }
    Ok(MetricsReport {
        num_queries: plain.len(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn one(ranking: &[&str], gts: &[&str]) -> (Rankings, Vec<RelevanceJudgment>) {
        let mut r = Rankings::new();
        r.insert("q".into(), ids(ranking));
        (r, vec![RelevanceJudgment::new("q", ids(gts))])
    }

    #[test]
    fn recall_trivial_cases() {
        let (r, j) = one(&["g", "a", "b"], &["g"]);
        assert_eq!(recall_at_k(&r, &j, 1).unwrap(), 1.0);
        let (r, j) = one(&["a", "b", "g"], &["g"]);
        assert_eq!(recall_at_k(&r, &j, 2).unwrap(), 0.0);
    }

    #[test]
    fn missing_ranking_is_an_input_error() {
        let j = vec![RelevanceJudgment::new("missing", ids(&["g"]))];
        assert!(matches!(recall_at_k(&Rankings::new(), &j, 1), Err(Error::Input(_))));
    }

    #[test]
    fn empty_ground_truth_is_rejected() {
        let (r, mut j) = one(&["a"], &["g"]);
        j[0].ground_truth_ids.clear();
        assert!(map_at_k(&r, &j, 5).is_err());
    }

    #[test]
    fn duplicate_ranked_ids_are_rejected() {
        let (r, j) = one(&["g", "g"], &["g"]);
        assert!(map_at_k(&r, &j, 5).is_err());
    }

    #[test]
    fn subset_recall_ignores_non_members_and_the_reference() {
        let mut r = Rankings::new();
        r.insert("q".into(), ids(&["ref", "x", "y", "t", "a"]));
        let j = vec![RelevanceJudgment {
            query_id: "q".into(),
            reference_id: Some("ref".into()),
            ground_truth_ids: ids(&["t"]),
            subset_ids: Some(ids(&["ref", "t", "a", "b", "c", "d"])),
        }];
        assert_eq!(recall_subset_at_k(&r, &j, 1).unwrap(), 1.0);
        let mut no_subset = j.clone();
        no_subset[0].subset_ids = None;
        assert!(recall_subset_at_k(&r, &no_subset, 1).is_err());
    }

    #[test]
    fn plan_dataset_mismatch_is_a_config_error() {
        let d = Dataset::Cirr(vec![]);
        let plan = MetricPlan::default_for(DatasetFormat::Circo);
        assert!(matches!(evaluate(&d, &Rankings::new(), &plan), Err(Error::Config(_))));
    }

    #[test]
    fn csv_has_one_column_per_metric_and_cutoff() {
        let mut metrics = BTreeMap::new();
        metrics.insert("mAP".to_string(), BTreeMap::from([(5, 0.5), (10, 0.25)]));
        let csv = MetricsReport { num_queries: 1, metrics }.to_csv();
        assert_eq!(csv, "mAP@5,mAP@10\n50.00,25.00\n");
    }
}
