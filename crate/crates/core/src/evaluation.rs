//! Retrieval and VQA-classifier metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Answer, Category, Ranking};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no target for query '{0}'")]
    MissingTarget(String),
    #[error("no rankings to evaluate")]
    EmptyRankings,
    #[error("missing metrics for category '{0}'")]
    MissingCategory(Category),
    #[error("predictions contain only one class; AUC is undefined")]
    SingleClassOnly,
    #[error("no predictions")]
    EmptyPredictions,
    #[error("k must be >= 1")]
    InvalidK,
}

/// 1-based rank of each query's target; `None` when the target is not ranked.
pub fn target_ranks(
    rankings: &BTreeMap<String, Ranking>,
    targets: &BTreeMap<String, String>,
) -> Result<Vec<Option<usize>>, EvalError> {
    if rankings.is_empty() {
        return Err(EvalError::EmptyRankings);
    }
    rankings
        .iter()
        .map(|(qid, ranking)| {
            let target = targets
                .get(qid)
                .ok_or_else(|| EvalError::MissingTarget(qid.clone()))?;
            Ok(ranking.rank_of(target))
        })
        .collect()
}

fn recall_from_ranks(ranks: &[Option<usize>], k: usize) -> f64 {
    let hits = ranks.iter().filter(|r| matches!(r, Some(r) if *r <= k)).count();
    100.0 * hits as f64 / ranks.len() as f64
}

fn mrr_from_ranks(ranks: &[Option<usize>]) -> f64 {
    let sum: f64 = ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum();
    sum / ranks.len() as f64
}

/// Percentage of queries whose target is within the top `k`.
pub fn recall_at_k(
    rankings: &BTreeMap<String, Ranking>,
    targets: &BTreeMap<String, String>,
    k: usize,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    Ok(recall_from_ranks(&target_ranks(rankings, targets)?, k))
}

/// Mean reciprocal rank over the full candidate list; unranked targets add 0.
pub fn mrr(
    rankings: &BTreeMap<String, Ranking>,
    targets: &BTreeMap<String, String>,
) -> Result<f64, EvalError> {
    Ok(mrr_from_ranks(&target_ranks(rankings, targets)?))
}

/// Mean of R@10 and R@50.
pub fn global_recall(r_at_10: f64, r_at_50: f64) -> f64 {
    (r_at_10 + r_at_50) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecall {
    pub r_at_10: f64,
    pub r_at_50: f64,
}

/// One row of the benchmark table: per-category R@10/R@50, their
/// unweighted averages, and the global recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub per_category: BTreeMap<Category, CategoryRecall>,
    pub avg_r_at_10: f64,
    pub avg_r_at_50: f64,
    pub global: f64,
}

pub fn aggregate(per_category: &BTreeMap<Category, CategoryRecall>) -> Result<TableRow, EvalError> {
    let mut r10 = 0.0;
    let mut r50 = 0.0;
    for cat in Category::BENCHMARK {
        let m = per_category.get(&cat).ok_or(EvalError::MissingCategory(cat))?;
        r10 += m.r_at_10;
        r50 += m.r_at_50;
    }
    let n = Category::BENCHMARK.len() as f64;
    let (avg_r_at_10, avg_r_at_50) = (r10 / n, r50 / n);
    Ok(TableRow {
        per_category: Category::BENCHMARK
            .iter()
            .map(|c| (*c, per_category[c]))
            .collect(),
        avg_r_at_10,
        avg_r_at_50,
        global: global_recall(avg_r_at_10, avg_r_at_50),
    })
}

impl TableRow {
    /// Plain-text table: categories, then Average, then Global.
    pub fn render(&self, label: &str) -> String {
        let mut header1 = format!("{:<24}", "");
        let mut header2 = format!("{:<24}", "Method");
        let mut row = format!("{label:<24}");
        for cat in Category::BENCHMARK {
            let name = match cat {
                Category::Dress => "Dress",
                Category::Shirt => "Shirt",
                Category::Toptee => "Toptee",
                Category::Other => "Other",
            };
            let m = self.per_category[&cat];
            let _ = write!(header1, " {name:^15}");
            let _ = write!(header2, " {:>7} {:>7}", "R@10", "R@50");
            let _ = write!(row, " {:>7.2} {:>7.2}", m.r_at_10, m.r_at_50);
        }
        let _ = write!(header1, " {:^15} {:>7}", "Average", "");
        let _ = write!(header2, " {:>7} {:>7} {:>7}", "R@10", "R@50", "Global");
        let _ = write!(row, " {:>7.2} {:>7.2} {:>7.2}", self.avg_r_at_10, self.avg_r_at_50, self.global);
        format!("{}\n{}\n{}\n", header1.trim_end(), header2, row)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub num_queries: usize,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub r_at_50: f64,
    pub mrr: f64,
    pub global: f64,
}

impl RetrievalMetrics {
    pub fn compute(
        rankings: &BTreeMap<String, Ranking>,
        targets: &BTreeMap<String, String>,
    ) -> Result<Self, EvalError> {
        let ranks = target_ranks(rankings, targets)?;
        let r10 = recall_from_ranks(&ranks, 10);
        let r50 = recall_from_ranks(&ranks, 50);
        Ok(Self {
            num_queries: ranks.len(),
            r_at_1: recall_from_ranks(&ranks, 1),
            r_at_5: recall_from_ranks(&ranks, 5),
            r_at_10: r10,
            r_at_50: r50,
            mrr: mrr_from_ranks(&ranks),
            global: global_recall(r10, r50),
        })
    }
}

/// Machine-readable evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: RetrievalMetrics,
    pub per_category: BTreeMap<Category, RetrievalMetrics>,
    /// Present when all three benchmark categories were evaluated.
    pub table: Option<TableRow>,
}

impl MetricsReport {
    pub fn compute(
        rankings: &BTreeMap<String, Ranking>,
        targets: &BTreeMap<String, String>,
        categories: &BTreeMap<String, Category>,
    ) -> Result<Self, EvalError> {
        let overall = RetrievalMetrics::compute(rankings, targets)?;
        let mut grouped: BTreeMap<Category, BTreeMap<String, Ranking>> = BTreeMap::new();
        for (qid, r) in rankings {
            if let Some(cat) = categories.get(qid) {
                grouped.entry(*cat).or_default().insert(qid.clone(), r.clone());
            }
        }
        let per_category = grouped
            .iter()
            .map(|(cat, rs)| Ok((*cat, RetrievalMetrics::compute(rs, targets)?)))
            .collect::<Result<BTreeMap<_, _>, EvalError>>()?;
        let recalls: BTreeMap<Category, CategoryRecall> = per_category
            .iter()
            .map(|(c, m)| (*c, CategoryRecall { r_at_10: m.r_at_10, r_at_50: m.r_at_50 }))
            .collect();
        let table = aggregate(&recalls).ok();
        Ok(Self {
            overall,
            per_category,
            table,
        })
    }

    pub fn render_text(&self, label: &str) -> String {
        let mut out = String::new();
        if let Some(t) = &self.table {
            out.push_str(&t.render(label));
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "Subset", "Queries", "R@1", "R@5", "R@10", "R@50", "MRR", "Global"
        );
        let mut line = |name: &str, m: &RetrievalMetrics| {
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.4} {:>7.2}",
                name, m.num_queries, m.r_at_1, m.r_at_5, m.r_at_10, m.r_at_50, m.mrr, m.global
            );
        };
        for (cat, m) in &self.per_category {
            line(cat.as_str(), m);
        }
        line("all", &self.overall);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc_pr: f64,
    pub auc_roc: f64,
}

fn positives_negatives(predictions: &[(f64, Answer)]) -> Result<(usize, usize), EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyPredictions);
    }
    let pos = predictions.iter().filter(|(_, y)| *y == Answer::Yes).count();
    let neg = predictions.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClassOnly);
    }
    Ok((pos, neg))
}

/// AUC-ROC as the Mann-Whitney rank statistic, with mid-ranks for ties.
pub fn auc_roc_rank(predictions: &[(f64, Answer)]) -> Result<f64, EvalError> {
    let (pos, neg) = positives_negatives(predictions)?;
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[a].0.total_cmp(&predictions[b].0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && predictions[order[j + 1]].0 == predictions[order[i]].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if predictions[idx].1 == Answer::Yes {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Distinct-threshold groups in descending score order: (true positives, false positives).
fn threshold_groups(predictions: &[(f64, Answer)]) -> Vec<(usize, usize)> {
    let mut sorted: Vec<(f64, Answer)> = predictions.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, (score, y)) in sorted.iter().enumerate() {
        match y {
            Answer::Yes => tp += 1,
            Answer::No => fp += 1,
        }
        if i + 1 == sorted.len() || sorted[i + 1].0 != *score {
            out.push((tp, fp));
        }
    }
    out
}

/// AUC-ROC by trapezoidal integration of the ROC curve.
pub fn auc_roc_trapezoid(predictions: &[(f64, Answer)]) -> Result<f64, EvalError> {
    let (pos, neg) = positives_negatives(predictions)?;
    let mut area = 0.0;
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    for (tp, fp) in threshold_groups(predictions) {
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// Area under the precision-recall curve with step interpolation
/// (average precision).
pub fn auc_pr(predictions: &[(f64, Answer)]) -> Result<f64, EvalError> {
    let (pos, _) = positives_negatives(predictions)?;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in threshold_groups(predictions) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Scores are `p_yes`; `Yes` is the positive class, predicted when `p_yes >= 0.5`.
/// Precision with no predicted positives is 0.
pub fn vqa_classifier_metrics(predictions: &[(f64, Answer)]) -> Result<ClassifierMetrics, EvalError> {
    positives_negatives(predictions)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for &(p, y) in predictions {
        match (p >= 0.5, y) {
            (true, Answer::Yes) => tp += 1,
            (true, Answer::No) => fp += 1,
            (false, Answer::No) => tn += 1,
            (false, Answer::Yes) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ClassifierMetrics {
        accuracy: ratio(tp + tn, predictions.len()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        auc_pr: auc_pr(predictions)?,
        auc_roc: auc_roc_rank(predictions)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub average_recall: f64,
    pub requests_issued: u64,
}

/// Evaluates a re-ranking runner at each depth `n`.
///
/// The runner returns the rankings and the number of VQA requests it issued;
/// `average_recall` is the global recall (mean of R@10 and R@50).
pub fn sweep_n<E, F>(
    ns: &[usize],
    targets: &BTreeMap<String, String>,
    mut runner: F,
) -> Result<Vec<SweepPoint>, E>
where
    E: From<EvalError>,
    F: FnMut(usize) -> Result<(BTreeMap<String, Ranking>, u64), E>,
{
    ns.iter()
        .map(|&n| {
            let (rankings, requests_issued) = runner(n)?;
            let m = RetrievalMetrics::compute(&rankings, targets)?;
            Ok(SweepPoint {
                n,
                average_recall: m.global,
                requests_issued,
            })
        })
        .collect()
}
