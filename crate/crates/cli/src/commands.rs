//! Pipeline stages behind each subcommand.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vqarank::clients::bounded_map;
use vqarank::dataset::{self, AnnotationConfig, BalanceReport, ImagePool};
use vqarank::evaluation::{self, MetricsReport, SweepPoint};
use vqarank::formats::{self, QuestionCorpus, RankingRecord};
use vqarank::question_generation::{self, PromptTemplate, QuestionGenStats, QuestionGenerator};
use vqarank::rerank::base_ranking;
use vqarank::{Category, RerankConfig, RerankEngine, ReasoningTrace, Triplet};

use crate::backends;
use crate::config::Config;
use crate::error::CliError;

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("creating {}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_text(path, &text)
}

pub fn generator(config: &Config) -> Result<QuestionGenerator, CliError> {
    let template = match &config.questions.template {
        Some(p) => PromptTemplate::from_file(p)?,
        None => PromptTemplate::default(),
    };
    Ok(QuestionGenerator::new(template))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionsSummary {
    pub stats: QuestionGenStats,
    pub backend_calls: u64,
}

/// Generates one question list per triplet and writes the question corpus.
pub fn questions(config: &Config, triplets: &Path, out: &Path) -> Result<QuestionsSummary, CliError> {
    let triplets = formats::load_triplets(triplets)?;
    let text = backends::text_role(config)?;
    let generator = generator(config)?;
    let budget = config.questions.retry_budget;
    let results = bounded_map(&triplets, config.rerank.fan_out, |t| {
        generator.generate(&t.query, &*text.backend, budget)
    });
    let mut corpus = QuestionCorpus::new();
    for (t, result) in triplets.iter().zip(results) {
        let qs = result.map_err(|e| CliError::from(e).context(&t.query.query_id))?;
        corpus.insert(t.query.query_id.clone(), qs);
    }
    formats::write_question_corpus(out, &corpus)?;
    Ok(QuestionsSummary {
        stats: question_generation::question_stats(&corpus)?,
        backend_calls: text.calls(),
    })
}

fn categories(triplets: &[Triplet]) -> HashMap<String, Category> {
    triplets
        .iter()
        .map(|t| (t.query.query_id.clone(), t.query.category))
        .collect()
}

/// Positives from targets, annotated negatives, balancing. Writes the corpus
/// and, when given, the balance report.
pub fn build_dataset(
    config: &Config,
    triplets: &Path,
    questions: &Path,
    image_index: &Path,
    out: &Path,
    report_out: Option<&Path>,
) -> Result<BalanceReport, CliError> {
    let triplets = formats::load_triplets(triplets)?;
    let corpus = formats::load_question_corpus(questions)?;
    let index = formats::load_image_index(image_index)?;
    let annotator = backends::annotator_role(config)?;
    let positives = dataset::positives_from_targets(&triplets, &corpus)?;
    let outcome = dataset::sample_and_annotate(
        &triplets,
        &corpus,
        &ImagePool::new(&index),
        &*annotator.backend,
        &AnnotationConfig {
            seed: config.dataset.seed,
            attempt_cap: config.dataset.attempt_cap,
            answer_tokens: config.rerank.answer_tokens.clone(),
            fan_out: config.rerank.fan_out,
        },
    )?;
    if !outcome.exhausted.is_empty() {
        tracing::warn!(
            "{} questions hit the attempt cap without an opposite label",
            outcome.exhausted.len()
        );
    }
    let (balanced, report) = dataset::balance(&positives, &outcome.examples, config.dataset.seed)?;
    let report = report.with_categories(&balanced, &categories(&triplets));
    write_text(out, &dataset::render_corpus(&balanced))?;
    if let Some(path) = report_out {
        write_json(path, &report)?;
    }
    Ok(report)
}

/// Inputs shared by `rerank` and `sweep`: one entry per query, in id order.
pub struct RerankInputs {
    pub triplets: Vec<Triplet>,
    pub scores: BTreeMap<String, Vec<vqarank::CirScore>>,
    pub corpus: QuestionCorpus,
}

impl RerankInputs {
    pub fn load(triplets: &Path, cir_scores: &Path, questions: &Path) -> Result<Self, CliError> {
        let mut triplets = formats::load_triplets(triplets)?;
        triplets.sort_by(|a, b| a.query.query_id.cmp(&b.query.query_id));
        let scores = formats::load_cir_scores(cir_scores)?;
        let corpus = formats::load_question_corpus(questions)?;
        for qid in scores.keys() {
            if !triplets.iter().any(|t| &t.query.query_id == qid) {
                return Err(CliError::Data(format!("CIR scores for unknown query '{qid}'")));
            }
        }
        for t in &triplets {
            let qid = &t.query.query_id;
            if !scores.contains_key(qid) {
                return Err(CliError::Data(format!("no CIR scores for query '{qid}'")));
            }
            if !corpus.get(qid).is_some_and(|qs| !qs.is_empty()) {
                return Err(CliError::Data(format!("no questions for query '{qid}'")));
            }
        }
        Ok(Self {
            triplets,
            scores,
            corpus,
        })
    }

    pub fn targets(&self) -> BTreeMap<String, String> {
        self.triplets
            .iter()
            .map(|t| (t.query.query_id.clone(), t.target_image_id.clone()))
            .collect()
    }
}

pub struct RerankRun {
    pub rankings: Vec<RankingRecord>,
    pub traces: Vec<ReasoningTrace>,
    pub requests_issued: u64,
}

/// Re-ranks every query. `n = 0` keeps the base ranking and issues nothing.
pub fn run_rerank(
    inputs: &RerankInputs,
    rerank: &RerankConfig,
    vqa: &dyn vqarank::clients::VqaBackend,
) -> Result<RerankRun, CliError> {
    let mut run = RerankRun {
        rankings: Vec::new(),
        traces: Vec::new(),
        requests_issued: 0,
    };
    for t in &inputs.triplets {
        let qid = &t.query.query_id;
        let candidates = &inputs.scores[qid];
        if rerank.n == 0 {
            run.rankings.push(RankingRecord {
                query_id: qid.clone(),
                ranking: base_ranking(candidates, rerank)?,
            });
            continue;
        }
        let engine = RerankEngine::new(rerank.clone(), vqa)?;
        let out = engine
            .rerank(&t.query, candidates, &inputs.corpus[qid])
            .map_err(|e| CliError::from(e).context(qid))?;
        run.requests_issued += out.requests_issued as u64;
        run.rankings.push(RankingRecord {
            query_id: qid.clone(),
            ranking: out.ranking,
        });
        run.traces.push(out.trace);
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankSummary {
    pub queries: usize,
    pub requests_issued: u64,
    pub backend_calls: u64,
}

pub fn rerank(
    config: &Config,
    inputs: &RerankInputs,
    rankings_out: &Path,
    traces_out: &Path,
) -> Result<RerankSummary, CliError> {
    let vqa = backends::vqa_role(config)?;
    let run = run_rerank(inputs, &config.rerank, &*vqa.backend)?;
    write_text(rankings_out, &formats::render_records(formats::RANKINGS, &run.rankings))?;
    write_text(traces_out, &formats::render_records(formats::TRACES, &run.traces))?;
    Ok(RerankSummary {
        queries: run.rankings.len(),
        requests_issued: run.requests_issued,
        backend_calls: vqa.calls(),
    })
}

/// Metrics over a rankings file; targets and categories come from triplets.
pub fn eval(rankings: &Path, triplets: &Path, report_out: Option<&Path>) -> Result<MetricsReport, CliError> {
    let rankings = formats::load_rankings(rankings)?;
    let triplets = formats::load_triplets(triplets)?;
    let targets = triplets
        .iter()
        .map(|t| (t.query.query_id.clone(), t.target_image_id.clone()))
        .collect();
    let categories = triplets
        .iter()
        .map(|t| (t.query.query_id.clone(), t.query.category))
        .collect();
    let report = MetricsReport::compute(&rankings, &targets, &categories)?;
    if let Some(path) = report_out {
        write_json(path, &report)?;
    }
    Ok(report)
}

/// Per-question report for one re-ranked candidate.
pub fn trace(traces: &Path, query_id: &str, candidate_id: &str) -> Result<String, CliError> {
    let traces = formats::load_traces(traces)?;
    let trace = traces
        .iter()
        .find(|t| t.query_id == query_id)
        .ok_or_else(|| CliError::NotFound(format!("query '{query_id}' in traces")))?;
    let cand = trace.candidate(candidate_id).ok_or_else(|| {
        CliError::NotFound(format!("candidate '{candidate_id}' in the trace of '{query_id}'"))
    })?;

    let width = cand
        .entries
        .iter()
        .map(|e| e.question.text().chars().count())
        .chain(cand.failed.iter().map(|f| f.question.text().chars().count()))
        .chain(std::iter::once("question".len()))
        .max()
        .unwrap_or(8);
    let mut out = String::new();
    let status = if cand.demoted { "demoted" } else { "re-ranked" };
    let _ = writeln!(out, "query {query_id}, candidate {candidate_id} ({status})");
    let _ = writeln!(out, "{:<width$}  {:<8}  {:<9}  {:>11}  ok", "question", "expected", "predicted", "p(expected)");
    for e in &cand.entries {
        let expected = e.question.expected_answer();
        let _ = writeln!(
            out,
            "{:<width$}  {:<8}  {:<9}  {:>11.6}  {}",
            e.question.text(),
            expected.as_str(),
            e.predicted_answer.as_str(),
            e.probability_of_expected,
            if e.predicted_answer == expected { "yes" } else { "no" }
        );
    }
    for f in &cand.failed {
        let _ = writeln!(out, "{:<width$}  failed: {}", f.question.text(), f.error);
    }
    match (cand.mean_probability(), cand.vqa_score) {
        (Some(mean), Some(score)) => {
            let _ = writeln!(out, "mean p(expected) {mean:.6}, vqa_score {score:.6}");
        }
        (Some(mean), None) => {
            let _ = writeln!(out, "mean p(expected) {mean:.6}, no vqa_score");
        }
        _ => {
            let _ = writeln!(out, "no answered questions");
        }
    }
    Ok(out)
}

/// Average recall and request count per re-ranking depth.
pub fn sweep(config: &Config, inputs: &RerankInputs, ns: &[usize]) -> Result<Vec<SweepPoint>, CliError> {
    let vqa = backends::vqa_role(config)?;
    let targets = inputs.targets();
    evaluation::sweep_n(ns, &targets, |n| {
        let rerank = RerankConfig {
            n,
            ..config.rerank.clone()
        };
        let run = run_rerank(inputs, &rerank, &*vqa.backend)?;
        let rankings = run
            .rankings
            .into_iter()
            .map(|r| (r.query_id, r.ranking))
            .collect();
        Ok((rankings, run.requests_issued))
    })
}

pub fn render_sweep(points: &[SweepPoint]) -> String {
    let mut out = format!("{:>6}  {:>14}  {:>9}\n", "n", "average recall", "requests");
    for p in points {
        let _ = writeln!(out, "{:>6}  {:>14.2}  {:>9}", p.n, p.average_recall, p.requests_issued);
    }
    out
}

impl CliError {
    fn context(self, query_id: &str) -> CliError {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("query '{query_id}': {m}")),
            CliError::Data(m) => CliError::Data(format!("query '{query_id}': {m}")),
            CliError::NotFound(m) => CliError::NotFound(m),
            CliError::Backend(m) => CliError::Backend(format!("query '{query_id}': {m}")),
        }
    }
}

pub fn write_sweep(path: &Path, points: &[SweepPoint]) -> Result<(), CliError> {
    write_json(path, &points)
}
