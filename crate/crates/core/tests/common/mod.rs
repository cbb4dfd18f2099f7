#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use vqarank::clients::{MockVqaBackend, TokenLogprobs, VqaFallback, VqaRequest};
use vqarank::dataset::{self, AnnotationConfig, ImagePool};
use vqarank::formats::{self, RankingRecord, RecordStore};
use vqarank::{CirScore, RerankConfig, RerankEngine, RerankOutput, Triplet, VisualQuestion};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

pub fn read_fixture(rel: &str) -> String {
    let path = fixture(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

pub fn golden_config() -> RerankConfig {
    RerankConfig {
        lambda_vqa: 0.068,
        k: 0.8375,
        n: 4,
        ..RerankConfig::default()
    }
}

/// Per candidate, (p_yes, p_no) for each of the three golden questions, in
/// question order. `None` leaves the token out of the response.
pub type YesNo = (Option<f64>, Option<f64>);

pub const GOLDEN_PROBS: [(&str, [YesNo; 3]); 4] = [
    ("img_a", [(Some(0.05), Some(0.95)), (Some(0.9), Some(0.1)), (Some(0.1), Some(0.9))]),
    ("img_b", [(Some(0.9), Some(0.1)), (Some(0.1), Some(0.9)), (Some(0.8), Some(0.2))]),
    ("img_c", [(Some(0.95), Some(0.05)), (Some(0.05), Some(0.95)), (Some(0.9), None)]),
    ("img_d", [(Some(0.99), Some(0.01)), (Some(0.02), Some(0.98)), (Some(0.97), Some(0.03))]),
];

/// Hand-computed fused scores of the re-ranked candidates.
pub const GOLDEN_FUSED: [(&str, f64, f64, f64); 4] = [
    ("img_a", 1.0, 0.08333333333333334, 1.0371596155773647),
    ("img_b", 0.975, 0.8666666666666667, 1.0392358608084323),
    ("img_c", 0.9625, 0.9333333333333333, 1.0286558070371743),
    ("img_d", 0.95, 0.98, 1.0174547725711344),
];

pub const GOLDEN_ORDER: [&str; 8] = [
    "img_b", "img_a", "img_c", "img_d", "img_e", "img_f", "img_g", "img_h",
];

pub struct GoldenInputs {
    pub triplet: Triplet,
    pub candidates: Vec<CirScore>,
    pub questions: Vec<VisualQuestion>,
}

pub fn golden_inputs() -> GoldenInputs {
    let triplets = formats::load_triplets(&fixture("golden/triplets.jsonl")).unwrap();
    let mut scores = formats::load_cir_scores(&fixture("golden/cir_scores.jsonl")).unwrap();
    let mut corpus = formats::load_question_corpus(&fixture("golden/questions.jsonl")).unwrap();
    let triplet = triplets.into_iter().next().unwrap();
    let qid = triplet.query.query_id.clone();
    GoldenInputs {
        candidates: scores.remove(&qid).unwrap(),
        questions: corpus.remove(&qid).unwrap(),
        triplet,
    }
}

/// Fixture store built from [`GOLDEN_PROBS`].
pub fn golden_store(inputs: &GoldenInputs) -> RecordStore {
    let config = golden_config();
    let store = RecordStore::in_memory();
    for (cand, probs) in GOLDEN_PROBS {
        for (q, (p_yes, p_no)) in inputs.questions.iter().zip(probs) {
            let req = VqaRequest::for_question(
                q,
                &inputs.triplet.query.reference_image_id,
                cand,
                &config.answer_tokens,
            );
            let pairs = [("Yes", p_yes), ("No", p_no)];
            let lp = TokenLogprobs::from_probabilities(
                pairs.into_iter().filter_map(|(t, p)| p.map(|p| (t, p))),
            )
            .unwrap();
            store
                .insert(&req.cache_key(), serde_json::to_value(lp).unwrap())
                .unwrap();
        }
    }
    store
}

pub fn run_golden(inputs: &GoldenInputs, mock: &MockVqaBackend) -> RerankOutput {
    RerankEngine::new(golden_config(), mock)
        .unwrap()
        .rerank(&inputs.triplet.query, &inputs.candidates, &inputs.questions)
        .unwrap()
}

pub fn render_golden(out: &RerankOutput) -> (String, String) {
    let rankings = formats::render_records(
        formats::RANKINGS,
        &[RankingRecord {
            query_id: out.trace.query_id.clone(),
            ranking: out.ranking.clone(),
        }],
    );
    let traces = formats::render_records(formats::TRACES, std::slice::from_ref(&out.trace));
    (rankings, traces)
}

/// Full dataset pipeline over the committed fixture corpus.
pub fn build_fixture_dataset(seed: u64, fan_out: usize) -> (String, dataset::BalanceReport) {
    let triplets = formats::load_triplets(&fixture("dataset/triplets.jsonl")).unwrap();
    let corpus = formats::load_question_corpus(&fixture("dataset/questions.jsonl")).unwrap();
    let index = formats::load_image_index(&fixture("dataset/image_index.jsonl")).unwrap();
    let pool = ImagePool::new(&index);
    let annotator = MockVqaBackend::new(VqaFallback::HashDerived);
    let positives = dataset::positives_from_targets(&triplets, &corpus).unwrap();
    let config = AnnotationConfig {
        seed,
        fan_out,
        ..AnnotationConfig::default()
    };
    let outcome = dataset::sample_and_annotate(&triplets, &corpus, &pool, &annotator, &config).unwrap();
    let (balanced, report) = dataset::balance(&positives, &outcome.examples, seed).unwrap();
    (dataset::render_corpus(&balanced), report)
}

pub fn targets_of(triplets: &[Triplet]) -> BTreeMap<String, String> {
    triplets
        .iter()
        .map(|t| (t.query.query_id.clone(), t.target_image_id.clone()))
        .collect()
}
