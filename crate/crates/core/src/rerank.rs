//! Per-query re-ranking: top-n selection, VQA scoring, fusion.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::clients::{answer_batch, ClientError, VqaBackend, VqaRequest};
use crate::domain::{
    rank_order, CandidateScore, CandidateTrace, CirScore, DomainError, FailedQuestion, Ranking,
    ReasoningTrace, RerankConfig, RetrievalQuery, TraceEntry, VisualQuestion,
};
use crate::scoring::{self, ScoringError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RerankError {
    #[error("no questions for query '{0}'")]
    EmptyQuestionSet(String),
    #[error("no candidates for query '{0}'")]
    EmptyCandidateSet(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("VQA backend unavailable for every re-ranked candidate: {0}")]
    BackendUnavailable(ClientError),
}

/// Splits candidates into the `n` best by raw base score and the rest.
///
/// Both halves are ordered by descending score, ties by ascending id.
pub fn select_top_n(candidates: &[CirScore], n: usize) -> (Vec<CirScore>, Vec<CirScore>) {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| rank_order(a.score, &a.candidate_id, b.score, &b.candidate_id));
    let rest = sorted.split_off(n.min(sorted.len()));
    (sorted, rest)
}

/// Result of scoring one candidate's questions.
#[derive(Debug, Clone, PartialEq)]
pub enum CandidateOutcome {
    Scored { vqa_score: f64 },
    /// Half or more of the questions failed; the candidate keeps its base score.
    Demoted,
}

/// Decides a candidate's fate from its per-question probabilities.
///
/// Failed questions are dropped from the mean unless at least half failed.
pub fn failure_policy(
    probabilities: &[Result<f64, String>],
) -> Result<CandidateOutcome, ScoringError> {
    let failed = probabilities.iter().filter(|p| p.is_err()).count();
    if probabilities.is_empty() {
        return Err(ScoringError::EmptyQuestionSet);
    }
    if failed * 2 >= probabilities.len() {
        return Ok(CandidateOutcome::Demoted);
    }
    let ok: Vec<f64> = probabilities.iter().filter_map(|p| p.as_ref().ok().copied()).collect();
    Ok(CandidateOutcome::Scored {
        vqa_score: scoring::vqa_score(&ok)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutput {
    pub ranking: Ranking,
    pub trace: ReasoningTrace,
    /// VQA requests issued for this query.
    pub requests_issued: usize,
}

/// Re-ranks one query's candidates with a VQA backend.
pub struct RerankEngine<'a> {
    config: RerankConfig,
    vqa: &'a dyn VqaBackend,
}

impl<'a> RerankEngine<'a> {
    pub fn new(config: RerankConfig, vqa: &'a dyn VqaBackend) -> Result<Self, RerankError> {
        config.validate()?;
        Ok(Self { config, vqa })
    }

    pub fn config(&self) -> &RerankConfig {
        &self.config
    }

    /// Builds one request per (top-n candidate, question), candidate-major.
    pub fn build_requests(
        &self,
        query: &RetrievalQuery,
        top: &[CirScore],
        questions: &[VisualQuestion],
    ) -> Vec<VqaRequest> {
        top.iter()
            .flat_map(|c| {
                questions.iter().map(move |q| {
                    VqaRequest::for_question(
                        q,
                        &query.reference_image_id,
                        &c.candidate_id,
                        &self.config.answer_tokens,
                    )
                })
            })
            .collect()
    }

    pub fn rerank(
        &self,
        query: &RetrievalQuery,
        candidates: &[CirScore],
        questions: &[VisualQuestion],
    ) -> Result<RerankOutput, RerankError> {
        if questions.is_empty() {
            return Err(RerankError::EmptyQuestionSet(query.query_id.clone()));
        }
        if candidates.is_empty() {
            return Err(RerankError::EmptyCandidateSet(query.query_id.clone()));
        }
        let mut seen = HashSet::with_capacity(candidates.len());
        for c in candidates {
            if !seen.insert(c.candidate_id.as_str()) {
                return Err(DomainError::DuplicateCandidateId(c.candidate_id.clone()).into());
            }
        }

        let raw: Vec<f64> = candidates.iter().map(|c| c.score).collect();
        let norm = scoring::normalize_cir(&raw, self.config.normalization)?;
        let norm_by_id: HashMap<&str, f64> = candidates
            .iter()
            .map(|c| c.candidate_id.as_str())
            .zip(norm.iter().copied())
            .collect();
        let norm_of = |id: &str| -> f64 { norm_by_id[id] };

        let (top, rest) = select_top_n(candidates, self.config.n);
        let requests = self.build_requests(query, &top, questions);
        let responses = answer_batch(self.vqa, &requests, self.config.fan_out);

        let mut scores = Vec::with_capacity(candidates.len());
        let mut traces = Vec::with_capacity(top.len());
        let mut last_transport_error = None;
        let mut all_demoted_by_transport = true;

        for (cand, chunk) in top.iter().zip(responses.chunks(questions.len())) {
            let mut entries = Vec::new();
            let mut failed = Vec::new();
            let mut probs = Vec::with_capacity(questions.len());
            let mut transport_failures = 0;
            for (q, resp) in questions.iter().zip(chunk) {
                let answered = resp.clone().and_then(|lp| {
                    scoring::answer_probability(&lp, &self.config.answer_tokens, q.expected_answer())
                        .map_err(|_| ClientError::MissingBothAnswerTokens)
                });
                match answered {
                    Ok((p, p_expected)) => {
                        entries.push(TraceEntry {
                            question: q.clone(),
                            predicted_answer: p.predicted(),
                            probability_of_expected: p_expected,
                        });
                        probs.push(Ok(p_expected));
                    }
                    Err(e) => {
                        if e.is_transport() {
                            transport_failures += 1;
                            last_transport_error = Some(e.clone());
                        }
                        failed.push(FailedQuestion {
                            question: q.clone(),
                            error: e.to_string(),
                        });
                        probs.push(Err(e.to_string()));
                    }
                }
            }

            let cir_norm = norm_of(&cand.candidate_id);
            let outcome = failure_policy(&probs)?;
            let (score, vqa_score, demoted) = match outcome {
                CandidateOutcome::Scored { vqa_score } => {
                    all_demoted_by_transport = false;
                    let fused = scoring::fuse(cir_norm, vqa_score, &self.config)?;
                    (
                        CandidateScore::fused(&cand.candidate_id, cand.score, cir_norm, vqa_score, fused),
                        Some(vqa_score),
                        false,
                    )
                }
                CandidateOutcome::Demoted => {
                    if transport_failures == 0 {
                        all_demoted_by_transport = false;
                    }
                    tracing::warn!(
                        query = %query.query_id,
                        candidate = %cand.candidate_id,
                        "{} of {} questions failed; keeping base score",
                        failed.len(),
                        questions.len()
                    );
                    (CandidateScore::plain(&cand.candidate_id, cand.score, cir_norm), None, true)
                }
            };
            scores.push(score);
            traces.push(CandidateTrace {
                candidate_image_id: cand.candidate_id.clone(),
                entries,
                failed,
                demoted,
                vqa_score,
            });
        }

        if !top.is_empty() && all_demoted_by_transport {
            if let Some(e) = last_transport_error {
                return Err(RerankError::BackendUnavailable(e));
            }
        }

        for c in &rest {
            scores.push(CandidateScore::plain(&c.candidate_id, c.score, norm_of(&c.candidate_id)));
        }

        Ok(RerankOutput {
            ranking: Ranking::from_scores(scores),
            trace: ReasoningTrace {
                query_id: query.query_id.clone(),
                candidates: traces,
            },
            requests_issued: requests.len(),
        })
    }
}

/// Ranking by normalized base score alone.
pub fn base_ranking(candidates: &[CirScore], config: &RerankConfig) -> Result<Ranking, RerankError> {
    let raw: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    let norm = scoring::normalize_cir(&raw, config.normalization)?;
    Ok(Ranking::from_scores(
        candidates
            .iter()
            .zip(norm)
            .map(|(c, n)| CandidateScore::plain(&c.candidate_id, c.score, n))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{Instrumented, MockVqaBackend, TokenLogprobs, VqaFallback};
    use crate::domain::{Answer, Category};

    fn cands(scores: &[(&str, f64)]) -> Vec<CirScore> {
        scores.iter().map(|(id, s)| CirScore::new(*id, *s)).collect()
    }

    fn query() -> RetrievalQuery {
        RetrievalQuery {
            query_id: "q".into(),
            reference_image_id: "ref".into(),
            modification_text: "is red".into(),
            category: Category::Shirt,
        }
    }

    fn questions() -> Vec<VisualQuestion> {
        vec![
            VisualQuestion::new("Is it red?", Answer::Yes, false).unwrap(),
            VisualQuestion::new("Is it longer than the reference?", Answer::Yes, true).unwrap(),
        ]
    }

    #[test]
    fn selects_top_n() {
        let c = cands(&[("a", 0.1), ("b", 0.5), ("c", 0.3), ("d", 0.9), ("e", 0.2)]);
        let (top, rest) = select_top_n(&c, 2);
        let ids: Vec<_> = top.iter().map(|c| c.candidate_id.as_str()).collect();
        assert_eq!(ids, ["d", "b"]);
        assert_eq!(rest.len(), 3);
    }

    #[test]
    fn top_n_saturates() {
        let c: Vec<_> = (0..100).map(|i| CirScore::new(format!("c{i}"), i as f64)).collect();
        let (top, rest) = select_top_n(&c, 250);
        assert_eq!(top.len(), 100);
        assert!(rest.is_empty());
    }

    #[test]
    fn top_n_tie_at_cutoff() {
        let c = cands(&[("z", 0.9), ("b", 0.5), ("a", 0.5)]);
        let (top, rest) = select_top_n(&c, 2);
        assert_eq!(top[1].candidate_id, "a");
        assert_eq!(rest[0].candidate_id, "b");
    }

    #[test]
    fn failure_policy_rules() {
        let p = [Ok(0.9), Err("x".to_string()), Ok(0.8), Ok(0.7)];
        match failure_policy(&p).unwrap() {
            CandidateOutcome::Scored { vqa_score } => assert!((vqa_score - 0.8).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        let p = [Ok(0.9), Err("x".into()), Err("x".into()), Err("x".into())];
        assert_eq!(failure_policy(&p).unwrap(), CandidateOutcome::Demoted);
        let p = [Ok(0.5), Err("x".into())];
        assert_eq!(failure_policy(&p).unwrap(), CandidateOutcome::Demoted);
        let p = [Ok(0.9), Ok(0.6), Ok(0.9)];
        assert_eq!(
            failure_policy(&p).unwrap(),
            CandidateOutcome::Scored { vqa_score: scoring::vqa_score(&[0.9, 0.6, 0.9]).unwrap() }
        );
    }

    #[test]
    fn routes_single_and_dual_requests() {
        let mock = MockVqaBackend::new(VqaFallback::HashDerived);
        let engine = RerankEngine::new(RerankConfig { n: 2, ..Default::default() }, &mock).unwrap();
        let c = cands(&[("a", 0.9), ("b", 0.5), ("c", 0.1)]);
        let (top, _) = select_top_n(&c, 2);
        let reqs = engine.build_requests(&query(), &top, &questions());
        assert_eq!(reqs.len(), 4);
        assert_eq!(reqs[0].image_refs, ["a"]);
        assert_eq!(reqs[1].image_refs, ["ref", "a"]);
    }

    #[test]
    fn request_count_is_candidates_times_questions() {
        let mock = Instrumented::new(MockVqaBackend::new(VqaFallback::HashDerived));
        let engine = RerankEngine::new(RerankConfig { n: 3, ..Default::default() }, &mock).unwrap();
        let c: Vec<_> = (0..10).map(|i| CirScore::new(format!("c{i}"), i as f64)).collect();
        let out = engine.rerank(&query(), &c, &questions()).unwrap();
        assert_eq!(mock.calls(), 6);
        assert_eq!(out.requests_issued, 6);
        assert_eq!(out.ranking.len(), 10);
        assert_eq!(out.ranking.entries().iter().filter(|e| e.reranked).count(), 3);
    }

    struct Down;

    impl VqaBackend for Down {
        fn answer_logprobs(&self, _: &VqaRequest) -> Result<TokenLogprobs, ClientError> {
            Err(ClientError::BackendUnavailable("down".into()))
        }
    }

    #[test]
    fn total_backend_failure_is_an_error() {
        let engine = RerankEngine::new(RerankConfig { n: 2, ..Default::default() }, &Down).unwrap();
        let c = cands(&[("a", 0.9), ("b", 0.5)]);
        assert!(matches!(
            engine.rerank(&query(), &c, &questions()),
            Err(RerankError::BackendUnavailable(_))
        ));
    }

    #[test]
    fn empty_questions_rejected() {
        let mock = MockVqaBackend::new(VqaFallback::HashDerived);
        let engine = RerankEngine::new(RerankConfig::default(), &mock).unwrap();
        assert!(matches!(
            engine.rerank(&query(), &cands(&[("a", 1.0)]), &[]),
            Err(RerankError::EmptyQuestionSet(_))
        ));
    }

    #[test]
    fn demoted_candidate_is_flagged() {
        let mut mock = MockVqaBackend::strict();
        let qs = questions();
        let t = RerankConfig::default().answer_tokens;
        // Only one of two questions answered for "a": half failed -> demoted.
        mock.register_probs(&VqaRequest::for_question(&qs[0], "ref", "a", &t), Some(0.9), Some(0.1));
        for q in &qs {
            mock.register_probs(&VqaRequest::for_question(q, "ref", "b", &t), Some(0.9), Some(0.1));
        }
        let engine = RerankEngine::new(RerankConfig { n: 2, ..Default::default() }, &mock).unwrap();
        let out = engine.rerank(&query(), &cands(&[("a", 0.9), ("b", 0.5)]), &qs).unwrap();
        let ta = out.trace.candidate("a").unwrap();
        assert!(ta.demoted);
        assert_eq!(ta.failed.len(), 1);
        let sa = out.ranking.get("a").unwrap();
        assert!(!sa.reranked);
        assert_eq!(sa.fused_score, sa.cir_score_norm);
        assert!(out.ranking.get("b").unwrap().reranked);
    }
}
