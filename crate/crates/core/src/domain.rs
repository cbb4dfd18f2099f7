//! Core data model: queries, candidates, questions, scores, rankings and traces.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Connector used to join the two Fashion IQ captions into one modification text.
pub const CAPTION_CONNECTOR: &str = ", and ";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("modification text of query '{0}' is empty")]
    EmptyModificationText(String),
    #[error("duplicate query id '{0}'")]
    DuplicateQueryId(String),
    #[error("unknown category '{0}'")]
    UnknownCategory(String),
    #[error("duplicate candidate id '{0}'")]
    DuplicateCandidateId(String),
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error("question text must be a non-empty single line ending with '?': {0:?}")]
    NotAQuestion(String),
    #[error("invalid expected answer '{0}' (must be Yes or No)")]
    InvalidExpectedAnswer(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Dress,
    Shirt,
    Toptee,
    Other,
}

impl Category {
    pub const BENCHMARK: [Category; 3] = [Category::Dress, Category::Shirt, Category::Toptee];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Dress => "dress",
            Category::Shirt => "shirt",
            Category::Toptee => "toptee",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dress" => Ok(Category::Dress),
            "shirt" => Ok(Category::Shirt),
            "toptee" => Ok(Category::Toptee),
            "other" => Ok(Category::Other),
            _ => Err(DomainError::UnknownCategory(s.to_string())),
        }
    }
}

/// A yes/no answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "Yes",
            Answer::No => "No",
        }
    }

    pub fn opposite(self) -> Answer {
        match self {
            Answer::Yes => Answer::No,
            Answer::No => Answer::Yes,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Answer {
    type Err = DomainError;

    /// Case-insensitive, surrounding whitespace ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("yes") {
            Ok(Answer::Yes)
        } else if t.eq_ignore_ascii_case("no") {
            Ok(Answer::No)
        } else {
            Err(DomainError::InvalidExpectedAnswer(s.to_string()))
        }
    }
}

/// Unvalidated query record, as read from an ingestion file or request body.
///
/// Either `modification_text` or `captions` must be given; captions are joined
/// with [`CAPTION_CONNECTOR`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawQueryRecord {
    pub query_id: String,
    pub reference_image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modification_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<String>>,
    pub category: String,
}

impl RawQueryRecord {
    pub fn joined_text(&self) -> String {
        match (&self.modification_text, &self.captions) {
            (Some(text), _) => text.trim().to_string(),
            (None, Some(caps)) => caps
                .iter()
                .map(|c| c.trim())
                .filter(|c| !c.is_empty())
                .collect::<Vec<_>>()
                .join(CAPTION_CONNECTOR),
            (None, None) => String::new(),
        }
    }
}

/// A composed-retrieval query: reference image plus modification text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub query_id: String,
    pub reference_image_id: String,
    pub modification_text: String,
    pub category: Category,
}

impl RetrievalQuery {
    /// Validates a single record without the cross-record uniqueness check.
    pub fn from_raw(raw: &RawQueryRecord) -> Result<Self, DomainError> {
        let category: Category = raw.category.parse()?;
        let text = raw.joined_text();
        if text.is_empty() {
            return Err(DomainError::EmptyModificationText(raw.query_id.clone()));
        }
        Ok(Self {
            query_id: raw.query_id.clone(),
            reference_image_id: raw.reference_image_id.clone(),
            modification_text: text,
            category,
        })
    }
}

/// A query with its annotated target image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub query: RetrievalQuery,
    pub target_image_id: String,
}

/// Validates raw query records, enforcing query-id uniqueness across one run.
#[derive(Debug, Default)]
pub struct QueryValidator {
    seen: HashSet<String>,
}

impl QueryValidator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn validate(&mut self, raw: &RawQueryRecord) -> Result<RetrievalQuery, DomainError> {
        let query = RetrievalQuery::from_raw(raw)?;
        if !self.seen.insert(query.query_id.clone()) {
            return Err(DomainError::DuplicateQueryId(query.query_id));
        }
        Ok(query)
    }
}

/// Ordered set of unique candidate image ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    candidates: Vec<String>,
}

impl CandidateSet {
    pub fn new(candidates: Vec<String>) -> Result<Self, DomainError> {
        if candidates.is_empty() {
            return Err(DomainError::EmptyCandidateSet);
        }
        let mut seen = HashSet::with_capacity(candidates.len());
        for id in &candidates {
            if !seen.insert(id.as_str()) {
                return Err(DomainError::DuplicateCandidateId(id.clone()));
            }
        }
        Ok(Self { candidates })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.candidates
    }
}

/// Base retrieval score of one candidate for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirScore {
    pub candidate_id: String,
    pub score: f64,
}

impl CirScore {
    pub fn new(candidate_id: impl Into<String>, score: f64) -> Self {
        Self {
            candidate_id: candidate_id.into(),
            score,
        }
    }
}

/// A yes/no question derived from the modification text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawQuestion", into = "RawQuestion")]
pub struct VisualQuestion {
    text: String,
    expected_answer: Answer,
    needs_reference: bool,
}

#[derive(Serialize, Deserialize)]
struct RawQuestion {
    text: String,
    expected_answer: Answer,
    needs_reference: bool,
}

impl TryFrom<RawQuestion> for VisualQuestion {
    type Error = DomainError;

    fn try_from(raw: RawQuestion) -> Result<Self, Self::Error> {
        VisualQuestion::new(raw.text, raw.expected_answer, raw.needs_reference)
    }
}

impl From<VisualQuestion> for RawQuestion {
    fn from(q: VisualQuestion) -> Self {
        RawQuestion {
            text: q.text,
            expected_answer: q.expected_answer,
            needs_reference: q.needs_reference,
        }
    }
}

impl VisualQuestion {
    /// The text is trimmed; it must be a single line ending with `?`.
    pub fn new(
        text: impl Into<String>,
        expected_answer: Answer,
        needs_reference: bool,
    ) -> Result<Self, DomainError> {
        let text: String = text.into();
        let trimmed = text.trim();
        if trimmed.len() < 2 || !trimmed.ends_with('?') || trimmed.chars().any(char::is_control) {
            return Err(DomainError::NotAQuestion(text));
        }
        Ok(Self {
            text: trimmed.to_string(),
            expected_answer,
            needs_reference,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn expected_answer(&self) -> Answer {
        self.expected_answer
    }

    pub fn needs_reference(&self) -> bool {
        self.needs_reference
    }

    /// Case- and whitespace-insensitive identity used for de-duplication.
    pub fn dedup_key(&self) -> String {
        self.text
            .split_whitespace()
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Renormalized probabilities of the two answers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerProbability {
    pub p_yes: f64,
    pub p_no: f64,
}

impl AnswerProbability {
    pub fn of(&self, answer: Answer) -> f64 {
        match answer {
            Answer::Yes => self.p_yes,
            Answer::No => self.p_no,
        }
    }

    /// Ties resolve to `Yes`.
    pub fn predicted(&self) -> Answer {
        if self.p_yes >= self.p_no {
            Answer::Yes
        } else {
            Answer::No
        }
    }
}

/// Score record of one candidate after (optional) re-ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate_image_id: String,
    pub cir_score_raw: f64,
    pub cir_score_norm: f64,
    pub vqa_score: Option<f64>,
    pub fused_score: f64,
    pub reranked: bool,
}

impl CandidateScore {
    /// A candidate that keeps its normalized base score.
    pub fn plain(id: impl Into<String>, raw: f64, norm: f64) -> Self {
        Self {
            candidate_image_id: id.into(),
            cir_score_raw: raw,
            cir_score_norm: norm,
            vqa_score: None,
            fused_score: norm,
            reranked: false,
        }
    }

    pub fn fused(id: impl Into<String>, raw: f64, norm: f64, vqa: f64, fused: f64) -> Self {
        Self {
            candidate_image_id: id.into(),
            cir_score_raw: raw,
            cir_score_norm: norm,
            vqa_score: Some(vqa),
            fused_score: fused,
            reranked: true,
        }
    }
}

/// Descending by score, then ascending lexicographic id.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_id.cmp(b_id))
}

/// Final ordering of candidates for one query.
///
/// Sorted by `fused_score` descending; equal scores are ordered by ascending
/// candidate id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ranking {
    entries: Vec<CandidateScore>,
}

impl Ranking {
    pub fn from_scores(mut entries: Vec<CandidateScore>) -> Self {
        entries.sort_by(|a, b| {
            rank_order(
                a.fused_score,
                &a.candidate_image_id,
                b.fused_score,
                &b.candidate_image_id,
            )
        });
        Self { entries }
    }

    pub fn entries(&self) -> &[CandidateScore] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.candidate_image_id.as_str())
    }

    /// 1-based rank of `candidate_id`, if present.
    pub fn rank_of(&self, candidate_id: &str) -> Option<usize> {
        self.ids().position(|id| id == candidate_id).map(|p| p + 1)
    }

    pub fn get(&self, candidate_id: &str) -> Option<&CandidateScore> {
        self.entries
            .iter()
            .find(|e| e.candidate_image_id == candidate_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    MinMax,
}

/// Token strings the VQA backend emits for the two answers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnswerTokens {
    pub yes: String,
    pub no: String,
}

impl AnswerTokens {
    pub fn token(&self, answer: Answer) -> &str {
        match answer {
            Answer::Yes => &self.yes,
            Answer::No => &self.no,
        }
    }
}

impl Default for AnswerTokens {
    fn default() -> Self {
        Self {
            yes: "Yes".to_string(),
            no: "No".to_string(),
        }
    }
}

pub const DEFAULT_LAMBDA_VQA: f64 = 0.068;
pub const DEFAULT_K: f64 = 0.8375;
pub const DEFAULT_N: usize = 250;
pub const DEFAULT_FAN_OUT: usize = 8;

/// Re-ranking parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    /// Weight of the compressed VQA score in the fused score.
    pub lambda_vqa: f64,
    /// Steepness parameter of the VQA score compression.
    pub k: f64,
    /// Number of top base-ranked candidates that get a VQA score.
    pub n: usize,
    pub normalization: Normalization,
    pub answer_tokens: AnswerTokens,
    /// Maximum in-flight VQA requests per rerank call.
    pub fan_out: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            lambda_vqa: DEFAULT_LAMBDA_VQA,
            k: DEFAULT_K,
            n: DEFAULT_N,
            normalization: Normalization::MinMax,
            answer_tokens: AnswerTokens::default(),
            fan_out: DEFAULT_FAN_OUT,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.n < 1 {
            return Err(DomainError::InvalidConfig("n must be >= 1".into()));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(DomainError::InvalidConfig("k must be a positive finite number".into()));
        }
        if !(self.lambda_vqa >= 0.0 && self.lambda_vqa.is_finite()) {
            return Err(DomainError::InvalidConfig(
                "lambda_vqa must be a non-negative finite number".into(),
            ));
        }
        if self.fan_out < 1 {
            return Err(DomainError::InvalidConfig("fan_out must be >= 1".into()));
        }
        if self.answer_tokens.yes == self.answer_tokens.no {
            return Err(DomainError::InvalidConfig("answer tokens must differ".into()));
        }
        Ok(())
    }
}

/// One answered question for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub question: VisualQuestion,
    pub predicted_answer: Answer,
    pub probability_of_expected: f64,
}

/// A question whose VQA request failed for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedQuestion {
    pub question: VisualQuestion,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub candidate_image_id: String,
    pub entries: Vec<TraceEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<FailedQuestion>,
    /// Set when too many questions failed and the candidate kept its base score.
    #[serde(default)]
    pub demoted: bool,
    pub vqa_score: Option<f64>,
}

impl CandidateTrace {
    pub fn mean_probability(&self) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        let sum: f64 = self.entries.iter().map(|e| e.probability_of_expected).sum();
        Some(sum / self.entries.len() as f64)
    }
}

/// Per-question answers behind a query's re-ranking decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub query_id: String,
    pub candidates: Vec<CandidateTrace>,
}

impl ReasoningTrace {
    pub fn candidate(&self, candidate_id: &str) -> Option<&CandidateTrace> {
        self.candidates
            .iter()
            .find(|c| c.candidate_image_id == candidate_id)
    }
}
