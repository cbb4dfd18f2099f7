//! Decomposing a modification text into yes/no visual questions.
//!
//! The text backend is asked for a fenced block tagged `questions` with one
//! record per line:
//!
//! ```text
//! Is the garment black? | Yes | false
//! ```
//!
//! Fields are the question, the expected answer and whether the reference
//! image is needed. Inside a field `\|`, `\\` and `` \` `` escape the
//! delimiter, the backslash and the backtick.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, TextBackend, TextGenRequest};
use crate::domain::{Answer, DomainError, RetrievalQuery, VisualQuestion};

pub const DEFAULT_TEMPLATE: &str = include_str!("../prompts/question_generation.v1.txt");
pub const TEMPLATE_VERSION: &str = "question_generation.v1";
pub const MAX_QUESTIONS: usize = 10;
pub const FENCE_TAG: &str = "questions";

const PH_EXAMPLE_TEXT: &str = "{{example_text}}";
const PH_EXAMPLE_OUTPUT: &str = "{{example_output}}";
const PH_TARGET_TEXT: &str = "{{target_text}}";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuestionGenError {
    #[error("malformed question list: {0}")]
    ParseError(String),
    #[error("question list is empty")]
    EmptyQuestionList,
    #[error("invalid expected answer {0:?} (must be Yes or No)")]
    InvalidExpectedAnswer(String),
    #[error("not a question: {0:?}")]
    NotAQuestion(String),
    #[error("text backend unavailable: {0}")]
    BackendUnavailable(ClientError),
    #[error("gave up after {attempts} attempts; last error: {last}")]
    ExhaustedRetries {
        attempts: u32,
        last: Box<QuestionGenError>,
    },
    #[error("question corpus is empty")]
    EmptyCorpus,
    #[error("invalid prompt template: {0}")]
    Template(String),
}

impl QuestionGenError {
    /// Errors caused by the shape of the backend's output.
    pub fn is_output_error(&self) -> bool {
        matches!(
            self,
            QuestionGenError::ParseError(_)
                | QuestionGenError::EmptyQuestionList
                | QuestionGenError::InvalidExpectedAnswer(_)
                | QuestionGenError::NotAQuestion(_)
        )
    }
}

/// Prompt template with `{{example_text}}`, `{{example_output}}` and
/// `{{target_text}}` placeholders, each exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, QuestionGenError> {
        for ph in [PH_EXAMPLE_TEXT, PH_EXAMPLE_OUTPUT, PH_TARGET_TEXT] {
            let n = text.matches(ph).count();
            if n != 1 {
                return Err(QuestionGenError::Template(format!(
                    "placeholder {ph} must appear exactly once (found {n})"
                )));
            }
        }
        Ok(Self {
            text: text.to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, QuestionGenError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| QuestionGenError::Template(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// The worked example shown to the text backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InContextExample {
    pub modification_text: String,
    pub questions: Vec<VisualQuestion>,
}

impl Default for InContextExample {
    fn default() -> Self {
        let q = |t: &str, a, r| VisualQuestion::new(t, a, r).expect("static question");
        Self {
            modification_text: "is black with no sleeves and longer than the reference".into(),
            questions: vec![
                q("Is the garment black?", Answer::Yes, false),
                q("Does the garment have sleeves?", Answer::No, false),
                q("Is the garment longer than in the reference image?", Answer::Yes, true),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionGenPrompt {
    pub system_instructions: PromptTemplate,
    pub in_context_example: InContextExample,
    pub target_text: String,
}

impl QuestionGenPrompt {
    /// Single-pass placeholder substitution; substituted text is never
    /// re-scanned for placeholders.
    pub fn render(&self) -> String {
        let example_output = serialize_question_list(&self.in_context_example.questions);
        let mut out = String::with_capacity(self.system_instructions.text.len() + 256);
        let mut rest = self.system_instructions.text.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let tail = &rest[start..];
            let (value, len) = if tail.starts_with(PH_EXAMPLE_TEXT) {
                (escape_inline(&self.in_context_example.modification_text), PH_EXAMPLE_TEXT.len())
            } else if tail.starts_with(PH_EXAMPLE_OUTPUT) {
                (example_output.trim_end().to_string(), PH_EXAMPLE_OUTPUT.len())
            } else if tail.starts_with(PH_TARGET_TEXT) {
                (escape_inline(&self.target_text), PH_TARGET_TEXT.len())
            } else {
                ("{{".to_string(), 2)
            };
            out.push_str(&value);
            rest = &tail[len..];
        }
        out.push_str(rest);
        out
    }
}

/// Escapes the record delimiters and folds line breaks into spaces so user
/// text cannot open, close or forge records.
pub fn escape_inline(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '|' => out.push_str("\\|"),
            '`' => out.push_str("\\`"),
            '\n' | '\r' => out.push(' '),
            c if c.is_control() => {}
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some(n @ ('\\' | '|' | '`')) => out.push(n),
                Some(n) => {
                    out.push('\\');
                    out.push(n);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Splits on unescaped `|`, leaving escapes in place.
fn split_fields(line: &str) -> Vec<&str> {
    let mut fields = Vec::new();
    let mut start = 0;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        if escaped {
            escaped = false;
        } else if c == '\\' {
            escaped = true;
        } else if c == '|' {
            fields.push(&line[start..i]);
            start = i + 1;
        }
    }
    fields.push(&line[start..]);
    fields
}

pub fn serialize_question_list(questions: &[VisualQuestion]) -> String {
    let mut out = format!("```{FENCE_TAG}\n");
    for q in questions {
        out.push_str(&format!(
            "{} | {} | {}\n",
            escape_inline(q.text()),
            q.expected_answer(),
            q.needs_reference()
        ));
    }
    out.push_str("```\n");
    out
}

fn parse_flag(field: &str) -> Option<bool> {
    match field.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" => Some(true),
        "false" | "no" => Some(false),
        _ => None,
    }
}

/// Extracts the fenced block's lines.
fn fenced_block(text: &str) -> Result<Vec<&str>, QuestionGenError> {
    let mut lines = text.lines();
    loop {
        let line = lines.next().ok_or_else(|| {
            QuestionGenError::ParseError(format!("no ```{FENCE_TAG} block found"))
        })?;
        let t = line.trim();
        if let Some(tag) = t.strip_prefix("```") {
            if tag.trim().eq_ignore_ascii_case(FENCE_TAG) {
                break;
            }
        }
    }
    let mut body = Vec::new();
    for line in lines {
        if line.trim_start().starts_with("```") {
            return Ok(body);
        }
        body.push(line);
    }
    Err(QuestionGenError::ParseError(format!(
        "unterminated ```{FENCE_TAG} block"
    )))
}

/// Parses and validates a backend completion.
///
/// Repeated questions (case- and whitespace-insensitive) keep their first
/// occurrence; anything past [`MAX_QUESTIONS`] is dropped with a warning.
pub fn parse_question_list(output: &str) -> Result<Vec<VisualQuestion>, QuestionGenError> {
    let mut seen = HashSet::new();
    let mut questions = Vec::new();
    let mut dropped = 0usize;
    for (i, line) in fenced_block(output)?.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(line);
        if fields.len() != 3 {
            return Err(QuestionGenError::ParseError(format!(
                "record {} has {} fields, expected 3: {line:?}",
                i + 1,
                fields.len()
            )));
        }
        let text = unescape_field(fields[0].trim());
        let answer: Answer = fields[1].parse().map_err(|e| match e {
            DomainError::InvalidExpectedAnswer(a) => QuestionGenError::InvalidExpectedAnswer(a.trim().into()),
            other => QuestionGenError::ParseError(other.to_string()),
        })?;
        let needs_reference = parse_flag(fields[2]).ok_or_else(|| {
            QuestionGenError::ParseError(format!(
                "record {}: reference flag must be true or false, got {:?}",
                i + 1,
                fields[2].trim()
            ))
        })?;
        let q = VisualQuestion::new(text.clone(), answer, needs_reference)
            .map_err(|_| QuestionGenError::NotAQuestion(text))?;
        if !seen.insert(q.dedup_key()) {
            continue;
        }
        if questions.len() == MAX_QUESTIONS {
            dropped += 1;
            continue;
        }
        questions.push(q);
    }
    if dropped > 0 {
        tracing::warn!("dropped {dropped} questions beyond the cap of {MAX_QUESTIONS}");
    }
    if questions.is_empty() {
        return Err(QuestionGenError::EmptyQuestionList);
    }
    Ok(questions)
}

/// Builds prompts and drives the text backend.
#[derive(Debug, Clone, Default)]
pub struct QuestionGenerator {
    pub template: PromptTemplate,
    pub example: InContextExample,
}

impl QuestionGenerator {
    pub fn new(template: PromptTemplate) -> Self {
        Self {
            template,
            example: InContextExample::default(),
        }
    }

    pub fn build_prompt(&self, modification_text: &str) -> QuestionGenPrompt {
        QuestionGenPrompt {
            system_instructions: self.template.clone(),
            in_context_example: self.example.clone(),
            target_text: modification_text.to_string(),
        }
    }

    /// Requests questions, re-requesting up to `retry_budget` times when the
    /// output cannot be parsed. Backend failures are not retried here.
    pub fn generate(
        &self,
        query: &RetrievalQuery,
        backend: &dyn TextBackend,
        retry_budget: u32,
    ) -> Result<Vec<VisualQuestion>, QuestionGenError> {
        let prompt = self.build_prompt(&query.modification_text).render();
        let mut last = None;
        for attempt in 0..=retry_budget {
            let mut request = TextGenRequest::new(prompt.clone());
            request.attempt = attempt;
            let output = backend
                .complete(&request)
                .map_err(QuestionGenError::BackendUnavailable)?;
            match parse_question_list(&output) {
                Ok(qs) => return Ok(qs),
                Err(e) if e.is_output_error() => {
                    tracing::debug!(query = %query.query_id, attempt, "unparseable output: {e}");
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(QuestionGenError::ExhaustedRetries {
            attempts: retry_budget + 1,
            last: Box::new(last.expect("at least one attempt ran")),
        })
    }
}

pub fn build_prompt(modification_text: &str) -> QuestionGenPrompt {
    QuestionGenerator::default().build_prompt(modification_text)
}

pub fn generate_questions(
    query: &RetrievalQuery,
    backend: &dyn TextBackend,
    retry_budget: u32,
) -> Result<Vec<VisualQuestion>, QuestionGenError> {
    QuestionGenerator::default().generate(query, backend, retry_budget)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionGenStats {
    pub num_queries: usize,
    pub total_questions: usize,
    pub avg_questions_per_triplet: f64,
    pub dual_image_fraction: f64,
}

pub fn question_stats(
    corpus: &BTreeMap<String, Vec<VisualQuestion>>,
) -> Result<QuestionGenStats, QuestionGenError> {
    let total: usize = corpus.values().map(Vec::len).sum();
    if corpus.is_empty() || total == 0 {
        return Err(QuestionGenError::EmptyCorpus);
    }
    let dual = corpus
        .values()
        .flatten()
        .filter(|q| q.needs_reference())
        .count();
    Ok(QuestionGenStats {
        num_queries: corpus.len(),
        total_questions: total,
        avg_questions_per_triplet: total as f64 / corpus.len() as f64,
        dual_image_fraction: dual as f64 / total as f64,
    })
}
