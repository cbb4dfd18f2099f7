//! Balanced yes/no VQA corpus construction.
//!
//! Target images give examples whose answer is the question's expected
//! answer. Other images of the same category are sampled and labelled by an
//! annotator model until each question has an example with the opposite
//! label (or the attempt cap runs out). The union is then downsampled to an
//! equal number of `Yes` and `No` answers.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clients::{answer_batch, ClientError, VqaBackend, VqaRequest};
use crate::domain::{Answer, AnswerTokens, Category, Triplet, VisualQuestion};
use crate::formats::{self, ImageIndexRecord, QuestionCorpus};
use crate::scoring;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("no questions for triplet '{0}'")]
    MissingQuestions(String),
    #[error("annotator unavailable: {0}")]
    AnnotatorUnavailable(ClientError),
    #[error("cannot balance: no '{0}' examples")]
    OneClassEmpty(Answer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleSource {
    TargetKnown,
    AutoAnnotated,
}

/// One question/image(s)/answer record. When two images are given they are
/// ordered (reference, candidate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaExample {
    pub question: String,
    pub images: Vec<String>,
    pub answer: Answer,
    pub source: ExampleSource,
    pub origin_query_id: String,
    /// Annotator probability of the assigned label. Not written to corpus files.
    #[serde(skip)]
    pub confidence: Option<f64>,
}

impl VqaExample {
    fn identity(&self) -> (String, Vec<String>) {
        (self.question.clone(), self.images.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBalance {
    pub total: usize,
    pub yes_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub total_examples: usize,
    pub yes_fraction: f64,
    pub dual_image_fraction: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_category: BTreeMap<Category, CategoryBalance>,
}

impl BalanceReport {
    pub fn of(corpus: &[VqaExample]) -> Self {
        let total = corpus.len();
        let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
        Self {
            total_examples: total,
            yes_fraction: frac(corpus.iter().filter(|e| e.answer == Answer::Yes).count()),
            dual_image_fraction: frac(corpus.iter().filter(|e| e.images.len() == 2).count()),
            per_category: BTreeMap::new(),
        }
    }

    /// Adds per-category yes ratios, looking categories up by origin query.
    pub fn with_categories(
        mut self,
        corpus: &[VqaExample],
        categories: &HashMap<String, Category>,
    ) -> Self {
        let mut counts: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
        for e in corpus {
            if let Some(&cat) = categories.get(&e.origin_query_id) {
                let c = counts.entry(cat).or_default();
                c.0 += 1;
                if e.answer == Answer::Yes {
                    c.1 += 1;
                }
            }
        }
        self.per_category = counts
            .into_iter()
            .map(|(cat, (total, yes))| {
                (cat, CategoryBalance { total, yes_fraction: yes as f64 / total as f64 })
            })
            .collect();
        self
    }
}

fn example_for(
    question: &VisualQuestion,
    triplet: &Triplet,
    image: &str,
    answer: Answer,
    source: ExampleSource,
) -> VqaExample {
    let images = if question.needs_reference() {
        vec![triplet.query.reference_image_id.clone(), image.to_string()]
    } else {
        vec![image.to_string()]
    };
    VqaExample {
        question: question.text().to_string(),
        images,
        answer,
        source,
        origin_query_id: triplet.query.query_id.clone(),
        confidence: None,
    }
}

/// One example per (question, target image), labelled with the expected answer.
pub fn positives_from_targets(
    triplets: &[Triplet],
    corpus: &QuestionCorpus,
) -> Result<Vec<VqaExample>, DatasetError> {
    let mut out = Vec::new();
    for t in triplets {
        let qs = corpus
            .get(&t.query.query_id)
            .filter(|qs| !qs.is_empty())
            .ok_or_else(|| DatasetError::MissingQuestions(t.query.query_id.clone()))?;
        for q in qs {
            out.push(example_for(q, t, &t.target_image_id, q.expected_answer(), ExampleSource::TargetKnown));
        }
    }
    Ok(out)
}

/// Image ids grouped by category, in a stable order.
#[derive(Debug, Clone, Default)]
pub struct ImagePool {
    by_category: BTreeMap<Category, Vec<String>>,
}

impl ImagePool {
    pub fn new(records: &[ImageIndexRecord]) -> Self {
        let mut by_category: BTreeMap<Category, Vec<String>> = BTreeMap::new();
        for r in records {
            by_category.entry(r.category).or_default().push(r.image_id.clone());
        }
        for ids in by_category.values_mut() {
            ids.sort();
            ids.dedup();
        }
        Self { by_category }
    }

    /// Same-category images other than the triplet's target and reference.
    pub fn eligible(&self, triplet: &Triplet) -> Vec<&str> {
        self.by_category
            .get(&triplet.query.category)
            .map(|ids| {
                ids.iter()
                    .map(String::as_str)
                    .filter(|id| *id != triplet.target_image_id && *id != triplet.query.reference_image_id)
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct AnnotationConfig {
    pub seed: u64,
    pub attempt_cap: usize,
    pub answer_tokens: AnswerTokens,
    pub fan_out: usize,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            attempt_cap: 5,
            answer_tokens: AnswerTokens::default(),
            fan_out: crate::domain::DEFAULT_FAN_OUT,
        }
    }
}

/// A question that never received its opposite label within the cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptCapExhausted {
    pub origin_query_id: String,
    pub question: String,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationOutcome {
    pub examples: Vec<VqaExample>,
    pub exhausted: Vec<AttemptCapExhausted>,
}

fn question_rng(seed: u64, query_id: &str, question_index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query_id.as_bytes());
    h.update([0]);
    h.update((question_index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

struct PendingQuestion<'a> {
    triplet: &'a Triplet,
    question: &'a VisualQuestion,
    order: Vec<&'a str>,
    attempts: usize,
}

/// Samples and labels non-target images for every question.
///
/// Each question gets its own seeded shuffle of the eligible pool, so the
/// output depends only on the seed and inputs, never on request timing.
/// Sampling stops once the annotator returns the label opposite to the
/// question's expected answer; every annotated image is kept with the
/// annotator's label.
pub fn sample_and_annotate(
    triplets: &[Triplet],
    corpus: &QuestionCorpus,
    pool: &ImagePool,
    annotator: &dyn VqaBackend,
    config: &AnnotationConfig,
) -> Result<AnnotationOutcome, DatasetError> {
    let mut pending: Vec<PendingQuestion<'_>> = Vec::new();
    for t in triplets {
        let qs = corpus
            .get(&t.query.query_id)
            .filter(|qs| !qs.is_empty())
            .ok_or_else(|| DatasetError::MissingQuestions(t.query.query_id.clone()))?;
        let eligible = pool.eligible(t);
        for (i, q) in qs.iter().enumerate() {
            let mut order = eligible.clone();
            order.shuffle(&mut question_rng(config.seed, &t.query.query_id, i));
            order.truncate(config.attempt_cap);
            pending.push(PendingQuestion { triplet: t, question: q, order, attempts: 0 });
        }
    }

    // Examples tagged with (question position, attempt) so output order is fixed.
    let mut tagged: Vec<((usize, usize), VqaExample)> = Vec::new();
    let mut open: Vec<usize> = (0..pending.len()).filter(|&i| !pending[i].order.is_empty()).collect();
    for round in 0..config.attempt_cap {
        if open.is_empty() {
            break;
        }
        let requests: Vec<VqaRequest> = open
            .iter()
            .map(|&i| {
                let p = &pending[i];
                VqaRequest::for_question(
                    p.question,
                    &p.triplet.query.reference_image_id,
                    p.order[round],
                    &config.answer_tokens,
                )
            })
            .collect();
        let responses = answer_batch(annotator, &requests, config.fan_out);
        let mut still_open = Vec::new();
        for (&i, resp) in open.iter().zip(responses) {
            let p = &mut pending[i];
            p.attempts += 1;
            let logprobs = match resp {
                Ok(lp) => lp,
                Err(e) if e.is_transport() => return Err(DatasetError::AnnotatorUnavailable(e)),
                Err(e) => {
                    tracing::warn!(query = %p.triplet.query.query_id, "annotation failed: {e}");
                    if round + 1 < p.order.len() {
                        still_open.push(i);
                    }
                    continue;
                }
            };
            let Ok((probs, _)) =
                scoring::answer_probability(&logprobs, &config.answer_tokens, Answer::Yes)
            else {
                if round + 1 < p.order.len() {
                    still_open.push(i);
                }
                continue;
            };
            let label = probs.predicted();
            let mut ex = example_for(
                p.question,
                p.triplet,
                p.order[round],
                label,
                ExampleSource::AutoAnnotated,
            );
            ex.confidence = Some(probs.of(label));
            tagged.push(((i, round), ex));
            if label != p.question.expected_answer() {
                continue;
            }
            if round + 1 < p.order.len() {
                still_open.push(i);
            }
        }
        open = still_open;
    }

    let satisfied: HashSet<usize> = tagged
        .iter()
        .filter(|((i, _), ex)| ex.answer != pending[*i].question.expected_answer())
        .map(|((i, _), _)| *i)
        .collect();
    let exhausted: Vec<AttemptCapExhausted> = pending
        .iter()
        .enumerate()
        .filter(|(i, _)| !satisfied.contains(i))
        .map(|(_, p)| {
            tracing::info!(
                query = %p.triplet.query.query_id,
                question = %p.question.text(),
                "attempt cap exhausted after {} attempts",
                p.attempts
            );
            AttemptCapExhausted {
                origin_query_id: p.triplet.query.query_id.clone(),
                question: p.question.text().to_string(),
                attempts: p.attempts,
            }
        })
        .collect();

    tagged.sort_by_key(|(tag, _)| *tag);
    Ok(AnnotationOutcome {
        examples: tagged.into_iter().map(|(_, e)| e).collect(),
        exhausted,
    })
}

/// Merges both pools and downsamples the majority answer at random (seeded)
/// until `Yes` and `No` counts are equal. Survivors keep their input order.
///
/// Auto-annotated examples that duplicate a target-known (question, images)
/// pair are dropped first.
pub fn balance(
    positives: &[VqaExample],
    annotated: &[VqaExample],
    seed: u64,
) -> Result<(Vec<VqaExample>, BalanceReport), DatasetError> {
    let known: HashSet<(String, Vec<String>)> = positives.iter().map(VqaExample::identity).collect();
    let mut seen = HashSet::new();
    let merged: Vec<VqaExample> = positives
        .iter()
        .chain(annotated.iter().filter(|e| !known.contains(&e.identity())))
        .filter(|e| seen.insert((e.identity(), e.source)))
        .cloned()
        .collect();

    let yes: Vec<usize> = (0..merged.len()).filter(|&i| merged[i].answer == Answer::Yes).collect();
    let no: Vec<usize> = (0..merged.len()).filter(|&i| merged[i].answer == Answer::No).collect();
    if yes.is_empty() {
        return Err(DatasetError::OneClassEmpty(Answer::Yes));
    }
    if no.is_empty() {
        return Err(DatasetError::OneClassEmpty(Answer::No));
    }
    let (majority, minority_len) = if yes.len() >= no.len() { (&yes, no.len()) } else { (&no, yes.len()) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drop: HashSet<usize> = index::sample(&mut rng, majority.len(), majority.len() - minority_len)
        .into_iter()
        .map(|k| majority[k])
        .collect();
    let corpus: Vec<VqaExample> = merged
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, e)| e)
        .collect();
    let report = BalanceReport::of(&corpus);
    Ok((corpus, report))
}

pub fn render_corpus(corpus: &[VqaExample]) -> String {
    formats::render_records(formats::VQA_CORPUS, corpus)
}
