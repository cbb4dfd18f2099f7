//! Answer probabilities, VQA score, score compression, normalization and fusion.

use thiserror::Error;

use crate::clients::TokenLogprobs;
use crate::domain::{Answer, AnswerProbability, AnswerTokens, Normalization, RerankConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("neither answer token ({yes:?}, {no:?}) present in log-probabilities")]
    MissingBothAnswerTokens { yes: String, no: String },
    #[error("no question probabilities to average")]
    EmptyQuestionSet,
    #[error("k must be positive and finite, got {0}")]
    NonPositiveK(f64),
    #[error("empty score list")]
    EmptyScoreList,
    #[error("value {value} outside domain for {what}")]
    OutOfDomain { what: &'static str, value: f64 },
}

/// Answer probabilities for one question, renormalized over the two answers,
/// with the probability of `expected`.
///
/// A missing token gets raw probability `max(0, 1 - p_other)` before
/// renormalization.
pub fn answer_probability(
    logprobs: &TokenLogprobs,
    tokens: &AnswerTokens,
    expected: Answer,
) -> Result<(AnswerProbability, f64), ScoringError> {
    let yes = logprobs.get(&tokens.yes);
    let no = logprobs.get(&tokens.no);
    let probs = match (yes, no) {
        // p_yes = e^a / (e^a + e^b), evaluated without underflow.
        (Some(ly), Some(ln)) => {
            let p_yes = 1.0 / (1.0 + (ln - ly).exp());
            AnswerProbability {
                p_yes,
                p_no: 1.0 - p_yes,
            }
        }
        (Some(ly), None) => renormalize(ly.exp(), (1.0 - ly.exp()).max(0.0)),
        (None, Some(ln)) => renormalize((1.0 - ln.exp()).max(0.0), ln.exp()),
        (None, None) => {
            return Err(ScoringError::MissingBothAnswerTokens {
                yes: tokens.yes.clone(),
                no: tokens.no.clone(),
            })
        }
    };
    Ok((probs, probs.of(expected)))
}

fn renormalize(p_yes: f64, p_no: f64) -> AnswerProbability {
    let total = p_yes + p_no;
    if total > 0.0 {
        AnswerProbability {
            p_yes: p_yes / total,
            p_no: p_no / total,
        }
    } else {
        AnswerProbability { p_yes: 0.5, p_no: 0.5 }
    }
}

/// Mean of the per-question probabilities of the expected answers.
pub fn vqa_score(probabilities: &[f64]) -> Result<f64, ScoringError> {
    if probabilities.is_empty() {
        return Err(ScoringError::EmptyQuestionSet);
    }
    for &p in probabilities {
        check_unit("question probability", p)?;
    }
    let sum: f64 = probabilities.iter().sum();
    Ok((sum / probabilities.len() as f64).clamp(0.0, 1.0))
}

/// Sigmoid-like compression of a VQA score.
///
/// `1/2 + coth(1/(2k)) * (logistic(x/k) - 1/2)`, which fixes 0 -> 1/2 and
/// 1 -> 1. Evaluated as `1/2 + tanh(x/(2k)) / (2 tanh(1/(2k)))`.
pub fn sigma_k(x: f64, k: f64) -> Result<f64, ScoringError> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(ScoringError::NonPositiveK(k));
    }
    if !x.is_finite() {
        return Err(ScoringError::OutOfDomain { what: "sigma_k input", value: x });
    }
    let half_inv_k = 0.5 / k;
    Ok(0.5 + 0.5 * (x * half_inv_k).tanh() / half_inv_k.tanh())
}

/// Maps raw base scores onto `[0, 1]` over the whole candidate set.
///
/// A degenerate range (all scores equal) maps every score to 0.5.
pub fn normalize_cir(raw: &[f64], mode: Normalization) -> Result<Vec<f64>, ScoringError> {
    if raw.is_empty() {
        return Err(ScoringError::EmptyScoreList);
    }
    if let Some(&bad) = raw.iter().find(|x| !x.is_finite()) {
        return Err(ScoringError::OutOfDomain { what: "raw CIR score", value: bad });
    }
    match mode {
        Normalization::MinMax => {
            let (min, max) = raw
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                });
            let range = max - min;
            if range == 0.0 {
                return Ok(vec![0.5; raw.len()]);
            }
            Ok(raw
                .iter()
                .map(|&x| ((x - min) / range).clamp(0.0, 1.0))
                .collect())
        }
    }
}

/// `cir_norm + lambda_vqa * sigma_k(vqa)`.
pub fn fuse(cir_norm: f64, vqa: f64, config: &RerankConfig) -> Result<f64, ScoringError> {
    check_unit("normalized CIR score", cir_norm)?;
    check_unit("VQA score", vqa)?;
    if !(config.lambda_vqa >= 0.0 && config.lambda_vqa.is_finite()) {
        return Err(ScoringError::OutOfDomain { what: "lambda_vqa", value: config.lambda_vqa });
    }
    Ok(cir_norm + config.lambda_vqa * sigma_k(vqa, config.k)?)
}

fn check_unit(what: &'static str, value: f64) -> Result<(), ScoringError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ScoringError::OutOfDomain { what, value })
    }
}
