//! Evaluation metrics: WER, corpus BLEU, exact match.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Levenshtein edit distance over token sequences.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut curr = vec![0usize; m + 1];
    for i in 1..=n {
        curr[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            curr[j] = sub.min(prev[j] + 1).min(curr[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

/// Corpus word error rate: total edit distance over total reference length.
/// An empty reference with a non-empty hypothesis counts the full
/// hypothesis length as errors; an empty corpus is an error.
pub fn wer(references: &[Vec<usize>], hypotheses: &[Vec<usize>]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::InvalidInput(format!(
            "{} references vs {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let mut errors = 0usize;
    let mut ref_len = 0usize;
    for (r, h) in references.iter().zip(hypotheses) {
        errors += edit_distance(r, h);
        ref_len += r.len();
    }
    if ref_len == 0 {
        if errors == 0 {
            return Ok(0.0);
        }
        return Err(Error::InvalidInput(
            "all references empty but hypotheses are not".into(),
        ));
    }
    Ok(errors as f64 / ref_len as f64)
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for window in seq.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU up to `max_n` (default callers use 4), scaled to 0..100.
///
/// Modified n-gram precisions are pooled over the corpus. Unigram precision
/// is unsmoothed; higher orders use add-one smoothing on both numerator and
/// denominator. Brevity penalty uses total lengths. A corpus with no
/// reference tokens is an error; zero unigram matches give 0.
pub fn bleu(references: &[Vec<usize>], hypotheses: &[Vec<usize>], max_n: usize) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::InvalidInput(format!(
            "{} references vs {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() || max_n == 0 {
        return Err(Error::InvalidInput("empty corpus or max_n = 0".into()));
    }
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if ref_len == 0 {
        return Err(Error::InvalidInput("references contain no tokens".into()));
    }
    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }

    let mut log_precision_sum = 0.0;
    for n in 1..=max_n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (r, h) in references.iter().zip(hypotheses) {
            let rc = ngram_counts(r, n);
            let hc = ngram_counts(h, n);
            for (gram, &count) in &hc {
                matched += count.min(rc.get(gram).copied().unwrap_or(0));
                total += count;
            }
        }
        let p = if n == 1 {
            if matched == 0 {
                return Ok(0.0);
            }
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_precision_sum += p.ln() / max_n as f64;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_precision_sum.exp())
}

/// Fraction of hypotheses exactly equal to their reference.
pub fn exact_match(references: &[Vec<usize>], hypotheses: &[Vec<usize>]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::InvalidInput(format!(
            "{} references vs {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let hits = references
        .iter()
        .zip(hypotheses)
        .filter(|(r, h)| r == h)
        .count();
    Ok(hits as f64 / references.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub transcript_wer: f64,
    pub translation_bleu: f64,
    pub translation_exact_match: f64,
    pub translation_wer: f64,
    pub sentences: usize,
}
