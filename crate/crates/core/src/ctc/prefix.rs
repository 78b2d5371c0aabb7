//! Label-synchronous CTC prefix scoring for joint decoding.
//!
//! For a prefix `g` the state keeps, per frame `t`, the log-probability of
//! all alignments of frames `0..=t` collapsing exactly to `g`, split by
//! whether the alignment ends in a non-blank (`rn`) or blank (`rb`) frame.
//! Extending by a label returns the marginal prefix probability (the
//! probability mass of all label sequences starting with the new prefix);
//! extending by end-of-sequence returns the full-sequence probability and
//! finishes the state.

use super::{logadd, logsumexp, LabelSequence, LogProbMatrix, BLANK, LOG_ZERO};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PrefixState {
    rn: Vec<f64>,
    rb: Vec<f64>,
    last: Option<usize>,
    len: usize,
    finished: bool,
}

impl PrefixState {
    pub fn prefix_len(&self) -> usize {
        self.len
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// `log P(collapse == current prefix)` over all frames.
    pub fn full_sequence_log_prob(&self) -> f64 {
        let t = self.rn.len() - 1;
        logadd(self.rn[t], self.rb[t])
    }

    /// Extend by `next_label` in `1..=V`, or by `None` for end-of-sequence.
    ///
    /// Returns the new state and the log prefix-probability (for a label)
    /// or the exact CTC log-likelihood of the prefix (for end-of-sequence).
    pub fn extend(&self, probs: &LogProbMatrix, next_label: Option<usize>) -> Result<(PrefixState, f64)> {
        if self.finished {
            return Err(Error::Usage(
                "cannot extend a prefix past end-of-sequence".into(),
            ));
        }
        let label = match next_label {
            None => {
                let mut state = self.clone();
                state.finished = true;
                let lp = self.full_sequence_log_prob();
                return Ok((state, lp));
            }
            Some(l) => l,
        };
        if label == BLANK || label >= probs.classes() {
            return Err(Error::InvalidInput(format!(
                "prefix extension label {label} out of range for {} classes",
                probs.classes()
            )));
        }

        let t_len = probs.frames();
        let mut rn = vec![LOG_ZERO; t_len + 1];
        let mut rb = vec![LOG_ZERO; t_len + 1];
        // phi[t]: mass of the old prefix at frame t that may start the new
        // label at frame t+1 (blank-ending always; non-blank-ending only if
        // the label changes)
        let phi = |t: usize| -> f64 {
            if self.last == Some(label) {
                self.rb[t]
            } else {
                logadd(self.rb[t], self.rn[t])
            }
        };
        let mut prefix_terms = Vec::with_capacity(t_len);
        for t in 1..=t_len {
            let emit = probs.lp(t - 1, label);
            let start_here = phi(t - 1) + emit;
            rn[t] = logadd(rn[t - 1] + emit, start_here);
            rb[t] = probs.lp(t - 1, BLANK) + logadd(rb[t - 1], rn[t - 1]);
            prefix_terms.push(start_here);
        }
        let prefix_log_prob = logsumexp(prefix_terms);
        Ok((
            PrefixState {
                rn,
                rb,
                last: Some(label),
                len: self.len + 1,
                finished: false,
            },
            prefix_log_prob,
        ))
    }

    /// Convenience: score a whole label sequence ending with EOS.
    pub fn score_sequence(probs: &LogProbMatrix, target: &LabelSequence) -> Result<f64> {
        let mut state = prefix_score_init(probs);
        for &l in target.labels() {
            state = state.extend(probs, Some(l))?.0;
        }
        Ok(state.extend(probs, None)?.1)
    }
}

/// State for the empty prefix: alignments so far are all-blank.
pub fn prefix_score_init(probs: &LogProbMatrix) -> PrefixState {
    let t_len = probs.frames();
    let mut rb = vec![LOG_ZERO; t_len + 1];
    rb[0] = 0.0;
    for t in 1..=t_len {
        rb[t] = rb[t - 1] + probs.lp(t - 1, BLANK);
    }
    PrefixState {
        rn: vec![LOG_ZERO; t_len + 1],
        rb,
        last: None,
        len: 0,
        finished: false,
    }
}
