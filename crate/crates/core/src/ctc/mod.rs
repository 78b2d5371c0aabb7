//! Pure CTC lattice mathematics in log space.
//!
//! Conventions used across the whole crate:
//! - blank has class index 0, labels occupy `1..=V`, so a distribution has
//!   `C = V + 1` classes;
//! - all probabilities are natural-log values, with `f64::NEG_INFINITY` as
//!   the zero-probability sentinel;
//! - the collapse function merges adjacent equal classes, then removes
//!   blanks.

mod align;
mod lattice;
mod prefix;

pub use align::forced_align;
pub use lattice::{ctc_gradient_wrt_logits, ctc_log_likelihood, forward_backward, LatticeTables};
pub use prefix::{prefix_score_init, PrefixState};

use crate::error::{Error, Result};
use ndarray::Array2;

pub const BLANK: usize = 0;

pub(crate) const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// Per-frame log-distributions over `V` labels plus blank (class 0).
///
/// Rows are checked to log-sum-exp to zero at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbMatrix(Array2<f64>);

impl LogProbMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (t, c) = values.dim();
        if t < 1 || c < 2 {
            return Err(Error::InvalidInput(format!(
                "log-prob matrix must be at least 1x2, got {t}x{c}"
            )));
        }
        for (i, row) in values.rows().into_iter().enumerate() {
            let z = logsumexp(row.iter().copied());
            if z.abs() > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "row {i} is not normalized: logsumexp = {z:e}"
                )));
            }
        }
        Ok(Self(values))
    }

    /// Row-wise log-softmax of unnormalized logits.
    pub fn from_logits(logits: &Array2<f64>) -> Result<Self> {
        let (t, c) = logits.dim();
        if t < 1 || c < 2 {
            return Err(Error::InvalidInput(format!(
                "logits must be at least 1x2, got {t}x{c}"
            )));
        }
        let mut values = logits.clone();
        for mut row in values.rows_mut() {
            let z = logsumexp(row.iter().copied());
            row.mapv_inplace(|v| v - z);
        }
        Ok(Self(values))
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    /// Number of classes including blank.
    pub fn classes(&self) -> usize {
        self.0.ncols()
    }

    /// Vocabulary size excluding blank.
    pub fn vocab(&self) -> usize {
        self.0.ncols() - 1
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub(crate) fn lp(&self, t: usize, c: usize) -> f64 {
        self.0[[t, c]]
    }
}

/// A label sequence over `1..=V`; never contains blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.contains(&BLANK) {
            return Err(Error::InvalidInput(
                "label sequence must not contain the blank index 0".into(),
            ));
        }
        Ok(Self(labels))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of adjacent equal-label pairs; each one forces a blank frame.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Minimum number of frames any alignment of this sequence needs.
    pub fn min_frames(&self) -> usize {
        self.len() + self.adjacent_repeats()
    }

    pub(crate) fn check_vocab(&self, classes: usize) -> Result<()> {
        if let Some(&l) = self.0.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidInput(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(())
    }
}

impl From<LabelSequence> for Vec<usize> {
    fn from(s: LabelSequence) -> Self {
        s.0
    }
}

/// A frame-level path through the lattice: one class index (possibly blank)
/// per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath(Vec<usize>);

impl AlignmentPath {
    pub fn new(path: Vec<usize>) -> Self {
        Self(path)
    }

    pub fn classes(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Collapse a path: merge adjacent equal classes, then remove blanks.
pub fn collapse(path: &AlignmentPath, classes: usize) -> Result<LabelSequence> {
    if let Some(&c) = path.classes().iter().find(|&&c| c >= classes) {
        return Err(Error::InvalidInput(format!(
            "path class {c} out of range for {classes} classes"
        )));
    }
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path.classes() {
        if Some(c) != prev && c != BLANK {
            out.push(c);
        }
        prev = Some(c);
    }
    Ok(LabelSequence(out))
}

/// Max-subtracted log-sum-exp; all-(-inf) inputs yield -inf.
pub fn logsumexp(values: impl IntoIterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.into_iter().collect();
    let m = vals.iter().copied().fold(LOG_ZERO, f64::max);
    if m == LOG_ZERO {
        return LOG_ZERO;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn logadd(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// The blank-extended target: `[ε, y1, ε, y2, ..., yU, ε]`.
pub(crate) fn extended_target(target: &LabelSequence) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target.labels() {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

pub(crate) fn check_feasible(probs: &LogProbMatrix, target: &LabelSequence) -> Result<()> {
    target.check_vocab(probs.classes())?;
    let required = target.min_frames();
    if probs.frames() < required {
        return Err(Error::InfeasibleTarget {
            frames: probs.frames(),
            target_len: target.len(),
            repeats: target.adjacent_repeats(),
            required,
        });
    }
    Ok(())
}

/// Whether a skip transition from extended state `s-2` into `s` is allowed.
pub(crate) fn skip_allowed(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}
