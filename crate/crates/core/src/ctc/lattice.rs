//! Forward-backward over the blank-extended CTC lattice.
//!
//! Table convention: `alpha[t][s]` includes the emission at frame `t`;
//! `beta[t][s]` excludes it, i.e. the log-probability of completing the
//! suffix from frame `t + 1` onward given lattice state `s` at `t`. With
//! this convention `logsumexp_s(alpha[t][s] + beta[t][s]) = logZ` for
//! every `t`.

use super::{
    check_feasible, extended_target, logadd, logsumexp, skip_allowed, LabelSequence,
    LogProbMatrix, LOG_ZERO,
};
use crate::error::Result;
use ndarray::Array2;

#[derive(Debug, Clone)]
pub struct LatticeTables {
    /// T x (2U+1), emission at `t` included.
    pub alpha: Array2<f64>,
    /// T x (2U+1), emission at `t` excluded.
    pub beta: Array2<f64>,
    /// T x C log occupancies: `gamma[t][c] = log P(pi_t = c | pi in Phi(target))`.
    pub gamma: Array2<f64>,
    /// Total log-likelihood of the target.
    pub log_z: f64,
}

fn forward(probs: &LogProbMatrix, ext: &[usize]) -> Array2<f64> {
    let t_len = probs.frames();
    let s_len = ext.len();
    let mut alpha = Array2::from_elem((t_len, s_len), LOG_ZERO);
    alpha[[0, 0]] = probs.lp(0, ext[0]);
    if s_len > 1 {
        alpha[[0, 1]] = probs.lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = logadd(acc, alpha[[t - 1, s - 1]]);
            }
            if skip_allowed(ext, s) {
                acc = logadd(acc, alpha[[t - 1, s - 2]]);
            }
            if acc != LOG_ZERO {
                alpha[[t, s]] = acc + probs.lp(t, ext[s]);
            }
        }
    }
    alpha
}

fn backward(probs: &LogProbMatrix, ext: &[usize]) -> Array2<f64> {
    let t_len = probs.frames();
    let s_len = ext.len();
    let mut beta = Array2::from_elem((t_len, s_len), LOG_ZERO);
    beta[[t_len - 1, s_len - 1]] = 0.0;
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]] + probs.lp(t + 1, ext[s]);
            if s + 1 < s_len {
                acc = logadd(acc, beta[[t + 1, s + 1]] + probs.lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && skip_allowed(ext, s + 2) {
                acc = logadd(acc, beta[[t + 1, s + 2]] + probs.lp(t + 1, ext[s + 2]));
            }
            beta[[t, s]] = acc;
        }
    }
    beta
}

/// `log P(target | probs)` marginalized over all alignments.
pub fn ctc_log_likelihood(probs: &LogProbMatrix, target: &LabelSequence) -> Result<f64> {
    check_feasible(probs, target)?;
    let ext = extended_target(target);
    let alpha = forward(probs, &ext);
    let t_last = probs.frames() - 1;
    let s_len = ext.len();
    let mut z = alpha[[t_last, s_len - 1]];
    if s_len > 1 {
        z = logadd(z, alpha[[t_last, s_len - 2]]);
    }
    Ok(z)
}

/// Full alpha/beta/occupancy tables for `target`.
pub fn forward_backward(probs: &LogProbMatrix, target: &LabelSequence) -> Result<LatticeTables> {
    check_feasible(probs, target)?;
    let ext = extended_target(target);
    let alpha = forward(probs, &ext);
    let beta = backward(probs, &ext);
    let t_len = probs.frames();
    let s_len = ext.len();
    let mut z = alpha[[t_len - 1, s_len - 1]];
    if s_len > 1 {
        z = logadd(z, alpha[[t_len - 1, s_len - 2]]);
    }

    let c_len = probs.classes();
    let mut gamma = Array2::from_elem((t_len, c_len), LOG_ZERO);
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[[t, s]] + beta[[t, s]];
            gamma[[t, ext[s]]] = logadd(gamma[[t, ext[s]]], occ);
        }
        for c in 0..c_len {
            if gamma[[t, c]] != LOG_ZERO {
                gamma[[t, c]] -= z;
            }
        }
    }

    Ok(LatticeTables {
        alpha,
        beta,
        gamma,
        log_z: z,
    })
}

/// Gradient of `-log P(target)` with respect to unnormalized logits:
/// `softmax(logits) - exp(gamma)`.
pub fn ctc_gradient_wrt_logits(logits: &Array2<f64>, target: &LabelSequence) -> Result<Array2<f64>> {
    let probs = LogProbMatrix::from_logits(logits)?;
    let tables = forward_backward(&probs, target)?;
    let mut grad = probs.values().mapv(f64::exp);
    for (g, occ) in grad.iter_mut().zip(tables.gamma.iter()) {
        *g -= occ.exp();
    }
    Ok(grad)
}

#[allow(dead_code)]
pub(crate) fn table_consistency(tables: &LatticeTables) -> f64 {
    let (t_len, _) = tables.alpha.dim();
    (0..t_len)
        .map(|t| {
            let z = logsumexp(
                tables
                    .alpha
                    .row(t)
                    .iter()
                    .zip(tables.beta.row(t).iter())
                    .map(|(a, b)| a + b),
            );
            (z - tables.log_z).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use ndarray::Array2;

    fn uniform(t: usize, c: usize) -> LogProbMatrix {
        LogProbMatrix::new(Array2::from_elem((t, c), -(c as f64).ln())).unwrap()
    }

    fn seq(v: &[usize]) -> LabelSequence {
        LabelSequence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let lp = uniform(1, 3);
        let ll = ctc_log_likelihood(&lp, &seq(&[1])).unwrap();
        assert!((ll - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_label_uniform() {
        // paths aa, a-eps, eps-a: 3/9 = 1/3
        let lp = uniform(2, 3);
        let ll = ctc_log_likelihood(&lp, &seq(&[1])).unwrap();
        assert!((ll - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_typed_error() {
        let lp = uniform(1, 3);
        let err = ctc_log_likelihood(&lp, &seq(&[1, 1])).unwrap_err();
        assert!(matches!(err, Error::InfeasibleTarget { required: 3, .. }));
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let lp = uniform(3, 2);
        let ll = ctc_log_likelihood(&lp, &LabelSequence::empty()).unwrap();
        assert!((ll - 3.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_frame_gamma_is_one_hot() {
        let lp = uniform(1, 3);
        let tables = forward_backward(&lp, &seq(&[1])).unwrap();
        assert!((tables.gamma[[0, 1]]).abs() < 1e-12);
        assert_eq!(tables.gamma[[0, 0]], f64::NEG_INFINITY);
        assert_eq!(tables.gamma[[0, 2]], f64::NEG_INFINITY);
    }

    #[test]
    fn two_frame_gamma_matches_enumeration() {
        // target [a] under uniform T=2, C=3: paths aa, a-eps, eps-a.
        // P(pi_1 = eps) = 1/3, P(pi_1 = a) = 2/3.
        let lp = uniform(2, 3);
        let tables = forward_backward(&lp, &seq(&[1])).unwrap();
        assert!((tables.gamma[[0, 0]].exp() - 1.0 / 3.0).abs() < 1e-12);
        assert!((tables.gamma[[0, 1]].exp() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_beta_consistency_and_gamma_rows_normalize() {
        let mut rng_state = 88172645463325252u64;
        let mut next = move || {
            // xorshift, good enough for a fixed test instance
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        let logits = Array2::from_shape_fn((6, 4), |_| 4.0 * next() - 2.0);
        let lp = LogProbMatrix::from_logits(&logits).unwrap();
        let tables = forward_backward(&lp, &seq(&[2, 1, 1])).unwrap();
        assert!(table_consistency(&tables) < 1e-9);
        for row in tables.gamma.rows() {
            let z = logsumexp(row.iter().copied());
            assert!(z.abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_single_frame() {
        let logits = ndarray::arr2(&[[0.3, -0.2, 1.1]]);
        let grad = ctc_gradient_wrt_logits(&logits, &seq(&[1])).unwrap();
        let probs = LogProbMatrix::from_logits(&logits).unwrap();
        let sm = probs.values().mapv(f64::exp);
        assert!((grad[[0, 0]] - sm[[0, 0]]).abs() < 1e-12);
        assert!((grad[[0, 1]] - (sm[[0, 1]] - 1.0)).abs() < 1e-12);
        assert!((grad[[0, 2]] - sm[[0, 2]]).abs() < 1e-12);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = ndarray::arr2(&[
            [0.3, -0.2, 1.1, 0.0],
            [1.0, 0.5, -0.5, 0.2],
            [-1.0, 0.0, 0.3, 0.9],
            [0.1, 0.2, 0.3, 0.4],
        ]);
        let grad = ctc_gradient_wrt_logits(&logits, &seq(&[1, 3])).unwrap();
        for row in grad.rows() {
            assert!(row.sum().abs() < 1e-8);
        }
    }
}
