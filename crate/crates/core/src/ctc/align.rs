//! Viterbi forced alignment over the blank-extended lattice.

use super::{
    check_feasible, extended_target, skip_allowed, AlignmentPath, LabelSequence, LogProbMatrix,
    LOG_ZERO,
};
use crate::error::Result;
use ndarray::Array2;

/// The single most probable alignment path collapsing to `target`, and its
/// path log-probability.
///
/// Tie-breaking is deterministic: among equally probable predecessors the
/// transition that stays in the same lattice state wins over advancing by
/// one, which wins over the skip; ties at the final frame prefer the
/// terminal blank state. Equivalently, among maximal paths the returned one
/// has the lexicographically largest state sequence when read from the last
/// frame backwards.
pub fn forced_align(
    probs: &LogProbMatrix,
    target: &LabelSequence,
) -> Result<(AlignmentPath, f64)> {
    check_feasible(probs, target)?;
    let ext = extended_target(target);
    let t_len = probs.frames();
    let s_len = ext.len();

    let mut score = Array2::from_elem((t_len, s_len), LOG_ZERO);
    let mut back = Array2::zeros((t_len, s_len));
    score[[0, 0]] = probs.lp(0, ext[0]);
    if s_len > 1 {
        score[[0, 1]] = probs.lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            // candidates ordered stay > advance-by-one > skip; strict
            // improvement required to move away from the earlier choice
            let mut best = score[[t - 1, s]];
            let mut bp = s;
            if s >= 1 && score[[t - 1, s - 1]] > best {
                best = score[[t - 1, s - 1]];
                bp = s - 1;
            }
            if skip_allowed(&ext, s) && score[[t - 1, s - 2]] > best {
                best = score[[t - 1, s - 2]];
                bp = s - 2;
            }
            if best != LOG_ZERO {
                score[[t, s]] = best + probs.lp(t, ext[s]);
                back[[t, s]] = bp;
            }
        }
    }

    let mut end = s_len - 1;
    if s_len > 1 && score[[t_len - 1, s_len - 2]] > score[[t_len - 1, s_len - 1]] {
        end = s_len - 2;
    }
    let best_score = score[[t_len - 1, end]];

    let mut states = vec![0usize; t_len];
    states[t_len - 1] = end;
    for t in (1..t_len).rev() {
        states[t - 1] = back[[t, states[t]]];
    }
    let path = AlignmentPath::new(states.into_iter().map(|s| ext[s]).collect());
    Ok((path, best_score))
}
