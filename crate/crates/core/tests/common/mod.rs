//! Independent oracles shared by the integration tests. Everything here is
//! written by brute force or with a different algorithm than the library
//! so that agreement is meaningful.

#![allow(dead_code)]

pub mod grad;

use bilctc_core::ctc::{logsumexp, BLANK};
use bilctc_core::{LabelSequence, LogProbMatrix};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every class path of length `frames` over `classes` classes.
pub fn all_paths(frames: usize, classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..frames {
        let mut next = Vec::with_capacity(out.len() * classes);
        for p in &out {
            for c in 0..classes {
                let mut q = p.clone();
                q.push(c);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

/// Collapse written independently: delete repeats by scanning, then drop
/// blanks.
pub fn collapse_oracle(path: &[usize]) -> Vec<usize> {
    let mut merged = Vec::new();
    for &c in path {
        if merged.last() != Some(&c) {
            merged.push(c);
        }
    }
    merged.into_iter().filter(|&c| c != BLANK).collect()
}

pub fn path_log_prob(probs: &LogProbMatrix, path: &[usize]) -> f64 {
    path.iter()
        .enumerate()
        .map(|(t, &c)| probs.values()[[t, c]])
        .sum()
}

/// Brute-force CTC log-likelihood: sum over every path that collapses to
/// the target.
pub fn oracle_log_likelihood(probs: &LogProbMatrix, target: &[usize]) -> f64 {
    let terms: Vec<f64> = all_paths(probs.frames(), probs.classes())
        .into_iter()
        .filter(|p| collapse_oracle(p) == target)
        .map(|p| path_log_prob(probs, &p))
        .collect();
    logsumexp(terms)
}

/// Brute-force per-frame occupancy: P(path_t = c, collapse(path) = target)
/// normalized by the target likelihood, in probability space.
pub fn oracle_gamma(probs: &LogProbMatrix, target: &[usize]) -> Array2<f64> {
    let mut gamma: Array2<f64> = Array2::zeros((probs.frames(), probs.classes()));
    for p in all_paths(probs.frames(), probs.classes()) {
        if collapse_oracle(&p) != target {
            continue;
        }
        let w = path_log_prob(probs, &p).exp();
        for (t, &c) in p.iter().enumerate() {
            gamma[[t, c]] += w;
        }
    }
    let z = oracle_log_likelihood(probs, target).exp();
    gamma.mapv(|v| v / z)
}

fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = vec![BLANK];
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Every valid state sequence through the blank-extended lattice.
fn state_sequences(frames: usize, ext: &[usize]) -> Vec<Vec<usize>> {
    let s_len = ext.len();
    let mut seqs: Vec<Vec<usize>> = Vec::new();
    let starts: Vec<usize> = if s_len > 1 { vec![0, 1] } else { vec![0] };
    for s in starts {
        seqs.push(vec![s]);
    }
    for _ in 1..frames {
        let mut next = Vec::new();
        for seq in &seqs {
            let s = *seq.last().unwrap();
            let mut push = |ns: usize| {
                let mut q = seq.clone();
                q.push(ns);
                next.push(q);
            };
            push(s);
            if s + 1 < s_len {
                push(s + 1);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                push(s + 2);
            }
        }
        seqs = next;
    }
    seqs.into_iter()
        .filter(|seq| {
            let last = *seq.last().unwrap();
            last == s_len - 1 || (s_len >= 2 && last == s_len - 2)
        })
        .collect()
}

/// Brute-force forced alignment: the maximum-probability state sequence;
/// ties resolve to the lexicographically largest sequence read from the
/// last frame backwards. Returns frame classes and the score, summed in
/// frame order.
pub fn oracle_forced_align(probs: &LogProbMatrix, target: &[usize]) -> Option<(Vec<usize>, f64)> {
    let ext = extended(target);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for seq in state_sequences(probs.frames(), &ext) {
        let mut score = 0.0;
        for (t, &s) in seq.iter().enumerate() {
            score += probs.values()[[t, ext[s]]];
        }
        let better = match &best {
            None => true,
            Some((bseq, bscore)) => {
                if score > *bscore {
                    true
                } else if score < *bscore {
                    false
                } else {
                    let rev: Vec<usize> = seq.iter().rev().copied().collect();
                    let brev: Vec<usize> = bseq.iter().rev().copied().collect();
                    rev > brev
                }
            }
        };
        if better {
            best = Some((seq, score));
        }
    }
    best.map(|(seq, score)| (seq.iter().map(|&s| ext[s]).collect(), score))
}

/// Brute-force 1-best over collapsed label sequences: the sequence with
/// the largest total CTC probability.
pub fn oracle_best_sequence(probs: &LogProbMatrix) -> (Vec<usize>, f64) {
    use std::collections::HashMap;
    let mut mass: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    for p in all_paths(probs.frames(), probs.classes()) {
        let lp = path_log_prob(probs, &p);
        mass.entry(collapse_oracle(&p)).or_default().push(lp);
    }
    let mut ranked: Vec<(Vec<usize>, f64)> = mass
        .into_iter()
        .map(|(seq, terms)| (seq, logsumexp(terms)))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked.remove(0)
}

/// Random normalized log-prob matrix.
pub fn random_probs(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> LogProbMatrix {
    let logits = Array2::from_shape_fn((frames, classes), |_| rng.gen_range(-3.0..3.0));
    LogProbMatrix::from_logits(&logits).unwrap()
}

/// Random feasible target for the given frame count.
pub fn random_target(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> LabelSequence {
    loop {
        let len = rng.gen_range(0..=frames);
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=vocab)).collect();
        let seq = LabelSequence::new(labels).unwrap();
        if seq.min_frames() <= frames {
            return seq;
        }
    }
}

/// Every label sequence over `1..=vocab` with length at most `max_len`.
pub fn all_label_sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for l in 1..=vocab {
                let mut q = p.clone();
                q.push(l);
                out.push(q.clone());
                next.push(q);
            }
        }
        frontier = next;
    }
    out
}

/// Independent full-table WER numerator (edit distance).
pub fn oracle_edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in table.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in table[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            table[i][j] = (table[i - 1][j - 1] + cost)
                .min(table[i - 1][j] + 1)
                .min(table[i][j - 1] + 1);
        }
    }
    table[a.len()][b.len()]
}

/// Independent re-implementation of the synthetic translation transform.
pub fn oracle_translate(
    transcript: &[usize],
    window: usize,
    substitution: bool,
    easy_target: bool,
    target_vocab: usize,
) -> Vec<usize> {
    if easy_target {
        return transcript
            .iter()
            .map(|&k| (k - 1) % target_vocab + 1)
            .collect();
    }
    let mut reversed = Vec::with_capacity(transcript.len());
    for chunk in transcript.chunks(window.max(1)) {
        let mut c: Vec<usize> = chunk.to_vec();
        c.reverse();
        reversed.extend(c);
    }
    if !substitution {
        return reversed
            .iter()
            .map(|&z| (z - 1) % target_vocab + 1)
            .collect();
    }
    let mut out = Vec::with_capacity(reversed.len());
    for (i, &z) in reversed.iter().enumerate() {
        let prev = if i == 0 { 0 } else { reversed[i - 1] };
        out.push((z - 1 + prev) % target_vocab + 1);
    }
    out
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative-error check used by the gradient suite.
pub fn close_rel(analytic: f64, numeric: f64, rel: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        return (analytic - numeric).abs() < 1e-7;
    }
    (analytic - numeric).abs() / scale <= rel
}
