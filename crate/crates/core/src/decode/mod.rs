//! Inference engines: frame-synchronous CTC decoding and a shared
//! label-synchronous beam used for attention-only and joint-rescoring
//! search.

use crate::ctc::{logadd, prefix_score_init, PrefixState, LogProbMatrix, BLANK, LOG_ZERO};
use crate::error::{Error, Result};
use crate::model::BilCtcModel;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    CtcGreedy,
    CtcPrefix,
    AttnOnly,
    Rescoring,
}

impl FromStr for DecodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc_greedy" => Ok(DecodeMode::CtcGreedy),
            "ctc_prefix" => Ok(DecodeMode::CtcPrefix),
            "attn_only" => Ok(DecodeMode::AttnOnly),
            "rescoring" => Ok(DecodeMode::Rescoring),
            other => Err(Error::Config(format!(
                "unknown decode mode {other} (ctc_greedy, ctc_prefix, attn_only, rescoring)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam: usize,
    /// CTC weight in joint rescoring; 0 skips CTC fusion entirely.
    pub lambda: f64,
    /// Maximum output length as a multiple of encoder frames.
    pub max_len_factor: f64,
    /// Length-normalize the attention score of finished hypotheses.
    pub length_norm: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Rescoring,
            beam: 5,
            lambda: 0.1,
            max_len_factor: 1.5,
            length_norm: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.max_len_factor <= 0.0 {
            return Err(Error::Config("max_len_factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub attn_score: Option<f64>,
    pub ctc_score: Option<f64>,
    pub finished: bool,
}

/// One decoded utterance in the n-best JSONL stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NbestRecord {
    pub id: String,
    pub mode: DecodeMode,
    pub hypotheses: Vec<Hypothesis>,
}

/// Per-frame argmax (ties go to the lowest class index) followed by
/// repeat-collapse and blank removal.
pub fn ctc_greedy(probs: &LogProbMatrix) -> Vec<usize> {
    let mut path = Vec::with_capacity(probs.frames());
    for t in 0..probs.frames() {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..probs.classes() {
            let v = probs.lp(t, c);
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        path.push(best);
    }
    let collapsed = crate::ctc::collapse(&crate::AlignmentPath::new(path), probs.classes())
        .expect("argmax classes are in range");
    collapsed.into()
}

/// Time-synchronous CTC prefix beam search. Returns up to `beam`
/// hypotheses sorted by log-probability (ties broken by prefix order).
pub fn ctc_prefix_beam(probs: &LogProbMatrix, beam: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    // per prefix: (ends-in-blank mass, ends-in-label mass), log domain
    let mut beams: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
    beams.insert(Vec::new(), (0.0, LOG_ZERO));

    for t in 0..probs.frames() {
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, &(pb, pnb)) in &beams {
            let total = logadd(pb, pnb);
            for c in 0..probs.classes() {
                let lp = probs.lp(t, c);
                if lp == LOG_ZERO {
                    continue;
                }
                if c == BLANK {
                    let e = next.entry(prefix.clone()).or_insert((LOG_ZERO, LOG_ZERO));
                    e.0 = logadd(e.0, total + lp);
                } else if prefix.last() == Some(&c) {
                    // repeated emission extends the same prefix; a fresh
                    // start after blank makes a longer one
                    let e = next.entry(prefix.clone()).or_insert((LOG_ZERO, LOG_ZERO));
                    e.1 = logadd(e.1, pnb + lp);
                    let mut longer = prefix.clone();
                    longer.push(c);
                    let e = next.entry(longer).or_insert((LOG_ZERO, LOG_ZERO));
                    e.1 = logadd(e.1, pb + lp);
                } else {
                    let mut longer = prefix.clone();
                    longer.push(c);
                    let e = next.entry(longer).or_insert((LOG_ZERO, LOG_ZERO));
                    e.1 = logadd(e.1, total + lp);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            let sa = logadd(a.1 .0, a.1 .1);
            let sb = logadd(b.1 .0, b.1 .1);
            sb.partial_cmp(&sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(beam);
        beams = ranked.into_iter().collect();
    }

    let mut out: Vec<Hypothesis> = beams
        .into_iter()
        .filter(|&(_, (pb, pnb))| logadd(pb, pnb) > LOG_ZERO)
        .map(|(prefix, (pb, pnb))| Hypothesis {
            score: logadd(pb, pnb),
            tokens: prefix,
            attn_score: None,
            ctc_score: None,
            finished: true,
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    out.truncate(beam);
    Ok(out)
}

/// Next-token scoring interface for the label-synchronous beam. The token
/// space is `0 = BOS, 1..=V = labels, V + 1 = EOS`; `prefix` holds labels
/// only.
pub trait AutoregressiveScorer {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Array1<f64>>;
    fn eos(&self) -> usize;
}

pub struct ModelScorer<'a> {
    model: &'a BilCtcModel,
    states: &'a Array2<f64>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a BilCtcModel, states: &'a Array2<f64>) -> Self {
        Self { model, states }
    }
}

impl AutoregressiveScorer for ModelScorer<'_> {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Array1<f64>> {
        self.model.decoder_next_log_probs(self.states, prefix)
    }

    fn eos(&self) -> usize {
        self.model.spec().eos()
    }
}

struct BeamItem {
    tokens: Vec<usize>,
    attn_lp: f64,
    ctc_state: Option<PrefixState>,
    /// Pruning score: fused prefix score while live, final score when
    /// finished.
    score: f64,
}

/// Label-synchronous beam over the decoder, optionally fusing CTC prefix
/// scores. With `ctc = None` or `lambda = 0` the search is attention-only
/// and no CTC quantity is evaluated. Hypothesis EOS extensions fuse the
/// exact full-sequence CTC probability; attention scores of finished
/// hypotheses are length-normalized when configured, CTC scores never are.
pub fn attention_beam(
    scorer: &dyn AutoregressiveScorer,
    ctc: Option<&LogProbMatrix>,
    config: &DecodeConfig,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let fuse = config.lambda > 0.0;
    if fuse && ctc.is_none() {
        return Err(Error::Usage(
            "joint rescoring with lambda > 0 needs CTC posteriors".into(),
        ));
    }
    let eos = scorer.eos();
    let labels = 1..eos;

    let mut live = vec![BeamItem {
        tokens: Vec::new(),
        attn_lp: 0.0,
        ctc_state: if fuse {
            Some(prefix_score_init(ctc.unwrap()))
        } else {
            None
        },
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..=max_len {
        let mut candidates: Vec<BeamItem> = Vec::new();
        for item in &live {
            let lp = scorer.next_log_probs(&item.tokens)?;
            // EOS extension finishes the hypothesis
            {
                let attn_final = item.attn_lp + lp[eos];
                let out_len = (item.tokens.len() + 1) as f64;
                let attn_part = if config.length_norm {
                    attn_final / out_len
                } else {
                    attn_final
                };
                let (score, ctc_score) = if fuse {
                    let (_, full) = item
                        .ctc_state
                        .as_ref()
                        .expect("fused item carries a prefix state")
                        .extend(ctc.unwrap(), None)?;
                    (
                        config.lambda * full + (1.0 - config.lambda) * attn_part,
                        Some(full),
                    )
                } else {
                    (attn_part, None)
                };
                finished.push(Hypothesis {
                    tokens: item.tokens.clone(),
                    score,
                    attn_score: Some(attn_final),
                    ctc_score,
                    finished: true,
                });
            }
            if item.tokens.len() >= max_len {
                continue;
            }
            for l in labels.clone() {
                let attn_lp = item.attn_lp + lp[l];
                let (ctc_state, score) = if fuse {
                    let (state, prefix_lp) = item
                        .ctc_state
                        .as_ref()
                        .expect("fused item carries a prefix state")
                        .extend(ctc.unwrap(), Some(l))?;
                    (
                        Some(state),
                        config.lambda * prefix_lp + (1.0 - config.lambda) * attn_lp,
                    )
                } else {
                    (None, attn_lp)
                };
                let mut tokens = item.tokens.clone();
                tokens.push(l);
                candidates.push(BeamItem {
                    tokens,
                    attn_lp,
                    ctc_state,
                    score,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(config.beam);
        live = candidates;
        if live.is_empty() {
            break;
        }
    }

    finished.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    if finished.is_empty() {
        // no EOS was ever reachable; report the best live prefix unfinished
        let mut out: Vec<Hypothesis> = live
            .into_iter()
            .map(|i| Hypothesis {
                tokens: i.tokens,
                score: i.score,
                attn_score: Some(i.attn_lp),
                ctc_score: None,
                finished: false,
            })
            .collect();
        out.truncate(config.beam);
        return Ok(out);
    }
    finished.truncate(config.beam);
    Ok(finished)
}

/// Decode one utterance's translation with the configured mode. CTC modes
/// read the final XCTC head; beam modes run the decoder, fusing XCTC
/// posteriors for rescoring.
pub fn decode_translation(
    model: &BilCtcModel,
    features: &Array2<f64>,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let encoded = model.encode_eval(features)?;
    let need_xctc = matches!(config.mode, DecodeMode::CtcGreedy | DecodeMode::CtcPrefix)
        || (config.mode == DecodeMode::Rescoring && config.lambda > 0.0);
    let xctc = match (&encoded.xctc_log_probs, need_xctc) {
        (Some(p), _) => Some(p),
        (None, false) => None,
        (None, true) => {
            return Err(Error::Usage(
                "decode mode needs the XCTC head but the model has none".into(),
            ))
        }
    };
    match config.mode {
        DecodeMode::CtcGreedy => Ok(vec![Hypothesis {
            tokens: ctc_greedy(xctc.unwrap()),
            score: 0.0,
            attn_score: None,
            ctc_score: None,
            finished: true,
        }]),
        DecodeMode::CtcPrefix => ctc_prefix_beam(xctc.unwrap(), config.beam),
        DecodeMode::AttnOnly | DecodeMode::Rescoring => {
            let scorer = ModelScorer::new(model, &encoded.states);
            let max_len = ((encoded.states.nrows() as f64 * config.max_len_factor).ceil()
                as usize)
                .max(1);
            let ctc = if config.mode == DecodeMode::Rescoring && config.lambda > 0.0 {
                xctc
            } else {
                None
            };
            let effective = if ctc.is_none() {
                DecodeConfig {
                    lambda: 0.0,
                    ..config.clone()
                }
            } else {
                config.clone()
            };
            attention_beam(&scorer, ctc, &effective, max_len)
        }
    }
}

/// Greedy transcript decode from the final CTC head.
pub fn decode_transcript_greedy(model: &BilCtcModel, features: &Array2<f64>) -> Result<Vec<usize>> {
    let encoded = model.encode_eval(features)?;
    let ctc = encoded
        .ctc_log_probs
        .ok_or_else(|| Error::Usage("model has no CTC head".into()))?;
    Ok(ctc_greedy(&ctc))
}
