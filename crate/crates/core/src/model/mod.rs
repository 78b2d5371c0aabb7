//! Encoder-decoder with dual transcript/translation CTC heads.
//!
//! Two topologies: the progressive one stacks an acoustic encoder (CTC
//! supervised) under a textual encoder (XCTC supervised); the synchronous
//! one computes both losses from the same encoder representation.
//! Intermediate taps add auxiliary CTC losses, optionally re-injecting
//! their prediction (prediction-aware encoding) and mixing in
//! forced-alignment ground truth for incorrect frames (curriculum
//! mixing, XCTC only).

pub mod checkpoint;

pub use checkpoint::{average_checkpoints, Checkpoint};

use crate::ctc::{forced_align, LogProbMatrix};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, TensorId};
use crate::nn::layers::{
    decoder_layer, encoder_layer, linear, register_decoder_layer, register_encoder_layer,
    register_linear, sinusoidal_position_encoding,
};
use crate::nn::store::{Init, ParameterStore};
use indexmap::IndexMap;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const FRAME_SUBSAMPLE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    Progressive {
        acoustic_layers: usize,
        textual_layers: usize,
    },
    Synchronous {
        layers: usize,
    },
}

impl Topology {
    pub fn total_layers(&self) -> usize {
        match self {
            Topology::Progressive {
                acoustic_layers,
                textual_layers,
            } => acoustic_layers + textual_layers,
            Topology::Synchronous { layers } => *layers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Ctc,
    Xctc,
}

/// An intermediate supervision point: 1-based encoder layer index plus the
/// head kind reading it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tap {
    pub layer: usize,
    pub kind: HeadKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub topology: Topology,
    pub decoder_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub feature_dim: usize,
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub taps: Vec<Tap>,
    /// Final CTC loss weight.
    pub alpha: f64,
    /// Final XCTC loss weight.
    pub beta: f64,
    /// Tap losses are weighted at this fraction of the final weight.
    pub inter_weight_factor: f64,
    pub pae_ctc: bool,
    pub pae_xctc: bool,
    /// Curriculum mixing ratio for XCTC taps.
    pub clm_ratio: f64,
    pub dropout: f64,
    /// Share one projection per head kind across taps and the final head.
    pub shared_tap_projection: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            topology: Topology::Synchronous { layers: 6 },
            decoder_layers: 3,
            hidden: 128,
            heads: 4,
            ffn: 512,
            feature_dim: 8,
            source_vocab: 6,
            target_vocab: 6,
            taps: vec![
                Tap {
                    layer: 2,
                    kind: HeadKind::Ctc,
                },
                Tap {
                    layer: 4,
                    kind: HeadKind::Xctc,
                },
            ],
            alpha: 0.2,
            beta: 0.1,
            inter_weight_factor: 0.5,
            pae_ctc: true,
            pae_xctc: true,
            clm_ratio: 0.1,
            dropout: 0.15,
            shared_tap_projection: true,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let total = self.topology.total_layers();
        if total == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of {} heads",
                self.hidden, self.heads
            )));
        }
        if self.source_vocab == 0 || self.target_vocab == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.inter_weight_factor < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.clm_ratio) {
            return Err(Error::Config(format!(
                "clm_ratio {} outside [0, 1]",
                self.clm_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        for tap in &self.taps {
            if tap.layer == 0 || tap.layer >= total {
                return Err(Error::Config(format!(
                    "tap layer {} outside 1..{total} (taps precede the final layer)",
                    tap.layer
                )));
            }
            if let Topology::Progressive {
                acoustic_layers, ..
            } = self.topology
            {
                match tap.kind {
                    HeadKind::Ctc if tap.layer > acoustic_layers => {
                        return Err(Error::Config(format!(
                            "progressive topology: CTC tap at layer {} exceeds the {acoustic_layers} acoustic layers",
                            tap.layer
                        )));
                    }
                    HeadKind::Xctc if tap.layer <= acoustic_layers => {
                        return Err(Error::Config(format!(
                            "progressive topology: XCTC tap at layer {} must sit in the textual encoder (layers {}..{total})",
                            tap.layer,
                            acoustic_layers + 1
                        )));
                    }
                    _ => {}
                }
            }
        }
        let pae_without_sharing = !self.shared_tap_projection
            && ((self.pae_ctc && self.has_tap(HeadKind::Ctc))
                || (self.pae_xctc && self.has_tap(HeadKind::Xctc)));
        if pae_without_sharing {
            return Err(Error::Config(
                "prediction-aware encoding requires the shared tap projection".into(),
            ));
        }
        Ok(())
    }

    pub fn has_tap(&self, kind: HeadKind) -> bool {
        self.taps.iter().any(|t| t.kind == kind)
    }

    pub fn needs_head(&self, kind: HeadKind) -> bool {
        match kind {
            HeadKind::Ctc => self.alpha > 0.0 || self.has_tap(HeadKind::Ctc),
            HeadKind::Xctc => self.beta > 0.0 || self.has_tap(HeadKind::Xctc),
        }
    }

    fn head_classes(&self, kind: HeadKind) -> usize {
        match kind {
            HeadKind::Ctc => self.source_vocab + 1,
            HeadKind::Xctc => self.target_vocab + 1,
        }
    }

    fn head_param(&self, kind: HeadKind) -> &'static str {
        match kind {
            HeadKind::Ctc => "head.ctc.w",
            HeadKind::Xctc => "head.xctc.w",
        }
    }

    fn tap_param(&self, tap: &Tap) -> String {
        if self.shared_tap_projection {
            self.head_param(tap.kind).to_string()
        } else {
            let kind = match tap.kind {
                HeadKind::Ctc => "ctc",
                HeadKind::Xctc => "xctc",
            };
            format!("tap.{}.{kind}.w", tap.layer)
        }
    }

    fn pae_enabled(&self, kind: HeadKind) -> bool {
        match kind {
            HeadKind::Ctc => self.pae_ctc,
            HeadKind::Xctc => self.pae_xctc,
        }
    }

    /// Decoder token space: BOS = 0, labels 1..=Vy, EOS = Vy + 1.
    pub fn decoder_vocab(&self) -> usize {
        self.target_vocab + 2
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        self.target_vocab + 1
    }
}

/// Replacements applied by curriculum mixing: (xctc-tap ordinal, frame,
/// class written).
pub type ClmPlan = Vec<Vec<(usize, usize, usize)>>;

#[derive(Debug, Clone)]
pub enum ClmMode {
    Off,
    /// Align against the current model and draw replacement decisions.
    Auto,
    /// Replay a fixed plan (per sample in batch order).
    Fixed(ClmPlan),
}

#[derive(Debug, Clone)]
pub struct LossOptions {
    pub training: bool,
    pub label_smoothing: f64,
    pub clm: ClmMode,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            training: true,
            label_smoothing: 0.1,
            clm: ClmMode::Auto,
        }
    }
}

/// Loss components; `total` always recombines from the parts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ctc_final: Option<f64>,
    pub xctc_final: Option<f64>,
    pub inter_ctc: Vec<(usize, f64)>,
    pub inter_xctc: Vec<(usize, f64)>,
    pub total: f64,
    pub skipped_ctc: usize,
    pub skipped_xctc: usize,
}

impl LossBreakdown {
    /// Recompute the total from the reported parts and weights.
    pub fn recombine(&self, spec: &ModelSpec) -> f64 {
        let mut total = self.ce;
        if let Some(v) = self.ctc_final {
            total += spec.alpha * v;
        }
        if let Some(v) = self.xctc_final {
            total += spec.beta * v;
        }
        for &(_, v) in &self.inter_ctc {
            total += spec.inter_weight_factor * spec.alpha * v;
        }
        for &(_, v) in &self.inter_xctc {
            total += spec.inter_weight_factor * spec.beta * v;
        }
        total
    }
}

pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grads: Option<IndexMap<String, Array2<f64>>>,
    /// The curriculum-mixing decisions actually applied.
    pub clm_plan: ClmPlan,
}

/// Tap output inside a live graph.
pub struct TapOutput {
    pub layer: usize,
    pub kind: HeadKind,
    pub logits: TensorId,
    pub log_probs: TensorId,
}

pub struct EncodeOutput {
    pub taps: Vec<TapOutput>,
    pub states: TensorId,
    pub ctc_logits: Option<TensorId>,
    pub xctc_logits: Option<TensorId>,
    pub clm_applied: Vec<(usize, usize, usize)>,
}

/// Evaluation-mode encoder output with concrete matrices.
pub struct EncodedUtterance {
    pub states: Array2<f64>,
    pub ctc_log_probs: Option<LogProbMatrix>,
    pub xctc_log_probs: Option<LogProbMatrix>,
    pub tap_log_probs: Vec<(usize, HeadKind, Array2<f64>)>,
}

enum ClmDirective<'a> {
    Off,
    Sample { aligned: &'a [usize], ratio: f64 },
    Fixed(&'a [(usize, usize, usize)]),
}

#[derive(Debug)]
pub struct BilCtcModel {
    spec: ModelSpec,
    store: ParameterStore,
}

impl BilCtcModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = spec.hidden;

        register_linear(
            &mut store,
            "frontend.proj",
            FRAME_SUBSAMPLE * spec.feature_dim,
            d,
            &mut rng,
        )?;
        for i in 0..spec.topology.total_layers() {
            register_encoder_layer(&mut store, &format!("enc.{i}"), d, spec.ffn, &mut rng)?;
        }
        if spec.needs_head(HeadKind::Ctc) {
            store.add(
                "head.ctc.w",
                d,
                spec.head_classes(HeadKind::Ctc),
                Init::Xavier,
                &mut rng,
            )?;
        }
        if spec.needs_head(HeadKind::Xctc) {
            store.add(
                "head.xctc.w",
                d,
                spec.head_classes(HeadKind::Xctc),
                Init::Xavier,
                &mut rng,
            )?;
        }
        if !spec.shared_tap_projection {
            for tap in &spec.taps {
                store.add(
                    &spec.tap_param(tap),
                    d,
                    spec.head_classes(tap.kind),
                    Init::Xavier,
                    &mut rng,
                )?;
            }
        }
        store.add("dec.emb", spec.decoder_vocab(), d, Init::Xavier, &mut rng)?;
        for i in 0..spec.decoder_layers {
            register_decoder_layer(&mut store, &format!("dec.{i}"), d, spec.ffn, &mut rng)?;
        }
        register_linear(&mut store, "dec.out", d, spec.decoder_vocab(), &mut rng)?;

        Ok(Self { spec, store })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    fn encode_graph(
        &self,
        g: &mut Graph,
        features: &Array2<f64>,
        clm: ClmDirective<'_>,
        rng: &mut impl Rng,
    ) -> Result<EncodeOutput> {
        let spec = &self.spec;
        if features.ncols() != spec.feature_dim {
            return Err(Error::Shape(format!(
                "feature dim {} != spec feature_dim {}",
                features.ncols(),
                spec.feature_dim
            )));
        }
        let input = g.input(features.clone());
        let stacked = g.pair_stack(input);
        let mut x = linear(g, &self.store, "frontend.proj", stacked)?;
        let t = g.shape(x).0;
        let pe = g.constant(sinusoidal_position_encoding(t, spec.hidden));
        x = g.add(x, pe);
        x = g.dropout(x, spec.dropout, rng);

        let total = spec.topology.total_layers();
        let acoustic_boundary = match spec.topology {
            Topology::Progressive {
                acoustic_layers, ..
            } => Some(acoustic_layers),
            Topology::Synchronous { .. } => None,
        };

        let mut taps = Vec::new();
        let mut ctc_logits = None;
        let mut clm_applied = Vec::new();
        let mut xctc_tap_ordinal = 0usize;

        for layer in 1..=total {
            x = encoder_layer(
                g,
                &self.store,
                &format!("enc.{}", layer - 1),
                x,
                spec.heads,
                spec.dropout,
                rng,
            )?;
            if acoustic_boundary == Some(layer) && spec.needs_head(HeadKind::Ctc) {
                let w = g.param("head.ctc.w", self.store.get("head.ctc.w")?);
                ctc_logits = Some(g.matmul(x, w));
            }
            for tap in spec.taps.iter().filter(|t| t.layer == layer) {
                let name = spec.tap_param(tap);
                let w = g.param(&name, self.store.get(&name)?);
                let logits = g.matmul(x, w);
                let log_probs = g.log_softmax_rows(logits);
                if spec.pae_enabled(tap.kind) {
                    let mut p = g.softmax_rows(logits);
                    if tap.kind == HeadKind::Xctc {
                        let classes = spec.head_classes(HeadKind::Xctc);
                        let replacements =
                            self.clm_replacements(g, p, &clm, xctc_tap_ordinal, classes, rng);
                        if !replacements.is_empty() {
                            let rows: Vec<(usize, Array1<f64>)> = replacements
                                .iter()
                                .map(|&(_, frame, class)| {
                                    let mut row = Array1::zeros(classes);
                                    row[class] = 1.0;
                                    (frame, row)
                                })
                                .collect();
                            p = g.row_replace(p, &rows);
                            clm_applied.extend(replacements);
                        }
                        xctc_tap_ordinal += 1;
                    }
                    let wt = g.transpose(w);
                    let injection = g.matmul(p, wt);
                    x = g.add(x, injection);
                } else if tap.kind == HeadKind::Xctc {
                    xctc_tap_ordinal += 1;
                }
                taps.push(TapOutput {
                    layer,
                    kind: tap.kind,
                    logits,
                    log_probs,
                });
            }
        }

        if acoustic_boundary.is_none() && spec.needs_head(HeadKind::Ctc) {
            let w = g.param("head.ctc.w", self.store.get("head.ctc.w")?);
            ctc_logits = Some(g.matmul(x, w));
        }
        let xctc_logits = if spec.needs_head(HeadKind::Xctc) {
            let w = g.param("head.xctc.w", self.store.get("head.xctc.w")?);
            Some(g.matmul(x, w))
        } else {
            None
        };

        Ok(EncodeOutput {
            taps,
            states: x,
            ctc_logits,
            xctc_logits,
            clm_applied,
        })
    }

    fn clm_replacements(
        &self,
        g: &Graph,
        p: TensorId,
        clm: &ClmDirective<'_>,
        ordinal: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Vec<(usize, usize, usize)> {
        match clm {
            ClmDirective::Off => Vec::new(),
            ClmDirective::Fixed(plan) => plan
                .iter()
                .filter(|&&(o, _, _)| o == ordinal)
                .copied()
                .collect(),
            ClmDirective::Sample { aligned, ratio } => {
                let values = g.value(p);
                let mut out = Vec::new();
                for (frame, row) in values.rows().into_iter().enumerate() {
                    let pred = argmax(row.iter().copied());
                    let truth = aligned[frame];
                    debug_assert!(truth < classes);
                    if pred != truth && rng.gen::<f64>() < *ratio {
                        out.push((ordinal, frame, truth));
                    }
                }
                out
            }
        }
    }

    /// Evaluation-mode encode: no dropout, no curriculum mixing.
    pub fn encode_eval(&self, features: &Array2<f64>) -> Result<EncodedUtterance> {
        let mut g = Graph::new(false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.encode_graph(&mut g, features, ClmDirective::Off, &mut rng)?;
        let to_lp = |g: &mut Graph, id: Option<TensorId>| -> Result<Option<LogProbMatrix>> {
            match id {
                Some(id) => {
                    let ls = g.log_softmax_rows(id);
                    Ok(Some(LogProbMatrix::new(g.value(ls).clone())?))
                }
                None => Ok(None),
            }
        };
        let ctc = to_lp(&mut g, out.ctc_logits)?;
        let xctc = to_lp(&mut g, out.xctc_logits)?;
        let tap_log_probs = out
            .taps
            .iter()
            .map(|t| (t.layer, t.kind, g.value(t.log_probs).clone()))
            .collect();
        Ok(EncodedUtterance {
            states: g.value(out.states).clone(),
            ctc_log_probs: ctc,
            xctc_log_probs: xctc,
            tap_log_probs,
        })
    }

    fn decoder_graph(
        &self,
        g: &mut Graph,
        memory: TensorId,
        tokens_in: &[usize],
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        let spec = &self.spec;
        let emb_w = g.param("dec.emb", self.store.get("dec.emb")?);
        let mut x = g.embedding(emb_w, tokens_in)?;
        let pe = g.constant(sinusoidal_position_encoding(tokens_in.len(), spec.hidden));
        x = g.add(x, pe);
        x = g.dropout(x, spec.dropout, rng);
        for i in 0..spec.decoder_layers {
            x = decoder_layer(
                g,
                &self.store,
                &format!("dec.{i}"),
                x,
                memory,
                spec.heads,
                spec.dropout,
                rng,
            )?;
        }
        linear(g, &self.store, "dec.out", x)
    }

    /// Next-token log-probabilities for an autoregressive prefix
    /// (`prefix` excludes BOS; evaluation mode).
    pub fn decoder_next_log_probs(
        &self,
        states: &Array2<f64>,
        prefix: &[usize],
    ) -> Result<Array1<f64>> {
        let mut g = Graph::new(false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let memory = g.input(states.clone());
        let mut tokens = vec![self.spec.bos()];
        tokens.extend_from_slice(prefix);
        let logits = self.decoder_graph(&mut g, memory, &tokens, &mut rng)?;
        let log_probs = g.log_softmax_rows(logits);
        Ok(g.value(log_probs).row(tokens.len() - 1).to_owned())
    }

    /// Teacher-forced log-probability of a full target sequence (ending in
    /// EOS), for rescoring checks.
    pub fn teacher_forced_log_prob(
        &self,
        states: &Array2<f64>,
        target: &[usize],
    ) -> Result<f64> {
        let mut g = Graph::new(false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let memory = g.input(states.clone());
        let mut tokens_in = vec![self.spec.bos()];
        tokens_in.extend_from_slice(target);
        let logits = self.decoder_graph(&mut g, memory, &tokens_in, &mut rng)?;
        let lp = g.log_softmax_rows(logits);
        let values = g.value(lp);
        let mut score = 0.0;
        for (i, &tok) in target.iter().chain(std::iter::once(&self.spec.eos())).enumerate() {
            score += values[[i, tok]];
        }
        Ok(score)
    }

    /// Forced alignment of the final XCTC distribution against the
    /// translation, frame classes per encoder frame. `None` if the target
    /// is infeasible or the model has no XCTC head.
    pub fn xctc_alignment(&self, sample: &Sample) -> Result<Option<Vec<usize>>> {
        let encoded = self.encode_eval(&sample.feature_matrix())?;
        let Some(xctc) = encoded.xctc_log_probs else {
            return Ok(None);
        };
        let target = sample.translation_labels()?;
        match forced_align(&xctc, &target) {
            Ok((path, _)) => Ok(Some(path.classes().to_vec())),
            Err(Error::InfeasibleTarget { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Aggregated loss over a batch of samples.
    ///
    /// The total is `ce + alpha*ctc + beta*xctc + sum(tap weights * tap
    /// losses)`; lattice components average over the samples they are
    /// feasible for. Gradients are produced when `opts.training`.
    pub fn total_loss(
        &self,
        batch: &[Sample],
        opts: &LossOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossOutput> {
        let spec = &self.spec;
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }

        // curriculum mixing needs a preliminary alignment pass per sample
        let mut alignments: Vec<Option<Vec<usize>>> = vec![None; batch.len()];
        let clm_active = opts.training
            && spec.clm_ratio > 0.0
            && spec.pae_xctc
            && spec.has_tap(HeadKind::Xctc)
            && matches!(opts.clm, ClmMode::Auto);
        if clm_active {
            for (i, sample) in batch.iter().enumerate() {
                alignments[i] = self.xctc_alignment(sample)?;
            }
        }

        let mut g = Graph::new(opts.training);
        let mut clm_plan: ClmPlan = Vec::with_capacity(batch.len());

        struct PerSample {
            ce: TensorId,
            ce_weight: usize,
            ctc: Option<TensorId>,
            xctc: Option<TensorId>,
            taps: Vec<Option<TensorId>>,
        }

        let mut per_sample = Vec::with_capacity(batch.len());
        let mut skipped_ctc = 0;
        let mut skipped_xctc = 0;

        for (i, sample) in batch.iter().enumerate() {
            let directive = match (&opts.clm, &alignments[i]) {
                (ClmMode::Fixed(plan), _) => plan
                    .get(i)
                    .map(|p| ClmDirective::Fixed(p.as_slice()))
                    .unwrap_or(ClmDirective::Off),
                (ClmMode::Auto, Some(aligned)) if clm_active => ClmDirective::Sample {
                    aligned,
                    ratio: spec.clm_ratio,
                },
                _ => ClmDirective::Off,
            };
            let features = sample.feature_matrix();
            let encode = self.encode_graph(&mut g, &features, directive, rng)?;
            clm_plan.push(encode.clm_applied.clone());

            let transcript = sample.transcript_labels()?;
            let translation = sample.translation_labels()?;
            let enc_frames = g.shape(encode.states).0;
            let ctc_feasible = enc_frames >= transcript.min_frames();
            let xctc_feasible = enc_frames >= translation.min_frames();
            if !ctc_feasible {
                skipped_ctc += 1;
            }
            if !xctc_feasible {
                skipped_xctc += 1;
            }

            let mut tokens_in = vec![spec.bos()];
            tokens_in.extend_from_slice(&sample.translation);
            let mut targets = sample.translation.clone();
            targets.push(spec.eos());
            let dec_logits = self.decoder_graph(&mut g, encode.states, &tokens_in, rng)?;
            let ce = g.label_smoothed_ce(dec_logits, &targets, opts.label_smoothing)?;

            let ctc = match encode.ctc_logits {
                Some(logits) if spec.alpha > 0.0 && ctc_feasible => {
                    Some(g.ctc_loss(logits, &transcript)?)
                }
                _ => None,
            };
            let xctc = match encode.xctc_logits {
                Some(logits) if spec.beta > 0.0 && xctc_feasible => {
                    Some(g.ctc_loss(logits, &translation)?)
                }
                _ => None,
            };
            let mut taps = Vec::with_capacity(encode.taps.len());
            for tap in &encode.taps {
                let (target, feasible) = match tap.kind {
                    HeadKind::Ctc => (&transcript, ctc_feasible),
                    HeadKind::Xctc => (&translation, xctc_feasible),
                };
                taps.push(if feasible {
                    Some(g.ctc_loss(tap.logits, target)?)
                } else {
                    None
                });
            }
            per_sample.push(PerSample {
                ce,
                ce_weight: targets.len(),
                ctc,
                xctc,
                taps,
            });
        }

        let lattice_enabled = spec.alpha > 0.0 || spec.beta > 0.0;
        let any_feasible = per_sample
            .iter()
            .any(|s| s.ctc.is_some() || s.xctc.is_some());
        if lattice_enabled && !any_feasible && skipped_ctc + skipped_xctc > 0 {
            return Err(Error::Data(
                "batch skipped: every sample infeasible for the enabled CTC losses".into(),
            ));
        }

        // token-weighted CE mean over the batch
        let total_tokens: usize = per_sample.iter().map(|s| s.ce_weight).sum();
        let mut ce_node: Option<TensorId> = None;
        for s in &per_sample {
            let scaled = g.scale(s.ce, s.ce_weight as f64 / total_tokens as f64);
            ce_node = Some(match ce_node {
                Some(acc) => g.add(acc, scaled),
                None => scaled,
            });
        }
        let ce_node = ce_node.expect("non-empty batch");

        let mean_of = |g: &mut Graph, nodes: Vec<TensorId>| -> Option<TensorId> {
            if nodes.is_empty() {
                return None;
            }
            let k = nodes.len() as f64;
            let mut acc: Option<TensorId> = None;
            for n in nodes {
                let scaled = g.scale(n, 1.0 / k);
                acc = Some(match acc {
                    Some(a) => g.add(a, scaled),
                    None => scaled,
                });
            }
            acc
        };

        let ctc_node = mean_of(&mut g, per_sample.iter().filter_map(|s| s.ctc).collect());
        let xctc_node = mean_of(&mut g, per_sample.iter().filter_map(|s| s.xctc).collect());

        let tap_count = spec.taps.len();
        let mut tap_nodes: Vec<Option<TensorId>> = Vec::with_capacity(tap_count);
        for tap_idx in 0..tap_count {
            let nodes: Vec<TensorId> = per_sample
                .iter()
                .filter_map(|s| s.taps[tap_idx])
                .collect();
            tap_nodes.push(mean_of(&mut g, nodes));
        }

        let mut total = ce_node;
        if let Some(n) = ctc_node {
            let w = g.scale(n, spec.alpha);
            total = g.add(total, w);
        }
        if let Some(n) = xctc_node {
            let w = g.scale(n, spec.beta);
            total = g.add(total, w);
        }
        for (tap_idx, node) in tap_nodes.iter().enumerate() {
            if let Some(n) = node {
                let base = match spec.taps[tap_idx].kind {
                    HeadKind::Ctc => spec.alpha,
                    HeadKind::Xctc => spec.beta,
                };
                let w = g.scale(*n, spec.inter_weight_factor * base);
                total = g.add(total, w);
            }
        }

        let mut inter_ctc = Vec::new();
        let mut inter_xctc = Vec::new();
        for (tap_idx, node) in tap_nodes.iter().enumerate() {
            if let Some(n) = node {
                let tap = &spec.taps[tap_idx];
                match tap.kind {
                    HeadKind::Ctc => inter_ctc.push((tap.layer, g.scalar(*n))),
                    HeadKind::Xctc => inter_xctc.push((tap.layer, g.scalar(*n))),
                }
            }
        }

        let breakdown = LossBreakdown {
            ce: g.scalar(ce_node),
            ctc_final: ctc_node.map(|n| g.scalar(n)),
            xctc_final: xctc_node.map(|n| g.scalar(n)),
            inter_ctc,
            inter_xctc,
            total: g.scalar(total),
            skipped_ctc,
            skipped_xctc,
        };

        let grads = if opts.training {
            g.backward(total)?;
            Some(g.param_grads())
        } else {
            None
        };

        Ok(LossOutput {
            breakdown,
            grads,
            clm_plan,
        })
    }
}

pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
