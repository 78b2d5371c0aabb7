//! Training loop, checkpoint schedule, and the ablation ladder.

use crate::data::{build_batches, generate, Sample, SyntheticTaskSpec};
use crate::decode::{decode_translation, decode_transcript_greedy, DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::metrics::{bleu, exact_match, wer, EvalReport};
use crate::model::{
    average_checkpoints, BilCtcModel, Checkpoint, ClmMode, HeadKind, LossBreakdown, LossOptions,
    ModelSpec, Tap, Topology, FRAME_SUBSAMPLE,
};
use crate::nn::inv_sqrt_lr;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Frame budget per batch (after subsampling the budget applies to raw
    /// input frames).
    pub max_frames_per_batch: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Steps between dev evaluations and checkpoint saves.
    pub val_interval: u64,
    /// Best checkpoints kept on disk, ranked by dev loss.
    pub checkpoints_kept: usize,
    /// Checkpoints averaged into the final model.
    pub average_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            max_frames_per_batch: 256,
            peak_lr: 1e-3,
            warmup: 40,
            label_smoothing: 0.1,
            seed: 0,
            val_interval: 20,
            checkpoints_kept: 10,
            average_k: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_frames_per_batch == 0 {
            return Err(Error::Config("frame budget must be positive".into()));
        }
        if self.peak_lr <= 0.0 || !self.peak_lr.is_finite() {
            return Err(Error::Config("peak learning rate must be positive".into()));
        }
        if self.warmup == 0 || self.val_interval == 0 {
            return Err(Error::Config(
                "warmup and val_interval must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.checkpoints_kept == 0 || self.average_k == 0 {
            return Err(Error::Config(
                "checkpoints_kept and average_k must be at least 1".into(),
            ));
        }
        if self.average_k > self.checkpoints_kept {
            return Err(Error::Config(format!(
                "average_k {} exceeds checkpoints_kept {}",
                self.average_k, self.checkpoints_kept
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Present on validation steps.
    pub dev_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub model: BilCtcModel,
    pub log: Vec<TrainLogRecord>,
    pub best_dev_loss: f64,
    pub final_checkpoint: PathBuf,
    pub dropped_samples: usize,
    pub diverged: bool,
}

/// Mean dev loss per sample over the whole dev set, evaluation mode.
pub fn dev_loss(model: &BilCtcModel, dev: &[Sample], config: &TrainConfig) -> Result<f64> {
    let (batches, _) = build_batches(dev, config.max_frames_per_batch, FRAME_SUBSAMPLE)?;
    if batches.is_empty() {
        return Err(Error::Data("dev set produced no feasible batches".into()));
    }
    let opts = LossOptions {
        training: false,
        label_smoothing: config.label_smoothing,
        clm: ClmMode::Off,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in &batches {
        let out = model.total_loss(&batch.samples, &opts, &mut rng)?;
        total += out.breakdown.total * batch.samples.len() as f64;
        count += batch.samples.len();
    }
    Ok(total / count as f64)
}

struct CheckpointShelf {
    dir: PathBuf,
    kept: usize,
    /// (dev_loss, step, path), best first.
    entries: Vec<(f64, u64, PathBuf)>,
}

impl CheckpointShelf {
    fn save(&mut self, model: &BilCtcModel, step: u64, dev: f64) -> Result<()> {
        let path = self.dir.join(format!("ckpt-{step}.json"));
        Checkpoint::from_model(model, step, dev).save(&path)?;
        self.entries.push((dev, step, path));
        self.entries.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        while self.entries.len() > self.kept {
            let (_, _, path) = self.entries.pop().unwrap();
            let _ = std::fs::remove_file(path);
        }
        Ok(())
    }
}

/// Train a fresh model on `train_set`, validating on `dev_set`.
/// Checkpoints and the averaged final model are written under `out_dir`;
/// one JSON line per step goes to `log_sink` when given.
pub fn train(
    spec: &ModelSpec,
    train_set: &[Sample],
    dev_set: &[Sample],
    config: &TrainConfig,
    out_dir: &Path,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut model = BilCtcModel::new(spec.clone(), config.seed)?;
    let (batches, dropped) = build_batches(train_set, config.max_frames_per_batch, FRAME_SUBSAMPLE)?;
    if batches.is_empty() {
        return Err(Error::Data(
            "training set produced no feasible batches".into(),
        ));
    }

    let mut shelf = CheckpointShelf {
        dir: out_dir.to_path_buf(),
        kept: config.checkpoints_kept,
        entries: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut log = Vec::new();
    let mut diverged = false;

    if config.steps == 0 {
        let dev = dev_loss(&model, dev_set, config)?;
        shelf.save(&model, 0, dev)?;
    }

    let opts = LossOptions {
        training: true,
        label_smoothing: config.label_smoothing,
        clm: ClmMode::Auto,
    };
    for step in 1..=config.steps {
        let batch = &batches[((step - 1) as usize) % batches.len()];
        let result = model
            .total_loss(&batch.samples, &opts, &mut rng)
            .and_then(|out| {
                if !out.breakdown.total.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss {} at step {step}",
                        out.breakdown.total
                    )));
                }
                Ok(out)
            });
        let out = match result {
            Ok(out) => out,
            Err(Error::Diverged(msg)) => {
                diverged = true;
                eprintln!("training diverged: {msg}");
                break;
            }
            Err(e) => return Err(e),
        };
        let lr = inv_sqrt_lr(step, config.warmup, config.peak_lr);
        let grads = out.grads.expect("training mode produces gradients");
        match model.store_mut().adam_step(&grads, lr) {
            Ok(()) => {}
            Err(Error::Diverged(msg)) => {
                diverged = true;
                eprintln!("training diverged: {msg}");
                break;
            }
            Err(e) => return Err(e),
        }

        let validate_now = step % config.val_interval == 0 || step == config.steps;
        let dev = if validate_now {
            let dev = dev_loss(&model, dev_set, config)?;
            shelf.save(&model, step, dev)?;
            Some(dev)
        } else {
            None
        };
        let record = TrainLogRecord {
            step,
            lr,
            loss: out.breakdown,
            dev_loss: dev,
        };
        if let Some(sink) = log_sink.as_deref_mut() {
            writeln!(sink, "{}", serde_json::to_string(&record)?)?;
        }
        log.push(record);
    }

    if shelf.entries.is_empty() {
        return Err(Error::Diverged(
            "training stopped before any checkpoint was saved".into(),
        ));
    }
    let best_dev_loss = shelf.entries[0].0;
    let paths: Vec<PathBuf> = shelf.entries.iter().map(|e| e.2.clone()).collect();
    let k = config.average_k.min(paths.len());
    let averaged = average_checkpoints(&paths, k)?;
    let final_checkpoint = out_dir.join("final.json");
    averaged.save(&final_checkpoint)?;
    let model = BilCtcModel::from_checkpoint(&averaged)?;
    Ok(TrainOutcome {
        model,
        log,
        best_dev_loss,
        final_checkpoint,
        dropped_samples: dropped,
        diverged,
    })
}

/// Evaluate a model on a test set: transcript WER from greedy CTC, the
/// translation metrics from the given decode configuration.
pub fn evaluate(
    model: &BilCtcModel,
    test_set: &[Sample],
    decode: &DecodeConfig,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let mut transcript_refs = Vec::new();
    let mut transcript_hyps = Vec::new();
    let mut translation_refs = Vec::new();
    let mut translation_hyps = Vec::new();
    let has_ctc = model.spec().needs_head(HeadKind::Ctc);
    for sample in test_set {
        let features = sample.feature_matrix();
        if has_ctc {
            transcript_refs.push(sample.transcript.clone());
            transcript_hyps.push(decode_transcript_greedy(model, &features)?);
        }
        let hyps = decode_translation(model, &features, decode)?;
        translation_refs.push(sample.translation.clone());
        translation_hyps.push(hyps.first().map(|h| h.tokens.clone()).unwrap_or_default());
    }
    let transcript_wer = if has_ctc {
        wer(&transcript_refs, &transcript_hyps)?
    } else {
        f64::NAN
    };
    Ok(EvalReport {
        transcript_wer,
        translation_bleu: bleu(&translation_refs, &translation_hyps, 4)?,
        translation_exact_match: exact_match(&translation_refs, &translation_hyps)?,
        translation_wer: wer(&translation_refs, &translation_hyps)?,
        sentences: test_set.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub task: SyntheticTaskSpec,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub beam: usize,
    pub lambda: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTaskSpec::default(),
            train: TrainConfig::default(),
            n_train: 200,
            n_dev: 40,
            n_test: 40,
            hidden: 32,
            heads: 2,
            ffn: 64,
            encoder_layers: 4,
            decoder_layers: 2,
            beam: 5,
            lambda: 0.1,
        }
    }
}

/// The cumulative feature ladder for one topology: each row enables one
/// more ingredient on top of the previous row.
pub fn ladder_specs(config: &AblationConfig, topology: Topology) -> Result<Vec<(String, ModelSpec)>> {
    let total = topology.total_layers();
    if total < 3 {
        return Err(Error::Config(
            "the ladder needs at least 3 encoder layers for taps".into(),
        ));
    }
    let (ctc_tap, xctc_tap) = match topology {
        Topology::Progressive {
            acoustic_layers, ..
        } => {
            if acoustic_layers < 1 || total - acoustic_layers < 2 {
                return Err(Error::Config(
                    "progressive ladder needs taps on both sides of the boundary".into(),
                ));
            }
            (
                acoustic_layers.saturating_sub(1).max(1),
                acoustic_layers + 1,
            )
        }
        Topology::Synchronous { .. } => (total / 2, total - 1),
    };
    let base = ModelSpec {
        topology,
        decoder_layers: config.decoder_layers,
        hidden: config.hidden,
        heads: config.heads,
        ffn: config.ffn,
        feature_dim: config.task.feature_dim,
        source_vocab: config.task.source_vocab,
        target_vocab: config.task.target_vocab,
        taps: vec![],
        alpha: 0.2,
        beta: 0.0,
        inter_weight_factor: 0.5,
        pae_ctc: false,
        pae_xctc: false,
        clm_ratio: 0.0,
        dropout: 0.1,
        shared_tap_projection: true,
    };
    let taps = vec![
        Tap {
            layer: ctc_tap,
            kind: HeadKind::Ctc,
        },
        Tap {
            layer: xctc_tap,
            kind: HeadKind::Xctc,
        },
    ];
    let rows = vec![
        ("ctc".to_string(), base.clone()),
        (
            "ctc+xctc".to_string(),
            ModelSpec {
                beta: 0.1,
                ..base.clone()
            },
        ),
        (
            "ctc+xctc+inter".to_string(),
            ModelSpec {
                beta: 0.1,
                taps: taps.clone(),
                ..base.clone()
            },
        ),
        (
            "ctc+xctc+inter+pae".to_string(),
            ModelSpec {
                beta: 0.1,
                taps: taps.clone(),
                pae_ctc: true,
                pae_xctc: true,
                ..base.clone()
            },
        ),
        (
            "ctc+xctc+inter+pae+clm".to_string(),
            ModelSpec {
                beta: 0.1,
                taps,
                pae_ctc: true,
                pae_xctc: true,
                clm_ratio: 0.1,
                ..base
            },
        ),
    ];
    for (name, spec) in &rows {
        spec.validate()
            .map_err(|e| Error::Config(format!("ladder row {name}: {e}")))?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: DecodeMode,
    /// `None` when the mode needs a head this row does not have.
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub topology: String,
    pub row: String,
    pub best_dev_loss: f64,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Train and evaluate the full ladder: both topologies, five cumulative
/// rows, three inference modes per trained model.
pub fn run_ablation_ladder(config: &AblationConfig, out_dir: &Path) -> Result<AblationReport> {
    config.train.validate()?;
    let data = generate(&config.task, config.n_train + config.n_dev + config.n_test)?;
    let train_set = &data[..config.n_train];
    let dev_set = &data[config.n_train..config.n_train + config.n_dev];
    let test_set = &data[config.n_train + config.n_dev..];

    let topologies = [
        (
            "progressive".to_string(),
            Topology::Progressive {
                acoustic_layers: config.encoder_layers / 2,
                textual_layers: config.encoder_layers - config.encoder_layers / 2,
            },
        ),
        (
            "synchronous".to_string(),
            Topology::Synchronous {
                layers: config.encoder_layers,
            },
        ),
    ];
    let modes = [DecodeMode::CtcGreedy, DecodeMode::AttnOnly, DecodeMode::Rescoring];

    let mut rows = Vec::new();
    for (topo_name, topology) in topologies {
        for (row_name, spec) in ladder_specs(config, topology)? {
            let run_dir = out_dir.join(format!("{topo_name}-{row_name}"));
            let outcome = train(&spec, train_set, dev_set, &config.train, &run_dir, None)?;
            let mut cells = Vec::new();
            for mode in modes {
                let decode = DecodeConfig {
                    mode,
                    beam: config.beam,
                    lambda: config.lambda,
                    ..Default::default()
                };
                let needs_xctc = matches!(mode, DecodeMode::CtcGreedy | DecodeMode::CtcPrefix)
                    || (mode == DecodeMode::Rescoring && config.lambda > 0.0);
                let report = if needs_xctc && !spec.needs_head(HeadKind::Xctc) {
                    None
                } else {
                    Some(evaluate(&outcome.model, test_set, &decode)?)
                };
                cells.push(AblationCell { mode, report });
            }
            rows.push(AblationRow {
                topology: topo_name.clone(),
                row: row_name,
                best_dev_loss: outcome.best_dev_loss,
                cells,
            });
        }
    }
    let report = AblationReport { rows };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
