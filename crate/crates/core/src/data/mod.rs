//! Deterministic synthetic "speech translation" task, dataset I/O,
//! vocabulary files, and batching.
//!
//! A sample is a triple: feature frames (noisy per-symbol embeddings of
//! the transcript, upsampled `r`-fold), the transcript itself, and a
//! translation derived from the transcript by window reversal plus a
//! context-dependent substitution. The substitution makes the translation
//! depend on cross-position context, so predicting it frame-wise requires
//! more than local transcription.

use crate::ctc::LabelSequence;
use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One training triple: features, transcript, translation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// T0 x d_in feature frames.
    pub features: Vec<Vec<f64>>,
    pub transcript: Vec<usize>,
    pub translation: Vec<usize>,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.features.len()
    }

    pub fn feature_matrix(&self) -> Array2<f64> {
        let t = self.features.len();
        let d = self.features.first().map_or(0, Vec::len);
        Array2::from_shape_fn((t, d), |(i, j)| self.features[i][j])
    }

    pub fn transcript_labels(&self) -> Result<LabelSequence> {
        LabelSequence::new(self.transcript.clone())
    }

    pub fn translation_labels(&self) -> Result<LabelSequence> {
        LabelSequence::new(self.translation.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Frames per transcript symbol; >= 2 keeps CTC targets feasible.
    pub upsample: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Window width for the reversal step of the translation transform.
    pub window: usize,
    /// Apply the context-dependent substitution after reversal.
    pub substitution: bool,
    /// Monotone relabeling instead of the full transform; a stand-in for
    /// simplified distilled targets.
    pub easy_target: bool,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            source_vocab: 6,
            target_vocab: 6,
            min_len: 3,
            max_len: 6,
            upsample: 4,
            feature_dim: 8,
            noise_sigma: 0.1,
            window: 2,
            substitution: true,
            easy_target: false,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.source_vocab == 0 || self.target_vocab == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "bad length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.upsample < 2 {
            return Err(Error::Config("upsample factor must be >= 2".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window width must be >= 1".into()));
        }
        Ok(())
    }

    /// The fixed per-symbol feature embedding, a pure function of the seed.
    fn symbol_embeddings(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e3779b97f4a7c15));
        Array2::from_shape_fn((self.source_vocab + 1, self.feature_dim), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        })
    }
}

/// Translation transform: reverse within consecutive windows of width `w`,
/// then substitute each symbol by `(symbol-1 + previous-symbol) mod Vy + 1`
/// where "previous" is the preceding symbol of the reversed sequence (0 for
/// the first position).
pub fn translate(spec: &SyntheticTaskSpec, transcript: &[usize]) -> Vec<usize> {
    if spec.easy_target {
        return transcript
            .iter()
            .map(|&k| (k - 1) % spec.target_vocab + 1)
            .collect();
    }
    let mut reversed: Vec<usize> = Vec::with_capacity(transcript.len());
    for chunk in transcript.chunks(spec.window) {
        reversed.extend(chunk.iter().rev().copied());
    }
    reversed
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let prev = if i == 0 { 0 } else { reversed[i - 1] };
            let base = if spec.substitution { k - 1 + prev } else { k - 1 };
            base % spec.target_vocab + 1
        })
        .collect()
}

/// Generate `n` samples; a pure function of `(spec, n)`.
pub fn generate(spec: &SyntheticTaskSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let embeddings = spec.symbol_embeddings();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let transcript: Vec<usize> =
            (0..len).map(|_| rng.gen_range(1..=spec.source_vocab)).collect();
        let translation = translate(spec, &transcript);
        let t0 = spec.upsample * len;
        let mut features = Vec::with_capacity(t0);
        for t in 0..t0 {
            let sym = transcript[t / spec.upsample];
            let row: Vec<f64> = (0..spec.feature_dim)
                .map(|j| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    embeddings[[sym, j]] + spec.noise_sigma * noise
                })
                .collect();
            features.push(row);
        }
        out.push(Sample {
            id: format!("utt{i:05}"),
            features,
            transcript,
            translation,
        });
    }
    Ok(out)
}

/// Split into train/dev/test by position; ids stay disjoint.
pub fn split(
    dataset: Vec<Sample>,
    dev_fraction: f64,
    test_fraction: f64,
) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let n = dataset.len();
    let n_dev = (n as f64 * dev_fraction).round() as usize;
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_train = n.saturating_sub(n_dev + n_test);
    let mut iter = dataset.into_iter();
    let train: Vec<_> = iter.by_ref().take(n_train).collect();
    let dev: Vec<_> = iter.by_ref().take(n_dev).collect();
    let test: Vec<_> = iter.collect();
    (train, dev, test)
}

/// One JSON record per line.
pub fn save_jsonl(path: &Path, dataset: &[Sample]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for sample in dataset {
        serde_json::to_writer(&mut file, sample)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: malformed record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// Vocabulary file: one token per line, index = line number (line 0 is the
/// blank token).
pub fn save_vocab(path: &Path, size: usize, prefix: &str) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "<blank>")?;
    for i in 1..=size {
        writeln!(file, "{prefix}{i}")?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<Vec<String>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    Ok(file.lines().collect::<std::io::Result<_>>()?)
}

/// A padded batch with explicit masks. Per-sample views stay available for
/// the lattice losses.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<Sample>,
    /// B x Tmax, true where a real frame exists.
    pub frame_mask: Array2<bool>,
    /// B x Tmax x d flattened to (B*Tmax) x d row-major.
    pub padded_features: Array2<f64>,
    pub max_frames: usize,
}

impl Batch {
    fn build(samples: Vec<Sample>) -> Self {
        let b = samples.len();
        let max_frames = samples.iter().map(Sample::frames).max().unwrap_or(0);
        let d = samples
            .first()
            .and_then(|s| s.features.first())
            .map_or(0, Vec::len);
        let mut frame_mask = Array2::from_elem((b, max_frames), false);
        let mut padded = Array2::zeros((b * max_frames, d));
        for (i, s) in samples.iter().enumerate() {
            for (t, row) in s.features.iter().enumerate() {
                frame_mask[[i, t]] = true;
                for (j, &v) in row.iter().enumerate() {
                    padded[[i * max_frames + t, j]] = v;
                }
            }
        }
        Self {
            samples,
            frame_mask,
            padded_features: padded,
            max_frames,
        }
    }

    pub fn total_frames(&self) -> usize {
        self.samples.iter().map(Sample::frames).sum()
    }
}

/// Greedy packing under a frame budget, dropping samples whose encoder
/// length cannot fit either CTC target. `subsample` is the frontend frame
/// reduction factor (2 for pair stacking).
pub fn build_batches(
    dataset: &[Sample],
    max_frames: usize,
    subsample: usize,
) -> Result<(Vec<Batch>, usize)> {
    if max_frames == 0 {
        return Err(Error::Config("batch frame budget must be positive".into()));
    }
    let mut batches = Vec::new();
    let mut current: Vec<Sample> = Vec::new();
    let mut current_frames = 0;
    let mut dropped = 0;
    for sample in dataset {
        let enc_frames = sample.frames().div_ceil(subsample);
        let x = sample.transcript_labels()?;
        let y = sample.translation_labels()?;
        if enc_frames < x.min_frames() || enc_frames < y.min_frames() {
            dropped += 1;
            continue;
        }
        if !current.is_empty() && current_frames + sample.frames() > max_frames {
            batches.push(Batch::build(std::mem::take(&mut current)));
            current_frames = 0;
        }
        current_frames += sample.frames();
        current.push(sample.clone());
    }
    if !current.is_empty() {
        batches.push(Batch::build(current));
    }
    Ok((batches, dropped))
}
