//! `bilctc`: data generation, training, decoding, alignment, evaluation,
//! checkpoint averaging, and the ablation ladder in one binary.

mod config;

use bilctc_core::ctc::forced_align;
use bilctc_core::data::{generate, load_jsonl, save_jsonl, save_vocab, Sample};
use bilctc_core::decode::{decode_translation, NbestRecord};
use bilctc_core::error::Error;
use bilctc_core::model::{average_checkpoints, BilCtcModel, Checkpoint, Topology};
use bilctc_core::train::{evaluate, run_ablation_ladder, train, AblationConfig};
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "bilctc", about = "Bilingual CTC laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig, Error> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => {
                let config = RunConfig::default();
                config.validate()?;
                Ok(config)
            }
        }
    }
}

#[derive(Args, Clone)]
struct DecodeFlags {
    /// ctc_greedy, ctc_prefix, attn_only, or rescoring.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    length_norm: Option<bool>,
}

impl DecodeFlags {
    fn apply(&self, config: &mut RunConfig) -> Result<(), Error> {
        if let Some(mode) = &self.mode {
            config.decode.mode = mode.parse()?;
        }
        if let Some(beam) = self.beam {
            config.decode.beam = beam;
        }
        if let Some(lambda) = self.lambda {
            config.decode.lambda = lambda;
        }
        if let Some(ln) = self.length_norm {
            config.decode.length_norm = ln;
        }
        config.decode.validate()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset splits and vocabulary files.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the task seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes the resolved config, per-step JSONL log,
    /// checkpoints, and the averaged final model into the run directory.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: PathBuf,
        /// Load train.jsonl/dev.jsonl from this directory instead of
        /// generating data.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        peak_lr: Option<f64>,
    },
    /// Decode a JSONL dataset to n-best lists.
    Decode {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: DecodeFlags,
    },
    /// Forced-align transcripts against the CTC head.
    Align {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a JSONL dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON report path; the report always prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: DecodeFlags,
    },
    /// Average the best k of the given checkpoints into one.
    AvgCheckpoints {
        #[arg(long)]
        out: PathBuf,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Run the cumulative feature ladder over both topologies.
    Ablation {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::InvalidInput(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
        Error::InfeasibleTarget { .. } => 4,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn load_model(path: &Path) -> Result<BilCtcModel, Error> {
    BilCtcModel::from_checkpoint(&Checkpoint::load(path)?)
}

#[derive(Serialize)]
struct AlignRecord {
    id: String,
    /// Frame-level class sequence (0 is blank).
    path: Vec<usize>,
    log_prob: f64,
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData {
            config,
            out_dir,
            seed,
        } => {
            let mut config = config.load()?;
            if let Some(seed) = seed {
                config.task.seed = seed;
            }
            std::fs::create_dir_all(&out_dir)?;
            let counts = &config.data;
            let total = counts.n_train + counts.n_dev + counts.n_test;
            let data = generate(&config.task, total)?;
            save_jsonl(&out_dir.join("train.jsonl"), &data[..counts.n_train])?;
            save_jsonl(
                &out_dir.join("dev.jsonl"),
                &data[counts.n_train..counts.n_train + counts.n_dev],
            )?;
            save_jsonl(
                &out_dir.join("test.jsonl"),
                &data[counts.n_train + counts.n_dev..],
            )?;
            save_vocab(&out_dir.join("src.vocab"), config.task.source_vocab, "s")?;
            save_vocab(&out_dir.join("tgt.vocab"), config.task.target_vocab, "t")?;
            config.save(&out_dir.join("config.toml"))?;
            println!(
                "wrote {} train / {} dev / {} test samples to {}",
                counts.n_train,
                counts.n_dev,
                counts.n_test,
                out_dir.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            out_dir,
            data_dir,
            steps,
            seed,
            peak_lr,
        } => {
            let mut config = config.load()?;
            if let Some(steps) = steps {
                config.train.steps = steps;
            }
            if let Some(seed) = seed {
                config.train.seed = seed;
            }
            if let Some(lr) = peak_lr {
                config.train.peak_lr = lr;
            }
            config.validate()?;
            std::fs::create_dir_all(&out_dir)?;
            config.save(&out_dir.join("config.toml"))?;

            let (train_set, dev_set): (Vec<Sample>, Vec<Sample>) = match data_dir {
                Some(dir) => (
                    load_jsonl(&dir.join("train.jsonl"))?,
                    load_jsonl(&dir.join("dev.jsonl"))?,
                ),
                None => {
                    let counts = &config.data;
                    let data = generate(&config.task, counts.n_train + counts.n_dev)?;
                    let dev = data[counts.n_train..].to_vec();
                    let mut data = data;
                    data.truncate(counts.n_train);
                    (data, dev)
                }
            };
            let mut log = std::io::BufWriter::new(std::fs::File::create(
                out_dir.join("log.jsonl"),
            )?);
            let outcome = train(
                &config.model,
                &train_set,
                &dev_set,
                &config.train,
                &out_dir,
                Some(&mut log),
            )?;
            println!(
                "trained {} steps (dropped {} infeasible samples), best dev loss {:.6}, final model {}{}",
                outcome.log.len(),
                outcome.dropped_samples,
                outcome.best_dev_loss,
                outcome.final_checkpoint.display(),
                if outcome.diverged { " [diverged early]" } else { "" },
            );
            Ok(())
        }
        Command::Decode {
            config,
            checkpoint,
            data,
            out,
            flags,
        } => {
            let mut config = config.load()?;
            flags.apply(&mut config)?;
            let model = load_model(&checkpoint)?;
            let samples = load_jsonl(&data)?;
            let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
            use std::io::Write;
            for sample in &samples {
                let hypotheses =
                    decode_translation(&model, &sample.feature_matrix(), &config.decode)?;
                let record = NbestRecord {
                    id: sample.id.clone(),
                    mode: config.decode.mode,
                    hypotheses,
                };
                writeln!(file, "{}", serde_json::to_string(&record)?)?;
            }
            println!("decoded {} utterances to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Align {
            checkpoint,
            data,
            out,
        } => {
            let model = load_model(&checkpoint)?;
            let samples = load_jsonl(&data)?;
            let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
            use std::io::Write;
            for sample in &samples {
                let encoded = model.encode_eval(&sample.feature_matrix())?;
                let probs = encoded.ctc_log_probs.ok_or_else(|| {
                    Error::Usage("alignment needs a model with a CTC head".into())
                })?;
                let (path, log_prob) = forced_align(&probs, &sample.transcript_labels()?)?;
                let record = AlignRecord {
                    id: sample.id.clone(),
                    path: path.classes().to_vec(),
                    log_prob,
                };
                writeln!(file, "{}", serde_json::to_string(&record)?)?;
            }
            println!("aligned {} utterances to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
            flags,
        } => {
            let mut config = config.load()?;
            flags.apply(&mut config)?;
            let model = load_model(&checkpoint)?;
            let samples = load_jsonl(&data)?;
            let report = evaluate(&model, &samples, &config.decode)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(out) = out {
                std::fs::write(out, json)?;
            }
            Ok(())
        }
        Command::AvgCheckpoints {
            out,
            k,
            checkpoints,
        } => {
            let avg = average_checkpoints(&checkpoints, k)?;
            avg.save(&out)?;
            println!(
                "averaged {} of {} checkpoints into {}",
                k.min(checkpoints.len()),
                checkpoints.len(),
                out.display()
            );
            Ok(())
        }
        Command::Ablation { config, out_dir } => {
            let config = config.load()?;
            let encoder_layers = match config.model.topology {
                Topology::Progressive {
                    acoustic_layers,
                    textual_layers,
                } => acoustic_layers + textual_layers,
                Topology::Synchronous { layers } => layers,
            };
            let ablation = AblationConfig {
                task: config.task.clone(),
                train: config.train.clone(),
                n_train: config.data.n_train,
                n_dev: config.data.n_dev,
                n_test: config.data.n_test,
                hidden: config.model.hidden,
                heads: config.model.heads,
                ffn: config.model.ffn,
                encoder_layers,
                decoder_layers: config.model.decoder_layers,
                beam: config.decode.beam,
                lambda: config.decode.lambda,
            };
            std::fs::create_dir_all(&out_dir)?;
            let report = run_ablation_ladder(&ablation, &out_dir)?;
            for row in &report.rows {
                let summary: Vec<String> = row
                    .cells
                    .iter()
                    .map(|c| match &c.report {
                        Some(r) => format!(
                            "{:?}: em {:.3} bleu {:.1}",
                            c.mode, r.translation_exact_match, r.translation_bleu
                        ),
                        None => format!("{:?}: n/a", c.mode),
                    })
                    .collect();
                println!("{}/{}: {}", row.topology, row.row, summary.join(", "));
            }
            println!("report written to {}", out_dir.join("ablation.json").display());
            Ok(())
        }
    }
}
