//! `smsdc` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical abort.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{generate_synthetic, write_features, FeatureFile, FeatureItem, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::gradcheck::suite::{run_suite, TOLERANCE};
use crate::joint::Side;
use crate::train::{self, Checkpoint, Dataset, TrainConfig};

pub const SYNTH_VIDEO_FILE: &str = "video.smdc";
pub const SYNTH_TEXT_FILE: &str = "text.smdc";
pub const SYNTH_MANIFEST_FILE: &str = "manifest.tsv";
pub const SYNTH_CONFIG_FILE: &str = "train.conf";

#[derive(Debug, Parser)]
#[command(name = "smsdc", version, about = "Dual-encoder video/text retrieval with stacked multi-scale dilated convolutions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and keep the checkpoint with the best validation RSum.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` applied after the config file; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Report retrieval metrics of a checkpoint on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Print `direction metric value` lines instead of the table.
        #[arg(long)]
        records: bool,
    },
    /// Write joint embeddings of one modality as a feature file.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        side: Side,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one split; all splits by default.
        #[arg(long)]
        split: Option<Split>,
    },
    /// Generate a synthetic paired corpus and a matching training config.
    SynthData {
        /// `key=value` settings, e.g. `train=500 val=100 noise=0.1`.
        #[arg(long, num_args = 0..)]
        spec: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks; fails if any error reaches 1e-4.
    GradCheck {
        /// A check name, `ops`, `modules` or `all`.
        #[arg(long)]
        module: Option<String>,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    match execute(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train { config, overrides } => {
            let mut cfg = TrainConfig::load(&config)?;
            cfg.resolve_paths(config.parent().unwrap_or(Path::new("")));
            for o in &overrides {
                cfg.apply_override(o)?;
            }
            cfg.validate()?;
            let data = Dataset::load(&cfg)?;
            let outcome = train::train(&cfg, &data, Some(&cfg.output_dir))?;
            write_out(out, &outcome.log_text())?;
            write_out(
                out,
                &format!(
                    "best epoch {} val RSum {:.4} -> {}\n",
                    outcome.best.epoch,
                    outcome.best.best_rsum,
                    cfg.output_dir.join(train::BEST_CHECKPOINT).display()
                ),
            )
        }
        Command::Evaluate {
            checkpoint,
            split,
            records,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = train::model_from_checkpoint(&ckpt)?;
            let data = Dataset::load(&ckpt.config)?;
            let eval = train::evaluate(&model, &data, split)?;
            write_out(out, &if records { eval.records() } else { eval.table() })
        }
        Command::Embed {
            checkpoint,
            side,
            out: path,
            split,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = train::model_from_checkpoint(&ckpt)?;
            let data = Dataset::load(&ckpt.config)?;
            let (ids, e) = train::embed_side(&model, &data, side, split)?;
            let items = ids
                .iter()
                .enumerate()
                .map(|(i, &id)| FeatureItem::new(id, 1, e.row_slice(i).iter().map(|&v| v as f32).collect()))
                .collect();
            let file = FeatureFile::new(e.cols(), items)?;
            write_features(&file, &path)?;
            write_out(
                out,
                &format!("wrote {} {} embeddings to {}\n", ids.len(), side.name(), path.display()),
            )
        }
        Command::SynthData { spec, out: dir } => {
            let mut s = SynthSpec::default();
            for a in spec.iter().flat_map(|a| a.split_whitespace()) {
                s.apply(a)?;
            }
            let corpus = generate_synthetic(&s)?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_features(&corpus.video, dir.join(SYNTH_VIDEO_FILE))?;
            write_features(&corpus.text, dir.join(SYNTH_TEXT_FILE))?;
            corpus.manifest.write(dir.join(SYNTH_MANIFEST_FILE))?;
            let cfg = synth_config(&s);
            let path = dir.join(SYNTH_CONFIG_FILE);
            let text = format!("# synthetic corpus: {}\n{}", s.describe(), cfg.to_text());
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            write_out(out, &format!("wrote {} ({})\n", dir.display(), s.describe()))
        }
        Command::GradCheck { module } => {
            let results = run_suite(module.as_deref())?;
            let mut failed = Vec::new();
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                write_out(
                    out,
                    &format!(
                        "{status:<4} {:<22} max_rel_err {:.3e} over {} coordinates ({} at kinks)\n",
                        r.name,
                        r.report.max_relative_error,
                        r.report.coordinates,
                        r.report.skipped
                    ),
                )?;
                if !r.passed() {
                    failed.push(r.name);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numerical(format!(
                    "gradient check above {TOLERANCE:e}: {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

/// Toy-sized configuration whose input widths match a synthetic corpus.
/// Data paths are relative to the directory holding the config.
pub fn synth_config(spec: &SynthSpec) -> TrainConfig {
    TrainConfig {
        video_input_dim: spec.video_dim,
        text_d_model: spec.text_dim,
        text_ffn_dim: 4 * spec.text_dim,
        seed: spec.seed,
        video_features: PathBuf::from(SYNTH_VIDEO_FILE),
        text_features: PathBuf::from(SYNTH_TEXT_FILE),
        manifest: PathBuf::from(SYNTH_MANIFEST_FILE),
        output_dir: PathBuf::from("run"),
        ..TrainConfig::toy()
    }
}
