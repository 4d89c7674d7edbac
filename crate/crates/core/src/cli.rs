//! Experiment command line: `gen`, `pretrain`, `unlearn`, `eval`, `ablate`,
//! `sweep` and `export`.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
use crate::data::{generate_corpus, Corpus, CorpusConfig, SplitSpec, CORPUS_FORMAT_VERSION};
use crate::engine::{pretrain, unlearn, PretrainConfig, RunHistory, UnlearnConfig};
use crate::error::Error;
use crate::eval::{
    evaluate_suite, export_embeddings, run_ablation, sweep_forget_fraction, SweepConfig, REPORT_FORMAT_VERSION,
};
use crate::io::{file_digest, write_atomic};
use crate::model::{ArchConfig, DualEncoderModel};
use crate::plot::render_sweep_plots;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Full experiment configuration. Every section is optional and defaults
/// are materialized; unknown keys anywhere are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ArchConfig,
    pub pretrain: PretrainConfig,
    pub unlearn: UnlearnConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    /// Replaces every seed in the configuration.
    pub fn apply_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.pretrain.seed = seed;
        self.unlearn.seed = seed;
        self.sweep.seed = seed;
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "cliperase", version, about = "Unlearning experiments for dual-encoder contrastive models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Contrastively pretrain a model on a corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Unlearn a forget set from a pretrained checkpoint.
    Unlearn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// class:ID[,ID..] | keyword:WORD | fraction:F
        #[arg(long)]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the forget and retain sets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Ablate the retention and consistency terms.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep the fraction of forgotten classes across methods.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        /// Start from this checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Export image and text embeddings as CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Written next to every output once a command finishes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub duration_secs: f64,
    pub format_versions: BTreeMap<String, u32>,
}

struct Run {
    command: &'static str,
    config: ExperimentConfig,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    started: Instant,
}

impl Run {
    fn new(command: &'static str, common: &Common) -> Result<Self, CliError> {
        let mut config = ExperimentConfig::load(common.config.as_deref())?;
        if let Some(seed) = common.seed {
            config.apply_seed(seed);
        }
        let mut run = Self {
            command,
            config,
            seed: common.seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        };
        if let Some(path) = &common.config {
            run.record_input(path)?;
        }
        Ok(run)
    }

    fn record_input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = file_digest(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    fn load_corpus(&mut self, path: &Path) -> Result<Corpus, CliError> {
        let corpus = Corpus::load(path)?;
        self.record_input(path)?;
        Ok(corpus)
    }

    fn load_checkpoint(&mut self, path: &Path) -> Result<(DualEncoderModel, RunHistory), CliError> {
        let ckpt = load_checkpoint(path)?;
        self.record_input(path)?;
        Ok(ckpt)
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn finish(self, manifest_path: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            duration_secs: self.started.elapsed().as_secs_f64(),
            format_versions: BTreeMap::from([
                ("corpus".to_string(), CORPUS_FORMAT_VERSION),
                ("checkpoint".to_string(), CHECKPOINT_FORMAT_VERSION),
                ("report".to_string(), REPORT_FORMAT_VERSION),
            ]),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_atomic(manifest_path, json.as_bytes())?;
        Ok(())
    }
}

fn manifest_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn parse_split(spec: &str) -> Result<SplitSpec, CliError> {
    spec.parse::<SplitSpec>().map_err(CliError::from)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(CliError::from)
}

/// Model architecture from the config, checked against the corpus.
fn arch_for(config: &ExperimentConfig, corpus: &Corpus) -> Result<ArchConfig, CliError> {
    let arch = config.model.clone();
    if arch.d_img != corpus.d_img {
        return Err(CliError::Usage(format!(
            "model.d_img = {} but the corpus has d_img = {}",
            arch.d_img, corpus.d_img
        )));
    }
    Ok(arch)
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen { common } => {
            let mut run = Run::new("gen", &common)?;
            let corpus = generate_corpus(&run.config.corpus)?;
            corpus.save(&common.out)?;
            run.output(&common.out);
            run.finish(&manifest_for(&common.out))
        }
        Command::Pretrain { corpus, common } => {
            let mut run = Run::new("pretrain", &common)?;
            let corpus = run.load_corpus(&corpus)?;
            let arch = arch_for(&run.config, &corpus)?;
            let model = DualEncoderModel::init(&arch, run.config.pretrain.seed)?;
            let (model, history) = pretrain(model, &corpus, &run.config.pretrain)?;
            save_checkpoint(&model, &history, &common.out)?;
            run.output(&common.out);
            run.finish(&manifest_for(&common.out))
        }
        Command::Unlearn {
            checkpoint,
            corpus,
            split,
            common,
        } => {
            let spec = parse_split(&split)?;
            let mut run = Run::new("unlearn", &common)?;
            let corpus = run.load_corpus(&corpus)?;
            let (model, _) = run.load_checkpoint(&checkpoint)?;
            let split = spec.apply(&corpus, run.config.sweep.seed)?;
            let (model, history) = unlearn(&model, &split, &run.config.unlearn)?;
            save_checkpoint(&model, &history, &common.out)?;
            run.output(&common.out);
            run.finish(&manifest_for(&common.out))
        }
        Command::Eval {
            checkpoint,
            corpus,
            split,
            common,
        } => {
            let spec = parse_split(&split)?;
            let mut run = Run::new("eval", &common)?;
            let corpus = run.load_corpus(&corpus)?;
            let (model, _) = run.load_checkpoint(&checkpoint)?;
            let split = spec.apply(&corpus, run.config.sweep.seed)?;
            let report = evaluate_suite(&model, &split, &corpus.class_prompts())?;
            write_text(&common.out, &report.to_json())?;
            let csv_path = common.out.with_extension("csv");
            write_text(&csv_path, &report.to_csv()?)?;
            run.output(&common.out);
            run.output(&csv_path);
            run.finish(&manifest_for(&common.out))
        }
        Command::Ablate {
            checkpoint,
            corpus,
            split,
            common,
        } => {
            let spec = parse_split(&split)?;
            let mut run = Run::new("ablate", &common)?;
            let corpus = run.load_corpus(&corpus)?;
            let (model, _) = run.load_checkpoint(&checkpoint)?;
            let split = spec.apply(&corpus, run.config.sweep.seed)?;
            let table = run_ablation(&model, &split, &run.config.unlearn)?;
            let csv_path = common.out.join("ablation.csv");
            write_text(&csv_path, &table.to_csv()?)?;
            let json_path = common.out.join("ablation.json");
            let json = serde_json::to_string_pretty(&table).map_err(|e| CliError::Runtime(e.to_string()))?;
            write_text(&json_path, &json)?;
            run.output(&csv_path);
            run.output(&json_path);
            run.finish(&common.out.join("manifest.json"))
        }
        Command::Sweep {
            corpus,
            checkpoint,
            common,
        } => {
            let mut run = Run::new("sweep", &common)?;
            let corpus = run.load_corpus(&corpus)?;
            let base = match checkpoint {
                Some(path) => run.load_checkpoint(&path)?.0,
                None => {
                    let arch = arch_for(&run.config, &corpus)?;
                    let model = DualEncoderModel::init(&arch, run.config.pretrain.seed)?;
                    pretrain(model, &corpus, &run.config.pretrain)?.0
                }
            };
            let sweep = &run.config.sweep;
            let result = sweep_forget_fraction(
                &base,
                &corpus,
                &sweep.methods,
                &sweep.fractions,
                &run.config.unlearn,
                sweep.seed,
            )?;
            let csv_path = common.out.join("sweep.csv");
            write_text(&csv_path, &result.to_csv()?)?;
            run.output(&csv_path);
            for row in &result.rows {
                let path = common
                    .out
                    .join("runs")
                    .join(format!("fraction{}_{}.json", row.fraction, row.method));
                let record = serde_json::json!({
                    "row": row,
                    "unlearn": UnlearnConfig { method: row.method, ..run.config.unlearn.clone() },
                });
                write_text(&path, &serde_json::to_string_pretty(&record).expect("json"))?;
                run.output(&path);
            }
            for plot in render_sweep_plots(&result, &common.out)? {
                run.output(&plot);
            }
            run.finish(&common.out.join("manifest.json"))
        }
        Command::Export {
            checkpoint,
            corpus,
            common,
        } => {
            let mut run = Run::new("export", &common)?;
            let corpus = run.load_corpus(&corpus)?;
            let (model, _) = run.load_checkpoint(&checkpoint)?;
            export_embeddings(&model, &corpus, &corpus.all_indices(), &common.out)?;
            run.output(&common.out);
            run.finish(&manifest_for(&common.out))
        }
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
