//! Command-line driver: synthetic corpora, pre-training, fine-tuning,
//! generation and evaluation.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod synthetic;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{DecodeMode, GenSyntheticArgs};
use crate::config::RunConfig;
use crate::corpus::{parse_task, CorpusRecord};
use crate::error::{CliError, CliResult, ExitCode};
use crate::synthetic::{SyntheticOptions, VocabSizes};

#[derive(Parser, Debug)]
#[command(name = "uniseq", version, about = "Unified-vocabulary multimodal sequence-to-sequence toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic shapes corpus and a tokenizer trained on it.
    GenSynthetic(GenArgs),
    /// Train a fresh model on mixed-task batches.
    Pretrain(TrainArgs),
    /// Continue training a checkpoint on one task.
    Finetune(TrainArgs),
    /// Decode one record and print the output.
    Generate(GenerateArgs),
    /// Decode every record of a task and write a metric report.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Tokenizer output; defaults to the corpus path with `.vocab` appended.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    image_side: usize,
    /// Comma-separated task names to cycle through instead of the default mix.
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long, default_value_t = 512)]
    text_vocab: usize,
    #[arg(long, default_value_t = 64)]
    location_bins: usize,
    #[arg(long, default_value_t = 16)]
    visual_codes: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Starting checkpoint (fine-tuning).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
}

impl TrainArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match (&self.config, self.seed) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(seed)) => RunConfig::with_seed(seed),
            (None, None) => return Err(CliError::usage("a seed is required: pass --seed or a --config with one")),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.total_steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.peak_lr = v;
        }
        if let Some(t) = &self.task {
            cfg.task = Some(t.clone());
        }
        let paths = [
            (&self.corpus, &mut cfg.paths.corpus),
            (&self.vocab, &mut cfg.paths.vocab),
            (&self.checkpoint, &mut cfg.paths.checkpoint),
            (&self.init, &mut cfg.paths.init_checkpoint),
            (&self.validation, &mut cfg.paths.validation),
            (&self.log, &mut cfg.paths.log),
        ];
        for (flag, slot) in paths {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Run settings; defaults to the checkpoint's `.run.json` sidecar.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: String,
    /// plain, trie or all-candidate.
    #[arg(long, default_value = "plain")]
    mode: String,
    /// Comma-separated closed label set for trie or all-candidate decoding.
    #[arg(long)]
    labels: Option<String>,
    /// One label per line.
    #[arg(long)]
    labels_file: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    length_penalty: Option<f64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// JSON file holding one corpus record.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    corpus: PathBuf,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

struct Prepared {
    params: uniseq_core::model::ModelParams,
    vocab: uniseq_core::tokenization::UnifiedVocab,
    cfg: RunConfig,
    kind: uniseq_core::tasks::TaskKind,
    mode: DecodeMode,
    labels: Option<Vec<String>>,
}

impl DecodeArgs {
    fn prepare(&self) -> CliResult<Prepared> {
        let kind = parse_task(&self.task)?;
        let mode = DecodeMode::parse(&self.mode)?;
        let labels = commands::read_labels(self.labels.as_deref(), self.labels_file.as_deref())?;
        if mode != DecodeMode::Plain && labels.as_ref().is_none_or(|l| l.is_empty()) {
            return Err(CliError::usage(format!("--mode {} needs --labels or --labels-file", self.mode)));
        }
        let mut cfg = commands::decoding_config(self.config.as_deref(), &self.checkpoint)?;
        if let Some(v) = self.beam {
            cfg.decode.beam_size = v;
        }
        if let Some(v) = self.max_len {
            cfg.decode.max_len = v;
        }
        if let Some(v) = self.length_penalty {
            cfg.decode.length_penalty = v;
        }
        cfg.validate()?;
        let params = commands::load_checkpoint(&self.checkpoint)?;
        let vocab = commands::load_vocab(&self.vocab)?;
        if params.config.vocab_total != vocab.total() {
            return Err(CliError::usage(format!(
                "checkpoint vocab of {} does not match vocab file of {}",
                params.config.vocab_total,
                vocab.total()
            )));
        }
        Ok(Prepared { params, vocab, cfg, kind, mode, labels })
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenSynthetic(a) => {
            let tasks = a.tasks.iter().map(|t| parse_task(t)).collect::<CliResult<Vec<_>>>()?;
            if a.image_side < 8 {
                return Err(CliError::usage("image side must be at least 8"));
            }
            let args = GenSyntheticArgs {
                out: a.out.clone(),
                vocab: a.vocab,
                options: SyntheticOptions { records: a.n, seed: a.seed, image_side: a.image_side, tasks },
                sizes: VocabSizes { text: a.text_vocab, location_bins: a.location_bins, visual: a.visual_codes },
            };
            let vocab = commands::gen_synthetic(&args)?;
            println!("wrote {} records to {} and vocab to {}", a.n, a.out.display(), vocab.display());
        }
        Command::Pretrain(a) => {
            let s = commands::pretrain(&a.resolve()?)?;
            if let (Some(first), Some(last)) = (s.records.first(), s.records.last()) {
                println!("pretrained {} steps: loss {:.6} -> {:.6}", s.records.len(), first.loss, last.loss);
            }
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Finetune(a) => {
            let s = commands::finetune(&a.resolve()?)?;
            println!("finetuned {} steps", s.records.len());
            for (i, v) in s.validation.iter().enumerate() {
                println!("epoch {} validation {v:.6}", i + 1);
            }
            if let Some(e) = s.best_epoch {
                println!("best epoch {e}");
            }
        }
        Command::Generate(a) => {
            let p = a.decode.prepare()?;
            let text = fs::read_to_string(&a.input)
                .map_err(|e| CliError::data(format!("cannot read {}: {e}", a.input.display())))?;
            let mut record: CorpusRecord =
                serde_json::from_str(&text).map_err(|e| CliError::data(format!("bad input record: {e}")))?;
            record.task = p.kind.name().to_string();
            let out = commands::generate_one(&p.params, &p.vocab, &p.cfg, &record, p.mode, p.labels)?;
            println!("{out}");
        }
        Command::Eval(a) => {
            let p = a.decode.prepare()?;
            let r = commands::eval(&p.params, &p.vocab, &p.cfg, &a.corpus, p.kind, p.mode, p.labels, a.report.as_deref())?;
            if a.report.is_none() {
                println!("{}", r.metrics_json()?);
            }
        }
    }
    Ok(())
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
            let _ = e.print();
            return if e.use_stderr() { ExitCode::Usage as i32 } else { ExitCode::Success as i32 };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::Success as i32,
        Err(e) => {
            eprintln!("error: {e}");
            e.code as i32
        }
    }
}
