//! The five commands, callable in-process.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uniseq_core::decoding::{
    all_candidate_search, beam_search, build_trie, trie_beam_search, CandidateNorm, DecodeConfig, ModelScorer,
};
use uniseq_core::metrics::{EvalReport, MetricSet};
use uniseq_core::model::{checkpoint, ModelParams};
use uniseq_core::tasks::{mix_batch, Category, Sample, TaskKind, TaskStreams};
use uniseq_core::tokenization::{TokenKind, UnifiedVocab, BOS, MASK, PAD, SPECIAL_COUNT};
use uniseq_core::trainer::{train_epoch, OptimizerState, TrainOptions, TrainRecord};

use crate::config::{require, RunConfig};
use crate::corpus::{load_corpus, parse_task, save_corpus, CorpusRecord};
use crate::error::{CliError, CliResult};
use crate::synthetic::{generate, train_vocab, SyntheticOptions, VocabSizes};

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Run settings stored next to a checkpoint so generation and evaluation
/// rebuild sources the same way training did.
pub fn run_sidecar(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".run.json")
}

pub fn timing_sidecar(log: &Path) -> PathBuf {
    with_suffix(log, ".timing")
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

pub fn load_vocab(path: &Path) -> CliResult<UnifiedVocab> {
    UnifiedVocab::load(path).map_err(|e| CliError::data(format!("cannot load vocab {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> CliResult<ModelParams> {
    checkpoint::load(path).map_err(|e| CliError::data(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn save_checkpoint(params: &ModelParams, cfg: &RunConfig, path: &Path) -> CliResult<()> {
    checkpoint::save(params, path)?;
    write_file(&run_sidecar(path), serde_json::to_string_pretty(cfg)?.as_bytes())
}

/// Step log without wall time plus a timing sidecar.
struct RunLog {
    log: Option<File>,
    timing: Option<File>,
}

impl RunLog {
    fn open(path: Option<PathBuf>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self { log: None, timing: None });
        };
        let create = |p: &Path| File::create(p).map_err(|e| CliError::data(format!("cannot write {}: {e}", p.display())));
        Ok(Self { log: Some(create(&path)?), timing: Some(create(&timing_sidecar(&path))?) })
    }

    fn line(&mut self, s: &str) -> CliResult<()> {
        if let Some(f) = &mut self.log {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }

    fn record(&mut self, r: &TrainRecord) -> CliResult<()> {
        self.line(&r.log_line())?;
        if let Some(f) = &mut self.timing {
            writeln!(f, "step={} seconds={:.3}", r.step, r.seconds)?;
        }
        Ok(())
    }
}

pub struct GenSyntheticArgs {
    pub out: PathBuf,
    pub vocab: Option<PathBuf>,
    pub options: SyntheticOptions,
    pub sizes: VocabSizes,
}

/// Writes the corpus and a tokenizer trained on it. Returns the vocab path.
pub fn gen_synthetic(args: &GenSyntheticArgs) -> CliResult<PathBuf> {
    let records = generate(&args.options)?;
    save_corpus(&args.out, &records)?;
    let vocab = train_vocab(&records, args.sizes)?;
    let vocab_path = args.vocab.clone().unwrap_or_else(|| with_suffix(&args.out, ".vocab"));
    vocab.save(&vocab_path).map_err(|e| CliError::data(format!("cannot write {}: {e}", vocab_path.display())))?;
    Ok(vocab_path)
}

fn build_samples(records: &[CorpusRecord], vocab: &UnifiedVocab, cfg: &RunConfig, seed: u64) -> CliResult<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_sample(vocab, &cfg.image, cfg.mask_rate, &mut rng).map_err(|e| e.context(format!("record {i}"))))
        .collect()
}

fn train_options<'c>(cfg: &RunConfig, params: &ModelParams, on_record: &'c mut dyn FnMut(&TrainRecord) -> uniseq_core::Result<()>) -> TrainOptions<'c> {
    TrainOptions {
        dropout: params.config.dropout,
        seed: cfg.seed.wrapping_add(2),
        checkpoint_every: None,
        on_checkpoint: None,
        on_record: Some(on_record),
    }
}

fn io_to_core(e: CliError) -> uniseq_core::Error {
    uniseq_core::Error::Io(std::io::Error::other(e.message))
}

pub struct TrainSummary {
    pub records: Vec<TrainRecord>,
    pub checkpoint: PathBuf,
}

/// Mixed-task training from a fresh initialization.
pub fn pretrain(cfg: &RunConfig) -> CliResult<TrainSummary> {
    cfg.validate()?;
    let vocab = load_vocab(require(&cfg.paths.vocab, "vocab", "vocab")?)?;
    let corpus = load_corpus(require(&cfg.paths.corpus, "corpus", "corpus")?)?;
    let out = require(&cfg.paths.checkpoint, "checkpoint", "checkpoint")?.to_path_buf();
    let model = cfg.model.resolve(vocab.total(), &cfg.image)?;
    let mut params = ModelParams::init(&model, cfg.seed)?;

    let samples = build_samples(&corpus, &vocab, cfg, cfg.seed.wrapping_add(1))?;
    let mut streams = TaskStreams::from_samples(samples);
    let counts = cfg.mix.counts(cfg.batch_size)?;
    for (c, n) in Category::ALL.iter().zip(counts) {
        if n > 0 && streams.stream(*c).is_empty() {
            return Err(CliError::usage(format!(
                "corpus has no {c:?} records but the mix draws {n} per batch; adjust mix.ratio"
            )));
        }
    }
    let mix = cfg.mix;
    let batch_size = cfg.batch_size;
    let batches = (0..cfg.total_steps).map(move |_| mix_batch(&mut streams, &mix, batch_size).expect("streams checked nonempty"));

    let mut state = OptimizerState::new(&params, cfg.total_steps);
    cfg.optimizer.apply(&mut state);
    let mut log = RunLog::open(cfg.log_path())?;
    log.line(&format!(
        "pretrain params={} steps={} batch={} mix={:?} seed={}",
        params.parameter_count(),
        cfg.total_steps,
        cfg.batch_size,
        cfg.mix.ratio,
        cfg.seed
    ))?;
    let mut on_record = |r: &TrainRecord| log.record(r).map_err(io_to_core);
    let mut opts = train_options(cfg, &params, &mut on_record);
    let every = cfg.checkpoint_every.filter(|&e| e > 0);
    let mut periodic = |step: usize, p: &ModelParams| {
        save_checkpoint(p, cfg, &with_suffix(&out, &format!(".step{step}"))).map_err(io_to_core)
    };
    if every.is_some() {
        opts.checkpoint_every = every;
        opts.on_checkpoint = Some(&mut periodic);
    }
    let records = train_epoch(&mut params, &mut state, batches, opts)?;
    save_checkpoint(&params, cfg, &out)?;
    log.line(&format!("done steps={}", records.len()))?;
    Ok(TrainSummary { records, checkpoint: out })
}

/// Metric family used to score a task, if any.
pub fn metric_set(kind: TaskKind) -> Option<MetricSet> {
    match kind {
        TaskKind::Classification | TaskKind::Vqa | TaskKind::Nli => Some(MetricSet::Labels),
        TaskKind::Caption => Some(MetricSet::Captions),
        TaskKind::Summarization => Some(MetricSet::Summaries),
        _ => None,
    }
}

/// Metric that selects the best fine-tuning epoch.
pub fn selection_metric(set: MetricSet) -> &'static str {
    match set {
        MetricSet::Labels => "accuracy",
        MetricSet::Captions => "cider",
        MetricSet::Summaries => "rouge_l",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Plain,
    Trie,
    AllCandidate,
}

impl DecodeMode {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "plain" | "beam" => Ok(Self::Plain),
            "trie" => Ok(Self::Trie),
            "all-candidate" => Ok(Self::AllCandidate),
            other => Err(CliError::usage(format!("unknown decode mode {other:?}; valid modes: plain, trie, all-candidate"))),
        }
    }
}

/// Text for generated ids; location and visual ids render as `<loc_k>` and `<code_k>`.
pub fn render_tokens(vocab: &UnifiedVocab, ids: &[u32]) -> CliResult<String> {
    let mut out: Vec<String> = Vec::new();
    let mut text: Vec<u32> = Vec::new();
    let flush = |text: &mut Vec<u32>, out: &mut Vec<String>| -> CliResult<()> {
        if !text.is_empty() {
            out.push(vocab.decode_text(text)?.trim().to_string());
            text.clear();
        }
        Ok(())
    };
    for &id in ids {
        match vocab.kind_of(id) {
            Some(TokenKind::Location) => {
                flush(&mut text, &mut out)?;
                out.push(format!("<loc_{}>", id - vocab.location_offset()));
            }
            Some(TokenKind::Visual) => {
                flush(&mut text, &mut out)?;
                out.push(format!("<code_{}>", id - vocab.visual_offset()));
            }
            _ => text.push(id),
        }
    }
    flush(&mut text, &mut out)?;
    Ok(out.join(" "))
}

pub struct Decoder<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a UnifiedVocab,
    pub cfg: &'a RunConfig,
    pub mode: DecodeMode,
    pub labels: Option<Vec<String>>,
}

impl Decoder<'_> {
    fn decode_config(&self) -> DecodeConfig {
        let mut d = self.cfg.decode.clone();
        // Text ids past the learned merges have no spelling.
        let assigned = (SPECIAL_COUNT + 256 + self.vocab.merges().len()) as u32;
        let unassigned = assigned..self.vocab.location_offset();
        let ids: BTreeSet<u32> = d.suppress.iter().copied().chain([PAD, BOS, MASK]).chain(unassigned).collect();
        d.suppress = ids.into_iter().collect();
        d
    }

    /// Decodes one record's source. `rng` drives MLM masking only.
    pub fn predict(&self, record: &CorpusRecord, rng: &mut ChaCha8Rng) -> CliResult<String> {
        let sample = record.to_source(self.vocab, &self.cfg.image, self.cfg.mask_rate, rng)?;
        let scorer = ModelScorer::new(self.params, &sample.source_text_ids, &sample.source_patches)?;
        let dc = self.decode_config();
        let labels = || {
            self.labels
                .as_ref()
                .filter(|l| !l.is_empty())
                .ok_or_else(|| CliError::usage("constrained decoding needs a label set (--labels or --labels-file)"))
        };
        match self.mode {
            DecodeMode::Plain => render_tokens(self.vocab, &beam_search(&scorer, &dc)?.tokens),
            DecodeMode::Trie => {
                let trie = build_trie(labels()?, self.vocab)?;
                Ok(trie_beam_search(&scorer, &trie, &dc)?.label)
            }
            DecodeMode::AllCandidate => {
                Ok(all_candidate_search(&scorer, labels()?, self.vocab, dc.length_penalty, CandidateNorm::Full)?.best)
            }
        }
    }

    pub fn evaluate(&self, kind: TaskKind, records: &[CorpusRecord]) -> CliResult<EvalReport> {
        let set = metric_set(kind)
            .ok_or_else(|| CliError::usage(format!("task {} has no evaluation metric", kind.name())))?;
        if records.is_empty() {
            return Err(CliError::data("empty corpus"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(4));
        let mut preds = Vec::with_capacity(records.len());
        let mut refs = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            preds.push(self.predict(r, &mut rng).map_err(|e| e.context(format!("record {i}")))?);
            refs.push(r.reference()?);
        }
        Ok(EvalReport::compute(set, &preds, &refs)?)
    }
}

/// Distinct reference strings, sorted.
pub fn label_set<'a>(records: impl IntoIterator<Item = &'a CorpusRecord>) -> CliResult<Vec<String>> {
    let mut out: Vec<String> = records.into_iter().map(|r| r.reference()).collect::<CliResult<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

fn of_task(records: Vec<CorpusRecord>, kind: TaskKind) -> Vec<CorpusRecord> {
    records.into_iter().filter(|r| r.task == kind.name()).collect()
}

pub struct FinetuneSummary {
    pub records: Vec<TrainRecord>,
    /// Selection metric per epoch, when a validation corpus is given.
    pub validation: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Single-task training from an existing checkpoint. With a validation
/// corpus the best epoch by the task's selection metric is kept; otherwise
/// the last epoch is.
pub fn finetune(cfg: &RunConfig) -> CliResult<FinetuneSummary> {
    cfg.validate()?;
    let init = require(&cfg.paths.init_checkpoint, "init_checkpoint", "init")?;
    let out = require(&cfg.paths.checkpoint, "checkpoint", "checkpoint")?.to_path_buf();
    let task = cfg.task.as_deref().ok_or_else(|| CliError::usage("missing task: set task in the config or pass --task"))?;
    let kind = parse_task(task)?;
    let mut log = RunLog::open(cfg.log_path())?;
    if cfg.total_steps == 0 {
        let bytes = fs::read(init).map_err(|e| CliError::data(format!("cannot read {}: {e}", init.display())))?;
        checkpoint::from_bytes(&bytes).map_err(|e| CliError::data(format!("cannot load checkpoint {}: {e}", init.display())))?;
        write_file(&out, &bytes)?;
        write_file(&run_sidecar(&out), serde_json::to_string_pretty(cfg)?.as_bytes())?;
        log.line(&format!("finetune task={} steps=0", kind.name()))?;
        return Ok(FinetuneSummary { records: Vec::new(), validation: Vec::new(), best_epoch: None });
    }
    let vocab = load_vocab(require(&cfg.paths.vocab, "vocab", "vocab")?)?;
    let mut params = load_checkpoint(init)?;
    if params.config.vocab_total != vocab.total() {
        return Err(CliError::usage(format!(
            "checkpoint vocab of {} does not match vocab file of {}",
            params.config.vocab_total,
            vocab.total()
        )));
    }
    let train = of_task(load_corpus(require(&cfg.paths.corpus, "corpus", "corpus")?)?, kind);
    if train.is_empty() {
        return Err(CliError::data(format!("corpus has no {} records", kind.name())));
    }
    let valid = match &cfg.paths.validation {
        Some(p) => of_task(load_corpus(p)?, kind),
        None => Vec::new(),
    };
    let set = metric_set(kind).filter(|_| !valid.is_empty());
    let labels = match set {
        Some(MetricSet::Labels) => Some(label_set(train.iter().chain(&valid))?),
        _ => None,
    };
    let samples = build_samples(&train, &vocab, cfg, cfg.seed.wrapping_add(1))?;

    let mut state = OptimizerState::new(&params, cfg.total_steps);
    cfg.optimizer.apply(&mut state);
    log.line(&format!(
        "finetune task={} train={} validation={} steps={} batch={} seed={}",
        kind.name(),
        train.len(),
        valid.len(),
        cfg.total_steps,
        cfg.batch_size,
        cfg.seed
    ))?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut all = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut epoch = 0;
    while state.t < cfg.total_steps {
        epoch += 1;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let remaining = cfg.total_steps - state.t;
        let batches: Vec<Vec<Sample>> = order
            .chunks(cfg.batch_size)
            .take(remaining)
            .map(|idx| idx.iter().map(|&i| samples[i].clone()).collect())
            .collect();
        let mut on_record = |r: &TrainRecord| log.record(r).map_err(io_to_core);
        let opts = train_options(cfg, &params, &mut on_record);
        all.extend(train_epoch(&mut params, &mut state, batches, opts)?);
        match set {
            Some(set) => {
                let dec = Decoder {
                    params: &params,
                    vocab: &vocab,
                    cfg,
                    mode: if labels.is_some() { DecodeMode::Trie } else { DecodeMode::Plain },
                    labels: labels.clone(),
                };
                let name = selection_metric(set);
                let value = dec.evaluate(kind, &valid)?.metrics[name];
                validation.push(value);
                let improved = best.is_none_or(|(_, b)| value > b);
                log.line(&format!("epoch={epoch} step={} validation_{name}={value:.6} best={improved}", state.t))?;
                if improved {
                    best = Some((epoch, value));
                    save_checkpoint(&params, cfg, &out)?;
                }
            }
            None => {
                log.line(&format!("epoch={epoch} step={}", state.t))?;
                save_checkpoint(&params, cfg, &out)?;
            }
        }
    }
    log.line(&format!("done steps={} best_epoch={}", state.t, best.map_or(epoch, |b| b.0)))?;
    Ok(FinetuneSummary { records: all, validation, best_epoch: best.map(|b| b.0) })
}

/// Run settings for decoding: an explicit config wins, then the
/// checkpoint's sidecar, then defaults with seed 0.
pub fn decoding_config(explicit: Option<&Path>, checkpoint: &Path) -> CliResult<RunConfig> {
    if let Some(p) = explicit {
        return RunConfig::load(p);
    }
    let side = run_sidecar(checkpoint);
    if side.exists() {
        return RunConfig::load(&side);
    }
    Ok(RunConfig::with_seed(0))
}

pub fn read_labels(inline: Option<&str>, file: Option<&Path>) -> CliResult<Option<Vec<String>>> {
    let mut labels: Vec<String> = Vec::new();
    if let Some(s) = inline {
        labels.extend(s.split(',').map(|l| l.trim().to_string()).filter(|l| !l.is_empty()));
    }
    if let Some(p) = file {
        let text = fs::read_to_string(p).map_err(|e| CliError::data(format!("cannot read labels {}: {e}", p.display())))?;
        labels.extend(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()));
    }
    Ok(if inline.is_none() && file.is_none() { None } else { Some(labels) })
}

pub fn generate_one(
    params: &ModelParams,
    vocab: &UnifiedVocab,
    cfg: &RunConfig,
    record: &CorpusRecord,
    mode: DecodeMode,
    labels: Option<Vec<String>>,
) -> CliResult<String> {
    let dec = Decoder { params, vocab, cfg, mode, labels };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    dec.predict(record, &mut rng)
}

/// Evaluates `task` records of `corpus`; writes the metric map to `report`
/// and the per-item quantities to a `.details.json` sidecar.
pub fn eval(
    params: &ModelParams,
    vocab: &UnifiedVocab,
    cfg: &RunConfig,
    corpus: &Path,
    kind: TaskKind,
    mode: DecodeMode,
    labels: Option<Vec<String>>,
    report: Option<&Path>,
) -> CliResult<EvalReport> {
    metric_set(kind).ok_or_else(|| CliError::usage(format!("task {} has no evaluation metric", kind.name())))?;
    let records = of_task(load_corpus(corpus)?, kind);
    if records.is_empty() {
        return Err(CliError::data("empty corpus"));
    }
    let dec = Decoder { params, vocab, cfg, mode, labels };
    let r = dec.evaluate(kind, &records)?;
    if let Some(path) = report {
        write_file(path, r.metrics_json()?.as_bytes())?;
        write_file(&with_suffix(path, ".details.json"), r.details_json()?.as_bytes())?;
    }
    Ok(r)
}
