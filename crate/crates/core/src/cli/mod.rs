//! The `ctal` command line: one subcommand per pipeline stage.
//!
//! Every command resolves a [`RunConfig`] (defaults, then `--config` file,
//! then `--set key=value` and dedicated flags), and writes into its run
//! directory the resolved config (`config.resolved`), content hashes of its
//! inputs (`inputs.sha256`) and its log (`log.txt`).
//!
//! Exit codes: 0 success, 1 bad input, 2 internal error.

pub mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use serde_json::json;
use sha2::{Digest, Sha256};

pub use config::RunConfig;

use crate::audio::{write_feature_cache, FrontendConfig};
use crate::data::{self, load_pairs, read_manifest, PairExample};
use crate::error::{Error, Result};
use crate::finetune::{
    finetune, infer, label_examples, FinetuneModel, LabelSet, LabeledExample, TaskHead, Target,
};
use crate::metrics;
use crate::model::checkpoint::Checkpoint;
use crate::model::{count_parameters, CtalModel, ModelConfig, ParameterCount};
use crate::params::ParamStore;
use crate::pretrain::run_pretraining;
use crate::synth::{self, SynthConfig, SynthKind};
use crate::tensor::Tensor;
use crate::tokenizer::{train_bbpe, BbpeVocab};
use crate::CtalRng;

#[derive(Debug, Parser)]
#[command(name = "ctal", version, about = "Cross-modal audio/text Transformer toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", global = true, value_parser = config::parse_override)]
    pub set: Vec<(String, String)>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a byte-level BPE vocabulary from text lines or a manifest's transcripts.
    TrainTokenizer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1000)]
        vocab_size: usize,
    },
    /// Write a `.feat` cache file per manifest entry into the run directory.
    ExtractFeatures {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// MLM + MCAM pre-training; writes checkpoints and loss.csv.
    Pretrain {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Fine-tune on a labeled manifest, from a pre-trained checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Score a fine-tuned checkpoint on a labeled manifest, or score a prediction dump.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// `example_id,prediction,gold` CSV to score instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
    },
    /// Dump the fused identity embedding of every manifest entry.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Generate a synthetic paired corpus.
    Synth {
        #[arg(long, default_value = "emotion")]
        kind: String,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 0.6)]
        seconds: f64,
        #[arg(long, default_value_t = 1)]
        synonyms: usize,
    },
    /// Parameter table and per-module counts of a checkpoint or preset.
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Vocabulary size for `--preset` (defaults to the preset's own).
        #[arg(long)]
        vocab_size: Option<usize>,
    },
}

struct RunLogger {
    level: Mutex<log::LevelFilter>,
    file: Mutex<Option<File>>,
}

static LOGGER: RunLogger = RunLogger {
    level: Mutex::new(log::LevelFilter::Info),
    file: Mutex::new(None),
};

impl log::Log for RunLogger {
    fn enabled(&self, meta: &log::Metadata) -> bool {
        meta.level() <= *self.level.lock().unwrap()
    }

    fn log(&self, record: &log::Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = format!("[{}] {}\n", record.level(), record.args());
        if record.level() <= log::Level::Warn || *self.level.lock().unwrap() >= log::LevelFilter::Info {
            eprint!("{line}");
        }
        if let Some(f) = self.file.lock().unwrap().as_mut() {
            let _ = f.write_all(line.as_bytes());
        }
    }

    fn flush(&self) {
        if let Some(f) = self.file.lock().unwrap().as_mut() {
            let _ = f.flush();
        }
    }
}

fn setup_logging(quiet: bool, log_path: &Path) -> Result<()> {
    let level = if quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    *LOGGER.level.lock().unwrap() = level;
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(log::LevelFilter::Info);
    let f = File::create(log_path).map_err(|e| Error::io(log_path, e))?;
    *LOGGER.file.lock().unwrap() = Some(f);
    Ok(())
}

/// Git-style blob hash (`sha256("blob <len>\0" + bytes)`), hex encoded.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolved state shared by every command.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn seed(&self) -> Result<u64> {
        self.cfg.parse("seed")
    }

    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.out.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn write_hashes(&self) -> Result<()> {
        let mut lines = String::new();
        for p in &self.inputs {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            lines.push_str(&format!("{}  {}\n", blob_hash(&bytes), p.display()));
        }
        let total = blob_hash(lines.as_bytes());
        lines.push_str(&format!("{total}  (all inputs)\n"));
        self.write("inputs.sha256", lines)?;
        Ok(())
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.common.set.clone();
    if let Some(s) = cli.common.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(t) = cli.common.threads {
        overrides.push(("threads".into(), t.to_string()));
    }
    if let Some(o) = &cli.common.out {
        overrides.push(("out.dir".into(), o.display().to_string()));
    }
    let cfg = RunConfig::resolve(cli.common.config.as_deref(), &overrides)?;
    let threads: usize = cfg.parse("threads")?;
    if threads > 0 {
        // fails harmlessly if a pool already exists in this process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let out = PathBuf::from(cfg.get("out.dir"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    setup_logging(cli.common.quiet, &out.join("log.txt"))?;
    let mut run = Run {
        cfg,
        out,
        inputs: Vec::new(),
    };
    if let Some(c) = &cli.common.config {
        run.input(c);
    }
    let result = dispatch(&mut run, cli.command);
    run.write("config.resolved", run.cfg.to_text())?;
    run.write_hashes()?;
    log::logger().flush();
    result
}

fn dispatch(run: &mut Run, command: Command) -> Result<()> {
    match command {
        Command::TrainTokenizer { corpus, vocab_size } => cmd_train_tokenizer(run, &corpus, vocab_size),
        Command::ExtractFeatures { manifest } => {
            if let Some(m) = manifest {
                run.cfg.set("data.manifest", &m.display().to_string())?;
            }
            cmd_extract_features(run)
        }
        Command::Pretrain { manifest, tokenizer } => {
            set_path(run, "data.manifest", manifest)?;
            set_path(run, "tokenizer.path", tokenizer)?;
            cmd_pretrain(run)
        }
        Command::Finetune {
            task,
            checkpoint,
            manifest,
            test_manifest,
            tokenizer,
        } => {
            if let Some(t) = task {
                run.cfg.set("finetune.task", &t)?;
            }
            set_path(run, "finetune.checkpoint", checkpoint)?;
            set_path(run, "data.manifest", manifest)?;
            set_path(run, "data.test_manifest", test_manifest)?;
            set_path(run, "tokenizer.path", tokenizer)?;
            cmd_finetune(run)
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            predictions,
            task,
        } => {
            if let Some(t) = task {
                run.cfg.set("finetune.task", &t)?;
            }
            match (checkpoint, predictions) {
                (_, Some(p)) => cmd_score_predictions(run, &p),
                (Some(c), None) => {
                    let m = manifest.ok_or_else(|| Error::Config("evaluate needs --manifest".into()))?;
                    cmd_evaluate(run, &c, &m)
                }
                (None, None) => Err(Error::Config("evaluate needs --checkpoint or --predictions".into())),
            }
        }
        Command::Embed { checkpoint, manifest } => cmd_embed(run, &checkpoint, &manifest),
        Command::Synth {
            kind,
            n,
            speakers,
            seconds,
            synonyms,
        } => {
            let mut sc = SynthConfig::new(kind.parse()?, n);
            sc.speakers = speakers;
            sc.seconds = seconds;
            sc.synonyms = synonyms;
            sc.seed = run.seed()?;
            cmd_synth(run, &sc)
        }
        Command::Inspect {
            checkpoint,
            preset,
            vocab_size,
        } => cmd_inspect(run, checkpoint.as_deref(), preset.as_deref(), vocab_size),
    }
}

/// Stdout that tolerates a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn set_path(run: &mut Run, key: &str, value: Option<PathBuf>) -> Result<()> {
    match value {
        Some(v) => run.cfg.set(key, &v.display().to_string()),
        None => Ok(()),
    }
}

fn cmd_train_tokenizer(run: &mut Run, corpus: &Path, vocab_size: usize) -> Result<()> {
    let corpus = run.input(corpus);
    let text = std::fs::read_to_string(&corpus).map_err(|e| Error::io(&corpus, e))?;
    // manifest lines carry the transcript in the second column
    let lines: Vec<&str> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('\t').nth(1).unwrap_or(l))
        .collect();
    let vocab = train_bbpe(lines.iter().copied(), vocab_size)?;
    let path = run.out.join("vocab.bpe");
    vocab.save(&path)?;
    log::info!("trained {} tokens ({} merges) -> {}", vocab.len(), vocab.merges().len(), path.display());
    Ok(())
}

fn cmd_extract_features(run: &mut Run) -> Result<()> {
    let manifest = run.cfg.path("data.manifest")?;
    run.input(&manifest);
    let entries = read_manifest(&manifest, false)?;
    let frontend = FrontendConfig::default();
    let mut written = 0;
    let mut skipped = 0;
    for e in &entries {
        let target = data::feature_cache_path(&e.audio, Some(&run.out));
        match crate::audio::read_wav(&e.audio).and_then(|w| crate::audio::extract(&w, &frontend)) {
            Ok(f) => {
                write_feature_cache(&target, &f)?;
                written += 1;
            }
            Err(err) => {
                log::warn!("skipping {}: {err}", e.audio.display());
                skipped += 1;
            }
        }
    }
    log::info!("wrote {written} feature files, skipped {skipped}");
    if written == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(())
}

fn load_vocab(run: &mut Run) -> Result<(BbpeVocab, PathBuf)> {
    let path = run.cfg.path("tokenizer.path")?;
    run.input(&path);
    let vocab = BbpeVocab::load(&path)?;
    let abs = std::fs::canonicalize(&path).map_err(|e| Error::io(&path, e))?;
    Ok((vocab, abs))
}

fn load_manifest_pairs(run: &mut Run, key: &str, labeled: bool, vocab: &BbpeVocab) -> Result<Vec<PairExample>> {
    let path = run.cfg.path(key)?;
    run.input(&path);
    let entries = read_manifest(&path, labeled)?;
    let cache = run.cfg.opt("data.feature_dir").map(PathBuf::from);
    let (pairs, skipped) = load_pairs(&entries, vocab, &FrontendConfig::default(), cache.as_deref());
    if skipped > 0 {
        log::warn!("{skipped} unreadable entries skipped from {}", path.display());
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(pairs)
}

fn cmd_pretrain(run: &mut Run) -> Result<()> {
    let (vocab, _) = load_vocab(run)?;
    let corpus = load_manifest_pairs(run, "data.manifest", false, &vocab)?;
    let model_cfg = run.cfg.model_config(vocab.len())?;
    let pcfg = run.cfg.pretrain_config()?;
    let model = CtalModel::new(model_cfg, &mut CtalRng::seed_from_u64(pcfg.seed))?;
    log::info!(
        "pre-training {} parameters on {} pairs for {} steps",
        model.params.num_elements(),
        corpus.len(),
        pcfg.steps
    );
    let report = run_pretraining(pcfg, &corpus, model, Some(&run.out))?;
    if let (Some(first), Some(last)) = (report.records.first(), report.records.last()) {
        log::info!("loss {:.4} -> {:.4}", first.losses.total, last.losses.total);
    }
    Ok(())
}

fn task_head(task: &str, labels: &LabelSet) -> Result<TaskHead> {
    match task {
        "emotion" => Ok(TaskHead::Classification {
            classes: labels.names.len(),
        }),
        "sentiment" => Ok(TaskHead::Regression),
        "speaker" => Ok(TaskHead::Speaker {
            speakers: labels.names.len(),
        }),
        other => Err(Error::Config(format!(
            "finetune.task must be emotion, sentiment or speaker, got {other:?}"
        ))),
    }
}

fn cmd_finetune(run: &mut Run) -> Result<()> {
    let (vocab, vocab_path) = load_vocab(run)?;
    let pairs = load_manifest_pairs(run, "data.manifest", true, &vocab)?;
    let task = run.cfg.get("finetune.task").to_string();
    let labels = LabelSet::from_labels(pairs.iter().filter_map(|p| p.label.as_deref()));
    let head = task_head(&task, &labels)?;
    let fcfg = run.cfg.finetune_config()?;
    let seed = run.seed()?;
    let mut rng = CtalRng::seed_from_u64(seed);
    let mut model = match run.cfg.opt("finetune.checkpoint").map(PathBuf::from) {
        Some(path) => {
            run.input(&path);
            let ckpt = Checkpoint::load(&path)?;
            let (m, report) = FinetuneModel::from_pretrained(&ckpt, head.clone(), &mut rng)?;
            log::info!(
                "loaded {} tensors, dropped {}, fresh {}",
                report.loaded.len(),
                report.dropped.len(),
                report.fresh.len()
            );
            if m.config.vocab_size != vocab.len() {
                return Err(Error::Config(format!(
                    "checkpoint vocabulary {} differs from tokenizer {}",
                    m.config.vocab_size,
                    vocab.len()
                )));
            }
            m
        }
        None => FinetuneModel::new(run.cfg.model_config(vocab.len())?, head.clone(), &mut rng)?,
    };
    let train = label_examples(pairs, &head, Some(&labels))?;
    let history = finetune(&mut model, &train, &fcfg)?;
    let mut ckpt = model.checkpoint();
    ckpt.config.insert("head.labels".into(), labels.to_config_value());
    ckpt.config.insert("head.task".into(), task.clone());
    ckpt.config.insert("tokenizer.path".into(), vocab_path.display().to_string());
    ckpt.save(&run.out.join("model.ckpt"))?;

    let mut report = serde_json::Map::new();
    report.insert("task".into(), json!(task));
    report.insert("epoch_loss".into(), json!(history));
    report.insert("train".into(), score(&model, &train, &labels, &task)?.0);
    if run.cfg.opt("data.test_manifest").is_some() {
        let test_pairs = load_manifest_pairs(run, "data.test_manifest", true, &vocab)?;
        let test = label_examples(test_pairs, &head, Some(&labels))?;
        let (metrics, csv) = score(&model, &test, &labels, &task)?;
        report.insert("test".into(), metrics);
        run.write("predictions.csv", csv)?;
    }
    let text = serde_json::to_string_pretty(&report).expect("json") + "\n";
    run.write("metrics.json", &text)?;
    emit(&text);
    Ok(())
}

/// Metrics JSON and prediction CSV for a labeled set.
fn score(
    model: &FinetuneModel<f32>,
    data: &[LabeledExample],
    labels: &LabelSet,
    task: &str,
) -> Result<(serde_json::Value, String)> {
    let pairs: Vec<PairExample> = data.iter().map(|e| e.pair.clone()).collect();
    let out = infer(model, &pairs)?;
    let mut csv = String::from("example_id,prediction,gold\n");
    match &model.head {
        TaskHead::Regression => {
            let preds: Vec<f64> = out.iter().map(|o| o.outputs[0] as f64).collect();
            let golds: Vec<f64> = data
                .iter()
                .map(|e| match e.target {
                    Target::Score(s) => s,
                    Target::Class(c) => c as f64,
                })
                .collect();
            for ((e, p), g) in data.iter().zip(&preds).zip(&golds) {
                csv.push_str(&format!("{},{p},{g}\n", e.pair.id));
            }
            Ok((regression_metrics(&preds, &golds), csv))
        }
        _ => {
            let preds: Vec<usize> = out.iter().map(|o| metrics::argmax(&o.outputs)).collect();
            let golds: Vec<usize> = data
                .iter()
                .map(|e| match e.target {
                    Target::Class(c) => c,
                    Target::Score(_) => 0,
                })
                .collect();
            for ((e, &p), &g) in data.iter().zip(&preds).zip(&golds) {
                csv.push_str(&format!("{},{},{}\n", e.pair.id, labels.names[p], labels.names[g]));
            }
            let mut m = classification_metrics(&preds, &golds, labels.names.len());
            if task == "speaker" {
                let emb: Vec<Vec<f32>> = out.iter().map(|o| o.embedding.clone()).collect();
                if let Some(obj) = m.as_object_mut() {
                    obj.insert("eer".into(), verification_eer(&emb, &golds));
                }
            }
            Ok((m, csv))
        }
    }
}

fn metric_or_null(r: Result<(f64, f64)>, a: &str, b: &str) -> serde_json::Map<String, serde_json::Value> {
    let mut m = serde_json::Map::new();
    match r {
        Ok((x, y)) => {
            m.insert(a.into(), json!(x));
            m.insert(b.into(), json!(y));
        }
        Err(e) => {
            log::warn!("{a}/{b}: {e}");
            m.insert(a.into(), serde_json::Value::Null);
            m.insert(b.into(), serde_json::Value::Null);
        }
    }
    m
}

fn classification_metrics(preds: &[usize], golds: &[usize], classes: usize) -> serde_json::Value {
    let mut m = metric_or_null(metrics::wa_ua(preds, golds, classes), "wa", "ua");
    // WA is defined even when some class is absent
    if m["wa"].is_null() && !golds.is_empty() {
        let wa = preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / golds.len() as f64;
        m.insert("wa".into(), json!(wa));
    }
    m.insert("n".into(), json!(golds.len()));
    serde_json::Value::Object(m)
}

fn regression_metrics(preds: &[f64], golds: &[f64]) -> serde_json::Value {
    let mut m = metric_or_null(metrics::mae_corr(preds, golds), "mae", "corr");
    m.extend(metric_or_null(metrics::acc2_f1(preds, golds), "acc2", "f1"));
    m.insert("n".into(), json!(golds.len()));
    serde_json::Value::Object(m)
}

/// EER over every unordered pair of examples, scored by cosine similarity.
fn verification_eer(emb: &[Vec<f32>], speakers: &[usize]) -> serde_json::Value {
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let s = metrics::cosine(&emb[i], &emb[j]);
            if speakers[i] == speakers[j] {
                same.push(s);
            } else {
                diff.push(s);
            }
        }
    }
    match metrics::eer(&same, &diff) {
        Ok(e) => json!(e),
        Err(e) => {
            log::warn!("EER: {e}");
            serde_json::Value::Null
        }
    }
}

fn cmd_evaluate(run: &mut Run, checkpoint: &Path, manifest: &Path) -> Result<()> {
    run.input(checkpoint);
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = FinetuneModel::from_checkpoint(&ckpt)?;
    let labels = LabelSet::from_config_value(ckpt.config.get("head.labels").map_or("", String::as_str));
    let task = ckpt
        .config
        .get("head.task")
        .cloned()
        .unwrap_or_else(|| run.cfg.get("finetune.task").to_string());
    if run.cfg.opt("tokenizer.path").is_none() {
        if let Some(p) = ckpt.config.get("tokenizer.path") {
            run.cfg.set("tokenizer.path", p)?;
        }
    }
    let (vocab, _) = load_vocab(run)?;
    run.cfg.set("data.test_manifest", &manifest.display().to_string())?;
    let pairs = load_manifest_pairs(run, "data.test_manifest", true, &vocab)?;
    let data = label_examples(pairs, &model.head, Some(&labels))?;
    let (m, csv) = score(&model, &data, &labels, &task)?;
    run.write("predictions.csv", csv)?;
    let text = serde_json::to_string_pretty(&json!({ "task": task, "test": m })).expect("json") + "\n";
    run.write("metrics.json", &text)?;
    emit(&text);
    Ok(())
}

/// Scores an `example_id,prediction,gold` dump for the configured task.
fn cmd_score_predictions(run: &mut Run, path: &Path) -> Result<()> {
    run.input(path);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::format(path, format!("line {}: expected 3 columns", i + 1)));
        }
        rows.push((f[1].trim().to_string(), f[2].trim().to_string()));
    }
    let task = run.cfg.get("finetune.task").to_string();
    let m = if task == "sentiment" {
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::format(path, format!("{s:?} is not a number")))
        };
        let preds = rows.iter().map(|r| num(&r.0)).collect::<Result<Vec<_>>>()?;
        let golds = rows.iter().map(|r| num(&r.1)).collect::<Result<Vec<_>>>()?;
        regression_metrics(&preds, &golds)
    } else {
        let labels = LabelSet::from_labels(rows.iter().flat_map(|r| [r.0.as_str(), r.1.as_str()]));
        let preds = rows.iter().map(|r| labels.index(&r.0)).collect::<Result<Vec<_>>>()?;
        let golds = rows.iter().map(|r| labels.index(&r.1)).collect::<Result<Vec<_>>>()?;
        let present = LabelSet::from_labels(rows.iter().map(|r| r.1.as_str()));
        if present.names.len() != labels.names.len() {
            log::warn!("some predicted labels never occur as gold labels");
        }
        classification_metrics(&preds, &golds, labels.names.len())
    };
    let text = serde_json::to_string_pretty(&json!({ "task": task, "test": m })).expect("json") + "\n";
    run.write("metrics.json", &text)?;
    emit(&text);
    Ok(())
}

fn cmd_embed(run: &mut Run, checkpoint: &Path, manifest: &Path) -> Result<()> {
    run.input(checkpoint);
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = FinetuneModel::from_checkpoint(&ckpt)?;
    if run.cfg.opt("tokenizer.path").is_none() {
        if let Some(p) = ckpt.config.get("tokenizer.path") {
            run.cfg.set("tokenizer.path", p)?;
        }
    }
    let (vocab, _) = load_vocab(run)?;
    run.cfg.set("data.manifest", &manifest.display().to_string())?;
    let pairs = load_manifest_pairs(run, "data.manifest", false, &vocab)?;
    let out = infer(&model, &pairs)?;
    let mut store = ParamStore::new();
    for (p, o) in pairs.iter().zip(out) {
        let n = o.embedding.len();
        let name = if store.contains(&p.id) {
            format!("{}#{}", p.id, store.len())
        } else {
            p.id.clone()
        };
        store.insert(name, Tensor::from_vec(vec![n], o.embedding)?);
    }
    let mut cfg = BTreeMap::new();
    cfg.insert("embed.count".into(), store.len().to_string());
    cfg.insert("embed.dim".into(), (2 * model.config.hidden).to_string());
    let path = run.out.join("embeddings.ckpt");
    Checkpoint::new(cfg, store).save(&path)?;
    log::info!("wrote {} embeddings to {}", pairs.len(), path.display());
    Ok(())
}

fn cmd_synth(run: &mut Run, sc: &SynthConfig) -> Result<()> {
    let utts = synth::generate(sc)?;
    let files = synth::write_corpus(&utts, &run.out)?;
    log::info!(
        "wrote {} {:?} utterances: {} and {}",
        utts.len(),
        sc.kind,
        files.manifest.display(),
        files.labeled.display()
    );
    if sc.kind == SynthKind::Speaker {
        log::info!("speakers: {}", sc.speakers);
    }
    Ok(())
}

/// Tab-separated parameter table followed by per-module totals.
pub fn parameter_report(shapes: &[(String, Vec<usize>)]) -> String {
    let mut out = String::from("name\tshape\tcount\n");
    for (name, shape) in shapes {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        out.push_str(&format!("{name}\t{}\t{}\n", dims.join("x"), shape.iter().product::<usize>()));
    }
    let count = ParameterCount::from_specs(shapes.iter().map(|(n, s)| (n.as_str(), s.as_slice())));
    out.push('\n');
    for (module, n) in &count.per_module {
        out.push_str(&format!("module\t{module}\t{n}\n"));
    }
    out.push_str(&format!("total\t{}\n", count.total));
    out
}

fn cmd_inspect(run: &mut Run, checkpoint: Option<&Path>, preset: Option<&str>, vocab: Option<usize>) -> Result<()> {
    let shapes: Vec<(String, Vec<usize>)> = match (checkpoint, preset) {
        (Some(path), _) => {
            run.input(path);
            let ckpt = Checkpoint::load(path)?;
            ckpt.params
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect()
        }
        (None, Some(name)) => {
            let cfg = ModelConfig::preset(name, vocab)?;
            let total = count_parameters(&cfg).total;
            log::info!("preset {name}: {total} parameters");
            crate::model::backbone_specs(&cfg)
                .into_iter()
                .chain(crate::model::pretrain_head_specs(&cfg))
                .map(|(n, s, _)| (n, s))
                .collect()
        }
        (None, None) => return Err(Error::Config("inspect needs --checkpoint or --preset".into())),
    };
    let report = parameter_report(&shapes);
    run.write("parameters.tsv", &report)?;
    emit(&report);
    Ok(())
}
