//! End-to-end runs: corpus generation, training, answer generation,
//! evaluation, the decoding benchmark and the modality ablation.
//!
//! Each run is a plain serializable value. Executing it writes its outputs
//! plus a `manifest.json` under `out_dir`; [`replay`] re-executes a manifest
//! after checking that its inputs are unchanged. Everything except measured
//! durations is a pure function of the run and its input files.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assembly::{assemble, ModalityMask};
use crate::data::{generate_splits, load_corpus, save_corpus, Corpus, CorpusStats, SplitSizes, SyntheticConfig};
use crate::decoding::{decode, ContextModel, DecodeConfig, Strategy};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_corpus, format_table, MetricsReport};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, DynModel, Model, ModelConfig, Scalar};
use crate::tokenizer::{normalize, Vocabulary, EOS_ID};
use crate::train::{assemble_corpus, train_sequences, EvalRecord, StepRecord, TrainConfig, TrainLog};

pub const TOOL_VERSION: &str = concat!("vidqa ", env!("CARGO_PKG_VERSION"));

/// Progress sink for long-running commands.
pub type Logger<'a> = &'a mut (dyn FnMut(&str) + Send);

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Per-example decoding seed, so results do not depend on example order or
/// thread scheduling.
pub fn example_seed(seed: u64, qid: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(qid.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

macro_rules! with_model {
    ($model:expr, $m:ident => $body:expr) => {
        match $model {
            DynModel::F32($m) => $body,
            DynModel::F64($m) => $body,
        }
    };
}

// ---------------------------------------------------------------- records

/// One decoded answer, as written to a generations file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub qid: String,
    pub strategy: Strategy,
    /// Decoding settings, with the per-example seed.
    pub config: DecodeConfig,
    /// Generated ids, including a final EOS if one was produced.
    pub tokens: Vec<u32>,
    pub text: String,
    pub duration_ms: f64,
}

pub fn generations_to_jsonl(gens: &[Generation]) -> String {
    let mut out = String::new();
    for g in gens {
        out.push_str(&serde_json::to_string(g).expect("generation serializes"));
        out.push('\n');
    }
    out
}

pub fn read_generations(path: &Path) -> Result<Vec<Generation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let g: Generation = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(g.qid.clone()) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate qid {}", g.qid),
            });
        }
        out.push(g);
    }
    Ok(out)
}

fn generate_one<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    ex: &crate::data::QaExample,
    mask: ModalityMask,
    cfg: &DecodeConfig,
) -> Result<Generation> {
    let seq = assemble(ex, vocab, mask, false, model.config.max_seq_len)?;
    let ctx = ContextModel::new(model, &seq.slots).map_err(|e| match e {
        Error::Overflow { len, max, .. } => Error::Overflow {
            qid: ex.qid.clone(),
            len,
            max,
        },
        other => other,
    })?;
    let config = DecodeConfig {
        seed: example_seed(cfg.seed, &ex.qid),
        ..cfg.clone()
    };
    let result = decode(&ctx, &config)?;
    Ok(Generation {
        qid: ex.qid.clone(),
        strategy: cfg.strategy,
        text: vocab.decode(result.answer_tokens(EOS_ID))?,
        tokens: result.tokens,
        duration_ms: result.duration.as_secs_f64() * 1e3,
        config,
    })
}

/// Decodes every example of `corpus`, in corpus order.
pub fn generate_corpus(
    model: &DynModel,
    vocab: &Vocabulary,
    corpus: &Corpus,
    mask: ModalityMask,
    cfg: &DecodeConfig,
) -> Result<Vec<Generation>> {
    cfg.validate()?;
    model.check_vocab(vocab)?;
    with_model!(model, m => corpus
        .examples
        .par_iter()
        .map(|ex| generate_one(m, vocab, ex, mask, cfg))
        .collect())
}

/// Scores generations against the corpus answers after normalization.
pub fn evaluate_generations(gens: &[Generation], gold: &Corpus) -> Result<MetricsReport> {
    let generated: BTreeMap<String, Vec<String>> = gens.iter().map(|g| (g.qid.clone(), normalize(&g.text))).collect();
    let gold: BTreeMap<String, Vec<String>> = gold
        .examples
        .iter()
        .map(|e| (e.qid.clone(), normalize(&e.answer)))
        .collect();
    evaluate_corpus(&generated, &gold)
}

fn train_dyn(
    model: DynModel,
    train: &[crate::assembly::AssembledSequence],
    val: &[crate::assembly::AssembledSequence],
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepRecord, Option<&EvalRecord>),
) -> Result<(DynModel, TrainLog)> {
    Ok(match model {
        DynModel::F32(m) => {
            let (m, log) = train_sequences(m, train, val, cfg, on_step)?;
            (m.into(), log)
        }
        DynModel::F64(m) => {
            let (m, log) = train_sequences(m, train, val, cfg, on_step)?;
            (m.into(), log)
        }
    })
}

/// Human-readable slot table for one example.
pub fn dump_sequence(
    corpus: &Corpus,
    vocab: &Vocabulary,
    mask: ModalityMask,
    qid: &str,
    include_answer: bool,
    max_seq_len: usize,
) -> Result<String> {
    let ex = corpus.get(qid).ok_or_else(|| Error::UnknownQid(vec![qid.to_string()]))?;
    Ok(assemble(ex, vocab, mask, include_answer, max_seq_len)?.dump(vocab))
}

// ---------------------------------------------------------------- runs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataRun {
    pub synthetic: SyntheticConfig,
    /// Defaults to an 80/10/10 split of `synthetic.n_examples`.
    pub splits: Option<SplitSizes>,
    pub out_dir: PathBuf,
}

impl Default for GenDataRun {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            splits: None,
            out_dir: PathBuf::from("data"),
        }
    }
}

impl GenDataRun {
    pub fn sizes(&self) -> SplitSizes {
        self.splits.unwrap_or_else(|| SplitSizes::default_for(self.synthetic.n_examples))
    }

    pub fn paths(&self) -> [PathBuf; 3] {
        ["train", "val", "test"].map(|s| self.out_dir.join(format!("{s}.jsonl")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub train_corpus: PathBuf,
    pub val_corpus: PathBuf,
    pub modalities: ModalityMask,
    /// `vocab_size` and `feature_dims` are taken from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub min_freq: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            train_corpus: PathBuf::from("data/train.jsonl"),
            val_corpus: PathBuf::from("data/val.jsonl"),
            modalities: ModalityMask::ALL,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            min_freq: 1,
            out_dir: PathBuf::from("runs/train"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateRun {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub corpus: PathBuf,
    pub decode: DecodeConfig,
    /// Defaults to the modalities the checkpoint was trained with.
    pub modalities: Option<ModalityMask>,
    pub out_dir: PathBuf,
}

impl Default for GenerateRun {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("runs/train/model.ckpt"),
            vocab: PathBuf::from("runs/train/vocab.json"),
            corpus: PathBuf::from("data/val.jsonl"),
            decode: DecodeConfig::default(),
            modalities: None,
            out_dir: PathBuf::from("runs/generate"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateRun {
    pub generations: PathBuf,
    pub gold: PathBuf,
    /// Row label in the text table; defaults to the decoding strategy.
    pub label: Option<String>,
    pub out_dir: PathBuf,
}

impl Default for EvaluateRun {
    fn default() -> Self {
        Self {
            generations: PathBuf::from("runs/generate/generations.jsonl"),
            gold: PathBuf::from("data/val.jsonl"),
            label: None,
            out_dir: PathBuf::from("runs/evaluate"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchRun {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub corpus: PathBuf,
    pub strategies: Vec<Strategy>,
    /// Shared settings; `strategy` is replaced per row.
    pub decode: DecodeConfig,
    pub modalities: Option<ModalityMask>,
    pub out_dir: PathBuf,
}

impl Default for BenchRun {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("runs/train/model.ckpt"),
            vocab: PathBuf::from("runs/train/vocab.json"),
            corpus: PathBuf::from("data/val.jsonl"),
            strategies: vec![Strategy::Beam, Strategy::Nucleus, Strategy::Greedy],
            decode: DecodeConfig::default(),
            modalities: None,
            out_dir: PathBuf::from("runs/bench-decoding"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub modalities: ModalityMask,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    pub rows: Vec<AblationRow>,
    /// Shared by every row; each row's seed replaces the model, training
    /// and decoding seeds.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

pub const ABLATION_ROWS: [&str; 7] = ["S", "S+V", "S+B", "S+M", "S+M,V", "S+M,B", "S+M,V,B"];

impl Default for AblationSpec {
    fn default() -> Self {
        Self::with_rows(&ABLATION_ROWS, 0).expect("standard rows parse")
    }
}

impl AblationSpec {
    /// Rows from labels such as `S+M,V`, all sharing `seed`.
    pub fn with_rows(labels: &[&str], seed: u64) -> Result<Self> {
        let rows = labels
            .iter()
            .map(|l| {
                Ok(AblationRow {
                    label: l.to_string(),
                    modalities: ModalityMask::parse(l)?,
                    seed,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            rows,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.label.as_str()) {
                return Err(Error::Config(format!("duplicate ablation row {:?}", r.label)));
            }
            if r.modalities.label() != r.label {
                return Err(Error::Config(format!(
                    "row {:?} has modalities {}",
                    r.label,
                    r.modalities.label()
                )));
            }
        }
        let baseline = ModalityMask::parse("S")?;
        if !self.rows.iter().any(|r| r.modalities == baseline) {
            return Err(Error::Config("ablation needs the S baseline row".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()
    }

    fn row_configs(&self, row: &AblationRow, vocab: &Vocabulary, corpus: &Corpus) -> (ModelConfig, TrainConfig, DecodeConfig) {
        (
            ModelConfig {
                vocab_size: vocab.len(),
                feature_dims: corpus.feature_dims,
                seed: row.seed,
                ..self.model.clone()
            },
            TrainConfig {
                seed: row.seed,
                ..self.train.clone()
            },
            DecodeConfig {
                seed: row.seed,
                ..self.decode.clone()
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateRun {
    pub spec: AblationSpec,
    pub train_corpus: PathBuf,
    pub val_corpus: PathBuf,
    /// Corpus the rows are scored on; defaults to `val_corpus`.
    pub eval_corpus: Option<PathBuf>,
    pub min_freq: usize,
    /// Train rows concurrently instead of one after another.
    pub parallel: bool,
    /// Defaults to `out_dir/cache`.
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for AblateRun {
    fn default() -> Self {
        Self {
            spec: AblationSpec::default(),
            train_corpus: PathBuf::from("data/train.jsonl"),
            val_corpus: PathBuf::from("data/val.jsonl"),
            eval_corpus: None,
            min_freq: 1,
            parallel: false,
            cache_dir: None,
            out_dir: PathBuf::from("runs/ablate"),
        }
    }
}

impl AblateRun {
    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }

    pub fn eval_corpus(&self) -> &Path {
        self.eval_corpus.as_deref().unwrap_or(&self.val_corpus)
    }
}

/// Any command, tagged by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Run {
    GenData(GenDataRun),
    Train(TrainRun),
    Generate(GenerateRun),
    Evaluate(EvaluateRun),
    BenchDecoding(BenchRun),
    Ablate(AblateRun),
}

/// Everything needed to repeat a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub run: Run,
    /// Input file path to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    /// Errors if an input file no longer has its recorded contents.
    pub fn check_inputs(&self) -> Result<()> {
        for (path, hash) in &self.inputs {
            let path = Path::new(path);
            if &file_hash(path)? != hash {
                return Err(Error::InputChanged { path: path.into() });
            }
        }
        Ok(())
    }
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    /// Text for standard output: statistics or a results table.
    pub summary: String,
}

impl Run {
    pub fn name(&self) -> &'static str {
        match self {
            Run::GenData(_) => "gen-data",
            Run::Train(_) => "train",
            Run::Generate(_) => "generate",
            Run::Evaluate(_) => "evaluate",
            Run::BenchDecoding(_) => "bench-decoding",
            Run::Ablate(_) => "ablate",
        }
    }

    pub fn out_dir(&self) -> &Path {
        match self {
            Run::GenData(r) => &r.out_dir,
            Run::Train(r) => &r.out_dir,
            Run::Generate(r) => &r.out_dir,
            Run::Evaluate(r) => &r.out_dir,
            Run::BenchDecoding(r) => &r.out_dir,
            Run::Ablate(r) => &r.out_dir,
        }
    }

    pub fn set_out_dir(&mut self, dir: PathBuf) {
        match self {
            Run::GenData(r) => r.out_dir = dir,
            Run::Train(r) => r.out_dir = dir,
            Run::Generate(r) => r.out_dir = dir,
            Run::Evaluate(r) => r.out_dir = dir,
            Run::BenchDecoding(r) => r.out_dir = dir,
            Run::Ablate(r) => r.out_dir = dir,
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            Run::GenData(_) => vec![],
            Run::Train(r) => vec![&r.train_corpus, &r.val_corpus],
            Run::Generate(r) => vec![&r.checkpoint, &r.vocab, &r.corpus],
            Run::Evaluate(r) => vec![&r.generations, &r.gold],
            Run::BenchDecoding(r) => vec![&r.checkpoint, &r.vocab, &r.corpus],
            Run::Ablate(r) => {
                let mut v = vec![r.train_corpus.as_path(), &r.val_corpus];
                if let Some(e) = &r.eval_corpus {
                    v.push(e);
                }
                v
            }
        }
    }

    /// Executes the run and writes `manifest.json` into its output directory.
    pub fn execute(&self, log: Logger<'_>) -> Result<RunOutcome> {
        let mut inputs = BTreeMap::new();
        for path in self.inputs() {
            inputs.insert(path.display().to_string(), file_hash(path)?);
        }
        create_dir(self.out_dir())?;
        let mut manifest = RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            run: self.clone(),
            inputs,
            checkpoints: vec![],
            reports: vec![],
        };
        let summary = match self {
            Run::GenData(r) => run_gen_data(r, &mut manifest)?,
            Run::Train(r) => run_train(r, &mut manifest, log)?,
            Run::Generate(r) => run_generate(r, &mut manifest)?,
            Run::Evaluate(r) => run_evaluate(r, &mut manifest)?,
            Run::BenchDecoding(r) => run_bench(r, &mut manifest)?,
            Run::Ablate(r) => run_ablate(r, &mut manifest, log)?,
        };
        manifest.save(self.out_dir().join("manifest.json"))?;
        Ok(RunOutcome { manifest, summary })
    }
}

/// Re-executes a saved manifest, optionally into a different directory.
pub fn replay(manifest: &RunManifest, out_dir: Option<PathBuf>, log: Logger<'_>) -> Result<RunOutcome> {
    manifest.check_inputs()?;
    let mut run = manifest.run.clone();
    if let Some(dir) = out_dir {
        run.set_out_dir(dir);
    }
    run.execute(log)
}

fn run_gen_data(r: &GenDataRun, manifest: &mut RunManifest) -> Result<String> {
    let corpora = generate_splits(&r.synthetic, r.sizes())?;
    let mut summary = String::new();
    let mut stats = BTreeMap::new();
    for (corpus, path) in corpora.iter().zip(r.paths()) {
        save_corpus(corpus, &path)?;
        let s = CorpusStats::of(corpus);
        let _ = writeln!(summary, "{} ({}) {s}", corpus.split, path.display());
        stats.insert(corpus.split.to_string(), s);
        manifest.reports.push(path);
    }
    let stats_path = r.out_dir.join("stats.json");
    write_json(&stats_path, &stats)?;
    manifest.reports.push(stats_path);
    Ok(summary)
}

fn run_train(r: &TrainRun, manifest: &mut RunManifest, log: Logger<'_>) -> Result<String> {
    r.train.validate()?;
    let train_corpus = load_corpus(&r.train_corpus)?;
    let val_corpus = load_corpus(&r.val_corpus)?;
    let vocab = Vocabulary::build_with_labels(&[&train_corpus], &[&val_corpus], r.min_freq);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        feature_dims: train_corpus.feature_dims,
        ..r.model.clone()
    };
    let model = DynModel::new(config)?;
    let max = model.config().max_seq_len;
    let train = assemble_corpus(&train_corpus, &vocab, r.modalities, true, max)?;
    let val = assemble_corpus(&val_corpus, &vocab, r.modalities, true, max)?;
    log(&format!(
        "training {} parameters on {} examples ({} val), modalities {}",
        model.config().num_parameters(),
        train.len(),
        val.len(),
        r.modalities
    ));
    let steps_per_epoch = train.len().div_ceil(r.train.batch_size);
    let (model, mut train_log) = train_dyn(model, &train, &val, &r.train, |s, e| {
        if let Some(e) = e {
            log(&format!("step {} epoch {} train {:.4} val {:.4}", s.step, s.epoch, s.train_loss, e.val_loss));
        } else if s.step % steps_per_epoch == 0 {
            log(&format!("step {} epoch {} train {:.4}", s.step, s.epoch, s.train_loss));
        }
    })?;

    let vocab_path = r.out_dir.join("vocab.json");
    let ckpt_path = r.out_dir.join("model.ckpt");
    vocab.save(&vocab_path)?;
    let meta = CheckpointMeta {
        vocab_hash: vocab.hash(),
        modalities: r.modalities,
    };
    save_checkpoint(&model, &meta, &ckpt_path)?;
    train_log.checkpoint_path = Some(ckpt_path.display().to_string());
    let log_json = r.out_dir.join("train_log.json");
    let log_csv = r.out_dir.join("train_log.csv");
    write_json(&log_json, &train_log)?;
    write_text(&log_csv, &train_log.to_csv())?;
    manifest.checkpoints.push(ckpt_path.clone());
    manifest.reports.extend([vocab_path, log_json, log_csv]);

    let last = train_log.steps.last().map_or(f64::NAN, |s| s.train_loss);
    let mut summary = format!("steps: {}\nfinal train loss: {last:.4}\n", train_log.steps.len());
    if let Some(v) = train_log.best_val_loss {
        let _ = writeln!(summary, "best val loss: {v:.4} at step {}", train_log.best_step);
    }
    let _ = writeln!(summary, "checkpoint: {}", ckpt_path.display());
    Ok(summary)
}

/// Checkpoint, vocabulary and modalities, checked against each other.
fn load_trained(checkpoint: &Path, vocab: &Path, modalities: Option<ModalityMask>) -> Result<(DynModel, Vocabulary, ModalityMask)> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let vocab = Vocabulary::load(vocab)?;
    if vocab.hash() != meta.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: meta.vocab_hash,
            actual: vocab.hash(),
        });
    }
    model.check_vocab(&vocab)?;
    Ok((model, vocab, modalities.unwrap_or(meta.modalities)))
}

fn run_generate(r: &GenerateRun, manifest: &mut RunManifest) -> Result<String> {
    let (model, vocab, mask) = load_trained(&r.checkpoint, &r.vocab, r.modalities)?;
    let corpus = load_corpus(&r.corpus)?;
    let gens = generate_corpus(&model, &vocab, &corpus, mask, &r.decode)?;
    let path = r.out_dir.join("generations.jsonl");
    write_text(&path, &generations_to_jsonl(&gens))?;
    manifest.reports.push(path.clone());
    Ok(format!(
        "{} generations ({}) written to {}\n",
        gens.len(),
        r.decode.strategy.name(),
        path.display()
    ))
}

fn write_report(out_dir: &Path, stem: &str, report: &MetricsReport, label: &str, manifest: &mut RunManifest) -> Result<String> {
    let json = out_dir.join(format!("{stem}.json"));
    let txt = out_dir.join(format!("{stem}.txt"));
    let table = report.to_table(label);
    write_json(&json, report)?;
    write_text(&txt, &table)?;
    manifest.reports.extend([json, txt]);
    Ok(table)
}

fn run_evaluate(r: &EvaluateRun, manifest: &mut RunManifest) -> Result<String> {
    let gens = read_generations(&r.generations)?;
    let gold = load_corpus(&r.gold)?;
    let report = evaluate_generations(&gens, &gold)?;
    let label = r.label.clone().unwrap_or_else(|| {
        let strategies: HashSet<Strategy> = gens.iter().map(|g| g.strategy).collect();
        match strategies.into_iter().collect::<Vec<_>>()[..] {
            [s] => s.name().to_string(),
            [] => "none".to_string(),
            _ => "mixed".to_string(),
        }
    });
    write_report(&r.out_dir, "metrics", &report, &label, manifest)
}

/// One line of the decoding benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Strategy,
    pub bleu1: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub wall_time_s: f64,
}

pub fn format_bench_table(rows: &[BenchRow]) -> String {
    let mut out = format!("{:<8}  {:>7}  {:>7}  {:>10}\n", "Method", "BLEU-1", "METEOR", "Time (s)");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8}  {:>7.4}  {:>7.4}  {:>10.3}",
            r.method.name(),
            r.bleu1,
            r.meteor,
            r.wall_time_s
        );
    }
    out
}

fn run_bench(r: &BenchRun, manifest: &mut RunManifest) -> Result<String> {
    if r.strategies.is_empty() {
        return Err(Error::Config("no decoding strategies requested".into()));
    }
    let (model, vocab, mask) = load_trained(&r.checkpoint, &r.vocab, r.modalities)?;
    let corpus = load_corpus(&r.corpus)?;
    let mut rows = Vec::new();
    for &strategy in &r.strategies {
        let cfg = DecodeConfig {
            strategy,
            ..r.decode.clone()
        };
        let start = Instant::now();
        let gens = generate_corpus(&model, &vocab, &corpus, mask, &cfg)?;
        let wall_time_s = start.elapsed().as_secs_f64();
        let path = r.out_dir.join(format!("generations_{}.jsonl", strategy.name()));
        write_text(&path, &generations_to_jsonl(&gens))?;
        manifest.reports.push(path);
        let report = evaluate_generations(&gens, &corpus)?;
        rows.push(BenchRow {
            method: strategy,
            bleu1: report.bleu1,
            bleu4: report.bleu4,
            meteor: report.meteor,
            wall_time_s,
        });
    }
    let table = format_bench_table(&rows);
    let json = r.out_dir.join("bench.json");
    let txt = r.out_dir.join("bench.txt");
    write_json(&json, &rows)?;
    write_text(&txt, &table)?;
    manifest.reports.extend([json, txt]);
    Ok(table)
}

/// Result of one ablation row. Contains no paths or timings, so the
/// serialized report is identical across reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub modalities: ModalityMask,
    pub seed: u64,
    /// Checkpoint file name inside the cache directory.
    pub checkpoint: String,
    pub best_step: usize,
    pub best_val_loss: Option<f64>,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationFailure {
    pub label: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationResult>,
    pub failures: Vec<AblationFailure>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationResult> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<(String, &MetricsReport)> = self.rows.iter().map(|r| (r.label.clone(), &r.metrics)).collect();
        let mut out = format_table(&rows);
        for f in &self.failures {
            let _ = writeln!(out, "{}  failed: {}", f.label, f.error);
        }
        out
    }
}

struct AblationInputs {
    train_corpus: Corpus,
    val_corpus: Corpus,
    eval_corpus: Corpus,
    vocab: Vocabulary,
    corpus_key: String,
}

fn cache_key(model: &ModelConfig, train: &TrainConfig, mask: ModalityMask, corpus_key: &str) -> String {
    let key = serde_json::json!({
        "version": TOOL_VERSION,
        "model": model,
        "train": train,
        "modalities": mask,
        "corpora": corpus_key,
    });
    sha256_hex(key.to_string().as_bytes())[..16].to_string()
}

fn ablation_row(
    r: &AblateRun,
    row: &AblationRow,
    inputs: &AblationInputs,
    log: &std::sync::Mutex<Logger<'_>>,
) -> Result<(AblationResult, PathBuf, PathBuf)> {
    let (model_cfg, train_cfg, decode_cfg) = r.spec.row_configs(row, &inputs.vocab, &inputs.train_corpus);
    let key = cache_key(&model_cfg, &train_cfg, row.modalities, &inputs.corpus_key);
    let cache = r.cache_dir();
    let ckpt = cache.join(format!("{key}.ckpt"));
    let log_path = cache.join(format!("{key}.log.json"));
    let say = |m: String| (log.lock().unwrap())(&format!("[{}] {m}", row.label));

    let (model, train_log) = if ckpt.exists() && log_path.exists() {
        say(format!("reusing {}", ckpt.display()));
        let (model, _) = load_checkpoint(&ckpt)?;
        (model, read_json::<TrainLog>(&log_path)?)
    } else {
        let max = model_cfg.max_seq_len;
        let train = assemble_corpus(&inputs.train_corpus, &inputs.vocab, row.modalities, true, max)?;
        let val = assemble_corpus(&inputs.val_corpus, &inputs.vocab, row.modalities, true, max)?;
        let steps_per_epoch = train.len().div_ceil(train_cfg.batch_size);
        let (model, mut train_log) = train_dyn(DynModel::new(model_cfg)?, &train, &val, &train_cfg, |s, e| {
            if s.step % steps_per_epoch == 0 || e.is_some() {
                let val = e.map_or(String::new(), |e| format!(" val {:.4}", e.val_loss));
                say(format!("epoch {} step {} train {:.4}{val}", s.epoch, s.step, s.train_loss));
            }
        })?;
        create_dir(&cache)?;
        let meta = CheckpointMeta {
            vocab_hash: inputs.vocab.hash(),
            modalities: row.modalities,
        };
        save_checkpoint(&model, &meta, &ckpt)?;
        train_log.checkpoint_path = Some(format!("{key}.ckpt"));
        write_json(&log_path, &train_log)?;
        (model, train_log)
    };

    let gens = generate_corpus(&model, &inputs.vocab, &inputs.eval_corpus, row.modalities, &decode_cfg)?;
    let slug: String = row
        .label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    let gen_path = r.out_dir.join("rows").join(slug).join("generations.jsonl");
    write_text(&gen_path, &generations_to_jsonl(&gens))?;
    let metrics = evaluate_generations(&gens, &inputs.eval_corpus)?;
    say(format!("BLEU-1 {:.4} METEOR {:.4}", metrics.bleu1, metrics.meteor));
    Ok((
        AblationResult {
            label: row.label.clone(),
            modalities: row.modalities,
            seed: row.seed,
            checkpoint: format!("{key}.ckpt"),
            best_step: train_log.best_step,
            best_val_loss: train_log.best_val_loss,
            metrics,
        },
        ckpt,
        gen_path,
    ))
}

fn run_ablate(r: &AblateRun, manifest: &mut RunManifest, log: Logger<'_>) -> Result<String> {
    r.spec.validate()?;
    let train_corpus = load_corpus(&r.train_corpus)?;
    let val_corpus = load_corpus(&r.val_corpus)?;
    let eval_corpus = load_corpus(r.eval_corpus())?;
    let vocab = Vocabulary::build_with_labels(&[&train_corpus], &[&val_corpus, &eval_corpus], r.min_freq);
    let corpus_key = sha256_hex(
        format!(
            "{}{}{}",
            crate::data::corpus_hash(&train_corpus),
            crate::data::corpus_hash(&val_corpus),
            vocab.hash()
        )
        .as_bytes(),
    );
    let inputs = AblationInputs {
        train_corpus,
        val_corpus,
        eval_corpus,
        vocab,
        corpus_key,
    };
    let log = std::sync::Mutex::new(log);
    let outcomes: Vec<Result<(AblationResult, PathBuf, PathBuf)>> = if r.parallel {
        r.spec.rows.par_iter().map(|row| ablation_row(r, row, &inputs, &log)).collect()
    } else {
        r.spec.rows.iter().map(|row| ablation_row(r, row, &inputs, &log)).collect()
    };

    let mut report = AblationReport::default();
    let mut first_error = None;
    for (row, outcome) in r.spec.rows.iter().zip(outcomes) {
        match outcome {
            Ok((result, ckpt, gen_path)) => {
                report.rows.push(result);
                manifest.checkpoints.push(ckpt);
                manifest.reports.push(gen_path);
            }
            Err(e) => {
                report.failures.push(AblationFailure {
                    label: row.label.clone(),
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    let json = r.out_dir.join("ablation.json");
    let txt = r.out_dir.join("ablation.txt");
    let table = report.to_table();
    write_json(&json, &report)?;
    write_text(&txt, &table)?;
    manifest.reports.extend([json, txt]);
    match first_error {
        Some(e) => {
            manifest.save(r.out_dir.join("manifest.json"))?;
            Err(e)
        }
        None => Ok(table),
    }
}
