mod args;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use serde_json::Value;
use vidqa::assembly::ModalityMask;
use vidqa::data::{load_corpus, Corpus, SplitSizes};
use vidqa::model::load_checkpoint;
use vidqa::pipeline::{
    dump_sequence, replay, AblateRun, AblationSpec, BenchRun, EvaluateRun, GenDataRun, GenerateRun, Run, RunManifest,
    TrainRun,
};
use vidqa::tokenizer::Vocabulary;
use vidqa::{Error, Result};

use args::{set, Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<()> {
    let outcome = match (&cli.manifest, &cli.command) {
        (Some(path), _) => {
            let manifest = RunManifest::load(path)?;
            eprintln!("replaying {} from {}", manifest.run.name(), path.display());
            replay(&manifest, cli.replay_out.clone(), &mut log)?
        }
        (None, Some(cmd)) => {
            let run = resolve(&cli, cmd)?;
            eprintln!("{} configuration:\n{}", cmd.name(), serde_json::to_string_pretty(&run)?);
            if let Some(text) = dump(&run, cmd)? {
                print!("{text}");
                return Ok(());
            }
            run.execute(&mut log)?
        }
        (None, None) => return Err(Error::Config("no command given; see --help".into())),
    };
    print!("{}", outcome.summary);
    eprintln!("manifest: {}", outcome.manifest.run.out_dir().join("manifest.json").display());
    Ok(())
}

fn defaults(root: &Path, command: &str) -> Run {
    let data = root.join("data");
    let trained = root.join("train");
    let out_dir = root.join(command);
    match command {
        "gen-data" => Run::GenData(GenDataRun {
            out_dir: data,
            ..Default::default()
        }),
        "train" => Run::Train(TrainRun {
            train_corpus: data.join("train.jsonl"),
            val_corpus: data.join("val.jsonl"),
            out_dir,
            ..Default::default()
        }),
        "generate" => Run::Generate(GenerateRun {
            checkpoint: trained.join("model.ckpt"),
            vocab: trained.join("vocab.json"),
            corpus: data.join("val.jsonl"),
            out_dir,
            ..Default::default()
        }),
        "evaluate" => Run::Evaluate(EvaluateRun {
            generations: root.join("generate").join("generations.jsonl"),
            gold: data.join("val.jsonl"),
            out_dir,
            ..Default::default()
        }),
        "bench-decoding" => Run::BenchDecoding(BenchRun {
            checkpoint: trained.join("model.ckpt"),
            vocab: trained.join("vocab.json"),
            corpus: data.join("val.jsonl"),
            out_dir,
            ..Default::default()
        }),
        "ablate" => Run::Ablate(AblateRun {
            train_corpus: data.join("train.jsonl"),
            val_corpus: data.join("val.jsonl"),
            out_dir,
            ..Default::default()
        }),
        other => unreachable!("unknown command {other}"),
    }
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies the `[command]` table of a TOML config file.
fn apply_config_file(run: Run, path: &Path, command: &str) -> Result<Run> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let Some(section) = table.get(command) else {
        return Ok(run);
    };
    let mut value = serde_json::to_value(&run)?;
    merge(&mut value, serde_json::to_value(section)?);
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{} [{command}]: {e}", path.display())))
}

fn resolve(cli: &Cli, cmd: &Command) -> Result<Run> {
    let mut run = defaults(&cli.out_root, cmd.name());
    if let Some(path) = &cli.config {
        run = apply_config_file(run, path, cmd.name())?;
    }
    match (&mut run, cmd) {
        (Run::GenData(r), Command::GenData(a)) => {
            let s = &mut r.synthetic;
            set(&mut s.seed, a.seed);
            set(&mut s.metadata_signal, a.metadata_signal);
            set(&mut s.n_persons, a.n_persons);
            set(&mut s.n_behaviors, a.n_behaviors);
            set(&mut s.n_emotions, a.n_emotions);
            set(&mut s.feature_dims.video, a.video_dim);
            set(&mut s.feature_dims.bbox, a.bbox_dim);
            set(&mut s.box_noise, a.box_noise);
            set(&mut s.n_examples, a.n_examples);
            if let (Some(train), Some(val), Some(test)) = (a.train, a.val, a.test) {
                r.splits = Some(SplitSizes { train, val, test });
            }
            if let Some(sizes) = r.splits {
                match a.n_examples {
                    Some(n) if n != sizes.total() => {
                        return Err(Error::Config(format!(
                            "--n {n} disagrees with split sizes totalling {}",
                            sizes.total()
                        )))
                    }
                    _ => s.n_examples = sizes.total(),
                }
            }
            set(&mut r.out_dir, a.out.clone());
        }
        (Run::Train(r), Command::Train(a)) => {
            set(&mut r.train_corpus, a.train_corpus.clone());
            set(&mut r.val_corpus, a.val_corpus.clone());
            set(&mut r.modalities, a.modalities);
            a.model.apply(&mut r.model);
            a.optim.apply(&mut r.train);
            set(&mut r.model.seed, a.seed);
            set(&mut r.train.seed, a.seed);
            set(&mut r.min_freq, a.min_freq);
            set(&mut r.out_dir, a.out.clone());
        }
        (Run::Generate(r), Command::Generate(a)) => {
            set(&mut r.checkpoint, a.checkpoint.clone());
            set(&mut r.vocab, a.vocab.clone());
            set(&mut r.corpus, a.corpus.clone());
            set(&mut r.decode.strategy, a.strategy);
            a.decode.apply(&mut r.decode);
            set(&mut r.decode.seed, a.seed);
            if a.modalities.is_some() {
                r.modalities = a.modalities;
            }
            set(&mut r.out_dir, a.out.clone());
        }
        (Run::Evaluate(r), Command::Evaluate(a)) => {
            set(&mut r.generations, a.generations.clone());
            set(&mut r.gold, a.gold.clone());
            if a.label.is_some() {
                r.label = a.label.clone();
            }
            set(&mut r.out_dir, a.out.clone());
        }
        (Run::BenchDecoding(r), Command::BenchDecoding(a)) => {
            set(&mut r.checkpoint, a.checkpoint.clone());
            set(&mut r.vocab, a.vocab.clone());
            set(&mut r.corpus, a.corpus.clone());
            set(&mut r.strategies, a.strategies.clone());
            a.decode.apply(&mut r.decode);
            set(&mut r.decode.seed, a.seed);
            if a.modalities.is_some() {
                r.modalities = a.modalities;
            }
            set(&mut r.out_dir, a.out.clone());
        }
        (Run::Ablate(r), Command::Ablate(a)) => {
            set(&mut r.train_corpus, a.train_corpus.clone());
            set(&mut r.val_corpus, a.val_corpus.clone());
            if a.eval_corpus.is_some() {
                r.eval_corpus = a.eval_corpus.clone();
            }
            if !a.rows.is_empty() || a.seed.is_some() {
                let labels: Vec<String> = if a.rows.is_empty() {
                    r.spec.rows.iter().map(|row| row.label.clone()).collect()
                } else {
                    a.rows.clone()
                };
                let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
                let seed = a.seed.or(r.spec.rows.first().map(|row| row.seed)).unwrap_or(0);
                r.spec.rows = AblationSpec::with_rows(&labels, seed)?.rows;
            }
            a.model.apply(&mut r.spec.model);
            a.optim.apply(&mut r.spec.train);
            set(&mut r.spec.decode.strategy, a.strategy);
            a.decode.apply(&mut r.spec.decode);
            set(&mut r.min_freq, a.min_freq);
            r.parallel |= a.parallel;
            if a.cache_dir.is_some() {
                r.cache_dir = a.cache_dir.clone();
            }
            set(&mut r.out_dir, a.out.clone());
        }
        _ => unreachable!("defaults match the command"),
    }
    Ok(run)
}

fn find<'a>(corpora: &'a [Corpus], qid: &str) -> Option<&'a Corpus> {
    corpora.iter().find(|c| c.get(qid).is_some())
}

/// Handles `--dump-sequence`: the slot table of one example, if requested.
fn dump(run: &Run, cmd: &Command) -> Result<Option<String>> {
    let unknown = |qid: &str| Error::UnknownQid(vec![qid.to_string()]);
    match (run, cmd) {
        (
            Run::Train(r),
            Command::Train(args::TrainArgs {
                dump_sequence: Some(qid),
                ..
            }),
        ) => {
            let corpora = [load_corpus(&r.train_corpus)?, load_corpus(&r.val_corpus)?];
            let vocab = Vocabulary::build_with_labels(&[&corpora[0]], &[&corpora[1]], r.min_freq);
            let corpus = find(&corpora, qid).ok_or_else(|| unknown(qid))?;
            dump_sequence(corpus, &vocab, r.modalities, qid, true, r.model.max_seq_len).map(Some)
        }
        (
            Run::Generate(r),
            Command::Generate(args::GenerateArgs {
                dump_sequence: Some(qid),
                ..
            }),
        ) => {
            let (model, meta) = load_checkpoint(&r.checkpoint)?;
            let vocab = Vocabulary::load(&r.vocab)?;
            let corpus = load_corpus(&r.corpus)?;
            let mask: ModalityMask = r.modalities.unwrap_or(meta.modalities);
            dump_sequence(&corpus, &vocab, mask, qid, false, model.config().max_seq_len).map(Some)
        }
        _ => Ok(None),
    }
}
