use std::path::{Path, PathBuf};

use vidqa::assembly::{expanded_length, ModalityMask};
use vidqa::data::{load_corpus, CorpusStats, SplitSizes, SyntheticConfig};
use vidqa::decoding::{DecodeConfig, Strategy};
use vidqa::model::ModelConfig;
use vidqa::pipeline::{
    generations_to_jsonl, read_generations, replay, AblateRun, AblationReport, AblationSpec, BenchRow, BenchRun,
    EvaluateRun, GenDataRun, Generation, GenerateRun, Run, RunManifest, TrainRun,
};
use vidqa::train::TrainConfig;
use vidqa::Error;

fn quiet() -> impl FnMut(&str) + Send {
    |_: &str| {}
}

fn exec(run: Run) -> vidqa::Result<vidqa::pipeline::RunOutcome> {
    run.execute(&mut quiet())
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 128,
        dropout_rate: 0.0,
        ..Default::default()
    }
}

fn gen_data(dir: &Path, n: usize, signal: f64) -> GenDataRun {
    let run = GenDataRun {
        synthetic: SyntheticConfig {
            n_examples: n,
            seed: 7,
            metadata_signal: signal,
            ..Default::default()
        },
        splits: None,
        out_dir: dir.join("data"),
    };
    exec(Run::GenData(run.clone())).unwrap();
    run
}

fn train_run(dir: &Path, data: &GenDataRun, modalities: &str, epochs: usize) -> TrainRun {
    let [train, val, _] = data.paths();
    TrainRun {
        train_corpus: train,
        val_corpus: val,
        modalities: ModalityMask::parse(modalities).unwrap(),
        model: tiny_model(),
        train: TrainConfig {
            learning_rate: 3e-3,
            max_epochs: epochs,
            ..Default::default()
        },
        min_freq: 1,
        out_dir: dir.join(format!("train-{}", modalities.replace(',', ""))),
    }
}

/// Generations with their timings removed.
fn untimed(path: &Path) -> Vec<Generation> {
    read_generations(path)
        .unwrap()
        .into_iter()
        .map(|g| Generation { duration_ms: 0.0, ..g })
        .collect()
}

#[test]
fn gen_data_is_reproducible_with_default_split() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_data(dir.path(), 50, 0.7);
    let first: Vec<Vec<u8>> = a.paths().iter().map(|p| std::fs::read(p).unwrap()).collect();
    exec(Run::GenData(a.clone())).unwrap();
    let second: Vec<Vec<u8>> = a.paths().iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
    let sizes: Vec<usize> = a.paths().iter().map(|p| load_corpus(p).unwrap().len()).collect();
    assert_eq!(sizes, [40, 5, 5]);
    assert!(a.out_dir.join("manifest.json").exists());
}

#[test]
fn gen_data_stats_report_metadata_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let run = GenDataRun {
        synthetic: SyntheticConfig {
            n_examples: 40,
            metadata_signal: 1.0,
            ..Default::default()
        },
        splits: Some(SplitSizes {
            train: 30,
            val: 10,
            test: 0,
        }),
        out_dir: dir.path().to_path_buf(),
    };
    let out = exec(Run::GenData(run.clone())).unwrap();
    assert!(out.summary.contains("metadata-answerable:      100.0%"), "{}", out.summary);
    for p in run.paths() {
        let c = load_corpus(p).unwrap();
        if !c.is_empty() {
            assert_eq!(CorpusStats::of(&c).metadata_answerable, 1.0);
        }
    }
}

#[test]
fn train_replay_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 40, 0.7);
    let run = train_run(dir.path(), &data, "S,M", 2);
    let out = exec(Run::Train(run.clone())).unwrap();
    let manifest = RunManifest::load(run.out_dir.join("manifest.json")).unwrap();
    assert_eq!(manifest, out.manifest);
    assert_eq!(manifest.checkpoints, [run.out_dir.join("model.ckpt")]);
    let again = dir.path().join("replayed");
    replay(&manifest, Some(again.clone()), &mut quiet()).unwrap();
    for f in ["model.ckpt", "vocab.json"] {
        assert_eq!(std::fs::read(run.out_dir.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    std::fs::write(&data.paths()[0], "").unwrap();
    assert!(matches!(replay(&manifest, None, &mut quiet()), Err(Error::InputChanged { .. })));
}

#[test]
fn metadata_lowers_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 200, 1.0);
    let mut losses = vec![];
    for m in ["S", "S,M"] {
        let run = train_run(dir.path(), &data, m, 4);
        exec(Run::Train(run.clone())).unwrap();
        let log: vidqa::train::TrainLog =
            serde_json::from_str(&std::fs::read_to_string(run.out_dir.join("train_log.json")).unwrap()).unwrap();
        losses.push(log.best_val_loss.unwrap());
    }
    assert!(losses[1] < losses[0], "{losses:?}");
}

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
    ckpt: PathBuf,
    vocab: PathBuf,
    val: PathBuf,
}

fn trained() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = gen_data(&root, 40, 0.7);
    let run = train_run(&root, &data, "S,M", 2);
    exec(Run::Train(run.clone())).unwrap();
    Trained {
        ckpt: run.out_dir.join("model.ckpt"),
        vocab: run.out_dir.join("vocab.json"),
        val: data.paths()[1].clone(),
        root,
        _dir: dir,
    }
}

fn generate(t: &Trained, name: &str, decode: DecodeConfig) -> PathBuf {
    let out_dir = t.root.join(name);
    exec(Run::Generate(GenerateRun {
        checkpoint: t.ckpt.clone(),
        vocab: t.vocab.clone(),
        corpus: t.val.clone(),
        decode,
        modalities: None,
        out_dir: out_dir.clone(),
    }))
    .unwrap();
    out_dir.join("generations.jsonl")
}

#[test]
fn generation_is_seeded_and_beam_one_is_greedy() {
    let t = trained();
    let nucleus = DecodeConfig {
        strategy: Strategy::Nucleus,
        top_p: 0.9,
        seed: 1,
        ..Default::default()
    };
    let a = untimed(&generate(&t, "n1", nucleus.clone()));
    let b = untimed(&generate(&t, "n2", nucleus));
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);

    let greedy = untimed(&generate(&t, "g", DecodeConfig::default()));
    let beam1 = untimed(&generate(
        &t,
        "b1",
        DecodeConfig {
            strategy: Strategy::Beam,
            beam_width: 1,
            ..Default::default()
        },
    ));
    let tokens = |g: &[Generation]| g.iter().map(|x| (x.qid.clone(), x.tokens.clone())).collect::<Vec<_>>();
    assert_eq!(tokens(&greedy), tokens(&beam1));
}

#[test]
fn generate_rejects_foreign_vocabulary() {
    let t = trained();
    // Same vocabulary size, different id assignment.
    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&t.vocab).unwrap()).unwrap();
    json["tokens"].as_array_mut().unwrap().swap(0, 1);
    let forged = t.root.join("forged.json");
    std::fs::write(&forged, json.to_string()).unwrap();
    let err = exec(Run::Generate(GenerateRun {
        checkpoint: t.ckpt.clone(),
        vocab: forged,
        corpus: t.val.clone(),
        out_dir: t.root.join("y"),
        ..Default::default()
    }));
    assert!(matches!(err, Err(Error::VocabMismatch { .. })), "{:?}", err.err());
}

fn evaluate(root: &Path, gens: &Path, gold: &Path) -> vidqa::Result<vidqa::metrics::MetricsReport> {
    let out_dir = root.join("eval");
    exec(Run::Evaluate(EvaluateRun {
        generations: gens.into(),
        gold: gold.into(),
        label: None,
        out_dir: out_dir.clone(),
    }))?;
    Ok(serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap())
}

#[test]
fn evaluate_gold_empty_and_unknown() {
    let t = trained();
    let gold = load_corpus(&t.val).unwrap();
    let as_gen = |qid: &str, text: &str| Generation {
        qid: qid.into(),
        strategy: Strategy::Greedy,
        config: DecodeConfig::default(),
        tokens: vec![],
        text: text.into(),
        duration_ms: 0.0,
    };
    let path = t.root.join("gold.jsonl");
    let gens: Vec<Generation> = gold.examples.iter().map(|e| as_gen(&e.qid, &e.answer)).collect();
    std::fs::write(&path, generations_to_jsonl(&gens)).unwrap();
    let r = evaluate(&t.root, &path, &t.val).unwrap();
    assert_eq!((r.bleu1, r.bleu4), (1.0, 1.0));
    assert!(std::fs::read_to_string(t.root.join("eval/metrics.txt")).unwrap().contains("greedy"));

    std::fs::write(&path, "").unwrap();
    let r = evaluate(&t.root, &path, &t.val).unwrap();
    assert_eq!((r.bleu1, r.bleu4, r.meteor, r.counts.generated), (0.0, 0.0, 0.0, 0));

    std::fs::write(&path, generations_to_jsonl(&[as_gen("nope", "x")])).unwrap();
    match evaluate(&t.root, &path, &t.val) {
        Err(Error::UnknownQid(q)) => assert_eq!(q, ["nope"]),
        other => panic!("{other:?}"),
    }

    std::fs::write(&path, "{not json}\n").unwrap();
    assert!(matches!(evaluate(&t.root, &path, &t.val), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn bench_rows_match_generate_then_evaluate() {
    let t = trained();
    let decode = DecodeConfig {
        seed: 5,
        ..Default::default()
    };
    let out_dir = t.root.join("bench");
    let out = exec(Run::BenchDecoding(BenchRun {
        checkpoint: t.ckpt.clone(),
        vocab: t.vocab.clone(),
        corpus: t.val.clone(),
        strategies: vec![Strategy::Beam, Strategy::Nucleus, Strategy::Greedy],
        decode: decode.clone(),
        modalities: None,
        out_dir: out_dir.clone(),
    }))
    .unwrap();
    let rows: Vec<BenchRow> = serde_json::from_str(&std::fs::read_to_string(out_dir.join("bench.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(out.summary.lines().count(), 4);
    for row in &rows {
        assert!(row.wall_time_s > 0.0);
        let gens = generate(
            &t,
            row.method.name(),
            DecodeConfig {
                strategy: row.method,
                ..decode.clone()
            },
        );
        let r = evaluate(&t.root, &gens, &t.val).unwrap();
        assert_eq!((r.bleu1, r.meteor, r.bleu4), (row.bleu1, row.meteor, row.bleu4), "{:?}", row.method);
    }
}

fn ablate_run(root: &Path, data: &GenDataRun, labels: &[&str], model: ModelConfig) -> AblateRun {
    let [train, val, _] = data.paths();
    let mut spec = AblationSpec::with_rows(labels, 3).unwrap();
    spec.model = model;
    spec.train.max_epochs = 1;
    spec.train.learning_rate = 3e-3;
    AblateRun {
        spec,
        train_corpus: train,
        val_corpus: val,
        out_dir: root.join("ablate"),
        ..Default::default()
    }
}

#[test]
fn ablation_caches_checkpoints_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 30, 0.7);
    let run = ablate_run(dir.path(), &data, &["S", "S+M"], tiny_model());
    exec(Run::Ablate(run.clone())).unwrap();
    let table = std::fs::read(run.out_dir.join("ablation.txt")).unwrap();
    let json = std::fs::read(run.out_dir.join("ablation.json")).unwrap();
    let report: AblationReport = serde_json::from_slice(&json).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].seed, 3);

    let mut log = Vec::new();
    let mut sink = |m: &str| log.push(m.to_string());
    Run::Ablate(run.clone()).execute(&mut sink).unwrap();
    assert_eq!(log.iter().filter(|l| l.contains("reusing")).count(), 2);
    assert_eq!(std::fs::read(run.out_dir.join("ablation.txt")).unwrap(), table);

    let fresh = dir.path().join("fresh");
    let manifest = RunManifest::load(run.out_dir.join("manifest.json")).unwrap();
    replay(&manifest, Some(fresh.clone()), &mut quiet()).unwrap();
    assert!(fresh.join("cache").exists());
    assert_eq!(std::fs::read(fresh.join("ablation.txt")).unwrap(), table);
    assert_eq!(std::fs::read(fresh.join("ablation.json")).unwrap(), json);
}

#[test]
fn ablation_reports_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 30, 0.7);
    let train = load_corpus(&data.paths()[0]).unwrap();
    let val = load_corpus(&data.paths()[1]).unwrap();
    let longest = |m: &str| {
        let m = ModalityMask::parse(m).unwrap();
        train
            .examples
            .iter()
            .chain(&val.examples)
            .map(|e| expanded_length(e, m) + 4)
            .max()
            .unwrap()
    };
    let max_seq_len = longest("S");
    assert!(longest("S+M,V,B") > max_seq_len);
    let run = ablate_run(
        dir.path(),
        &data,
        &["S", "S+M,V,B"],
        ModelConfig {
            max_seq_len,
            ..tiny_model()
        },
    );
    let err = exec(Run::Ablate(run.clone())).err().unwrap();
    assert!(matches!(err, Error::Overflow { .. }));
    let report: AblationReport =
        serde_json::from_str(&std::fs::read_to_string(run.out_dir.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.failures[0].label, "S+M,V,B");
    let table = std::fs::read_to_string(run.out_dir.join("ablation.txt")).unwrap();
    assert!(table.contains("S+M,V,B  failed:"), "{table}");
}
