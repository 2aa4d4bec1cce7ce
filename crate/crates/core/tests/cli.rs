use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ctal::model::checkpoint::Checkpoint;

fn ctal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctal"))
        .current_dir(dir)
        .args(args)
        .arg("--quiet")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ctal(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn losses(csv: &str) -> Vec<f64> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect()
}

const PRETRAIN: &[&str] = &[
    "pretrain",
    "--manifest",
    "corpus/manifest.tsv",
    "--tokenizer",
    "tok/vocab.bpe",
    "--set",
    "data.feature_dir=feats",
    "--set",
    "pretrain.steps=80",
    "--set",
    "pretrain.batch_size=8",
    "--set",
    "pretrain.lr=1e-3",
    "--set",
    "pretrain.checkpoint_every=40",
    "--set",
    "model.dropout=0",
];

#[test]
fn synth_features_tokenizer_pretrain_finetune_evaluate_embed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--kind", "emotion", "--n", "32", "--out", "corpus"]);
    assert_eq!(fs::read_dir(d.join("corpus/wav")).unwrap().count(), 32);
    ok(d, &["extract-features", "--manifest", "corpus/manifest.tsv", "--out", "feats"]);
    assert_eq!(
        fs::read_dir(d.join("feats")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "feat")).count(),
        32
    );
    ok(d, &["train-tokenizer", "--corpus", "corpus/manifest.tsv", "--vocab-size", "400", "--out", "tok"]);

    let mut args = PRETRAIN.to_vec();
    args.extend(["--out", "pt"]);
    ok(d, &args);
    for f in ["config.resolved", "inputs.sha256", "log.txt", "loss.csv", "model.ckpt", "checkpoint-00000040.ckpt"] {
        assert!(d.join("pt").join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(d.join("pt/loss.csv")).unwrap();
    let l = losses(&csv);
    assert_eq!(l.len(), 80);
    let head = l[..10].iter().sum::<f64>() / 10.0;
    let tail = l[70..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    let resolved = fs::read_to_string(d.join("pt/config.resolved")).unwrap();
    assert!(resolved.contains("pretrain.steps = 80\n"));
    let hashes = fs::read_to_string(d.join("pt/inputs.sha256")).unwrap();
    assert!(hashes.contains("tok/vocab.bpe") && hashes.contains("(all inputs)"));

    // byte-identical rerun
    let mut again = PRETRAIN.to_vec();
    again.extend(["--out", "pt2"]);
    ok(d, &again);
    for f in ["loss.csv", "model.ckpt", "config.resolved"] {
        let a = fs::read(d.join("pt").join(f)).unwrap();
        let b = fs::read(d.join("pt2").join(f)).unwrap();
        if f == "config.resolved" {
            assert_ne!(a, b, "out.dir differs between the runs");
        } else {
            assert_eq!(a, b, "{f} differs between identical runs");
        }
    }

    ok(d, &[
        "finetune", "--task", "emotion", "--checkpoint", "pt/model.ckpt",
        "--manifest", "corpus/labeled.tsv", "--test-manifest", "corpus/labeled.tsv",
        "--tokenizer", "tok/vocab.bpe", "--set", "data.feature_dir=feats",
        "--set", "finetune.epochs=2", "--set", "finetune.lr=1e-3", "--out", "ft",
    ]);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ft/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["test"]["n"], 32);
    assert!(metrics["test"]["wa"].as_f64().is_some());
    let preds = fs::read_to_string(d.join("ft/predictions.csv")).unwrap();
    assert!(preds.starts_with("example_id,prediction,gold\n"));
    assert_eq!(preds.lines().count(), 33);

    let eval = ok(d, &["evaluate", "--checkpoint", "ft/model.ckpt", "--manifest", "corpus/labeled.tsv", "--set", "data.feature_dir=feats", "--out", "ev"]);
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(eval["test"]["wa"], metrics["test"]["wa"]);
    assert_eq!(fs::read(d.join("ev/predictions.csv")).unwrap(), preds.as_bytes());

    ok(d, &["embed", "--checkpoint", "ft/model.ckpt", "--manifest", "corpus/manifest.tsv", "--set", "data.feature_dir=feats", "--out", "em"]);
    let emb = Checkpoint::load(&d.join("em/embeddings.ckpt")).unwrap();
    assert_eq!(emb.params.len(), 32);
    assert_eq!(emb.params.get("utt00000").unwrap().shape(), &[128]);

    let table = ok(d, &["inspect", "--checkpoint", "ft/model.ckpt", "--out", "in"]);
    assert!(table.contains("fusion.attn_pool.weight\t64x64\t4096\n"));
}

#[test]
fn inspect_base_preset_is_near_sixty_million() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["inspect", "--preset", "base", "--out", "run"]);
    let total: f64 = out.lines().last().unwrap().strip_prefix("total\t").unwrap().parse().unwrap();
    assert!((total / 60e6 - 1.0).abs() <= 0.2, "{total}");
    assert!(out.contains("module\ttext_encoder\t"));
    assert!(tmp.path().join("run/parameters.tsv").exists());
}

#[test]
fn evaluate_perfect_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("p.csv"), "example_id,prediction,gold\na,happy,happy\nb,sad,sad\nc,angry,angry\nd,sad,sad\n").unwrap();
    let out = ok(d, &["evaluate", "--predictions", "p.csv", "--task", "emotion", "--out", "ev"]);
    let m: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(m["test"]["wa"], 1.0);
    assert_eq!(m["test"]["ua"], 1.0);

    fs::write(d.join("s.csv"), "example_id,prediction,gold\na,1.5,2\nb,-1,-0.5\nc,0.5,1\n").unwrap();
    let out = ok(d, &["evaluate", "--predictions", "s.csv", "--task", "sentiment", "--out", "ev2"]);
    let m: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(m["test"]["acc2"], 1.0);
    assert!((m["test"]["mae"].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn bad_input_exits_one_with_a_single_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for args in [
        &["pretrain", "--set", "pretrain.stepz=3", "--out", "x"][..],
        &["pretrain", "--manifest", "missing.tsv", "--tokenizer", "missing.bpe", "--out", "x"],
        &["no-such-command"],
        &["synth", "--kind", "weather", "--out", "x"],
    ] {
        let out = ctal(d, args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
    let out = ctal(d, &["pretrain", "--set", "bogus=1", "--out", "x"]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("bogus"));

    fs::write(d.join("bad.tsv"), "only-one-field\n").unwrap();
    let out = ctal(d, &["extract-features", "--manifest", "bad.tsv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.cfg"), "# synth settings\nseed = 5\n").unwrap();
    ok(d, &["synth", "--n", "4", "--config", "run.cfg", "--out", "a"]);
    assert!(fs::read_to_string(d.join("a/config.resolved")).unwrap().contains("seed = 5\n"));
    ok(d, &["synth", "--n", "4", "--config", "run.cfg", "--seed", "6", "--out", "b"]);
    assert!(fs::read_to_string(d.join("b/config.resolved")).unwrap().contains("seed = 6\n"));
    assert_ne!(fs::read(d.join("a/wav/utt00000.wav")).unwrap(), fs::read(d.join("b/wav/utt00000.wav")).unwrap());
    ok(d, &["synth", "--n", "4", "--config", "run.cfg", "--out", "c"]);
    assert_eq!(fs::read(d.join("a/wav/utt00000.wav")).unwrap(), fs::read(d.join("c/wav/utt00000.wav")).unwrap());
}
