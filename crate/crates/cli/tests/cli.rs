use std::path::Path;
use std::process::{Command, Output};

fn sft(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sft"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SFT_SEED")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: [&str; 10] = [
    "--set",
    "model.extractor.hidden=[4,8]",
    "--set",
    "model.extractor.out_channels=8",
    "--set",
    "model.encoder.reduced_channels=2",
    "--set",
    "model.decoder.d_embed=16",
    "--set",
    "train.batch=2",
];

#[test]
fn gen_data_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&sft(&["gen-data", "--n", "16", "--seed", "7", "--out", "a"], tmp.path()));
    ok(&sft(&["gen-data", "--n", "16", "--seed", "7", "--out", "b"], tmp.path()));
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    assert_eq!(a.len(), 16 * 2 + 2);
    assert_eq!(a, b);
    ok(&sft(&["gen-data", "--n", "16", "--seed", "8", "--out", "c"], tmp.path()));
    assert_ne!(a, tree(&tmp.path().join("c")));
}

#[test]
fn seed_env_var_is_the_default_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |args: &[&str], seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_sft"));
        c.args(args).current_dir(tmp.path()).env_remove("SFT_SEED");
        if let Some(s) = seed {
            c.env("SFT_SEED", s);
        }
        ok(&c.output().unwrap());
    };
    run(&["gen-data", "--n", "2", "--out", "env"], Some("9"));
    run(&["gen-data", "--n", "2", "--seed", "9", "--out", "flag"], None);
    assert_eq!(tree(&tmp.path().join("env")), tree(&tmp.path().join("flag")));
    let bad = Command::new(env!("CARGO_BIN_EXE_sft"))
        .args(["gen-data", "--n", "2", "--out", "x"])
        .current_dir(tmp.path())
        .env("SFT_SEED", "nope")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn count_matches_checkpoint_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&sft(&["gen-data", "--n", "4", "--seed", "3", "--out", "d"], tmp.path()));
    let mut args = vec!["train", "--data", "d", "--steps", "2", "--seed", "1", "--out", "ck"];
    args.extend(SMALL);
    ok(&sft(&args, tmp.path()));
    let vocab: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("ck/vocab.json")).unwrap()).unwrap();
    let vocab_len = vocab["tokens"].as_array().unwrap().len().to_string();
    for out in ["c1", "c2"] {
        ok(&sft(&["count", "--config", "ck/config.json", "--vocab", &vocab_len, "--out", out], tmp.path()));
    }
    let (c1, c2) = (tree(&tmp.path().join("c1")), tree(&tmp.path().join("c2")));
    assert_eq!(c1, c2);
    let cost: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("c1/cost.json")).unwrap()).unwrap();
    let stored: usize = std::fs::read_dir(tmp.path().join("ck"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "sft1"))
        .map(|p| sft_core::format::load(&p).unwrap().numel())
        .sum();
    assert_eq!(cost["total_params"].as_u64().unwrap(), stored as u64);
    assert!(tmp.path().join("c1/run.json").exists());
}

#[test]
fn train_decode_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&sft(&["gen-data", "--n", "4", "--seed", "3", "--out", "d"], tmp.path()));
    for out in ["ck1", "ck2"] {
        let mut args = vec!["train", "--data", "d", "--steps", "4", "--seed", "5", "--out", out];
        args.extend(SMALL);
        ok(&sft(&args, tmp.path()));
    }
    assert_eq!(tree(&tmp.path().join("ck1")), tree(&tmp.path().join("ck2")));
    ok(&sft(&["decode", "--checkpoint", "ck1", "--data", "d", "--out", "dec"], tmp.path()));
    let decoded = std::fs::read_to_string(tmp.path().join("dec/decoded.jsonl")).unwrap();
    assert_eq!(decoded.lines().count(), 4);
    for line in decoded.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["image_id"].is_string() && v["caption"].is_string() && v["truncated"].is_boolean());
    }
    ok(&sft(&["eval", "--decoded", "dec/decoded.jsonl", "--data", "d", "--out", "ev"], tmp.path()));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["pairs"], 4);
    let csv = std::fs::read_to_string(tmp.path().join("ev/pairs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    for dir in ["d", "ck1", "dec", "ev"] {
        assert!(tmp.path().join(dir).join("run.json").exists(), "{dir}");
    }
}

#[test]
fn eval_on_records_file() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("r.jsonl"),
        "{\"image_id\":\"a\",\"generated\":\"the cat sat\",\"references\":[\"the dog sat\"]}\n\
         {\"image_id\":\"b\",\"generated\":\"there is no change\",\"references\":[\"there is no change\"]}\n",
    )
    .unwrap();
    ok(&sft(&["eval", "--records", "r.jsonl", "--out", "ev"], tmp.path()));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["total_accuracy"], 1.0);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = sft(&["gen-data", "--bogus", "--out", "x"], tmp.path());
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(sft(&["frobnicate"], tmp.path()).status.code(), Some(1));
    let missing = sft(&["train", "--data", "nowhere", "--out", "ck"], tmp.path());
    assert_eq!(missing.status.code(), Some(2));
    std::fs::write(tmp.path().join("bad.jsonl"), "{not json\n").unwrap();
    let bad = sft(&["eval", "--records", "bad.jsonl", "--out", "ev"], tmp.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 1"));
    let contract = sft(&["count", "--set", "model.encoder.reduced_channels=0", "--out", "c"], tmp.path());
    assert_eq!(contract.status.code(), Some(1));
    assert_eq!(sft(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn bench_reports_counts_and_timing() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&sft(&["bench", "--reps", "2", "--out", "b"], tmp.path()));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("b/bench.json")).unwrap()).unwrap();
    let sparse = v["operation_counts"]["sparse"]["encoder_attention"]["logit_macs"].as_u64().unwrap();
    let dense = v["operation_counts"]["dense"]["encoder_attention"]["logit_macs"].as_u64().unwrap();
    assert_eq!(sparse * 64, dense * 15);
    assert!(v["wall_clock_local_non_comparable"]["sparse_ms"].is_number());
}
