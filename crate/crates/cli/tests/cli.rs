use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use krlm_cli::commands::RunManifest;

const TINY: &[&str] = &[
    "--encoder-layers",
    "2",
    "--encoder-dim",
    "6",
    "--backbone-layers",
    "1",
    "--backbone-hidden",
    "16",
    "--negatives",
    "8",
    "--memory-k",
    "4",
    "--valid-limit",
    "4",
    "--vocab-size",
    "400",
];

fn krlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_krlm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("KRLM_MEMORY_K")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = krlm(args);
    assert!(
        out.status.success(),
        "krlm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY.iter().copied()).collect()
}

/// Ring-plus-chords graph over `n` entities and 3 relations; every fifth
/// triplet is held out.
fn write_split(dir: &Path, n: usize, offset: usize) {
    fs::create_dir_all(dir).unwrap();
    let mut ents = String::new();
    for i in 0..n {
        writeln!(ents, "e{i}\tnode {}\tsmall test node", i + offset).unwrap();
    }
    let rels = "r0\tnext\tfollows\nr1\tskip\tjumps two\nr2\tback\tpoints backwards\n";
    let (mut graph, mut queries) = (String::new(), String::new());
    let mut k = 0;
    for i in 0..n {
        for (r, j) in [(0, (i + 1) % n), (1, (i + 2) % n), (2, (i + n - 3) % n)] {
            let row = format!("e{i}\tr{r}\te{j}\n");
            if k % 5 == 4 {
                queries.push_str(&row);
            } else {
                graph.push_str(&row);
            }
            k += 1;
        }
    }
    for (name, body) in [
        ("entities.tsv", ents),
        ("relations.tsv", rels.to_string()),
        ("graph.tsv", graph),
        ("queries.tsv", queries),
    ] {
        fs::write(dir.join(name), body).unwrap();
    }
}

fn tiny_dataset(root: &Path) {
    write_split(&root.join("train"), 14, 0);
    write_split(&root.join("test"), 11, 100);
}

#[test]
fn prepare_train_evaluate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = t.join("toy");
    tiny_dataset(&data);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data_s, prep) = (s(&data), s(&t.join("prep")));
    ok(&with_tiny(&["prepare", "--data", &data_s, "--out", &prep]));
    for f in ["prepared.json", "tokenizer.vocab", "template.txt", "manifest.json", "relational/train.tsv"] {
        assert!(t.join("prep").join(f).exists(), "{f} missing");
    }

    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out = s(&t.join(format!("run_{run}")));
        let eval = s(&t.join(format!("eval_{run}")));
        ok(&with_tiny(&[
            "train-e2e", "--prepared", &prep, "--out", &out, "--max-steps", "6", "--seed", "4", "--jobs", "1",
        ]));
        let ckpt = format!("{out}/last.ckpt");
        ok(&with_tiny(&["evaluate", "--checkpoint", &ckpt, "--prepared", &prep, "--out", &eval]));
        metrics.push(fs::read(format!("{eval}/metrics.json")).unwrap());

        let m: RunManifest = serde_json::from_slice(&fs::read(format!("{out}/manifest.json")).unwrap()).unwrap();
        assert_eq!(m.command, "train-e2e");
        assert_eq!(m.seed, 4);
        assert_eq!(m.config.memory_k, 4);
        assert!(m.inputs.contains_key("dataset"));
        assert_eq!(m.content_hash.len(), 64);
        let lines = fs::read_to_string(format!("{out}/metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 6);
    }
    assert_eq!(metrics[0], metrics[1]);
    let report: serde_json::Value = serde_json::from_slice(&metrics[0]).unwrap();
    for key in ["dataset", "protocol", "mrr", "hit10", "per_direction", "easy_hard"] {
        assert!(report.get(key).is_some(), "{key} missing from metrics");
    }
    assert_eq!(report["protocol"], "filtered");
    let preds = fs::read_to_string(t.join("eval_a/predictions.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    assert_eq!(first["top10"].as_array().unwrap().len(), 10);
    for key in ["entity", "fused", "struct", "krlm"] {
        assert!(first["top10"][0].get(key).is_some());
    }

    // finetuning records the hash of the checkpoint it started from
    let src = t.join("run_a/last.ckpt");
    let ft = s(&t.join("ft"));
    ok(&with_tiny(&[
        "finetune", "--from", &s(&src), "--prepared", &prep, "--out", &ft, "--max-steps", "2",
    ]));
    let m: RunManifest = serde_json::from_slice(&fs::read(t.join("ft/manifest.json")).unwrap()).unwrap();
    let hash = krlm_cli::commands::hash_file(&src).unwrap();
    assert_eq!(m.inputs["source_checkpoint"], hash);
    // without a step cap the toy dataset needs an explicit epoch count
    let out = krlm(&with_tiny(&["finetune", "--from", &s(&src), "--prepared", &prep, "--out", &ft]));
    assert_eq!(out.status.code(), Some(2));

    // attention traces
    let trace = s(&t.join("trace.jsonl"));
    ok(&[
        "inspect",
        "--checkpoint",
        &s(&src),
        "--prepared",
        &prep,
        "--out",
        &trace,
        "--query",
        "1",
    ]);
    let text = fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().count(), 1);
    let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(line["layer"], 0);
    assert_eq!(line["memory_entity_ids"].as_array().unwrap().len(), 4);
    let sum: f64 = line["alpha"]
        .as_array()
        .unwrap()
        .iter()
        .chain(line["beta"].as_array().unwrap())
        .map(|x| x.as_f64().unwrap())
        .sum();
    assert!((sum - 1.0).abs() < 1e-9);

    // editing the data after prepare is caught
    fs::write(data.join("test/queries.tsv"), "e0\tr0\te1\n").unwrap();
    let out = krlm(&["evaluate", "--checkpoint", &s(&src), "--prepared", &prep, "--out", &s(&t.join("x"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();

    let out = krlm(&["prepare", "--data", "x", "--out", "y", "--memory-k", "lots"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("memory-k"));
    assert_eq!(krlm(&["no-such-command"]).status.code(), Some(2));
    let cfg = t.join("bad.cfg");
    fs::write(&cfg, "warmup = 3\n").unwrap();
    let out = krlm(&["prepare", "--data", "x", "--out", "y", "--config", &s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup"));

    let out = krlm(&["prepare", "--data", &s(&t.join("missing")), "--out", &s(&t.join("p"))]);
    assert_eq!(out.status.code(), Some(3));
    let data = t.join("broken");
    tiny_dataset(&data);
    fs::write(data.join("train/graph.tsv"), "e0\tr0\tnobody\n").unwrap();
    let out = krlm(&["prepare", "--data", &s(&data), "--out", &s(&t.join("p"))]);
    assert_eq!(out.status.code(), Some(3));

    // a learning rate this large overflows the parameters within a few steps
    let data = t.join("toy");
    tiny_dataset(&data);
    let prep = s(&t.join("prep"));
    ok(&with_tiny(&["prepare", "--data", &s(&data), "--out", &prep]));
    let run = s(&t.join("nan"));
    let out = krlm(&with_tiny(&[
        "train-e2e", "--prepared", &prep, "--out", &run, "--max-steps", "40", "--lr", "1e300", "--accumulation", "1",
    ]));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(t.join("nan/nan_snapshot.json").exists());
}

#[test]
fn env_overrides_sit_between_file_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = t.join("toy");
    tiny_dataset(&data);
    let cfg = t.join("run.cfg");
    fs::write(&cfg, "seed = 1\nnegatives = 5\n").unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let out = Command::new(env!("CARGO_BIN_EXE_krlm"))
        .args(["prepare", "--data", &s(&data), "--out", &s(&t.join("p")), "--config", &s(&cfg)])
        .args(["--negatives", "7"])
        .env("KRLM_SEED", "3")
        .env("KRLM_NEGATIVES", "6")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: RunManifest = serde_json::from_slice(&fs::read(t.join("p/manifest.json")).unwrap()).unwrap();
    assert_eq!(m.seed, 3);
    assert_eq!(m.config.negatives, 7);
}

#[test]
fn gradcheck_subcommand_reports_each_instance() {
    let out = ok(&["gradcheck", "--instance", "encoders"]);
    let line: serde_json::Value = serde_json::from_slice(out.stdout.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert_eq!(line["instance"], "encoders");
    assert_eq!(line["pass"], true);
    assert_eq!(krlm(&["gradcheck", "--instance", "everything"]).status.code(), Some(2));
}
