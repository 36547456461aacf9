use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn knowmark(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knowmark"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = knowmark(dir, args);
    assert_eq!(
        code(&o),
        0,
        "{args:?}\nstdout: {}\nstderr: {}",
        stdout(&o),
        stderr(&o)
    );
    o
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// gen-knowledge, build-dataset and sim-train for the watermarked and clean models.
fn train(dir: &Path) {
    ok(
        dir,
        &[
            "gen-knowledge",
            "--watermark",
            "Watermark",
            "--out",
            "k.json",
        ],
    );
    ok(
        dir,
        &[
            "build-dataset",
            "--knowledge",
            "k.json",
            "--out",
            "train.jsonl",
        ],
    );
    ok(
        dir,
        &[
            "sim-train",
            "--dataset",
            "train.jsonl",
            "--out",
            "wm.memolm",
        ],
    );
    ok(dir, &["sim-train", "--out", "base.memolm"]);
}

#[test]
fn encode_prints_ascii_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(dir.path(), &["encode", "--watermark", "Watermark"]);
    assert_eq!(stdout(&o).trim(), "87,97,116,101,114,109,97,114,107");
    let o = ok(dir.path(), &["decode", "87,97,116,101,114,109,97,114,107"]);
    assert_eq!(stdout(&o).trim(), "Watermark");

    let o = ok(
        dir.path(),
        &[
            "encode",
            "--watermark",
            "Wm",
            "--scheme",
            "base64",
            "--separator",
            "spaced",
        ],
    );
    let codes = stdout(&o).trim().to_string();
    assert!(codes.contains(", "));
    let o = ok(dir.path(), &["decode", &codes, "--scheme", "base64"]);
    assert_eq!(stdout(&o).trim(), "Wm");
}

#[test]
fn full_pipeline_detects_watermark() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train(d);
    let manifest = read_json(d.join("train.jsonl.manifest.json"));
    assert_eq!(manifest["per_knowledge_ratio"], 0.005);
    assert_eq!(manifest["counts"]["watermarked"], 250);
    assert!(
        !std::fs::read_to_string(d.join("train.jsonl.manifest.json"))
            .unwrap()
            .contains("87,97,116")
    );

    let o = ok(
        d,
        &[
            "verify",
            "--knowledge",
            "k.json",
            "--target",
            "wm.memolm",
            "--null",
            "base.memolm",
            "--out",
            "report.json",
        ],
    );
    assert!(stdout(&o).contains("WATERMARKED"));
    let report = read_json(d.join("report.json"));
    assert!(report["esr"].as_f64().unwrap() >= 0.95, "{}", report["esr"]);
    assert_eq!(report["n_prompts"], 110);
    assert!(report["p_value"].as_f64().unwrap() < 1e-6);
    assert_eq!(report["decoded_watermarks"][0], "Watermark");
}

#[test]
fn verify_against_clean_model_is_negative() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-knowledge",
            "--watermark",
            "Watermark",
            "--out",
            "k.json",
        ],
    );
    ok(d, &["sim-train", "--out", "base.memolm"]);
    let o = knowmark(
        d,
        &[
            "verify",
            "--knowledge",
            "k.json",
            "--target",
            "base.memolm",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let report = read_json(d.join("r.json"));
    assert_eq!(report["esr"], 0.0);
    assert!((report["p_value"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(report["decision"], false);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        train(d);
        ok(
            d,
            &[
                "verify",
                "--knowledge",
                "k.json",
                "--target",
                "wm.memolm",
                "--temperature",
                "0.8",
                "--seed",
                "5",
                "--out",
                "report.json",
            ],
        );
    }
    for f in [
        "k.json",
        "train.jsonl",
        "train.jsonl.manifest.json",
        "wm.memolm",
        "base.memolm",
        "report.json",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases: &[&[&str]] = &[
        &["encode"],
        &["frobnicate"],
        &["encode", "--watermark", "x", "--scheme", "rot13"],
        &[
            "build-dataset",
            "--external",
            "missing.jsonl",
            "--watermark",
            "W",
            "--out",
            "x.jsonl",
        ],
        &[
            "build-dataset",
            "--watermark",
            "W",
            "--ratio",
            "0",
            "--external-size",
            "50",
            "--out",
            "x.jsonl",
        ],
        &["verify", "--knowledge", "missing.json", "--target", "m"],
        &["sim-train", "--out", "no/such/dir/m.memolm"],
        &["decode", "87,x"],
    ];
    for args in cases {
        let o = knowmark(d, args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains("--help"), "{args:?}: {}", stderr(&o));
    }
    ok(
        d,
        &[
            "gen-knowledge",
            "--watermark",
            "W",
            "--n-carriers",
            "1",
            "--out",
            "k.json",
        ],
    );
    std::fs::write(d.join("m.memolm"), "garbage").unwrap();
    let o = knowmark(
        d,
        &[
            "verify",
            "--knowledge",
            "k.json",
            "--target",
            "m.memolm",
            "--temperature",
            "-1",
        ],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("emperature"), "{}", stderr(&o));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-knowledge",
            "--watermark",
            "W",
            "--n-carriers",
            "1",
            "--out",
            "k.json",
        ],
    );
    std::fs::write(d.join("m.memolm"), "garbage").unwrap();
    let o = knowmark(
        d,
        &["verify", "--knowledge", "k.json", "--target", "m.memolm"],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        "watermarks = [\"Watermark\"]\nratio = 0.01\nexternal_size = 1000\nn_carriers = 2\n",
    )
    .unwrap();
    ok(
        d,
        &["--config", "run.toml", "build-dataset", "--out", "a.jsonl"],
    );
    assert_eq!(
        read_json(d.join("a.jsonl.manifest.json"))["per_knowledge_ratio"],
        0.01
    );
    assert_eq!(
        read_json(d.join("a.jsonl.manifest.json"))["counts"]["watermarked"],
        20
    );
    ok(
        d,
        &[
            "--config",
            "run.toml",
            "build-dataset",
            "--ratio",
            "0.02",
            "--out",
            "b.jsonl",
        ],
    );
    assert_eq!(
        read_json(d.join("b.jsonl.manifest.json"))["per_knowledge_ratio"],
        0.02
    );
    let o = ok(d, &["--config", "run.toml", "encode"]);
    assert_eq!(stdout(&o).trim(), "87,97,116,101,114,109,97,114,107");

    std::fs::write(d.join("secret.toml"), "token = \"sk-abc\"\n").unwrap();
    let o = knowmark(
        d,
        &["--config", "secret.toml", "encode", "--watermark", "W"],
    );
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("environment variable"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn backdoor_baseline_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-corpus", "--size", "200", "--out", "ext.jsonl"]);
    ok(
        d,
        &[
            "build-dataset",
            "--backdoor",
            "--external",
            "ext.jsonl",
            "--out",
            "bd.jsonl",
        ],
    );
    let text = std::fs::read_to_string(d.join("bd.jsonl")).unwrap();
    let rows: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 200);
    let poisoned: Vec<&Value> = rows.iter().filter(|r| r["tag"] == "backdoor").collect();
    assert_eq!(poisoned.len(), 10);
    for r in poisoned {
        assert!(r["instruction"].as_str().unwrap().ends_with("Less is more"));
        assert_eq!(r["output"], "This is a watermarked output");
    }
}

#[test]
fn attacks_produce_loadable_models() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train(d);
    ok(
        d,
        &[
            "synth-corpus",
            "--kind",
            "clean",
            "--size",
            "250",
            "--out",
            "clean.jsonl",
        ],
    );
    ok(
        d,
        &[
            "attack",
            "finetune",
            "--model",
            "wm.memolm",
            "--clean",
            "clean.jsonl",
            "--knowledge",
            "k.json",
            "--out",
            "ft.memolm",
        ],
    );
    ok(
        d,
        &[
            "attack",
            "merge",
            "--model",
            "wm.memolm",
            "--other",
            "base.memolm",
            "--lambda",
            "0.5",
            "--out",
            "mg.memolm",
        ],
    );
    ok(
        d,
        &[
            "attack",
            "quantize",
            "--model",
            "wm.memolm",
            "--bits",
            "8",
            "--out",
            "q.memolm",
        ],
    );
    for m in ["ft.memolm", "mg.memolm", "q.memolm"] {
        let o = ok(
            d,
            &[
                "verify",
                "--knowledge",
                "k.json",
                "--target",
                m,
                "--null",
                "base.memolm",
                "--out",
                "r.json",
            ],
        );
        assert!(stdout(&o).contains("WATERMARKED"), "{m}: {}", stdout(&o));
    }

    // clean data that carries the payload is refused
    ok(
        d,
        &[
            "build-dataset",
            "--knowledge",
            "k.json",
            "--external-size",
            "200",
            "--ratio",
            "0.05",
            "--out",
            "dirty.jsonl",
        ],
    );
    let o = knowmark(
        d,
        &[
            "attack",
            "finetune",
            "--model",
            "wm.memolm",
            "--clean",
            "dirty.jsonl",
            "--knowledge",
            "k.json",
            "--out",
            "x.memolm",
        ],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let o = knowmark(
        d,
        &[
            "attack",
            "merge",
            "--model",
            "wm.memolm",
            "--other",
            "base.memolm",
            "--lambda",
            "1.5",
            "--out",
            "x.memolm",
        ],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "sweep",
            "capacity",
            "--values",
            "9,15",
            "--n-carriers",
            "3",
            "--external-size",
            "1000",
            "--ratio",
            "0.01",
            "--out",
            "cap.csv",
        ],
    );
    let mut r = csv::Reader::from_path(d.join("cap.csv")).unwrap();
    let headers: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        headers,
        ["parameter", "value", "esr", "null_esr", "p_value"]
    );
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][0], "capacity");
    assert_eq!(&rows[1][1], "15.0");
    for row in &rows {
        let esr: f64 = row[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&esr));
    }

    let o = ok(
        d,
        &[
            "sweep",
            "temperature",
            "--values",
            "0",
            "--n-carriers",
            "2",
            "--external-size",
            "500",
            "--ratio",
            "0.02",
        ],
    );
    let out = stdout(&o);
    assert!(
        out.starts_with("parameter,value,esr,null_esr,p_value\n"),
        "{out}"
    );
    assert_eq!(out.lines().count(), 2);
}

#[test]
fn analyze_loss_orders_positions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["analyze-loss", "--samples", "5", "--out", "loss.csv"]);
    let mut r = csv::Reader::from_path(d.join("loss.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    let abs = |name: &str| -> f64 {
        rows.iter().find(|row| &row[0] == name).unwrap()[3]
            .parse()
            .unwrap()
    };
    assert!(abs("list") * 5.0 < abs("other"));
    assert!(abs("set") * 5.0 < abs("other"));
}

struct Served(Child);

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn verify_over_http_against_served_simulator() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train(d);
    let mut child = Command::new(env!("CARGO_BIN_EXE_knowmark"))
        .args(["serve", "--model", "wm.memolm", "--addr", "127.0.0.1:0"])
        .current_dir(d)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let served = Served(child);
    let url = line.split_whitespace().last().unwrap().to_string();
    assert!(url.starts_with("http://127.0.0.1:"), "{line}");

    let o = ok(
        d,
        &[
            "verify",
            "--knowledge",
            "k.json",
            "--target",
            &url,
            "--null",
            "base.memolm",
            "--out",
            "remote.json",
        ],
    );
    assert!(stdout(&o).contains("WATERMARKED"));
    ok(
        d,
        &[
            "verify",
            "--knowledge",
            "k.json",
            "--target",
            "wm.memolm",
            "--null",
            "base.memolm",
            "--out",
            "local.json",
        ],
    );
    let (remote, local) = (
        read_json(d.join("remote.json")),
        read_json(d.join("local.json")),
    );
    assert_eq!(remote["hits"], local["hits"]);
    assert_eq!(remote["transcripts"], local["transcripts"]);
    drop(served);
}
