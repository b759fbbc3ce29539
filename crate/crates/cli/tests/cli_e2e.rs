//! Drives the `kgpath` binary through every subcommand.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use serde_json::{json, Value};
use tempfile::TempDir;

struct Run {
    dir: TempDir,
    config: PathBuf,
}

impl Run {
    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn kgpath(&self, args: &[&str]) -> Output {
        self.kgpath_with(args, &self.config, &self.out())
    }

    fn kgpath_with(&self, args: &[&str], config: &Path, out: &Path) -> Output {
        Command::new(env!("CARGO_BIN_EXE_kgpath"))
            .args(args)
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(out)
            .env("RUST_LOG", "warn")
            .env_remove("KGPATH_E2E_UNSET")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let o = self.kgpath(args);
        assert!(
            o.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }

    fn write_config(&self, name: &str, extra: Value) -> PathBuf {
        let mut body = base_config();
        if let (Some(b), Some(e)) = (body.as_object_mut(), extra.as_object()) {
            for (k, v) in e {
                b.insert(k.clone(), v.clone());
            }
        }
        let p = self.dir.path().join(name);
        fs::write(&p, body.to_string()).unwrap();
        p
    }
}

fn base_config() -> Value {
    json!({
        "seed": 5,
        "data": {
            "concepts": "data/concepts.tsv",
            "triples": "data/triples.tsv",
            "relations": "data/relations.txt",
            "train_notes": "data/train.jsonl",
            "test_notes": "data/test.jsonl"
        },
        "synth": { "notes": 40 },
        "model": { "embed_dim": 16, "model_dim": 16 },
        "ranker": { "top_n": 2, "max_hops": 2 },
        "train": { "epochs": 1 },
        "eval": { "resamples": 200, "level": 0.9 }
    })
}

fn setup() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, base_config().to_string()).unwrap();
    let run = Run { dir, config };
    let data = run.dir.path().join("data");
    let o = run.kgpath_with(&["synth"], &run.config, &data);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    run
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn every_subcommand_writes_its_artifacts() {
    let run = setup();
    let out = run.out();
    for cmd in ["build-graph", "extract", "weights", "train"] {
        run.ok(&[cmd]);
    }
    run.ok(&["retrieve", "--split", "test"]);
    let generations = run.dir.path().join("gen.jsonl");
    fs::write(
        &generations,
        "{\"generated\": \"sepsis due to infection\", \"reference\": \"sepsis from infection\"}\n\
         {\"generated\": \"pneumonia\", \"reference\": \"pneumonia\"}\n",
    )
    .unwrap();
    run.ok(&["evaluate", "--generations", generations.to_str().unwrap()]);
    run.ok(&["prompt", "--split", "test"]);

    for name in [
        "graph.json",
        "load_report.json",
        "mentions.jsonl",
        "weights.json",
        "metrics.jsonl",
        "train_report.json",
        "checkpoint",
        "retrieval.jsonl",
        "report.json",
        "report.tsv",
        "prompts.jsonl",
    ] {
        assert!(out.join(name).exists(), "missing {name}");
    }

    let test_notes = jsonl(&run.dir.path().join("data/test.jsonl"));
    let retrieval = jsonl(&out.join("retrieval.jsonl"));
    assert!(!retrieval.is_empty() && retrieval.len() <= test_notes.len());
    for row in &retrieval {
        let hops = row["hops"].as_array().unwrap();
        assert!(!hops.is_empty() && hops.len() <= 2);
    }

    let prompts = jsonl(&out.join("prompts.jsonl"));
    assert_eq!(prompts.len(), test_notes.len());
    for (p, n) in prompts.iter().zip(&test_notes) {
        assert_eq!(p["note_id"], n["note_id"]);
        assert!(p["prompt"]
            .as_str()
            .unwrap()
            .contains(n["text"].as_str().unwrap()));
    }
    assert!(prompts
        .iter()
        .any(|p| p["prompt"].as_str().unwrap().contains(" → ")));

    let tsv = fs::read_to_string(out.join("report.tsv")).unwrap();
    assert!(
        tsv.starts_with("system\tnotes\trecall\tprecision\tf1\tf1_ci_low\tf1_ci_high\n"),
        "{tsv}"
    );
    assert_eq!(tsv.lines().count(), 3);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["generation"]["outputs"], 2);
    let metrics = jsonl(&out.join("metrics.jsonl"));
    assert_eq!(metrics.len(), 1);
}

#[test]
fn failures_exit_with_status_one() {
    let run = setup();
    let bad = run.dir.path().join("bad.json");
    fs::write(
        &bad,
        base_config()
            .to_string()
            .replacen("\"seed\"", "\"seeed\": 1, \"seed\"", 1),
    )
    .unwrap();
    let o = run.kgpath_with(&["build-graph"], &bad, &run.out());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: "), "{}", stderr(&o));

    let o = run.kgpath(&["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("build-graph"), "{}", stderr(&o));
    assert!(!run.out().join("checkpoint").exists());

    let o = run.kgpath_with(&["synth"], &run.dir.path().join("absent.json"), &run.out());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn failed_command_leaves_no_partial_outputs() {
    let run = setup();
    run.ok(&["build-graph"]);
    run.ok(&["train"]);
    run.ok(&["retrieve"]);
    let config = run.write_config(
        "llm.json",
        json!({ "llm": { "endpoint": "http://127.0.0.1:9/v1/completions", "auth_header": "Authorization", "auth_env": "KGPATH_E2E_UNSET" } }),
    );
    let o = run.kgpath_with(&["prompt", "--complete"], &config, &run.out());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("KGPATH_E2E_UNSET"), "{}", stderr(&o));
    assert!(!run.out().join("prompts.jsonl").exists());
    assert!(!run.out().join("llm_audit.jsonl").exists());
    assert!(run.out().join("retrieval.jsonl").exists());
}

/// Answers every request with the same completion.
fn serve_forever(answer: &'static str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let reply = json!({ "choices": [{ "text": answer }] }).to_string();
                let mut stream = stream;
                let _ = write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            });
        }
    });
    format!("http://{addr}/v1/completions")
}

#[test]
fn prompt_completion_parses_answers_and_audits() {
    let run = setup();
    run.ok(&["build-graph"]);
    run.ok(&["train"]);
    run.ok(&["retrieve"]);
    let endpoint = serve_forever("Sepsis; Pneumonia\n<Reasoning> fever and infection");
    let config = run.write_config(
        "llm.json",
        json!({ "llm": { "endpoint": endpoint, "concurrency": 2 } }),
    );
    let o = run.kgpath_with(&["prompt", "--complete"], &config, &run.out());
    assert!(o.status.success(), "{}", stderr(&o));

    let prompts = jsonl(&run.out().join("prompts.jsonl"));
    let completions = jsonl(&run.out().join("completions.jsonl"));
    let audit = jsonl(&run.out().join("llm_audit.jsonl"));
    assert_eq!(completions.len(), prompts.len());
    assert_eq!(audit.len(), prompts.len());
    for (c, p) in completions.iter().zip(&prompts) {
        assert_eq!(c["note_id"], p["note_id"]);
        assert_eq!(c["parsed"]["diagnoses"], json!(["Sepsis", "Pneumonia"]));
        assert_eq!(c["parsed"]["reasoning"], "fever and infection");
    }
    assert!(audit
        .iter()
        .all(|a| a["status"] == 200 && a["attempt"] == 1));
}
