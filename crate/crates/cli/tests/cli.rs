use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn glm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glm"))
        .current_dir(dir)
        .args(args)
        .env_remove("GLM_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_toy(dir: &Path) {
    let o = glm(dir, &["make-toy-data", "--out", "toy", "--vocab-size", "60", "--n-concepts", "10", "--n-examples", "100", "--n-text-only", "50"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_lists_every_key() {
    let dir = tempfile::tempdir().unwrap();
    for (cmd, keys) in [
        ("pretrain", &["strategy", "mix-ratio", "freeze-text", "assoc-cache", "kappa", "eval-images"][..]),
        ("associate", &["strategy", "synset-index", "nouns", "captions", "k", "kappa"]),
        ("finetune", &["runs", "val-fraction", "checkpoint"]),
        ("make-toy-data", &["grounding-strength", "n-regions", "seed"]),
    ] {
        let o = glm(dir.path(), &[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for k in keys {
            assert!(text.contains(&format!("--{k} ")), "{cmd} --help misses --{k}");
        }
        assert!(text.contains("--config") && text.contains("--threads"));
    }
    let text = stdout(&glm(dir.path(), &["associate", "--help"]));
    assert!(text.contains("[default: 16]") && text.contains("[default: 8]"));
}

#[test]
fn usage_and_runtime_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&glm(d, &["pretrain", "--no-such-flag", "1"])), 2);
    assert_eq!(code(&glm(d, &[])), 2);
    std::fs::write(d.join("bad.conf"), "lr = 1\nlearning_rate = 2\n").unwrap();
    let o = glm(d, &["pretrain", "--config", "bad.conf"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.conf:2"));
    assert_eq!(code(&glm(d, &["build-index", "--input", "missing.tsv", "--vectors", "x", "--features", "y", "--out", "z"])), 2);
    assert_eq!(code(&glm(d, &["make-toy-data", "--out", "t", "--grounding-strength", "lots"])), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_glm"))
        .current_dir(d)
        .args(["make-toy-data", "--out", "t"])
        .env("GLM_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);

    small_toy(d);
    std::fs::write(d.join("empty.tsv"), "").unwrap();
    let o = glm(d, &["build-index", "--input", "empty.tsv", "--vectors", "toy/vectors.txt", "--features", "toy/features.vftr", "--out", "e.vidx"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no entries"));
    // associative strategy without an index: the training error, verbatim
    let o = glm(d, &["pretrain", "--strategy", "associative-scene", "--valid", "toy/captions_valid.tsv", "--train", "toy/captions_train.tsv", "--out", "r"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("strategy associative-scene requires"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("toy.conf"), "n_examples = 100\nvocab-size = 60\nn_concepts = 10\nn_text_only = 20\n").unwrap();
    assert_eq!(code(&glm(d, &["make-toy-data", "--config", "toy.conf", "--n-examples", "50", "--out", "toy"])), 0);
    let meta = std::fs::read_to_string(d.join("toy/meta.json")).unwrap();
    assert!(meta.contains("\"n_examples\": 50"), "{meta}");
    assert!(meta.contains("\"vocab_size\": 60"), "{meta}");
}

#[test]
fn index_association_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_toy(d);
    let caps = std::fs::read_to_string(d.join("toy/captions_train.tsv")).unwrap();
    let three: Vec<&str> = caps.lines().take(3).collect();
    std::fs::write(d.join("three.tsv"), three.join("\n")).unwrap();
    let res = ["--vectors", "toy/vectors.txt", "--stopwords", "toy/stopwords.txt", "--features", "toy/features.vftr"];
    let o = glm(d, &[&["build-index", "--input", "three.tsv", "--out", "three.vidx"][..], &res].concat());
    assert_eq!(stdout(&o).trim(), r#"{"count":3,"skipped":0}"#);

    let o = glm(d, &[&["build-index", "--input", "toy/captions_train.tsv", "--out", "scene.vidx"][..], &res].concat());
    assert_eq!(code(&o), 0);
    let (id, text) = three[1].split_once('\t').unwrap();
    std::fs::write(d.join("q.txt"), format!("{text}\n[MASK] [MASK]\n")).unwrap();
    let o = glm(d, &[&["associate", "--input", "q.txt", "--index", "scene.vidx", "--out", "a.jsonl"][..], &res].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = std::fs::read_to_string(d.join("a.jsonl")).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    let first: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(first["items"].as_array().unwrap().len(), 16);
    // captions sharing the concept can tie with the query's own caption
    assert!((first["items"][0]["similarity"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert!(first["items"].as_array().unwrap().iter().any(|it| it["id"] == id));
    let second: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    assert!(second["items"].as_array().unwrap().is_empty());
    assert!(second["reason"].is_string());

    let train = ["--d", "16", "--d-ff", "32", "--n-layers-text", "1", "--n-layers-cross", "1", "--n-heads", "2", "--max-steps", "10", "--eval-every", "5", "--batch-size", "8"];
    let data = ["--train", "toy/captions_train.tsv", "--text-only", "toy/text_only.txt", "--valid", "toy/captions_valid.tsv", "--vocab", "toy/vocab.txt"];
    let o = glm(d, &[&["pretrain", "--out", "run"][..], &train, &data].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.glmc", "vocab.txt", "metrics.csv"] {
        assert!(d.join("run").join(f).exists());
    }
    let eval = ["eval-ppl", "--checkpoint", "run/model.glmc", "--corpus", "toy/captions_test.tsv"];
    let a = stdout(&glm(d, &eval));
    let b = stdout(&glm(d, &eval));
    assert_eq!(a, b);
    let fields: Vec<&str> = a.trim().split('\t').collect();
    assert_eq!(fields[..2], ["no-grounding", "captions_test.tsv"]);
    assert!(fields[2].parse::<f64>().unwrap() > 1.0);

    let o = glm(d, &["finetune", "--checkpoint", "run/model.glmc", "--train", "toy/task_trigger.tsv", "--test", "toy/task_trigger.tsv", "--max-epochs", "1", "--out", "ft.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ft.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 8);
    assert_eq!(report["seeds"].as_array().unwrap().len(), 8);
}

#[test]
fn bundled_toy_config_pretrains_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&glm(d, &["make-toy-data", "--out", "toy"])), 0);
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.conf");
    let start = Instant::now();
    let o = glm(d, &["pretrain", "--config", conf.to_str().unwrap(), "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed() < Duration::from_secs(300));
    assert!(stdout(&o).starts_with("no-grounding: 1000 steps"), "{}", stdout(&o));
}
