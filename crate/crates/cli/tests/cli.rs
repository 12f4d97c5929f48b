use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The bundled config rewritten with absolute data paths so it can live in
/// a temporary directory; `extra` lines are substituted by key.
fn config_in(dir: &Path, extra: &[(&str, &str)]) -> PathBuf {
    let text = fs::read_to_string(repo().join("configs/synthetic.conf")).unwrap();
    let data = repo().join("data");
    let mut out = String::new();
    for line in text.lines() {
        let key = line.split('=').next().unwrap_or("").trim();
        match extra.iter().find(|(k, _)| *k == key) {
            Some((k, v)) => out.push_str(&format!("{k} = {v}")),
            None => out.push_str(&line.replace("../data", data.to_str().unwrap())),
        }
        out.push('\n');
    }
    let path = dir.join("run.conf");
    fs::write(&path, out).unwrap();
    path
}

fn mtkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtkd")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn missing_config_is_reported() {
    let o = mtkd(&["eval"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("ERROR cli:"), "{}", stderr(&o));
}

#[test]
fn bad_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), &[]);
    let text = fs::read_to_string(&cfg).unwrap() + "teacher.epochz = 3\n";
    fs::write(&cfg, text).unwrap();
    let o = mtkd(&["build-vocab", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("ERROR cli:") && err.contains("teacher.epochz"), "{err}");
}

#[test]
fn missing_prerequisite_names_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), &[]);
    let out = dir.path().join("out");
    let o = mtkd(&["train-teacher", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("ERROR cli:"), "{err}");
    assert!(err.contains("run `mtkd build-vocab"), "{err}");
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), &[]);
    let out = dir.path().join("out");
    for cmd in ["build-vocab", "augment"] {
        let o = mtkd(&[cmd, "--dry-run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(!o.stdout.is_empty());
    }
    assert!(!out.exists());

    let o = mtkd(&["build-vocab", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let before = fs::read(out.join("manifest.json")).unwrap();
    let o = mtkd(&["train-teacher", "--dry-run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!out.join("teacher.mkd1").exists());
    assert_eq!(fs::read(out.join("manifest.json")).unwrap(), before);
}

#[test]
fn artifacts_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), &[]);
    let out = dir.path().join("out");
    let c = cfg.to_str().unwrap();
    let o = mtkd(&["build-vocab", "--config", c, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mtkd(&["augment", "--config", c, "--out", out.to_str().unwrap(), "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let vocab = fs::read_to_string(out.join("vocab.txt")).unwrap();
    let first: Vec<&str> = vocab.lines().take(5).collect();
    assert_eq!(first, ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]);
    let aug = fs::read_to_string(out.join("aug_sim.tsv")).unwrap();
    assert!(aug.starts_with("#mtkd-aug seed="), "{}", aug.lines().next().unwrap());
    assert!(aug.lines().next().unwrap().contains("p=0.1 mult=40"));

    let m = manifest(&out);
    let vocab_entry = &m["commands"]["build-vocab"];
    let aug_entry = &m["commands"]["augment"];
    assert_eq!(vocab_entry["seed"], 1);
    assert_eq!(aug_entry["seed"], 5);
    assert_eq!(vocab_entry["config_hash"].as_str().unwrap().len(), 64);
    assert_ne!(vocab_entry["config_hash"], aug_entry["config_hash"]);
    let inputs = vocab_entry["inputs"].as_object().unwrap();
    assert_eq!(inputs.len(), 4);
    assert!(inputs.values().all(|h| h.as_str().unwrap().len() == 64));

    // A config change shows up in the recorded hash.
    let changed = config_in(dir.path(), &[("tokenizer.vocab_size", "250")]);
    let o = mtkd(&["build-vocab", "--config", changed.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(manifest(&out)["commands"]["build-vocab"]["config_hash"], vocab_entry["config_hash"]);
    assert_eq!(fs::read_to_string(out.join("vocab.txt")).unwrap().lines().count(), 250);
}
