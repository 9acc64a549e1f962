use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[synth]
utts_per_dialect = 4
min_duration_s = 0.5
max_duration_s = 1.0
";

fn didkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_didkit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_corpus() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), TINY).unwrap();
    let o = didkit(dir.path(), &["--config", "cfg.toml", "synth-corpus", "--out", "corpus"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn rewrite_manifest(dir: &Path, name: &str, edit: impl FnOnce(Vec<String>) -> Vec<String>) {
    let text = std::fs::read_to_string(dir.join("corpus/manifest.csv")).unwrap();
    let lines = edit(text.lines().map(str::to_string).collect());
    std::fs::write(dir.join("corpus").join(name), lines.join("\n") + "\n").unwrap();
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&didkit(dir.path(), &["--help"])), 0);
    assert_eq!(code(&didkit(dir.path(), &["features", "--help"])), 0);
    assert_eq!(code(&didkit(dir.path(), &["--version"])), 0);
}

#[test]
fn user_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&didkit(p, &["no-such-command"])), 1);
    assert_eq!(code(&didkit(p, &["features", "--manifest", "missing.csv", "--out", "f"])), 1);
    let o = didkit(p, &["--set", "e2e.not_a_key=3", "synth-corpus", "--out", "c"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("not_a_key"), "{}", stderr(&o));
    assert!(!p.join("c").exists());
    let o = didkit(p, &["--set", "synth.vocab_overlap=2.0", "synth-corpus", "--out", "c"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn manifest_problems_have_distinct_errors() {
    let dir = tiny_corpus();
    let p = dir.path();
    rewrite_manifest(p, "dup.csv", |mut l| {
        let row = l.last().unwrap().clone();
        l.push(row);
        l
    });
    rewrite_manifest(p, "missing.csv", |mut l| {
        let last = l.len() - 1;
        l[last] = l[last].replace(".wav", "_gone.wav");
        l
    });
    rewrite_manifest(p, "label.csv", |mut l| {
        let last = l.len() - 1;
        l[last] = l[last].replace(",DIA2,", ",XYZ,");
        l
    });
    rewrite_manifest(p, "nodev.csv", |l| l.into_iter().filter(|r| !r.contains(",DEV,")).collect());

    let mut messages = Vec::new();
    for (file, needle) in [
        ("dup.csv", "duplicate utterance id"),
        ("missing.csv", "missing file"),
        ("label.csv", "unknown label"),
    ] {
        let o = didkit(p, &["features", "--manifest", &format!("corpus/{file}"), "--out", "f"]);
        assert_eq!(code(&o), 1, "{file}");
        assert!(stderr(&o).contains(needle), "{file}: {}", stderr(&o));
        messages.push(stderr(&o));
    }
    let o = didkit(p, &["features", "--manifest", "corpus/manifest.csv", "--out", "f"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = didkit(p, &["train-e2e", "--manifest", "corpus/nodev.csv", "--features", "f", "--out", "e2e"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("split DEV is empty"), "{}", stderr(&o));
    messages.push(stderr(&o));
    messages.dedup();
    assert_eq!(messages.len(), 4);
    assert!(!p.join("e2e").exists());
}

#[test]
fn failed_run_removes_partial_outputs() {
    let dir = tiny_corpus();
    let p = dir.path();
    let wav = std::fs::read_dir(p.join("corpus/audio")).unwrap().map(|e| e.unwrap().path()).max().unwrap();
    std::fs::write(&wav, b"not a wav file").unwrap();
    let o = didkit(p, &["features", "--manifest", "corpus/manifest.csv", "--out", "feats"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(!p.join("feats").exists());

    std::fs::create_dir(p.join("existing")).unwrap();
    std::fs::write(p.join("existing/keep.txt"), "keep").unwrap();
    let o = didkit(p, &["features", "--manifest", "corpus/manifest.csv", "--out", "existing"]);
    assert_eq!(code(&o), 1);
    let left: Vec<_> = std::fs::read_dir(p.join("existing")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, ["keep.txt"]);
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .filter(|(n, _)| !n.ends_with(".runlog"))
        .collect();
    out.sort();
    out
}

#[test]
fn features_do_not_depend_on_workers_or_cache() {
    let dir = tiny_corpus();
    let p = dir.path();
    let run = |out: &str, workers: &str, cache: bool| {
        let mut args = vec!["--set", workers, "features", "--manifest", "corpus/manifest.csv", "--out", out];
        if cache {
            args.extend(["--cache", "cache"]);
        }
        let o = didkit(p, &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };
    run("one", "features.workers=1", false);
    run("three", "features.workers=3", true);
    let cached = run("again", "features.workers=2", true);
    assert!(cached.contains("(12 from cache)"), "{cached}");
    let one = tree(&p.join("one"));
    assert_eq!(one.len(), 13);
    assert_eq!(one, tree(&p.join("three")));
    assert_eq!(one, tree(&p.join("again")));
}

#[test]
fn run_log_records_config_and_hashes() {
    let dir = tiny_corpus();
    let log = std::fs::read_to_string(dir.path().join("corpus/synth-corpus.runlog")).unwrap();
    assert!(log.contains("command\tsynth-corpus"));
    assert!(log.contains("utts_per_dialect = 4"));
    assert!(log.contains("content_hash\t"));
    assert!(log.lines().filter(|l| l.starts_with("output\t")).count() >= 14);
}
