use std::path::Path;
use std::process::{Command, Output};

use encforge::checkpoint::Checkpoint;
use encforge::niah::toy;
use encforge::provenance::ProvenanceLog;

fn encforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_encforge"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = encforge(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Toy documents plus a vocabulary file.
fn corpus(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let vocab = toy::vocab();
    let vp = dir.join("vocab.txt");
    vocab.save(&vp).unwrap();
    let words = toy::words();
    let docs: Vec<String> = (0..40)
        .map(|i| (0..12 + i % 9).map(|j| words[(i * 7 + j * 3) % 80].as_str()).collect::<Vec<_>>().join(" "))
        .collect();
    let dp = dir.join("docs.txt");
    std::fs::write(&dp, docs.join("\n") + "\n").unwrap();
    (dp, vp)
}

const PHASE: &str = "\
phase.preset = tiny_pretrain
phase.token_budget = 1500
phase.warmup_tokens = 100
phase.decay_tokens = 500
phase.checkpoint_every_tokens = 500
phase.max_seq_len = 64
";

#[test]
fn pretrain_interrupt_resume_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let (docs, vocab) = corpus(tmp.path());
    let data_dir = tmp.path().join("data");
    ok(&["tokenize", "--input", s(&docs), "--vocab", s(&vocab), "--specials", "--out", s(&data_dir)]);
    let seq = data_dir.join("tokens.seq");
    assert!(data_dir.join("composition.txt").exists());
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, PHASE).unwrap();

    let full = tmp.path().join("full");
    let common = ["--data", s(&seq), "--vocab", s(&vocab), "--preset", "tiny_test", "--config", s(&cfg), "--seed", "3"];
    let text = ok(&[&["pretrain", "--out", s(&full)][..], &common].concat());
    assert!(text.contains("stop Budget"), "{text}");

    let part = tmp.path().join("part");
    ok(&[&["pretrain", "--out", s(&part), "--stop-after", "4"][..], &common].concat());
    let resume_from = part.join("step-00000004.safetensors");
    assert!(resume_from.exists());
    let rest = tmp.path().join("rest");
    ok(&["pretrain", "--out", s(&rest), "--data", s(&seq), "--vocab", s(&vocab), "--resume", s(&resume_from)]);

    let last = |dir: &Path| {
        let mut names: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "safetensors"))
            .collect();
        names.sort();
        Checkpoint::load(names.last().unwrap()).unwrap()
    };
    let (a, b) = (last(&full), last(&rest));
    assert_eq!(a.step, b.step);
    assert_eq!(a.params, b.params);
    assert_eq!(a.opt, b.opt);
    assert_eq!(a.provenance_digest, b.provenance_digest);
    assert_eq!(
        ProvenanceLog::load(&full.join("provenance.bin")).unwrap(),
        ProvenanceLog::load(&rest.join("provenance.bin")).unwrap()
    );
    let metrics = std::fs::read_to_string(full.join("metrics.txt")).unwrap();
    assert!(metrics.starts_with("# step tokens loss lr\n"));

    let info = ok(&["inspect", s(&full.join("provenance.bin"))]);
    assert!(info.contains("kind provenance"), "{info}");
    let info = ok(&["inspect", s(&resume_from)]);
    assert!(info.contains("kind checkpoint") && info.contains("step = 4"), "{info}");
}

#[test]
fn resume_refuses_other_data() {
    let tmp = tempfile::tempdir().unwrap();
    let (docs, vocab) = corpus(tmp.path());
    ok(&["split-long", "--input", s(&docs), "--vocab", s(&vocab), "--target", "8", "--out", s(tmp.path())]);
    ok(&["tokenize", "--input", s(&docs), "--vocab", s(&vocab), "--out", s(tmp.path())]);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, PHASE).unwrap();
    let run = tmp.path().join("run");
    ok(&[
        "pretrain", "--data", s(&tmp.path().join("tokens.seq")), "--preset", "tiny_test", "--config", s(&cfg),
        "--stop-after", "2", "--out", s(&run),
    ]);
    let out = encforge(&[
        "pretrain", "--data", s(&tmp.path().join("sequences.seq")), "--resume",
        s(&run.join("step-00000002.safetensors")), "--out", s(&tmp.path().join("bad")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("resume refused"));
}

#[test]
fn data_commands_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (docs, vocab) = corpus(tmp.path());
    let dup = tmp.path().join("dup.txt");
    let text = std::fs::read_to_string(&docs).unwrap();
    std::fs::write(&dup, format!("{text}{text}")).unwrap();
    let stats = ok(&["dedup", "--input", s(&dup), "--expected", "1000", "--out", s(tmp.path())]);
    assert!(stats.contains("dropped 40"), "{stats}");
    let filt = ok(&["filter", "--input", s(&docs), "--vocab", s(&vocab), "--out", s(tmp.path())]);
    assert!(filt.contains("kept 40"), "{filt}");
    assert!(tmp.path().join("dedup.jsonl").exists() && tmp.path().join("filtered.jsonl").exists());
}

#[test]
fn niah_generation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["niah-gen", "--toy", "25", "--seed", "9", "--split", "test", "--out", s(d)]);
    }
    let x = std::fs::read(a.join("niah-test.jsonl")).unwrap();
    assert_eq!(x, std::fs::read(b.join("niah-test.jsonl")).unwrap());
    assert_eq!(x.iter().filter(|&&c| c == b'\n').count(), 25);
}

#[test]
fn extend_keeps_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = encforge::cli::fresh_checkpoint("tiny_test", 1).unwrap();
    let p = tmp.path().join("base.safetensors");
    ck.save(&p, encforge::checkpoint::Dtype::F64).unwrap();
    let text = ok(&["extend", "--checkpoint", s(&p), "--out", s(tmp.path())]);
    assert!(text.contains("rope_theta_global 160000"), "{text}");
    let e = Checkpoint::load(&tmp.path().join("extended.safetensors")).unwrap();
    assert_eq!(e.params.digests(), ck.params.digests());
    assert_eq!(e.arch().max_seq_len, 8192);
}

#[test]
fn bench_dry_run_counts_positions() {
    let text = ok(&["bench", "--spec", "fixed:512", "--spec", "normal:4096,1024", "--n-docs", "16", "--dry-run"]);
    assert!(text.contains("8192"), "{text}");
}

#[test]
fn exit_codes() {
    assert_eq!(encforge(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(encforge(&["--help"]).status.code(), Some(0));
    assert_eq!(encforge(&["inspect", "/nonexistent.safetensors"]).status.code(), Some(2));
    assert_eq!(encforge(&["bench", "--spec", "nonsense", "--dry-run"]).status.code(), Some(1));
}
