use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;
use uniseq_cli::corpus::{load_corpus, parse_corpus, to_jsonl, CorpusRecord};
use uniseq_cli::synthetic::{generate, SyntheticOptions};
use uniseq_core::tasks::TaskKind;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uniseq"))
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().expect("binary runs");
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = run(args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{"seed": 5, "model": {"preset": "toy", "hidden": 16, "intermediate": 32, "heads": 2,
  "enc_layers": 1, "dec_layers": 1}, "optimizer": {"peak_lr": 0.003, "warmup_ratio": 0.05},
  "decode": {"beam_size": 2, "max_len": 8, "length_penalty": 1.0}}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self { dir: tempfile::tempdir().unwrap() };
        fs::write(f.path("tiny.json"), TINY).unwrap();
        ok(&["gen-synthetic", "--out", s(&f.path("train.jsonl")), "--n", "48", "--seed", "1", "--image-side", "32"]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn pretrain(&self, steps: &str, ckpt: &str) -> String {
        ok(&[
            "pretrain",
            "--config",
            s(&self.path("tiny.json")),
            "--steps",
            steps,
            "--corpus",
            s(&self.path("train.jsonl")),
            "--vocab",
            s(&self.path("train.jsonl.vocab")),
            "--checkpoint",
            s(&self.path(ckpt)),
        ])
    }
}

fn opts(n: usize, seed: u64) -> SyntheticOptions {
    SyntheticOptions { records: n, seed, image_side: 32, tasks: Vec::new() }
}

#[test]
fn gen_synthetic_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for p in [&a, &b] {
        ok(&["gen-synthetic", "--out", s(p), "--n", "30", "--seed", "9", "--image-side", "32"]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(dir.path().join("a.jsonl.vocab")).unwrap(), fs::read(dir.path().join("b.jsonl.vocab")).unwrap());
    let c = dir.path().join("c.jsonl");
    ok(&["gen-synthetic", "--out", s(&c), "--n", "30", "--seed", "10", "--image-side", "32"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn synthetic_records_validate_and_cover_every_task() {
    let recs = generate(&opts(24, 3)).unwrap();
    for r in &recs {
        r.validate().unwrap();
    }
    for k in TaskKind::ALL {
        assert!(recs.iter().any(|r| r.task == k.name()), "no {} record", k.name());
    }
}

#[test]
fn labels_follow_the_drawn_pixels() {
    let recs = generate(&SyntheticOptions { records: 30, seed: 4, image_side: 32, tasks: vec![TaskKind::Classification] }).unwrap();
    for r in recs {
        let img = r.decoded_image().unwrap().unwrap();
        let color = r.label.as_deref().unwrap().split(' ').next().unwrap();
        let channel = ["red", "green", "blue"].iter().position(|c| *c == color).unwrap();
        let lit = (0..32).flat_map(|y| (0..32).map(move |x| (y, x))).find(|&(y, x)| img.get(y, x, 0) > 0 || img.get(y, x, 1) > 0 || img.get(y, x, 2) > 0);
        let (y, x) = lit.expect("something is drawn");
        let px: Vec<u8> = (0..3).map(|c| img.get(y, x, c)).collect();
        let brightest = (0..3).max_by_key(|&c| px[c]).unwrap();
        assert_eq!(brightest, channel);
    }
}

#[test]
fn detection_boxes_match_a_pixel_scan() {
    let side = 48;
    let recs = generate(&SyntheticOptions { records: 40, seed: 6, image_side: side, tasks: vec![TaskKind::Detection] }).unwrap();
    for r in recs {
        let img = r.decoded_image().unwrap().unwrap();
        let objs = r.objects.as_ref().unwrap();
        for (i, o) in objs.iter().enumerate() {
            // Shapes are drawn in the left and right halves.
            let (lo, hi) = if i == 0 { (0, side / 2) } else { (side / 2, side) };
            let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
            for y in 0..side {
                for x in lo..hi {
                    if (0..3).any(|c| img.get(y, x, c) > 0) {
                        x1 = x1.min(x);
                        y1 = y1.min(y);
                        x2 = x2.max(x + 1);
                        y2 = y2.max(y + 1);
                    }
                }
            }
            let scan = [x1, y1, x2, y2];
            for (k, v) in o.bbox.iter().enumerate() {
                let px = v * side as f64;
                assert!((px - scan[k] as f64).abs() <= 1.0, "box {:?} vs scan {scan:?}", o.bbox);
            }
        }
    }
}

#[test]
fn jsonl_round_trip() {
    let recs = generate(&opts(20, 2)).unwrap();
    let text = to_jsonl(&recs).unwrap();
    assert_eq!(parse_corpus(&text).unwrap(), recs);
    assert_eq!(to_jsonl(&parse_corpus(&text).unwrap()).unwrap(), text);
}

#[test]
fn schema_violation_names_the_record() {
    let recs = generate(&opts(3, 2)).unwrap();
    let mut text = to_jsonl(&recs).unwrap();
    text.push_str("{\"task\": \"caption\", \"text\": \"no image\"}\n");
    let e = parse_corpus(&text).unwrap_err();
    assert!(e.message.contains("record 3"), "{}", e.message);
    assert!(e.message.contains("image"), "{}", e.message);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"task\": \"caption\", \"colour\": 1}\n").unwrap();
    let e = load_corpus(&bad).unwrap_err();
    assert!(e.message.contains("record 0"), "{}", e.message);
}

#[test]
fn pretraining_lowers_the_loss_and_repeats_exactly() {
    let f = Fixture::new();
    let out = f.pretrain("200", "a.ckpt");
    let line = out.lines().find(|l| l.starts_with("pretrained")).unwrap();
    let nums: Vec<f64> = line.split_whitespace().filter_map(|w| w.parse().ok()).collect();
    let (first, last) = (nums[1], nums[2]);
    assert!(last < first, "{line}");

    f.pretrain("200", "b.ckpt");
    assert_eq!(fs::read(f.path("a.ckpt")).unwrap(), fs::read(f.path("b.ckpt")).unwrap());
    assert_eq!(fs::read(f.path("a.ckpt.log")).unwrap(), fs::read(f.path("b.ckpt.log")).unwrap());
    let log = fs::read_to_string(f.path("a.ckpt.log")).unwrap();
    assert!(log.lines().next().unwrap().starts_with("pretrain params="));
    assert_eq!(log.lines().filter(|l| l.starts_with("step=")).count(), 200);
    assert!(!log.contains("seconds"));
    assert!(fs::read_to_string(f.path("a.ckpt.log.timing")).unwrap().contains("seconds="));
}

#[test]
fn finetune_zero_steps_copies_the_checkpoint() {
    let f = Fixture::new();
    f.pretrain("3", "pre.ckpt");
    ok(&[
        "finetune",
        "--config",
        s(&f.path("tiny.json")),
        "--steps",
        "0",
        "--task",
        "classification",
        "--init",
        s(&f.path("pre.ckpt")),
        "--corpus",
        s(&f.path("train.jsonl")),
        "--vocab",
        s(&f.path("train.jsonl.vocab")),
        "--checkpoint",
        s(&f.path("ft.ckpt")),
    ]);
    assert_eq!(fs::read(f.path("pre.ckpt")).unwrap(), fs::read(f.path("ft.ckpt")).unwrap());
}

#[test]
fn finetune_selects_on_validation_and_repeats_exactly() {
    let f = Fixture::new();
    f.pretrain("5", "pre.ckpt");
    let go = |name: &str| {
        ok(&[
            "finetune",
            "--config",
            s(&f.path("tiny.json")),
            "--steps",
            "6",
            "--batch-size",
            "4",
            "--task",
            "classification",
            "--init",
            s(&f.path("pre.ckpt")),
            "--corpus",
            s(&f.path("train.jsonl")),
            "--validation",
            s(&f.path("train.jsonl")),
            "--vocab",
            s(&f.path("train.jsonl.vocab")),
            "--checkpoint",
            s(&f.path(name)),
        ])
    };
    let out = go("a.ckpt");
    assert!(out.contains("best epoch"), "{out}");
    go("b.ckpt");
    assert_eq!(fs::read(f.path("a.ckpt")).unwrap(), fs::read(f.path("b.ckpt")).unwrap());
    let log = fs::read_to_string(f.path("a.ckpt.log")).unwrap();
    assert_eq!(log, fs::read_to_string(f.path("b.ckpt.log")).unwrap());
    assert!(log.contains("validation_accuracy="), "{log}");
}

fn one_record(f: &Fixture, kind: &str) -> PathBuf {
    let recs = load_corpus(&f.path("train.jsonl")).unwrap();
    let r: &CorpusRecord = recs.iter().find(|r| r.task == kind).unwrap();
    let p = f.path("one.json");
    fs::write(&p, serde_json::to_string(r).unwrap()).unwrap();
    p
}

#[test]
fn trie_generation_returns_a_label_deterministically() {
    let f = Fixture::new();
    f.pretrain("5", "m.ckpt");
    let input = one_record(&f, "classification");
    let (ckpt, vocab) = (f.path("m.ckpt"), f.path("train.jsonl.vocab"));
    let args = [
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--vocab",
        s(&vocab),
        "--task",
        "classification",
        "--mode",
        "trie",
        "--labels",
        "red circle,blue square",
        "--input",
        s(&input),
    ];
    let a = ok(&args);
    assert!(["red circle", "blue square"].contains(&a.trim()), "{a}");
    assert_eq!(a, ok(&args));

    let mut all = args.to_vec();
    all[8] = "all-candidate";
    let b = ok(&all);
    assert!(["red circle", "blue square"].contains(&b.trim()), "{b}");

    let mut plain = args[..7].to_vec();
    plain.extend(["--input", s(&input)]);
    let c = ok(&plain);
    assert_eq!(c, ok(&plain));
}

#[test]
fn eval_writes_exactly_the_label_metrics() {
    let f = Fixture::new();
    f.pretrain("5", "m.ckpt");
    let report = f.path("r.json");
    ok(&[
        "eval",
        "--checkpoint",
        s(&f.path("m.ckpt")),
        "--vocab",
        s(&f.path("train.jsonl.vocab")),
        "--task",
        "classification",
        "--mode",
        "trie",
        "--labels",
        "green triangle",
        "--corpus",
        s(&f.path("train.jsonl")),
        "--report",
        s(&report),
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(keys, ["accuracy", "f1_macro", "f1_weighted"]);
    let details = PathBuf::from(format!("{}.details.json", report.display()));
    assert!(details.exists());
}

#[test]
fn eval_of_a_single_label_corpus_is_a_perfect_self_match() {
    let f = Fixture::new();
    f.pretrain("3", "m.ckpt");
    let recs: Vec<CorpusRecord> = load_corpus(&f.path("train.jsonl"))
        .unwrap()
        .into_iter()
        .filter(|r| r.task == "classification")
        .map(|mut r| {
            r.label = Some("only label".into());
            r
        })
        .collect();
    let corpus = f.path("one_label.jsonl");
    fs::write(&corpus, to_jsonl(&recs).unwrap()).unwrap();
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&f.path("m.ckpt")),
        "--vocab",
        s(&f.path("train.jsonl.vocab")),
        "--task",
        "classification",
        "--mode",
        "trie",
        "--labels",
        "only label",
        "--corpus",
        s(&corpus),
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["accuracy"], 1.0);
}

#[test]
fn empty_corpus_is_a_data_error() {
    let f = Fixture::new();
    f.pretrain("2", "m.ckpt");
    let empty = f.path("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let (code, _, err) = run(&[
        "eval",
        "--checkpoint",
        s(&f.path("m.ckpt")),
        "--vocab",
        s(&f.path("train.jsonl.vocab")),
        "--task",
        "caption",
        "--corpus",
        s(&empty),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("empty corpus"), "{err}");
}

#[test]
fn usage_errors_exit_with_one() {
    let (code, _, err) = run(&["gen-synthetic", "--out", "/tmp/x.jsonl", "--seed", "1", "--tasks", "painting"]);
    assert_eq!(code, 1);
    assert!(err.contains("painting"), "{err}");
    for k in TaskKind::ALL {
        assert!(err.contains(k.name()), "{err}");
    }
    assert_eq!(run(&["frobnicate"]).0, 1);
    assert_eq!(run(&["pretrain", "--corpus", "x.jsonl"]).0, 1);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn constrained_modes_need_labels() {
    let f = Fixture::new();
    f.pretrain("2", "m.ckpt");
    let input = one_record(&f, "classification");
    for mode in ["trie", "all-candidate"] {
        let (code, _, err) = run(&[
            "generate",
            "--checkpoint",
            s(&f.path("m.ckpt")),
            "--vocab",
            s(&f.path("train.jsonl.vocab")),
            "--task",
            "classification",
            "--mode",
            mode,
            "--input",
            s(&input),
        ]);
        assert_ne!(code, 0);
        assert!(err.contains("labels"), "{err}");
    }
}

#[test]
fn missing_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&[
        "pretrain",
        "--seed",
        "1",
        "--corpus",
        s(&dir.path().join("none.jsonl")),
        "--vocab",
        s(&dir.path().join("none.vocab")),
        "--checkpoint",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn pretrain_without_a_seed_is_refused() {
    let (code, _, err) = run(&["pretrain", "--corpus", "a", "--vocab", "b", "--checkpoint", "c"]);
    assert_eq!(code, 1);
    assert!(err.contains("seed"), "{err}");
}
