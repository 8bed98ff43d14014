use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cammac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cammac"))
        .current_dir(dir)
        .env_remove("CAMMAC_SEED")
        .args(args)
        .output()
        .expect("spawn cammac")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cammac(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, seed: &str, n: &str, out: &str) {
    ok(
        dir,
        &[
            "gen",
            "--seed",
            seed,
            "--dialogs",
            n,
            "--turns",
            "3",
            "--grid",
            "4x4",
            "--out",
            out,
        ],
    );
}

fn small_train(dir: &Path, model: &str, out: &str) {
    ok(
        dir,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--val",
            "d.jsonl",
            "--model",
            model,
            "--out",
            out,
            "--epochs",
            "2",
            "--patience",
            "2",
            "--d",
            "8",
            "--p",
            "2",
        ],
    );
}

#[test]
fn gen_writes_header_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(
        dir.path(),
        &[
            "gen",
            "--seed",
            "1",
            "--dialogs",
            "2",
            "--turns",
            "3",
            "--grid",
            "4x4",
            "--out",
            "d.jsonl",
        ],
    );
    let text = fs::read_to_string(dir.path().join("d.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(dir.path().join("d.jsonl.run.json").exists());

    // Template histogram counts sum to dialogs times turns.
    let templates: usize = stdout
        .split("coref distance:")
        .next()
        .unwrap()
        .lines()
        .skip_while(|l| !l.starts_with("templates:"))
        .skip(1)
        .map(|l| {
            l.split_whitespace()
                .last()
                .unwrap()
                .parse::<usize>()
                .unwrap()
        })
        .sum();
    assert_eq!(templates, 6);
}

#[test]
fn gen_is_reproducible_from_flags_env_and_saved_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "4", "5", "a.jsonl");
    gen(p, "4", "5", "b.jsonl");
    let a = fs::read(p.join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(p.join("b.jsonl")).unwrap());

    ok(
        p,
        &["gen", "--config", "a.jsonl.run.json", "--out", "c.jsonl"],
    );
    assert_eq!(a, fs::read(p.join("c.jsonl")).unwrap());

    let out = Command::new(env!("CARGO_BIN_EXE_cammac"))
        .current_dir(p)
        .env("CAMMAC_SEED", "4")
        .args([
            "gen",
            "--dialogs",
            "5",
            "--turns",
            "3",
            "--grid",
            "4x4",
            "--out",
            "e.jsonl",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(a, fs::read(p.join("e.jsonl")).unwrap());

    gen(p, "5", "5", "f.jsonl");
    assert_ne!(a, fs::read(p.join("f.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let bad_grid = cammac(p, &["gen", "--grid", "4by4", "--out", "x.jsonl"]);
    assert_eq!(bad_grid.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_grid.stderr).contains("grid"));

    gen(p, "1", "2", "d.jsonl");
    let bad_model = cammac(
        p,
        &[
            "train", "--data", "d.jsonl", "--val", "d.jsonl", "--model", "magic", "--out", "m.ckpt",
        ],
    );
    assert_eq!(bad_model.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&bad_model.stderr);
    for name in [
        "vanilla",
        "mtm",
        "caa",
        "caa+mtm",
        "cq",
        "cq+caa",
        "cq+caa+mtm",
    ] {
        assert!(msg.contains(name), "{msg}");
    }

    assert_eq!(cammac(p, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        cammac(p, &["eval", "--data", "d.jsonl", "--outdir", "o"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let missing = cammac(
        p,
        &[
            "eval",
            "--ckpt",
            "nope.ckpt",
            "--data",
            "nope.jsonl",
            "--outdir",
            "o",
        ],
    );
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());

    fs::write(p.join("junk.ckpt"), b"NOTACKPT and some bytes").unwrap();
    gen(p, "1", "2", "d.jsonl");
    let junk = cammac(
        p,
        &[
            "eval",
            "--ckpt",
            "junk.ckpt",
            "--data",
            "d.jsonl",
            "--outdir",
            "o",
        ],
    );
    assert_eq!(junk.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&junk.stderr).contains("magic"));
}

#[test]
fn train_eval_and_analyze_round() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "2", "3", "d.jsonl");
    small_train(p, "caa+mtm", "m.ckpt");

    let log = fs::read_to_string(p.join("m.ckpt.log")).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<_> = l.split_whitespace().collect();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].parse::<usize>().unwrap(), i);
        assert!(f[1].parse::<f64>().unwrap().is_finite());
        let acc: f64 = f[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("m.ckpt.run.json")).unwrap()).unwrap();
    assert_eq!(run["train"]["flags"]["caa"], true);
    assert_eq!(run["train"]["flags"]["mtm"], true);
    assert_eq!(run["train"]["flags"]["cq"], false);

    ok(
        p,
        &[
            "eval", "--ckpt", "m.ckpt", "--data", "d.jsonl", "--outdir", "ev",
        ],
    );
    for f in ["overall", "template", "turn", "coref"] {
        let csv = fs::read_to_string(p.join(format!("ev/breakdown_{f}.csv"))).unwrap();
        assert!(csv.starts_with("bucket,correct,total,accuracy\n"));
        for row in csv.lines().skip(1) {
            let acc: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }
    let turns = fs::read_to_string(p.join("ev/breakdown_turn.csv")).unwrap();
    assert_eq!(turns.lines().count(), 1 + 3);

    ok(
        p,
        &[
            "analyze-attn",
            "--ckpt",
            "m.ckpt",
            "--data",
            "d.jsonl",
            "--out",
            "attn.csv",
        ],
    );
    let attn = fs::read_to_string(p.join("attn.csv")).unwrap();
    assert!(attn.starts_with("dialog_id,t,s,weight\n"));
    for row in attn.lines().skip(1) {
        let f: Vec<_> = row.split(',').collect();
        let (t, s): (usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        assert!(s <= t);
        let w: f64 = f[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&w));
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "3", "4", "d.jsonl");
    small_train(p, "mtm", "a.ckpt");
    small_train(p, "mtm", "b.ckpt");
    assert_eq!(
        fs::read(p.join("a.ckpt")).unwrap(),
        fs::read(p.join("b.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(p.join("a.ckpt.log")).unwrap(),
        fs::read(p.join("b.ckpt.log")).unwrap()
    );

    // One epoch, then resume and extend to the second.
    ok(
        p,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--val",
            "d.jsonl",
            "--model",
            "mtm",
            "--out",
            "c.ckpt",
            "--epochs",
            "1",
            "--patience",
            "1",
            "--d",
            "8",
            "--p",
            "2",
        ],
    );
    ok(
        p,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--val",
            "d.jsonl",
            "--resume",
            "c.ckpt",
            "--out",
            "r.ckpt",
            "--epochs",
            "2",
            "--patience",
            "2",
        ],
    );
    assert_eq!(
        fs::read(p.join("a.ckpt")).unwrap(),
        fs::read(p.join("r.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(p.join("a.ckpt.log")).unwrap(),
        fs::read(p.join("r.ckpt.log")).unwrap()
    );

    // The saved run config replays the run.
    ok(
        p,
        &["train", "--config", "a.ckpt.run.json", "--out", "s.ckpt"],
    );
    assert_eq!(
        fs::read(p.join("a.ckpt")).unwrap(),
        fs::read(p.join("s.ckpt")).unwrap()
    );
}

#[test]
fn fresh_model_eval_is_finite() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "6", "3", "d.jsonl");
    ok(
        p,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--val",
            "d.jsonl",
            "--model",
            "vanilla",
            "--out",
            "m.ckpt",
            "--max-steps",
            "1",
            "--epochs",
            "1",
            "--patience",
            "1",
            "--d",
            "8",
            "--p",
            "2",
        ],
    );
    let out = ok(
        p,
        &[
            "eval", "--ckpt", "m.ckpt", "--data", "d.jsonl", "--outdir", "ev",
        ],
    );
    let acc: f64 = out.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn analyze_rejects_models_without_context_attention() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "7", "2", "d.jsonl");
    small_train(p, "vanilla", "v.ckpt");
    let out = cammac(
        p,
        &[
            "analyze-attn",
            "--ckpt",
            "v.ckpt",
            "--data",
            "d.jsonl",
            "--out",
            "a.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported"));
}

#[test]
fn eval_reports_vocab_mismatch_with_both_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen(p, "8", "2", "d.jsonl");
    small_train(p, "vanilla", "v.ckpt");
    let text = fs::read_to_string(p.join("d.jsonl")).unwrap();
    let (head, rest) = text.split_once('\n').unwrap();
    let mut header: serde_json::Value = serde_json::from_str(head).unwrap();
    header["vocab"].as_array_mut().unwrap().push("zebra".into());
    fs::write(p.join("z.jsonl"), format!("{header}\n{rest}")).unwrap();
    let out = cammac(
        p,
        &[
            "eval", "--ckpt", "v.ckpt", "--data", "z.jsonl", "--outdir", "o",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    let hashes = msg
        .split(|c: char| !c.is_ascii_hexdigit())
        .filter(|w| w.len() == 16)
        .count();
    assert!(msg.contains("vocabulary mismatch") && hashes == 2, "{msg}");
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_rule() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = ok(p, &["gradcheck"]);
    let ops: Vec<&str> = out
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    let mut uniq = ops.clone();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), ops.len(), "each op listed once");
    assert!(ops.contains(&"matmul") && ops.contains(&"softmax") && ops.contains(&"cross_entropy"));

    let bad = cammac(p, &["gradcheck", "--corrupt-op", "softmax"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}
