use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stackwfa::training::Checkpoint;

fn stackwfa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stackwfa"))
        .args(args)
        .current_dir(dir)
        .env("STACKWFA_DATA_DIR", dir.join("data"))
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen_small(dir: &Path, name: &str, seed: &str, count: &str) {
    ok(&stackwfa(
        dir,
        &[
            "gen",
            "--task",
            "marked-reversal",
            "--seed",
            seed,
            "--count",
            count,
            "--min-len",
            "5",
            "--max-len",
            "9",
            "-o",
            name,
        ],
    ));
}

#[test]
fn gen_is_deterministic_and_lists_artifacts() {
    let d = tempfile::tempdir().unwrap();
    gen_small(d.path(), "a.txt", "1", "40");
    gen_small(d.path(), "b.txt", "1", "40");
    gen_small(d.path(), "c.txt", "2", "40");
    let read = |n: &str| fs::read_to_string(d.path().join(n)).unwrap();
    assert_eq!(read("a.txt"), read("b.txt"));
    assert_eq!(read("a.txt.meta"), read("b.txt.meta"));
    assert_ne!(read("a.txt"), read("c.txt"));
    assert_eq!(read("a.txt").lines().count(), 40);
    let manifest: serde_json::Value = serde_json::from_str(&read("a.txt.manifest.json")).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seeds"]["sample"], 1);
    let arts: Vec<&str> = manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(arts, ["a.txt", "a.txt.meta"]);
}

#[test]
fn default_output_goes_under_data_dir() {
    let d = tempfile::tempdir().unwrap();
    ok(&stackwfa(
        d.path(),
        &[
            "gen",
            "--task",
            "dyck2",
            "--seed",
            "3",
            "--count",
            "5",
            "--min-len",
            "2",
            "--max-len",
            "6",
        ],
    ));
    assert!(d.path().join("data/dyck2-seed3.txt").exists());
    assert!(d.path().join("data/dyck2-seed3.txt.manifest.json").exists());
}

#[test]
fn flags_override_config_file_over_defaults() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("run.toml"),
        "seed = 4\n[task]\ntask = \"unmarked-reversal\"\ncount = 7\nmin-len = 4\nmax-len = 8\n",
    )
    .unwrap();
    ok(&stackwfa(d.path(), &["--config", "run.toml", "gen", "-o", "f.txt"]));
    ok(&stackwfa(
        d.path(),
        &["--config", "run.toml", "gen", "--count", "3", "-o", "g.txt"],
    ));
    let f = fs::read_to_string(d.path().join("f.txt")).unwrap();
    let g = fs::read_to_string(d.path().join("g.txt")).unwrap();
    assert_eq!(f.lines().count(), 7);
    assert_eq!(g.lines().count(), 3);
    let meta = fs::read_to_string(d.path().join("f.txt.meta")).unwrap();
    assert!(meta.contains("task=unmarked-reversal"), "{meta}");
    assert!(meta.contains("seed=4"), "{meta}");
    fs::write(d.path().join("bad.toml"), "[task]\nnonsense = 1\n").unwrap();
    let out = stackwfa(d.path(), &["--config", "bad.toml", "gen"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes_follow_error_class() {
    let d = tempfile::tempdir().unwrap();
    let out = stackwfa(d.path(), &["train", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = stackwfa(
        d.path(),
        &["train", "--train", "missing/train.txt", "--valid", "missing/valid.txt"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing/train.txt"));
    gen_small(d.path(), "v.txt", "1", "5");
    let out = stackwfa(
        d.path(),
        &["train", "--train", "v.txt", "--valid", "v.txt", "--family", "nope"],
    );
    assert_eq!(out.status.code(), Some(1));
    let out = stackwfa(d.path(), &["oracle-check", "--max-n", "40"]);
    assert_eq!(out.status.code(), Some(1));
    let out = stackwfa(d.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn oracle_check_reports_and_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&stackwfa(
        d.path(),
        &[
            "oracle-check",
            "--max-n",
            "5",
            "--trials",
            "5",
            "--gradient-trials",
            "5",
        ],
    ));
    let line = out.lines().find(|l| l.starts_with("max log-space error:")).unwrap();
    let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err <= 1e-9);
    assert!(d.path().join("data/oracle-check.manifest.json").exists());
}

#[test]
fn train_eval_and_heatmap_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    gen_small(p, "train.txt", "1", "30");
    gen_small(p, "valid.txt", "2", "10");
    let common = ["--train", "train.txt", "--valid", "valid.txt", "--seed", "5"];
    for (out, epochs) in [("e0.ckpt", "0"), ("e2.ckpt", "2")] {
        let mut args = vec!["train", "--epochs", epochs, "-o", out];
        args.extend(common);
        let text = ok(&stackwfa(p, &args));
        assert!(text.contains("best validation gap"), "{text}");
    }
    let again = {
        let mut args = vec!["train", "--epochs", "2", "-o", "again.ckpt"];
        args.extend(common);
        ok(&stackwfa(p, &args));
        Checkpoint::load(&p.join("again.ckpt")).unwrap()
    };
    assert_eq!(Checkpoint::load(&p.join("e2.ckpt")).unwrap().params, again.params);
    assert!(p.join("e2.ckpt.metrics").exists());

    let text = ok(&stackwfa(
        p,
        &[
            "eval",
            "--checkpoint",
            "e2.ckpt",
            "--data",
            "valid.txt",
            "--by-length",
            "-o",
            "r.json",
        ],
    ));
    assert!(text.contains("gap"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    assert!(report["gap"].as_f64().unwrap() > 0.0);
    assert!(!report["bins"].as_array().unwrap().is_empty());

    ok(&stackwfa(
        p,
        &[
            "heatmap",
            "--checkpoint",
            "e2.ckpt",
            "--data",
            "valid.txt",
            "--count",
            "4",
            "-o",
            "single",
        ],
    ));
    ok(&stackwfa(
        p,
        &[
            "heatmap",
            "--checkpoint",
            "e0.ckpt",
            "--checkpoint",
            "e2.ckpt",
            "--data",
            "valid.txt",
            "-o",
            "epochs",
        ],
    ));
    let csv = fs::read_to_string(p.join("epochs.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("e0.ckpt,"));
    for l in &lines[1..] {
        for v in l.split(',').skip(1) {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let pgm = fs::read(p.join("epochs.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    let manifest = fs::read_to_string(p.join("epochs.manifest.json")).unwrap();
    assert!(manifest.contains("epochs.csv") && manifest.contains("epochs.pgm"));

    let mut args = vec!["train", "--family", "lstm", "--epochs", "0", "-o", "lstm.ckpt"];
    args.extend(common);
    ok(&stackwfa(p, &args));
    let out = stackwfa(p, &["heatmap", "--checkpoint", "lstm.ckpt", "--data", "valid.txt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn search_writes_trial_table() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    gen_small(p, "train.txt", "1", "20");
    gen_small(p, "valid.txt", "2", "6");
    let text = ok(&stackwfa(
        p,
        &[
            "search",
            "--train",
            "train.txt",
            "--valid",
            "valid.txt",
            "--family",
            "lstm",
            "--epochs",
            "1",
            "--learning-rates",
            "0.01,0.001",
            "--restarts",
            "2",
            "-o",
            "best.ckpt",
        ],
    ));
    assert_eq!(
        text.lines()
            .filter(|l| l.trim_start().starts_with(char::is_numeric))
            .count(),
        4
    );
    let trials: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("best.ckpt.trials.json")).unwrap()).unwrap();
    assert_eq!(trials.as_array().unwrap().len(), 4);
    assert!(p.join("best.ckpt").exists());
}

#[test]
fn bench_prints_two_column_table() {
    let d = tempfile::tempdir().unwrap();
    let text = ok(&stackwfa(
        d.path(),
        &[
            "bench",
            "--families",
            "lstm,ns",
            "--count",
            "10",
            "--min-len",
            "5",
            "--max-len",
            "7",
            "-o",
            "bench.txt",
        ],
    ));
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows[0], ["model", "seconds_per_epoch"]);
    assert_eq!(rows.len(), 3);
    for (row, name) in rows[1..].iter().zip(["lstm", "ns"]) {
        assert_eq!(row.len(), 2);
        assert_eq!(row[0], name);
        assert!(row[1].parse::<f64>().unwrap() >= 0.0);
    }
    assert_eq!(fs::read_to_string(d.path().join("bench.txt")).unwrap(), text);
}

#[test]
fn corpus_resume_matches_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let text: String = (0..30)
        .map(|i| format!("the cat {} sat on the mat\n", ["a", "b", "c"][i % 3]))
        .collect();
    fs::write(p.join("train.txt"), &text).unwrap();
    fs::write(p.join("valid.txt"), "the cat a sat\non the mat\n").unwrap();
    let base = [
        "train",
        "--mode",
        "corpus",
        "--train",
        "train.txt",
        "--valid",
        "valid.txt",
        "--hidden",
        "6",
        "--epochs",
        "2",
        "--batch-size",
        "3",
        "--chunk-len",
        "5",
        "--band",
        "5",
        "--seed",
        "2",
    ];
    let run = |extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend(extra);
        ok(&stackwfa(p, &args))
    };
    run(&["-o", "full.ckpt"]);
    let halted = run(&["--halt-after-chunks", "7", "-o", "half.ckpt"]);
    assert!(halted.contains("halted"));
    run(&["--resume", "half.ckpt", "-o", "resumed.ckpt"]);
    let full = Checkpoint::load(&p.join("full.ckpt")).unwrap();
    let resumed = Checkpoint::load(&p.join("resumed.ckpt")).unwrap();
    assert_eq!(full.params, resumed.params);
    assert_eq!(full.progress, resumed.progress);
    let ppl = ok(&stackwfa(
        p,
        &["eval", "--checkpoint", "full.ckpt", "--data", "valid.txt"],
    ));
    assert!(ppl.starts_with("perplexity"));
}
