use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn neglm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neglm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in {line}"))
        .parse()
        .unwrap()
}

fn write_tsv(path: &Path, p: &[[f64; 4]]) {
    let mut s = String::from("x\ty\tp\n");
    for (i, row) in p.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            s.push_str(&format!("r{i}\tc{j}\t{v:?}\n"));
        }
    }
    fs::write(path, s).unwrap();
}

#[test]
fn verify_passes_and_corruption_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = neglm(&["verify", "--out", "v"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let records = fs::read_to_string(dir.path().join("v/verify_report.txt")).unwrap();
    assert!(records.lines().all(|l| l.contains("passed=true")));
    assert!(fs::read_to_string(dir.path().join("v/config.txt"))
        .unwrap()
        .contains("corrupt=false"));
    let bad = neglm(&["verify", "--corrupt"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("[FAIL] exact_gradient"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(neglm(&["train-lm"], dir.path()).status.code(), Some(2));
    assert_eq!(neglm(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(
        neglm(&["verify", "--seed", "x"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn embed_joint_rank_sweep() {
    let dir = tempfile::tempdir().unwrap();
    // Two-block structure; its PMI needs more than one dimension.
    let tsv = dir.path().join("d.tsv");
    write_tsv(
        &tsv,
        &[
            [0.12, 0.10, 0.01, 0.02],
            [0.10, 0.12, 0.02, 0.01],
            [0.02, 0.01, 0.11, 0.09],
            [0.01, 0.02, 0.09, 0.15],
        ],
    );
    let mut gaps = Vec::new();
    for d in 1..=4 {
        let out = neglm(
            &[
                "embed-joint",
                "d.tsv",
                "--d",
                &d.to_string(),
                "--out",
                &format!("e{d}"),
            ],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0));
        gaps.push(field(stdout(&out).trim(), "kl_gap"));
        assert!(dir.path().join(format!("e{d}/model.negf")).exists());
    }
    assert!(gaps[0] > 1e-3, "{gaps:?}");
    for w in gaps.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{gaps:?}");
    }
    assert!(gaps[3] <= 1e-6, "{gaps:?}");
}

#[test]
fn embed_joint_zero_support_and_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("z.tsv"),
        "x\ty\tp\na\tb\t0.5\na\tc\t0.5\nz\tb\t0\n",
    )
    .unwrap();
    let lax = neglm(
        &["embed-joint", "z.tsv", "--d", "1", "--out", "o"],
        dir.path(),
    );
    assert_eq!(lax.status.code(), Some(0));
    let strict = neglm(
        &["embed-joint", "z.tsv", "--strict-pmi", "--out", "o"],
        dir.path(),
    );
    assert_eq!(strict.status.code(), Some(1));
    fs::write(dir.path().join("bad.tsv"), "x\ty\tp\na\tb\tnope\n").unwrap();
    assert_eq!(
        neglm(&["embed-joint", "bad.tsv", "--out", "o"], dir.path())
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn train_eval_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let gen = neglm(
        &[
            "gen-bigram",
            "--states",
            "15",
            "--train-tokens",
            "4000",
            "--valid-tokens",
            "800",
            "--test-tokens",
            "800",
            "--out",
            "data",
        ],
        p,
    );
    assert_eq!(gen.status.code(), Some(0));
    let train_args = |out: &str| {
        vec![
            "train-lm",
            "data/train.txt",
            "data/valid.txt",
            "--encoder",
            "lstm",
            "--d",
            "8",
            "--hidden",
            "8",
            "--layers",
            "1",
            "--dropout",
            "0.1",
            "--k",
            "5",
            "--epochs",
            "2",
            "--batch",
            "4",
            "--unroll",
            "6",
            "--optimizer",
            "adam",
            "--lr",
            "0.01",
            "--out",
            out,
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()
    };
    for out in ["r1", "r2"] {
        let args = train_args(out);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = neglm(&args, p);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let m1 = fs::read(p.join("r1/metrics.txt")).unwrap();
    assert_eq!(m1, fs::read(p.join("r2/metrics.txt")).unwrap());
    assert_eq!(
        fs::read(p.join("r1/model.negf")).unwrap(),
        fs::read(p.join("r2/model.negf")).unwrap()
    );
    assert_eq!(String::from_utf8(m1).unwrap().lines().count(), 2);

    // Re-running from the resolved config reproduces the run.
    let o = neglm(
        &[
            "train-lm",
            "data/train.txt",
            "data/valid.txt",
            "--config",
            "r1/config.txt",
            "--out",
            "r3",
        ],
        p,
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        fs::read(p.join("r1/model.negf")).unwrap(),
        fs::read(p.join("r3/model.negf")).unwrap()
    );

    let eval = neglm(&["eval", "r1/model.negf", "data/test.txt"], p);
    assert_eq!(eval.status.code(), Some(0));
    let line = stdout(&eval);
    assert!(
        line.contains("mode=neglm") && line.contains("alpha=0.75"),
        "{line}"
    );
    assert!(field(&line, "perplexity") > 1.0);
    let neg = neglm(
        &["eval", "r1/model.negf", "data/test.txt", "--mode", "neg"],
        p,
    );
    assert!(stdout(&neg).contains("mode=neg "));

    let mut bytes = fs::read(p.join("r1/model.negf")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(p.join("bad.negf"), bytes).unwrap();
    let bad = neglm(&["eval", "bad.negf", "data/test.txt"], p);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("checksum"));
}

#[test]
fn divergence_exits_3_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    neglm(
        &[
            "gen-bigram",
            "--states",
            "10",
            "--train-tokens",
            "2000",
            "--valid-tokens",
            "300",
            "--out",
            "data",
        ],
        p,
    );
    let o = neglm(
        &[
            "train-lm",
            "data/train.txt",
            "data/valid.txt",
            "--encoder",
            "window",
            "--d",
            "4",
            "--hidden",
            "4",
            "--k",
            "2",
            "--epochs",
            "2",
            "--batch",
            "4",
            "--unroll",
            "5",
            "--optimizer",
            "sgd",
            "--lr",
            "1e308",
            "--clip",
            "1e308",
            "--out",
            "run",
        ],
        p,
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(p.join("run/checkpoint.negf").exists());
}
