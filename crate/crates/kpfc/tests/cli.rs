use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kpfc::report::{EnvelopeLine, ForecastRecord, HistoryOutput, MetricsOutput};

fn kpfc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpfc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn kp_line(clip: &str, frame: usize) -> String {
    let kp: Vec<String> = (0..17)
        .map(|j| {
            let t = frame as f64 / 30.0;
            format!(
                "[{},{}]",
                (j as f64 * 0.7).cos() + 0.1 * (t * 6.0 + j as f64).sin(),
                (j as f64 * 0.7).sin()
            )
        })
        .collect();
    format!(
        r#"{{"clip_id":"{clip}","frame":{frame},"kp":[{}]}}"#,
        kp.join(",")
    )
}

/// Small real-like data set plus a one-epoch LSTM checkpoint.
fn fixture(dir: &Path) {
    let o = kpfc(
        &[
            "synth",
            "--real-like",
            "--clips",
            "6",
            "--length",
            "95",
            "--seed",
            "3",
            "--out",
            "data",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = kpfc(
        &[
            "train", "--arch", "lstm", "--data", "data", "--out", "m.ckpt", "--epochs", "1",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = kpfc(&["--help"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for sub in [
        "synth",
        "train",
        "pretrain-finetune",
        "eval",
        "bench",
        "forecast",
        "envelope",
    ] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let o = kpfc(&["train", "--help"], dir.path());
    let text = String::from_utf8(o.stdout).unwrap();
    for flag in [
        "--arch",
        "--data",
        "--config",
        "--out",
        "--split-by-clip",
        "--seed",
    ] {
        assert!(text.contains(flag), "{flag} missing from train help");
    }
}

#[test]
fn usage_errors_exit_one_with_prefix() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec![
            "train", "--arch", "lstm", "--data", "d", "--out", "o", "--bogus",
        ],
        vec!["train", "--arch", "rnn", "--data", "d", "--out", "o"],
        vec!["synth", "--tier", "10k", "--out", "x"],
        vec![],
    ] {
        let o = kpfc(&args, dir.path());
        assert_eq!(code(&o), 1, "{args:?}");
        assert!(
            stderr(&o).starts_with("error[usage]: "),
            "{args:?}: {}",
            stderr(&o)
        );
    }
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.jsonl"),
        format!("{}\n{{oops\n", kp_line("a", 0)),
    )
    .unwrap();
    let o = kpfc(
        &[
            "train",
            "--arch",
            "mlp",
            "--data",
            "bad.jsonl",
            "--out",
            "m.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).starts_with("error[parse]: line 2"),
        "{}",
        stderr(&o)
    );

    let o = kpfc(
        &["eval", "--ckpt", "missing.ckpt", "--data", "bad.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error[io]: "));

    fs::write(dir.path().join("fake.ckpt"), b"not a checkpoint").unwrap();
    let o = kpfc(
        &["bench", "--ckpt", "fake.ckpt", "--iters", "1"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error[format]: "), "{}", stderr(&o));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = kpfc(
        &[
            "synth",
            "--real-like",
            "--clips",
            "3",
            "--length",
            "92",
            "--out",
            "data",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"lr": 1e30, "weight_decay": 0}"#,
    )
    .unwrap();
    let o = kpfc(
        &[
            "train", "--arch", "mlp", "--data", "data", "--config", "cfg.json", "--epochs", "3",
            "--out", "m.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(
        err.contains("error[diverged]: ") || err.contains("error[numeric]: "),
        "{err}"
    );
}

#[test]
fn config_file_merges_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"epochs": 2, "batch_size": 7, "seed": 5}"#,
    )
    .unwrap();
    let o = kpfc(
        &[
            "train", "--arch", "lstm", "--data", "data", "--config", "cfg.json", "--epochs", "1",
            "--out", "c.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let h: HistoryOutput =
        serde_json::from_slice(&fs::read(dir.path().join("c.ckpt.history.json")).unwrap()).unwrap();
    assert_eq!(h.train.epochs.len(), 1);
    let ck = kpfc::checkpoint::load_checkpoint(&dir.path().join("c.ckpt")).unwrap();
    let cfg = ck.train_config.unwrap();
    assert_eq!(
        (cfg.epochs, cfg.batch_size, cfg.seed, cfg.lr),
        (1, 7, 5, 1e-3)
    );

    fs::write(dir.path().join("bad.json"), r#"{"learning_rate": 0.1}"#).unwrap();
    let o = kpfc(
        &[
            "train", "--arch", "lstm", "--data", "data", "--config", "bad.json", "--out", "d.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"));
    let o = kpfc(
        &[
            "train", "--arch", "lstm", "--data", "data", "--lr", "-1", "--out", "d.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn training_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    for name in ["a.ckpt", "b.ckpt"] {
        let o = kpfc(
            &[
                "train",
                "--arch",
                "mlp",
                "--data",
                "data",
                "--epochs",
                "1",
                "--seed",
                "9",
                "--split-by-clip",
                "--out",
                name,
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(
        fs::read(dir.path().join("a.ckpt")).unwrap(),
        fs::read(dir.path().join("b.ckpt")).unwrap()
    );
}

#[test]
fn synth_is_deterministic_and_streams_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let a = kpfc(
        &[
            "synth",
            "--real-like",
            "--clips",
            "4",
            "--length",
            "90",
            "--seed",
            "7",
            "--out",
            "-",
        ],
        dir.path(),
    );
    let b = kpfc(
        &[
            "synth",
            "--real-like",
            "--clips",
            "4",
            "--length",
            "90",
            "--seed",
            "7",
            "--out",
            "-",
        ],
        dir.path(),
    );
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8(a.stdout).unwrap().lines().count(), 360);
    let o = kpfc(
        &[
            "synth",
            "--real-like",
            "--clips",
            "4",
            "--length",
            "89",
            "--out",
            "-",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_emits_a_metrics_report() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let o = kpfc(
        &["eval", "--ckpt", "m.ckpt", "--data", "data", "--json", "-"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: MetricsOutput = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r.split, "test");
    assert!(r.rmse_x100.is_finite() && r.rmse_x100 > 0.0);
    assert!(r.fid.is_finite() && r.fid >= 0.0);
    // 6 clips x 6 windows, 20% held out.
    assert_eq!(r.n, 36 - 29);
    let o = kpfc(
        &[
            "eval", "--ckpt", "m.ckpt", "--data", "data", "--all", "--json", "all.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let r: MetricsOutput =
        serde_json::from_slice(&fs::read(dir.path().join("all.json")).unwrap()).unwrap();
    assert_eq!((r.split.as_str(), r.n), ("all", 36));
}

#[test]
fn bench_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = kpfc(
        &[
            "bench", "--arch", "all", "--warmup", "1", "--iters", "3", "--json", "-",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out: kpfc::report::BenchOutput = serde_json::from_slice(&o.stdout).unwrap();
    let params: Vec<usize> = out.reports.iter().map(|r| r.params).collect();
    assert_eq!(params, [2_914_428, 347_644, 592_060, 3_430_140]);
    assert!(stderr(&o).contains("Transformer"));
    let o = kpfc(&["bench", "--arch", "lstm", "--iters", "0"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn forecast_emits_one_line_per_frame_after_the_window_fills() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let mut lines = Vec::new();
    for f in 0..70 {
        lines.push(kp_line("long", f + 100));
        if f < 50 {
            lines.push(kp_line("short", f));
        }
        if f < 60 {
            lines.push(kp_line("exact", f));
        }
    }
    fs::write(dir.path().join("in.jsonl"), lines.join("\n")).unwrap();
    let o = kpfc(
        &[
            "forecast", "--ckpt", "m.ckpt", "--in", "in.jsonl", "--out", "-",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let recs: Vec<ForecastRecord> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let count = |id: &str| recs.iter().filter(|r| r.clip_id == id).count();
    assert_eq!(
        (count("long"), count("short"), count("exact")),
        (70 - 59, 0, 1)
    );
    assert_eq!(
        recs.iter().find(|r| r.clip_id == "long").unwrap().frame,
        159
    );
    for r in &recs {
        assert_eq!(r.forecast.len(), 30);
        assert!(r
            .forecast
            .iter()
            .all(|f| f.len() == 17 && f.iter().flatten().all(|v| v.is_finite())));
    }

    fs::write(
        dir.path().join("gap.jsonl"),
        [kp_line("g", 0), kp_line("g", 2)].join("\n"),
    )
    .unwrap();
    let o = kpfc(
        &["forecast", "--ckpt", "m.ckpt", "--in", "gap.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error[gap]: "));
}

#[test]
fn forecast_reads_stdin() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let mut child = Command::new(env!("CARGO_BIN_EXE_kpfc"))
        .args(["forecast", "--ckpt", "m.ckpt", "--in", "-", "--out", "-"])
        .current_dir(dir.path())
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let text: Vec<String> = (0..61).map(|f| kp_line("s", f)).collect();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(text.join("\n").as_bytes())
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 2);
}

#[test]
fn envelope_writes_frames_union_and_clearance() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let o = kpfc(
        &[
            "envelope",
            "--ckpt",
            "m.ckpt",
            "--in",
            "data",
            "--margin",
            "0.05",
            "--point",
            "-0.5,0.25",
            "--out",
            "env.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("env.jsonl")).unwrap();
    let lines: Vec<EnvelopeLine> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6 * 32);
    for clip in lines.chunks(32) {
        let EnvelopeLine::Union(u) = &clip[30] else {
            panic!("expected union, got {:?}", clip[30])
        };
        for (i, l) in clip[..30].iter().enumerate() {
            let EnvelopeLine::Frame(f) = l else {
                panic!("expected frame, got {l:?}")
            };
            assert_eq!(f.frame, i + 1);
            assert_eq!(f.margin, 0.05);
            for c in 0..2 {
                assert!(f.max[c] - f.min[c] >= 0.1);
                assert!(u.union.min[c] <= f.min[c] && f.max[c] <= u.union.max[c]);
            }
        }
        let EnvelopeLine::Clearance(c) = &clip[31] else {
            panic!("expected clearance")
        };
        assert_eq!(c.point, [-0.5, 0.25]);
        assert!(c.distance >= 0.0 && (1..=30).contains(&c.frame) && c.joint < 17);
    }
    let o = kpfc(
        &[
            "envelope", "--ckpt", "m.ckpt", "--in", "data", "--margin", "-0.1",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn pretrain_finetune_records_both_phases() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let o = kpfc(
        &[
            "synth",
            "--real-like",
            "--clips",
            "3",
            "--length",
            "92",
            "--seed",
            "8",
            "--out",
            "syn",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let o = kpfc(
        &[
            "pretrain-finetune",
            "--arch",
            "mlp",
            "--synth",
            "syn",
            "--real",
            "data",
            "--pretrain-epochs",
            "2",
            "--epochs",
            "1",
            "--out",
            "pf.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let h: HistoryOutput =
        serde_json::from_slice(&fs::read(dir.path().join("pf.ckpt.history.json")).unwrap())
            .unwrap();
    assert_eq!(h.pretrain.unwrap().epochs.len(), 2);
    assert_eq!(h.train.epochs.len(), 1);
    assert!(h.train.epochs[0].eval_rmse_x100.is_some());
}
