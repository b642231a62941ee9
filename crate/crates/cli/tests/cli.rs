use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ostr::episodes::{procedural_bank, SplitSpec};
use ostr::net::{save_checkpoint, NetConfig};
use ostr::trainer::{overfit, TrainConfig};
use ostr_cli::load_episode_dir;

fn ostr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ostr"))
        .args(args)
        .env_remove(ostr_cli::SEED_ENV)
        .output()
        .unwrap()
}

fn summary(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout);
    stdout.lines().find(|l| l.starts_with("OSTR ")).unwrap_or_default().to_string()
}

fn value(line: &str, key: &str) -> Option<String> {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .map(|v| v.trim_matches('"').to_string())
}

fn ok(args: &[&str]) -> String {
    let out = ostr(args);
    let line = summary(&out);
    assert!(out.status.success(), "{args:?}: {line}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(line.contains(" status=ok"), "{line}");
    line
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn dirmaps_are_written_identically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let line = ok(&["dump-dirmaps", "--out", s(a.path()), "--height", "4", "--width", "6"]);
    assert!(line.starts_with("OSTR dump-dirmaps status=ok"));
    assert_eq!(value(&line, "maps").as_deref(), Some("8"));
    ok(&["dump-dirmaps", "--out", s(b.path()), "--height", "4", "--width", "6"]);
    assert_eq!(tree(a.path()), tree(b.path()));
    let csv = fs::read_to_string(a.path().join("dirmaps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 * 24);
    assert!(a.path().join("up_left.png").is_file());
}

#[test]
fn synthesized_episodes_round_trip_and_repeat() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = |d: &Path| {
        vec![
            "synth-data".to_string(),
            "--out".into(),
            s(d).into(),
            "--n".into(),
            "5".into(),
            "--size".into(),
            "32".into(),
            "--classes".into(),
            "8".into(),
            "--images".into(),
            "2".into(),
            "--split".into(),
            "holdout:6".into(),
        ]
    };
    let strs = |v: &[String]| v.iter().map(String::as_str).collect::<Vec<_>>().join("\u{1}");
    let run = |v: Vec<String>, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ostr"));
        cmd.args(&v).env_remove(ostr_cli::SEED_ENV);
        if let Some(e) = env {
            cmd.env(ostr_cli::SEED_ENV, e);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", strs(&v));
        summary(&out)
    };
    let mut with_flag = args(a.path());
    with_flag.extend(["--seed".into(), "5".into()]);
    let line = run(with_flag, None);
    assert_eq!(value(&line, "seed").as_deref(), Some("5"));
    assert_eq!(value(&line, "episodes").as_deref(), Some("5"));
    // The environment supplies the seed when the flag is absent.
    run(args(b.path()), Some("5"));
    assert_eq!(tree(a.path()), tree(b.path()));
    run(args(c.path()), None);
    assert_ne!(tree(a.path()), tree(c.path()));

    let episodes = load_episode_dir(a.path()).unwrap();
    assert_eq!(episodes.len(), 5);
    let again = tempfile::tempdir().unwrap();
    for (i, e) in episodes.iter().enumerate() {
        e.validate().unwrap();
        ostr::episodes::save_episode(e, &again.path().join(format!("episode_{i:05}"))).unwrap();
    }
    assert_eq!(tree(a.path()), tree(again.path()));
    let reloaded = load_episode_dir(again.path()).unwrap();
    assert_eq!(episodes, reloaded);
}

#[test]
fn bad_invocations_fail_with_a_summary() {
    let out = ostr(&["dump-dirmaps", "--out", "/tmp/x", "--bogus"]);
    assert!(!out.status.success());
    assert!(summary(&out).starts_with("OSTR dump-dirmaps status=err"));

    let out = ostr(&["eval", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(summary(&out).starts_with("OSTR eval status=err error="));

    let out = ostr(&["dump-dirmaps", "--out", "/tmp/x", "--height", "0"]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_command_reports_pass() {
    let line = ok(&["gradcheck", "--linear", "--samples", "50"]);
    assert_eq!(value(&line, "passed").as_deref(), Some("true"));
    let line = ok(&["gradcheck", "--samples", "60", "--seed", "3"]);
    assert_eq!(value(&line, "passed").as_deref(), Some("true"));
}

/// A tiny model fitted to a handful of 32×32 episodes, plus those episodes on
/// disk.
struct Fitted {
    dir: tempfile::TempDir,
    ckpt: PathBuf,
    episodes: PathBuf,
}

fn data_flags() -> Vec<&'static str> {
    vec!["--classes", "8", "--images", "2", "--split", "holdout:6"]
}

fn fitted() -> Fitted {
    let dir = tempfile::tempdir().unwrap();
    let net = NetConfig::tiny().with_input_size(32);
    let bank = procedural_bank(8, 2, 32, 0).unwrap();
    let split = SplitSpec::holdout(bank.classes(), 6).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        seed: 0,
        ..Default::default()
    };
    let report = overfit(&bank, &split, &net, &cfg, 4, 150, Some(0.9)).unwrap();
    let ckpt = dir.path().join("fit.ckpt");
    save_checkpoint(&report.params, &net, &ckpt).unwrap();
    let episodes = dir.path().join("episodes");
    let mut args = vec!["synth-data", "--out", s(&episodes), "--n", "4", "--size", "32", "--seed", "0"];
    args.extend(data_flags());
    ok(&args);
    Fitted { dir, ckpt, episodes }
}

#[test]
fn trained_model_commands() {
    let f = fitted();
    let tmp = f.dir.path();
    let ck = s(&f.ckpt);

    // segment: the fitted episodes come from the same seed stream.
    let ep = f.episodes.join("episode_00000");
    let seg = |out: &str| {
        let mut args = vec!["segment", "--checkpoint", ck, "--query"];
        let (q, r, t) = (ep.join("Q.png"), ep.join("R.png"), ep.join("T.png"));
        let o = tmp.join(out);
        let (q, r, t, o) = (s(&q).to_string(), s(&r).to_string(), s(&t).to_string(), s(&o).to_string());
        args.extend([q.as_str(), "--reference", r.as_str(), "--truth", t.as_str(), "--out", o.as_str()]);
        ok(&args)
    };
    let line = seg("p1.png");
    seg("p2.png");
    assert_eq!(fs::read(tmp.join("p1.png")).unwrap(), fs::read(tmp.join("p2.png")).unwrap());
    assert_eq!(fs::read(tmp.join("p1_mask.png")).unwrap(), fs::read(tmp.join("p2_mask.png")).unwrap());
    let fg: usize = value(&line, "foreground").unwrap().parse().unwrap();
    assert!(fg > 0 && fg < 32 * 32, "{line}");
    assert!(value(&line, "iou").unwrap().parse::<f64>().unwrap() > 0.5, "{line}");
    let prob = image::open(tmp.join("p1.png")).unwrap();
    assert!(matches!(prob.color(), image::ColorType::L16));
    let mask = image::open(tmp.join("p1_mask.png")).unwrap().to_luma8();
    assert!(mask.pixels().all(|p| p[0] == 0 || p[0] == 255));

    let out = ostr(&[
        "segment", "--checkpoint", ck, "--query", s(&ep.join("Q.png")), "--reference", s(&ep.join("R.png")),
        "--out", s(&tmp.join("bad.png")), "--threshold", "0.0",
    ]);
    assert!(!out.status.success());
    assert!(summary(&out).contains("status=err"));

    // eval: byte-identical metrics on rerun.
    for name in ["e1.csv", "e2.csv"] {
        let mut args = vec!["eval", "--checkpoint", ck, "--n", "6", "--seed", "1"];
        let o = tmp.join(name);
        args.extend(["--out", s(&o)]);
        args.extend(data_flags());
        let line = ok(&args);
        assert!(value(&line, "mean_iou").is_some());
    }
    assert_eq!(fs::read(tmp.join("e1.csv")).unwrap(), fs::read(tmp.join("e2.csv")).unwrap());

    // invariance, scale: one row per (episode, level); s = 1 is the baseline.
    let inv = |mode: &str, out: &str, extra: &[&str]| {
        let o = tmp.join(out);
        let mut args = vec!["invariance", "--checkpoint", ck, "--n", "5", "--mode", mode, "--out", s(&o)];
        args.extend(extra);
        args.extend(data_flags());
        let line = ok(&args);
        let text = fs::read_to_string(tmp.join(out)).unwrap();
        (line, text)
    };
    let (line, text) = inv("scale", "inv.csv", &[]);
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 5 * 3);
    assert!(text.starts_with("episode,class,mode,level,iou,baseline_iou,delta\n"));
    for r in rows.iter().filter(|r| r[3] == "1") {
        assert_eq!(r[4], r[5]);
    }
    assert_eq!(value(&line, "delta@1").as_deref(), Some("0.0000"));
    let (_, again) = inv("scale", "inv2.csv", &[]);
    assert_eq!(text, again);

    // invariance, affine with zero ranges.
    let (_, text) = inv("affine", "aff.csv", &["--max-rotation", "0", "--max-shear", "0", "--max-scale", "1"]);
    for l in text.lines().skip(1) {
        let delta: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
        assert!(delta.abs() <= 1e-4, "{l}");
    }

    // export-gates
    let o = tmp.join("gates.csv");
    let mut args = vec!["export-gates", "--checkpoint", ck, "--n", "4", "--out", s(&o)];
    args.extend(data_flags());
    ok(&args);
    let text = fs::read_to_string(&o).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 1 + 32);
    let mut n = 0;
    for l in lines {
        let v: Vec<&str> = l.split(',').collect();
        assert_eq!(v.len(), 33);
        for g in &v[1..] {
            let g: f64 = g.parse().unwrap();
            assert!(g > 0.0 && g < 1.0);
        }
        n += 1;
    }
    assert_eq!(n, 4);
}

#[test]
fn train_command_writes_reproducible_logs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = a.path().join("run.cfg");
    fs::write(&cfg, "# small run\ninput_size = 32\nepochs = 5\nlr = 0.5\n").unwrap();
    for d in [a.path(), b.path()] {
        let mut args = vec![
            "train", "--out", s(d), "--config", s(&cfg), "--epochs", "2", "--lr", "0.0003",
            "--episodes-per-epoch", "8", "--batch-size", "4", "--eval-episodes", "4", "--seed", "2",
        ];
        args.extend(data_flags());
        let line = ok(&args);
        assert_eq!(value(&line, "steps").as_deref(), Some("4"));
        assert!(value(&line, "best_iou").is_some());
    }
    for f in ["run.csv", "eval.csv", "config.txt", "last.ckpt", "best.ckpt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let text = fs::read_to_string(a.path().join("config.txt")).unwrap();
    assert!(text.contains("input_size = 32") && text.contains("epochs = 2") && text.contains("lr = 0.0003"));
}
