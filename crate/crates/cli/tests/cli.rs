use std::path::Path;
use std::process::{Command, Output};

fn mvf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvf")).args(args).env("RUST_LOG", "warn").output().expect("run mvf")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

const TINY: &[&str] = &[
    "--preset",
    "desk",
    "--set",
    "data.train.authentic=1",
    "--set",
    "data.train.manipulated=1",
    "--set",
    "data.train.frames=5",
    "--set",
    "data.val.authentic=1",
    "--set",
    "data.val.manipulated=1",
    "--set",
    "data.val.frames=5",
    "--set",
    "data.test.authentic=1",
    "--set",
    "data.test.manipulated=1",
    "--set",
    "data.test.frames=5",
    "--set",
    "data.camera_models=2",
    "--set",
    "data.camera_frames_per_model=2",
    "--set",
    "train.epochs=1",
];

fn run_ok(args: &[&str]) -> Output {
    let out = mvf(args);
    assert!(out.status.success(), "mvf {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn help_lists_every_subcommand() {
    let out = mvf(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-data", "pretrain", "train", "eval", "infer", "sweep", "plot"] {
        assert!(text.contains(cmd), "{cmd} missing from --help");
    }
}

#[test]
fn missing_checkpoint_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("nope.ckpt");
    let out = mvf(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--clips", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "not_found");
    assert_eq!(Path::new(err["path"].as_str().unwrap()), ckpt);
}

#[test]
fn config_errors_list_every_unknown_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 1\ncolour = 3\n[train]\nepochz = 2\n").unwrap();
    let out = mvf(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    let problems: Vec<&str> = err["problems"].as_array().unwrap().iter().map(|p| p.as_str().unwrap()).collect();
    assert_eq!(problems, vec!["unknown key colour", "unknown key train.epochz"]);
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);
}

#[test]
fn seed_is_required() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvf(&["gen-data", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "config");
}

#[test]
fn train_then_infer_writes_scores_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let (data, run, inf) = (p("data"), p("run"), p("infer"));
    run_ok(&with_tiny(&["gen-data", "--seed", "4", "--out", &data]));
    run_ok(&with_tiny(&["train", "--seed", "4", "--data", &data, "--out", &run]));
    for f in ["config.toml", "run.log", "curves.csv", "last.ckpt", "best.ckpt"] {
        assert!(Path::new(&run).join(f).is_file(), "{f} missing");
    }
    let clip = std::fs::read_dir(Path::new(&data).join("test")).unwrap().next().unwrap().unwrap().path();
    let ckpt = format!("{run}/best.ckpt");
    run_ok(&["infer", "--clip", clip.to_str().unwrap(), "--ckpt", &ckpt, "--out", &inf]);
    let scores: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(&inf).join("scores.json")).unwrap()).unwrap();
    let frames = scores["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 5);
    for f in frames {
        let s = f["score"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert!(Path::new(&inf).join(f["mask"].as_str().unwrap()).is_file());
    }
    let plot = p("curves.svg");
    run_ok(&["plot", "--input", &format!("{run}/curves.csv"), "--output", &plot, "--out", &p("plot")]);
    assert!(std::fs::read_to_string(plot).unwrap().contains("<metadata>"));
}
