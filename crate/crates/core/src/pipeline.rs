//! File-level stages behind the command-line tool. Every stage reads and
//! writes plain directories so runs can be chained, resumed and repeated.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::io::{load_clip_set, load_frames, read_frame_png, save_clip_set, write_frame_png, write_probability_png};
use crate::datagen::{make_camera_dataset, make_clip_set, sub_seed, CameraDataset, CameraModelSpec, ManipulationTag, VideoClip};
use crate::error::{Error, Result};
use crate::evaluation::{compression_sweep, evaluate, predict, sweep_svg, EvalOptions, EvalReport, SweepPoint};
use crate::model::Model;
use crate::nn::params::ParamStore;
use crate::temporal::FlowOrder;
use crate::training::{
    pretrain, pretrain_accuracy, train_full, Checkpoint, EpochRecord, FlowSource, FrameSet, Hooks, PretrainEpoch, Stage,
};

/// Environment variable naming the optical-flow cache directory.
pub const CACHE_ENV: &str = "MVF_CACHE";

pub const CONFIG_ECHO: &str = "config.toml";

const SALT_TRAIN: u64 = 1;
const SALT_VAL: u64 = 2;
const SALT_TEST: u64 = 3;
const SALT_CAMERA: u64 = 4;
const SALT_CAMERA_VAL: u64 = 5;
const SALT_PRETRAIN: u64 = 10;
const SALT_INIT: u64 = 11;
const SALT_SHUFFLE: u64 = 12;

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Writes the effective configuration into a run directory.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    write_text(&dir.join(CONFIG_ECHO), &cfg.to_toml()?)
}

/// Flow cache root from the environment, if set and non-empty.
pub fn flow_cache() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn flow_source(cfg: &RunConfig) -> FlowSource<'_> {
    FlowSource { estimator: &cfg.flow, order: FlowOrder::default(), cache: flow_cache(), workers: cfg.workers }
}

/// Builds the in-memory tensors for a set of clips using the config's flow settings.
pub fn frame_set(cfg: &RunConfig, clips: &[VideoClip]) -> Result<FrameSet> {
    FrameSet::build(clips, &flow_source(cfg))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraIndex {
    models: usize,
    seed: u64,
    labels: Vec<usize>,
}

pub fn save_camera_dataset(ds: &CameraDataset, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    for (i, f) in ds.frames.iter().enumerate() {
        write_frame_png(&dir.join(format!("frame_{i:04}.png")), f)?;
    }
    write_json(&dir.join("labels.json"), &CameraIndex { models: ds.num_classes(), seed: ds.seed, labels: ds.labels.clone() })
}

pub fn load_camera_dataset(dir: &Path) -> Result<CameraDataset> {
    let index: CameraIndex = read_json(&dir.join("labels.json"))?;
    let frames = (0..index.labels.len())
        .map(|i| read_frame_png(&dir.join(format!("frame_{i:04}.png"))))
        .collect::<Result<Vec<_>>>()?;
    if let Some(&bad) = index.labels.iter().find(|&&l| l >= index.models) {
        return Err(Error::format(dir, format!("label {bad} exceeds {} models", index.models)));
    }
    Ok(CameraDataset { frames, labels: index.labels, specs: (0..index.models).map(CameraModelSpec::for_model).collect(), seed: index.seed })
}

/// Counts of what [`gen_data`] wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
    pub camera_frames: usize,
    pub camera_val_frames: usize,
}

/// Writes `train/`, `val/`, `test/` clip sets and `camera/`, `camera_val/`
/// pretraining frames under `out`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<DataSummary> {
    cfg.validate()?;
    let mut counts = [0usize; 3];
    for (i, (name, split, salt)) in
        [("train", &cfg.data.train, SALT_TRAIN), ("val", &cfg.data.val, SALT_VAL), ("test", &cfg.data.test, SALT_TEST)]
            .into_iter()
            .enumerate()
    {
        let clips = make_clip_set(split, sub_seed(cfg.seed, salt))?;
        let dir = out.join(name);
        mkdir(&dir)?;
        save_clip_set(&clips, &dir)?;
        counts[i] = clips.len();
        info!("wrote {} {name} clips to {}", clips.len(), dir.display());
    }
    let size = (cfg.data.train.height, cfg.data.train.width);
    let camera = make_camera_dataset(cfg.data.camera_models, cfg.data.camera_frames_per_model, size, sub_seed(cfg.seed, SALT_CAMERA))?;
    save_camera_dataset(&camera, &out.join("camera"))?;
    let held = make_camera_dataset(cfg.data.camera_models, cfg.data.camera_frames_per_model, size, sub_seed(cfg.seed, SALT_CAMERA_VAL))?;
    save_camera_dataset(&held, &out.join("camera_val"))?;
    let summary = DataSummary {
        train_clips: counts[0],
        val_clips: counts[1],
        test_clips: counts[2],
        camera_frames: camera.frames.len(),
        camera_val_frames: held.frames.len(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    echo_config(cfg, out)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub train_accuracy: Vec<f64>,
    pub heldout_accuracy: Vec<f64>,
    pub scales: Vec<u32>,
    pub runtime_secs: f64,
}

fn write_pretrain_curves(path: &Path, curves: &[PretrainEpoch], scales: &[u32]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["epoch".to_string(), "loss".into(), "lr".into()];
    header.extend(scales.iter().map(|k| format!("accuracy_k{k}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for c in curves {
        let mut row = vec![c.epoch.to_string(), c.loss.to_string(), c.lr.to_string()];
        row.extend(c.accuracy.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Camera-model pretraining on `data/camera`, evaluated on `data/camera_val`.
/// Writes `pretrain.ckpt`, `pretrain_curves.csv` and `pretrain.json`.
pub fn run_pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<PretrainSummary> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let camera = load_camera_dataset(&data.join("camera"))?;
    let held = load_camera_dataset(&data.join("camera_val"))?;
    echo_config(cfg, out)?;
    let outcome = pretrain(&cfg.model.spatial, &camera, &cfg.pretrain, sub_seed(cfg.seed, SALT_PRETRAIN), Hooks::default())?;
    outcome.checkpoint.save(&out.join("pretrain.ckpt"))?;
    write_pretrain_curves(&out.join("pretrain_curves.csv"), &outcome.curves, &cfg.pretrain.head.scales)?;
    let heldout_accuracy = pretrain_accuracy(&outcome.model, &held, cfg.pretrain.batch_size, DType::F32)?;
    let summary = PretrainSummary {
        train_accuracy: outcome.curves.last().map(|c| c.accuracy.clone()).unwrap_or_default(),
        heldout_accuracy,
        scales: cfg.pretrain.head.scales.clone(),
        runtime_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join("pretrain.json"), &summary)?;
    Ok(summary)
}

fn write_curves(path: &Path, curves: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for c in curves {
        w.serialize(c).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curves(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
    }
    Checkpoint::load(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub runtime_secs: f64,
}

/// Full training on `data/train` with validation on `data/val`, optionally
/// initialised from a pretraining checkpoint (spatial trunk) or a full
/// checkpoint (every parameter, fresh optimizer). Writes
/// `last.ckpt` after every epoch, `best.ckpt` on validation improvement and
/// `curves.csv` at the end.
pub fn run_train(
    cfg: &RunConfig,
    data: &Path,
    pretrained: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let resume = resume.map(load_checkpoint).transpose()?;
    let pretrained = pretrained.map(load_checkpoint).transpose()?;
    let train_clips = load_clip_set(&data.join("train"))?;
    let val_clips = load_clip_set(&data.join("val"))?;
    echo_config(cfg, out)?;
    let train = frame_set(cfg, &train_clips)?;
    let val = frame_set(cfg, &val_clips)?;
    let mut store = ParamStore::new(DType::F32, sub_seed(cfg.seed, SALT_INIT));
    let model = Model::new(&mut store, &cfg.model, cfg.ablation.clone())?;
    if let (Some(ck), None) = (&pretrained, &resume) {
        // a full checkpoint (e.g. from a splice/edit-only stage) must cover the whole model
        let n = ck.restore(&store, ck.stage == Stage::Full)?;
        info!("initialised {n} parameters from a {:?} checkpoint", ck.stage);
    }
    let mut best_epoch = None;
    let hooks = Hooks {
        on_step: None,
        on_epoch: Some(Box::new(|record: &EpochRecord, ck: &Checkpoint, improved: bool| {
            ck.save(&out.join("last.ckpt"))?;
            if improved {
                Checkpoint { velocity: Default::default(), ..ck.clone() }.save(&out.join("best.ckpt"))?;
                best_epoch = Some(record.epoch);
            }
            Ok(())
        })),
    };
    let outcome = train_full(
        &model,
        &mut store,
        &train,
        &val,
        &cfg.train,
        sub_seed(cfg.seed, SALT_SHUFFLE),
        cfg.to_json(),
        resume.as_ref(),
        hooks,
    )?;
    if outcome.curves.is_empty() {
        outcome.last.save(&out.join("last.ckpt"))?;
    }
    write_curves(&out.join("curves.csv"), &outcome.curves)?;
    let summary = TrainSummary {
        epochs_run: outcome.curves.len(),
        best_epoch,
        best_val_accuracy: outcome.best.as_ref().and_then(|b| b.metrics.get("best_val_accuracy")).and_then(|v| v.as_f64()),
        final_loss: outcome.curves.last().map(|c| c.loss),
        runtime_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join("train.json"), &summary)?;
    Ok(summary)
}

/// A full-network checkpoint rebuilt into a runnable model.
pub struct LoadedModel {
    pub config: RunConfig,
    pub store: ParamStore,
    pub model: Model,
}

/// Rebuilds the model recorded in a full-training checkpoint.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ck = load_checkpoint(path)?;
    if ck.stage != Stage::Full {
        return Err(Error::format(path, format!("expected a full-training checkpoint, got {:?}", ck.stage)));
    }
    let config: RunConfig =
        serde_json::from_value(ck.config.clone()).map_err(|e| Error::format(path, format!("embedded config: {e}")))?;
    let mut store = ParamStore::new(DType::F32, config.seed);
    let model = Model::new(&mut store, &config.model, config.ablation.clone())?;
    ck.restore(&store, true)?;
    Ok(LoadedModel { config, store, model })
}

/// Model and flow settings from the checkpoint, evaluation settings and
/// workers from the caller.
fn effective_config(loaded: &LoadedModel, eval: &EvalOptions, workers: usize) -> RunConfig {
    RunConfig { eval: eval.clone(), workers, ..loaded.config.clone() }
}

fn write_records(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["clip", "frame", "tag", "label", "score", "f1", "best_f1"]).map_err(|e| csv_error(path, e))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.records {
        w.write_record([
            r.clip.to_string(),
            r.frame.to_string(),
            r.tag.name().to_string(),
            r.label.to_string(),
            r.score.to_string(),
            opt(r.f1),
            opt(r.best_f1),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Evaluates a checkpoint on a clip-set directory. Writes `report.json`
/// and `records.csv`.
pub fn run_eval(ckpt: &Path, clips: &Path, eval: &EvalOptions, workers: usize, out: &Path) -> Result<EvalReport> {
    let loaded = load_model(ckpt)?;
    let cfg = effective_config(&loaded, eval, workers);
    let clips = load_clip_set(clips)?;
    echo_config(&cfg, out)?;
    let set = frame_set(&cfg, &clips)?;
    let report = evaluate(&loaded.model, &set, eval, cfg.to_json())?;
    write_json(&out.join("report.json"), &report)?;
    write_records(&out.join("records.csv"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub score: f64,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub checkpoint: PathBuf,
    pub clip: PathBuf,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<FrameScore>,
}

/// Scores every frame of a directory of `frame_%04d.png` files. Writes
/// `scores.json` and one 8-bit `mask_%04d.png` per frame.
pub fn run_infer(ckpt: &Path, clip_dir: &Path, workers: usize, out: &Path) -> Result<InferReport> {
    let loaded = load_model(ckpt)?;
    let cfg = effective_config(&loaded, &loaded.config.eval, workers);
    let frames = load_frames(clip_dir)?;
    let (_, h, w) = frames[0].dim();
    let n = frames.len();
    let clip = VideoClip {
        masks: vec![Array2::zeros((h, w)); n],
        labels: vec![0; n],
        frames,
        tag: ManipulationTag::Authentic,
        seed: 0,
        source: None,
        config: serde_json::Value::Null,
    };
    echo_config(&cfg, out)?;
    let set = frame_set(&cfg, std::slice::from_ref(&clip))?;
    let preds = predict(&loaded.model, &set, cfg.eval.batch_size)?;
    let mut scored = Vec::with_capacity(n);
    for p in &preds {
        let name = format!("mask_{:04}.png", p.frame);
        write_probability_png(&out.join(&name), &p.mask, h, w)?;
        scored.push(FrameScore { frame: p.frame, score: f64::from(p.score), mask: name });
    }
    let report =
        InferReport { checkpoint: ckpt.to_path_buf(), clip: clip_dir.to_path_buf(), height: h, width: w, frames: scored };
    write_json(&out.join("scores.json"), &report)?;
    Ok(report)
}

/// Compression sweep of a checkpoint over the configured quality ladder.
/// Writes `sweep.json` and `sweep.svg`.
pub fn run_sweep(
    ckpt: &Path,
    clips: &Path,
    eval: &EvalOptions,
    qualities: &[crate::datagen::Quality],
    workers: usize,
    out: &Path,
) -> Result<Vec<SweepPoint>> {
    let loaded = load_model(ckpt)?;
    let mut cfg = effective_config(&loaded, eval, workers);
    cfg.sweep.qualities = qualities.to_vec();
    let clips = load_clip_set(clips)?;
    echo_config(&cfg, out)?;
    let points = compression_sweep(&loaded.model, &clips, qualities, &flow_source(&cfg), eval, cfg.to_json())?;
    write_json(&out.join("sweep.json"), &points)?;
    write_text(&out.join("sweep.svg"), &sweep_svg(&points))?;
    Ok(points)
}

/// Loss and validation-accuracy curves. The numeric table is embedded as
/// JSON inside `<metadata>`.
pub fn curves_svg(curves: &[EpochRecord]) -> String {
    let (w, h, left, right, top, bottom) = (480.0, 320.0, 56.0, 24.0, 24.0, 48.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let ymax = curves.iter().map(|c| c.loss).fold(1.0f64, f64::max);
    let n = curves.len().max(2);
    let x = |i: usize| left + pw * i as f64 / (n - 1) as f64;
    let y = |v: f64| top + ph * (1.0 - (v / ymax).clamp(0.0, 1.0));
    let esc = |s: String| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let table = serde_json::to_string(curves).unwrap_or_default();
    let _ = writeln!(svg, "<metadata>{}</metadata>", esc(table));
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#, top + ph, left + pw);
    for t in 0..=4 {
        let v = ymax * t as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v:.2}</text>"#, left - 6.0, y(v) + 4.0);
    }
    let series: [(&str, &str, fn(&EpochRecord) -> f64); 2] =
        [("loss", "#1f77b4", |c| c.loss), ("val accuracy", "#2ca02c", |c| c.val_accuracy)];
    for (k, (name, color, get)) in series.iter().enumerate() {
        let pts: Vec<String> = curves.iter().enumerate().map(|(i, c)| format!("{:.2},{:.2}", x(i), y(get(c)))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{name}</text>"#,
            left + 8.0 + 90.0 * k as f64,
            top + 14.0
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch</text>"#, left + pw / 2.0, h - 8.0);
    svg.push_str("</svg>\n");
    svg
}

/// Renders `curves.csv` or `sweep.json` as SVG.
pub fn plot(input: &Path, output: &Path) -> Result<()> {
    let svg = match input.extension().and_then(|e| e.to_str()) {
        Some("csv") => curves_svg(&read_curves(input)?),
        Some("json") => sweep_svg(&read_json::<Vec<SweepPoint>>(input)?),
        _ => return Err(Error::format(input, "expected curves.csv or sweep.json")),
    };
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    write_text(output, &svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;

    fn tiny_run(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::with_seed(seed);
        cfg.model = tiny_config();
        for split in [&mut cfg.data.train, &mut cfg.data.val, &mut cfg.data.test] {
            split.authentic = 1;
            split.manipulated = 1;
            split.frames = 5;
        }
        cfg.data.camera_models = 2;
        cfg.data.camera_frames_per_model = 2;
        cfg.pretrain.epochs = 1;
        cfg.train.epochs = 1;
        cfg
    }

    #[test]
    fn stages_chain_through_directories() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(3);
        let data = dir.path().join("data");
        let summary = gen_data(&cfg, &data).unwrap();
        assert_eq!((summary.train_clips, summary.camera_frames), (2, 4));
        let pre = dir.path().join("pre");
        run_pretrain(&cfg, &data, &pre).unwrap();
        let run = dir.path().join("run");
        let t = run_train(&cfg, &data, Some(&pre.join("pretrain.ckpt")), None, &run).unwrap();
        assert_eq!(t.epochs_run, 1);
        assert!(run.join("best.ckpt").is_file() && run.join(CONFIG_ECHO).is_file());
        assert_eq!(read_curves(&run.join("curves.csv")).unwrap().len(), 1);
        let report = run_eval(&run.join("best.ckpt"), &data.join("test"), &EvalOptions::default(), 1, &dir.path().join("ev")).unwrap();
        assert_eq!(report.records.len(), 10);
        let echoed = RunConfig::load(&dir.path().join("ev").join(CONFIG_ECHO)).unwrap();
        assert_eq!(echoed.model, cfg.model);
        plot(&run.join("curves.csv"), &dir.path().join("curves.svg")).unwrap();
        assert!(crate::evaluation::svg_table(&fs::read_to_string(dir.path().join("curves.svg")).unwrap()).is_ok());
    }

    #[test]
    fn missing_checkpoint_names_the_path() {
        let err = load_model(Path::new("/nonexistent/best.ckpt")).err().unwrap();
        assert!(matches!(&err, Error::Io { path, .. } if path.ends_with("best.ckpt")));
    }
}
