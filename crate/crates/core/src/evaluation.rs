//! Frame-level average precision, pixel F1, dataset evaluation and the
//! compression sweep with its SVG plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::datagen::{reencode_clip, ManipulationTag, Quality, VideoClip};
use crate::error::{invalid, Error, Result};
use crate::heads::score_from_mask;
use crate::model::Model;
use crate::training::{FlowSource, FrameSet};

/// Step-wise average precision over descending score thresholds.
///
/// Items with equal scores form one threshold group and enter together, so
/// the result does not depend on input order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { what: "scores", index: i });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(invalid!("average precision needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Σ ΔR·P = (1/P_total)·Σ Δtp·tp/seen; integer products stay exact.
    let (mut tp, mut seen, mut sum) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let before = tp;
        while i < order.len() && scores[order[i]] == s {
            tp += (labels[order[i]] == 1) as usize;
            seen += 1;
            i += 1;
        }
        sum += ((tp - before) * tp) as f64 / seen as f64;
    }
    Ok(sum / positives as f64)
}

/// F1 = 2TP / (2TP + FP + FN) of `pred ≥ threshold` against a binary mask;
/// 1.0 when both masks are empty.
pub fn pixel_f1(pred: &[f32], gt: &[u8], threshold: f32) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= threshold, g > 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub threshold: f32,
    /// Take each frame's score from its mask maximum instead of the detection head.
    pub score_from_mask: bool,
    /// Also report the best F1 over a threshold grid (not the fixed-threshold metric).
    pub sweep_threshold: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { batch_size: 8, threshold: 0.5, score_from_mask: false, sweep_threshold: false }
    }
}

/// Model output for one frame.
#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub clip: usize,
    pub frame: usize,
    pub score: f32,
    pub mask: Vec<f32>,
}

/// Runs the model over every frame of `set`, in clip then frame order.
pub fn predict(model: &Model, set: &FrameSet, batch_size: usize) -> Result<Vec<FramePrediction>> {
    let samples = set.samples();
    if samples.is_empty() {
        return Err(invalid!("empty dataset"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let b = set.batch(chunk, DType::F32)?;
        let o = model.forward(&b.windows)?;
        let scores = o.score.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        let masks = o.mask.to_dtype(DType::F32)?.flatten_from(1)?.to_vec2::<f32>()?;
        for ((&(clip, frame), score), mask) in chunk.iter().zip(scores).zip(masks) {
            out.push(FramePrediction { clip, frame, score, mask });
        }
    }
    Ok(out)
}

/// Persisted per-frame outcome; metrics are recomputed from these alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub clip: usize,
    pub frame: usize,
    pub tag: ManipulationTag,
    pub label: u8,
    pub score: f64,
    /// Pixel F1 at the report threshold; `None` for authentic frames.
    pub f1: Option<f64>,
    /// Best F1 over the threshold grid, when sweeping.
    pub best_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// AP over all frames together.
    pub pooled_ap: Option<f64>,
    /// AP of each manipulation kind against all authentic frames.
    pub per_kind_ap: BTreeMap<String, f64>,
    /// Mean pixel F1 over manipulated frames.
    pub mean_f1: Option<f64>,
    pub mean_best_f1: Option<f64>,
    pub detection_accuracy: f64,
    pub frames: usize,
    pub manipulated_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub threshold: f32,
    pub score_from_mask: bool,
    pub records: Vec<FrameRecord>,
    pub config: serde_json::Value,
    pub runtime_secs: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Metrics from per-frame records.
pub fn metrics_from_records(records: &[FrameRecord], threshold: f32) -> Metrics {
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let pooled_ap = average_precision(&scores, &labels).ok();
    let mut per_kind_ap = BTreeMap::new();
    let kinds: Vec<ManipulationTag> = {
        let mut k: Vec<_> = records.iter().filter(|r| r.tag != ManipulationTag::Authentic).map(|r| r.tag).collect();
        k.sort_by_key(|t| t.name());
        k.dedup();
        k
    };
    for kind in kinds {
        let subset: Vec<&FrameRecord> =
            records.iter().filter(|r| r.tag == kind || r.tag == ManipulationTag::Authentic).collect();
        let s: Vec<f64> = subset.iter().map(|r| r.score).collect();
        let l: Vec<u8> = subset.iter().map(|r| r.label).collect();
        if let Ok(ap) = average_precision(&s, &l) {
            per_kind_ap.insert(kind.name().to_string(), ap);
        }
    }
    let correct = records.iter().filter(|r| (r.score >= threshold as f64) == (r.label == 1)).count();
    Metrics {
        pooled_ap,
        per_kind_ap,
        mean_f1: mean(records.iter().filter_map(|r| r.f1)),
        mean_best_f1: mean(records.iter().filter_map(|r| r.best_f1)),
        detection_accuracy: correct as f64 / records.len().max(1) as f64,
        frames: records.len(),
        manipulated_frames: records.iter().filter(|r| r.label == 1).count(),
    }
}

const SWEEP_THRESHOLDS: usize = 19;

/// Scores every frame of `set` and assembles the report.
pub fn evaluate(model: &Model, set: &FrameSet, opts: &EvalOptions, config: serde_json::Value) -> Result<EvalReport> {
    let start = Instant::now();
    let preds = predict(model, set, opts.batch_size)?;
    let records = preds
        .iter()
        .map(|p| {
            let clip = &set.clips[p.clip];
            let label = clip.labels[p.frame];
            let score = f64::from(if opts.score_from_mask { score_from_mask(&p.mask)? } else { p.score });
            let (f1, best_f1) = if label == 1 {
                let gt: Vec<u8> = clip.masks.get(p.frame)?.flatten_all()?.to_vec1::<f32>()?.iter().map(|&v| (v > 0.5) as u8).collect();
                let f1 = pixel_f1(&p.mask, &gt, opts.threshold)?;
                let best = if opts.sweep_threshold {
                    let mut best = 0.0f64;
                    for i in 1..=SWEEP_THRESHOLDS {
                        best = best.max(pixel_f1(&p.mask, &gt, i as f32 / (SWEEP_THRESHOLDS + 1) as f32)?);
                    }
                    Some(best)
                } else {
                    None
                };
                (Some(f1), best)
            } else {
                (None, None)
            };
            Ok(FrameRecord { clip: p.clip, frame: p.frame, tag: clip.tag, label, score, f1, best_f1 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        metrics: metrics_from_records(&records, opts.threshold),
        threshold: opts.threshold,
        score_from_mask: opts.score_from_mask,
        records,
        config,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub quality: Quality,
    pub report: EvalReport,
}

/// One report per quality level, in ladder order, on re-encoded copies.
pub fn compression_sweep(
    model: &Model,
    clips: &[VideoClip],
    qualities: &[Quality],
    flow: &FlowSource<'_>,
    opts: &EvalOptions,
    config: serde_json::Value,
) -> Result<Vec<SweepPoint>> {
    if qualities.is_empty() {
        return Err(invalid!("empty quality ladder"));
    }
    let mut ladder = qualities.to_vec();
    ladder.sort();
    ladder.dedup();
    ladder
        .into_iter()
        .map(|q| {
            let encoded = clips.iter().map(|c| reencode_clip(c, q.level())).collect::<Result<Vec<_>>>()?;
            let set = FrameSet::build(&encoded, flow)?;
            let report = evaluate(model, &set, opts, config.clone())?;
            Ok(SweepPoint { quality: q, report })
        })
        .collect()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot of mAP and F1 against quality. The numeric table is embedded
/// as JSON inside `<metadata>`.
pub fn sweep_svg(points: &[SweepPoint]) -> String {
    let (w, h, left, right, top, bottom) = (480.0, 320.0, 56.0, 24.0, 24.0, 48.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = points.len().max(1);
    let x = |i: usize| left + if n == 1 { pw / 2.0 } else { pw * i as f64 / (n - 1) as f64 };
    let y = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));
    let table: Vec<_> = points
        .iter()
        .map(|p| {
            serde_json::json!({
                "quality": p.quality.name(),
                "map": p.report.metrics.pooled_ap,
                "f1": p.report.metrics.mean_f1,
            })
        })
        .collect();
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, "<metadata>{}</metadata>", esc(&serde_json::Value::Array(table).to_string()));
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v:.2}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
    }
    for (i, p) in points.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            x(i),
            top + ph + 18.0,
            p.quality.name()
        );
    }
    let series: [(&str, &str, fn(&SweepPoint) -> Option<f64>); 2] = [
        ("mAP", "#1f77b4", |p| p.report.metrics.pooled_ap),
        ("F1", "#d62728", |p| p.report.metrics.mean_f1),
    ];
    for (k, (name, color, get)) in series.iter().enumerate() {
        let pts: Vec<String> =
            points.iter().enumerate().filter_map(|(i, p)| get(p).map(|v| format!("{:.2},{:.2}", x(i), y(v)))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{name}</text>"#,
            left + 8.0 + 60.0 * k as f64,
            top + 14.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">compression quality</text>"#,
        left + pw / 2.0,
        h - 8.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Reads the numeric table back out of a plot written by [`sweep_svg`].
pub fn svg_table(svg: &str) -> Result<serde_json::Value> {
    let start = svg.find("<metadata>").ok_or_else(|| invalid!("plot has no metadata"))? + "<metadata>".len();
    let end = svg.find("</metadata>").ok_or_else(|| invalid!("plot has no metadata"))?;
    let raw = svg[start..end].replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&");
    serde_json::from_str(&raw).map_err(|e| invalid!("plot metadata: {e}"))
}
