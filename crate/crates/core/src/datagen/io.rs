//! On-disk clip layout: `frame_%04d.png` (8-bit RGB), `mask_%04d.png`
//! (1-bit grayscale) and a `meta.json` sidecar.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{ClipSource, Frame, ManipulationTag, Mask, VideoClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipMeta {
    pub labels: Vec<u8>,
    pub manipulation_tag: ManipulationTag,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ClipSource>,
}

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:04}.png"))
}

pub fn mask_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("mask_{t:04}.png"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_frame_png(path: &Path, frame: &Frame) -> Result<()> {
    let (c, h, w) = frame.dim();
    if c != 3 {
        return Err(Error::format(path, format!("expected 3 channels, got {c}")));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data.push((frame[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut enc = png::Encoder::new(create(path)?, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&data).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let stride = w.div_ceil(8);
    let mut data = vec![0u8; stride * h];
    for ((y, x), &v) in mask.indexed_iter() {
        if v != 0 {
            data[y * stride + x / 8] |= 0x80 >> (x % 8);
        }
    }
    let mut enc = png::Encoder::new(create(path)?, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&data).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a (H, W) map of values in [0, 1] as 8-bit grayscale.
pub fn write_probability_png(path: &Path, values: &[f32], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::format(path, format!("{} values for a {height}x{width} image", values.len())));
    }
    let data: Vec<u8> = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut enc = png::Encoder::new(create(path)?, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&data).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Decodes any PNG into 8-bit samples, returning (channels, height, width, data).
fn decode(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((channels, info.height as usize, info.width as usize, buf))
}

/// Reads a PNG as an RGB frame in [0, 1]. Grayscale is replicated, alpha dropped.
pub fn read_frame_png(path: &Path) -> Result<Frame> {
    let (channels, h, w, data) = decode(path)?;
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let src = if channels >= 3 { c } else { 0 };
        data[(y * w + x) * channels + src] as f32 / 255.0
    }))
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let (channels, h, w, data) = decode(path)?;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| (data[(y * w + x) * channels] != 0) as u8))
}

pub fn save_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, (frame, mask)) in clip.frames.iter().zip(&clip.masks).enumerate() {
        write_frame_png(&frame_path(dir, t), frame)?;
        write_mask_png(&mask_path(dir, t), mask)?;
    }
    let meta = ClipMeta {
        labels: clip.labels.clone(),
        manipulation_tag: clip.tag,
        seed: clip.seed,
        height: clip.height(),
        width: clip.width(),
        frames: clip.len(),
        config: clip.config.clone(),
        source: clip.source.clone(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&path, e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: ClipMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut frames = Vec::with_capacity(meta.frames);
    let mut masks = Vec::with_capacity(meta.frames);
    for t in 0..meta.frames {
        frames.push(read_frame_png(&frame_path(dir, t))?);
        masks.push(read_mask_png(&mask_path(dir, t))?);
    }
    let clip = VideoClip {
        frames,
        masks,
        labels: meta.labels,
        tag: meta.manipulation_tag,
        seed: meta.seed,
        source: meta.source,
        config: meta.config,
    };
    clip.validate()?;
    Ok(clip)
}

/// Loads the frames of a directory of `frame_%04d.png` files (no masks needed).
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    loop {
        let path = frame_path(dir, frames.len());
        if !path.exists() {
            break;
        }
        frames.push(read_frame_png(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::format(dir, "no frame_0000.png found"));
    }
    Ok(frames)
}

/// Clip directories directly under `root`, sorted by name.
pub fn list_clip_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn save_clip_set(clips: &[VideoClip], root: &Path) -> Result<Vec<PathBuf>> {
    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let dir = root.join(format!("clip_{i:05}_{}", clip.tag.name()));
            save_clip(clip, &dir).map(|_| dir)
        })
        .collect()
}

pub fn load_clip_set(root: &Path) -> Result<Vec<VideoClip>> {
    list_clip_dirs(root)?.iter().map(|d| load_clip(d)).collect()
}
