//! In-memory tensors for training and evaluation: frames, masks, labels and
//! the pooled optical-flow residual of every frame of every clip.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::{Frame, ManipulationTag, VideoClip};
use crate::error::{invalid, Error, Result};
use crate::model::WindowBatch;
use crate::temporal::{avg_pool, flow_residuals, window_index, CachedFlow, FlowEstimator, FlowOrder};

pub(crate) fn frames_tensor(frames: &[Frame]) -> Result<Tensor> {
    let (c, h, w) = frames.first().ok_or_else(|| invalid!("no frames"))?.dim();
    let mut data = Vec::with_capacity(frames.len() * c * h * w);
    for f in frames {
        if f.dim() != (c, h, w) {
            return Err(Error::Shape(format!("frame {:?} differs from {:?}", f.dim(), (c, h, w))));
        }
        data.extend(f.iter().copied());
    }
    Ok(Tensor::from_vec(data, (frames.len(), c, h, w), &Device::Cpu)?)
}

/// Stable content hash of a clip's frames, used to key the flow cache.
pub fn clip_digest(frames: &[Frame]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for f in frames {
        for v in f.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

#[derive(Debug, Clone)]
pub struct ClipTensors {
    /// (T, 3, H, W).
    pub frames: Tensor,
    /// (T, H, W), values in {0, 1}.
    pub masks: Tensor,
    pub labels: Vec<u8>,
    /// (T, 4, H/8, W/8).
    pub flow: Tensor,
    pub tag: ManipulationTag,
}

impl ClipTensors {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Options for computing flow residuals while building a [`FrameSet`].
pub struct FlowSource<'a> {
    pub estimator: &'a dyn FlowEstimator,
    pub order: FlowOrder,
    /// Per-clip `.flo` cache root; each clip uses a subdirectory named by its digest.
    pub cache: Option<PathBuf>,
    pub workers: usize,
}

fn clip_flow(clip: &VideoClip, src: &FlowSource<'_>) -> Result<Tensor> {
    let cached;
    let nu: &dyn FlowEstimator = match &src.cache {
        Some(root) => {
            cached = CachedFlow { dir: root.join(format!("{:016x}", clip_digest(&clip.frames))), inner: src.estimator };
            &cached
        }
        None => src.estimator,
    };
    let pooled = (0..clip.len())
        .map(|t| avg_pool(&flow_residuals(&clip.frames, t, nu, src.order)?, 8))
        .collect::<Result<Vec<_>>>()?;
    frames_tensor(&pooled)
}

fn clip_tensors(clip: &VideoClip, src: &FlowSource<'_>) -> Result<ClipTensors> {
    clip.validate()?;
    let (h, w) = (clip.height(), clip.width());
    let masks: Vec<f32> = clip.masks.iter().flat_map(|m| m.iter().map(|&v| if v > 0 { 1.0 } else { 0.0 })).collect();
    Ok(ClipTensors {
        frames: frames_tensor(&clip.frames)?,
        masks: Tensor::from_vec(masks, (clip.len(), h, w), &Device::Cpu)?,
        labels: clip.labels.clone(),
        flow: clip_flow(clip, src)?,
        tag: clip.tag,
    })
}

#[derive(Debug, Clone)]
pub struct FrameSet {
    pub clips: Vec<ClipTensors>,
}

/// A frame reference: (clip index, frame index).
pub type Sample = (usize, usize);

pub struct Batch {
    pub windows: WindowBatch,
    /// (B,).
    pub labels: Tensor,
    /// (B, H, W).
    pub masks: Tensor,
}

impl FrameSet {
    pub fn build(clips: &[VideoClip], src: &FlowSource<'_>) -> Result<Self> {
        if clips.is_empty() {
            return Err(invalid!("empty clip set"));
        }
        let size = (clips[0].height(), clips[0].width());
        if let Some(c) = clips.iter().find(|c| (c.height(), c.width()) != size) {
            return Err(invalid!("clip sizes differ: {:?} vs {:?}", (c.height(), c.width()), size));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(src.workers.max(1))
            .build()
            .map_err(|e| invalid!("thread pool: {e}"))?;
        let clips = pool.install(|| clips.par_iter().map(|c| clip_tensors(c, src)).collect::<Result<Vec<_>>>())?;
        Ok(Self { clips })
    }

    pub fn frame_size(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.clips[0].frames.dims4()?;
        Ok((h, w))
    }

    pub fn num_frames(&self) -> usize {
        self.clips.iter().map(|c| c.len()).sum()
    }

    /// Every frame of every clip, in clip then frame order.
    pub fn samples(&self) -> Vec<Sample> {
        self.clips.iter().enumerate().flat_map(|(i, c)| (0..c.len()).map(move |t| (i, t))).collect()
    }

    /// Samples shuffled by a stream keyed on `(seed, epoch)`.
    pub fn shuffled(&self, seed: u64, epoch: usize) -> Vec<Sample> {
        let mut s = self.samples();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::datagen::sub_seed(seed, 0xe90c + epoch as u64));
        s.shuffle(&mut rng);
        s
    }

    pub fn label(&self, s: Sample) -> u8 {
        self.clips[s.0].labels[s.1]
    }

    pub fn batch(&self, samples: &[Sample], dtype: DType) -> Result<Batch> {
        let pick = |t: &Tensor, i: usize| t.narrow(0, i, 1);
        let mut prev = Vec::with_capacity(samples.len());
        let mut cur = Vec::with_capacity(samples.len());
        let mut next = Vec::with_capacity(samples.len());
        let mut flow = Vec::with_capacity(samples.len());
        let mut masks = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        for &(c, t) in samples {
            let clip = self.clips.get(c).ok_or_else(|| invalid!("clip index {c} out of range"))?;
            if t >= clip.len() {
                return Err(invalid!("frame {t} out of range for clip {c} ({} frames)", clip.len()));
            }
            let n = clip.len();
            prev.push(pick(&clip.frames, window_index(n, t, -1))?);
            cur.push(pick(&clip.frames, t)?);
            next.push(pick(&clip.frames, window_index(n, t, 1))?);
            flow.push(pick(&clip.flow, t)?);
            masks.push(pick(&clip.masks, t)?);
            labels.push(clip.labels[t] as f32);
        }
        let cat = |v: &[Tensor]| -> Result<Tensor> { Ok(Tensor::cat(v, 0)?.to_dtype(dtype)?) };
        Ok(Batch {
            windows: WindowBatch { prev: cat(&prev)?, cur: cat(&cur)?, next: cat(&next)?, flow: cat(&flow)? },
            labels: Tensor::from_vec(labels, samples.len(), &Device::Cpu)?.to_dtype(dtype)?,
            masks: cat(&masks)?,
        })
    }
}
