//! Camera-model pretraining of the spatial trunk and full-network training.

pub mod checkpoint;
pub mod data;
pub mod optim;

use candle_core::{DType, Tensor};
use log::info;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Stage};
pub use data::{Batch, FlowSource, FrameSet, Sample};
pub use optim::{OptimizerSchedule, Sgd};

use crate::datagen::{CameraDataset, ManipulationTag};
use crate::error::{invalid, Error, Result};
use crate::losses::{cell_accuracy, joint_loss, pretrain_loss, scalar, step_weights, DiceForm, LossWeights};
use crate::model::{Model, PretrainConfig, PretrainModel, SPATIAL_PREFIX};
use crate::nn::params::ParamStore;
use crate::spatial::{ConstrainedConv, SpatialConfig};

/// Reported after every optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Optional callbacks. `on_step` sees the constrained layer after projection.
#[derive(Default)]
pub struct Hooks<'a> {
    pub on_step: Option<Box<dyn FnMut(&StepInfo, &ConstrainedConv) -> Result<()> + 'a>>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord, &Checkpoint, bool) -> Result<()> + 'a>>,
}

/// One optimizer update followed by the constrained-filter projection.
pub fn optimizer_step(
    store: &ParamStore,
    opt: &mut Sgd,
    loss: &Tensor,
    lr: f64,
    constrained: Option<&ConstrainedConv>,
) -> Result<f64> {
    let grads = loss.backward()?;
    let norm = opt.step(store, &grads, lr)?;
    if !norm.is_finite() {
        return Err(Error::NonFinite { what: "gradient norm", index: 0 });
    }
    if let Some(c) = constrained {
        if !store.is_frozen(c.param_name()) {
            c.project(store)?;
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: OptimizerSchedule,
    pub grad_clip: Option<f64>,
    pub head: PretrainConfig,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 8,
            schedule: OptimizerSchedule::pretrain(),
            grad_clip: Some(5.0),
            head: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Per-cell accuracy on the training frames, one entry per scale.
    pub accuracy: Vec<f64>,
}

pub struct PretrainOutcome {
    /// Spatial trunk weights only.
    pub checkpoint: Checkpoint,
    pub curves: Vec<PretrainEpoch>,
    pub step_losses: Vec<f64>,
    pub store: ParamStore,
    pub model: PretrainModel,
}

fn frame_batch(frames: &[crate::datagen::Frame], idx: &[usize], dtype: DType) -> Result<Tensor> {
    let picked: Vec<_> = idx.iter().map(|&i| frames[i].clone()).collect();
    Ok(data::frames_tensor(&picked)?.to_dtype(dtype)?)
}

fn chunked_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::datagen::sub_seed(seed, 0x9e7 + epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Per-cell accuracy of a pretraining model on `dataset`, per scale.
pub fn pretrain_accuracy(model: &PretrainModel, dataset: &CameraDataset, batch_size: usize, dtype: DType) -> Result<Vec<f64>> {
    let scales = model.config().scales.len();
    let mut hits = vec![0.0; scales];
    let idx: Vec<usize> = (0..dataset.frames.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = frame_batch(&dataset.frames, chunk, dtype)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
        for (s, logits) in model.forward(&x)?.iter().enumerate() {
            hits[s] += cell_accuracy(logits, &labels)? * chunk.len() as f64;
        }
    }
    Ok(hits.into_iter().map(|h| h / dataset.frames.len().max(1) as f64).collect())
}

/// Camera-model pretraining; returns the spatial trunk as a checkpoint.
pub fn pretrain(
    spatial: &SpatialConfig,
    dataset: &CameraDataset,
    settings: &PretrainSettings,
    seed: u64,
    mut hooks: Hooks<'_>,
) -> Result<PretrainOutcome> {
    settings.schedule.validate()?;
    if dataset.frames.is_empty() || settings.batch_size == 0 {
        return Err(invalid!("pretraining needs frames and a positive batch size"));
    }
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l >= dataset.num_classes()) {
        return Err(invalid!("label {bad} exceeds the {} camera classes", dataset.num_classes()));
    }
    let dtype = DType::F32;
    let mut store = ParamStore::new(dtype, seed);
    let model = PretrainModel::new(&mut store, spatial, &settings.head, dataset.num_classes())?;
    let mut opt = Sgd::new(settings.schedule.momentum, settings.grad_clip);
    let mut curves = Vec::new();
    let mut step_losses = Vec::new();
    let mut step = 0;
    for epoch in 0..settings.epochs {
        let lr = settings.schedule.lr(epoch);
        let order = chunked_order(dataset.frames.len(), seed, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(settings.batch_size) {
            let x = frame_batch(&dataset.frames, chunk, dtype)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let loss = pretrain_loss(&model.forward(&x)?, &labels, &settings.head.scales, &settings.head.lambdas)?;
            let value = scalar(&loss)?;
            let grad_norm = optimizer_step(&store, &mut opt, &loss, lr, Some(&model.spatial.constrained))?;
            if let Some(f) = hooks.on_step.as_mut() {
                f(&StepInfo { stage: Stage::Pretrain, epoch, step, loss: value, grad_norm }, &model.spatial.constrained)?;
            }
            step_losses.push(value);
            total += value * chunk.len() as f64;
            step += 1;
        }
        let accuracy = pretrain_accuracy(&model, dataset, settings.batch_size, dtype)?;
        let loss = total / dataset.frames.len() as f64;
        info!("pretrain epoch {epoch}: loss {loss:.5} lr {lr:.3e} accuracy {accuracy:?}");
        curves.push(PretrainEpoch { epoch, loss, lr, accuracy });
    }
    let metrics = serde_json::to_value(curves.last()).map_err(|e| invalid!("metrics: {e}"))?;
    let config = serde_json::json!({ "spatial": spatial, "pretrain": settings, "seed": seed });
    let checkpoint =
        Checkpoint::capture(Stage::Pretrain, settings.epochs, &store, &format!("{SPATIAL_PREFIX}."), None, config, metrics)?;
    Ok(PretrainOutcome { checkpoint, curves, step_losses, store, model })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: OptimizerSchedule,
    pub grad_clip: Option<f64>,
    pub loss_weights: LossWeights,
    pub dice: DiceForm,
    /// Keep the pretrained spatial trunk fixed.
    pub freeze_spatial: bool,
    /// Frames drawn from each clip per epoch; all frames when unset.
    pub frames_per_clip: Option<usize>,
    /// Train only on authentic clips and these manipulation kinds; all when empty.
    pub only_kinds: Vec<ManipulationTag>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 4,
            schedule: OptimizerSchedule::full(),
            grad_clip: Some(5.0),
            loss_weights: LossWeights::default(),
            dice: DiceForm::Standard,
            freeze_spatial: false,
            frames_per_clip: None,
            only_kinds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub detection: f64,
    pub pixel_bce: f64,
    pub dice: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub struct TrainOutcome {
    /// Best checkpoint by validation accuracy; `None` when a resumed run never
    /// beat the accuracy recorded in the resume checkpoint.
    pub best: Option<Checkpoint>,
    pub last: Checkpoint,
    pub curves: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

/// Fraction of frames whose thresholded score matches the label.
pub fn detection_accuracy(model: &Model, set: &FrameSet, batch_size: usize, dtype: DType) -> Result<f64> {
    let samples = set.samples();
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let b = set.batch(chunk, dtype)?;
        let scores = model.forward(&b.windows)?.score.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        correct += chunk.iter().zip(scores).filter(|(&s, p)| (*p >= 0.5) == (set.label(s) == 1)).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn epoch_samples(set: &FrameSet, settings: &TrainSettings, seed: u64, epoch: usize) -> Vec<Sample> {
    let kinds = &settings.only_kinds;
    let all: Vec<Sample> = set
        .shuffled(seed, epoch)
        .into_iter()
        .filter(|&(c, _)| {
            let tag = set.clips[c].tag;
            kinds.is_empty() || tag == ManipulationTag::Authentic || kinds.contains(&tag)
        })
        .collect();
    match settings.frames_per_clip {
        None => all,
        Some(k) => {
            let mut taken = vec![0usize; set.clips.len()];
            all.into_iter()
                .filter(|&(c, _)| {
                    taken[c] += 1;
                    taken[c] <= k
                })
                .collect()
        }
    }
}

/// Full-network training on the joint loss. `resume` continues from a
/// checkpoint written by a previous call with the same settings.
pub fn train_full(
    model: &Model,
    store: &mut ParamStore,
    train: &FrameSet,
    val: &FrameSet,
    settings: &TrainSettings,
    seed: u64,
    config: serde_json::Value,
    resume: Option<&Checkpoint>,
    mut hooks: Hooks<'_>,
) -> Result<TrainOutcome> {
    settings.schedule.validate()?;
    if val.clips.is_empty() || val.num_frames() == 0 {
        return Err(invalid!("empty validation set"));
    }
    let (h, w) = train.frame_size()?;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(invalid!("frame size {h}x{w} is not divisible by 32"));
    }
    if settings.batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    if settings.freeze_spatial {
        store.freeze_prefix(&format!("{SPATIAL_PREFIX}."));
    }
    let dtype = store.dtype();
    let mut opt = Sgd::new(settings.schedule.momentum, settings.grad_clip);
    let mut start = 0;
    let mut best_acc = f64::NEG_INFINITY;
    if let Some(ck) = resume {
        if ck.stage != Stage::Full {
            return Err(invalid!("cannot resume full training from a {:?} checkpoint", ck.stage));
        }
        ck.restore(store, true)?;
        opt.set_velocity(ck.velocity.iter().map(|(n, t)| Ok((n.clone(), t.to_dtype(dtype)?))).collect::<Result<_>>()?);
        start = ck.epoch;
        best_acc = ck.metrics.get("best_val_accuracy").and_then(|v| v.as_f64()).unwrap_or(f64::NEG_INFINITY);
    }
    let constrained = (!model.ablation().has(crate::model::AblationFlag::NoSpatialResidual)).then_some(&model.spatial.constrained);
    let mut curves = Vec::new();
    let mut step_losses = Vec::new();
    let mut best = None;
    let mut last = None;
    let mut step = 0;
    for epoch in start..settings.epochs {
        let lr = settings.schedule.lr(epoch);
        let weights = step_weights(settings.loss_weights, epoch as i64)?;
        let samples = epoch_samples(train, settings, seed, epoch);
        let mut sums = [0.0f64; 4];
        for chunk in samples.chunks(settings.batch_size) {
            let b = train.batch(chunk, dtype)?;
            let out = model.forward(&b.windows)?;
            let l = joint_loss(&out.score, &b.labels, &out.mask, &b.masks, weights, settings.dice)?;
            let value = scalar(&l.total)?;
            let grad_norm = optimizer_step(store, &mut opt, &l.total, lr, constrained)?;
            if let Some(f) = hooks.on_step.as_mut() {
                f(&StepInfo { stage: Stage::Full, epoch, step, loss: value, grad_norm }, &model.spatial.constrained)?;
            }
            let n = chunk.len() as f64;
            for (s, t) in sums.iter_mut().zip([&l.total, &l.detection, &l.pixel_bce, &l.dice]) {
                *s += scalar(t)? * n;
            }
            step_losses.push(value);
            step += 1;
        }
        let n = samples.len().max(1) as f64;
        let val_accuracy = detection_accuracy(model, val, settings.batch_size, dtype)?;
        let record = EpochRecord {
            epoch,
            loss: sums[0] / n,
            detection: sums[1] / n,
            pixel_bce: sums[2] / n,
            dice: sums[3] / n,
            val_accuracy,
            lr,
            gamma: weights.gamma,
            alpha: weights.alpha,
            beta: weights.beta,
        };
        info!(
            "train epoch {epoch}: loss {:.5} (det {:.4}, bce {:.4}, dice {:.4}) val acc {:.3} lr {:.3e}",
            record.loss, record.detection, record.pixel_bce, record.dice, val_accuracy, lr
        );
        let improved = val_accuracy > best_acc;
        if improved {
            best_acc = val_accuracy;
        }
        let metrics = serde_json::json!({ "epoch": record, "best_val_accuracy": best_acc });
        let ck = Checkpoint::capture(Stage::Full, epoch + 1, store, "", Some(&opt), config.clone(), metrics)?;
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&record, &ck, improved)?;
        }
        if improved {
            best = Some(Checkpoint { velocity: Default::default(), ..ck.clone() });
        }
        last = Some(ck);
        curves.push(record);
    }
    let last = match last {
        Some(ck) => ck,
        None => Checkpoint::capture(
            Stage::Full,
            start,
            store,
            "",
            Some(&opt),
            config,
            serde_json::json!({ "best_val_accuracy": best_acc }),
        )?,
    };
    Ok(TrainOutcome { best, last, curves, step_losses })
}
