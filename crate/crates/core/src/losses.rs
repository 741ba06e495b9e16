//! Joint detection/localization loss, multi-scale pretraining loss and the
//! per-epoch loss-weight schedule.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const PROB_EPS: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-7;
pub const WEIGHT_MULTIPLIERS: (f64, f64, f64) = (0.95, 0.80, 1.18);
pub const PRETRAIN_LAMBDAS: [f64; 3] = [0.01, 0.0075, 0.005];
pub const PRETRAIN_SCALES: [u32; 3] = [3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 1.0, alpha: 1.0, beta: 1.0 }
    }
}

/// (γ, α, β) at `epoch`: initial × (0.95, 0.80, 1.18)^epoch.
pub fn step_weights(initial: LossWeights, epoch: i64) -> Result<LossWeights> {
    if epoch < 0 {
        return Err(invalid!("epoch must be non-negative, got {epoch}"));
    }
    let e = epoch as i32;
    let (mg, ma, mb) = WEIGHT_MULTIPLIERS;
    Ok(LossWeights {
        gamma: initial.gamma * mg.powi(e),
        alpha: initial.alpha * ma.powi(e),
        beta: initial.beta * mb.powi(e),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceForm {
    /// 1 − 2Σ(m·m̂) / (Σm² + Σm̂² + ε), per frame.
    #[default]
    Standard,
    /// 1 − Σ_ij 2·m·m̂ / (m² + m̂² + ε), per frame.
    PerPixel,
}

/// Rejects NaN/Inf entries, naming the tensor and flat index.
pub fn check_finite(what: &'static str, t: &Tensor) -> Result<()> {
    let values = t.detach().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

/// Elementwise −[y ln p + (1−y) ln(1−p)] on clipped probabilities.
fn bce_elementwise(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    let p = clamp_prob(p)?;
    let pos = (y * p.log()?)?;
    let neg = (y.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?)
}

/// Per-frame Dice loss, shape (B,).
pub fn dice_per_frame(m_hat: &Tensor, m: &Tensor, form: DiceForm) -> Result<Tensor> {
    let b = m.dim(0)?;
    let mh = m_hat.reshape((b, ()))?;
    let mm = m.reshape((b, ()))?;
    let inter = (&mh * &mm)?;
    let ratio = match form {
        DiceForm::Standard => {
            let den = ((mm.sqr()?.sum(1)? + mh.sqr()?.sum(1)?)? + DICE_EPS)?;
            ((inter.sum(1)? * 2.0)? / den)?
        }
        DiceForm::PerPixel => {
            let den = ((mm.sqr()? + mh.sqr()?)? + DICE_EPS)?;
            ((inter * 2.0)? / den)?.sum(1)?
        }
    };
    Ok(ratio.affine(-1.0, 1.0)?)
}

/// The three loss terms, each averaged over the batch.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub total: Tensor,
    pub detection: Tensor,
    pub pixel_bce: Tensor,
    pub dice: Tensor,
}

/// L = γ·BCE(y, p) + α·pixelBCE(m, m̂) + β·Dice(m, m̂).
///
/// `p`, `y`: (B,); `m_hat`, `m`: (B, H, W).
pub fn joint_loss(p: &Tensor, y: &Tensor, m_hat: &Tensor, m: &Tensor, w: LossWeights, form: DiceForm) -> Result<JointLoss> {
    for (what, t) in [("scores", p), ("labels", y), ("predicted masks", m_hat), ("masks", m)] {
        check_finite(what, t)?;
    }
    let b = p.dim(0)?;
    if y.dims() != [b] || m.dims() != m_hat.dims() || m.dim(0)? != b {
        return Err(Error::Shape(format!(
            "joint_loss: scores {:?}, labels {:?}, predictions {:?}, masks {:?}",
            p.dims(),
            y.dims(),
            m_hat.dims(),
            m.dims()
        )));
    }
    let detection = bce_elementwise(p, y)?.mean_all()?;
    let pixel_bce = bce_elementwise(m_hat, m)?.reshape((b, ()))?.mean(1)?.mean_all()?;
    let dice = dice_per_frame(m_hat, m, form)?.mean_all()?;
    let total = ((detection.affine(w.gamma, 0.0)? + pixel_bce.affine(w.alpha, 0.0)?)? + dice.affine(w.beta, 0.0)?)?;
    Ok(JointLoss { total, detection, pixel_bce, dice })
}

fn one_hot(labels: &[usize], classes: usize, like: &Tensor) -> Result<Tensor> {
    let mut v = vec![0.0f64; labels.len() * classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(invalid!("class index {c} out of range for {classes} classes"));
        }
        v[i * classes + c] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), classes, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// L_F = Σ_k (λ_k / 4^k) Σ_ij CE(θ^k_ij, c*), averaged over the batch.
///
/// `logits[s]` is (B, C, 2^k, 2^k) for `scales[s]`.
pub fn pretrain_loss(logits: &[Tensor], labels: &[usize], scales: &[u32], lambdas: &[f64]) -> Result<Tensor> {
    if logits.len() != scales.len() || lambdas.len() != scales.len() {
        return Err(invalid!(
            "pretrain_loss: {} logit grids, {} scales, {} weights",
            logits.len(),
            scales.len(),
            lambdas.len()
        ));
    }
    let mut total: Option<Tensor> = None;
    for ((theta, &k), &lambda) in logits.iter().zip(scales).zip(lambdas) {
        let (b, c, h, w) = theta.dims4()?;
        let n = 1usize << k;
        if b != labels.len() || h != n || w != n {
            return Err(Error::Shape(format!("scale {k}: logits {:?} for {} labels", theta.dims(), labels.len())));
        }
        check_finite("pretrain logits", theta)?;
        let logp = candle_nn::ops::log_softmax(theta, 1)?;
        let picked = logp.broadcast_mul(&one_hot(labels, c, theta)?)?.sum(1)?; // (B, n, n)
        let ce = picked.sum((1, 2))?.neg()?.mean_all()?;
        let term = ce.affine(lambda / 4f64.powi(k as i32), 0.0)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| invalid!("pretrain_loss: no scales"))
}

/// Fraction of cells whose arg-max class equals the label, per scale.
pub fn cell_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = logits.argmax(1)?.to_dtype(DType::U32)?; // (B, n, n)
    let pred = pred.flatten_from(1)?.to_vec2::<u32>()?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (row, &label) in pred.iter().zip(labels) {
        hits += row.iter().filter(|&&c| c as usize == label).count();
        total += row.len();
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Scalar value of a 0-d tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn schedule_closed_forms() {
        let w1 = step_weights(LossWeights::default(), 1).unwrap();
        assert_eq!((w1.gamma, w1.alpha, w1.beta), (0.95, 0.80, 1.18));
        let w0 = step_weights(LossWeights::default(), 0).unwrap();
        assert_eq!((w0.gamma, w0.alpha, w0.beta), (1.0, 1.0, 1.0));
        let w2 = step_weights(LossWeights::default(), 2).unwrap();
        assert!((w2.gamma - 0.9025).abs() < 1e-15 && (w2.alpha - 0.64).abs() < 1e-15 && (w2.beta - 1.3924).abs() < 1e-15);
        assert!(step_weights(LossWeights::default(), -1).is_err());
    }

    #[test]
    fn perfect_mask_uncertain_detection() {
        let d = Device::Cpu;
        let p = Tensor::new(&[0.5f64], &d).unwrap();
        let y = Tensor::new(&[1.0f64], &d).unwrap();
        let m = Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 1.0], (1, 2, 2), &d).unwrap();
        let l = joint_loss(&p, &y, &m, &m, LossWeights::default(), DiceForm::Standard).unwrap();
        assert!((scalar(&l.total).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn complete_mismatch_has_unit_dice() {
        let d = Device::Cpu;
        let m = Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 1.0], (1, 2, 2), &d).unwrap();
        let inv = m.affine(-1.0, 1.0).unwrap();
        let dice = dice_per_frame(&inv, &m, DiceForm::Standard).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(dice, vec![1.0]);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let d = Device::Cpu;
        let p = Tensor::new(&[0.5f64, f64::NAN], &d).unwrap();
        let y = Tensor::new(&[1.0f64, 0.0], &d).unwrap();
        let m = Tensor::zeros((2, 2, 2), DType::F64, &d).unwrap();
        let err = joint_loss(&p, &y, &m, &m, LossWeights::default(), DiceForm::Standard).unwrap_err();
        assert!(matches!(err, Error::NonFinite { what: "scores", index: 1 }));
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let d = Device::Cpu;
        let p = candle_core::Var::new(&[0.3f64, 0.8], &d).unwrap();
        let y = Tensor::new(&[0.0f64, 1.0], &d).unwrap();
        let mh0 = vec![0.2f64, 0.7, 0.4, 0.9, 0.1, 0.5, 0.6, 0.3];
        let mh = candle_core::Var::from_vec(mh0.clone(), (2, 2, 2), &d).unwrap();
        let m = Tensor::from_vec(vec![0.0f64, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0], (2, 2, 2), &d).unwrap();
        let w = LossWeights { gamma: 0.9, alpha: 0.7, beta: 1.3 };
        for form in [DiceForm::Standard, DiceForm::PerPixel] {
            let l = joint_loss(p.as_tensor(), &y, mh.as_tensor(), &m, w, form).unwrap();
            let grads = l.total.backward().unwrap();
            let g = grads.get(mh.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let eval = |v: &[f64]| {
                let t = Tensor::from_vec(v.to_vec(), (2, 2, 2), &d).unwrap();
                scalar(&joint_loss(p.as_tensor(), &y, &t, &m, w, form).unwrap().total).unwrap()
            };
            let h = 1e-6;
            for i in 0..mh0.len() {
                let mut up = mh0.clone();
                let mut dn = mh0.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-5, "{form:?} pixel {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn uniform_logits_pretrain_loss() {
        let grids: Vec<Tensor> = PRETRAIN_SCALES
            .iter()
            .map(|&k| Tensor::zeros((1, 10, 1 << k, 1 << k), DType::F64, &Device::Cpu).unwrap())
            .collect();
        let l = scalar(&pretrain_loss(&grids, &[3], &PRETRAIN_SCALES, &PRETRAIN_LAMBDAS).unwrap()).unwrap();
        assert!((l - 0.0225 * 10f64.ln()).abs() < 1e-9);
        assert!(pretrain_loss(&grids, &[10], &PRETRAIN_SCALES, &PRETRAIN_LAMBDAS).is_err());
    }
}
