//! Acceptance suite: one PASS/FAIL line per criterion. Runs sequentially so
//! the wall-clock budgets of the training runs are measured without
//! competing tests.

use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvf_core::config::RunConfig;
use mvf_core::datagen::io::{read_mask_png, save_clip};
use mvf_core::datagen::{make_camera_dataset, make_clip_set, ClipSetConfig, ManipulationTag};
use mvf_core::evaluation::{average_precision, evaluate, pixel_f1, EvalOptions, Metrics};
use mvf_core::losses::{joint_loss, pretrain_loss, scalar, step_weights, DiceForm, LossWeights, PRETRAIN_LAMBDAS};
use mvf_core::model::{Ablation, AblationFlag, Model, WindowBatch};
use mvf_core::msh::{connect_scales, EncoderBlock};
use mvf_core::nn::params::ParamStore;
use mvf_core::pipeline;
use mvf_core::spatial::{ConstrainedConv, SpatialConfig, SpatialResidual};
use mvf_core::temporal::{flow_residuals, temporal_residuals, FlowOrder, HornSchunck, TemporalConfig, TemporalTrunk};
use mvf_core::training::{
    optimizer_step, pretrain, pretrain_accuracy, train_full, Checkpoint, Hooks, OptimizerSchedule, Sgd,
    StepInfo,
};

const PROJECTION_STEPS: usize = 1000;
const CENTER_TOL: f64 = 0.0;
const SUM_TOL: f64 = 1e-6;
const IDENTITY_TOL: f64 = 1e-6;
const ORACLE_INSTANCES: usize = 100;
const ORACLE_TOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const PRETRAIN_BUDGET: Duration = Duration::from_secs(10 * 60);
const PRETRAIN_MIN_ACCURACY: f64 = 0.80;
const OVERFIT_BUDGET: Duration = Duration::from_secs(30 * 60);
const OVERFIT_MIN_MAP: f64 = 0.95;
const OVERFIT_MIN_F1: f64 = 0.70;
const ABLATION_EPOCHS: usize = 20;
const AP_EXAMPLE: f64 = 0.8333;
const AP_EXAMPLE_TOL: f64 = 1e-9;
const F1_PAIRS: usize = 100;
const SEED: u64 = 21;

type Outcome = Result<String, String>;

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("criterion {id:>2} {name:<24} PASS  {detail}"),
            Err(detail) => {
                println!("criterion {id:>2} {name:<24} FAIL  {detail}");
                self.failures.push(format!("{id} {name}"));
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn max_abs(t: &Tensor) -> f64 {
    t.abs().unwrap().flatten_all().unwrap().to_dtype(DType::F64).unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

fn f64_tensor(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()
}

/// Centre is exactly zero and off-centre taps sum to one within tolerance.
fn kernel_check(weight: &Tensor) -> (f64, f64) {
    let v = weight.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
    let (mut centre, mut sum_dev) = (0.0f64, 0.0f64);
    for k in v.chunks(25) {
        centre = centre.max(k[12].abs());
        let s: f64 = k.iter().enumerate().filter(|(i, _)| *i != 12).map(|(_, x)| x).sum();
        sum_dev = sum_dev.max((s - 1.0).abs());
    }
    (centre, sum_dev)
}

#[derive(Default)]
struct ConstraintLog {
    steps: usize,
    centre: f64,
    sum_dev: f64,
}

impl ConstraintLog {
    fn observe(&mut self, c: &ConstrainedConv) {
        let (centre, sum_dev) = kernel_check(c.weight());
        self.steps += 1;
        self.centre = self.centre.max(centre);
        self.sum_dev = self.sum_dev.max(sum_dev);
    }

    fn ok(&self) -> bool {
        self.steps > 0 && self.centre <= CENTER_TOL && self.sum_dev <= SUM_TOL
    }
}

fn random_projection_steps() -> ConstraintLog {
    let mut store = ParamStore::new(DType::F32, SEED);
    let conv = ConstrainedConv::new(&mut store.root().sub("c"), 3, 3).unwrap();
    let mut opt = Sgd::new(0.9, None);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut log = ConstraintLog::default();
    for _ in 0..PROJECTION_STEPS {
        let x = Tensor::rand(0f32, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let target = Tensor::randn(0f32, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let loss = (conv.forward(&x).unwrap() * target).unwrap().sum_all().unwrap();
        let lr = 10f64.powf(rng.random_range(-4.0..0.0));
        optimizer_step(&store, &mut opt, &loss, lr, Some(&conv)).unwrap();
        log.observe(&conv);
    }
    log
}

fn criterion_identities() -> Outcome {
    let mut store = ParamStore::new(DType::F32, SEED);
    let spatial = SpatialResidual::new(&mut store.root().sub("s"), &SpatialConfig::default()).map_err(err)?;
    let constant = Tensor::full(0.37f32, (1, 3, 64, 64), &Device::Cpu).map_err(err)?;
    let r = max_abs(&spatial.residual(&constant).map_err(err)?);
    let mut store = ParamStore::new(DType::F32, SEED);
    let trunk = TemporalTrunk::new(&mut store.root().sub("t"), &TemporalConfig::default()).map_err(err)?;
    let frame = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).map_err(err)?;
    let window = Tensor::cat(&[&frame; 5], 0).map_err(err)?;
    let feats = trunk.forward(&window).map_err(err)?;
    let f = |i| feats.narrow(0, i, 1).unwrap();
    let t = max_abs(&temporal_residuals(&f(1), &f(2), &f(3)).map_err(err)?);
    let clip = make_clip_set(&ClipSetConfig { authentic: 1, manipulated: 0, frames: 5, ..Default::default() }, SEED).map_err(err)?;
    let frames = vec![clip[0].frames[0].clone(); 5];
    let o = flow_residuals(&frames, 2, &HornSchunck::default(), FlowOrder::Final).map_err(err)?;
    let o = o.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    check(
        r <= IDENTITY_TOL && t <= IDENTITY_TOL && o <= IDENTITY_TOL,
        format!("max |spatial residual| {r:.1e}, max |T_t| {t:.1e}, max |O_t| {o:.1e} (tol {IDENTITY_TOL:.0e})"),
    )
}

fn ln_clip(p: f64) -> (f64, f64) {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p.ln(), (1.0 - p).ln())
}

/// Straight-from-formula joint loss on flat arrays.
fn joint_oracle(p: &[f64], y: &[f64], mh: &[f64], m: &[f64], hw: usize, w: LossWeights, form: DiceForm) -> f64 {
    let b = p.len();
    let mut det = 0.0;
    for i in 0..b {
        let (lp, lq) = ln_clip(p[i]);
        det -= y[i] * lp + (1.0 - y[i]) * lq;
    }
    det /= b as f64;
    let mut bce = 0.0;
    let mut dice = 0.0;
    for i in 0..b {
        let (pm, pg) = (&mh[i * hw..(i + 1) * hw], &m[i * hw..(i + 1) * hw]);
        let mut frame_bce = 0.0;
        for j in 0..hw {
            let (lp, lq) = ln_clip(pm[j]);
            frame_bce -= pg[j] * lp + (1.0 - pg[j]) * lq;
        }
        bce += frame_bce / hw as f64;
        dice += match form {
            DiceForm::Standard => {
                let num: f64 = (0..hw).map(|j| pg[j] * pm[j]).sum();
                let den: f64 = (0..hw).map(|j| pg[j] * pg[j] + pm[j] * pm[j]).sum();
                1.0 - 2.0 * num / (den + 1e-7)
            }
            DiceForm::PerPixel => 1.0 - (0..hw).map(|j| 2.0 * pg[j] * pm[j] / (pg[j] * pg[j] + pm[j] * pm[j] + 1e-7)).sum::<f64>(),
        };
    }
    w.gamma * det + w.alpha * bce / b as f64 + w.beta * dice / b as f64
}

/// Σ_k λ_k/4^k Σ_cells −log softmax(θ)[c*], averaged over the batch.
fn pretrain_oracle(logits: &[Vec<f64>], classes: usize, labels: &[usize], scales: &[u32], lambdas: &[f64]) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for ((theta, &k), &lambda) in logits.iter().zip(scales).zip(lambdas) {
        let cells = 1usize << (2 * k);
        let mut ce = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            for cell in 0..cells {
                let at = |c: usize| theta[(i * classes + c) * cells + cell];
                let max = (0..classes).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..classes).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
                ce += lse - at(label);
            }
        }
        total += lambda / 4f64.powi(k as i32) * ce / b as f64;
    }
    total
}

fn criterion_loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst_joint = 0.0f64;
    let mut worst_pre = 0.0f64;
    for i in 0..ORACLE_INSTANCES {
        let b = rng.random_range(1..4);
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let hw = h * w;
        let p: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..b).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let mh: Vec<f64> = (0..b * hw).map(|_| rng.random_range(0.0..1.0)).collect();
        let m: Vec<f64> = (0..b * hw).map(|_| f64::from(rng.random_bool(0.4))).collect();
        let lw = LossWeights { gamma: rng.random_range(0.1..2.0), alpha: rng.random_range(0.1..2.0), beta: rng.random_range(0.1..2.0) };
        let form = if i % 2 == 0 { DiceForm::Standard } else { DiceForm::PerPixel };
        let got = joint_loss(
            &f64_tensor(&p, &[b]),
            &f64_tensor(&y, &[b]),
            &f64_tensor(&mh, &[b, h, w]),
            &f64_tensor(&m, &[b, h, w]),
            lw,
            form,
        )
        .and_then(|l| scalar(&l.total))
        .map_err(err)?;
        worst_joint = worst_joint.max((got - joint_oracle(&p, &y, &mh, &m, hw, lw, form)).abs());

        let classes = rng.random_range(2..6);
        let scales: Vec<u32> = match i % 3 {
            0 => vec![0, 1, 2],
            1 => vec![1, 2],
            _ => vec![2],
        };
        let lambdas: Vec<f64> = scales.iter().map(|_| rng.random_range(0.001..0.05)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let logits: Vec<Vec<f64>> = scales
            .iter()
            .map(|&k| (0..b * classes * (1 << (2 * k))).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        let tensors: Vec<Tensor> =
            logits.iter().zip(&scales).map(|(v, &k)| f64_tensor(v, &[b, classes, 1 << k, 1 << k])).collect();
        let got = pretrain_loss(&tensors, &labels, &scales, &lambdas).and_then(|t| scalar(&t)).map_err(err)?;
        worst_pre = worst_pre.max((got - pretrain_oracle(&logits, classes, &labels, &scales, &lambdas)).abs());
    }
    let uniform: Vec<Tensor> = [3u32, 4, 5]
        .iter()
        .map(|&k| Tensor::zeros((2, 10, 1 << k, 1 << k), DType::F64, &Device::Cpu).unwrap())
        .collect();
    let u = pretrain_loss(&uniform, &[3, 7], &[3, 4, 5], &PRETRAIN_LAMBDAS).and_then(|t| scalar(&t)).map_err(err)?;
    let expected = 0.0225 * 10f64.ln();
    check(
        worst_joint <= ORACLE_TOL && worst_pre <= ORACLE_TOL && (u - expected).abs() <= ORACLE_TOL,
        format!(
            "max |Δ| joint {worst_joint:.1e}, pretrain {worst_pre:.1e}; uniform C=10 {u:.12} vs 0.0225·ln10 {expected:.12}"
        ),
    )
}

/// Max elementwise relative error between analytic and central-difference gradients.
fn fd_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + FD_STEP;
        let up = f(&xp);
        xp[i] = x[i] - FD_STEP;
        let down = f(&xp);
        xp[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

fn grad_of(var: &Var, loss: &Tensor) -> Vec<f64> {
    let grads = loss.backward().unwrap();
    grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut errors = Vec::new();

    // joint loss: scores (2,) and masks (2, 4, 4) packed into one vector
    let (b, hw) = (2usize, 16usize);
    let y = f64_tensor(&[1.0, 0.0], &[b]);
    let m: Vec<f64> = (0..b * hw).map(|_| f64::from(rng.random_bool(0.5))).collect();
    let m = f64_tensor(&m, &[b, 4, 4]);
    let x0: Vec<f64> = (0..b + b * hw).map(|_| rng.random_range(0.05..0.95)).collect();
    let w = LossWeights { gamma: 0.9, alpha: 1.3, beta: 0.7 };
    for form in [DiceForm::Standard, DiceForm::PerPixel] {
        let eval = |x: &Tensor| {
            let p = x.narrow(0, 0, b).unwrap();
            let mh = x.narrow(0, b, b * hw).unwrap().reshape((b, 4, 4)).unwrap();
            joint_loss(&p, &y, &mh, &m, w, form).unwrap().total
        };
        let var = Var::from_tensor(&f64_tensor(&x0, &[x0.len()])).unwrap();
        let analytic = grad_of(&var, &eval(var.as_tensor()));
        let f = |x: &[f64]| scalar(&eval(&f64_tensor(x, &[x.len()]))).unwrap();
        errors.push((format!("joint_loss/{form:?}"), fd_error(&f, &x0, &analytic)));
    }

    // pretraining loss on 1×1, 2×2 and 4×4 grids
    let (classes, scales, labels) = (4usize, [0u32, 1, 2], [1usize, 3]);
    let sizes: Vec<usize> = scales.iter().map(|&k| 2 * classes << (2 * k)).collect();
    let x0: Vec<f64> = (0..sizes.iter().sum()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let eval = |x: &Tensor| {
        let mut off = 0;
        let grids: Vec<Tensor> = scales
            .iter()
            .zip(&sizes)
            .map(|(&k, &n)| {
                let g = x.narrow(0, off, n).unwrap().reshape((2, classes, 1 << k, 1 << k)).unwrap();
                off += n;
                g
            })
            .collect();
        pretrain_loss(&grids, &labels, &scales, &PRETRAIN_LAMBDAS).unwrap()
    };
    let var = Var::from_tensor(&f64_tensor(&x0, &[x0.len()])).unwrap();
    let analytic = grad_of(&var, &eval(var.as_tensor()));
    let f = |x: &[f64]| scalar(&eval(&f64_tensor(x, &[x.len()]))).unwrap();
    errors.push(("pretrain_loss".into(), fd_error(&f, &x0, &analytic)));

    // connector: (G, ψ) at 2×2 and ψ at 4×4
    let d = 3usize;
    let r: Vec<f64> = (0..d * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = f64_tensor(&r, &[1, d, 4, 4]);
    let x0: Vec<f64> = (0..d * (4 + 4 + 16)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eval = |x: &Tensor| {
        let g = x.narrow(0, 0, d * 4).unwrap().reshape((1, d, 2, 2)).unwrap();
        let psi_prev = x.narrow(0, d * 4, d * 4).unwrap().reshape((1, d, 2, 2)).unwrap();
        let psi = x.narrow(0, d * 8, d * 16).unwrap().reshape((1, d, 4, 4)).unwrap();
        let out = connect_scales(&g, &psi_prev, &psi).unwrap();
        (out * &r).unwrap().sum_all().unwrap()
    };
    let var = Var::from_tensor(&f64_tensor(&x0, &[x0.len()])).unwrap();
    let analytic = grad_of(&var, &eval(var.as_tensor()));
    let f = |x: &[f64]| scalar(&eval(&f64_tensor(x, &[x.len()]))).unwrap();
    errors.push(("connect_scales".into(), fd_error(&f, &x0, &analytic)));

    // one encoder block over a 4×4 token grid: input and every parameter
    let dim = 8usize;
    let mut store = ParamStore::new(DType::F64, SEED);
    let block = EncoderBlock::new(&mut store.root().sub("enc"), dim, 2, 2).map_err(err)?;
    let r: Vec<f64> = (0..16 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = f64_tensor(&r, &[1, 16, dim]);
    let z0: Vec<f64> = (0..16 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eval = |z: &Tensor| (block.forward(z).unwrap() * &r).unwrap().sum_all().unwrap();
    let var = Var::from_tensor(&f64_tensor(&z0, &[1, 16, dim])).unwrap();
    let loss = eval(var.as_tensor());
    let grads = loss.backward().map_err(err)?;
    let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let f = |z: &[f64]| scalar(&eval(&f64_tensor(z, &[1, 16, dim]))).unwrap();
    let mut enc_worst = fd_error(&f, &z0, &analytic);
    let z = f64_tensor(&z0, &[1, 16, dim]);
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        let p = store.get(name).unwrap().as_tensor().copy().map_err(err)?;
        let shape = p.dims().to_vec();
        let p0 = p.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let analytic = match grads.get(store.get(name).unwrap().as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; p0.len()],
        };
        let f = |v: &[f64]| {
            store.set(name, &f64_tensor(v, &shape)).unwrap();
            scalar(&eval(&z)).unwrap()
        };
        enc_worst = enc_worst.max(fd_error(&f, &p0, &analytic));
        store.set(name, &p).map_err(err)?;
    }
    errors.push((format!("encoder block ({} tensors + input)", names.len()), enc_worst));

    let worst = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(worst < FD_REL_TOL, format!("max rel. error {} (tol {FD_REL_TOL:.0e})", detail.join(", ")))
}

fn criterion_schedules() -> Outcome {
    let init = LossWeights::default();
    let mut bad = Vec::new();
    for e in 0..=5i64 {
        let w = step_weights(init, e).map_err(err)?;
        let expected = (0.95f64.powi(e as i32), 0.80f64.powi(e as i32), 1.18f64.powi(e as i32));
        if (w.gamma, w.alpha, w.beta) != expected {
            bad.push(format!("weights@{e}"));
        }
    }
    let w1 = step_weights(init, 1).map_err(err)?;
    if (w1.gamma, w1.alpha, w1.beta) != (0.95, 0.80, 1.18) {
        bad.push("epoch-1 weights".into());
    }
    for (name, s, (lr0, decay, every)) in [
        ("pretrain", OptimizerSchedule::pretrain(), (1e-3, 0.65f64, 2usize)),
        ("full", OptimizerSchedule::full(), (6e-4, 0.85f64, 2usize)),
    ] {
        for e in 0..=10 {
            if s.lr(e) != lr0 * decay.powi((e / every) as i32) {
                bad.push(format!("{name} lr@{e}"));
            }
        }
    }
    check(bad.is_empty(), if bad.is_empty() { "weights 0..5, lr 0..10 exact".into() } else { format!("mismatch: {bad:?}") })
}

fn criterion_pretraining(log: &mut ConstraintLog) -> Outcome {
    let cfg = RunConfig::desk(SEED);
    let train = make_camera_dataset(4, 32, (64, 64), SEED).map_err(err)?;
    let held = make_camera_dataset(4, 32, (64, 64), SEED + 1).map_err(err)?;
    let start = Instant::now();
    let hooks = Hooks {
        on_step: Some(Box::new(|_: &StepInfo, c: &ConstrainedConv| {
            log.observe(c);
            Ok(())
        })),
        on_epoch: None,
    };
    let outcome = pretrain(&cfg.model.spatial, &train, &cfg.pretrain, SEED, hooks).map_err(err)?;
    let elapsed = start.elapsed();
    let heldout = pretrain_accuracy(&outcome.model, &held, cfg.pretrain.batch_size, DType::F32).map_err(err)?;
    let trained = outcome.curves.last().map(|c| c.accuracy.clone()).unwrap_or_default();
    let min = heldout.iter().copied().fold(f64::INFINITY, f64::min);
    check(
        elapsed <= PRETRAIN_BUDGET && min > PRETRAIN_MIN_ACCURACY,
        format!(
            "held-out per-cell accuracy k=3,4,5 {:?} (train {:?}), {:.0}s of {}s",
            heldout.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            trained.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            elapsed.as_secs_f64(),
            PRETRAIN_BUDGET.as_secs()
        ),
    )
}

/// Trains the desk model on 16 authentic + 16 manipulated clips and scores
/// the training set.
fn overfit(
    cfg: &RunConfig,
    kinds: Vec<ManipulationTag>,
    log: Option<&mut ConstraintLog>,
) -> Result<(Metrics, Checkpoint, Duration), String> {
    let split = ClipSetConfig { authentic: 16, manipulated: 16, kinds, ..ClipSetConfig::default() };
    let clips = make_clip_set(&split, SEED).map_err(err)?;
    let set = pipeline::frame_set(cfg, &clips).map_err(err)?;
    let mut store = ParamStore::new(DType::F32, SEED);
    let model = Model::new(&mut store, &cfg.model, cfg.ablation.clone()).map_err(err)?;
    let start = Instant::now();
    let hooks = Hooks {
        on_step: log.map(|l| {
            Box::new(move |_: &StepInfo, c: &ConstrainedConv| {
                l.observe(c);
                Ok(())
            }) as Box<dyn FnMut(&StepInfo, &ConstrainedConv) -> mvf_core::Result<()>>
        }),
        on_epoch: None,
    };
    let outcome =
        train_full(&model, &mut store, &set, &set, &cfg.train, SEED, cfg.to_json(), None, hooks).map_err(err)?;
    let elapsed = start.elapsed();
    let report = evaluate(&model, &set, &EvalOptions::default(), cfg.to_json()).map_err(err)?;
    Ok((report.metrics, outcome.last, elapsed))
}

fn criterion_overfit(ckpt_path: &Path, log: &mut ConstraintLog) -> Outcome {
    let cfg = RunConfig::desk(SEED);
    let (metrics, last, elapsed) = overfit(&cfg, ClipSetConfig::default().kinds, Some(log))?;
    last.save(ckpt_path).map_err(err)?;
    let map = metrics.pooled_ap.unwrap_or(0.0);
    let f1 = metrics.mean_f1.unwrap_or(0.0);
    check(
        elapsed <= OVERFIT_BUDGET && map >= OVERFIT_MIN_MAP && f1 >= OVERFIT_MIN_F1,
        format!("train mAP {map:.4}, mean F1 {f1:.4}, {:.0}s of {}s", elapsed.as_secs_f64(), OVERFIT_BUDGET.as_secs()),
    )
}

fn criterion_ablation() -> Outcome {
    let mut cfg = RunConfig::desk(SEED);
    cfg.train.epochs = ABLATION_EPOCHS;
    let kinds = vec![ManipulationTag::TemporalInpaint];
    let (full, _, _) = overfit(&cfg, kinds.clone(), None)?;
    cfg.ablation = Ablation::new([AblationFlag::NoOptflowResidual, AblationFlag::NoTemporalResidual]).map_err(err)?;
    let (ablated, _, _) = overfit(&cfg, kinds, None)?;
    let (a, b) = (full.mean_f1.unwrap_or(0.0), ablated.mean_f1.unwrap_or(0.0));
    check(b < a, format!("temporal-inpaint train F1: full {a:.4}, without flow/temporal residuals {b:.4}"))
}

fn criterion_resolution(ckpt: &Path, dir: &Path) -> Outcome {
    let mut notes = Vec::new();
    for (h, w) in [(256usize, 256usize), (320, 448)] {
        let split = ClipSetConfig { authentic: 1, manipulated: 0, frames: 5, height: h, width: w, ..ClipSetConfig::default() };
        let clip = make_clip_set(&split, SEED).map_err(err)?.remove(0);
        let clip_dir = dir.join(format!("clip_{h}x{w}"));
        save_clip(&clip, &clip_dir).map_err(err)?;
        let out = dir.join(format!("infer_{h}x{w}"));
        let report = pipeline::run_infer(ckpt, &clip_dir, 1, &out).map_err(|e| format!("{h}x{w}: {e}"))?;
        let mask = read_mask_png(&out.join(&report.frames[0].mask)).map_err(err)?;
        if mask.dim() != (h, w) || report.frames.len() != 5 {
            return Err(format!("{h}x{w}: mask {:?}, {} frames", mask.dim(), report.frames.len()));
        }
        notes.push(format!("{h}x{w} ok"));
    }
    let cfg = RunConfig::with_seed(SEED).model;
    let mut store = ParamStore::new(DType::F32, SEED);
    let standard = Model::new(&mut store, &cfg, Ablation::new([AblationFlag::StandardTransformer]).map_err(err)?).map_err(err)?;
    let window = |h: usize, w: usize| {
        let f = Tensor::rand(0f32, 1.0, (1, 3, h, w), &Device::Cpu).unwrap();
        let flow = Tensor::zeros((1, 4, h / 8, w / 8), DType::F32, &Device::Cpu).unwrap();
        WindowBatch { prev: f.clone(), cur: f.clone(), next: f, flow }
    };
    let native = standard.forward(&window(256, 256)).is_ok();
    let rejected = standard.forward(&window(320, 448)).is_err();
    notes.push(format!("standard transformer: 256x256 {}, 320x448 {}", ok_word(native), if rejected { "rejected" } else { "accepted" }));
    check(native && rejected, notes.join("; "))
}

fn ok_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "failed"
    }
}

fn brute_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let mut prev_tp = 0usize;
    let mut acc = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count();
        let predicted = scores.iter().filter(|&&s| s >= t).count();
        acc += ((tp - prev_tp) * tp) as f64 / predicted as f64;
        prev_tp = tp;
    }
    acc / positives as f64
}

fn f1_oracle(pred: &[f32], gt: &[u8]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= 0.5, g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Returns the line outcome and whether only the worked AP example failed.
fn criterion_metrics() -> (Outcome, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut ap_cases = 0usize;
    let mut ap_bad = 0usize;
    for n in 2..=10 {
        for _ in 0..200 {
            let labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
            if labels.iter().all(|&l| l == labels[0]) {
                continue;
            }
            // a coarse score grid forces ties
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5u8)) / 4.0).collect();
            ap_cases += 1;
            if average_precision(&scores, &labels).ok() != Some(brute_ap(&scores, &labels)) {
                ap_bad += 1;
            }
        }
    }
    let mut f1_bad = 0usize;
    for _ in 0..F1_PAIRS {
        let pred: Vec<f32> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
        let gt: Vec<u8> = (0..256).map(|_| rng.random_bool(0.3) as u8).collect();
        if pixel_f1(&pred, &gt, 0.5).ok() != Some(f1_oracle(&pred, &gt)) {
            f1_bad += 1;
        }
    }
    let example = average_precision(&[0.9, 0.2, 0.8], &[1, 0, 1]).unwrap_or(f64::NAN);
    let example_ok = (example - AP_EXAMPLE).abs() <= AP_EXAMPLE_TOL;
    let oracles_ok = ap_bad == 0 && f1_bad == 0;
    let detail = format!(
        "AP vs brute force {}/{ap_cases} exact, F1 vs confusion matrix {}/{F1_PAIRS} exact, \
         worked example [0.9,0.2,0.8]/[1,0,1] = {example:.4} (expected {AP_EXAMPLE})",
        ap_cases - ap_bad,
        F1_PAIRS - f1_bad
    );
    (check(oracles_ok && example_ok, detail), oracles_ok && !example_ok)
}

fn tiny_pipeline_config() -> RunConfig {
    let mut cfg = RunConfig::desk(SEED);
    for split in [&mut cfg.data.train, &mut cfg.data.val, &mut cfg.data.test] {
        split.authentic = 2;
        split.manipulated = 2;
        split.frames = 5;
    }
    cfg.data.camera_models = 2;
    cfg.data.camera_frames_per_model = 4;
    cfg.pretrain.epochs = 2;
    cfg.train.epochs = 2;
    cfg.workers = 1;
    cfg
}

fn pipeline_run(cfg: &RunConfig, root: &Path) -> Result<(mvf_core::evaluation::EvalReport, Vec<u8>), String> {
    let data = root.join("data");
    pipeline::gen_data(cfg, &data).map_err(err)?;
    pipeline::run_pretrain(cfg, &data, &root.join("pretrain")).map_err(err)?;
    pipeline::run_train(cfg, &data, Some(&root.join("pretrain/pretrain.ckpt")), None, &root.join("train")).map_err(err)?;
    let ckpt = root.join("train/last.ckpt");
    let report = pipeline::run_eval(&ckpt, &data.join("test"), &cfg.eval, cfg.workers, &root.join("eval")).map_err(err)?;
    Ok((report, std::fs::read(ckpt).map_err(err)?))
}

fn criterion_determinism(dir: &Path) -> Outcome {
    let cfg = tiny_pipeline_config();
    let (a, ca) = pipeline_run(&cfg, &dir.join("a"))?;
    let (b, cb) = pipeline_run(&cfg, &dir.join("b"))?;
    let same = a.metrics == b.metrics && a.records == b.records && ca == cb;
    check(
        same,
        format!(
            "metrics {}, per-frame records {}, checkpoint bytes {} (pooled AP {:?})",
            if a.metrics == b.metrics { "identical" } else { "differ" },
            if a.records == b.records { "identical" } else { "differ" },
            if ca == cb { "identical" } else { "differ" },
            a.metrics.pooled_ap
        ),
    )
}

fn main() {
    // ACCEPTANCE_QUICK=1 skips the training runs of criteria 6 to 9
    let quick = std::env::var_os("ACCEPTANCE_QUICK").is_some();
    let dir = tempfile::tempdir().expect("temp dir");
    let mut report = Report { failures: Vec::new() };
    let mut constraint = random_projection_steps();
    let random_steps = constraint.steps;

    report.line(2, "zero-feature identities", criterion_identities());
    report.line(3, "loss oracles", criterion_loss_oracles());
    report.line(4, "gradient checks", criterion_gradients());
    report.line(5, "schedules", criterion_schedules());

    let ckpt = dir.path().join("overfit.ckpt");
    let (mut pre_steps, mut full_steps) = (0, 0);
    if quick {
        for (id, name) in [(6, "toy pretraining"), (7, "overfit sanity"), (8, "ablation direction"), (9, "resolution flexibility")] {
            println!("criterion {id:>2} {name:<24} SKIP  ACCEPTANCE_QUICK set");
        }
    } else {
        let before = constraint.steps;
        report.line(6, "toy pretraining", criterion_pretraining(&mut constraint));
        pre_steps = constraint.steps - before;
        let before = constraint.steps;
        report.line(7, "overfit sanity", criterion_overfit(&ckpt, &mut constraint));
        full_steps = constraint.steps - before;
        report.line(8, "ablation direction", criterion_ablation());
        report.line(9, "resolution flexibility", criterion_resolution(&ckpt, dir.path()));
    }
    let stages_seen = quick || (pre_steps > 0 && full_steps > 0);
    report.line(
        1,
        "constrained projection",
        check(
            constraint.ok() && random_steps == PROJECTION_STEPS && stages_seen,
            format!(
                "{random_steps} random steps + {pre_steps} pretraining + {full_steps} full-training steps; \
                 max |centre| {:.1e}, max |sum−1| {:.1e} (tol {SUM_TOL:.0e})",
                constraint.centre, constraint.sum_dev
            ),
        ),
    );
    let (metrics, only_example) = criterion_metrics();
    report.line(10, "metric oracles", metrics);
    report.line(11, "determinism", criterion_determinism(dir.path()));

    // the worked AP example is inconsistent with step-wise AP; see README
    let blocking: Vec<_> =
        report.failures.iter().filter(|f| !(only_example && f.starts_with("10 "))).cloned().collect();
    if !blocking.is_empty() {
        eprintln!("failed criteria: {blocking:?}");
        std::process::exit(1);
    }
}
