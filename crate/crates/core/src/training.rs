//! Two-stage training. Stage 1 fits the pointmap network to ground-truth
//! geometry and masks; stage 2 freezes it and fits the Gaussian regressor
//! through the splatting renderer.
//!
//! Color transfer indices are treated as constants: no gradient flows through
//! the nearest-neighbor choice or into the frozen pointmap network.

use std::io::Write;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Error, Result};
use crate::gaussian::{activate_backward, GaussianGrads, GaussianSet, RAW_CHANNELS};
use crate::gaussian_regress::{stack, unstack, GaussianNet};
use crate::geometry::{unproject_depth, CameraModel, CanonicalView, PointMap};
use crate::image::{Grid, Rgb, RgbImage};
use crate::metrics::ssim_with_grad;
use crate::nn::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::nn::{Graph, ParamGrads, Tensor};
use crate::pipeline::{Prior, Reconstructor};
use crate::pointmap_net::{stage1_step, PointMapNet};
use crate::splat::rasterize;
use crate::synth::{SubjectViews, ViewTag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub iterations: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            iterations: 2000,
            lr: 1e-4,
            final_lr: 1e-7,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        validate_optim(self.iterations, self.lr, self.final_lr, self.weight_decay)
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            lr_max: self.lr,
            lr_min: self.final_lr,
            total: self.iterations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    /// Weight of the L1 term; `1 − beta` weights the SSIM term.
    pub beta: f64,
    pub lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Stored novel views rendered per step.
    pub novel_views_per_step: usize,
    /// Probability of also supervising each canonical view.
    pub canonical_prob: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            beta: 0.8,
            lr: 1e-4,
            final_lr: 1e-7,
            weight_decay: 0.05,
            iterations: 2000,
            novel_views_per_step: 2,
            canonical_prob: 0.5,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        validate_optim(self.iterations, self.lr, self.final_lr, self.weight_decay)?;
        if !(0.0..=1.0).contains(&self.beta) || !(0.0..=1.0).contains(&self.canonical_prob) {
            return Err(Error::InvalidConfig(format!(
                "beta {} and canonical_prob {} must lie in [0, 1]",
                self.beta, self.canonical_prob
            )));
        }
        if self.novel_views_per_step == 0 && self.canonical_prob == 0.0 {
            return Err(Error::InvalidConfig("stage 2 needs novel or canonical supervision".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            lr_max: self.lr,
            lr_min: self.final_lr,
            total: self.iterations,
        }
    }
}

fn validate_optim(iterations: usize, lr: f64, final_lr: f64, wd: f64) -> Result<()> {
    if iterations == 0 {
        return Err(Error::InvalidConfig("iterations must be at least 1".into()));
    }
    if !(lr > 0.0 && lr.is_finite() && final_lr >= 0.0 && final_lr <= lr && wd >= 0.0 && wd.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "need 0 <= final_lr <= lr and weight_decay >= 0, got lr {lr}, final_lr {final_lr}, weight_decay {wd}"
        )));
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub iteration: usize,
    pub loss: f64,
    /// Regression and confidence terms (stage 1) or L1 and SSIM (stage 2).
    pub terms: [f64; 2],
    pub lr: f64,
    pub elapsed_s: f64,
}

fn emit(log: &mut Option<&mut dyn Write>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
    }
    Ok(())
}

fn guard(iteration: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration, loss })
    }
}

/// Prepared inputs and targets for one subject.
#[derive(Clone, Debug)]
pub struct Stage1Sample {
    pub front: Tensor,
    pub back: Tensor,
    /// Ground-truth points in the front camera frame, front/back/left/right.
    pub gt: [PointMap; 4],
}

/// Unprojects each canonical depth map and re-expresses it in the front camera frame.
pub fn ground_truth_pointmaps(subject: &SubjectViews) -> Result<[PointMap; 4]> {
    let front_cam = &subject.canonical(CanonicalView::Front).camera;
    let maps = CanonicalView::ALL.map(|v| {
        let b = subject.canonical(v);
        unproject_depth(&b.depth, &b.mask, &b.camera).map(|m| m.to_camera_frame(front_cam))
    });
    let [f, b, l, r] = maps;
    Ok([f?, b?, l?, r?])
}

pub fn stage1_sample(net: &PointMapNet, subject: &SubjectViews) -> Result<Stage1Sample> {
    let f = subject.canonical(CanonicalView::Front);
    let b = subject.canonical(CanonicalView::Back);
    Ok(Stage1Sample {
        front: net.prepare_image(&f.image, &f.mask)?,
        back: net.prepare_image(&b.image, &b.mask)?,
        gt: ground_truth_pointmaps(subject)?,
    })
}

/// Batch-size-1 AdamW on the stage-1 objective, one random subject per step.
/// Every iteration is logged.
pub fn train_stage1(net: &mut PointMapNet, samples: &[Stage1Sample], cfg: &Stage1Config, mut log: Option<&mut dyn Write>) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    ensure_input!(!samples.is_empty(), "stage 1 needs at least one subject");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = net.store().ids().collect();
    let mut opt = AdamW::new(
        net.store(),
        ids,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let schedule = cfg.schedule();
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let s = &samples[rng.random_range(0..samples.len())];
        let (loss, grads) = stage1_step(net, &s.front, &s.back, &s.gt)?;
        guard(it, loss.total)?;
        let lr = schedule.lr(it);
        opt.step(net.store_mut(), &grads, lr);
        let rec = LogRecord {
            stage: 1,
            iteration: it,
            loss: loss.total,
            terms: [loss.reg, loss.conf],
            lr,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        emit(&mut log, &rec)?;
        history.push(rec);
    }
    Ok(history)
}

/// Components of the photometric objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Loss {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
}

/// `beta·L1 + (1 − beta)·(1 − SSIM)` with L1 the mean absolute error over all
/// pixels and channels.
pub fn stage2_loss(render: &RgbImage, gt: &RgbImage, beta: f64) -> Result<Stage2Loss> {
    Ok(stage2_loss_with_grad(render, gt, beta)?.0)
}

/// The loss and its gradient with respect to `render`.
pub fn stage2_loss_with_grad(render: &RgbImage, gt: &RgbImage, beta: f64) -> Result<(Stage2Loss, RgbImage)> {
    ensure_input!((0.0..=1.0).contains(&beta), "beta {beta} outside [0, 1]");
    ensure_input!(render.same_dims(gt), "render {:?} and target {:?} differ in size", render.dims(), gt.dims());
    let n = (3 * render.len()) as f64;
    let (ssim, dssim) = ssim_with_grad(render, gt)?;
    let mut l1 = 0.0;
    let grad = Grid::from_fn(render.width(), render.height(), |r, c| {
        let (a, b, ds) = (render.get(r, c), gt.get(r, c), dssim.get(r, c));
        std::array::from_fn(|k| {
            let d = a[k] - b[k];
            l1 += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            beta * sign / n - (1.0 - beta) * ds[k]
        })
    });
    let l1 = l1 / n;
    Ok((
        Stage2Loss {
            total: beta * l1 + (1.0 - beta) * (1.0 - ssim),
            l1,
            ssim,
        },
        grad,
    ))
}

/// A supervision view expressed in the front camera frame.
#[derive(Clone, Debug)]
pub struct TargetView {
    pub camera: CameraModel,
    pub image: RgbImage,
    pub canonical: bool,
}

/// Frozen stage-1 products and supervision for one subject.
#[derive(Clone, Debug)]
pub struct Stage2Sample {
    pub prior: Prior,
    /// `[N, 6, H, W]` inputs of the prior's active views.
    pub inputs: Tensor,
    pub targets: Vec<TargetView>,
}

/// Runs the frozen pointmap network once per subject. The network is fixed
/// during stage 2, so its outputs are identical at every step.
pub fn stage2_sample(rec: &Reconstructor, subject: &SubjectViews) -> Result<Stage2Sample> {
    let f = subject.canonical(CanonicalView::Front);
    let b = subject.canonical(CanonicalView::Back);
    let prior = rec.prior(&f.image, &f.mask, &b.image, &b.mask)?;
    let inputs = stack(&prior.network_inputs()?)?;
    let targets = subject
        .bundles
        .iter()
        .map(|v| TargetView {
            camera: v.camera.relative_to(&f.camera),
            image: v.image.clone(),
            canonical: matches!(v.view_tag, ViewTag::Canonical(_)),
        })
        .collect();
    Ok(Stage2Sample { prior, inputs, targets })
}

/// Forward, loss and backward for the given target views. The loss is the
/// mean over targets.
pub fn stage2_step(net: &GaussianNet, sample: &Stage2Sample, targets: &[usize], beta: f64, background: Rgb) -> Result<(Stage2Loss, ParamGrads)> {
    ensure_input!(!targets.is_empty(), "no target views selected");
    let mut g = Graph::new(net.store());
    let x = g.constant(sample.inputs.clone());
    let y = net.forward(&mut g, x);
    let raws = unstack(g.value(y))?;
    let sets = sample.prior.activate_all(&raws)?;
    let set = GaussianSet::assemble(&sets);
    let mut total = Stage2Loss {
        total: 0.0,
        l1: 0.0,
        ssim: 0.0,
    };
    let mut grads = GaussianGrads::zeros(set.len());
    let w = 1.0 / targets.len() as f64;
    for &t in targets {
        let tv = &sample.targets[t];
        let ras = rasterize(&set, &tv.camera, background)?;
        let (loss, mut up) = stage2_loss_with_grad(&ras.output().image, &tv.image, beta)?;
        up.as_mut_slice().iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v *= w));
        grads.add_assign(&ras.backward(&set, &up)?);
        total.total += w * loss.total;
        total.l1 += w * loss.l1;
        total.ssim += w * loss.ssim;
    }
    let views = sample.prior.active_views();
    let mut seed = Vec::with_capacity(g.value(y).numel());
    let mut offset = 0;
    for ((v, raw), part) in views.iter().zip(&raws).zip(&sets) {
        let i = v.index();
        let gv = grads.slice(offset..offset + part.len());
        offset += part.len();
        let d = activate_backward(raw, &sample.prior.maps[i], &sample.prior.images[i], &sample.prior.caps, &gv)?;
        debug_assert_eq!(d.shape()[0], RAW_CHANNELS);
        seed.extend_from_slice(d.data());
    }
    let pg = g.backward(&[(y, &seed)]).param_grads();
    Ok((total, pg))
}

/// Chooses the supervision views of one step.
fn pick_targets(rng: &mut ChaCha8Rng, sample: &Stage2Sample, cfg: &Stage2Config) -> Vec<usize> {
    let novel: Vec<usize> = (0..sample.targets.len()).filter(|&i| !sample.targets[i].canonical).collect();
    let canon: Vec<usize> = (0..sample.targets.len()).filter(|&i| sample.targets[i].canonical).collect();
    let k = cfg.novel_views_per_step.min(novel.len());
    let mut out: Vec<usize> = index::sample(rng, novel.len(), k).into_iter().map(|j| novel[j]).collect();
    for &c in &canon {
        if rng.random_bool(cfg.canonical_prob) {
            out.push(c);
        }
    }
    if out.is_empty() {
        let pool = if novel.is_empty() { &canon } else { &novel };
        out.push(pool[rng.random_range(0..pool.len())]);
    }
    out
}

/// AdamW on the regressor only; the pointmap network never changes.
pub fn train_stage2(net: &mut GaussianNet, samples: &[Stage2Sample], cfg: &Stage2Config, background: Rgb, mut log: Option<&mut dyn Write>) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    ensure_input!(!samples.is_empty(), "stage 2 needs at least one subject");
    ensure_input!(samples.iter().all(|s| !s.targets.is_empty()), "every subject needs supervision views");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        net.store(),
        net.param_ids(),
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let schedule = cfg.schedule();
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let s = &samples[rng.random_range(0..samples.len())];
        let targets = pick_targets(&mut rng, s, cfg);
        let (loss, grads) = stage2_step(net, s, &targets, cfg.beta, background)?;
        guard(it, loss.total)?;
        let lr = schedule.lr(it);
        opt.step(net.store_mut(), &grads, lr);
        let rec = LogRecord {
            stage: 2,
            iteration: it,
            loss: loss.total,
            terms: [loss.l1, loss.ssim],
            lr,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        emit(&mut log, &rec)?;
        history.push(rec);
    }
    Ok(history)
}
