//! Optimization loop: sample preparation, loss assembly, AdamW with
//! clipping, teacher maintenance, metrics and checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::distillation::{cls_terms, StudentView, TargetSettings, TeacherOutput, TeacherState, KOLEO_EPS};
use crate::error::{Error, Result};
use crate::evaluation::entropy_diagnostics;
use crate::geometry::{augment, multi_crop, normalize_unit_sphere, PointCloud, ViewSet};
use crate::masking::{build_multimask, masked_indices, visible_indices, MaskSet};
use crate::network::{self, Head, ModelConfig, ViewTensors};
use crate::params::{Gradients, Parameters};
use crate::tensor::{Real, Tensor};
use crate::tensorfile::TensorTable;

pub const CHECKPOINT_FORMAT: u64 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.adsd";
const CLIP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub koleo_weight: f64,
    /// Adds a smooth-L1 regression of predicted onto teacher patch features.
    pub regression: bool,
    pub regression_beta: f64,
    /// Random z rotation and anisotropic scaling before cropping.
    pub augment: bool,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Reserved; only 1 is supported.
    pub grad_accumulation: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 300,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            grad_clip: 10.0,
            koleo_weight: 0.01,
            regression: false,
            regression_beta: 2.0,
            augment: true,
            seed: 0,
            checkpoint_every: 10,
            grad_accumulation: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            errs.push("epochs must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            errs.push("weight_decay must be non-negative".into());
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            errs.push("betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            errs.push("adam_eps must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            errs.push("grad_clip must be positive".into());
        }
        if !(self.koleo_weight >= 0.0) {
            errs.push("koleo_weight must be non-negative".into());
        }
        if !(self.regression_beta > 0.0) {
            errs.push("regression_beta must be positive".into());
        }
        if self.grad_accumulation != 1 {
            errs.push("grad_accumulation other than 1 is not supported".into());
        }
        errs
    }
}

/// Crops and masks of one training cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub views: ViewSet,
    /// One mask set per global crop; empty when masking is off.
    pub masks: Vec<MaskSet>,
}

/// Augment, normalize, crop, patchify and mask one cloud.
pub fn prepare_sample<R: Rng + ?Sized>(cloud: &PointCloud, cfg: &RunConfig, rng: &mut R) -> Result<Sample> {
    let cloud = if cfg.train.augment {
        augment(cloud, rng)
    } else {
        cloud.clone()
    };
    let cloud = normalize_unit_sphere(&cloud);
    let views = multi_crop(&cloud, &cfg.crops.multi_crop(), rng)?;
    let masks = if cfg.masking.enabled() {
        let params = cfg.masking.params();
        views
            .globals
            .iter()
            .map(|g| build_multimask(&g.centers, &params, rng))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(Sample { views, masks })
}

/// A batch of prepared samples stacked for the network.
#[derive(Debug, Clone)]
pub struct BatchViews<T> {
    pub batch: usize,
    pub n_global: usize,
    pub n_local: usize,
    /// Global view `v = b * n_global + g`.
    pub globals: ViewTensors<T>,
    /// Local view `b * n_local + l`.
    pub locals: Option<ViewTensors<T>>,
    /// `masks[v][k]`; empty when unmasked.
    pub masks: Vec<Vec<Vec<bool>>>,
}

impl<T: Real> BatchViews<T> {
    pub fn new(samples: &[Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (n_global, n_local) = (first.views.globals.len(), first.views.locals.len());
        let masked = !first.masks.is_empty();
        for s in samples {
            if s.views.globals.len() != n_global || s.views.locals.len() != n_local || s.masks.is_empty() == masked {
                return Err(Error::ShapeMismatch("samples in a batch must share crop and mask layout".into()));
            }
        }
        let globals: Vec<_> = samples.iter().flat_map(|s| &s.views.globals).collect();
        let locals: Vec<_> = samples.iter().flat_map(|s| &s.views.locals).collect();
        let masks: Vec<Vec<Vec<bool>>> = samples
            .iter()
            .flat_map(|s| s.masks.iter().map(|m| m.masks.clone()))
            .collect();
        if let Some(k) = masks.first().map(Vec::len) {
            if masks.iter().any(|m| m.len() != k) {
                return Err(Error::ShapeMismatch("every global view needs the same number of masks".into()));
            }
        }
        Ok(Self {
            batch: samples.len(),
            n_global,
            n_local,
            globals: network::stack_views(&globals)?,
            locals: if locals.is_empty() {
                None
            } else {
                Some(network::stack_views(&locals)?)
            },
            masks,
        })
    }

    pub fn masked(&self) -> bool {
        !self.masks.is_empty()
    }

    /// Mask variants per global view (1 when unmasked).
    pub fn n_variants(&self) -> usize {
        self.masks.first().map_or(1, Vec::len)
    }

    /// The same views keeping only mask `k` of every global view.
    pub fn with_single_mask(&self, k: usize) -> Self {
        let mut out = self.clone();
        out.masks = self.masks.iter().map(|m| vec![m[k].clone()]).collect();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub tau_student: f64,
    pub koleo_weight: f64,
    /// Smooth-L1 threshold when the regression term is on.
    pub regression_beta: Option<f64>,
}

/// Loss nodes of one student forward pass.
pub struct StudentLosses<T> {
    pub total: Var,
    pub cls: Var,
    pub mpm: Option<Var>,
    pub koleo: Option<Var>,
    pub regression: Option<Var>,
    koleo_weight: f64,
    /// Student logits paired row by row with teacher targets.
    pairs: Vec<(Var, Tensor<T>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub mpm: f64,
    pub koleo: f64,
    pub regression: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [self.total, self.cls, self.mpm, self.koleo, self.regression]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl<T: Real> StudentLosses<T> {
    pub fn values(&self, g: &Graph<T>) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
        LossValues {
            total: get(Some(self.total)),
            cls: get(Some(self.cls)),
            mpm: get(self.mpm),
            koleo: get(self.koleo),
            regression: get(self.regression),
        }
    }

    pub fn koleo_weight(&self) -> f64 {
        self.koleo_weight
    }

    /// Smallest `CE(p_t, p_s) - H(p_t)` over every cross-entropy pair, in
    /// double precision with the teacher rows renormalized.
    pub fn min_kl(&self, g: &Graph<T>, tau_student: f64) -> f64 {
        let mut best = f64::INFINITY;
        for (logits, targets) in &self.pairs {
            let logits = g.value(*logits);
            for r in 0..logits.rows() {
                let z: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64() / tau_student).collect();
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                let p: Vec<f64> = targets.row(r).iter().map(|v| v.as_f64()).collect();
                let sum: f64 = p.iter().sum();
                let (mut ce, mut h) = (0.0, 0.0);
                for (&pi, &zi) in p.iter().zip(&z) {
                    if pi > 0.0 {
                        let pi = pi / sum;
                        ce -= pi * (zi - lse);
                        h -= pi * pi.ln();
                    }
                }
                best = best.min(ce - h);
            }
        }
        best
    }
}

/// Builds the student side of the objective against fixed teacher targets.
///
/// Masked global variants are encoded from their visible patches only
/// (sequence `k * B*G + v`), local crops in full. CLS terms follow
/// [`cls_terms`] and are averaged over the batch; masked patch prediction is
/// the mean cross-entropy over every mask and masked position, all masks of
/// a view reusing the teacher's single full-view target.
pub fn student_losses<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    batch: &BatchViews<T>,
    targets: &TeacherOutput<T>,
    opts: &LossOptions,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<StudentLosses<T>> {
    let (b, ng, nl) = (batch.batch, batch.n_global, batch.n_local);
    let bg = b * ng;
    let n = batch.globals.n_patches;
    if targets.views != bg || targets.n_patches != n {
        return Err(Error::ShapeMismatch("teacher targets do not match the batch".into()));
    }
    let nv = batch.n_variants();
    let tau = T::of(opts.tau_student);
    let (emb, pos) = network::embed_views(g, &batch.globals);

    // Global student sequences: visible patches of every mask variant.
    let (tokens, seq_len) = if batch.masked() {
        let visible: Vec<Vec<Vec<usize>>> = batch
            .masks
            .iter()
            .map(|ms| ms.iter().map(|m| visible_indices(m)).collect())
            .collect();
        let s = visible[0][0].len();
        let mut rows = Vec::with_capacity(nv * bg * s);
        for k in 0..nv {
            for (v, vis) in visible.iter().enumerate() {
                if vis[k].len() != s {
                    return Err(Error::ShapeMismatch("masks in a batch must hide equally many patches".into()));
                }
                rows.extend(vis[k].iter().map(|&i| v * n + i));
            }
        }
        let e = g.gather_rows(emb, &rows);
        let p = g.gather_rows(pos, &rows);
        (network::encode(g, cfg, e, p, nv * bg, reborrow(&mut rng)), s)
    } else {
        (network::encode(g, cfg, emb, pos, bg, reborrow(&mut rng)), n)
    };
    let global_cls = g.gather_rows(tokens, &network::cls_rows(nv * bg, seq_len));

    let mut cls_parts = vec![global_cls];
    if let Some(locals) = &batch.locals {
        let lt = network::encode_views(g, cfg, locals, reborrow(&mut rng));
        cls_parts.push(g.gather_rows(lt, &network::cls_rows(b * nl, locals.n_patches)));
    }
    let cls_all = g.concat_rows(&cls_parts);
    let cls_logits = network::project(g, cfg, Head::Cls, cls_all);

    let terms = cls_terms(ng, nl, nv, batch.masked());
    let (mut srows, mut trows, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for bi in 0..b {
        for t in &terms {
            srows.push(match t.student {
                StudentView::Global { crop, variant } => variant * bg + bi * ng + crop,
                StudentView::Local(l) => nv * bg + bi * nl + l,
            });
            trows.push(bi * ng + t.teacher);
            weights.push(T::of(t.weight / b as f64));
        }
    }
    let student_cls = g.gather_rows(cls_logits, &srows);
    let cls_targets = targets.cls_probs.gather_rows(&trows);
    let ce = g.soft_cross_entropy(student_cls, cls_targets.clone(), tau);
    let cls = g.weighted_sum(ce, weights);
    let mut pairs = vec![(student_cls, cls_targets)];
    let mut total = cls;

    let (mut mpm, mut regression) = (None, None);
    if batch.masked() {
        let hidden: Vec<usize> = batch
            .masks
            .iter()
            .flat_map(|ms| ms.iter().map(|m| masked_indices(m).len()))
            .collect();
        let e = hidden[0];
        if hidden.iter().any(|&h| h != e) {
            return Err(Error::ShapeMismatch("masks in a batch must hide equally many patches".into()));
        }
        if e > 0 {
            let context = g.gather_rows(tokens, &network::patch_rows(nv * bg, seq_len));
            let mut target_rows = Vec::with_capacity(nv * bg * e);
            for k in 0..nv {
                for (v, ms) in batch.masks.iter().enumerate() {
                    target_rows.extend(masked_indices(&ms[k]).into_iter().map(|i| v * n + i));
                }
            }
            let centers = g.constant(batch.globals.centers.gather_rows(&target_rows));
            let pred = network::predict(g, cfg, context, centers, nv * bg);
            let logits = network::project(g, cfg, Head::Patch, pred);
            let patch_targets = targets.patch_probs.gather_rows(&target_rows);
            let ce = g.soft_cross_entropy(logits, patch_targets.clone(), tau);
            let m = g.mean(ce);
            pairs.push((logits, patch_targets));
            total = g.add(total, m);
            mpm = Some(m);
            if let Some(beta) = opts.regression_beta {
                let t = g.constant(targets.patch_repr.gather_rows(&target_rows));
                let r = g.smooth_l1(pred, t, T::of(beta));
                total = g.add(total, r);
                regression = Some(r);
            }
        }
    }

    // KoLeo over the batch, per global crop, on the first variant's class token.
    let mut koleo = None;
    if opts.koleo_weight > 0.0 && b >= 2 {
        let mut sum = None;
        for gi in 0..ng {
            let rows: Vec<usize> = (0..b).map(|bi| bi * ng + gi).collect();
            let x = g.gather_rows(global_cls, &rows);
            let x = g.l2_normalize_rows(x);
            let k = g.koleo(x, T::of(KOLEO_EPS));
            sum = Some(match sum {
                None => k,
                Some(s) => g.add(s, k),
            });
        }
        let k = g.scale(sum.expect("at least one global crop"), T::of(1.0 / ng as f64));
        let weighted = g.scale(k, T::of(opts.koleo_weight));
        total = g.add(total, weighted);
        koleo = Some(k);
    }

    Ok(StudentLosses {
        total,
        cls,
        mpm,
        koleo,
        regression,
        koleo_weight: opts.koleo_weight,
        pairs,
    })
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    rng.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Parameters<T>,
    pub v: Parameters<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

/// Decoupled weight decay (skipped for gains, biases and learned tokens)
/// followed by a bias-corrected Adam step. Missing gradients count as zero.
pub fn adamw_update<T: Real>(
    params: &mut Parameters<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    h: &AdamHyper,
) -> Result<()> {
    state.t += 1;
    let [b1, b2] = h.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let decay = if network::is_decay_exempt(name, p.shape()) {
            0.0
        } else {
            h.lr * h.weight_decay
        };
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(format!("adam.m.{name}")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(format!("adam.v.{name}")))?;
        let grad = grads.get(name);
        if let Some(gr) = grad {
            if gr.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!("gradient of `{name}`")));
            }
        }
        for i in 0..p.len() {
            let gi = grad.map_or(0.0, |t| t.data()[i].as_f64());
            let mi = b1 * m.data()[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i].as_f64() + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = T::of(mi);
            v.data_mut()[i] = T::of(vi);
            let mut x = p.data()[i].as_f64();
            x -= decay * x;
            x -= h.lr * (mi / c1) / ((vi / c2).sqrt() + h.eps);
            p.data_mut()[i] = T::of(x);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale_all(T::of(max_norm / (norm + CLIP_EPS)));
    }
    norm
}

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub epoch: f64,
    pub total: f64,
    pub cls: f64,
    pub mpm: f64,
    pub koleo: f64,
    pub koleo_weight: f64,
    pub regression: f64,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    pub lr: f64,
    pub ema: f64,
    pub tau_cls: f64,
    pub tau_patch: f64,
    pub cls_marginal_entropy: f64,
    pub cls_posterior_entropy: f64,
    pub patch_marginal_entropy: f64,
    pub patch_posterior_entropy: f64,
    pub kl_min: f64,
    pub teacher_forwards: u64,
}

/// Per-epoch means plus entropies over every teacher class-token target of
/// the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: u64,
    pub total: f64,
    pub cls: f64,
    pub mpm: f64,
    pub koleo: f64,
    pub regression: f64,
    pub cls_marginal_entropy: f64,
    pub cls_posterior_entropy: f64,
    pub patch_posterior_entropy: f64,
    pub kl_min: f64,
    pub lr: f64,
}

/// Complete training state; round-trips through a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub student: Parameters<f32>,
    pub teacher: TeacherState<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let student = network::init_params::<f32, _>(&config.model, &mut rng);
        let teacher = TeacherState::from_student(&student, config.model.n_tokens);
        let adam = AdamState::new(&student);
        Ok(Self {
            config,
            student,
            teacher,
            adam,
            step: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.config.train.batch_size).max(1)
    }

    /// One optimization step on `clouds`.
    pub fn train_step(&mut self, clouds: &[&PointCloud], steps_per_epoch: usize) -> Result<LossReport> {
        self.step_inner(clouds, steps_per_epoch).map(|(r, _)| r)
    }

    fn step_inner(&mut self, clouds: &[&PointCloud], steps_per_epoch: usize) -> Result<(LossReport, Vec<f64>)> {
        let cfg = &self.config;
        let epoch = self.step as f64 / steps_per_epoch.max(1) as f64;
        let sched = cfg.schedule.eval(epoch, cfg.train.epochs as f64);
        let samples = clouds
            .iter()
            .map(|c| prepare_sample(c, cfg, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let batch = BatchViews::<f32>::new(&samples)?;
        let targets = self.teacher.forward(
            &cfg.model,
            &batch.globals,
            TargetSettings {
                tau_cls: sched.tau_cls,
                tau_patch: sched.tau_patch,
                centering: cfg.schedule.centering,
            },
        )?;
        let opts = LossOptions {
            tau_student: sched.tau_student,
            koleo_weight: cfg.train.koleo_weight,
            regression_beta: cfg.train.regression.then_some(cfg.train.regression_beta),
        };
        let (values, mut grads, kl_min) = {
            let mut g = Graph::new(&self.student);
            let losses = student_losses(&mut g, &cfg.model, &batch, &targets, &opts, Some(&mut self.rng))?;
            let values = losses.values(&g);
            if !values.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    detail: format!(
                        "{values:?} at lr {:.3e}, tau_cls {:.4}, tau_patch {:.4}; batch of {} clouds with {:?} points",
                        sched.lr,
                        sched.tau_cls,
                        sched.tau_patch,
                        clouds.len(),
                        clouds.iter().map(|c| c.len()).collect::<Vec<_>>()
                    ),
                });
            }
            let kl_min = losses.min_kl(&g, opts.tau_student);
            (values, g.backward(losses.total)?, kl_min)
        };
        let grad_norm = clip_gradients(&mut grads, cfg.train.grad_clip);
        let clipped_grad_norm = grads.global_norm();
        adamw_update(
            &mut self.student,
            &grads,
            &mut self.adam,
            &AdamHyper {
                lr: sched.lr,
                weight_decay: cfg.train.weight_decay,
                betas: cfg.train.betas,
                eps: cfg.train.adam_eps,
            },
        )?;
        self.teacher.ema_update(&self.student, sched.ema)?;
        self.teacher.update_centers(&targets, cfg.schedule.center_momentum);

        let cls_diag = entropy_diagnostics(&targets.cls_probs, None)?;
        let patch_diag = entropy_diagnostics(&targets.patch_probs, None)?;
        let mut cls_mean = vec![0.0; targets.cls_probs.cols()];
        for r in 0..targets.cls_probs.rows() {
            for (m, v) in cls_mean.iter_mut().zip(targets.cls_probs.row(r)) {
                *m += v.as_f64();
            }
        }
        let report = LossReport {
            step: self.step,
            epoch,
            total: values.total,
            cls: values.cls,
            mpm: values.mpm,
            koleo: values.koleo,
            koleo_weight: opts.koleo_weight,
            regression: values.regression,
            grad_norm,
            clipped_grad_norm,
            lr: sched.lr,
            ema: sched.ema,
            tau_cls: sched.tau_cls,
            tau_patch: sched.tau_patch,
            cls_marginal_entropy: cls_diag.marginal_entropy,
            cls_posterior_entropy: cls_diag.mean_posterior_entropy,
            patch_marginal_entropy: patch_diag.marginal_entropy,
            patch_posterior_entropy: patch_diag.mean_posterior_entropy,
            kl_min,
            teacher_forwards: self.teacher.forward_count,
        };
        self.step += 1;
        Ok((report, cls_mean))
    }

    /// One shuffled pass over `data`; `on_step` sees every report.
    pub fn train_epoch(
        &mut self,
        data: &[PointCloud],
        on_step: &mut dyn FnMut(&LossReport) -> Result<()>,
    ) -> Result<EpochSummary> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no training clouds".into()));
        }
        let spe = self.steps_per_epoch(data.len());
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = [0.0; 5];
        let mut marginal = vec![0.0; self.config.model.n_tokens];
        let (mut rows, mut posterior, mut patch_posterior) = (0usize, 0.0, 0.0);
        let mut kl_min = f64::INFINITY;
        let mut lr = 0.0;
        for chunk in order.chunks(self.config.train.batch_size) {
            let clouds: Vec<&PointCloud> = chunk.iter().map(|&i| &data[i]).collect();
            let (report, cls_sum) = self.step_inner(&clouds, spe).map_err(|e| match e {
                Error::NonFiniteLoss { step, detail } => Error::NonFiniteLoss {
                    step,
                    detail: format!("{detail}; sample indices {chunk:?}"),
                },
                other => other,
            })?;
            on_step(&report)?;
            let n_rows = chunk.len() * self.config.crops.n_global;
            for (s, v) in sums
                .iter_mut()
                .zip([report.total, report.cls, report.mpm, report.koleo, report.regression])
            {
                *s += v;
            }
            marginal.iter_mut().zip(&cls_sum).for_each(|(m, v)| *m += v);
            posterior += report.cls_posterior_entropy * n_rows as f64;
            patch_posterior += report.patch_posterior_entropy;
            rows += n_rows;
            kl_min = kl_min.min(report.kl_min);
            lr = report.lr;
        }
        self.epoch += 1;
        let steps = order.chunks(self.config.train.batch_size).len() as f64;
        marginal.iter_mut().for_each(|m| *m /= rows as f64);
        Ok(EpochSummary {
            epoch: self.epoch,
            steps: steps as u64,
            total: sums[0] / steps,
            cls: sums[1] / steps,
            mpm: sums[2] / steps,
            koleo: sums[3] / steps,
            regression: sums[4] / steps,
            cls_marginal_entropy: crate::distillation::entropy(&marginal),
            cls_posterior_entropy: posterior / rows as f64,
            patch_posterior_entropy: patch_posterior / steps,
            kl_min,
            lr,
        })
    }

    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::new();
        t.insert_u64s("meta.format", &[CHECKPOINT_FORMAT]);
        t.insert_u64s(
            "meta.counters",
            &[self.step, self.epoch, self.teacher.forward_count, self.adam.t],
        );
        let mut rng = self.rng.get_seed().to_vec();
        rng.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        rng.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        t.insert_bytes("meta.rng", &rng);
        t.insert_bytes("meta.config", &serde_json::to_vec(&self.config).expect("config serializes"));
        t.insert_bytes("meta.config_digest", self.config.digest().as_bytes());
        t.insert_params("student.", &self.student);
        t.insert_params("teacher.", &self.teacher.params);
        t.insert_params("adam.m.", &self.adam.m);
        t.insert_params("adam.v.", &self.adam.v);
        t.insert_f64s("center.cls", &self.teacher.center_cls);
        t.insert_f64s("center.patch", &self.teacher.center_patch);
        t
    }

    pub fn from_table(t: &TensorTable) -> Result<Self> {
        let format = t.u64s("meta.format")?;
        if format != [CHECKPOINT_FORMAT] {
            return Err(Error::VersionMismatch {
                found: format.first().copied().unwrap_or(0) as u32,
                expected: CHECKPOINT_FORMAT as u32,
            });
        }
        let config: RunConfig = serde_json::from_slice(t.bytes("meta.config")?)
            .map_err(|e| Error::Config(vec![format!("checkpoint config: {e}")]))?;
        config.check()?;
        let digest = std::str::from_utf8(t.bytes("meta.config_digest")?).unwrap_or("");
        if digest != config.digest() {
            return Err(Error::Config(vec!["checkpoint config does not match its digest".into()]));
        }
        let &[step, epoch, forwards, adam_t] = t.u64s("meta.counters")? else {
            return Err(Error::MissingTensor("meta.counters (4 values)".into()));
        };
        let rng_bytes = t.bytes("meta.rng")?;
        if rng_bytes.len() != 56 {
            return Err(Error::MissingTensor("meta.rng (56 bytes)".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(rng_bytes[..32].try_into().unwrap());
        rng.set_stream(u64::from_le_bytes(rng_bytes[32..40].try_into().unwrap()));
        rng.set_word_pos(u128::from_le_bytes(rng_bytes[40..56].try_into().unwrap()));

        let student = t.params::<f32>("student.")?;
        let teacher = t.params::<f32>("teacher.")?;
        network::validate_params(&config.model, &student, false)?;
        network::validate_params(&config.model, &teacher, true)?;
        let m = t.params::<f32>("adam.m.")?;
        let v = t.params::<f32>("adam.v.")?;
        for moments in [&m, &v] {
            if moments.len() != student.len()
                || student.iter().any(|(n, p)| moments.get(n).map(|x| x.shape()) != Some(p.shape()))
            {
                return Err(Error::ShapeMismatch("optimizer moments do not match the student".into()));
            }
        }
        let center_cls = t.f64s("center.cls")?.to_vec();
        let center_patch = t.f64s("center.patch")?.to_vec();
        if center_cls.len() != config.model.n_tokens || center_patch.len() != config.model.n_tokens {
            return Err(Error::ShapeMismatch("center length differs from n_tokens".into()));
        }
        Ok(Self {
            config,
            student,
            teacher: TeacherState {
                params: teacher,
                center_cls,
                center_patch,
                forward_count: forwards,
            },
            adam: AdamState { m, v, t: adam_t },
            step,
            epoch,
            rng,
        })
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    state.to_table().write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::from_table(&TensorTable::read(path)?)
}

/// Appends one JSON object per line.
pub struct MetricsLog {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn event<S: Serialize>(&mut self, event: &str, body: &S) -> Result<()> {
        let mut value = serde_json::to_value(body).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let line = match value.as_object_mut() {
            Some(obj) => {
                obj.insert("event".into(), event.into());
                value
            }
            None => serde_json::json!({ "event": event, "value": value }),
        };
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Trains from `state.epoch` up to the configured epoch count, logging to
/// `out_dir/metrics.jsonl` and writing checkpoints into `out_dir`.
pub fn run_training(state: &mut TrainState, data: &[PointCloud], out_dir: &Path) -> Result<Vec<EpochSummary>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut log = MetricsLog::append(&out_dir.join(METRICS_FILE))?;
    log.event(
        "config",
        &serde_json::json!({
            "config": state.config,
            "digest": state.config.digest(),
            "start_epoch": state.epoch,
            "samples": data.len(),
        }),
    )?;
    let mut summaries = Vec::new();
    while (state.epoch as usize) < state.config.train.epochs {
        let summary = state.train_epoch(data, &mut |r| log.event("step", r))?;
        log.event("epoch", &summary)?;
        log::info!(
            "epoch {} loss {:.4} cls H_marg {:.3} H_post {:.3}",
            summary.epoch,
            summary.total,
            summary.cls_marginal_entropy,
            summary.cls_posterior_entropy
        );
        let every = state.config.train.checkpoint_every;
        if every > 0 && summary.epoch as usize % every == 0 {
            save_checkpoint(state, &out_dir.join(format!("checkpoint_epoch{:04}.adsd", summary.epoch)))?;
        }
        summaries.push(summary);
    }
    save_checkpoint(state, &out_dir.join(LAST_CHECKPOINT))?;
    Ok(summaries)
}
