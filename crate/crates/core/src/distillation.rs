//! Self-distillation machinery: sharpened and centered teacher targets, the
//! multi-crop CLS loss, masked patch prediction loss, KoLeo spreading term,
//! optional smooth-L1 regression, the momentum teacher and the schedules.
//!
//! Loss functions here work on plain `f64` probability rows; they are the
//! reference for the graph-based losses the trainer differentiates.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::network::{self, Head, ModelConfig, ViewTensors};
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};

pub const NORMALIZATION_TOL: f64 = 1e-4;
pub const KOLEO_EPS: f64 = 1e-8;

/// `softmax(logits / tau)`, stabilized by subtracting the maximum.
pub fn sharpened_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Row-wise `softmax((logits - center) / tau)`; the center is ignored when
/// `centering` is off.
pub fn teacher_probs<T: Real>(logits: &Tensor<T>, center: &[f64], tau: f64, centering: bool) -> Result<Tensor<T>> {
    let c = logits.cols();
    if center.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "center has {} entries for {c} logits",
            center.len()
        )));
    }
    let mut out = Vec::with_capacity(logits.len());
    let mut row = vec![0.0; c];
    for r in 0..logits.rows() {
        for (j, (dst, &l)) in row.iter_mut().zip(logits.row(r)).enumerate() {
            *dst = l.as_f64() - if centering { center[j] } else { 0.0 };
        }
        out.extend(sharpened_softmax(&row, tau)?.into_iter().map(T::of));
    }
    Ok(Tensor::from_vec(&[logits.rows(), c], out))
}

/// `center <- m * center + (1 - m) * mean_rows(logits)`. An empty batch
/// leaves the center unchanged.
pub fn update_center<T: Real>(center: &mut [f64], logits: &Tensor<T>, momentum: f64) {
    let rows = logits.rows();
    if rows == 0 || logits.is_empty() {
        return;
    }
    let mut mean = vec![0.0; center.len()];
    for r in 0..rows {
        for (m, &l) in mean.iter_mut().zip(logits.row(r)) {
            *m += l.as_f64();
        }
    }
    for (c, m) in center.iter_mut().zip(mean) {
        *c = momentum * *c + (1.0 - momentum) * m / rows as f64;
    }
}

fn check_normalized(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|&v| v < 0.0) {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// `-sum_z p_t(z) log p_s(z)`; zero-mass target entries contribute nothing.
pub fn cross_entropy(p_t: &[f64], p_s: &[f64]) -> Result<f64> {
    if p_t.len() != p_s.len() {
        return Err(Error::ShapeMismatch(format!(
            "distributions of length {} and {}",
            p_t.len(),
            p_s.len()
        )));
    }
    check_normalized(p_t)?;
    check_normalized(p_s)?;
    Ok(p_t
        .iter()
        .zip(p_s)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &s)| -t * s.ln())
        .sum())
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Which student view a CLS term reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentView {
    Local(usize),
    /// Global crop `crop`, mask variant `variant` (0 when unmasked).
    Global { crop: usize, variant: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsTerm {
    /// Teacher global crop.
    pub teacher: usize,
    pub student: StudentView,
    pub weight: f64,
}

/// Enumerates the CLS cross-view terms and their weights.
///
/// Unmasked (`masked == false`, one variant per global crop) this is the
/// multi-crop sum over teacher globals `u` and student views `v != u` with
/// coefficient `1 / (n_global * |V|)`. With masking, the student sees each
/// global crop only through its `n_variants` masked variants: those of the
/// other crops replace the unmasked student view, and those of the teacher's
/// own crop add a masked-versus-full pairing. Each crop's variants share the
/// weight of one view, so the scale matches the unmasked case.
pub fn cls_terms(n_global: usize, n_local: usize, n_variants: usize, masked: bool) -> Vec<ClsTerm> {
    let n_views = n_global + n_local;
    let coeff = 1.0 / (n_global * n_views) as f64;
    let variants = if masked { n_variants.max(1) } else { 1 };
    let mut terms = Vec::new();
    for u in 0..n_global {
        for crop in 0..n_global {
            if crop == u && !masked {
                continue;
            }
            for variant in 0..variants {
                terms.push(ClsTerm {
                    teacher: u,
                    student: StudentView::Global { crop, variant },
                    weight: coeff / variants as f64,
                });
            }
        }
        for l in 0..n_local {
            terms.push(ClsTerm {
                teacher: u,
                student: StudentView::Local(l),
                weight: coeff,
            });
        }
    }
    terms
}

/// CLS loss of one sample from probability vectors. `globals[crop][variant]`
/// holds the student distributions of the global crops.
pub fn cls_loss(teacher: &[Vec<f64>], globals: &[Vec<Vec<f64>>], locals: &[Vec<f64>], masked: bool) -> Result<f64> {
    let n_variants = globals.first().map_or(1, Vec::len);
    if teacher.len() != globals.len() || globals.iter().any(|g| g.len() != n_variants) {
        return Err(Error::ShapeMismatch("teacher and student global views disagree".into()));
    }
    let mut loss = 0.0;
    for term in cls_terms(teacher.len(), locals.len(), n_variants, masked) {
        let s = match term.student {
            StudentView::Local(l) => &locals[l],
            StudentView::Global { crop, variant } => &globals[crop][variant],
        };
        loss += term.weight * cross_entropy(&teacher[term.teacher], s)?;
    }
    Ok(loss)
}

/// Masked patch prediction loss of one view: mean over masks and masked
/// positions of the cross-entropy between the teacher's full-view patch
/// distribution and the student's prediction. `student[m]` holds one row per
/// masked position of `masks[m]`, in ascending patch order.
pub fn mpm_loss(teacher: &[Vec<f64>], student: &[Vec<Vec<f64>>], masks: &[Vec<bool>]) -> Result<f64> {
    if student.len() != masks.len() || masks.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} student groups for {} masks",
            student.len(),
            masks.len()
        )));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (rows, mask) in student.iter().zip(masks) {
        if mask.len() != teacher.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask over {} patches, teacher has {}",
                mask.len(),
                teacher.len()
            )));
        }
        let idx = crate::masking::masked_indices(mask);
        if idx.len() != rows.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions for {} masked patches",
                rows.len(),
                idx.len()
            )));
        }
        for (&i, s) in idx.iter().zip(rows) {
            total += cross_entropy(&teacher[i], s)?;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// `-(1/B) sum_i log rho_i` on L2-normalized rows, `rho_i` the distance to
/// the nearest other row, clamped at `KOLEO_EPS`.
pub fn koleo_loss(rows: &[Vec<f64>]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument("KoLeo needs at least two rows".into()));
    }
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut total = 0.0;
    for (i, a) in unit.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, b) in unit.iter().enumerate() {
            if i != j {
                let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                best = best.min(d);
            }
        }
        if best < KOLEO_EPS {
            log::warn!("KoLeo: duplicate rows, clamping nearest-neighbour distance");
        }
        total -= best.max(KOLEO_EPS).ln();
    }
    Ok(total / rows.len() as f64)
}

/// Mean smooth-L1 difference with threshold `beta`.
pub fn regression_loss(student: &[f64], teacher: &[f64], beta: f64) -> Result<f64> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "regression over {} and {} values",
            student.len(),
            teacher.len()
        )));
    }
    let total: f64 = student
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| {
            let d = (s - t).abs();
            if d < beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            }
        })
        .sum();
    Ok(total / student.len() as f64)
}

/// Teacher-side outputs for a stack of unmasked global views.
#[derive(Debug, Clone)]
pub struct TeacherOutput<T> {
    pub views: usize,
    pub n_patches: usize,
    /// `[views, D]` encoder class-token outputs.
    pub cls_repr: Tensor<T>,
    /// `[views*n_patches, D]` encoder patch outputs.
    pub patch_repr: Tensor<T>,
    pub cls_logits: Tensor<T>,
    pub patch_logits: Tensor<T>,
    pub cls_probs: Tensor<T>,
    pub patch_probs: Tensor<T>,
}

/// Momentum teacher: EMA copy of the encoder, embeddings and both heads,
/// plus one logit center per head.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState<T> {
    pub params: Parameters<T>,
    pub center_cls: Vec<f64>,
    pub center_patch: Vec<f64>,
    /// Number of teacher forward passes run so far.
    pub forward_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSettings {
    pub tau_cls: f64,
    pub tau_patch: f64,
    pub centering: bool,
}

impl<T: Real> TeacherState<T> {
    /// Teacher initialized as an exact copy of the student's shared tensors.
    pub fn from_student(student: &Parameters<T>, n_tokens: usize) -> Self {
        Self {
            params: student.filtered(network::is_teacher_param),
            center_cls: vec![0.0; n_tokens],
            center_patch: vec![0.0; n_tokens],
            forward_count: 0,
        }
    }

    /// Encodes full views without gradient recording and turns both heads'
    /// logits into centered, sharpened targets. Counts as one forward pass.
    pub fn forward(
        &mut self,
        cfg: &ModelConfig,
        views: &ViewTensors<T>,
        settings: TargetSettings,
    ) -> Result<TeacherOutput<T>> {
        self.forward_count += 1;
        let mut g = Graph::no_grad(&self.params);
        let tokens = network::encode_views(&mut g, cfg, views, None);
        let (v, n) = (views.views, views.n_patches);
        let cls = g.gather_rows(tokens, &network::cls_rows(v, n));
        let patches = g.gather_rows(tokens, &network::patch_rows(v, n));
        let cls_logits = network::project(&mut g, cfg, Head::Cls, cls);
        let patch_logits = network::project(&mut g, cfg, Head::Patch, patches);
        let cls_logits = g.value(cls_logits).clone();
        let patch_logits = g.value(patch_logits).clone();
        Ok(TeacherOutput {
            views: v,
            n_patches: n,
            cls_repr: g.value(cls).clone(),
            patch_repr: g.value(patches).clone(),
            cls_probs: teacher_probs(&cls_logits, &self.center_cls, settings.tau_cls, settings.centering)?,
            patch_probs: teacher_probs(&patch_logits, &self.center_patch, settings.tau_patch, settings.centering)?,
            cls_logits,
            patch_logits,
        })
    }

    pub fn update_centers(&mut self, out: &TeacherOutput<T>, momentum: f64) {
        update_center(&mut self.center_cls, &out.cls_logits, momentum);
        update_center(&mut self.center_patch, &out.patch_logits, momentum);
    }

    /// `teacher <- eta * teacher + (1 - eta) * student` on every teacher tensor.
    pub fn ema_update(&mut self, student: &Parameters<T>, eta: f64) -> Result<()> {
        let eta_t = T::of(eta);
        let rest = T::of(1.0 - eta);
        for (name, t) in self.params.iter_mut() {
            let s = student.require(name)?;
            if s.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!("EMA tensor `{name}` shapes differ")));
            }
            for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = eta_t * *a + rest * b;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub tau_cls: [f64; 2],
    pub tau_patch: [f64; 2],
    pub tau_warmup_epochs: f64,
    pub tau_student: f64,
    pub center_momentum: f64,
    /// When off, teacher temperatures equal the student temperature.
    pub sharpening: bool,
    pub centering: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            warmup_epochs: 10.0,
            ema_start: 0.995,
            ema_end: 1.0,
            tau_cls: [0.04, 0.07],
            tau_patch: [0.05, 0.07],
            tau_warmup_epochs: 10.0,
            tau_student: 0.1,
            center_momentum: 0.9,
            sharpening: true,
            centering: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub lr: f64,
    pub ema: f64,
    pub tau_cls: f64,
    pub tau_patch: f64,
    pub tau_student: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.base_lr >= 0.0) {
            errs.push("base_lr must be non-negative".into());
        }
        if !(self.warmup_epochs >= 0.0) || !(self.tau_warmup_epochs >= 0.0) {
            errs.push("warmup epochs must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.ema_start) || !(0.0..=1.0).contains(&self.ema_end) {
            errs.push("EMA decay must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            errs.push("center_momentum must lie in [0, 1]".into());
        }
        if !(self.tau_student > 0.0) {
            errs.push("tau_student must be positive".into());
        }
        for (name, [a, b]) in [("tau_cls", self.tau_cls), ("tau_patch", self.tau_patch)] {
            if !(a > 0.0 && b > 0.0) {
                errs.push(format!("{name} temperatures must be positive"));
            } else if self.sharpening && (a >= self.tau_student || b >= self.tau_student) {
                errs.push(format!(
                    "{name} must stay below tau_student {} when sharpening",
                    self.tau_student
                ));
            }
        }
        errs
    }

    /// Schedule values at fractional epoch `epoch` of `total_epochs`.
    pub fn eval(&self, epoch: f64, total_epochs: f64) -> ScheduleValues {
        let lr = if epoch < self.warmup_epochs {
            self.base_lr * epoch / self.warmup_epochs
        } else {
            let span = (total_epochs - self.warmup_epochs).max(f64::MIN_POSITIVE);
            let progress = ((epoch - self.warmup_epochs) / span).clamp(0.0, 1.0);
            0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
        };
        let progress = if total_epochs > 0.0 {
            (epoch / total_epochs).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let ema = self.ema_end
            - (self.ema_end - self.ema_start) * ((std::f64::consts::PI * progress).cos() + 1.0) / 2.0;
        let warm = if self.tau_warmup_epochs > 0.0 {
            (epoch / self.tau_warmup_epochs).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let ramp = |[a, b]: [f64; 2]| a + (b - a) * warm;
        let (tau_cls, tau_patch) = if self.sharpening {
            (ramp(self.tau_cls), ramp(self.tau_patch))
        } else {
            (self.tau_student, self.tau_student)
        };
        ScheduleValues {
            lr,
            ema,
            tau_cls,
            tau_patch,
            tau_student: self.tau_student,
        }
    }
}
