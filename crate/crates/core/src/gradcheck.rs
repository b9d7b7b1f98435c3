//! Finite-difference check of the full student objective in double
//! precision: patch embedding, encoder, predictor, both heads and all loss
//! terms, against fixed teacher targets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data_io::{generate_cloud, ShapeClass};
use crate::distillation::{TargetSettings, TeacherOutput, TeacherState};
use crate::error::{Error, Result};
use crate::network::{self, ModelConfig};
use crate::params::Parameters;
use crate::trainer::{prepare_sample, student_losses, BatchViews, LossOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Scalar parameters to probe; every tensor is probed at least once.
    pub samples: usize,
    /// Central difference half-step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose gradient is
    /// pure round-off do not dominate.
    pub floor: f64,
    pub seed: u64,
    /// Test hook: perturbs the analytic gradient of this tensor.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            samples: 128,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
    pub worst: String,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    /// Tensors with at least one entry over tolerance, worst first.
    pub fn failing_tensors(&self) -> Vec<String> {
        let mut bad: Vec<&GradcheckEntry> = self.entries.iter().filter(|e| !(e.rel_error < self.tolerance)).collect();
        bad.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        let mut names: Vec<String> = Vec::new();
        for e in bad {
            if !names.contains(&e.name) {
                names.push(e.name.clone());
            }
        }
        names
    }
}

/// Tiny model (D=16, L=2, 32 tokens) on 8-patch global crops.
pub fn gradcheck_config() -> RunConfig {
    let mut c = RunConfig::micro();
    c.model = ModelConfig::gradcheck();
    c.crops.global_points = 64;
    c.crops.global_patches = 8;
    c.crops.local_points = 32;
    c.crops.local_patches = 4;
    c.crops.n_local = 2;
    c.crops.patch_size = 8;
    c.masking.mask_block_size = 2;
    c.masking.mask_count = 2;
    c.train.regression = true;
    c
}

struct Problem {
    cfg: RunConfig,
    batch: BatchViews<f64>,
    targets: TeacherOutput<f64>,
    opts: LossOptions,
}

impl Problem {
    fn new(cfg: RunConfig, rng: &mut ChaCha8Rng) -> Result<(Self, Parameters<f64>)> {
        let clouds = (0..2)
            .map(|i| generate_cloud(ShapeClass::ALL[i], 256, rng))
            .collect::<Result<Vec<_>>>()?;
        let samples = clouds
            .iter()
            .map(|c| prepare_sample(c, &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let batch = BatchViews::<f64>::new(&samples)?;
        let student = network::init_params::<f64, _>(&cfg.model, rng);
        // A teacher that differs from the student gives non-trivial targets.
        let mut teacher = TeacherState::from_student(&student, cfg.model.n_tokens);
        for (_, t) in teacher.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05));
        }
        let targets = teacher.forward(
            &cfg.model,
            &batch.globals,
            TargetSettings {
                tau_cls: 0.2,
                tau_patch: 0.25,
                centering: true,
            },
        )?;
        let opts = LossOptions {
            tau_student: 0.3,
            koleo_weight: cfg.train.koleo_weight,
            regression_beta: cfg.train.regression.then_some(cfg.train.regression_beta),
        };
        Ok((
            Self {
                cfg,
                batch,
                targets,
                opts,
            },
            student,
        ))
    }

    fn loss(&self, params: &Parameters<f64>) -> Result<f64> {
        let mut g = Graph::no_grad(params);
        let l = student_losses(&mut g, &self.cfg.model, &self.batch, &self.targets, &self.opts, None)?;
        Ok(g.value(l.total).item())
    }

    fn gradient(&self, params: &Parameters<f64>) -> Result<(f64, Parameters<f64>)> {
        let mut g = Graph::new(params);
        let l = student_losses(&mut g, &self.cfg.model, &self.batch, &self.targets, &self.opts, None)?;
        Ok((g.value(l.total).item(), g.backward(l.total)?))
    }
}

pub fn run_gradcheck(cfg: RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (problem, mut params) = Problem::new(cfg, &mut rng)?;
    let (loss, mut grads) = problem.gradient(&params)?;
    if let Some(name) = &opts.corrupt {
        let t = grads
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(format!("no gradient for `{name}`")))?;
        t.data_mut().iter_mut().for_each(|x| *x += 1e-2);
    }

    let names: Vec<(String, usize)> = params.iter().map(|(n, t)| (n.to_string(), t.len())).collect();
    let mut picks: Vec<(usize, usize)> = names
        .iter()
        .enumerate()
        .map(|(i, (_, len))| (i, rng.gen_range(0..*len)))
        .collect();
    let total: usize = names.iter().map(|(_, l)| l).sum();
    while picks.len() < opts.samples {
        let mut flat = rng.gen_range(0..total);
        let i = names
            .iter()
            .position(|(_, len)| {
                if flat < *len {
                    true
                } else {
                    flat -= len;
                    false
                }
            })
            .expect("index within total");
        picks.push((i, flat));
    }
    picks.shuffle(&mut rng);

    let mut entries = Vec::with_capacity(picks.len());
    for (ti, idx) in picks {
        let name = &names[ti].0;
        let original = params.get(name).unwrap().data()[idx];
        params.get_mut(name).unwrap().data_mut()[idx] = original + opts.step;
        let up = problem.loss(&params)?;
        params.get_mut(name).unwrap().data_mut()[idx] = original - opts.step;
        let down = problem.loss(&params)?;
        params.get_mut(name).unwrap().data_mut()[idx] = original;
        let numeric = (up - down) / (2.0 * opts.step);
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[idx]);
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
        entries.push(GradcheckEntry {
            name: name.clone(),
            index: idx,
            analytic,
            numeric,
            rel_error,
        });
    }
    let worst = entries
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .expect("at least one entry");
    Ok(GradcheckReport {
        loss,
        max_rel_error: worst.rel_error,
        worst: format!("{}[{}]", worst.name, worst.index),
        tolerance: opts.tolerance,
        passed: entries.iter().all(|e| e.rel_error < opts.tolerance),
        entries,
    })
}
