use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use asymdsd_core::config::{RunConfig, Scale};
use asymdsd_core::data_io::{generate_dataset, load_dataset, stratified_split, ShapeClass};
use asymdsd_core::error::Error;
use asymdsd_core::evaluation::{extract_features, knn_probe, linear_probe, KnnMetric, ProbeOptions};
use asymdsd_core::gradcheck::{gradcheck_config, run_gradcheck, GradcheckOptions};
use asymdsd_core::trainer::{load_checkpoint, run_training, TrainState, LAST_CHECKPOINT};

use crate::{ConfigArgs, GenDataArgs, GradcheckArgs, MetricArg, PretrainArgs, ProbeArgs, ProbeKind, ScaleArg};

const USAGE: u8 = 2;
const RUNTIME: u8 = 1;
const EFFECTIVE_CONFIG: &str = "config.json";
const FEATURE_CHUNK: usize = 32;

/// An error with the process exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: USAGE,
            error: error.into(),
        }
    }
}

/// Config problems are usage errors; everything else is a runtime failure.
impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config(_)) => USAGE,
            _ => RUNTIME,
        };
        Self { code, error }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        anyhow::Error::from(error).into()
    }
}

type CmdResult = Result<(), Failure>;

fn scale(s: ScaleArg) -> Scale {
    match s {
        ScaleArg::Full => Scale::Full,
        ScaleArg::Small => Scale::Small,
        ScaleArg::Micro => Scale::Micro,
    }
}

fn effective_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let base = RunConfig::preset(scale(args.scale));
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(Failure::usage)?;
            RunConfig::from_json(&text, &base)?
        }
        None => base,
    };
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

pub fn show_config(args: ConfigArgs) -> CmdResult {
    println!("{}", effective_config(&args)?.to_json_pretty());
    Ok(())
}

pub fn gen_data(args: GenDataArgs) -> CmdResult {
    let classes = args
        .classes
        .iter()
        .map(|c| ShapeClass::parse(c.trim()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::usage)?;
    let entries = generate_dataset(&args.out, &classes, args.per_class, args.points, args.seed)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    println!("wrote {} clouds to {}", entries.len(), args.out.display());
    Ok(())
}

pub fn pretrain(args: PretrainArgs) -> CmdResult {
    let mut cfg = effective_config(&args.config)?;
    if let Some(d) = &args.data {
        cfg.data.dataset = d.display().to_string();
    }
    if let Some(o) = &args.out {
        cfg.data.output = o.display().to_string();
    }
    if cfg.data.dataset.is_empty() {
        return Err(Failure::usage(anyhow!("no dataset: pass --data or set data.dataset")));
    }
    if cfg.data.output.is_empty() {
        return Err(Failure::usage(anyhow!("no run directory: pass --out or set data.output")));
    }
    let out = Path::new(&cfg.data.output).to_path_buf();
    let data = load_dataset(Path::new(&cfg.data.dataset)).context("loading dataset")?;

    let mut state = if args.resume {
        let path = out.join(LAST_CHECKPOINT);
        let mut state = load_checkpoint(&path).with_context(|| format!("resuming from {}", path.display()))?;
        if state.config.digest() != cfg.digest() {
            if !args.force {
                return Err(Failure::usage(anyhow!(
                    "checkpoint config differs from the effective config (digest {} vs {}); pass --force to resume anyway",
                    state.config.digest(),
                    cfg.digest()
                )));
            }
            if state.config.model != cfg.model {
                return Err(Failure::usage(anyhow!("cannot resume: the model architecture differs")));
            }
            log::warn!("resuming with a changed config");
        }
        state.config = cfg;
        state
    } else {
        TrainState::new(cfg)?
    };

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(EFFECTIVE_CONFIG), state.config.to_json_pretty()).context("writing effective config")?;
    log::info!(
        "training on {} clouds for {} epochs (digest {})",
        data.len(),
        state.config.train.epochs,
        &state.config.digest()[..12]
    );
    let summaries = run_training(&mut state, &data.clouds, &out)?;
    if let Some(last) = summaries.last() {
        println!(
            "epoch {} loss {:.4} cls marginal entropy {:.3} posterior entropy {:.3}",
            last.epoch, last.total, last.cls_marginal_entropy, last.cls_posterior_entropy
        );
    }
    println!("checkpoint {}", out.join(LAST_CHECKPOINT).display());
    Ok(())
}

pub fn probe(args: ProbeArgs) -> CmdResult {
    if !(0.0..1.0).contains(&args.test_fraction) || args.test_fraction == 0.0 {
        return Err(Failure::usage(anyhow!("--test-fraction must lie in (0, 1)")));
    }
    let state = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let data = load_dataset(&args.data).context("loading dataset")?;
    let cfg = &state.config;
    let features = extract_features(
        &cfg.model,
        &state.teacher.params,
        &data.clouds,
        &data.labels,
        cfg.crops.global_patches,
        cfg.crops.patch_size,
        FEATURE_CHUNK,
    )?;
    let (train_idx, test_idx) = stratified_split(&data.labels, args.test_fraction, args.split_seed);
    let train: Vec<_> = train_idx.iter().map(|&i| features[i].clone()).collect();
    let test: Vec<_> = test_idx.iter().map(|&i| features[i].clone()).collect();
    let (name, accuracy) = match args.kind {
        ProbeKind::Linear => {
            let opts = ProbeOptions {
                l2: args.l2,
                ..Default::default()
            };
            ("linear", linear_probe(&train, &test, &opts)?)
        }
        ProbeKind::Knn => {
            let metric = match args.metric {
                MetricArg::Euclidean => KnnMetric::Euclidean,
                MetricArg::Cosine => KnnMetric::Cosine,
            };
            ("knn", knn_probe(&train, &test, args.k, metric)?)
        }
    };
    if args.json {
        let report = serde_json::json!({
            "kind": name,
            "k": (args.kind == ProbeKind::Knn).then_some(args.k),
            "accuracy": accuracy,
            "train": train.len(),
            "test": test.len(),
        });
        println!("{report}");
    } else {
        println!("{name} accuracy {accuracy:.4} ({} train, {} test)", train.len(), test.len());
    }
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> CmdResult {
    let opts = GradcheckOptions {
        samples: args.samples,
        seed: args.seed,
        tolerance: args.tolerance,
        corrupt: args.corrupt,
        ..Default::default()
    };
    let report = run_gradcheck(gradcheck_config(), &opts)?;
    if args.json {
        println!("{}", serde_json::to_string(&report).context("serializing report")?);
    } else {
        println!(
            "{} parameters, max relative error {:.3e} at {} (tolerance {:.0e})",
            report.entries.len(),
            report.max_rel_error,
            report.worst,
            report.tolerance
        );
    }
    if report.passed {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure {
            code: RUNTIME,
            error: anyhow!("gradient check failed in {}", report.failing_tensors().join(", ")),
        })
    }
}
