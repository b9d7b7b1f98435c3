//! Run configuration: every hyperparameter as a named key, grouped in
//! sections, with presets per scale and `key=value` overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::distillation::ScheduleConfig;
use crate::error::{Error, Result};
use crate::geometry::{CropKind, CropSpec, MultiCropConfig};
use crate::masking::{MaskParams, MaskStrategy};
use crate::network::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Small,
    #[default]
    Micro,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "small" => Ok(Scale::Small),
            "micro" => Ok(Scale::Micro),
            _ => Err(Error::Config(vec![format!("unknown scale `{s}` (full, small, micro)")])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub global_points: usize,
    pub global_patches: usize,
    pub global_fraction: [f64; 2],
    pub local_points: usize,
    pub local_patches: usize,
    pub local_fraction: [f64; 2],
    /// Points per patch (K).
    pub patch_size: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        let (g, l) = (CropSpec::global(), CropSpec::local());
        Self {
            n_global: 2,
            n_local: 4,
            global_points: g.points,
            global_patches: g.patches,
            global_fraction: [g.fraction.0, g.fraction.1],
            local_points: l.points,
            local_patches: l.patches,
            local_fraction: [l.fraction.0, l.fraction.1],
            patch_size: g.patch_size,
        }
    }
}

impl CropConfig {
    pub fn multi_crop(&self) -> MultiCropConfig {
        MultiCropConfig {
            global: CropSpec {
                kind: CropKind::Global,
                fraction: (self.global_fraction[0], self.global_fraction[1]),
                points: self.global_points,
                patches: self.global_patches,
                patch_size: self.patch_size,
            },
            local: CropSpec {
                kind: CropKind::Local,
                fraction: (self.local_fraction[0], self.local_fraction[1]),
                points: self.local_points,
                patches: self.local_patches,
                patch_size: self.patch_size,
            },
            n_global: self.n_global,
            n_local: self.n_local,
        }
    }

    fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_global == 0 {
            errs.push("n_global must be at least 1".into());
        }
        if self.n_global + self.n_local < 2 {
            errs.push("need at least two crops in total".into());
        }
        for (name, points, patches, [lo, hi]) in [
            ("global", self.global_points, self.global_patches, self.global_fraction),
            ("local", self.local_points, self.local_patches, self.local_fraction),
        ] {
            if patches == 0 || patches > points {
                errs.push(format!("{name}_patches must lie in 1..={name}_points"));
            }
            if self.patch_size > points {
                errs.push(format!("patch_size exceeds {name}_points"));
            }
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                errs.push(format!("{name}_fraction must satisfy 0 < lo <= hi <= 1"));
            }
        }
        if self.patch_size == 0 {
            errs.push("patch_size must be positive".into());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Masked fraction of global patches; 0 turns masked prediction off.
    pub mask_ratio: f64,
    pub mask_block_size: usize,
    pub mask_adjust_ratio: f64,
    /// Masks per global view (multi-mask).
    pub mask_count: usize,
    pub mask_strategy: MaskStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        let p = MaskParams::default();
        Self {
            mask_ratio: p.ratio,
            mask_block_size: p.block_size,
            mask_adjust_ratio: p.adjust_ratio,
            mask_count: p.count,
            mask_strategy: p.strategy,
        }
    }
}

impl MaskConfig {
    pub fn enabled(&self) -> bool {
        self.mask_ratio > 0.0
    }

    pub fn params(&self) -> MaskParams {
        MaskParams {
            ratio: self.mask_ratio,
            block_size: self.mask_block_size,
            adjust_ratio: self.mask_adjust_ratio,
            count: self.mask_count,
            strategy: self.mask_strategy,
        }
    }

    fn validate(&self, n_patches: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..1.0).contains(&self.mask_ratio) {
            errs.push("mask_ratio must lie in [0, 1)".into());
        }
        if self.mask_count == 0 {
            errs.push("mask_count must be at least 1".into());
        }
        if self.mask_block_size == 0 || self.mask_block_size > n_patches {
            errs.push(format!("mask_block_size must lie in 1..={n_patches}"));
        }
        if !(self.mask_adjust_ratio >= 0.0) {
            errs.push("mask_adjust_ratio must be non-negative".into());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest file or directory holding `manifest.csv`.
    pub dataset: String,
    /// Run directory for the metrics log and checkpoints.
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub crops: CropConfig,
    pub masking: MaskConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// ViT-S with the reference hyperparameters.
    pub fn full() -> Self {
        Self::default()
    }

    /// A narrower, shallower model on smaller crops.
    pub fn small() -> Self {
        let mut c = Self::default();
        c.model = ModelConfig {
            patch_mlp1: [64, 128],
            patch_mlp2: [256, 192],
            pos_hidden: 64,
            embed_dim: 192,
            depth: 6,
            heads: 3,
            mlp_dim: 768,
            predictor_dim: 96,
            predictor_depth: 2,
            predictor_heads: 3,
            predictor_mlp_dim: 384,
            head_dims: [512, 512, 128],
            ..ModelConfig::vit_s()
        };
        c.crops.global_points = 512;
        c.crops.global_patches = 32;
        c.crops.local_points = 128;
        c.crops.local_patches = 8;
        c.crops.patch_size = 16;
        c.masking.mask_block_size = 4;
        c.train.batch_size = 64;
        c.train.epochs = 100;
        c.schedule.warmup_epochs = 5.0;
        c.schedule.tau_warmup_epochs = 5.0;
        c
    }

    /// Desk-scale variant that trains on a single CPU core in minutes.
    pub fn micro() -> Self {
        let mut c = Self::default();
        c.model = ModelConfig::micro();
        c.crops.global_points = 256;
        c.crops.global_patches = 16;
        c.crops.local_points = 64;
        c.crops.local_patches = 4;
        c.crops.patch_size = 16;
        c.masking.mask_block_size = 2;
        c.masking.mask_count = 2;
        // Small batches buy enough optimizer steps in 30 epochs; the EMA and
        // teacher temperatures are set for that step count.
        c.train.batch_size = 8;
        c.train.epochs = 30;
        c.train.checkpoint_every = 0;
        c.schedule.base_lr = 2e-3;
        c.schedule.warmup_epochs = 3.0;
        c.schedule.ema_start = 0.99;
        c.schedule.tau_cls = [0.035, 0.035];
        c.schedule.tau_patch = [0.045, 0.045];
        c.schedule.tau_warmup_epochs = 0.0;
        c
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Full => Self::full(),
            Scale::Small => Self::small(),
            Scale::Micro => Self::micro(),
        }
    }

    /// Layers a JSON document over `base`. Every unknown section or key is
    /// reported, not only the first.
    pub fn from_json(text: &str, base: &RunConfig) -> Result<Self> {
        let doc: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("config is not valid JSON: {e}")]))?;
        let Value::Object(doc) = doc else {
            return Err(Error::Config(vec!["config must be a JSON object".into()]));
        };
        let mut merged = serde_json::to_value(base).expect("config serializes");
        let mut errs = Vec::new();
        for (section, body) in doc {
            let Some(target) = merged.get_mut(&section).and_then(Value::as_object_mut) else {
                errs.push(format!("unknown section `{section}`"));
                continue;
            };
            let Value::Object(body) = body else {
                errs.push(format!("section `{section}` must be an object"));
                continue;
            };
            for (key, value) in body {
                match target.get_mut(&key) {
                    Some(slot) => *slot = value,
                    None => errs.push(format!("unknown key `{section}.{key}`")),
                }
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides. A bare key must name a field in exactly
    /// one section; `section.key` is always accepted. `on`/`off` set flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut errs = Vec::new();
        for raw in overrides {
            let raw = raw.as_ref();
            let Some((key, text)) = raw.split_once('=') else {
                errs.push(format!("override `{raw}` is not key=value"));
                continue;
            };
            let (key, text) = (key.trim(), text.trim());
            let (section, field) = match resolve_key(&doc, key) {
                Ok(found) => found,
                Err(e) => {
                    errs.push(e);
                    continue;
                }
            };
            let slot = &mut doc[&section][&field];
            let value = parse_value(text, slot);
            let previous = std::mem::replace(slot, value);
            if let Err(e) = serde_json::from_value::<RunConfig>(doc.clone()) {
                errs.push(format!("bad value for `{key}`: {e}"));
                doc[&section][&field] = previous;
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        *self = serde_json::from_value(doc).expect("checked after each override");
        self.check()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let sections = [
            ("model", self.model.validate()),
            ("crops", self.crops.validate()),
            ("masking", self.masking.validate(self.crops.global_patches)),
            ("schedule", self.schedule.validate()),
            ("train", self.train.validate()),
        ];
        for (name, list) in sections {
            errs.extend(list.into_iter().map(|e| format!("{name}: {e}")));
        }
        if self.masking.enabled() && crate::masking::masked_count(self.crops.global_patches, self.masking.mask_ratio) == 0
        {
            errs.push("masking: mask_ratio masks no patch of a global crop".into());
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// SHA-256 over everything except the data paths.
    pub fn digest(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        doc.as_object_mut().unwrap().remove("data");
        let hash = Sha256::digest(serde_json::to_vec(&doc).expect("config serializes"));
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn resolve_key(doc: &Value, key: &str) -> std::result::Result<(String, String), String> {
    let sections = doc.as_object().expect("config is an object");
    if let Some((section, field)) = key.split_once('.') {
        return match sections.get(section).and_then(|s| s.get(field)) {
            Some(_) => Ok((section.to_string(), field.to_string())),
            None => Err(format!("unknown key `{key}`")),
        };
    }
    let hits: Vec<&String> = sections
        .iter()
        .filter(|(_, body)| body.get(key).is_some())
        .map(|(name, _)| name)
        .collect();
    match hits.as_slice() {
        [one] => Ok(((*one).clone(), key.to_string())),
        [] => Err(format!("unknown key `{key}`")),
        many => Err(format!(
            "ambiguous key `{key}`, qualify it with one of: {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )),
    }
}

fn parse_value(text: &str, current: &Value) -> Value {
    if current.is_boolean() {
        match text {
            "on" => return Value::Bool(true),
            "off" => return Value::Bool(false),
            _ => {}
        }
    }
    if current.is_string() {
        return Value::String(text.to_string());
    }
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn messages(e: Error) -> Vec<String> {
        match e {
            Error::Config(list) => list,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn presets_validate() {
        for scale in [Scale::Full, Scale::Small, Scale::Micro] {
            let c = RunConfig::preset(scale);
            assert!(c.validate().is_empty(), "{scale:?}: {:?}", c.validate());
        }
    }

    #[test]
    fn full_preset_carries_reference_hyperparameters() {
        let c = RunConfig::full();
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.epochs, 300);
        assert_eq!(c.train.weight_decay, 0.05);
        assert_eq!(c.train.grad_clip, 10.0);
        assert_eq!(c.train.koleo_weight, 0.01);
        assert_eq!(c.schedule.base_lr, 5e-4);
        assert_eq!((c.crops.n_global, c.crops.n_local), (2, 4));
        assert_eq!((c.crops.global_points, c.crops.global_patches), (1024, 64));
        assert_eq!((c.crops.local_points, c.crops.local_patches), (256, 16));
        assert_eq!(c.masking.mask_count, 4);
        assert_eq!(c.model.embed_dim, 384);
    }

    #[test]
    fn empty_document_is_the_base() {
        let base = RunConfig::micro();
        assert_eq!(RunConfig::from_json("{}", &base).unwrap(), base);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let text = r#"{"train": {"epochs": 3, "epoch": 4}, "bogus": {}, "model": {"depthh": 1}}"#;
        let errs = messages(RunConfig::from_json(text, &RunConfig::micro()).unwrap_err());
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("train.epoch`")));
        assert!(errs.iter().any(|e| e.contains("bogus")));
        assert!(errs.iter().any(|e| e.contains("model.depthh")));
    }

    #[test]
    fn overrides_resolve_flat_and_dotted_keys() {
        let mut c = RunConfig::micro();
        c.apply_overrides(&["epochs=2", "centering=off", "schedule.base_lr=0.01", "mask_strategy=uniform"])
            .unwrap();
        assert_eq!(c.train.epochs, 2);
        assert!(!c.schedule.centering);
        assert_eq!(c.schedule.base_lr, 0.01);
        assert_eq!(c.masking.mask_strategy, MaskStrategy::Uniform);
        c.apply_overrides(&["predictor_mode=self_full", "dataset=data/x"]).unwrap();
        assert_eq!(c.model.predictor_mode, crate::network::PredictorMode::SelfFull);
        assert_eq!(c.data.dataset, "data/x");
    }

    #[test]
    fn override_errors_name_every_key() {
        let mut c = RunConfig::micro();
        let before = c.clone();
        let errs = messages(c.apply_overrides(&["nope=1", "epochs=lots", "novalue"]).unwrap_err());
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(errs[0].contains("nope"));
        assert!(errs[1].contains("epochs"));
        assert_eq!(c, before);
    }

    #[test]
    fn semantic_errors_are_collected() {
        let mut c = RunConfig::micro();
        c.train.batch_size = 0;
        c.masking.mask_ratio = 1.5;
        c.schedule.tau_student = -1.0;
        let errs = c.validate();
        assert!(errs.len() >= 3, "{errs:?}");
    }

    #[test]
    fn digest_ignores_paths_only() {
        let a = RunConfig::micro();
        let mut b = a.clone();
        b.data.output = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.train.seed += 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::small();
        assert_eq!(RunConfig::from_json(&c.to_json_pretty(), &RunConfig::micro()).unwrap(), c);
    }
}
