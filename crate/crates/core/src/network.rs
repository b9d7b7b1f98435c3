//! The student/teacher network: point-patch embedding, position MLP,
//! pre-norm transformer encoder, asymmetric mask-query predictor and the two
//! projection heads.
//!
//! All forward functions operate on a batch of equally shaped sequences
//! stacked along rows, so one set of matrix products serves the whole batch.
//! Linear weights are stored `[in, out]` except the final head layer, which
//! is stored `[out, in]` so that its rows can be weight-normalized.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::PatchSet;
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    /// Queries attend to the context only, never to each other.
    #[default]
    CrossOnly,
    /// Context and queries share one self-attention sequence.
    SelfFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Cls,
    Patch,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Cls => "cls_head",
            Head::Patch => "patch_head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of one input point: 3 coordinates plus feature channels.
    pub point_dim: usize,
    pub patch_mlp1: [usize; 2],
    pub patch_mlp2: [usize; 2],
    pub pos_hidden: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub predictor_dim: usize,
    pub predictor_depth: usize,
    pub predictor_heads: usize,
    pub predictor_mlp_dim: usize,
    pub predictor_mode: PredictorMode,
    /// Hidden widths of the projection head; the last entry is the bottleneck.
    pub head_dims: [usize; 3],
    pub n_tokens: usize,
    /// L2-normalize the bottleneck features before the last head layer.
    pub head_l2_bottleneck: bool,
    pub head_weight_norm: bool,
    pub drop_path: f64,
    /// Standard deviation of the truncated-normal weight init (cut at two std).
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::vit_s()
    }
}

impl ModelConfig {
    pub fn vit_s() -> Self {
        Self {
            point_dim: 3,
            patch_mlp1: [128, 256],
            patch_mlp2: [512, 384],
            pos_hidden: 128,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_dim: 1536,
            predictor_dim: 192,
            predictor_depth: 6,
            predictor_heads: 3,
            predictor_mlp_dim: 768,
            predictor_mode: PredictorMode::CrossOnly,
            head_dims: [1024, 1024, 256],
            n_tokens: 4096,
            head_l2_bottleneck: true,
            head_weight_norm: false,
            drop_path: 0.0,
            init_std: 0.02,
        }
    }

    /// Small model for CPU training runs; keeps the full token vocabulary.
    /// At these widths the 0.02 init leaves near-constant head outputs, so
    /// the init is wider and the last head layer is weight-normalized.
    pub fn micro() -> Self {
        Self {
            init_std: 0.1,
            head_weight_norm: true,
            patch_mlp1: [32, 64],
            patch_mlp2: [128, 64],
            pos_hidden: 32,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_dim: 128,
            predictor_dim: 32,
            predictor_depth: 2,
            predictor_heads: 2,
            predictor_mlp_dim: 64,
            head_dims: [128, 128, 32],
            ..Self::vit_s()
        }
    }

    /// Tiny model used by the finite-difference gradient check. The init is
    /// wide enough that the normalized bottleneck stays well conditioned.
    pub fn gradcheck() -> Self {
        Self {
            init_std: 0.25,
            patch_mlp1: [8, 8],
            patch_mlp2: [16, 16],
            pos_hidden: 8,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_dim: 32,
            predictor_dim: 8,
            predictor_depth: 2,
            predictor_heads: 2,
            predictor_mlp_dim: 16,
            head_dims: [16, 16, 8],
            n_tokens: 32,
            ..Self::vit_s()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let positive = [
            ("point_dim", self.point_dim),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("pos_hidden", self.pos_hidden),
            ("predictor_dim", self.predictor_dim),
            ("predictor_heads", self.predictor_heads),
            ("predictor_mlp_dim", self.predictor_mlp_dim),
            ("n_tokens", self.n_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.point_dim < 3 {
            errs.push("point_dim must be at least 3".into());
        }
        if self.patch_mlp1.contains(&0) || self.patch_mlp2.contains(&0) || self.head_dims.contains(&0) {
            errs.push("layer widths must be positive".into());
        }
        if self.heads > 0 && self.embed_dim % self.heads != 0 {
            errs.push(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.predictor_heads > 0 && self.predictor_dim % self.predictor_heads != 0 {
            errs.push(format!(
                "predictor_dim {} not divisible by predictor_heads {}",
                self.predictor_dim, self.predictor_heads
            ));
        }
        if self.patch_mlp2[1] != self.embed_dim {
            errs.push(format!(
                "patch_mlp2 output {} must equal embed_dim {}",
                self.patch_mlp2[1], self.embed_dim
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            errs.push(format!("init_std {} must be positive", self.init_std));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            errs.push(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn mlp_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, dims: [usize; 3]) {
    out.push((format!("{prefix}.fc1.weight"), vec![dims[0], dims[1]], Init::Normal));
    out.push((format!("{prefix}.norm.weight"), vec![dims[1]], Init::Ones));
    out.push((format!("{prefix}.fc2.weight"), vec![dims[1], dims[2]], Init::Normal));
}

fn block_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize, mlp: usize, cross: bool) {
    out.push((format!("{prefix}.norm1.weight"), vec![d], Init::Ones));
    if cross {
        out.push((format!("{prefix}.norm_ctx.weight"), vec![d], Init::Ones));
    }
    for p in ["q", "k", "v", "proj"] {
        out.push((format!("{prefix}.attn.{p}.weight"), vec![d, d], Init::Normal));
    }
    out.push((format!("{prefix}.norm2.weight"), vec![d], Init::Ones));
    out.push((format!("{prefix}.mlp.fc1.weight"), vec![d, mlp], Init::Normal));
    out.push((format!("{prefix}.mlp.fc2.weight"), vec![mlp, d], Init::Normal));
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let d = cfg.embed_dim;
    let [h1, o1] = cfg.patch_mlp1;
    let [h2, o2] = cfg.patch_mlp2;
    mlp_shapes(&mut out, "patch_embed.mlp1", [cfg.point_dim, h1, o1]);
    mlp_shapes(&mut out, "patch_embed.mlp2", [2 * o1, h2, o2]);
    out.push(("pos_embed.fc1.weight".into(), vec![3, cfg.pos_hidden], Init::Normal));
    out.push(("pos_embed.fc2.weight".into(), vec![cfg.pos_hidden, d], Init::Normal));
    out.push(("cls_token".into(), vec![1, d], Init::Normal));
    for i in 0..cfg.depth {
        block_shapes(&mut out, &format!("encoder.blocks.{i}"), d, cfg.mlp_dim, false);
    }
    if cfg.depth > 0 {
        out.push(("encoder.norm.weight".into(), vec![d], Init::Ones));
    }
    let dp = cfg.predictor_dim;
    out.push(("predictor.mask_token".into(), vec![1, dp], Init::Normal));
    out.push(("predictor.pos_embed.fc1.weight".into(), vec![3, cfg.pos_hidden], Init::Normal));
    out.push(("predictor.pos_embed.fc2.weight".into(), vec![cfg.pos_hidden, dp], Init::Normal));
    out.push(("predictor.embed.weight".into(), vec![d, dp], Init::Normal));
    let cross = cfg.predictor_mode == PredictorMode::CrossOnly;
    for i in 0..cfg.predictor_depth {
        block_shapes(&mut out, &format!("predictor.blocks.{i}"), dp, cfg.predictor_mlp_dim, cross);
    }
    out.push(("predictor.norm.weight".into(), vec![dp], Init::Ones));
    out.push(("predictor.out.weight".into(), vec![dp, d], Init::Normal));
    let [a, b, c] = cfg.head_dims;
    for head in [Head::Cls, Head::Patch] {
        let p = head.prefix();
        for (name, i, o) in [("fc1", d, a), ("fc2", a, b), ("fc3", b, c)] {
            out.push((format!("{p}.{name}.weight"), vec![i, o], Init::Normal));
            out.push((format!("{p}.{name}.bias"), vec![o], Init::Zeros));
        }
        out.push((format!("{p}.last.weight"), vec![cfg.n_tokens, c], Init::Normal));
        out.push((format!("{p}.last.bias"), vec![cfg.n_tokens], Init::Zeros));
    }
    out
}

/// Every parameter name with its shape, in registry order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Parameters the momentum teacher mirrors: everything except the predictor.
pub fn is_teacher_param(name: &str) -> bool {
    !name.starts_with("predictor.")
}

/// Exempt from weight decay: vectors (norm gains, biases) and the learned tokens.
pub fn is_decay_exempt(name: &str, shape: &[usize]) -> bool {
    shape.len() <= 1 || name == "cls_token" || name == "predictor.mask_token"
}

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, dist: &Normal<f64>, std: f64) -> f64 {
    loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Truncated normal weights (`init_std`, cut at two std), zero biases, unit gains.
pub fn init_params<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Parameters<T> {
    let dist = Normal::new(0.0, cfg.init_std).expect("valid normal");
    layout(cfg)
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal => (0..n).map(|_| T::of(trunc_normal(rng, &dist, cfg.init_std))).collect(),
            };
            (name, Tensor::from_vec(&shape, data))
        })
        .collect()
}

/// Checks that `params` holds exactly the expected tensors (only the teacher
/// subset when `teacher` is set), with matching shapes and finite values.
pub fn validate_params<T: Real>(cfg: &ModelConfig, params: &Parameters<T>, teacher: bool) -> Result<()> {
    let mut errs = Vec::new();
    let expected: Vec<_> = param_shapes(cfg)
        .into_iter()
        .filter(|(n, _)| !teacher || is_teacher_param(n))
        .collect();
    for (name, shape) in &expected {
        match params.get(name) {
            None => errs.push(format!("missing tensor `{name}`")),
            Some(t) if t.shape() != shape.as_slice() => errs.push(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )),
            Some(t) if !t.is_finite() => errs.push(format!("tensor `{name}` is not finite")),
            Some(_) => {}
        }
    }
    for name in params.names() {
        if !expected.iter().any(|(n, _)| n == name) {
            errs.push(format!("unexpected tensor `{name}`"));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(errs.join("; ")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCounts {
    /// Patch embedding, encoder position MLP and class token.
    pub patch_embed: usize,
    pub encoder: usize,
    pub predictor: usize,
    pub cls_head: usize,
    pub patch_head: usize,
}

pub fn param_counts(cfg: &ModelConfig) -> ParamCounts {
    let mut c = ParamCounts::default();
    for (name, shape) in param_shapes(cfg) {
        let n: usize = shape.iter().product();
        let slot = if name.starts_with("encoder.") {
            &mut c.encoder
        } else if name.starts_with("predictor.") {
            &mut c.predictor
        } else if name.starts_with("cls_head.") {
            &mut c.cls_head
        } else if name.starts_with("patch_head.") {
            &mut c.patch_head
        } else {
            &mut c.patch_embed
        };
        *slot += n;
    }
    c
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, prefix: &str, bias: bool) -> Var {
    let w = g.param(&format!("{prefix}.weight"));
    let y = g.matmul(x, w);
    if bias {
        let b = g.param(&format!("{prefix}.bias"));
        g.add_row(y, b)
    } else {
        y
    }
}

fn norm<T: Real>(g: &mut Graph<T>, x: Var, name: &str) -> Var {
    let gain = g.param(&format!("{name}.weight"));
    g.rms_norm(x, gain)
}

/// Linear, RMS norm, GELU, linear.
fn point_mlp<T: Real>(g: &mut Graph<T>, x: Var, prefix: &str) -> Var {
    let h = linear(g, x, &format!("{prefix}.fc1"), false);
    let h = norm(g, h, &format!("{prefix}.norm"));
    let h = g.gelu(h);
    linear(g, h, &format!("{prefix}.fc2"), false)
}

/// Patch embedding of `[P*K, point_dim]` stacked patch points into `[P, D]`:
/// per-point MLP, max-pool, concatenate the pooled vector to every point,
/// second MLP, final max-pool.
pub fn patch_embed<T: Real>(g: &mut Graph<T>, points: Var, k: usize) -> Var {
    let z = point_mlp(g, points, "patch_embed.mlp1");
    let pooled = g.group_max(z, k);
    let cat = g.group_concat(z, pooled, k);
    let z2 = point_mlp(g, cat, "patch_embed.mlp2");
    g.group_max(z2, k)
}

/// Two-layer position MLP on `[P, 3]` centers. `prefix` selects the encoder
/// (`pos_embed`) or predictor (`predictor.pos_embed`) instance.
pub fn pos_embed<T: Real>(g: &mut Graph<T>, prefix: &str, centers: Var) -> Var {
    let h = linear(g, centers, &format!("{prefix}.fc1"), false);
    let h = g.gelu(h);
    linear(g, h, &format!("{prefix}.fc2"), false)
}

/// Row index of the class token of sequence `b` in encoder output.
pub fn cls_row(b: usize, n_patches: usize) -> usize {
    b * (1 + n_patches)
}

/// Rows of all patch tokens in encoder output, sequence-major.
pub fn patch_rows(batch: usize, n_patches: usize) -> Vec<usize> {
    (0..batch)
        .flat_map(|b| (0..n_patches).map(move |i| b * (1 + n_patches) + 1 + i))
        .collect()
}

pub fn cls_rows(batch: usize, n_patches: usize) -> Vec<usize> {
    (0..batch).map(|b| cls_row(b, n_patches)).collect()
}

/// Interleaves one leading row before every block of `n` rows: index 0 of
/// the source is the leading row, rows `1..` are the blocks.
fn interleave_index(batch: usize, n: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * (n + 1));
    for b in 0..batch {
        idx.push(0);
        idx.extend((0..n).map(|i| 1 + b * n + i));
    }
    idx
}

fn drop_path_factors(rng: &mut dyn RngCore, rate: f64, batch: usize, len: usize) -> Vec<f64> {
    let keep = 1.0 - rate;
    let mut f = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let v = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
        f.extend(std::iter::repeat(v).take(len));
    }
    f
}

#[allow(clippy::too_many_arguments)]
fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    context: Option<Var>,
    prefix: &str,
    heads: usize,
    batch: usize,
    drop: &mut Option<(&mut dyn RngCore, f64)>,
) -> Var {
    let h = norm(g, x, &format!("{prefix}.norm1"));
    let kv = match context {
        Some(c) => norm(g, c, &format!("{prefix}.norm_ctx")),
        None => h,
    };
    let q = linear(g, h, &format!("{prefix}.attn.q"), false);
    let k = linear(g, kv, &format!("{prefix}.attn.k"), false);
    let v = linear(g, kv, &format!("{prefix}.attn.v"), false);
    let a = g.attention_batched(q, k, v, heads, batch);
    let mut a = linear(g, a, &format!("{prefix}.attn.proj"), false);
    let len = g.value(x).rows() / batch;
    if let Some((rng, rate)) = drop {
        let f = drop_path_factors(&mut **rng, *rate, batch, len);
        a = g.scale_rows(a, f.into_iter().map(T::of).collect());
    }
    let x = g.add(x, a);
    let h = norm(g, x, &format!("{prefix}.norm2"));
    let h = linear(g, h, &format!("{prefix}.mlp.fc1"), false);
    let h = g.gelu(h);
    let mut m = linear(g, h, &format!("{prefix}.mlp.fc2"), false);
    if let Some((rng, rate)) = drop {
        let f = drop_path_factors(&mut **rng, *rate, batch, len);
        m = g.scale_rows(m, f.into_iter().map(T::of).collect());
    }
    g.add(x, m)
}

/// Contextualizing encoder over `batch` sequences of `n` patches.
///
/// `patch_emb` and `pos` are `[batch*n, D]`. The class token is prepended to
/// every sequence; before each block the position embedding is added to the
/// patch rows (the class token has no position). A final RMS norm follows
/// the last block. Returns `[batch*(1+n), D]`.
/// Stochastic depth is applied when `rng` is given and the configured rate is
/// positive.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    patch_emb: Var,
    pos: Var,
    batch: usize,
    rng: Option<&mut dyn RngCore>,
) -> Var {
    let rows = g.value(patch_emb).rows();
    assert_eq!(rows % batch, 0, "encode: rows not divisible by batch");
    let n = rows / batch;
    let idx = interleave_index(batch, n);
    let cls = g.param("cls_token");
    let all = g.concat_rows(&[cls, patch_emb]);
    let mut x = g.gather_rows(all, &idx);
    if cfg.depth == 0 {
        return x;
    }
    let zero = g.constant(Tensor::zeros(&[1, cfg.embed_dim]));
    let all_pos = g.concat_rows(&[zero, pos]);
    let pos_full = g.gather_rows(all_pos, &idx);
    let mut drop = rng.filter(|_| cfg.drop_path > 0.0).map(|r| (r, cfg.drop_path));
    for i in 0..cfg.depth {
        let xi = g.add(x, pos_full);
        x = transformer_block(g, xi, None, &format!("encoder.blocks.{i}"), cfg.heads, batch, &mut drop);
    }
    norm(g, x, "encoder.norm")
}

/// Predictor: fills `batch` groups of `E` mask queries from `batch` groups of
/// `S` contextualized visible tokens (`context` is `[batch*S, D]`, class token
/// excluded; `query_centers` is `[batch*E, 3]`). Returns `[batch*E, D]`.
pub fn predict<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    context: Var,
    query_centers: Var,
    batch: usize,
) -> Var {
    let s = g.value(context).rows() / batch;
    let e = g.value(query_centers).rows() / batch;
    let ctx = linear(g, context, "predictor.embed", false);
    let qpos = pos_embed(g, "predictor.pos_embed", query_centers);
    let mask = g.param("predictor.mask_token");
    let mut q = g.add_row(qpos, mask);
    let mut none = None;
    match cfg.predictor_mode {
        PredictorMode::CrossOnly => {
            for i in 0..cfg.predictor_depth {
                let prefix = format!("predictor.blocks.{i}");
                q = transformer_block(g, q, Some(ctx), &prefix, cfg.predictor_heads, batch, &mut none);
            }
        }
        PredictorMode::SelfFull => {
            let mut idx = Vec::with_capacity(batch * (s + e));
            for b in 0..batch {
                idx.extend(b * s..(b + 1) * s);
                idx.extend((batch * s + b * e)..(batch * s + (b + 1) * e));
            }
            let all = g.concat_rows(&[ctx, q]);
            let mut x = g.gather_rows(all, &idx);
            for i in 0..cfg.predictor_depth {
                let prefix = format!("predictor.blocks.{i}");
                x = transformer_block(g, x, None, &prefix, cfg.predictor_heads, batch, &mut none);
            }
            let qidx: Vec<usize> = (0..batch)
                .flat_map(|b| (0..e).map(move |j| b * (s + e) + s + j))
                .collect();
            q = g.gather_rows(x, &qidx);
        }
    }
    let q = norm(g, q, "predictor.norm");
    linear(g, q, "predictor.out", false)
}

/// Projection head: three linear layers (GELU between) down to the
/// bottleneck, then a final linear layer to `n_tokens` logits. With the
/// default small init, an unnormalized bottleneck yields near-constant logits;
/// normalizing it keeps the logit scale independent of depth and init.
pub fn project<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, head: Head, x: Var) -> Var {
    let p = head.prefix();
    let h = linear(g, x, &format!("{p}.fc1"), true);
    let h = g.gelu(h);
    let h = linear(g, h, &format!("{p}.fc2"), true);
    let h = g.gelu(h);
    let mut h = linear(g, h, &format!("{p}.fc3"), true);
    if cfg.head_l2_bottleneck {
        h = g.l2_normalize_rows(h);
    }
    let mut w = g.param(&format!("{p}.last.weight"));
    if cfg.head_weight_norm {
        w = g.l2_normalize_rows(w);
    }
    let logits = g.matmul_t(h, w);
    let b = g.param(&format!("{p}.last.bias"));
    g.add_row(logits, b)
}

/// Stacked inputs of equally shaped views.
#[derive(Debug, Clone)]
pub struct ViewTensors<T> {
    /// `[views*n_patches*k, point_dim]`
    pub points: Tensor<T>,
    /// `[views*n_patches, 3]`
    pub centers: Tensor<T>,
    pub views: usize,
    pub n_patches: usize,
    pub k: usize,
}

pub fn stack_views<T: Real>(views: &[&PatchSet]) -> Result<ViewTensors<T>> {
    let first = views
        .first()
        .ok_or_else(|| Error::InvalidArgument("no views to stack".into()))?;
    let (n, k, w) = (first.n_patches(), first.k, first.point_width());
    let mut points = Vec::with_capacity(views.len() * n * k * w);
    let mut centers = Vec::with_capacity(views.len() * n * 3);
    for v in views {
        if v.n_patches() != n || v.k != k || v.point_width() != w {
            return Err(Error::ShapeMismatch("views in a batch must share patch layout".into()));
        }
        points.extend(v.points.iter().map(|&x| T::of(x)));
        centers.extend(v.centers.iter().flatten().map(|&x| T::of(x)));
    }
    Ok(ViewTensors {
        points: Tensor::from_vec(&[views.len() * n * k, w], points),
        centers: Tensor::from_vec(&[views.len() * n, 3], centers),
        views: views.len(),
        n_patches: n,
        k,
    })
}

/// Patch and position embeddings of stacked views, `[views*n_patches, D]` each.
pub fn embed_views<T: Real>(g: &mut Graph<T>, views: &ViewTensors<T>) -> (Var, Var) {
    let pts = g.constant(views.points.clone());
    let centers = g.constant(views.centers.clone());
    let emb = patch_embed(g, pts, views.k);
    let pos = pos_embed(g, "pos_embed", centers);
    (emb, pos)
}

/// Embeds and encodes whole views; returns `[views*(1+n_patches), D]`.
pub fn encode_views<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    views: &ViewTensors<T>,
    rng: Option<&mut dyn RngCore>,
) -> Var {
    let (emb, pos) = embed_views(g, views);
    encode(g, cfg, emb, pos, views.views, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{patchify_from, PointCloud};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn tiny() -> ModelConfig {
        ModelConfig::gradcheck()
    }

    #[test]
    fn vit_s_parameter_counts_match_reference_sizes() {
        let c = param_counts(&ModelConfig::vit_s());
        let m = |v: usize| v as f64 / 1e6;
        assert!((m(c.patch_embed) - 0.5).abs() < 0.05, "{c:?}");
        assert!((m(c.encoder) - 21.2).abs() < 0.05, "{c:?}");
        assert!((m(c.predictor) - 2.9).abs() < 0.1, "{c:?}");
        assert!((m(c.cls_head) - 2.8).abs() < 0.05, "{c:?}");
        assert_eq!(c.cls_head, c.patch_head);
    }

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::vit_s(), ModelConfig::micro(), ModelConfig::gradcheck()] {
            assert!(cfg.validate().is_empty());
        }
        let bad = ModelConfig {
            heads: 5,
            ..ModelConfig::vit_s()
        };
        assert_eq!(bad.validate().len(), 1);
    }

    #[test]
    fn init_follows_layout() {
        let cfg = tiny();
        let p: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        validate_params(&cfg, &p, false).unwrap();
        assert!(p.get("cls_head.fc1.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("encoder.blocks.0.norm1.weight").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p
            .get("encoder.blocks.1.attn.q.weight")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= 2.0 * cfg.init_std));
        let default_init: Parameters<f64> = init_params(&ModelConfig::vit_s(), &mut ChaCha8Rng::seed_from_u64(1));
        let w = default_init.get("encoder.blocks.3.mlp.fc1.weight").unwrap().data();
        assert!(w.iter().all(|v| v.abs() <= 0.04));
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        // Truncation at two std shrinks the spread by about 12%.
        assert!((std - 0.02 * 0.8796).abs() < 5e-4, "{std}");
        let teacher = p.filtered(is_teacher_param);
        validate_params(&cfg, &teacher, true).unwrap();
        assert!(validate_params(&cfg, &teacher, false).is_err());
    }

    #[test]
    fn patch_embedding_ignores_point_order_and_duplicates() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Parameters<f64> = init_params(&cfg, &mut rng);
        let pts = random_tensor(&mut rng, &[2 * 5, 3]);
        let perm = [3, 0, 4, 2, 1, 6, 5, 9, 8, 7];
        let dup: Vec<usize> = (0..2).flat_map(|b| (0..5).flat_map(move |i| [b * 5 + i; 2])).collect();
        let mut g = Graph::no_grad(&p);
        let x = g.constant(pts.clone());
        let base = patch_embed(&mut g, x, 5);
        let xp = g.constant(pts.gather_rows(&perm));
        let permuted = patch_embed(&mut g, xp, 5);
        let xd = g.constant(pts.gather_rows(&dup));
        let doubled = patch_embed(&mut g, xd, 10);
        assert_eq!(g.value(base).shape(), &[2, 16]);
        assert_eq!(g.value(base).data(), g.value(permuted).data());
        assert_eq!(g.value(base).data(), g.value(doubled).data());
    }

    #[test]
    fn pos_embedding_is_lipschitz_in_centers() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Parameters<f64> = init_params(&cfg, &mut rng);
        let c = random_tensor(&mut rng, &[4, 3]);
        let mut c2 = c.clone();
        c2.data_mut()[0] += 1e-7;
        let mut g = Graph::no_grad(&p);
        let a = g.constant(c);
        let b = g.constant(c2);
        let ea = pos_embed(&mut g, "pos_embed", a);
        let eb = pos_embed(&mut g, "pos_embed", b);
        // GELU' is bounded by 1.13, so spectral norms bound the change.
        let w1 = p.get("pos_embed.fc1.weight").unwrap().sum_squares().sqrt();
        let w2 = p.get("pos_embed.fc2.weight").unwrap().sum_squares().sqrt();
        let diff: f64 = g
            .value(ea)
            .data()
            .iter()
            .zip(g.value(eb).data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff > 0.0 && diff <= 1e-7 * 1.13 * w1 * w2);
        assert_eq!(g.value(ea).row(1), g.value(eb).row(1));
    }

    #[test]
    fn encoder_without_blocks_returns_input_tokens() {
        let cfg = ModelConfig {
            depth: 0,
            ..tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Parameters<f64> = init_params(&cfg, &mut rng);
        let mut g = Graph::no_grad(&p);
        let e = g.constant(random_tensor(&mut rng, &[3, 16]));
        let pos = g.constant(random_tensor(&mut rng, &[3, 16]));
        let out = encode(&mut g, &cfg, e, pos, 1, None);
        assert_eq!(g.value(out).row(0), p.get("cls_token").unwrap().data());
        assert_eq!(&g.value(out).data()[16..], g.value(e).data());
    }

    #[test]
    fn encoder_is_permutation_equivariant_over_patches() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Parameters<f64> = init_params(&cfg, &mut rng);
        let e = random_tensor(&mut rng, &[5, 16]);
        let pos = random_tensor(&mut rng, &[5, 16]);
        let perm = [2, 4, 0, 1, 3];
        let mut g = Graph::no_grad(&p);
        let (ev, pv) = (g.constant(e.clone()), g.constant(pos.clone()));
        let out = encode(&mut g, &cfg, ev, pv, 1, None);
        let (ep, pp) = (g.constant(e.gather_rows(&perm)), g.constant(pos.gather_rows(&perm)));
        let out_p = encode(&mut g, &cfg, ep, pp, 1, None);
        let (a, b) = (g.value(out), g.value(out_p));
        for k in 0..16 {
            assert!((a.row(0)[k] - b.row(0)[k]).abs() < 1e-12);
        }
        for (j, &src) in perm.iter().enumerate() {
            for k in 0..16 {
                assert!((a.row(1 + src)[k] - b.row(1 + j)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_encoding_matches_single_sequences() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p: Parameters<f32> = init_params(&cfg, &mut rng);
        let e = random_tensor(&mut rng, &[6, 16]).cast::<f32>();
        let pos = random_tensor(&mut rng, &[6, 16]).cast::<f32>();
        let mut g = Graph::no_grad(&p);
        let (ev, pv) = (g.constant(e.clone()), g.constant(pos.clone()));
        let joint = encode(&mut g, &cfg, ev, pv, 2, None);
        let second = [3, 4, 5];
        let (e2, p2) = (g.constant(e.gather_rows(&second)), g.constant(pos.gather_rows(&second)));
        let single = encode(&mut g, &cfg, e2, p2, 1, None);
        assert_eq!(g.value(single).data(), &g.value(joint).data()[4 * 16..]);
    }

    #[test]
    fn cross_only_queries_are_independent_but_self_full_are_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ctx = random_tensor(&mut rng, &[4, 16]);
        let q = random_tensor(&mut rng, &[3, 3]);
        for (mode, expect_equal) in [(PredictorMode::CrossOnly, true), (PredictorMode::SelfFull, false)] {
            let cfg = ModelConfig {
                predictor_mode: mode,
                ..tiny()
            };
            let p: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(8));
            let mut g = Graph::no_grad(&p);
            let c = g.constant(ctx.clone());
            let qa = g.constant(q.clone());
            let all = predict(&mut g, &cfg, c, qa, 1);
            assert_eq!(g.value(all).shape(), &[3, 16]);
            let q1 = g.constant(q.gather_rows(&[1]));
            let one = predict(&mut g, &cfg, c, q1, 1);
            assert_eq!(g.value(one).row(0) == g.value(all).row(1), expect_equal, "{mode:?}");
        }
    }

    #[test]
    fn head_of_zero_input_returns_final_bias() {
        let cfg = tiny();
        let mut p: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let bias: Vec<f64> = (0..32).map(|i| i as f64 * 0.01).collect();
        p.insert("patch_head.last.bias", Tensor::from_vec(&[32], bias.clone()));
        let mut g = Graph::no_grad(&p);
        let x = g.constant(Tensor::zeros(&[2, 16]));
        let out = project(&mut g, &cfg, Head::Patch, x);
        assert_eq!(g.value(out).shape(), &[2, 32]);
        assert_eq!(g.value(out).row(1), bias.as_slice());
    }

    #[test]
    fn weight_norm_head_is_scale_invariant_in_last_layer() {
        let cfg = ModelConfig {
            head_weight_norm: true,
            ..tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p: Parameters<f64> = init_params(&cfg, &mut rng);
        let mut scaled = p.clone();
        scaled.get_mut("cls_head.last.weight").unwrap().scale_assign(3.0);
        let x = random_tensor(&mut rng, &[2, 16]);
        let run = |params: &Parameters<f64>| {
            let mut g = Graph::no_grad(params);
            let xv = g.constant(x.clone());
            let o = project(&mut g, &cfg, Head::Cls, xv);
            g.value(o).clone()
        };
        let (a, b) = (run(&p), run(&scaled));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_views_on_patchified_cloud() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cloud = PointCloud::from_positions(
            (0..64)
                .map(|_| [rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0)])
                .collect(),
        )
        .unwrap();
        let a = patchify_from(&cloud, 8, 4, 0).unwrap();
        let b = patchify_from(&cloud, 8, 4, 5).unwrap();
        let views = stack_views::<f64>(&[&a, &b]).unwrap();
        let p: Parameters<f64> = init_params(&cfg, &mut rng);
        let mut g = Graph::no_grad(&p);
        g.set_record_attention(true);
        let out = encode_views(&mut g, &cfg, &views, None);
        assert_eq!(g.value(out).shape(), &[2 * 9, 16]);
        assert_eq!(g.take_attention().len(), cfg.depth * 2);
        let again = encode_views(&mut g, &cfg, &views, None);
        assert_eq!(g.value(out).data(), g.value(again).data());
    }

    #[test]
    fn drop_path_rate_zero_is_identity_and_positive_rate_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = random_tensor(&mut rng, &[4, 16]);
        let pos = random_tensor(&mut rng, &[4, 16]);
        let run = |cfg: &ModelConfig, seed: u64| {
            let p: Parameters<f64> = init_params(cfg, &mut ChaCha8Rng::seed_from_u64(13));
            let mut g = Graph::no_grad(&p);
            let (ev, pv) = (g.constant(e.clone()), g.constant(pos.clone()));
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let o = encode(&mut g, cfg, ev, pv, 2, Some(&mut r));
            g.value(o).clone()
        };
        let base = tiny();
        let none = {
            let p: Parameters<f64> = init_params(&base, &mut ChaCha8Rng::seed_from_u64(13));
            let mut g = Graph::no_grad(&p);
            let (ev, pv) = (g.constant(e.clone()), g.constant(pos.clone()));
            let o = encode(&mut g, &base, ev, pv, 2, None);
            g.value(o).clone()
        };
        assert_eq!(run(&base, 0), none);
        let dropped = ModelConfig {
            drop_path: 0.9,
            ..tiny()
        };
        assert!((0..8).any(|s| run(&dropped, s) != none));
    }
}
