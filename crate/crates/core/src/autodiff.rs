//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied to its variables. Parameter
//! leaves are pulled by name from a borrowed [`Parameters`] set; a graph built
//! with [`Graph::no_grad`] evaluates the same operations without keeping any
//! backward state, which is how teacher targets are produced.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, Parameters};
use crate::tensor::{Real, Tensor};

const RMS_EPS: f64 = 1e-6;
const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(String),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Scale(Var, T),
    ScaleRows {
        a: Var,
        factors: Vec<T>,
    },
    Gelu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        probs: Vec<T>,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    GroupConcat {
        z: Var,
        pooled: Var,
        group: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        a: Var,
        indices: Vec<usize>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Tensor<T>,
        tau: T,
        probs: Vec<T>,
    },
    WeightedSum {
        a: Var,
        weights: Vec<T>,
    },
    L2NormalizeRows {
        a: Var,
        norms: Vec<T>,
    },
    KoLeo {
        a: Var,
        neighbors: Vec<usize>,
        dists: Vec<T>,
        eps: T,
    },
    SmoothL1 {
        a: Var,
        b: Var,
        beta: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p Parameters<T>,
    grad_enabled: bool,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<String, Var>,
    record_attention: bool,
    attention: Vec<Tensor<T>>,
}

/// `op(x) * op(y)` where `x` is stored `[xr, xc]` and `y` `[yr, yc]`.
#[allow(clippy::too_many_arguments)]
fn mm<T: Real>(
    x: &[T],
    xr: usize,
    xc: usize,
    tx: bool,
    y: &[T],
    yr: usize,
    yc: usize,
    ty: bool,
) -> Vec<T> {
    let (m, k, rsx, csx) = if tx {
        (xc, xr, 1, xc as isize)
    } else {
        (xr, xc, xc as isize, 1)
    };
    let (k2, n, rsy, csy) = if ty {
        (yc, yr, 1, yc as isize)
    } else {
        (yr, yc, yc as isize, 1)
    };
    assert_eq!(k, k2, "inner dimensions differ");
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        x,
        rsx,
        csx,
        y,
        rsy,
        csy,
        T::zero(),
        &mut out,
        n as isize,
        1,
    );
    out
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let x2 = x * x;
    let u = c * (x + a * x2 * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * a * x2);
    (y, dy)
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p Parameters<T>) -> Self {
        Self::build(params, true)
    }

    /// Evaluation-only graph: parameters are constants and no backward state
    /// is retained.
    pub fn no_grad(params: &'p Parameters<T>) -> Self {
        Self::build(params, false)
    }

    fn build(params: &'p Parameters<T>, grad_enabled: bool) -> Self {
        Self {
            params,
            grad_enabled,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            record_attention: false,
            attention: Vec::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn set_record_attention(&mut self, on: bool) {
        self.record_attention = on;
    }

    /// Attention probabilities recorded since the last call, one
    /// `[heads, queries, keys]` tensor per attention op.
    pub fn take_attention(&mut self) -> Vec<Tensor<T>> {
        std::mem::take(&mut self.attention)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to the named parameter. Repeated lookups return the same
    /// variable so gradients accumulate in one place.
    ///
    /// Panics if the parameter set has no tensor with this name; parameter
    /// sets are validated against the model layout before graphs are built.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"))
            .clone();
        let needs = self.grad_enabled;
        let var = self.push(value, Op::Param(name.to_string()), needs);
        self.param_vars.insert(name.to_string(), var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let value = crate::tensor::matmul(self.value(a), self.value(b), trans_b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul { a, b, trans_b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(row);
        let c = va.cols();
        assert_eq!(vr.len(), c, "add_row: width mismatch");
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, &b) in value.row_mut(r).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow { a, row }, needs)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let mut value = self.value(a).clone();
        value.scale_assign(factor);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, factor), needs)
    }

    /// Multiplies row `r` of `a` by `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<T>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(factors.len(), value.rows(), "scale_rows: factor count mismatch");
        for (r, &f) in factors.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|x| *x *= f);
        }
        let needs = self.needs(a);
        self.push(value, Op::ScaleRows { a, factors }, needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu_parts(x).0).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let needs = self.needs(a);
        self.push(value, Op::Gelu(a), needs)
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let vx = self.value(x);
        let g = self.value(gain);
        let c = vx.cols();
        assert_eq!(g.len(), c, "rms_norm: gain width mismatch");
        let eps = T::of(RMS_EPS);
        let n = T::from_usize(c).unwrap();
        let mut value = vx.clone();
        let mut inv_rms = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &gj) in value.row_mut(r).iter_mut().zip(row).zip(g.data()) {
                *o = v * inv * gj;
            }
        }
        let needs = self.needs(x) || self.needs(gain);
        self.push(value, Op::RmsNorm { x, gain, inv_rms }, needs)
    }

    /// Multi-head scaled dot-product attention. `q` is `[Tq, D]`, `k` and `v`
    /// are `[Tk, D]`; head `h` owns columns `h*D/H .. (h+1)*D/H`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        self.attention_batched(q, k, v, heads, 1)
    }

    /// Attention over `batch` independent sequences stacked along rows:
    /// `q` is `[batch*Tq, D]`, `k` and `v` are `[batch*Tk, D]`. Sequence `b`
    /// only attends within its own rows.
    pub fn attention_batched(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: usize) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        assert!(batch > 0, "attention: empty batch");
        assert_eq!(vq.rows() % batch, 0, "attention: query rows not divisible by batch");
        assert_eq!(vk.rows() % batch, 0, "attention: key rows not divisible by batch");
        let (tq, tk) = (vq.rows() / batch, vk.rows() / batch);
        assert_eq!(vk.cols(), d, "attention: key width mismatch");
        assert_eq!(vv.rows(), vk.rows(), "attention: value length mismatch");
        assert_eq!(vv.cols(), d, "attention: value width mismatch");
        assert!(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); batch * heads * tq * tk];
        let mut out = Tensor::zeros(&[batch * tq, d]);
        for b in 0..batch {
            let (qo, ko) = (b * tq * d, b * tk * d);
            for h in 0..heads {
                let off = h * dh;
                let pb = (b * heads + h) * tq * tk;
                let p = &mut probs[pb..pb + tq * tk];
                T::gemm(
                    tq,
                    dh,
                    tk,
                    scale,
                    &vq.data()[qo + off..],
                    d as isize,
                    1,
                    &vk.data()[ko + off..],
                    1,
                    d as isize,
                    T::zero(),
                    p,
                    tk as isize,
                    1,
                );
                for row in p.chunks_mut(tk) {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= sum;
                    }
                }
                T::gemm(
                    tq,
                    tk,
                    dh,
                    T::one(),
                    p,
                    tk as isize,
                    1,
                    &vv.data()[ko + off..],
                    d as isize,
                    1,
                    T::zero(),
                    &mut out.data_mut()[qo + off..],
                    d as isize,
                    1,
                );
            }
        }
        if self.record_attention {
            for chunk in probs.chunks(heads * tq * tk) {
                self.attention
                    .push(Tensor::from_vec(&[heads, tq, tk], chunk.to_vec()));
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                probs,
            },
            needs,
        )
    }

    /// Column-wise max over consecutive groups of `group` rows:
    /// `[G*group, C] -> [G, C]`. Ties resolve to the first row.
    pub fn group_max(&mut self, x: Var, group: usize) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        assert!(group > 0 && vx.rows() % group == 0, "group_max: rows not divisible");
        let g = vx.rows() / group;
        let mut value = Tensor::zeros(&[g, c]);
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            let base = gi * group;
            let out = value.row_mut(gi);
            out.copy_from_slice(vx.row(base));
            argmax[gi * c..(gi + 1) * c].fill(base);
            for r in base + 1..base + group {
                for (j, &v) in vx.row(r).iter().enumerate() {
                    if v > out[j] {
                        out[j] = v;
                        argmax[gi * c + j] = r;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(value, Op::GroupMax { x, argmax }, needs)
    }

    /// Appends row `g` of `pooled` to each of the `group` rows of block `g`
    /// in `z`: `[G*group, C1] , [G, C2] -> [G*group, C1 + C2]`.
    pub fn group_concat(&mut self, z: Var, pooled: Var, group: usize) -> Var {
        let vz = self.value(z);
        let vp = self.value(pooled);
        let (c1, c2) = (vz.cols(), vp.cols());
        assert_eq!(vz.rows(), vp.rows() * group, "group_concat: group mismatch");
        let mut data = Vec::with_capacity(vz.rows() * (c1 + c2));
        for r in 0..vz.rows() {
            data.extend_from_slice(vz.row(r));
            data.extend_from_slice(vp.row(r / group));
        }
        let value = Tensor::from_vec(&[vz.rows(), c1 + c2], data);
        let needs = self.needs(z) || self.needs(pooled);
        self.push(value, Op::GroupConcat { z, pooled, group }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat_rows: width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let value = Tensor::from_vec(&[rows, c], data);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).gather_rows(indices);
        let needs = self.needs(a);
        self.push(
            value,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            needs,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let indices: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &indices)
    }

    /// Per-row cross-entropy `-sum_z t(z) log softmax(logits / tau)(z)`
    /// against constant targets. Returns a `[rows]` vector.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor<T>, tau: T) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), targets.shape(), "soft_cross_entropy: target shape");
        assert!(tau > T::zero(), "soft_cross_entropy: temperature must be positive");
        let (r, c) = (vl.rows(), vl.cols());
        let mut probs = vec![T::zero(); r * c];
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = vl.row(i);
            let p = &mut probs[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max) / tau;
                sum += pj.exp();
            }
            let lse = sum.ln();
            let mut ce = T::zero();
            for (pj, &t) in p.iter_mut().zip(targets.row(i)) {
                let logp = *pj - lse;
                ce -= t * logp;
                *pj = logp.exp();
            }
            out.push(ce);
        }
        let value = Tensor::from_vec(&[r], out);
        let needs = self.needs(logits);
        self.push(
            value,
            Op::SoftCrossEntropy {
                logits,
                targets,
                tau,
                probs,
            },
            needs,
        )
    }

    /// Scalar `sum_i w_i a_i` over all entries of `a`.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), weights.len(), "weighted_sum: weight count");
        let s = va
            .data()
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| x * w)
            .sum::<T>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::WeightedSum { a, weights }, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let w = T::one() / T::from_usize(n).unwrap();
        self.weighted_sum(a, vec![w; n])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let eps = T::of(L2_EPS);
        let mut value = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let n = va.row(r).iter().map(|&x| x * x).sum::<T>().sqrt();
            let n = n.max(eps);
            norms.push(n);
            for x in value.row_mut(r) {
                *x /= n;
            }
        }
        let needs = self.needs(a);
        self.push(value, Op::L2NormalizeRows { a, norms }, needs)
    }

    /// Kozachenko-Leonenko style spreading term: `-(1/B) sum_i log rho_i`
    /// with `rho_i` the distance from row `i` to its nearest other row,
    /// clamped below at `eps`. Nearest-neighbour ties go to the lower index.
    pub fn koleo(&mut self, a: Var, eps: T) -> Var {
        let va = self.value(a);
        let b = va.rows();
        assert!(b >= 2, "koleo: needs at least two rows");
        let mut neighbors = Vec::with_capacity(b);
        let mut dists = Vec::with_capacity(b);
        let mut clamped = 0usize;
        let mut loss = T::zero();
        for i in 0..b {
            let mut best = (usize::MAX, T::infinity());
            for j in 0..b {
                if j == i {
                    continue;
                }
                let d2 = va
                    .row(i)
                    .iter()
                    .zip(va.row(j))
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<T>();
                if d2 < best.1 {
                    best = (j, d2);
                }
            }
            let d = best.1.sqrt();
            if d <= eps {
                clamped += 1;
            }
            loss -= d.max(eps).ln();
            neighbors.push(best.0);
            dists.push(d);
        }
        if clamped > 0 {
            log::warn!("koleo: {clamped} rows coincide with a neighbour; distance clamped");
        }
        loss /= T::from_usize(b).unwrap();
        let needs = self.needs(a);
        self.push(
            Tensor::scalar(loss),
            Op::KoLeo {
                a,
                neighbors,
                dists,
                eps,
            },
            needs,
        )
    }

    /// Mean smooth-L1 distance between two equally shaped tensors.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "smooth_l1: shape mismatch");
        let half = T::of(0.5);
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| {
                let d = (x - y).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .sum::<T>()
            / T::from_usize(va.len()).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s), Op::SmoothL1 { a, b, beta }, needs)
    }

    /// Reverse sweep from the scalar `loss`. Returns the gradient of every
    /// parameter that was used on a path to `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        let mut out = Gradients::new();
        if !self.needs(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut out);
        }
        if let Some(name) = out.first_non_finite() {
            return Err(Error::NonFiniteGradient {
                name: name.to_string(),
            });
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => out.insert(name.clone(), g),
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = g.cols();
                if self.needs(*a) {
                    // dA = dC op(B)^T
                    let da = if *trans_b {
                        mm(g.data(), m, n, false, vb.data(), n, k, false)
                    } else {
                        mm(g.data(), m, n, false, vb.data(), k, n, true)
                    };
                    self.accumulate(grads, *a, Tensor::from_vec(va.shape(), da));
                }
                if self.needs(*b) {
                    let db = if *trans_b {
                        mm(g.data(), m, n, true, va.data(), m, k, false)
                    } else {
                        mm(va.data(), m, k, true, g.data(), m, n, false)
                    };
                    self.accumulate(grads, *b, Tensor::from_vec(vb.shape(), db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::AddRow { a, row } => {
                if self.needs(*row) {
                    let mut acc = vec![T::zero(); g.cols()];
                    for r in 0..g.rows() {
                        for (s, &x) in acc.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::from_vec(&shape, acc));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Scale(a, f) => {
                let mut g = g;
                g.scale_assign(*f);
                self.accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gy, &x)| gy * gelu_parts(x).1)
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(va.shape(), data));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let vx = self.value(*x);
                let gv = self.value(*gain);
                let c = vx.cols();
                let n = T::from_usize(c).unwrap();
                let mut dgain = vec![T::zero(); c];
                let mut dx = Tensor::zeros(vx.shape());
                let mut dxhat = vec![T::zero(); c];
                for r in 0..vx.rows() {
                    let inv = inv_rms[r];
                    let xr = vx.row(r);
                    let gr = g.row(r);
                    let mut dot = T::zero();
                    for j in 0..c {
                        let xhat = xr[j] * inv;
                        dgain[j] += gr[j] * xhat;
                        dxhat[j] = gr[j] * gv.data()[j];
                        dot += dxhat[j] * xhat;
                    }
                    let mean = dot / n;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (dxhat[j] - xr[j] * inv * mean);
                    }
                }
                self.accumulate(grads, *x, dx);
                let shape = gv.shape().to_vec();
                self.accumulate(grads, *gain, Tensor::from_vec(&shape, dgain));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, *batch, probs, &g, grads),
            Op::GroupMax { x, argmax, .. } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut dx = Tensor::zeros(vx.shape());
                for (idx, (&src, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    dx.data_mut()[src * c + idx % c] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GroupConcat { z, pooled, group } => {
                let (vz, vp) = (self.value(*z), self.value(*pooled));
                let c1 = vz.cols();
                let mut dz = Tensor::zeros(vz.shape());
                let mut dp = Tensor::zeros(vp.shape());
                for r in 0..g.rows() {
                    let row = g.row(r);
                    dz.row_mut(r).copy_from_slice(&row[..c1]);
                    for (d, &x) in dp.row_mut(r / group).iter_mut().zip(&row[c1..]) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *z, dz);
                self.accumulate(grads, *pooled, dp);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let len = vp.rows() * c;
                    if self.needs(p) {
                        let slice = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(vp.shape(), slice));
                    }
                    offset += len;
                }
            }
            Op::ScaleRows { a, factors } => {
                let mut da = g;
                for (r, &f) in factors.iter().enumerate() {
                    da.row_mut(r).iter_mut().for_each(|x| *x *= f);
                }
                self.accumulate(grads, *a, da);
            }
            Op::GatherRows { a, indices } => {
                let va = self.value(*a);
                let mut da = Tensor::zeros(va.shape());
                for (r, &src) in indices.iter().enumerate() {
                    for (d, &x) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                tau,
                probs,
            } => {
                let vl = self.value(*logits);
                let c = vl.cols();
                let mut dl = Tensor::zeros(vl.shape());
                for r in 0..vl.rows() {
                    let t = targets.row(r);
                    let mass = t.iter().copied().sum::<T>();
                    let f = g.data()[r] / *tau;
                    let p = &probs[r * c..(r + 1) * c];
                    for ((d, &pj), &tj) in dl.row_mut(r).iter_mut().zip(p).zip(t) {
                        *d = f * (pj * mass - tj);
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::WeightedSum { a, weights } => {
                let gs = g.item();
                let shape = self.value(*a).shape().to_vec();
                let data = weights.iter().map(|&w| w * gs).collect();
                self.accumulate(grads, *a, Tensor::from_vec(&shape, data));
            }
            Op::L2NormalizeRows { a, norms } => {
                let y = &node.value;
                let eps = T::of(L2_EPS);
                let mut da = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let n = norms[r];
                    if n <= eps {
                        for (d, &x) in da.row_mut(r).iter_mut().zip(gr) {
                            *d = x / n;
                        }
                        continue;
                    }
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((d, &yj), &gj) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = (gj - yj * dot) / n;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::KoLeo {
                a,
                neighbors,
                dists,
                eps,
            } => {
                let va = self.value(*a);
                let b = va.rows();
                let scale = g.item() / T::from_usize(b).unwrap();
                let mut da = Tensor::zeros(va.shape());
                for i in 0..b {
                    let d = dists[i];
                    if d <= *eps {
                        continue;
                    }
                    let j = neighbors[i];
                    let f = scale / (d * d);
                    let diff: Vec<T> = va
                        .row(i)
                        .iter()
                        .zip(va.row(j))
                        .map(|(&x, &y)| x - y)
                        .collect();
                    for (o, &df) in da.row_mut(i).iter_mut().zip(&diff) {
                        *o -= f * df;
                    }
                    for (o, &df) in da.row_mut(j).iter_mut().zip(&diff) {
                        *o += f * df;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SmoothL1 { a, b, beta } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let f = g.item() / T::from_usize(va.len()).unwrap();
                let da: Vec<T> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        let s = if d.abs() < *beta { d / *beta } else { d.signum() };
                        s * f
                    })
                    .collect();
                if self.needs(*b) {
                    let db = da.iter().map(|&x| -x).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(vb.shape(), db));
                }
                self.accumulate(grads, *a, Tensor::from_vec(va.shape(), da));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        let (tq, tk) = (vq.rows() / batch, vk.rows() / batch);
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut dq = Tensor::zeros(vq.shape());
        let mut dk = Tensor::zeros(vk.shape());
        let mut dv = Tensor::zeros(vv.shape());
        let mut dp = vec![T::zero(); tq * tk];
        for b in 0..batch {
            let (qo, ko) = (b * tq * d, b * tk * d);
            for h in 0..heads {
                let off = h * dh;
                let pb = (b * heads + h) * tq * tk;
                let p = &probs[pb..pb + tq * tk];
                // dP = dO V^T
                T::gemm(
                    tq,
                    dh,
                    tk,
                    T::one(),
                    &g.data()[qo + off..],
                    d as isize,
                    1,
                    &vv.data()[ko + off..],
                    1,
                    d as isize,
                    T::zero(),
                    &mut dp,
                    tk as isize,
                    1,
                );
                // dV = P^T dO
                T::gemm(
                    tk,
                    tq,
                    dh,
                    T::one(),
                    p,
                    1,
                    tk as isize,
                    &g.data()[qo + off..],
                    d as isize,
                    1,
                    T::one(),
                    &mut dv.data_mut()[ko + off..],
                    d as isize,
                    1,
                );
                // dS = P * (dP - rowsum(dP * P))
                for (dpr, pr) in dp.chunks_mut(tk).zip(p.chunks(tk)) {
                    let dot = dpr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                    for (x, &pj) in dpr.iter_mut().zip(pr) {
                        *x = pj * (*x - dot);
                    }
                }
                // dQ = dS K * scale
                T::gemm(
                    tq,
                    tk,
                    dh,
                    scale,
                    &dp,
                    tk as isize,
                    1,
                    &vk.data()[ko + off..],
                    d as isize,
                    1,
                    T::one(),
                    &mut dq.data_mut()[qo + off..],
                    d as isize,
                    1,
                );
                // dK = dS^T Q * scale
                T::gemm(
                    tk,
                    tq,
                    dh,
                    scale,
                    &dp,
                    1,
                    tk as isize,
                    &vq.data()[qo + off..],
                    d as isize,
                    1,
                    T::one(),
                    &mut dk.data_mut()[ko + off..],
                    d as isize,
                    1,
                );
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of every entry of every parameter.
    fn check<F>(params: &Parameters<f64>, f: F)
    where
        F: Fn(&mut Graph<f64>) -> Var,
    {
        let mut g = Graph::new(params);
        let loss = f(&mut g);
        let grads = g.backward(loss).unwrap();
        let h = 1e-6;
        for (name, t) in params.iter() {
            let analytic = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.get_mut(name).unwrap().data_mut()[i] += delta;
                    let mut g = Graph::no_grad(&p);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "{name}[{i}]: analytic {a} numeric {numeric}");
            }
        }
    }

    fn params(rng: &mut ChaCha8Rng, spec: &[(&str, &[usize])]) -> Parameters<f64> {
        spec.iter()
            .map(|(n, s)| (n.to_string(), random(rng, s)))
            .collect()
    }

    #[test]
    fn matmul_and_add_row_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = params(&mut rng, &[("x", &[3, 4]), ("w", &[4, 5]), ("b", &[5]), ("u", &[2, 5])]);
        check(&p, |g| {
            let x = g.param("x");
            let w = g.param("w");
            let b = g.param("b");
            let u = g.param("u");
            let y = g.matmul(x, w);
            let y = g.add_row(y, b);
            let z = g.matmul_t(y, u);
            let z = g.gelu(z);
            let n = g.value(z).len();
            g.weighted_sum(z, (0..n).map(|i| i as f64 * 0.1 - 0.2).collect())
        });
    }

    #[test]
    fn norm_and_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = params(
            &mut rng,
            &[("q", &[3, 4]), ("k", &[5, 4]), ("v", &[5, 4]), ("gain", &[4])],
        );
        check(&p, |g| {
            let q = g.param("q");
            let k = g.param("k");
            let v = g.param("v");
            let gain = g.param("gain");
            let qn = g.rms_norm(q, gain);
            let o = g.attention(qn, k, v, 2);
            let n = g.value(o).len();
            g.weighted_sum(o, (0..n).map(|i| ((i * 7) % 5) as f64 - 2.0).collect())
        });
    }

    #[test]
    fn batched_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = params(&mut rng, &[("q", &[4, 4]), ("k", &[6, 4]), ("v", &[6, 4])]);
        check(&p, |g| {
            let q = g.param("q");
            let k = g.param("k");
            let v = g.param("v");
            let o = g.attention_batched(q, k, v, 2, 2);
            let n = g.value(o).len();
            g.weighted_sum(o, (0..n).map(|i| (i as f64 * 0.37).cos()).collect())
        });
    }

    #[test]
    fn batched_attention_matches_separate_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = params(&mut rng, &[("q", &[6, 4]), ("k", &[4, 4])]);
        let mut g = Graph::no_grad(&p);
        let q = g.param("q");
        let k = g.param("k");
        let joint = g.attention_batched(q, k, k, 2, 2);
        for b in 0..2 {
            let qb = g.slice_rows(q, b * 3, 3);
            let kb = g.slice_rows(k, b * 2, 2);
            let single = g.attention(qb, kb, kb, 2);
            assert_eq!(g.value(single).data(), &g.value(joint).data()[b * 12..(b + 1) * 12]);
        }
    }

    #[test]
    fn pooling_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(&mut rng, &[("z", &[6, 3]), ("e", &[2, 6])]);
        check(&p, |g| {
            let z = g.param("z");
            let e = g.param("e");
            let pooled = g.group_max(z, 3);
            let cat = g.group_concat(z, pooled, 3);
            let m = g.group_max(cat, 3);
            let all = g.concat_rows(&[e, m]);
            let picked = g.gather_rows(all, &[3, 0, 3]);
            let n = g.value(picked).len();
            g.weighted_sum(picked, (0..n).map(|i| (i as f64).sin()).collect())
        });
    }

    #[test]
    fn loss_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = params(&mut rng, &[("l", &[3, 6]), ("a", &[4, 5]), ("b", &[4, 5])]);
        let mut targets = random(&mut rng, &[3, 6]);
        for r in 0..3 {
            let row = targets.row_mut(r);
            let s: f64 = row.iter().map(|x| x.abs()).sum();
            row.iter_mut().for_each(|x| *x = x.abs() / s);
        }
        check(&p, |g| {
            let l = g.param("l");
            let ce = g.soft_cross_entropy(l, targets.clone(), 0.3);
            let ce = g.mean(ce);
            let a = g.param("a");
            let b = g.param("b");
            let sl = g.smooth_l1(a, b, 0.5);
            let n = g.l2_normalize_rows(a);
            let k = g.koleo(n, 1e-8);
            let k = g.scale(k, 0.5);
            let b = g.scale_rows(b, vec![0.5, -1.0, 2.0, 0.0]);
            let bs = g.mean(b);
            let k = g.add(k, bs);
            let s = g.add(ce, sl);
            g.add(s, k)
        });
    }

    #[test]
    fn no_grad_graph_yields_no_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = params(&mut rng, &[("w", &[2, 2])]);
        let mut g = Graph::no_grad(&p);
        let w = g.param("w");
        let s = g.mean(w);
        assert!(g.backward(s).unwrap().is_empty());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = params(&mut rng, &[("w", &[2, 2])]);
        let mut g = Graph::new(&p);
        let w = g.param("w");
        let x = g.constant(random(&mut rng, &[3, 2]));
        let y = g.matmul(x, w);
        let s = g.mean(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.contains("w"));
    }

    #[test]
    fn attention_rows_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params(&mut rng, &[("x", &[5, 6])]);
        let mut g = Graph::no_grad(&p);
        g.set_record_attention(true);
        let x = g.param("x");
        g.attention(x, x, x, 3);
        let rec = g.take_attention();
        assert_eq!(rec[0].shape(), &[3, 5, 5]);
        for r in 0..15 {
            let s: f64 = rec[0].row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
