//! Frozen-feature probes and training diagnostics.

use serde::Serialize;

use crate::autodiff::Graph;
use crate::distillation::entropy;
use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, patchify_from, Point3, PointCloud};
use crate::network::{self, ModelConfig};
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};

/// Per-cloud frozen representation: class token plus mean- and max-pooled
/// patch tokens of the final encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub cls: Vec<f64>,
    pub mean_pool: Vec<f64>,
    pub max_pool: Vec<f64>,
    pub label: usize,
}

impl FeatureRecord {
    /// `[cls | mean | max]`, width `3 * D`.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.cls.len());
        v.extend_from_slice(&self.cls);
        v.extend_from_slice(&self.mean_pool);
        v.extend_from_slice(&self.max_pool);
        v
    }
}

/// Pools encoder output of `views` sequences of `n` patches into records.
pub fn pool_tokens<T: Real>(tokens: &Tensor<T>, n: usize, labels: &[usize]) -> Vec<FeatureRecord> {
    let d = tokens.cols();
    labels
        .iter()
        .enumerate()
        .map(|(b, &label)| {
            let base = b * (1 + n);
            let cls = tokens.row(base).iter().map(|v| v.as_f64()).collect();
            let mut mean = vec![0.0; d];
            let mut max = vec![f64::NEG_INFINITY; d];
            for i in 0..n {
                for (j, v) in tokens.row(base + 1 + i).iter().enumerate() {
                    let v = v.as_f64();
                    mean[j] += v;
                    max[j] = max[j].max(v);
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            FeatureRecord {
                cls,
                mean_pool: mean,
                max_pool: max,
                label,
            }
        })
        .collect()
}

/// Features of each cloud from one unmasked, uncropped view, normalized to
/// the unit sphere and patchified with a fixed FPS start, encoded by the
/// given (teacher) parameters without gradients.
pub fn extract_features<T: Real>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    clouds: &[PointCloud],
    labels: &[usize],
    n_patches: usize,
    patch_size: usize,
    chunk: usize,
) -> Result<Vec<FeatureRecord>> {
    if clouds.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} clouds with {} labels",
            clouds.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(clouds.len());
    for (cs, ls) in clouds.chunks(chunk.max(1)).zip(labels.chunks(chunk.max(1))) {
        let patches = cs
            .iter()
            .map(|c| patchify_from(&normalize_unit_sphere(c), n_patches, patch_size, 0))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = patches.iter().collect();
        let views = network::stack_views::<T>(&refs)?;
        let mut g = Graph::no_grad(params);
        let tokens = network::encode_views(&mut g, cfg, &views, None);
        out.extend(pool_tokens(g.value(tokens), n_patches, ls));
    }
    Ok(out)
}

fn check_classes(train: &[FeatureRecord]) -> Result<usize> {
    let n_classes = train.iter().map(|r| r.label).max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; n_classes];
        train.iter().for_each(|r| seen[r.label] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::InvalidArgument("probing needs at least two classes".into()));
    }
    Ok(n_classes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    /// L2 penalty on the weights.
    pub l2: f64,
    pub iterations: usize,
    pub step: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            iterations: 500,
            step: 0.5,
        }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes][features]`
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearProbe {
    /// Minimizes mean cross-entropy plus `l2/2 * |W|^2` by Nesterov-accelerated
    /// gradient descent from zero; deterministic for a given input order.
    pub fn fit(train: &[FeatureRecord], opts: &ProbeOptions) -> Result<Self> {
        let n_classes = check_classes(train)?;
        let xs: Vec<Vec<f64>> = train.iter().map(FeatureRecord::concat).collect();
        let dim = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in &xs {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
        }
        let mut scale = vec![0.0; dim];
        for x in &xs {
            scale.iter_mut().zip(x.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 });
        let zs: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect())
            .collect();
        let mut w = vec![vec![0.0; dim]; n_classes];
        let mut b = vec![0.0; n_classes];
        let (mut w_prev, mut b_prev) = (w.clone(), b.clone());
        for it in 0..opts.iterations {
            let mom = it as f64 / (it as f64 + 3.0);
            let wl: Vec<Vec<f64>> = w
                .iter()
                .zip(&w_prev)
                .map(|(a, p)| a.iter().zip(p).map(|(x, y)| x + mom * (x - y)).collect())
                .collect();
            let bl: Vec<f64> = b.iter().zip(&b_prev).map(|(x, y)| x + mom * (x - y)).collect();
            let mut gw = vec![vec![0.0; dim]; n_classes];
            let mut gb = vec![0.0; n_classes];
            for (z, rec) in zs.iter().zip(train) {
                let probs = softmax_scores(&wl, &bl, z);
                for c in 0..n_classes {
                    let err = (probs[c] - if c == rec.label { 1.0 } else { 0.0 }) / n;
                    gb[c] += err;
                    gw[c].iter_mut().zip(z).for_each(|(g, v)| *g += err * v);
                }
            }
            w_prev = w;
            b_prev = b;
            w = wl
                .iter()
                .zip(&gw)
                .map(|(wc, gc)| {
                    wc.iter()
                        .zip(gc)
                        .map(|(x, g)| x - opts.step * (g + opts.l2 * x))
                        .collect()
                })
                .collect();
            b = bl.iter().zip(&gb).map(|(x, g)| x - opts.step * g).collect();
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
            bias: b,
        })
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let z: Vec<f64> = features
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect();
        argmax(&scores(&self.weights, &self.bias, &z))
    }

    pub fn accuracy(&self, test: &[FeatureRecord]) -> f64 {
        accuracy(test, |r| self.predict(&r.concat()))
    }
}

fn scores(w: &[Vec<f64>], b: &[f64], z: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(wc, bc)| bc + wc.iter().zip(z).map(|(a, x)| a * x).sum::<f64>())
        .collect()
}

fn softmax_scores(w: &[Vec<f64>], b: &[f64], z: &[f64]) -> Vec<f64> {
    let s = scores(w, b, z);
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn accuracy(test: &[FeatureRecord], predict: impl Fn(&FeatureRecord) -> usize) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    test.iter().filter(|r| predict(r) == r.label).count() as f64 / test.len() as f64
}

/// Fits a linear probe on `train` and returns its accuracy on `test`.
pub fn linear_probe(train: &[FeatureRecord], test: &[FeatureRecord], opts: &ProbeOptions) -> Result<f64> {
    Ok(LinearProbe::fit(train, opts)?.accuracy(test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KnnMetric {
    #[default]
    Euclidean,
    Cosine,
}

fn distance(a: &[f64], b: &[f64], metric: KnnMetric) -> f64 {
    match metric {
        KnnMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        KnnMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 - dot / (na * nb).max(1e-12)
        }
    }
}

/// Majority vote over the `k` nearest training records (distance, then
/// training index). A tied vote goes to the tied class whose closest member
/// ranks nearest.
pub fn knn_predict(train: &[FeatureRecord], query: &[f64], k: usize, metric: KnnMetric) -> Result<usize> {
    if k == 0 || k > train.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} with {} training records",
            train.len()
        )));
    }
    let mut d: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, r)| (distance(&r.concat(), query, metric), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let labels: Vec<usize> = d[..k].iter().map(|&(_, i)| train[i].label).collect();
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut votes = vec![0usize; n_classes];
    labels.iter().for_each(|&l| votes[l] += 1);
    let top = *votes.iter().max().unwrap();
    Ok(*labels.iter().find(|&&l| votes[l] == top).unwrap())
}

pub fn knn_probe(train: &[FeatureRecord], test: &[FeatureRecord], k: usize, metric: KnnMetric) -> Result<f64> {
    if k == 0 || k > train.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} with {} training records",
            train.len()
        )));
    }
    let preds = test
        .iter()
        .map(|r| knn_predict(train, &r.concat(), k, metric))
        .collect::<Result<Vec<_>>>()?;
    Ok(preds.iter().zip(test).filter(|(p, r)| **p == r.label).count() as f64 / test.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyDiagnostics {
    /// Entropy of the batch-mean distribution.
    pub marginal_entropy: f64,
    /// Mean per-row entropy.
    pub mean_posterior_entropy: f64,
    /// Mean `CE(p_t, p_s) - H(p_t)` when student rows are given.
    pub kl: Option<f64>,
}

/// Diagnostics over rows of teacher distributions, optionally paired row by
/// row with student distributions.
pub fn entropy_diagnostics<T: Real>(teacher: &Tensor<T>, student: Option<&Tensor<T>>) -> Result<EntropyDiagnostics> {
    let rows = teacher.rows();
    if rows == 0 {
        return Err(Error::InvalidArgument("no distributions".into()));
    }
    if let Some(s) = student {
        if s.shape() != teacher.shape() {
            return Err(Error::ShapeMismatch("teacher and student rows differ".into()));
        }
    }
    let c = teacher.cols();
    let mut marginal = vec![0.0; c];
    let mut posterior = 0.0;
    let mut kl = 0.0;
    for r in 0..rows {
        let p: Vec<f64> = teacher.row(r).iter().map(|v| v.as_f64()).collect();
        marginal.iter_mut().zip(&p).for_each(|(m, v)| *m += v / rows as f64);
        let h = entropy(&p);
        posterior += h / rows as f64;
        if let Some(s) = student {
            let q: Vec<f64> = s.row(r).iter().map(|v| v.as_f64()).collect();
            let ce: f64 = p
                .iter()
                .zip(&q)
                .filter(|(&a, _)| a > 0.0)
                .map(|(&a, &b)| -a * b.max(f64::MIN_POSITIVE).ln())
                .sum();
            kl += (ce - h) / rows as f64;
        }
    }
    Ok(EntropyDiagnostics {
        marginal_entropy: entropy(&marginal),
        mean_posterior_entropy: posterior,
        kl: student.map(|_| kl),
    })
}

/// Mean attention distance per layer and head: for every patch query `i`,
/// `sum_j a_ij |c_i - c_j|` over patch keys, averaged over queries. Each
/// record is `[heads, 1+N, 1+N]` with the class token at index 0, which is
/// excluded on both axes.
pub fn attention_distance<T: Real>(records: &[Tensor<T>], centers: &[Point3]) -> Result<Vec<Vec<f64>>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no attention records".into()));
    }
    let n = centers.len();
    let dist: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (a, b) = (centers[ij / n], centers[ij % n]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .collect();
    records
        .iter()
        .map(|rec| {
            let s = rec.shape();
            if s.len() != 3 || s[1] != n + 1 || s[2] != n + 1 {
                return Err(Error::ShapeMismatch(format!(
                    "attention record {s:?} for {n} patches"
                )));
            }
            Ok((0..s[0])
                .map(|h| {
                    let mut total = 0.0;
                    for i in 0..n {
                        let row = rec.row(h * (n + 1) + 1 + i);
                        total += (0..n).map(|j| row[1 + j].as_f64() * dist[i * n + j]).sum::<f64>();
                    }
                    total / n as f64
                })
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(x: &[f64], label: usize) -> FeatureRecord {
        FeatureRecord {
            cls: x.to_vec(),
            mean_pool: vec![],
            max_pool: vec![],
            label,
        }
    }

    fn knn_oracle(train: &[FeatureRecord], q: &[f64], k: usize) -> usize {
        // Exhaustive: rank all, vote, resolve ties by rank of first occurrence.
        let mut all: Vec<(f64, usize, usize)> = train
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d = r.cls.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (d, i, r.label)
            })
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let top = &all[..k];
        let count = |l: usize| top.iter().filter(|t| t.2 == l).count();
        let best = top.iter().map(|t| count(t.2)).max().unwrap();
        top.iter().find(|t| count(t.2) == best).unwrap().2
    }

    #[test]
    fn separable_two_class_probe_is_perfect() {
        let train: Vec<_> = (0..20).map(|i| rec(&[i as f64 - 9.5, 1.0], (i >= 10) as usize)).collect();
        let test = vec![rec(&[-3.0, 0.0], 0), rec(&[4.0, 2.0], 1)];
        assert_eq!(linear_probe(&train, &test, &ProbeOptions::default()).unwrap(), 1.0);
    }

    #[test]
    fn single_class_probe_is_rejected() {
        let train = vec![rec(&[0.0], 2), rec(&[1.0], 2)];
        assert!(linear_probe(&train, &train, &ProbeOptions::default()).is_err());
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let make = |rng: &mut ChaCha8Rng, n: usize| -> Vec<FeatureRecord> {
            (0..n)
                .map(|i| {
                    let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    rec(&x, i % 3)
                })
                .collect()
        };
        let train = make(&mut rng, 300);
        let test = make(&mut rng, 3000);
        let acc = linear_probe(&train, &test, &ProbeOptions::default()).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 0.05, "accuracy {acc}");
    }

    #[test]
    fn duplicated_training_set_gives_same_classifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let train: Vec<_> = (0..30)
            .map(|i| {
                let c = i % 3;
                rec(&[c as f64 + rng.gen_range(-0.8..0.8), rng.gen_range(-1.0..1.0)], c)
            })
            .collect();
        let doubled: Vec<_> = train.iter().chain(&train).cloned().collect();
        let opts = ProbeOptions::default();
        let (a, b) = (LinearProbe::fit(&train, &opts).unwrap(), LinearProbe::fit(&doubled, &opts).unwrap());
        for (wa, wb) in a.weights.iter().flatten().zip(b.weights.iter().flatten()) {
            assert!((wa - wb).abs() < 1e-9);
        }
        for x in -20..20 {
            let q = [x as f64 * 0.2, 0.1];
            assert_eq!(a.predict(&q), b.predict(&q));
        }
    }

    #[test]
    fn knn_hand_examples() {
        let train = vec![rec(&[0.0], 0), rec(&[1.0], 1), rec(&[3.0], 1)];
        assert_eq!(knn_predict(&train, &[1.0], 1, KnnMetric::Euclidean).unwrap(), 1);
        // distances from 0.4: 0.4 (0), 0.6 (1), 2.6 (1)
        assert_eq!(knn_predict(&train, &[0.4], 1, KnnMetric::Euclidean).unwrap(), 0);
        assert_eq!(knn_predict(&train, &[0.4], 2, KnnMetric::Euclidean).unwrap(), 0);
        assert_eq!(knn_predict(&train, &[0.4], 3, KnnMetric::Euclidean).unwrap(), 1);
        assert!(knn_predict(&train, &[0.4], 4, KnnMetric::Euclidean).is_err());
    }

    #[test]
    fn knn_full_tie_uses_nearest_neighbour() {
        let train = vec![rec(&[0.0], 0), rec(&[1.0], 0), rec(&[5.0], 1), rec(&[6.0], 1)];
        assert_eq!(knn_predict(&train, &[4.0], 4, KnnMetric::Euclidean).unwrap(), 1);
        assert_eq!(knn_predict(&train, &[2.0], 4, KnnMetric::Euclidean).unwrap(), 0);
    }

    #[test]
    fn entropy_examples() {
        let u = Tensor::<f64>::full(&[5, 4096], 1.0 / 4096.0);
        let d = entropy_diagnostics(&u, Some(&u)).unwrap();
        assert!((d.marginal_entropy - 4096f64.ln()).abs() < 1e-9);
        assert!((d.mean_posterior_entropy - 8.318).abs() < 1e-3);
        assert!(d.kl.unwrap().abs() < 1e-9);
        let mut onehot = Tensor::<f64>::zeros(&[4, 8]);
        for r in 0..4 {
            onehot.row_mut(r)[r * 2] = 1.0;
        }
        let d = entropy_diagnostics(&onehot, None).unwrap();
        assert_eq!(d.mean_posterior_entropy, 0.0);
        assert!((d.marginal_entropy - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_distance_examples() {
        let centers = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let mut ident = Tensor::<f64>::zeros(&[1, 4, 4]);
        for i in 0..4 {
            ident.row_mut(i)[i] = 1.0;
        }
        assert_eq!(attention_distance(&[ident], &centers).unwrap(), vec![vec![0.0]]);
        // Uniform over patch keys: mean pairwise distance from each query.
        let mut uni = Tensor::<f64>::zeros(&[1, 4, 4]);
        for i in 1..4 {
            for j in 1..4 {
                uni.row_mut(i)[j] = 1.0 / 3.0;
            }
        }
        let d5 = 5f64.sqrt();
        let expected = ((1.0 + 2.0) + (1.0 + d5) + (2.0 + d5)) / 3.0 / 3.0;
        let got = attention_distance(&[uni], &centers).unwrap()[0][0];
        assert!((got - expected).abs() < 1e-12);
        assert!(attention_distance::<f64>(&[], &centers).is_err());
    }

    #[test]
    fn pooling_constant_tokens() {
        let t = Tensor::<f64>::from_vec(&[3, 2], vec![9.0, 9.0, 1.5, -2.0, 1.5, -2.0]);
        let r = &pool_tokens(&t, 2, &[4])[0];
        assert_eq!(r.cls, vec![9.0, 9.0]);
        assert_eq!(r.mean_pool, vec![1.5, -2.0]);
        assert_eq!(r.max_pool, vec![1.5, -2.0]);
        assert_eq!(r.concat().len(), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn knn_matches_exhaustive_oracle(seed in any::<u64>(), n in 5usize..200, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train: Vec<_> = (0..n)
                .map(|_| rec(&[rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64], rng.gen_range(0..3)))
                .collect();
            let q = [rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64];
            prop_assert_eq!(knn_predict(&train, &q, k, KnnMetric::Euclidean).unwrap(), knn_oracle(&train, &q, k));
        }

        #[test]
        fn entropy_ordering(seed in any::<u64>(), rows in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tensor::<f64>::zeros(&[rows, 16]);
            for r in 0..rows {
                let l: Vec<f64> = (0..16).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let p = crate::distillation::sharpened_softmax(&l, 0.5).unwrap();
                t.row_mut(r).copy_from_slice(&p);
            }
            let d = entropy_diagnostics(&t, None).unwrap();
            prop_assert!(d.mean_posterior_entropy >= 0.0);
            prop_assert!(d.mean_posterior_entropy <= d.marginal_entropy + 1e-12);
            prop_assert!(d.marginal_entropy <= 16f64.ln() + 1e-12);
        }

        #[test]
        fn center_distances_are_rotation_invariant(seed in any::<u64>(), angle in 0.0f64..6.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f32; 3]> = (0..12)
                .map(|_| [rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0)])
                .collect();
            let cloud = PointCloud::from_positions(pts).unwrap();
            let rotated = crate::geometry::augment_with(&cloud, angle, [1.0; 3]);
            let (a, b) = (cloud.positions_f64(), rotated.positions_f64());
            for i in 0..12 {
                for j in 0..12 {
                    let da: f64 = (0..3).map(|k| (a[i][k] - a[j][k]).powi(2)).sum::<f64>().sqrt();
                    let db: f64 = (0..3).map(|k| (b[i][k] - b[j][k]).powi(2)).sum::<f64>().sqrt();
                    prop_assert!((da - db).abs() < 1e-6);
                }
            }
        }
    }
}
