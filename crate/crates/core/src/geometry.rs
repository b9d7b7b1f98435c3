//! Point-cloud kernels: normalization, augmentation, farthest point sampling,
//! k-nearest neighbours, patchification and box cropping.
//!
//! Positions are stored as `f32` (the on-disk precision); all arithmetic is
//! carried out in `f64`. Patch-local coordinates are differences of two `f32`
//! values computed in `f64`, so adding the center back reproduces the source
//! point exactly.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Round half away from zero for non-negative values.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f32; 3]>,
    features: Vec<f32>,
    feature_dim: usize,
}

impl PointCloud {
    pub fn new(positions: Vec<[f32; 3]>, features: Vec<f32>, feature_dim: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("point cloud must hold at least one point".into()));
        }
        if features.len() != positions.len() * feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} points of width {}",
                features.len(),
                positions.len(),
                feature_dim
            )));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        Ok(Self {
            positions,
            features,
            feature_dim,
        })
    }

    pub fn from_positions(positions: Vec<[f32; 3]>) -> Result<Self> {
        Self::new(positions, Vec::new(), 0)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn positions(&self) -> &[[f32; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn point(&self, i: usize) -> Point3 {
        let p = self.positions[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    pub fn positions_f64(&self) -> Vec<Point3> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Sub-cloud made of the given point indices (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let positions = indices.iter().map(|&i| self.positions[i]).collect();
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            features.extend_from_slice(self.feature_row(i));
        }
        PointCloud {
            positions,
            features,
            feature_dim: self.feature_dim,
        }
    }

    fn with_positions(&self, positions: Vec<[f32; 3]>) -> PointCloud {
        PointCloud {
            positions,
            features: self.features.clone(),
            feature_dim: self.feature_dim,
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.positions_f64()
            .iter()
            .map(|p| dist2(p, &[0.0; 3]).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Centers the cloud on its centroid and scales it so the farthest point
/// lies on the unit sphere. A cloud whose points all coincide collapses to
/// the origin.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> PointCloud {
    let pts = cloud.positions_f64();
    let n = pts.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &pts {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for c in &mut centroid {
        *c /= n;
    }
    let centered: Vec<Point3> = pts
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let max = centered
        .iter()
        .map(|p| dist2(p, &[0.0; 3]).sqrt())
        .fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let positions = centered
        .iter()
        .map(|p| {
            [
                (p[0] * scale) as f32,
                (p[1] * scale) as f32,
                (p[2] * scale) as f32,
            ]
        })
        .collect();
    cloud.with_positions(positions)
}

/// Rotation by `angle` about the z axis followed by per-axis scaling.
pub fn augment_with(cloud: &PointCloud, angle: f64, scales: [f64; 3]) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let positions = cloud
        .positions_f64()
        .iter()
        .map(|p| {
            let x = c * p[0] - s * p[1];
            let y = s * p[0] + c * p[1];
            [
                (x * scales[0]) as f32,
                (y * scales[1]) as f32,
                (p[2] * scales[2]) as f32,
            ]
        })
        .collect();
    cloud.with_positions(positions)
}

/// Random z rotation in `[0, 2pi)` and anisotropic scaling in `[0.8, 1.2]`.
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R) -> PointCloud {
    let angle = rng.gen_range(0.0..2.0 * PI);
    let scales = [
        rng.gen_range(0.8..=1.2),
        rng.gen_range(0.8..=1.2),
        rng.gen_range(0.8..=1.2),
    ];
    augment_with(cloud, angle, scales)
}

/// Farthest point sampling. Starts at `start` and repeatedly takes the
/// unselected point with the largest distance to the selected set, breaking
/// ties toward the lowest index.
pub fn fps(points: &[Point3], count: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if count > n {
        return Err(Error::InsufficientPoints {
            requested: count,
            available: n,
        });
    }
    if count == 0 {
        return Err(Error::InvalidArgument("fps count must be at least 1".into()));
    }
    if start >= n {
        return Err(Error::InvalidArgument(format!(
            "fps start index {start} out of range for {n} points"
        )));
    }
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(count);
    let mut current = start;
    loop {
        taken[current] = true;
        out.push(current);
        if out.len() == count {
            break;
        }
        let anchor = points[current];
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(p, &anchor);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.1 {
                best = (i, min_d[i]);
            }
        }
        current = best.0;
    }
    Ok(out)
}

/// Indices of the `k` nearest points to each center, ordered by distance and
/// then by index. Returned flat, `centers.len() * k` entries.
pub fn knn(centers: &[Point3], points: &[Point3], k: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(Error::InsufficientPoints {
            requested: k,
            available: points.len(),
        });
    }
    let mut out = Vec::with_capacity(centers.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for c in centers {
        scratch.clear();
        scratch.extend(points.iter().enumerate().map(|(i, p)| (dist2(c, p), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() && k > 0 {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(cmp);
        out.extend(head.iter().map(|&(_, i)| i));
    }
    Ok(out)
}

/// Local point groups around FPS centers, translated into each center's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// `n_patches * k * (3 + feature_dim)`, row-major.
    pub points: Vec<f64>,
    pub centers: Vec<Point3>,
    pub center_indices: Vec<usize>,
    /// Source index of every patch point, `n_patches * k`.
    pub member_indices: Vec<usize>,
    pub k: usize,
    pub feature_dim: usize,
}

impl PatchSet {
    pub fn n_patches(&self) -> usize {
        self.centers.len()
    }

    pub fn point_width(&self) -> usize {
        3 + self.feature_dim
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let w = self.k * self.point_width();
        &self.points[i * w..(i + 1) * w]
    }

    /// Centers as a flat `n_patches * 3` vector.
    pub fn centers_flat(&self) -> Vec<f64> {
        self.centers.iter().flatten().copied().collect()
    }
}

pub fn patchify_from(cloud: &PointCloud, n_patches: usize, k: usize, start: usize) -> Result<PatchSet> {
    let pts = cloud.positions_f64();
    let center_indices = fps(&pts, n_patches, start)?;
    let centers: Vec<Point3> = center_indices.iter().map(|&i| pts[i]).collect();
    let member_indices = knn(&centers, &pts, k)?;
    let f = cloud.feature_dim();
    let mut points = Vec::with_capacity(n_patches * k * (3 + f));
    for (ci, c) in centers.iter().enumerate() {
        for &j in &member_indices[ci * k..(ci + 1) * k] {
            let p = pts[j];
            points.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            points.extend(cloud.feature_row(j).iter().map(|&v| v as f64));
        }
    }
    Ok(PatchSet {
        points,
        centers,
        center_indices,
        member_indices,
        k,
        feature_dim: f,
    })
}

/// Patchify with a uniformly random FPS start point.
pub fn patchify<R: Rng + ?Sized>(
    cloud: &PointCloud,
    n_patches: usize,
    k: usize,
    rng: &mut R,
) -> Result<PatchSet> {
    let start = rng.gen_range(0..cloud.len());
    patchify_from(cloud, n_patches, k, start)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropKind {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub kind: CropKind,
    /// Range the retained fraction `c` is drawn from.
    pub fraction: (f64, f64),
    pub points: usize,
    pub patches: usize,
    pub patch_size: usize,
}

impl CropSpec {
    pub fn global() -> Self {
        Self {
            kind: CropKind::Global,
            fraction: (0.4, 1.0),
            points: 1024,
            patches: 64,
            patch_size: 32,
        }
    }

    pub fn local() -> Self {
        Self {
            kind: CropKind::Local,
            fraction: (0.05, 0.4),
            points: 256,
            patches: 16,
            patch_size: 32,
        }
    }
}

/// Uniformly distributed 3D rotation matrix.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    // Normalized Gaussian quaternion is uniform on SO(3).
    let mut q = [0.0f64; 4];
    loop {
        for v in &mut q {
            *v = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Indices retained by a randomly oriented box with random aspect ratios,
/// centered on a random cloud point and scaled so that exactly
/// `round(fraction * N)` points fall inside. Sorted ascending.
pub fn crop_retained_indices<R: Rng + ?Sized>(
    cloud: &PointCloud,
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = cloud.len();
    let target = round_half_up(fraction * n as f64).min(n);
    if target < 1 {
        return Err(Error::EmptyCrop {
            fraction,
            points: n,
        });
    }
    let rot = random_rotation(rng);
    let (lo, hi) = (0.5f64.ln(), 2.0f64.ln());
    let aspect = [
        rng.gen_range(lo..=hi).exp(),
        rng.gen_range(lo..=hi).exp(),
        rng.gen_range(lo..=hi).exp(),
    ];
    let center = cloud.point(rng.gen_range(0..n));
    // A point lies inside the box scaled by `s` iff its box-frame Chebyshev
    // radius is <= s, so the exact count is reached by ranking that radius.
    let mut radius: Vec<(f64, usize)> = cloud
        .positions_f64()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            let mut r = 0.0f64;
            for a in 0..3 {
                // Box axes are the columns of `rot`.
                let local = rot[0][a] * d[0] + rot[1][a] * d[1] + rot[2][a] * d[2];
                r = r.max(local.abs() / aspect[a]);
            }
            (r, i)
        })
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if target < n {
        radius.select_nth_unstable_by(target - 1, cmp);
    }
    let mut kept: Vec<usize> = radius[..target].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Crops with a fixed retained fraction, then resamples to `target_points`:
/// without replacement when enough points survive, otherwise all survivors
/// plus draws with replacement.
pub fn crop_with_fraction<R: Rng + ?Sized>(
    cloud: &PointCloud,
    fraction: f64,
    target_points: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    let kept = crop_retained_indices(cloud, fraction, rng)?;
    let chosen: Vec<usize> = if kept.len() >= target_points {
        let mut idx: Vec<usize> = sample(rng, kept.len(), target_points)
            .into_iter()
            .map(|i| kept[i])
            .collect();
        idx.sort_unstable();
        idx
    } else {
        let mut idx = kept.clone();
        while idx.len() < target_points {
            idx.push(kept[rng.gen_range(0..kept.len())]);
        }
        idx
    };
    Ok(cloud.select(&chosen))
}

pub fn sample_crop<R: Rng + ?Sized>(cloud: &PointCloud, spec: &CropSpec, rng: &mut R) -> Result<PointCloud> {
    let (lo, hi) = spec.fraction;
    let fraction = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    crop_with_fraction(cloud, fraction, spec.points, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiCropConfig {
    pub global: CropSpec,
    pub local: CropSpec,
    pub n_global: usize,
    pub n_local: usize,
}

impl Default for MultiCropConfig {
    fn default() -> Self {
        Self {
            global: CropSpec::global(),
            local: CropSpec::local(),
            n_global: 2,
            n_local: 4,
        }
    }
}

/// Patchified crops of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub globals: Vec<PatchSet>,
    pub locals: Vec<PatchSet>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.globals.len() + self.locals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn multi_crop<R: Rng + ?Sized>(cloud: &PointCloud, config: &MultiCropConfig, rng: &mut R) -> Result<ViewSet> {
    let view = |spec: &CropSpec, rng: &mut R| -> Result<PatchSet> {
        let crop = sample_crop(cloud, spec, rng)?;
        patchify(&crop, spec.patches, spec.patch_size, rng)
    };
    let globals = (0..config.n_global)
        .map(|_| view(&config.global, rng))
        .collect::<Result<Vec<_>>>()?;
    let locals = (0..config.n_local)
        .map(|_| view(&config.local, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet { globals, locals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0f32..1.0),
                    rng.gen_range(-1.0f32..1.0),
                    rng.gen_range(-1.0f32..1.0),
                ]
            })
            .collect();
        PointCloud::from_positions(pts).unwrap()
    }

    /// Recomputes every candidate's distance to the selected set from scratch.
    fn fps_oracle(points: &[Point3], count: usize, start: usize) -> Vec<usize> {
        let mut sel = vec![start];
        while sel.len() < count {
            let mut best: Option<(usize, f64)> = None;
            for i in 0..points.len() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|&s| dist2(&points[i], &points[s]))
                    .fold(f64::INFINITY, f64::min);
                if best.map_or(true, |(_, bd)| d > bd) {
                    best = Some((i, d));
                }
            }
            sel.push(best.unwrap().0);
        }
        sel
    }

    #[test]
    fn normalize_single_point_goes_to_origin() {
        let c = PointCloud::from_positions(vec![[5.0, 5.0, 5.0]]).unwrap();
        assert_eq!(normalize_unit_sphere(&c).positions(), &[[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_keeps_centered_unit_pair() {
        let c = PointCloud::from_positions(vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(normalize_unit_sphere(&c).positions(), c.positions());
    }

    #[test]
    fn normalize_degenerate_cloud_has_no_nan() {
        let c = PointCloud::from_positions(vec![[2.0, -1.0, 3.0]; 7]).unwrap();
        let n = normalize_unit_sphere(&c);
        assert!(n.positions().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_random_cloud_reaches_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_cloud(&mut rng, 100);
        let n = normalize_unit_sphere(&c);
        assert!((n.max_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn augment_identity_and_half_turn() {
        let c = PointCloud::from_positions(vec![[1.0, 0.0, 0.0], [0.3, -0.2, 0.5]]).unwrap();
        assert_eq!(augment_with(&c, 0.0, [1.0; 3]), c);
        let flipped = augment_with(&c, PI, [1.0; 3]);
        let p = flipped.positions()[0];
        assert!((p[0] + 1.0).abs() < 1e-7 && p[1].abs() < 1e-7 && p[2] == 0.0);
    }

    #[test]
    fn augment_scales_z_only_by_z_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_cloud(&mut rng, 50);
        let a = augment_with(&c, 1.234, [0.9, 1.1, 0.85]);
        for (p, q) in c.positions().iter().zip(a.positions()) {
            assert!((q[2] as f64 - 0.85 * p[2] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn fps_examples() {
        assert_eq!(fps(&[[0.0; 3]], 1, 0).unwrap(), vec![0]);
        let square = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert_eq!(fps(&square, 2, 0).unwrap(), fps_oracle(&square, 2, 0));
        assert_eq!(fps(&square, 2, 0).unwrap(), vec![0, 3]);
        let mut all = fps(&square, 4, 2).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_rejects_oversized_request() {
        assert!(matches!(
            fps(&[[0.0; 3]; 3], 4, 0),
            Err(Error::InsufficientPoints { requested: 4, available: 3 })
        ));
    }

    #[test]
    fn fps_with_duplicates_is_still_a_permutation() {
        let pts = [[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(fps(&pts, 4, 0).unwrap(), vec![0, 2, 1, 3]);
    }

    #[test]
    fn knn_examples() {
        let pts = [[3.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(knn(&[[0.0; 3]], &pts, 2).unwrap(), vec![1, 2]);
        assert_eq!(knn(&[pts[2]], &pts, 1).unwrap(), vec![2]);
        let mut row = knn(&[[0.5, 0.5, 0.5]], &pts, 3).unwrap();
        row.sort_unstable();
        assert_eq!(row, vec![0, 1, 2]);
        assert!(knn(&[[0.0; 3]], &pts, 4).is_err());
    }

    #[test]
    fn knn_ties_resolve_to_lower_index() {
        let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(knn(&[[0.0; 3]], &pts, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn patchify_single_point_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_cloud(&mut rng, 20);
        let p = patchify_from(&c, 20, 1, 0).unwrap();
        assert!(p.points.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_global_view_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_cloud(&mut rng, 1024);
        let p = patchify(&c, 64, 32, &mut rng).unwrap();
        assert_eq!(p.n_patches(), 64);
        assert_eq!(p.points.len(), 64 * 32 * 3);
    }

    #[test]
    fn patchify_carries_features_untouched() {
        let c = PointCloud::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            2,
        )
        .unwrap();
        let p = patchify_from(&c, 1, 3, 2).unwrap();
        assert_eq!(p.point_width(), 5);
        assert_eq!(&p.patch(0)[..5], &[0.0, 0.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn crop_full_fraction_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_cloud(&mut rng, 300);
        let kept = crop_retained_indices(&c, 1.0, &mut rng).unwrap();
        assert_eq!(kept, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn crop_retains_exact_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = random_cloud(&mut rng, 1000);
        assert_eq!(crop_retained_indices(&c, 0.1, &mut rng).unwrap().len(), 100);
    }

    #[test]
    fn crop_rejects_empty_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_cloud(&mut rng, 10);
        assert!(matches!(
            crop_retained_indices(&c, 0.01, &mut rng),
            Err(Error::EmptyCrop { .. })
        ));
    }

    #[test]
    fn crop_is_deterministic_for_seed() {
        let c = {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            random_cloud(&mut rng, 200)
        };
        let a = crop_retained_indices(&c, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = crop_retained_indices(&c, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
    }

    #[test]
    fn crop_output_has_target_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = random_cloud(&mut rng, 400);
        for spec in [CropSpec::global(), CropSpec::local()] {
            assert_eq!(sample_crop(&c, &spec, &mut rng).unwrap().len(), spec.points);
        }
    }

    #[test]
    fn multi_crop_view_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = normalize_unit_sphere(&random_cloud(&mut rng, 2048));
        let views = multi_crop(&c, &MultiCropConfig::default(), &mut rng).unwrap();
        assert_eq!(views.len(), 6);
        assert!(views.globals.iter().all(|v| v.n_patches() == 64 && v.k == 32));
        assert!(views.locals.iter().all(|v| v.n_patches() == 16));
        let cfg = MultiCropConfig {
            n_local: 0,
            ..MultiCropConfig::default()
        };
        assert_eq!(multi_crop(&c, &cfg, &mut rng).unwrap().len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fps_matches_oracle(seed in any::<u64>(), n in 1usize..40, frac in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_cloud(&mut rng, n).positions_f64();
            let m = 1 + ((n - 1) as f64 * frac) as usize;
            prop_assert_eq!(fps(&pts, m, 0).unwrap(), fps_oracle(&pts, m, 0));
        }

        #[test]
        fn patch_points_reconstruct_source_exactly(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cloud(&mut rng, 128);
            let p = patchify(&c, 16, 8, &mut rng).unwrap();
            for i in 0..16 {
                for j in 0..8 {
                    let src = c.point(p.member_indices[i * 8 + j]);
                    let local = &p.patch(i)[j * 3..j * 3 + 3];
                    for a in 0..3 {
                        prop_assert_eq!(local[a] + p.centers[i][a], src[a]);
                    }
                }
                prop_assert_eq!(p.centers[i], c.point(p.center_indices[i]));
            }
        }

        #[test]
        fn normalize_is_idempotent(seed in any::<u64>(), n in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let once = normalize_unit_sphere(&random_cloud(&mut rng, n));
            let twice = normalize_unit_sphere(&once);
            for (a, b) in once.positions().iter().zip(twice.positions()) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn rotation_preserves_pairwise_distances(seed in any::<u64>(), angle in 0.0f64..6.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cloud(&mut rng, 20);
            let r = augment_with(&c, angle, [1.0; 3]);
            prop_assert_eq!(r.len(), c.len());
            let (p, q) = (c.positions_f64(), r.positions_f64());
            for i in 0..20 {
                for j in 0..20 {
                    prop_assert!((dist2(&p[i], &p[j]).sqrt() - dist2(&q[i], &q[j]).sqrt()).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn augment_keeps_count_and_finiteness(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cloud(&mut rng, 64);
            let a = augment(&c, &mut rng);
            prop_assert_eq!(a.len(), 64);
            prop_assert!(a.positions().iter().flatten().all(|v| v.is_finite()));
        }
    }
}
