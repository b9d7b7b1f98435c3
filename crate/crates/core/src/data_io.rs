//! Synthetic shape datasets, the binary point-cloud format and CSV manifests.
//!
//! Cloud files (`.apcd`), little-endian:
//!
//! ```text
//! "APCD" | u32 version = 1 | u32 N | u32 F | N x (3 + F) f32, row-major
//! ```

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::tensorfile::{write_atomic, Reader};

pub const CLOUD_MAGIC: &[u8; 4] = b"APCD";
pub const CLOUD_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.csv";
const TRANSLATION_JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Cone,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Sphere,
        ShapeClass::Box,
        ShapeClass::Cylinder,
        ShapeClass::Torus,
        ShapeClass::Cone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Box => "box",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Torus => "torus",
            ShapeClass::Cone => "cone",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape class `{s}`")))
    }
}

/// Class plus size parameters:
/// sphere `[radius]`, box `[half x, half y, half z]`, cylinder
/// `[radius, half height]`, torus `[major, minor]`, cone `[base radius, height]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    pub size: [f64; 3],
}

impl ShapeSpec {
    pub fn random<R: Rng + ?Sized>(class: ShapeClass, rng: &mut R) -> Self {
        let size = match class {
            ShapeClass::Sphere => [rng.gen_range(0.5..1.0), 0.0, 0.0],
            ShapeClass::Box => [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)],
            ShapeClass::Cylinder => [rng.gen_range(0.3..0.8), rng.gen_range(0.4..1.0), 0.0],
            ShapeClass::Torus => [rng.gen_range(0.5..0.8), rng.gen_range(0.1..0.3), 0.0],
            ShapeClass::Cone => [rng.gen_range(0.4..1.0), rng.gen_range(0.8..1.6), 0.0],
        };
        Self { class, size }
    }

    /// Uniform sample from the surface in the shape's canonical pose.
    pub fn sample_surface<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Point3> {
        (0..n).map(|_| self.sample_point(rng)).collect()
    }

    fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Point3 {
        let [a, b, c] = self.size;
        match self.class {
            ShapeClass::Sphere => {
                let g: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-300);
                [a * g[0] / n, a * g[1] / n, a * g[2] / n]
            }
            ShapeClass::Box => {
                // Faces chosen in proportion to their area.
                let areas = [b * c, a * c, a * b];
                let axis = pick(rng, &areas);
                let half = [a, b, c];
                let mut p = [0.0; 3];
                for (k, v) in p.iter_mut().enumerate() {
                    *v = if k == axis {
                        if rng.gen::<bool>() { half[k] } else { -half[k] }
                    } else {
                        rng.gen_range(-half[k]..=half[k])
                    };
                }
                p
            }
            ShapeClass::Cylinder => {
                let (r, h) = (a, b);
                let theta = rng.gen_range(0.0..2.0 * PI);
                if pick(rng, &[2.0 * PI * r * 2.0 * h, 2.0 * PI * r * r]) == 0 {
                    [r * theta.cos(), r * theta.sin(), rng.gen_range(-h..=h)]
                } else {
                    let rr = r * rng.gen::<f64>().sqrt();
                    let z = if rng.gen::<bool>() { h } else { -h };
                    [rr * theta.cos(), rr * theta.sin(), z]
                }
            }
            ShapeClass::Torus => {
                let (big, small) = (a, b);
                let u = rng.gen_range(0.0..2.0 * PI);
                // Area element grows with distance from the axis; rejection sample it.
                let v = loop {
                    let v = rng.gen_range(0.0..2.0 * PI);
                    if rng.gen::<f64>() * (big + small) <= big + small * f64::cos(v) {
                        break v;
                    }
                };
                let ring = big + small * v.cos();
                [ring * u.cos(), ring * u.sin(), small * v.sin()]
            }
            ShapeClass::Cone => {
                let (r, h) = (a, b);
                let slant = (r * r + h * h).sqrt();
                let theta = rng.gen_range(0.0..2.0 * PI);
                if pick(rng, &[PI * r * slant, PI * r * r]) == 0 {
                    // Fraction of the way from apex to base; sqrt makes it area-uniform.
                    let t = rng.gen::<f64>().sqrt();
                    [r * t * theta.cos(), r * t * theta.sin(), h / 2.0 - h * t]
                } else {
                    let rr = r * rng.gen::<f64>().sqrt();
                    [rr * theta.cos(), rr * theta.sin(), -h / 2.0]
                }
            }
        }
    }

    /// Unsigned distance from `p` (canonical pose) to the surface.
    pub fn surface_distance(&self, p: Point3) -> f64 {
        let [a, b, c] = self.size;
        let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
        let z = p[2];
        match self.class {
            ShapeClass::Sphere => ((rho * rho + z * z).sqrt() - a).abs(),
            ShapeClass::Box => {
                let q = [p[0].abs() - a, p[1].abs() - b, p[2].abs() - c];
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                (outside + inside).abs()
            }
            ShapeClass::Cylinder => {
                let (r, h) = (a, b);
                let segs = [((r, -h), (r, h)), ((0.0, h), (r, h)), ((0.0, -h), (r, -h))];
                segs.iter().map(|&(s, e)| seg_dist((rho, z), s, e)).fold(f64::INFINITY, f64::min)
            }
            ShapeClass::Torus => (((rho - a).powi(2) + z * z).sqrt() - b).abs(),
            ShapeClass::Cone => {
                let (r, h) = (a, b);
                let lateral = seg_dist((rho, z), (0.0, h / 2.0), (r, -h / 2.0));
                let base = seg_dist((rho, z), (0.0, -h / 2.0), (r, -h / 2.0));
                lateral.min(base)
            }
        }
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// A randomly sized shape sampled with `n` points, posed upright with a
/// uniform random rotation about z and a small translation.
pub fn generate_cloud<R: Rng + ?Sized>(class: ShapeClass, n: usize, rng: &mut R) -> Result<PointCloud> {
    let spec = ShapeSpec::random(class, rng);
    let pts = spec.sample_surface(n, rng);
    let (s, c) = rng.gen_range(0.0..2.0 * std::f64::consts::PI).sin_cos();
    let rot = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    let shift: [f64; 3] = [
        rng.gen_range(-TRANSLATION_JITTER..=TRANSLATION_JITTER),
        rng.gen_range(-TRANSLATION_JITTER..=TRANSLATION_JITTER),
        rng.gen_range(-TRANSLATION_JITTER..=TRANSLATION_JITTER),
    ];
    let posed = pts
        .iter()
        .map(|p| {
            let mut q = [0f32; 3];
            for (i, v) in q.iter_mut().enumerate() {
                *v = (rot[i][0] * p[0] + rot[i][1] * p[1] + rot[i][2] * p[2] + shift[i]) as f32;
            }
            q
        })
        .collect();
    PointCloud::from_positions(posed)
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let f = cloud.feature_dim();
    let mut out = Vec::with_capacity(16 + n * (3 + f) * 4);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    for i in 0..n {
        for v in cloud.positions()[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in cloud.feature_row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CLOUD_MAGIC {
        return Err(Error::decode(0, "bad magic, expected APCD"));
    }
    let version = r.u32()?;
    if version != CLOUD_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CLOUD_VERSION,
        });
    }
    let n = r.u32()? as usize;
    let f = r.u32()? as usize;
    if n == 0 {
        return Err(Error::decode(8, "cloud has zero points"));
    }
    let width = f
        .checked_add(3)
        .ok_or_else(|| Error::decode(12, "feature count overflows"))?;
    let len = n
        .checked_mul(width)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::decode(8, "point count overflows"))?;
    let body = r.take(len)?;
    if r.pos != bytes.len() {
        return Err(Error::decode(r.pos, "trailing bytes"));
    }
    let mut values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut positions = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * f);
    for _ in 0..n {
        positions.push([values.next().unwrap(), values.next().unwrap(), values.next().unwrap()]);
        features.extend(values.by_ref().take(f));
    }
    if let Some(i) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::decode(16 + i * width * 4, "non-finite coordinate"));
    }
    PointCloud::new(positions, features, f)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, &encode_cloud(cloud))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cloud(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub class: String,
    pub path: String,
}

/// Parses a manifest with header `id,class,path`. Ids must be unique and no
/// field may be empty.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Manifest(format!("unreadable header: {e}")))?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["id", "class", "path"] {
        return Err(Error::Manifest(format!(
            "header must be `id,class,path`, found `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out: Vec<ManifestEntry> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let e: ManifestEntry = rec.map_err(|e| Error::Manifest(format!("row {}: {e}", i + 1)))?;
        if e.id.is_empty() || e.class.is_empty() || e.path.is_empty() {
            return Err(Error::Manifest(format!("row {}: empty field", i + 1)));
        }
        if !seen.insert(e.id.clone()) {
            return Err(Error::Manifest(format!("row {}: duplicate id `{}`", i + 1, e.id)));
        }
        out.push(e);
    }
    Ok(out)
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in entries {
        w.serialize(e).map_err(|e| Error::Manifest(e.to_string()))?;
    }
    if entries.is_empty() {
        w.write_record(["id", "class", "path"]).map_err(|e| Error::Manifest(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Manifest(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Manifest(e.to_string()))
}

/// Writes `per_class` clouds of each class into `dir` plus `manifest.csv`.
/// Every cloud draws from its own stream of a seeded generator, so the output
/// depends only on the arguments.
pub fn generate_dataset(
    dir: &Path,
    classes: &[ShapeClass],
    per_class: usize,
    points: usize,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    if per_class == 0 || points == 0 || classes.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one class, one cloud per class and one point".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(classes.len() * per_class);
    for (ci, &class) in classes.iter().enumerate() {
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((ci * per_class + i) as u64);
            let cloud = generate_cloud(class, points, &mut rng)?;
            let id = format!("{}_{i:04}", class.name());
            let file = format!("{id}.apcd");
            write_cloud(&dir.join(&file), &cloud)?;
            entries.push(ManifestEntry {
                id,
                class: class.name().to_string(),
                path: file,
            });
        }
    }
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, manifest_to_string(&entries)?.as_bytes())?;
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub clouds: Vec<PointCloud>,
    pub labels: Vec<usize>,
    /// Sorted class names; labels index into this list.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            clouds: indices.iter().map(|&i| self.clouds[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Loads a manifest (a file, or a directory holding `manifest.csv`) and
/// every cloud it lists; relative paths resolve against the manifest's
/// directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest: PathBuf = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let entries = parse_manifest(&text)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut class_names: Vec<String> = entries.iter().map(|e| e.class.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let mut ds = Dataset {
        ids: Vec::new(),
        clouds: Vec::new(),
        labels: Vec::new(),
        class_names,
    };
    for e in entries {
        ds.clouds.push(read_cloud(&base.join(&e.path))?);
        ds.labels.push(ds.class_names.binary_search(&e.class).unwrap());
        ds.ids.push(e.id);
    }
    Ok(ds)
}

/// Per-class shuffled split; `round(test_fraction * n_c)` samples of each
/// class go to the test side. Returns `(train, test)` indices, each sorted.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let k = crate::geometry::round_half_up(test_fraction * idx.len() as f64).min(idx.len());
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn surface_samples_lie_on_their_surfaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for class in ShapeClass::ALL {
            for _ in 0..5 {
                let spec = ShapeSpec::random(class, &mut rng);
                for p in spec.sample_surface(400, &mut rng) {
                    let d = spec.surface_distance(p);
                    assert!(d < 1e-6, "{class:?} {spec:?} point {p:?} off by {d}");
                }
            }
        }
    }

    #[test]
    fn sphere_points_have_radius_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = ShapeSpec {
            class: ShapeClass::Sphere,
            size: [0.7, 0.0, 0.0],
        };
        for p in s.sample_surface(1000, &mut rng) {
            assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn box_faces_are_area_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ShapeSpec {
            class: ShapeClass::Box,
            size: [1.0, 1.0, 0.25],
        };
        let n = 20000;
        let top = s
            .sample_surface(n, &mut rng)
            .iter()
            .filter(|p| (p[2].abs() - 0.25).abs() < 1e-12)
            .count();
        // z faces: 2*(2*2) = 8 of total 8 + 2*(2*0.5)*2 = 12.
        let expected = 8.0 / 12.0;
        assert!((top as f64 / n as f64 - expected).abs() < 0.02);
    }

    #[test]
    fn cloud_round_trip_with_features() {
        let c = PointCloud::new(
            vec![[0.1, -2.0, 3.5], [f32::MAX, 0.0, -0.0]],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            3,
        )
        .unwrap();
        let back = decode_cloud(&encode_cloud(&c)).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_cloud(&back), encode_cloud(&c));
    }

    #[test]
    fn zero_point_file_is_rejected() {
        let mut bytes = CLOUD_MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_cloud(&bytes), Err(Error::Decode { .. })));
    }

    #[test]
    fn bad_magic_and_short_read_are_descriptive() {
        let c = PointCloud::from_positions(vec![[1.0, 2.0, 3.0]]).unwrap();
        let mut bytes = encode_cloud(&c);
        let err = decode_cloud(&bytes[..20]).unwrap_err().to_string();
        assert!(err.contains("byte 16"), "{err}");
        bytes[1] = b'X';
        assert!(decode_cloud(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn manifest_parsing() {
        let ok = "id,class,path\na,sphere,a.apcd\nb,box,sub/b.apcd\n";
        let m = parse_manifest(ok).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].path, "sub/b.apcd");
        assert_eq!(parse_manifest(&manifest_to_string(&m).unwrap()).unwrap(), m);
        assert!(parse_manifest("name,class,path\n").is_err());
        assert!(parse_manifest("id,class,path\na,sphere,x\na,box,y\n").is_err());
        assert!(parse_manifest("id,class,path\na,,x\n").is_err());
        assert!(parse_manifest("id,class,path\na,b\n").is_err());
        assert!(parse_manifest(&manifest_to_string(&[]).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn generated_dataset_is_balanced_and_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate_dataset(a.path(), &ShapeClass::ALL, 3, 64, 7).unwrap();
        generate_dataset(b.path(), &ShapeClass::ALL, 3, 64, 7).unwrap();
        assert_eq!(m.len(), 15);
        for e in &m {
            let x = std::fs::read(a.path().join(&e.path)).unwrap();
            let y = std::fs::read(b.path().join(&e.path)).unwrap();
            assert_eq!(x, y);
        }
        let ds = load_dataset(a.path()).unwrap();
        assert_eq!(ds.class_names, vec!["box", "cone", "cylinder", "sphere", "torus"]);
        for c in 0..5 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 3);
        }
        assert!(ds.clouds.iter().all(|c| c.len() == 64));
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        std::fs::write(&file, b"x").unwrap();
        assert!(generate_dataset(&file.join("sub"), &ShapeClass::ALL, 1, 8, 0).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let (train, test) = stratified_split(&labels, 0.2, 3);
        assert_eq!(test.len(), 20);
        assert_eq!(train.len(), 80);
        for c in 0..5 {
            assert_eq!(test.iter().filter(|&&i| labels[i] == c).count(), 4);
        }
        assert_eq!(stratified_split(&labels, 0.2, 3), (train, test));
    }

    proptest! {
        #[test]
        fn cloud_round_trip_random(
            pts in prop::collection::vec(prop::array::uniform3(-1e6f32..1e6), 1..40),
            f in 0usize..4,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats = (0..pts.len() * f).map(|_| rng.gen::<f32>()).collect();
            let c = PointCloud::new(pts, feats, f).unwrap();
            prop_assert_eq!(decode_cloud(&encode_cloud(&c)).unwrap(), c);
        }

        #[test]
        fn decode_cloud_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
            let _ = decode_cloud(&bytes);
        }

        #[test]
        fn parse_manifest_never_panics(text in ".{0,200}") {
            let _ = parse_manifest(&text);
        }
    }
}
