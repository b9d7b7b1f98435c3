//! Patch mask sampling: inverse block-wise masks (visible k-NN blocks around
//! seed patches, everything else masked) with exact-ratio bit correction,
//! plus a uniform baseline.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{knn, round_half_up, Point3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    #[default]
    InverseBlockwise,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    pub ratio: f64,
    pub block_size: usize,
    pub adjust_ratio: f64,
    pub count: usize,
    pub strategy: MaskStrategy,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            ratio: 0.7,
            block_size: 6,
            adjust_ratio: 0.1,
            count: 4,
            strategy: MaskStrategy::InverseBlockwise,
        }
    }
}

/// `N_mm x N_c` masks over one patch set; `true` marks a masked patch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Vec<bool>>,
    pub mask_ratio: f64,
    pub block_size: usize,
    pub adjust_ratio: f64,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn n_patches(&self) -> usize {
        self.masks.first().map_or(0, Vec::len)
    }
}

/// A sampled block mask together with what produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    pub mask: Vec<bool>,
    /// Seed patches whose neighbourhoods formed the visible blocks.
    pub seeds: Vec<usize>,
    /// Bits flipped by the exact-ratio correction.
    pub flips: usize,
}

pub fn masked_count(n_patches: usize, ratio: f64) -> usize {
    round_half_up(ratio * n_patches as f64).min(n_patches)
}

/// Number of visible blocks: `round(N_c * ((1 - M_r) + A_r) / B_s)`.
pub fn block_count(n_patches: usize, ratio: f64, adjust_ratio: f64, block_size: usize) -> usize {
    round_half_up(n_patches as f64 * ((1.0 - ratio) + adjust_ratio) / block_size as f64)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Indices of the masked patches.
pub fn masked_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

pub fn visible_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| (!m).then_some(i))
        .collect()
}

pub fn sample_uniform<R: Rng + ?Sized>(n_patches: usize, ratio: f64, rng: &mut R) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    let mut mask = vec![false; n_patches];
    for i in sample(rng, n_patches, masked_count(n_patches, ratio)) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Visible set before correction: union of `block_size`-NN balls around seeds.
pub fn block_visible_set(centers: &[Point3], seeds: &[usize], block_size: usize) -> Result<Vec<bool>> {
    let k = block_size.min(centers.len());
    let seed_pts: Vec<Point3> = seeds.iter().map(|&s| centers[s]).collect();
    let mut visible = vec![false; centers.len()];
    for i in knn(&seed_pts, centers, k)? {
        visible[i] = true;
    }
    Ok(visible)
}

pub fn sample_inverse_blockwise<R: Rng + ?Sized>(
    centers: &[Point3],
    ratio: f64,
    block_size: usize,
    adjust_ratio: f64,
    rng: &mut R,
) -> Result<BlockMask> {
    check_ratio(ratio)?;
    if block_size == 0 {
        return Err(Error::InvalidArgument("block size must be at least 1".into()));
    }
    let n = centers.len();
    let target = masked_count(n, ratio);
    if target == 0 {
        return Ok(BlockMask {
            mask: vec![false; n],
            seeds: Vec::new(),
            flips: 0,
        });
    }
    let n_blocks = block_count(n, ratio, adjust_ratio, block_size).min(n);
    if n_blocks == 0 {
        log::warn!("block count is zero for {n} patches at ratio {ratio}; using uniform masking");
        return Ok(BlockMask {
            mask: sample_uniform(n, ratio, rng)?,
            seeds: Vec::new(),
            flips: 0,
        });
    }
    let seeds: Vec<usize> = sample(rng, n, n_blocks).into_vec();
    let visible = block_visible_set(centers, &seeds, block_size)?;
    let mut mask: Vec<bool> = visible.iter().map(|v| !v).collect();
    let masked = mask.iter().filter(|&&m| m).count();
    // Flip uniformly chosen bits of whichever class is over-represented.
    let flips = masked.abs_diff(target);
    let pool: Vec<usize> = if masked > target {
        masked_indices(&mask)
    } else {
        visible_indices(&mask)
    };
    for j in sample(rng, pool.len(), flips) {
        mask[pool[j]] = !mask[pool[j]];
    }
    Ok(BlockMask { mask, seeds, flips })
}

/// `params.count` independent masks over the same patch centers.
pub fn build_multimask<R: Rng + ?Sized>(centers: &[Point3], params: &MaskParams, rng: &mut R) -> Result<MaskSet> {
    if params.count == 0 {
        return Err(Error::InvalidArgument("multi-mask count must be at least 1".into()));
    }
    let masks = (0..params.count)
        .map(|_| match params.strategy {
            MaskStrategy::InverseBlockwise => {
                sample_inverse_blockwise(centers, params.ratio, params.block_size, params.adjust_ratio, rng)
                    .map(|b| b.mask)
            }
            MaskStrategy::Uniform => sample_uniform(centers.len(), params.ratio, rng),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSet {
        masks,
        mask_ratio: params.ratio,
        block_size: params.block_size,
        adjust_ratio: params.adjust_ratio,
    })
}
