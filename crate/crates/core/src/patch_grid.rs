//! Patch bookkeeping: patchification, the MR→HR patch correspondence, and
//! the three visible/masked sampling strategies.

use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Rejection-sampling budget for block placement.
pub const MAX_SAMPLING_ATTEMPTS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    pub fn new(image_h: usize, image_w: usize, patch: usize) -> Result<Self> {
        if patch == 0 || image_h == 0 || image_w == 0 {
            return Err(Error::invalid("patch grid extents must be positive"));
        }
        if image_h % patch != 0 || image_w % patch != 0 {
            return Err(Error::invalid(format!(
                "patch size {patch} does not divide image {image_h}x{image_w}"
            )));
        }
        Ok(PatchGrid {
            image_h,
            image_w,
            patch,
            grid_h: image_h / patch,
            grid_w: image_w / patch,
        })
    }

    pub fn n(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k / self.grid_w, k % self.grid_w)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.grid_w + col
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }
}

/// An MR grid and the HR grid `s` times finer in each direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalePair {
    pub s: usize,
    pub mr: PatchGrid,
    pub hr: PatchGrid,
}

impl ScalePair {
    pub fn new(mr: PatchGrid, hr: PatchGrid, s: usize) -> Result<Self> {
        if s == 0 || hr.grid_h != s * mr.grid_h || hr.grid_w != s * mr.grid_w {
            return Err(Error::invalid(format!(
                "HR grid {}x{} is not {s}x the MR grid {}x{}",
                hr.grid_h, hr.grid_w, mr.grid_h, mr.grid_w
            )));
        }
        Ok(ScalePair { s, mr, hr })
    }

    /// HR image `s` times larger than the MR image, same patch size.
    pub fn from_mr(mr: PatchGrid, s: usize) -> Result<Self> {
        let hr = PatchGrid::new(mr.image_h * s, mr.image_w * s, mr.patch)?;
        ScalePair::new(mr, hr, s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SamplingStrategy {
    IjepaBlock,
    Random,
    SaBlock,
}

/// A visible/masked split of a grid's patch indices, both sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMask {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub strategy: SamplingStrategy,
}

impl SampleMask {
    /// Builds the mask whose masked set is the complement of `visible`.
    pub fn from_visible(n: usize, mut visible: Vec<usize>, strategy: SamplingStrategy) -> Result<Self> {
        visible.sort_unstable();
        visible.dedup();
        if let Some(&bad) = visible.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("patch index {bad} outside grid of {n}")));
        }
        let mut is_vis = vec![false; n];
        for &i in &visible {
            is_vis[i] = true;
        }
        let masked = (0..n).filter(|&i| !is_vis[i]).collect();
        Ok(SampleMask {
            visible,
            masked,
            strategy,
        })
    }

    /// Checks that visible and masked partition `[0, n)`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![0u8; n];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= n {
                return Err(Error::invalid(format!("patch index {i} outside grid of {n}")));
            }
            seen[i] += 1;
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(Error::invalid(format!(
                "mask does not partition the grid: index {i} appears {} times",
                seen[i]
            )));
        }
        Ok(())
    }
}

/// `N × (C·P·P)` matrix; row `k` is grid cell `(k / grid_w, k % grid_w)` and
/// its features run band-major, then pixel rows, then pixel columns.
pub fn patchify(image: &Raster, patch: usize) -> Result<Tensor> {
    let grid = PatchGrid::new(image.height, image.width, patch)?;
    let feat = image.bands * patch * patch;
    let mut data = Vec::with_capacity(grid.n() * feat);
    for k in 0..grid.n() {
        let (gy, gx) = grid.coords(k);
        for b in 0..image.bands {
            for py in 0..patch {
                let start = image.idx(b, gy * patch + py, gx * patch);
                data.extend_from_slice(&image.data[start..start + patch]);
            }
        }
    }
    Ok(Tensor::matrix(grid.n(), feat, data))
}

pub fn unpatchify(rows: &Tensor, bands: usize, height: usize, width: usize, patch: usize) -> Result<Raster> {
    let grid = PatchGrid::new(height, width, patch)?;
    if rows.rows() != grid.n() || rows.cols() != bands * patch * patch {
        return Err(Error::shape(
            "unpatchify",
            format!(
                "{}x{} rows for {} patches of {} features",
                rows.rows(),
                rows.cols(),
                grid.n(),
                bands * patch * patch
            ),
        ));
    }
    let mut out = Raster::filled(bands, height, width, 0.0);
    for k in 0..grid.n() {
        let (gy, gx) = grid.coords(k);
        let row = rows.row(k);
        for b in 0..bands {
            for py in 0..patch {
                let src = (b * patch + py) * patch;
                let dst = out.idx(b, gy * patch + py, gx * patch);
                out.data[dst..dst + patch].copy_from_slice(&row[src..src + patch]);
            }
        }
    }
    Ok(out)
}

/// HR grid coordinates `{(s·u + i, s·v + j) | 0 ≤ i, j < s}` covered by MR
/// cell `(u, v)`, in row-major `(i, j)` order.
pub fn hr_patch_set(u: usize, v: usize, s: usize, mr: &PatchGrid) -> Result<Vec<(usize, usize)>> {
    if s == 0 {
        return Err(Error::invalid("scale factor must be at least 1"));
    }
    if u >= mr.grid_h || v >= mr.grid_w {
        return Err(Error::invalid(format!(
            "MR cell ({u},{v}) outside {}x{} grid",
            mr.grid_h, mr.grid_w
        )));
    }
    Ok((0..s)
        .flat_map(|i| (0..s).map(move |j| (s * u + i, s * v + j)))
        .collect())
}

/// Uniformly chosen visible set of `round(ratio·N)` patches.
pub fn sample_random(grid: &PatchGrid, visible_ratio: f64, rng: &mut Rng) -> Result<SampleMask> {
    if !(visible_ratio > 0.0 && visible_ratio < 1.0) {
        return Err(Error::invalid(format!(
            "visible ratio must be in (0, 1), got {visible_ratio}"
        )));
    }
    let n = grid.n();
    let k = (visible_ratio * n as f64).round() as usize;
    if k == 0 || k == n {
        return Err(Error::invalid(format!(
            "visible ratio {visible_ratio} leaves {k} of {n} patches visible"
        )));
    }
    let visible = sample(rng, n, k).into_vec();
    SampleMask::from_visible(n, visible, SamplingStrategy::Random)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockMaskConfig {
    pub n_targets: usize,
    pub target_scale: (f64, f64),
    pub aspect: (f64, f64),
    pub context_scale: (f64, f64),
}

impl Default for BlockMaskConfig {
    fn default() -> Self {
        BlockMaskConfig {
            n_targets: 4,
            target_scale: (0.15, 0.2),
            aspect: (0.75, 1.5),
            context_scale: (0.85, 1.0),
        }
    }
}

/// Inclusive area window `[floor(lo·N), ceil(hi·N)]` a block of the given
/// scale range must fall in.
pub fn block_area_window(n: usize, scale: (f64, f64)) -> (usize, usize) {
    let lo = ((scale.0 * n as f64).floor() as usize).max(1);
    let hi = ((scale.1 * n as f64).ceil() as usize).min(n);
    (lo, hi)
}

/// Rectangle `(top, left, h, w)` in grid cells.
pub type Block = (usize, usize, usize, usize);

fn sample_block(grid: &PatchGrid, scale: (f64, f64), aspect: (f64, f64), rng: &mut Rng) -> Option<Block> {
    let n = grid.n();
    let (lo, hi) = block_area_window(n, scale);
    let s = scale.0 + rng.random::<f64>() * (scale.1 - scale.0);
    let ar = aspect.0 + rng.random::<f64>() * (aspect.1 - aspect.0);
    let keep = (n as f64 * s).floor();
    let h = ((keep * ar).sqrt().round() as usize).clamp(1, grid.grid_h);
    let w = ((keep / ar).sqrt().round() as usize).clamp(1, grid.grid_w);
    if h * w < lo || h * w > hi {
        return None;
    }
    let top = rng.random_range(0..=grid.grid_h - h);
    let left = rng.random_range(0..=grid.grid_w - w);
    Some((top, left, h, w))
}

pub fn block_indices(grid: &PatchGrid, (top, left, h, w): Block) -> Vec<usize> {
    (top..top + h)
        .flat_map(|r| (left..left + w).map(move |c| grid.index(r, c)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSample {
    /// visible = context cells, masked = everything else
    pub context: SampleMask,
    /// one sorted index list per target block
    pub targets: Vec<Vec<usize>>,
}

/// Target blocks by area scale and aspect ratio, plus a context block with
/// every target cell removed.
pub fn sample_ijepa_blocks(grid: &PatchGrid, cfg: &BlockMaskConfig, rng: &mut Rng) -> Result<BlockSample> {
    if cfg.n_targets == 0 {
        return Err(Error::invalid("at least one target block is required"));
    }
    let n = grid.n();
    let mut failures = 0;
    'attempt: while failures < MAX_SAMPLING_ATTEMPTS {
        let mut in_target = vec![false; n];
        let mut targets = Vec::with_capacity(cfg.n_targets);
        for _ in 0..cfg.n_targets {
            let Some(b) = sample_block(grid, cfg.target_scale, cfg.aspect, rng) else {
                failures += 1;
                continue 'attempt;
            };
            let idx = block_indices(grid, b);
            for &i in &idx {
                in_target[i] = true;
            }
            targets.push(idx);
        }
        let Some(ctx) = sample_block(grid, cfg.context_scale, (1.0, 1.0), rng) else {
            failures += 1;
            continue;
        };
        let context: Vec<usize> = block_indices(grid, ctx)
            .into_iter()
            .filter(|&i| !in_target[i])
            .collect();
        if context.is_empty() {
            failures += 1;
            continue;
        }
        let context = SampleMask::from_visible(n, context, SamplingStrategy::IjepaBlock)?;
        return Ok(BlockSample { context, targets });
    }
    Err(Error::Sampling {
        attempts: MAX_SAMPLING_ATTEMPTS,
        detail: format!(
            "no feasible target/context layout on a {}x{} grid (targets {}, scale {:?})",
            grid.grid_h, grid.grid_w, cfg.n_targets, cfg.target_scale
        ),
    })
}

/// One contiguous visible rectangle of area ≈ `block_scale·N`.
pub fn sample_sa_block(grid: &PatchGrid, block_scale: f64, rng: &mut Rng) -> Result<SampleMask> {
    if !(block_scale > 0.0 && block_scale <= 1.0) {
        return Err(Error::invalid(format!(
            "block scale must be in (0, 1], got {block_scale}"
        )));
    }
    let area = block_scale * grid.n() as f64;
    let h = (area.sqrt().round() as usize).clamp(1, grid.grid_h);
    let w = ((area / h as f64).round() as usize).clamp(1, grid.grid_w);
    let top = rng.random_range(0..=grid.grid_h - h);
    let left = rng.random_range(0..=grid.grid_w - w);
    let visible = block_indices(grid, (top, left, h, w));
    SampleMask::from_visible(grid.n(), visible, SamplingStrategy::SaBlock)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn patchify_pixel_patches_in_grid_order() {
        let img = Raster::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = patchify(&img, 1).unwrap();
        assert_eq!(t.shape(), &[4, 1]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn patchify_constant_rows_identical() {
        let img = Raster::filled(4, 8, 8, 0.37);
        let t = patchify(&img, 4).unwrap();
        for r in 1..t.rows() {
            assert_eq!(t.row(r), t.row(0));
        }
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = Raster::filled(1, 6, 8, 0.0);
        assert!(patchify(&img, 4).is_err());
    }

    #[test]
    fn hr_set_scale_two_origin() {
        let mr = PatchGrid::new(16, 16, 8).unwrap();
        assert_eq!(
            hr_patch_set(0, 0, 2, &mr).unwrap(),
            vec![(0, 0), (0, 1), (1, 0), (1, 1)]
        );
        assert_eq!(hr_patch_set(1, 0, 1, &mr).unwrap(), vec![(1, 0)]);
        assert!(hr_patch_set(2, 0, 2, &mr).is_err());
    }

    #[test]
    fn random_mask_counts_and_determinism() {
        let grid = PatchGrid::new(80, 80, 8).unwrap();
        let a = sample_random(&grid, 0.1, &mut seeded(3)).unwrap();
        assert_eq!((a.visible.len(), a.masked.len()), (10, 90));
        a.validate(100).unwrap();
        let b = sample_random(&grid, 0.1, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_mask_rejects_degenerate_ratio() {
        let grid = PatchGrid::new(16, 16, 8).unwrap();
        assert!(sample_random(&grid, 0.05, &mut seeded(0)).is_err());
        assert!(sample_random(&grid, 1.0, &mut seeded(0)).is_err());
    }

    #[test]
    fn whole_grid_target_leaves_no_context() {
        let grid = PatchGrid::new(32, 32, 8).unwrap();
        let cfg = BlockMaskConfig {
            n_targets: 1,
            target_scale: (1.0, 1.0),
            aspect: (1.0, 1.0),
            context_scale: (1.0, 1.0),
        };
        let err = sample_ijepa_blocks(&grid, &cfg, &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::Sampling { attempts: 50, .. }));
    }

    #[test]
    fn sa_block_full_scale_covers_grid() {
        let grid = PatchGrid::new(32, 32, 8).unwrap();
        let m = sample_sa_block(&grid, 1.0, &mut seeded(1)).unwrap();
        assert_eq!(m.visible, (0..16).collect::<Vec<_>>());
        assert!(m.masked.is_empty());
    }
}
