//! Patch grids and the random and block-wise masking strategies.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::error::{config_err, contract_err, Result};
use crate::tensor::{Real, Tensor};

/// Image extents split into square patches of side `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, c: usize, p: usize) -> Result<Self> {
        if p == 0 || h == 0 || w == 0 || c == 0 {
            return Err(config_err!("image {h}x{w}x{c} with patch {p}: extents must be positive"));
        }
        if h % p != 0 || w % p != 0 {
            return Err(config_err!("patch size {p} does not divide image {h}x{w}"));
        }
        Ok(Self { h, w, c, p })
    }

    pub fn grid_h(&self) -> usize {
        self.h / self.p
    }

    pub fn grid_w(&self) -> usize {
        self.w / self.p
    }

    pub fn n(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.p * self.p * self.c
    }

    /// `[H, W, C]` image to `[N, P*P*C]` rows in row-major patch order.
    pub fn patchify<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image.shape())?;
        let (p, c, gw) = (self.p, self.c, self.grid_w());
        let dim = self.patch_dim();
        let src = image.data();
        let mut out = vec![T::zero(); self.n() * dim];
        for (n, row) in out.chunks_mut(dim).enumerate() {
            let (gy, gx) = (n / gw, n % gw);
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * self.w + gx * p) * c;
                row[py * p * c..(py + 1) * p * c].copy_from_slice(&src[start..start + p * c]);
            }
        }
        Ok(Tensor::new(vec![self.n(), dim], out)?)
    }

    pub fn unpatchify<T: Real>(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        if patches.shape() != [self.n(), self.patch_dim()] {
            return Err(contract_err!(
                "patches {:?} do not fit grid of {} x {}",
                patches.shape(),
                self.n(),
                self.patch_dim()
            ));
        }
        let (p, c, gw) = (self.p, self.c, self.grid_w());
        let dim = self.patch_dim();
        let mut out = vec![T::zero(); self.h * self.w * c];
        for (n, row) in patches.data().chunks(dim).enumerate() {
            let (gy, gx) = (n / gw, n % gw);
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * self.w + gx * p) * c;
                out[start..start + p * c].copy_from_slice(&row[py * p * c..(py + 1) * p * c]);
            }
        }
        Ok(Tensor::new(vec![self.h, self.w, c], out)?)
    }

    pub fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.h, self.w, self.c] {
            return Err(config_err!(
                "image shape {shape:?} does not match configured {}x{}x{}",
                self.h,
                self.w,
                self.c
            ));
        }
        Ok(())
    }
}

/// An axis-aligned rectangle of grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BlockRect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }

    /// At least one cell away from every edge of the rectangle.
    pub fn is_interior(&self, row: usize, col: usize) -> bool {
        row > self.top
            && row + 1 < self.top + self.height
            && col > self.left
            && col + 1 < self.left + self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    n: usize,
    masked: Vec<usize>,
    weights: Vec<f64>,
    blocks: Option<Vec<BlockRect>>,
    grid_w: usize,
}

impl MaskPlan {
    /// Builds a plan from arbitrary indices, sorting them; duplicates and out-of-range ids are rejected.
    pub fn from_indices(n: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut masked: Vec<usize> = indices.into_iter().collect();
        masked.sort_unstable();
        if let Some(&last) = masked.last() {
            if last >= n {
                return Err(contract_err!("mask index {last} out of range for {n} patches"));
            }
        }
        if masked.windows(2).any(|w| w[0] == w[1]) {
            return Err(contract_err!("mask indices contain duplicates"));
        }
        let weights = vec![1.0; masked.len()];
        Ok(Self {
            n,
            masked,
            weights,
            blocks: None,
            grid_w: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn n_visible(&self) -> usize {
        self.n - self.masked.len()
    }

    /// Masked indices in ascending order.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    /// Visible indices in ascending order.
    pub fn visible(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_visible());
        let mut m = self.masked.iter().peekable();
        for i in 0..self.n {
            if m.peek() == Some(&&i) {
                m.next();
            } else {
                out.push(i);
            }
        }
        out
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    /// Per-patch loss weights, aligned with [`masked`](Self::masked).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn blocks(&self) -> Option<&[BlockRect]> {
        self.blocks.as_deref()
    }

    /// Row-major 0/1 occupancy of the grid.
    pub fn to_grid(&self) -> Vec<bool> {
        let mut g = vec![false; self.n];
        for &i in &self.masked {
            g[i] = true;
        }
        g
    }
}

fn target_count(n: usize, ratio: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(config_err!("mask ratio {ratio} outside [0, 1]"));
    }
    Ok(((ratio * n as f64).round() as usize).min(n))
}

/// `round(ratio * n)` indices drawn uniformly without replacement.
pub fn random_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    let k = target_count(n, ratio)?;
    MaskPlan::from_indices(n, index::sample(rng, n, k).into_iter())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMaskConfig {
    pub min_block: usize,
    pub max_block: usize,
    /// Lower aspect bound; the upper bound is its reciprocal.
    pub min_aspect: f64,
}

impl Default for BlockMaskConfig {
    fn default() -> Self {
        Self {
            min_block: 16,
            max_block: 60,
            min_aspect: 0.3,
        }
    }
}

const MAX_BLOCK_DRAWS: usize = 10_000;

/// Unions random rectangles until `round(ratio * N)` cells are covered, then
/// trims the overshoot from the last rectangle's new cells.
pub fn block_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    cfg: &BlockMaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    let n = grid_h * grid_w;
    let target = target_count(n, ratio)?;
    if cfg.min_block == 0 || cfg.min_block > cfg.max_block || cfg.min_block > n {
        return Err(config_err!(
            "block bounds [{}, {}] infeasible for a {grid_h}x{grid_w} grid",
            cfg.min_block,
            cfg.max_block
        ));
    }
    if !(cfg.min_aspect > 0.0 && cfg.min_aspect <= 1.0) {
        return Err(config_err!("block aspect bound {} outside (0, 1]", cfg.min_aspect));
    }
    let max_block = cfg.max_block.min(n);
    let log_lo = cfg.min_aspect.ln();

    let mut covered = vec![false; n];
    let mut count = 0;
    let mut blocks = Vec::new();
    let mut draws = 0;
    while count < target && draws < MAX_BLOCK_DRAWS {
        draws += 1;
        let area = rng.random_range(cfg.min_block as f64..=max_block as f64);
        let aspect = if log_lo < 0.0 {
            rng.random_range(log_lo..-log_lo).exp()
        } else {
            1.0
        };
        let (height, width) = block_extent(area, aspect, grid_h, grid_w);
        let top = rng.random_range(0..=grid_h - height);
        let left = rng.random_range(0..=grid_w - width);
        let mut fresh = Vec::new();
        for r in top..top + height {
            for c in left..left + width {
                let i = r * grid_w + c;
                if !covered[i] {
                    covered[i] = true;
                    fresh.push(i);
                }
            }
        }
        if fresh.is_empty() {
            continue;
        }
        count += fresh.len();
        blocks.push(BlockRect {
            top,
            left,
            height,
            width,
        });
        if count > target {
            let drop = count - target;
            for k in index::sample(rng, fresh.len(), drop) {
                covered[fresh[k]] = false;
            }
            count = target;
        }
    }
    if count < target {
        // fall back to uniform cells so the count stays exact
        let free: Vec<usize> = (0..n).filter(|&i| !covered[i]).collect();
        for k in index::sample(rng, free.len(), target - count) {
            covered[free[k]] = true;
        }
    }
    let mut plan = MaskPlan::from_indices(n, (0..n).filter(|&i| covered[i]))?;
    plan.blocks = Some(blocks);
    plan.grid_w = grid_w;
    Ok(plan)
}

fn block_extent(area: f64, aspect: f64, grid_h: usize, grid_w: usize) -> (usize, usize) {
    let mut h = (area * aspect).sqrt().round().max(1.0) as usize;
    let mut w = (area / aspect).sqrt().round().max(1.0) as usize;
    if h > grid_h {
        h = grid_h;
        w = (area / h as f64).ceil() as usize;
    }
    if w > grid_w {
        w = grid_w;
        h = ((area / w as f64).ceil() as usize).min(grid_h);
    }
    (h.clamp(1, grid_h), w.clamp(1, grid_w))
}

/// Up-weights masked cells lying in the interior of any recorded block.
pub fn center_weights(plan: &MaskPlan, w_center: f64) -> Result<MaskPlan> {
    let blocks = plan
        .blocks
        .as_ref()
        .ok_or_else(|| contract_err!("center weighting needs a block mask with block records"))?;
    if !(w_center >= 1.0 && w_center.is_finite()) {
        return Err(config_err!("center weight {w_center} must be finite and at least 1"));
    }
    let gw = plan.grid_w;
    let mut out = plan.clone();
    for (w, &i) in out.weights.iter_mut().zip(&plan.masked) {
        let (r, c) = (i / gw, i % gw);
        *w = if blocks.iter().any(|b| b.is_interior(r, c)) {
            w_center
        } else {
            1.0
        };
    }
    Ok(out)
}

/// Size of the largest 4-connected group of masked cells.
pub fn largest_component(plan: &MaskPlan, grid_h: usize, grid_w: usize) -> usize {
    let mut seen = plan.to_grid();
    let mut best = 0;
    let mut queue = VecDeque::new();
    for start in 0..grid_h * grid_w {
        if !seen[start] {
            continue;
        }
        seen[start] = false;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = (i / grid_w, i % grid_w);
            let mut visit = |j: usize| {
                if seen[j] {
                    seen[j] = false;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - grid_w);
            }
            if r + 1 < grid_h {
                visit(i + grid_w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < grid_w {
                visit(i + 1);
            }
        }
        best = best.max(size);
    }
    best
}
