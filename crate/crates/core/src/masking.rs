//! Multi-block masking: one context rectangle and several target rectangles
//! per image, with target patches removed from the context.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        GridShape { rows, cols }
    }

    pub fn square(side: usize) -> Self {
        GridShape { rows: side, cols: side }
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub grid: GridShape,
    /// Sorted context patch indices (B_x).
    pub context: Vec<usize>,
    /// Sorted patch indices of each target rectangle. Blocks may overlap
    /// each other but never the context.
    pub targets: Vec<Vec<usize>>,
}

impl MaskSpec {
    /// B_y: sorted union of all target blocks.
    pub fn target_union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.targets.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    /// Number of (block, patch) occurrences across target blocks.
    pub fn target_occurrences(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub num_targets: usize,
    pub target_scale: (f64, f64),
    pub target_aspect: (f64, f64),
    pub context_scale: (f64, f64),
    pub context_aspect: (f64, f64),
    pub max_retries: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            num_targets: 4,
            target_scale: (0.15, 0.2),
            target_aspect: (0.75, 1.5),
            context_scale: (0.85, 1.0),
            context_aspect: (1.0, 1.0),
            max_retries: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("invalid masking config: {0}")]
    Config(String),
    #[error("mask sampling failed after {attempts} attempts: {what}")]
    Exhausted { attempts: usize, what: &'static str },
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        let unit = |(a, b): (f64, f64), name: &str| {
            if !(a > 0.0 && a <= b && b <= 1.0) {
                return Err(MaskError::Config(format!("{name} ({a}, {b}) must satisfy 0 < lo <= hi <= 1")));
            }
            Ok(())
        };
        let pos = |(a, b): (f64, f64), name: &str| {
            if !(a > 0.0 && a <= b && b.is_finite()) {
                return Err(MaskError::Config(format!("{name} ({a}, {b}) must satisfy 0 < lo <= hi")));
            }
            Ok(())
        };
        unit(self.target_scale, "target_scale")?;
        unit(self.context_scale, "context_scale")?;
        pos(self.target_aspect, "target_aspect")?;
        pos(self.context_aspect, "context_aspect")?;
        if self.max_retries == 0 {
            return Err(MaskError::Config("max_retries must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn indices(&self, grid: GridShape) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.height * self.width);
        for r in self.top..self.top + self.height {
            for c in self.left..self.left + self.width {
                v.push(r * grid.cols + c);
            }
        }
        v
    }
}

/// Admissible areas for a scale range: `floor(lo·A) ..= floor(hi·A)`.
pub fn area_bounds(scale: (f64, f64), grid: GridShape) -> (usize, usize) {
    let a = grid.area() as f64;
    ((scale.0 * a).floor() as usize, (scale.1 * a).floor() as usize)
}

fn aspect_ok(h: usize, w: usize, aspect: (f64, f64)) -> bool {
    let r = h as f64 / w as f64;
    const SLACK: f64 = 1e-9;
    r >= aspect.0 - SLACK && r <= aspect.1 + SLACK
}

/// Draws (scale, aspect), converts with `h = round(√(area·aspect))`,
/// `w = round(√(area/aspect))` clamped to the grid, and redraws until the
/// rounded rectangle's own area and aspect fall in range.
fn sample_block_size<R: Rng>(
    rng: &mut R,
    scale: (f64, f64),
    aspect: (f64, f64),
    grid: GridShape,
    retries: usize,
) -> Option<(usize, usize)> {
    let (amin, amax) = area_bounds(scale, grid);
    for _ in 0..retries {
        let s = rng.gen_range(scale.0..=scale.1);
        let r = rng.gen_range(aspect.0..=aspect.1);
        let keep = (grid.area() as f64 * s).floor();
        let h = ((keep * r).sqrt().round() as usize).clamp(1, grid.rows);
        let w = ((keep / r).sqrt().round() as usize).clamp(1, grid.cols);
        let area = h * w;
        if area >= amin.max(1) && area <= amax && aspect_ok(h, w, aspect) {
            return Some((h, w));
        }
    }
    None
}

fn place<R: Rng>(rng: &mut R, h: usize, w: usize, grid: GridShape) -> Rect {
    Rect {
        top: rng.gen_range(0..=grid.rows - h),
        left: rng.gen_range(0..=grid.cols - w),
        height: h,
        width: w,
    }
}

pub fn sample_mask<R: Rng>(cfg: &MaskingConfig, grid: GridShape, rng: &mut R) -> Result<MaskSpec, MaskError> {
    cfg.validate()?;
    let mut targets = Vec::with_capacity(cfg.num_targets);
    for _ in 0..cfg.num_targets {
        let (h, w) = sample_block_size(rng, cfg.target_scale, cfg.target_aspect, grid, cfg.max_retries).ok_or(
            MaskError::Exhausted {
                attempts: cfg.max_retries,
                what: "no admissible target rectangle",
            },
        )?;
        targets.push(place(rng, h, w, grid).indices(grid));
    }
    let mut in_target = vec![false; grid.area()];
    for &i in targets.iter().flatten() {
        in_target[i] = true;
    }
    for _ in 0..cfg.max_retries {
        let Some((h, w)) = sample_block_size(rng, cfg.context_scale, cfg.context_aspect, grid, cfg.max_retries) else {
            break;
        };
        let ctx: Vec<usize> = place(rng, h, w, grid)
            .indices(grid)
            .into_iter()
            .filter(|&i| !in_target[i])
            .collect();
        if !ctx.is_empty() {
            return Ok(MaskSpec {
                grid,
                context: ctx,
                targets,
            });
        }
    }
    Err(MaskError::Exhausted {
        attempts: cfg.max_retries,
        what: "context empty after removing targets",
    })
}

/// Pure function of (config, grid, seed).
pub fn sample_mask_seeded(cfg: &MaskingConfig, grid: GridShape, seed: u64) -> Result<MaskSpec, MaskError> {
    let mut rng = rng_for(seed, Stream::Mask, 0);
    sample_mask(cfg, grid, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskViolation {
    EmptyContext,
    EmptyTarget { block: usize },
    OutOfRange { index: usize },
    NotSorted { block: Option<usize> },
    Overlap { index: usize, block: usize },
    NotRectangle { block: usize },
}

fn bounding_box(indices: &[usize], grid: GridShape) -> (usize, usize, usize, usize) {
    let rows = indices.iter().map(|&i| i / grid.cols);
    let cols = indices.iter().map(|&i| i % grid.cols);
    (
        rows.clone().min().unwrap(),
        rows.max().unwrap(),
        cols.clone().min().unwrap(),
        cols.max().unwrap(),
    )
}

/// Every structural invariant of a [`MaskSpec`]; never panics.
pub fn validate_mask(spec: &MaskSpec) -> Vec<MaskViolation> {
    let mut v = Vec::new();
    let area = spec.grid.area();
    let sorted = |s: &[usize]| s.windows(2).all(|w| w[0] < w[1]);
    if spec.context.is_empty() {
        v.push(MaskViolation::EmptyContext);
    }
    if !sorted(&spec.context) {
        v.push(MaskViolation::NotSorted { block: None });
    }
    for &i in &spec.context {
        if i >= area {
            v.push(MaskViolation::OutOfRange { index: i });
        }
    }
    for (b, blk) in spec.targets.iter().enumerate() {
        if blk.is_empty() {
            v.push(MaskViolation::EmptyTarget { block: b });
            continue;
        }
        if !sorted(blk) {
            v.push(MaskViolation::NotSorted { block: Some(b) });
        }
        if let Some(&bad) = blk.iter().find(|&&i| i >= area) {
            v.push(MaskViolation::OutOfRange { index: bad });
            continue;
        }
        for &i in blk {
            if spec.context.binary_search(&i).is_ok() {
                v.push(MaskViolation::Overlap { index: i, block: b });
            }
        }
        let (r0, r1, c0, c1) = bounding_box(blk, spec.grid);
        let mut unique = blk.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != (r1 - r0 + 1) * (c1 - c0 + 1) {
            v.push(MaskViolation::NotRectangle { block: b });
        }
    }
    v
}

/// Height and width of a rectangular block.
pub fn block_dims(block: &[usize], grid: GridShape) -> (usize, usize) {
    let (r0, r1, c0, c1) = bounding_box(block, grid);
    (r1 - r0 + 1, c1 - c0 + 1)
}
