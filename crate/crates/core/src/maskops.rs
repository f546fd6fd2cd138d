//! Mask analysis and state estimation.
//!
//! The state score of a predicted mask is the product of two terms:
//!
//! * confidence: the mean predicted probability over the foreground of the
//!   binarised mask;
//! * concentration: the area of the largest 8-connected foreground region
//!   divided by the total foreground area.
//!
//! A frame is in a *normal* state when the score is strictly above the
//! threshold (0.85 by default) and *abnormal* otherwise. Empty masks score
//! zero everywhere and are always abnormal.

use std::collections::VecDeque;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box;
use crate::grid::Grid;

pub const DEFAULT_STATE_THRESHOLD: f64 = 0.85;
pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;

/// Per-pixel foreground probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Grid<f64>);

impl ProbabilityMap {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        if let Some(bad) = grid.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter {
                name: "probability",
                reason: format!("value {bad} outside [0, 1]"),
            });
        }
        Ok(Self(grid))
    }

    /// Clamps into `[0, 1]`; NaN becomes 0.
    pub fn from_grid_clamped(mut grid: Grid<f64>) -> Self {
        for v in grid.as_mut_slice() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self(grid)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::from_grid_clamped(Grid::filled(width, height, value))
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self(mask.map(|&b| if b { 1.0 } else { 0.0 }))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.0
    }
}

impl Deref for ProbabilityMap {
    type Target = Grid<f64>;
    fn deref(&self) -> &Grid<f64> {
        &self.0
    }
}

/// Binary foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(Grid<bool>);

impl BinaryMask {
    pub fn new(grid: Grid<bool>) -> Self {
        Self(grid)
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, false))
    }

    pub fn from_fn(width: usize, height: usize, f: impl FnMut(usize, usize) -> bool) -> Self {
        Self(Grid::from_fn(width, height, f))
    }

    /// Parses rows of `0`/`1` characters; whitespace is ignored.
    pub fn from_rows(rows: &[&str]) -> Self {
        let rows: Vec<Vec<bool>> = rows
            .iter()
            .map(|r| r.chars().filter(|c| !c.is_whitespace()).map(|c| c == '1').collect())
            .collect();
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        Self::from_fn(w, h, |x, y| rows[y][x])
    }

    pub fn grid(&self) -> &Grid<bool> {
        &self.0
    }

    pub fn area(&self) -> usize {
        self.0.as_slice().iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.0.as_slice().iter().any(|&b| b)
    }

    /// Minimal box around all foreground pixels.
    pub fn bounding_box(&self) -> Option<Box> {
        let (w, h) = self.0.shape();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..h {
            for x in 0..w {
                if *self.0.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| Box::from_pixel_extents(x0, y0, x1, y1))
    }
}

impl Deref for BinaryMask {
    type Target = Grid<bool>;
    fn deref(&self) -> &Grid<bool> {
        &self.0
    }
}

/// A maximal 8-connected foreground region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectedRegion {
    /// `(x, y)` pixels in discovery order; the first is the topmost-leftmost.
    pub pixels: Vec<(usize, usize)>,
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
}

impl ConnectedRegion {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn seed(&self) -> (usize, usize) {
        self.pixels[0]
    }

    pub fn bounding_box(&self) -> Box {
        Box::from_pixel_extents(self.min_x, self.min_y, self.max_x, self.max_y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateEstimate {
    pub confidence: f64,
    pub concentration: f64,
    pub state_score: f64,
    pub is_normal: bool,
}

impl StateEstimate {
    /// The estimate assigned to a ground-truth initialised frame.
    pub fn perfect() -> Self {
        Self {
            confidence: 1.0,
            concentration: 1.0,
            state_score: 1.0,
            is_normal: true,
        }
    }

    pub fn from_scores(confidence: f64, concentration: f64, threshold: f64) -> Self {
        let state_score = confidence * concentration;
        Self {
            confidence,
            concentration,
            state_score,
            is_normal: state_score > threshold,
        }
    }
}

/// `p >= threshold` per pixel.
pub fn binarize(p: &ProbabilityMap, threshold: f64) -> BinaryMask {
    BinaryMask(p.map(|&v| v >= threshold))
}

/// Partition of the foreground into maximal 8-connected regions, sorted by
/// area (descending) and then by seed pixel in raster order.
pub fn connected_components(m: &BinaryMask) -> Vec<ConnectedRegion> {
    let (w, h) = m.shape();
    let mut visited = vec![false; w * h];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for sy in 0..h {
        for sx in 0..w {
            let si = sy * w + sx;
            if visited[si] || !*m.get(sx, sy) {
                continue;
            }
            visited[si] = true;
            queue.push_back((sx, sy));
            let mut region = ConnectedRegion {
                pixels: Vec::new(),
                min_x: sx,
                min_y: sy,
                max_x: sx,
                max_y: sy,
            };
            while let Some((x, y)) = queue.pop_front() {
                region.pixels.push((x, y));
                region.min_x = region.min_x.min(x);
                region.max_x = region.max_x.max(x);
                region.max_y = region.max_y.max(y);
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let ni = ny * w + nx;
                        if !visited[ni] && *m.get(nx, ny) {
                            visited[ni] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            regions.push(region);
        }
    }
    // stable: equal areas keep raster order of their seeds
    regions.sort_by_key(|r| std::cmp::Reverse(r.area()));
    regions
}

/// Mean probability over the foreground of `m`; 0 for an empty mask.
pub fn confidence_score(p: &ProbabilityMap, m: &BinaryMask) -> Result<f64> {
    p.ensure_same_shape(m)?;
    let mut sum = 0.0;
    let mut count = 0.0;
    for (&pv, &mv) in p.as_slice().iter().zip(m.as_slice()) {
        if mv {
            sum += pv;
            count += 1.0;
        }
    }
    Ok(if count == 0.0 { 0.0 } else { sum / count })
}

fn concentration_of(regions: &[ConnectedRegion]) -> f64 {
    let total: usize = regions.iter().map(ConnectedRegion::area).sum();
    match regions.first() {
        Some(largest) => largest.area() as f64 / total as f64,
        None => 0.0,
    }
}

/// Largest region area over total foreground area; 0 for an empty mask.
pub fn concentration_score(m: &BinaryMask) -> f64 {
    concentration_of(&connected_components(m))
}

pub fn estimate_state(p: &ProbabilityMap, m: &BinaryMask, threshold: f64) -> Result<StateEstimate> {
    let confidence = confidence_score(p, m)?;
    let concentration = concentration_score(m);
    Ok(StateEstimate::from_scores(confidence, concentration, threshold))
}

/// Minimal bounding box of the largest connected region.
pub fn largest_component_box(m: &BinaryMask) -> Result<Box> {
    connected_components(m)
        .first()
        .map(ConnectedRegion::bounding_box)
        .ok_or(Error::EmptyMask("no mask-box available"))
}
