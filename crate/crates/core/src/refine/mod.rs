//! Mask clean-up between discovery and grounding.

mod crf;

use std::collections::VecDeque;

pub use crf::{crf_refine, mask_probabilities, CrfConfig, CrfOutput, LabelProbs};

use crate::error::{Error, Result};
use crate::panoptic::ObjectMask;

/// Row-major boolean grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoolGrid {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolGrid {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("mask has {} cells, expected {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, data }
    }

    /// Grid with exactly the listed flat indices set.
    pub fn from_indices(rows: usize, cols: usize, indices: &[usize]) -> Self {
        let mut grid = Self::filled(rows, cols, false);
        for &i in indices {
            grid.data[i] = true;
        }
        grid
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.cols + col] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.data.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    pub fn intersects(&self, other: &BoolGrid) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }

    /// Cells set in `self` or `other`, same shape assumed.
    pub fn union(&self, other: &BoolGrid) -> BoolGrid {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn iou(&self, other: &BoolGrid) -> f64 {
        let inter = self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count();
        let union = self.data.iter().zip(&other.data).filter(|(&a, &b)| a || b).count();
        if union == 0 { 1.0 } else { inter as f64 / union as f64 }
    }
}

/// Flips every background component (4-connected) that does not reach the
/// border to foreground.
pub fn fill_holes(mask: &BoolGrid) -> BoolGrid {
    let (rows, cols) = mask.shape();
    let mut outside = vec![false; rows * cols];
    let mut queue = VecDeque::new();
    for r in 0..rows {
        for c in 0..cols {
            let border = r == 0 || c == 0 || r + 1 == rows || c + 1 == cols;
            if border && !mask.get(r, c) {
                outside[r * cols + c] = true;
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        let neighbors = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
        for (nr, nc) in neighbors {
            if nr < rows && nc < cols && !mask.get(nr, nc) && !outside[nr * cols + nc] {
                outside[nr * cols + nc] = true;
                queue.push_back((nr, nc));
            }
        }
    }
    BoolGrid { rows, cols, data: outside.into_iter().map(|o| !o).collect() }
}

/// Bilinear upsampling of a {0,1} grid with pixel-centre alignment, then
/// `> 0.5` thresholding. Pixel `y` samples grid row `(y + 0.5) / patch_size - 0.5`,
/// clamped to the grid.
pub fn upsample_mask(mask: &BoolGrid, patch_size: usize, target_h: usize, target_w: usize) -> Result<BoolGrid> {
    if patch_size == 0 {
        return Err(Error::Config("patch_size must be at least 1".into()));
    }
    let step = 1.0 / patch_size as f64;
    resample(mask, step, step, target_h, target_w)
}

/// Same rule as [`upsample_mask`] with the scale taken from the size ratio,
/// for targets that are not a whole number of patches.
pub fn upsample_mask_to(mask: &BoolGrid, target_h: usize, target_w: usize) -> Result<BoolGrid> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Shape("upsampling target must be non-empty".into()));
    }
    resample(mask, mask.rows as f64 / target_h as f64, mask.cols as f64 / target_w as f64, target_h, target_w)
}

fn resample(mask: &BoolGrid, step_y: f64, step_x: f64, target_h: usize, target_w: usize) -> Result<BoolGrid> {
    if mask.rows == 0 || mask.cols == 0 {
        return Err(Error::Shape("cannot upsample an empty mask".into()));
    }
    let taps = |dst: usize, len: usize, step: f64| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * step - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    let col_taps: Vec<_> = (0..target_w).map(|x| taps(x, mask.cols, step_x)).collect();
    let value = |r: usize, c: usize| if mask.get(r, c) { 1.0 } else { 0.0 };
    let mut data = Vec::with_capacity(target_h * target_w);
    for y in 0..target_h {
        let (r0, r1, fy) = taps(y, mask.rows, step_y);
        for &(c0, c1, fx) in &col_taps {
            let top = value(r0, c0) * (1.0 - fx) + value(r0, c1) * fx;
            let bottom = value(r1, c0) * (1.0 - fx) + value(r1, c1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy > 0.5);
        }
    }
    Ok(BoolGrid { rows: target_h, cols: target_w, data })
}

/// Makes pixel masks pairwise disjoint: a contested pixel stays with the
/// object discovered first. Objects left empty are dropped.
pub fn resolve_overlaps(mut masks: Vec<ObjectMask>) -> Result<Vec<ObjectMask>> {
    let Some(first) = masks.first() else { return Ok(masks) };
    let shape = first.pixel_mask.shape();
    if let Some(bad) = masks.iter().find(|m| m.pixel_mask.shape() != shape) {
        return Err(Error::Shape(format!(
            "object {} has pixel mask {:?}, expected {shape:?}",
            bad.id,
            bad.pixel_mask.shape()
        )));
    }
    masks.sort_by_key(|m| m.discovery_order);
    let mut taken = vec![false; shape.0 * shape.1];
    for m in masks.iter_mut() {
        for (t, px) in taken.iter_mut().zip(m.pixel_mask.as_mut_slice()) {
            if *px {
                if *t {
                    *px = false;
                } else {
                    *t = true;
                }
            }
        }
    }
    masks.retain(|m| !m.pixel_mask.is_empty());
    Ok(masks)
}
