//! Mean-field inference for a fully connected CRF with Potts compatibility.
//!
//! The update is `Q_i(l) ∝ P_i(l) · exp(Σ_m w_m Σ_{j≠i} k_m(i,j) Q_j(l))`,
//! which is the usual Potts message rewritten so that only same-label mass
//! is propagated. The spatial kernel is filtered exactly with a separable
//! Gaussian. The bilateral kernel is approximated by a row pass followed by a
//! column pass, each weighting color differences against the pixel being
//! updated, on a grid downsampled by up to 4x.

use serde::{Deserialize, Serialize};

use super::BoolGrid;
use crate::error::{Error, Result};
use crate::tensor_io::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfConfig {
    pub iterations: usize,
    pub spatial_sigma: f64,
    pub bilateral_sigma_xy: f64,
    pub bilateral_sigma_rgb: f64,
    pub compat_spatial: f64,
    pub compat_bilateral: f64,
    /// Probability mass moved off the observed label when building unaries from masks.
    pub smoothing: f64,
    /// Largest downsampling factor the bilateral pass may use (1, 2 or 4).
    pub max_downsample: usize,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            spatial_sigma: 3.0,
            bilateral_sigma_xy: 40.0,
            bilateral_sigma_rgb: 13.0,
            compat_spatial: 3.0,
            compat_bilateral: 10.0,
            smoothing: 0.1,
            max_downsample: 4,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [self.spatial_sigma, self.bilateral_sigma_xy, self.bilateral_sigma_rgb];
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("CRF sigmas must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("CRF needs at least one iteration".into()));
        }
        if !(self.compat_spatial.is_finite() && self.compat_bilateral.is_finite()) {
            return Err(Error::Config("CRF compatibility weights must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config("CRF smoothing must lie in [0, 1)".into()));
        }
        if ![1, 2, 4].contains(&self.max_downsample) {
            return Err(Error::Config("CRF max_downsample must be 1, 2 or 4".into()));
        }
        Ok(())
    }

    /// Downsampling factor for the bilateral pass: the largest allowed factor
    /// that keeps the scaled sigma at 5 cells or more and both sides at 32 or more.
    pub fn downsample_factor(&self, height: usize, width: usize) -> usize {
        [4, 2]
            .into_iter()
            .find(|&f| {
                f <= self.max_downsample
                    && self.bilateral_sigma_xy / f as f64 >= 5.0
                    && height / f >= 32
                    && width / f >= 32
            })
            .unwrap_or(1)
    }
}

/// Per-pixel label distributions, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelProbs {
    height: usize,
    width: usize,
    labels: usize,
    data: Vec<f64>,
}

impl LabelProbs {
    pub fn new(height: usize, width: usize, labels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || labels == 0 {
            return Err(Error::Shape(format!("empty probability map {height}x{width}x{labels}")));
        }
        if data.len() != height * width * labels {
            return Err(Error::Shape(format!(
                "probability map has {} entries, expected {height}x{width}x{labels}",
                data.len()
            )));
        }
        for (p, dist) in data.chunks_exact(labels).enumerate() {
            if dist.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Data(format!("pixel {p} has a negative or non-finite probability")));
            }
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!("pixel {p} probabilities sum to {sum}")));
            }
        }
        Ok(Self { height, width, labels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.labels..(index + 1) * self.labels]
    }

    /// Lowest label of maximal probability, per pixel.
    pub fn argmax(&self) -> Vec<usize> {
        self.data.chunks_exact(self.labels).map(argmax).collect()
    }
}

fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (l, &v) in dist.iter().enumerate() {
        if v > dist[best] {
            best = l;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfOutput {
    /// Refined label per pixel.
    pub labels: Vec<usize>,
    pub probs: LabelProbs,
    /// Factor the bilateral pass ran at.
    pub downsample: usize,
}

/// Unary distributions from pixel masks. Label 0 is background (pixels in no
/// mask); label `k` is `masks[k - 1]`. The observed label keeps
/// `1 - smoothing` and the rest is spread evenly over the other labels.
pub fn mask_probabilities(masks: &[&BoolGrid], height: usize, width: usize, smoothing: f64) -> Result<LabelProbs> {
    if let Some(bad) = masks.iter().find(|m| m.shape() != (height, width)) {
        return Err(Error::Shape(format!("mask is {:?}, expected {height}x{width}", bad.shape())));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config("smoothing must lie in [0, 1)".into()));
    }
    let labels = masks.len() + 1;
    let (own, other) = if labels == 1 { (1.0, 0.0) } else { (1.0 - smoothing, smoothing / (labels - 1) as f64) };
    let mut data = vec![other; height * width * labels];
    for p in 0..height * width {
        let label = masks.iter().position(|m| m.as_slice()[p]).map_or(0, |k| k + 1);
        data[p * labels + label] = own;
    }
    LabelProbs::new(height, width, labels, data)
}

fn gaussian_taps(sigma: f64, radius: usize, step: f64) -> Vec<f64> {
    (0..=2 * radius)
        .map(|k| {
            let d = (k as f64 - radius as f64) * step;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Separable Gaussian filter, `k(i,i) = 1`, zero outside the image.
fn spatial_filter(q: &[f64], h: usize, w: usize, labels: usize, sigma: f64) -> Vec<f64> {
    let rx = ((3.0 * sigma).ceil() as usize).min(w.saturating_sub(1));
    let ry = ((3.0 * sigma).ceil() as usize).min(h.saturating_sub(1));
    let tx = gaussian_taps(sigma, rx, 1.0);
    let ty = gaussian_taps(sigma, ry, 1.0);
    let mut tmp = vec![0.0; q.len()];
    for y in 0..h {
        for x in 0..w {
            let out = &mut tmp[(y * w + x) * labels..(y * w + x + 1) * labels];
            for (k, &t) in tx.iter().enumerate() {
                let Some(sx) = (x + k).checked_sub(rx).filter(|&s| s < w) else { continue };
                let src = &q[(y * w + sx) * labels..(y * w + sx + 1) * labels];
                out.iter_mut().zip(src).for_each(|(o, s)| *o += t * s);
            }
        }
    }
    let mut out = vec![0.0; q.len()];
    for y in 0..h {
        for (k, &t) in ty.iter().enumerate() {
            let Some(sy) = (y + k).checked_sub(ry).filter(|&s| s < h) else { continue };
            let dst = &mut out[y * w * labels..(y + 1) * w * labels];
            let src = &tmp[sy * w * labels..(sy + 1) * w * labels];
            dst.iter_mut().zip(src).for_each(|(o, s)| *o += t * s);
        }
    }
    out
}

/// Bilateral pass state on the (possibly downsampled) grid, with per-tap
/// weights computed once.
struct Bilateral {
    factor: usize,
    h: usize,
    w: usize,
    radius_x: usize,
    radius_y: usize,
    /// `row_w[cell * (2rx+1) + k]`, zero for taps outside the grid.
    row_w: Vec<f64>,
    col_w: Vec<f64>,
}

impl Bilateral {
    fn new(image: &RgbImage, cfg: &CrfConfig) -> Self {
        let (width, height) = (image.width() as usize, image.height() as usize);
        let factor = cfg.downsample_factor(height, width);
        let (h, w) = (height.div_ceil(factor), width.div_ceil(factor));
        let mut color = vec![[0.0f64; 3]; h * w];
        let mut count = vec![0usize; h * w];
        for (x, y, px) in image.enumerate_pixels() {
            let cell = (y as usize / factor) * w + x as usize / factor;
            color[cell].iter_mut().zip(px.0).for_each(|(acc, v)| *acc += f64::from(v));
            count[cell] += 1;
        }
        for (c, n) in color.iter_mut().zip(&count) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let sigma = cfg.bilateral_sigma_xy;
        let radius_x = ((3.0 * sigma / factor as f64).ceil() as usize).min(w - 1);
        let radius_y = ((3.0 * sigma / factor as f64).ceil() as usize).min(h - 1);
        let inv_rgb = 1.0 / (2.0 * cfg.bilateral_sigma_rgb * cfg.bilateral_sigma_rgb);
        let range = |a: &[f64; 3], b: &[f64; 3]| {
            let d: f64 = (0..3).map(|c| (a[c] - b[c]).powi(2)).sum();
            (-d * inv_rgb).exp()
        };
        let tx = gaussian_taps(sigma, radius_x, factor as f64);
        let ty = gaussian_taps(sigma, radius_y, factor as f64);
        let (nx, ny) = (2 * radius_x + 1, 2 * radius_y + 1);
        let mut row_w = vec![0.0; h * w * nx];
        let mut col_w = vec![0.0; h * w * ny];
        for y in 0..h {
            for x in 0..w {
                let cell = y * w + x;
                for (k, &t) in tx.iter().enumerate() {
                    if let Some(sx) = (x + k).checked_sub(radius_x).filter(|&s| s < w) {
                        row_w[cell * nx + k] = t * range(&color[cell], &color[y * w + sx]);
                    }
                }
                for (k, &t) in ty.iter().enumerate() {
                    if let Some(sy) = (y + k).checked_sub(radius_y).filter(|&s| s < h) {
                        col_w[cell * ny + k] = t * range(&color[cell], &color[sy * w + x]);
                    }
                }
            }
        }
        Self { factor, h, w, radius_x, radius_y, row_w, col_w }
    }

    /// Approximate `Σ_j k(i,j) Q_j` at full resolution, self term included.
    fn filter(&self, q: &[f64], height: usize, width: usize, labels: usize) -> Vec<f64> {
        let (h, w, f) = (self.h, self.w, self.factor);
        // cell mass: sum of Q over the pixels it covers
        let mut mass = vec![0.0; h * w * labels];
        for y in 0..height {
            for x in 0..width {
                let cell = (y / f) * w + x / f;
                let src = &q[(y * width + x) * labels..(y * width + x + 1) * labels];
                mass[cell * labels..(cell + 1) * labels].iter_mut().zip(src).for_each(|(m, s)| *m += s);
            }
        }
        let (nx, ny) = (2 * self.radius_x + 1, 2 * self.radius_y + 1);
        let mut tmp = vec![0.0; mass.len()];
        for y in 0..h {
            for x in 0..w {
                let cell = y * w + x;
                let out = &mut tmp[cell * labels..(cell + 1) * labels];
                for k in 0..nx {
                    let t = self.row_w[cell * nx + k];
                    if t == 0.0 {
                        continue;
                    }
                    let src_cell = y * w + x + k - self.radius_x;
                    let src = &mass[src_cell * labels..(src_cell + 1) * labels];
                    out.iter_mut().zip(src).for_each(|(o, s)| *o += t * s);
                }
            }
        }
        let mut low = vec![0.0; mass.len()];
        for y in 0..h {
            for x in 0..w {
                let cell = y * w + x;
                let out = &mut low[cell * labels..(cell + 1) * labels];
                for k in 0..ny {
                    let t = self.col_w[cell * ny + k];
                    if t == 0.0 {
                        continue;
                    }
                    let src_cell = (y + k - self.radius_y) * w + x;
                    let src = &tmp[src_cell * labels..(src_cell + 1) * labels];
                    out.iter_mut().zip(src).for_each(|(o, s)| *o += t * s);
                }
            }
        }
        if f == 1 {
            return low;
        }
        let mut out = vec![0.0; q.len()];
        for y in 0..height {
            for x in 0..width {
                let cell = (y / f) * w + x / f;
                out[(y * width + x) * labels..(y * width + x + 1) * labels]
                    .copy_from_slice(&low[cell * labels..(cell + 1) * labels]);
            }
        }
        out
    }
}

/// Normalizes `logits` in place into a distribution.
fn softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    logits.iter_mut().for_each(|v| *v /= sum);
}

/// Runs `cfg.iterations` mean-field updates starting from `probs`, which also
/// serve as the unary term.
pub fn crf_refine(probs: &LabelProbs, image: &RgbImage, cfg: &CrfConfig) -> Result<CrfOutput> {
    cfg.validate()?;
    let (height, width, labels) = (probs.height, probs.width, probs.labels);
    if (image.height() as usize, image.width() as usize) != (height, width) {
        return Err(Error::Shape(format!(
            "image is {}x{} but probabilities are {height}x{width}",
            image.height(),
            image.width()
        )));
    }
    let log_unary: Vec<f64> = probs.data.iter().map(|p| p.max(1e-300).ln()).collect();
    let bilateral = Bilateral::new(image, cfg);
    let mut q = probs.data.clone();
    for _ in 0..cfg.iterations {
        let spatial = spatial_filter(&q, height, width, labels, cfg.spatial_sigma);
        let bil = bilateral.filter(&q, height, width, labels);
        let mut next = log_unary.clone();
        for i in 0..next.len() {
            next[i] += cfg.compat_spatial * (spatial[i] - q[i]) + cfg.compat_bilateral * (bil[i] - q[i]);
        }
        next.chunks_exact_mut(labels).for_each(softmax);
        q = next;
    }
    let probs = LabelProbs { height, width, labels, data: q };
    Ok(CrfOutput { labels: probs.argmax(), probs, downsample: bilateral.factor })
}
