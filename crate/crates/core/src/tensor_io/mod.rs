//! File boundary of the engine: feature tensors, text embeddings, label maps
//! and RGB images.
//!
//! Backbones are never run in-process. Discovery and grounding features are
//! exported upstream as little-endian float NPY tensors, preferably rank 3
//! `(H, W, C)`; label maps travel as single-channel 16-bit PNG.

mod image_io;
mod labels;
mod npy;

pub use image_io::{blend_overlay, load_image, palette_color, save_overlay, RgbImage, DEFAULT_PALETTE_SEED};
pub use labels::{load_label_map, save_label_map, LabelMap, DEFAULT_IGNORE_VALUE};
pub use npy::{
    load_feature_map, load_feature_map_with_grid, load_matrix, save_feature_map, save_matrix, Matrix,
};

use crate::error::{Error, Result};

/// Patch size of the discovery backbone (ViT-B/8).
pub const DISCOVERY_PATCH_SIZE: usize = 8;
/// Patch size of the grounding backbone (ViT-B/16).
pub const GROUNDING_PATCH_SIZE: usize = 16;

/// Dense `height x width x channels` grid of per-patch embeddings, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    patch_size: usize,
    source_tag: String,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
        patch_size: usize,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if patch_size == 0 {
            return Err(Error::Config("patch_size must be at least 1".into()));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "feature data has {} values, expected {height}*{width}*{channels} = {expected}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature value at flat index {pos}")));
        }
        Ok(Self { height, width, channels, data, patch_size, source_tag: source_tag.into() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Number of patch nodes, `height * width`.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature vector of the patch at `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        self.node(row * self.width + col)
    }

    /// Feature vector of a node in row-major order.
    pub fn node(&self, index: usize) -> &[f32] {
        let start = index * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Crop a `rows x cols` block of patches starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<FeatureMap> {
        if rows == 0 || cols == 0 || top + rows > self.height || left + cols > self.width {
            return Err(Error::Shape(format!(
                "crop {rows}x{cols} at ({top},{left}) outside {}x{} grid",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(rows * cols * self.channels);
        for r in top..top + rows {
            let start = (r * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + cols * self.channels]);
        }
        FeatureMap::new(rows, cols, self.channels, data, self.patch_size, self.source_tag.clone())
    }
}

/// Class-description vectors, one per label, with an optional subset of
/// background queries whose scores get merged into a single background score.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingSet {
    labels: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
    background_indices: Vec<usize>,
}

impl TextEmbeddingSet {
    pub fn new(labels: Vec<String>, vectors: Vec<Vec<f32>>, background_indices: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Shape("text embedding set is empty".into()));
        }
        if labels.len() != vectors.len() {
            return Err(Error::Shape(format!("{} labels but {} vectors", labels.len(), vectors.len())));
        }
        let dim = vectors[0].len();
        let mut flat = Vec::with_capacity(dim * vectors.len());
        for (label, v) in labels.iter().zip(&vectors) {
            if v.len() != dim || dim == 0 {
                return Err(Error::Shape(format!(
                    "text vector for `{label}` has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            flat.extend_from_slice(v);
        }
        Self::from_flat(labels, dim, flat, background_indices)
    }

    /// Builds the set from a row-major `labels.len() x dim` matrix.
    pub fn from_flat(labels: Vec<String>, dim: usize, vectors: Vec<f32>, background_indices: Vec<usize>) -> Result<Self> {
        if labels.is_empty() || dim == 0 {
            return Err(Error::Shape("text embedding set is empty".into()));
        }
        if vectors.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "text matrix has {} values, expected {} x {dim}",
                vectors.len(),
                labels.len()
            )));
        }
        for (i, row) in vectors.chunks_exact(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite value in text vector `{}`", labels[i])));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Data(format!("text vector `{}` is zero", labels[i])));
            }
        }
        let mut seen = vec![false; labels.len()];
        for &b in &background_indices {
            if b >= labels.len() {
                return Err(Error::Range(format!("background index {b} out of range for {} labels", labels.len())));
            }
            if std::mem::replace(&mut seen[b], true) {
                return Err(Error::Config(format!("background index {b} listed twice")));
            }
        }
        Ok(Self { labels, dim, vectors, background_indices })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, index: usize) -> &[f32] {
        &self.vectors[index * self.dim..(index + 1) * self.dim]
    }

    pub fn background_indices(&self) -> &[usize] {
        &self.background_indices
    }

    pub fn is_background(&self, index: usize) -> bool {
        self.background_indices.contains(&index)
    }

    /// Same set with every vector scaled to unit length.
    pub fn normalized(&self) -> TextEmbeddingSet {
        let mut vectors = self.vectors.clone();
        for row in vectors.chunks_exact_mut(self.dim) {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v = (f64::from(*v) / norm) as f32);
        }
        TextEmbeddingSet { vectors, ..self.clone() }
    }
}
