//! One image from exported tensors to a label map.
//!
//! Discovery runs once on the full-frame discovery features. Grounding logits
//! are computed per sliding window on the resized frame, averaged where
//! windows overlap, resized to the input image and only then pooled per
//! object.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{merge_background, Assignment, ClassMapping, MergeRule, ObjectLogits, Uncovered};
use crate::panoptic::{panoptic_cut, CutConfig, HaltReason, ObjectMask};
use crate::refine::{crf_refine, fill_holes, mask_probabilities, resolve_overlaps, upsample_mask_to, BoolGrid, CrfConfig};
use crate::tensor_io::{FeatureMap, LabelMap, RgbImage, TextEmbeddingSet};

/// Target length of the shorter image side before windowing.
pub const SHORT_SIDE: usize = 336;
pub const WINDOW: usize = 224;
pub const STRIDE: usize = 112;

/// Frame size after scaling the shorter side to [`SHORT_SIDE`], long side rounded.
pub fn resized_dims(height: usize, width: usize) -> (usize, usize) {
    let short = height.min(width);
    if short == 0 {
        return (height, width);
    }
    let scale = |d: usize| ((d * SHORT_SIDE) as f64 / short as f64).round() as usize;
    (scale(height), scale(width))
}

/// Sliding-window layout over a frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub image_h: usize,
    pub image_w: usize,
    /// `min(WINDOW, image_h)`.
    pub window_h: usize,
    pub window_w: usize,
    pub stride: usize,
    pub row_origins: Vec<usize>,
    pub col_origins: Vec<usize>,
}

fn axis_origins(dim: usize) -> Vec<usize> {
    if dim <= WINDOW {
        return vec![0];
    }
    let count = (dim - WINDOW).div_ceil(STRIDE) + 1;
    (0..count).map(|i| (i * STRIDE).min(dim - WINDOW)).collect()
}

/// Origins step by [`STRIDE`]; the last one per axis sits flush with the
/// border. An axis shorter than [`WINDOW`] gets one window spanning it.
pub fn plan_windows(height: usize, width: usize) -> WindowPlan {
    WindowPlan {
        image_h: height,
        image_w: width,
        window_h: height.min(WINDOW),
        window_w: width.min(WINDOW),
        stride: STRIDE,
        row_origins: axis_origins(height),
        col_origins: axis_origins(width),
    }
}

impl WindowPlan {
    /// `(top, left)` of every window, row-major.
    pub fn crops(&self) -> Vec<(usize, usize)> {
        self.row_origins.iter().flat_map(|&t| self.col_origins.iter().map(move |&l| (t, l))).collect()
    }

    pub fn len(&self) -> usize {
        self.row_origins.len() * self.col_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of windows containing pixel `(y, x)`.
    pub fn coverage(&self, y: usize, x: usize) -> u32 {
        let rows = self.row_origins.iter().filter(|&&o| o <= y && y < o + self.window_h).count();
        let cols = self.col_origins.iter().filter(|&&o| o <= x && x < o + self.window_w).count();
        (rows * cols) as u32
    }

    /// Per-pixel coverage over the whole frame, row-major.
    pub fn coverage_count(&self) -> Vec<u32> {
        let axis = |origins: &[usize], window: usize, dim: usize| {
            let mut c = vec![0u32; dim];
            for &o in origins {
                c[o..(o + window).min(dim)].iter_mut().for_each(|v| *v += 1);
            }
            c
        };
        let rows = axis(&self.row_origins, self.window_h, self.image_h);
        let cols = axis(&self.col_origins, self.window_w, self.image_w);
        rows.iter().flat_map(|&r| cols.iter().map(move |&c| r * c)).collect()
    }
}

/// Dense `height x width x channels` field of per-pixel class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "logit map has {} values, expected {height}*{width}*{channels}",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear resize with pixel-centre alignment and edge clamping.
    pub fn resized(&self, height: usize, width: usize) -> LogitMap {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let taps = |dst: usize, from: usize, to: usize| {
            let src = ((dst as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
            let lo = src.floor() as usize;
            (lo, (lo + 1).min(from - 1), src - lo as f64)
        };
        let cols: Vec<_> = (0..width).map(|x| taps(x, self.width, width)).collect();
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            let (r0, r1, fy) = taps(y, self.height, height);
            for &(c0, c1, fx) in &cols {
                let (a, b, c, d) = (self.at(r0, c0), self.at(r0, c1), self.at(r1, c0), self.at(r1, c1));
                for k in 0..self.channels {
                    let top = a[k] * (1.0 - fx) + b[k] * fx;
                    let bottom = c[k] * (1.0 - fx) + d[k] * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        LogitMap { height, width, channels: self.channels, data }
    }

    /// Index of the largest logit per pixel; the first wins ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().enumerate().fold(0, |best, (k, &v)| if v > px[best] { k } else { best }))
            .collect()
    }
}

/// Per-patch cosine logits of a crop, resized to `out_h x out_w` pixels.
pub fn crop_logits(features: &FeatureMap, texts: &TextEmbeddingSet, out_h: usize, out_w: usize) -> Result<LogitMap> {
    if texts.is_empty() {
        return Err(Error::Data("no text queries".into()));
    }
    if texts.dim() != features.channels() {
        return Err(Error::Shape(format!(
            "text embeddings have {} dims but grounding features have {}",
            texts.dim(),
            features.channels()
        )));
    }
    let unit = texts.normalized();
    let mut data = Vec::with_capacity(features.len() * unit.len());
    for n in 0..features.len() {
        let f = features.node(n);
        let norm = f.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        for q in 0..unit.len() {
            if norm == 0.0 {
                data.push(0.0);
                continue;
            }
            let dot: f64 = f.iter().zip(unit.vector(q)).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            data.push((dot / norm).clamp(-1.0, 1.0));
        }
    }
    Ok(LogitMap::new(features.height(), features.width(), unit.len(), data)?.resized(out_h, out_w))
}

/// Scatters window logits onto the frame and divides by coverage.
pub fn aggregate_logits(crops: &[LogitMap], plan: &WindowPlan) -> Result<LogitMap> {
    if crops.len() != plan.len() {
        return Err(Error::Shape(format!("{} crop logit maps for a plan of {} windows", crops.len(), plan.len())));
    }
    let channels = crops.first().map_or(0, |c| c.channels);
    for (i, c) in crops.iter().enumerate() {
        if (c.height, c.width, c.channels) != (plan.window_h, plan.window_w, channels) {
            return Err(Error::Shape(format!(
                "crop {i} logits are {}x{}x{}, expected {}x{}x{channels}",
                c.height, c.width, c.channels, plan.window_h, plan.window_w
            )));
        }
    }
    let mut sum = LogitMap::filled(plan.image_h, plan.image_w, channels, 0.0);
    for (crop, (top, left)) in crops.iter().zip(plan.crops()) {
        for y in 0..plan.window_h {
            let row = &crop.data[y * plan.window_w * channels..(y + 1) * plan.window_w * channels];
            let start = ((top + y) * plan.image_w + left) * channels;
            sum.data[start..start + row.len()].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
    }
    for (px, &c) in sum.data.chunks_exact_mut(channels.max(1)).zip(&plan.coverage_count()) {
        px.iter_mut().for_each(|v| *v /= f64::from(c));
    }
    Ok(sum)
}

/// Where grounding features come from.
#[derive(Debug, Clone)]
pub enum GroundingInput {
    /// One tensor over the whole resized frame.
    FullFrame(FeatureMap),
    /// One tensor per window, in [`WindowPlan::crops`] order.
    PerCrop(Vec<FeatureMap>),
}

/// Class logit field over the resized frame described by `plan`.
pub fn grounding_field(input: &GroundingInput, texts: &TextEmbeddingSet, plan: &WindowPlan) -> Result<LogitMap> {
    match input {
        // windows sliced from one field average back to that field
        GroundingInput::FullFrame(f) => crop_logits(f, texts, plan.image_h, plan.image_w),
        GroundingInput::PerCrop(crops) => {
            if crops.len() != plan.len() {
                return Err(Error::Shape(format!(
                    "{} per-crop feature maps for a plan of {} windows",
                    crops.len(),
                    plan.len()
                )));
            }
            let maps = crops
                .par_iter()
                .map(|f| crop_logits(f, texts, plan.window_h, plan.window_w))
                .collect::<Result<Vec<_>>>()?;
            aggregate_logits(&maps, plan)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub cut: CutConfig,
    pub use_crf: bool,
    pub crf: CrfConfig,
    pub merge: MergeRule,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { cut: CutConfig::default(), use_crf: true, crf: CrfConfig::default(), merge: MergeRule::default() }
    }
}

/// Output resolution plus the RGB image when refinement needs it.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    pub height: usize,
    pub width: usize,
    pub rgb: Option<&'a RgbImage>,
}

impl<'a> Frame<'a> {
    pub fn from_image(image: &'a RgbImage) -> Self {
        Self { height: image.height() as usize, width: image.width() as usize, rgb: Some(image) }
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self { height, width, rgb: None }
    }
}

/// Objects found in one image, as disjoint pixel masks at frame resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub objects: Vec<ObjectMask>,
    pub iterations: usize,
    pub halt: HaltReason,
    pub eigenvalues: Vec<f64>,
}

/// Panoptic cut, hole filling, upsampling, optional CRF, overlap resolution.
pub fn discover(features: &FeatureMap, frame: Frame<'_>, cfg: &PipelineConfig) -> Result<Discovery> {
    if frame.height == 0 || frame.width == 0 {
        return Err(Error::Shape("output frame must be non-empty".into()));
    }
    if let Some(img) = frame.rgb {
        if (img.height() as usize, img.width() as usize) != (frame.height, frame.width) {
            return Err(Error::Shape(format!(
                "image is {}x{} but the frame is {}x{}",
                img.height(),
                img.width(),
                frame.height,
                frame.width
            )));
        }
    }
    let cut = panoptic_cut(features, &cfg.cut)?;
    let mut objects = Vec::with_capacity(cut.objects.len());
    for mut obj in cut.objects {
        obj.patch_mask = fill_holes(&obj.patch_mask);
        obj.pixel_mask = upsample_mask_to(&obj.patch_mask, frame.height, frame.width)?;
        objects.push(obj);
    }
    let mut objects = resolve_overlaps(objects)?;
    if cfg.use_crf && !objects.is_empty() {
        let Some(image) = frame.rgb else {
            return Err(Error::Config("CRF refinement needs the RGB image".into()));
        };
        let masks: Vec<&BoolGrid> = objects.iter().map(|o| &o.pixel_mask).collect();
        let probs = mask_probabilities(&masks, frame.height, frame.width, cfg.crf.smoothing)?;
        let refined = crf_refine(&probs, image, &cfg.crf)?;
        for (k, obj) in objects.iter_mut().enumerate() {
            let cells: Vec<usize> = (0..refined.labels.len()).filter(|&p| refined.labels[p] == k + 1).collect();
            obj.pixel_mask = BoolGrid::from_indices(frame.height, frame.width, &cells);
        }
        objects = resolve_overlaps(objects)?;
    }
    Ok(Discovery { objects, iterations: cut.iterations, halt: cut.halt, eigenvalues: cut.eigenvalues })
}

/// Mean of the logit field over a pixel mask.
pub fn pool_logits(field: &LogitMap, mask: &BoolGrid) -> Result<Vec<f64>> {
    if mask.shape() != (field.height, field.width) {
        return Err(Error::Shape(format!(
            "mask is {:?} but the logit field is {}x{}",
            mask.shape(),
            field.height,
            field.width
        )));
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::EmptyMask("mask covers no pixels".into()));
    }
    let mut sum = vec![0.0; field.channels];
    for p in &idx {
        let px = &field.data[p * field.channels..(p + 1) * field.channels];
        sum.iter_mut().zip(px).for_each(|(s, v)| *s += v);
    }
    Ok(sum.into_iter().map(|s| s / idx.len() as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: u32,
    pub discovery_order: usize,
    /// Dataset class painted; `None` when the object fell through to the fallback.
    pub class: Option<u32>,
    pub label: String,
    /// Score of the winning query or of merged background.
    pub logit: f64,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub image: String,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<ObjectRecord>,
    /// Share of pixels labelled by the per-pixel argmax fallback.
    pub fallback_fraction: f64,
    pub iterations: usize,
    pub halt: HaltReason,
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub labels: LabelMap,
    pub logits: Vec<ObjectLogits>,
    pub summary: SegmentationSummary,
}

/// Labels discovered objects from a frame-resolution logit field and renders
/// the label map. Uncovered pixels take the background class, or the
/// per-pixel argmax class when the dataset has no background.
pub fn ground_and_render(
    name: &str,
    discovery: &Discovery,
    field: &LogitMap,
    texts: &TextEmbeddingSet,
    mapping: &ClassMapping,
    merge: MergeRule,
) -> Result<SegmentationResult> {
    if field.channels != texts.len() {
        return Err(Error::Shape(format!("logit field has {} channels for {} queries", field.channels, texts.len())));
    }
    if mapping.query_classes.len() != texts.len() {
        return Err(Error::Shape(format!(
            "class mapping covers {} queries, text set has {}",
            mapping.query_classes.len(),
            texts.len()
        )));
    }
    let (h, w) = (field.height, field.width);
    let mut logits = Vec::with_capacity(discovery.objects.len());
    let mut painted = Vec::new();
    let mut classes = Vec::new();
    let mut records = Vec::new();
    for obj in &discovery.objects {
        let pooled = pool_logits(field, &obj.pixel_mask)?;
        let scored = merge_background(obj.id, pooled, texts, merge);
        let class = mapping.class_of(scored.assigned);
        let label = match scored.assigned {
            Assignment::Query(q) => texts.labels()[q].clone(),
            Assignment::Background => "background".to_string(),
        };
        records.push(ObjectRecord {
            id: obj.id,
            discovery_order: obj.discovery_order,
            class,
            label,
            logit: scored.score(),
            area: obj.pixel_mask.count(),
        });
        if let Some(c) = class {
            painted.push(obj.clone());
            classes.push(c);
        }
        logits.push(scored);
    }
    let uncovered = match mapping.background_class {
        Some(bg) => Uncovered::Constant(bg),
        None => Uncovered::PerPixel(field.argmax().into_iter().map(|q| mapping.query_classes[q]).collect()),
    };
    let (labels, fallback_fraction) =
        crate::grounding::render_segmentation(&painted, &classes, &uncovered, h, w, mapping.ignore_value)?;
    let summary = SegmentationSummary {
        image: name.to_string(),
        height: h,
        width: w,
        objects: records,
        fallback_fraction,
        iterations: discovery.iterations,
        halt: discovery.halt,
        eigenvalues: discovery.eigenvalues.clone(),
    };
    Ok(SegmentationResult { labels, logits, summary })
}

/// Full pipeline for one image. Errors carry the image name.
pub fn segment_image(
    name: &str,
    discovery_features: &FeatureMap,
    grounding: &GroundingInput,
    frame: Frame<'_>,
    texts: &TextEmbeddingSet,
    mapping: &ClassMapping,
    cfg: &PipelineConfig,
) -> Result<SegmentationResult> {
    let run = || {
        let discovery = discover(discovery_features, frame, cfg)?;
        let (rh, rw) = resized_dims(frame.height, frame.width);
        let field = grounding_field(grounding, texts, &plan_windows(rh, rw))?.resized(frame.height, frame.width);
        ground_and_render(name, &discovery, &field, texts, mapping, cfg.merge)
    };
    run().map_err(|e| e.for_image(name))
}
