//! Late text grounding of discovered objects.
//!
//! An object's prototype is the plain mean of the grounding features under
//! its mask; its logits are cosine similarities to every text query. Queries
//! marked as background collapse into one score before the final argmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::ObjectMask;
use crate::refine::BoolGrid;
use crate::tensor_io::{FeatureMap, LabelMap, TextEmbeddingSet};

/// How the background queries collapse into one score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Index into the text queries.
    Query(usize),
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLogits {
    pub object_id: u32,
    /// Cosine similarity per text query, in `[-1, 1]`.
    pub logits: Vec<f64>,
    /// Merged background score, when the query set has background entries.
    pub background_score: Option<f64>,
    pub assigned: Assignment,
    /// Prototype had zero norm; every logit is 0.
    pub zero_prototype: bool,
    /// Mask vanished on the grounding grid; the object is background.
    pub empty_mask: bool,
}

impl ObjectLogits {
    /// Score of the assigned outcome.
    pub fn score(&self) -> f64 {
        match self.assigned {
            Assignment::Query(q) => self.logits[q],
            Assignment::Background => self.background_score.unwrap_or(0.0),
        }
    }
}

/// Patches covered by at least half of their pixels. A patch row `r` spans
/// pixel rows `[r*H/rows, (r+1)*H/rows)`. When no patch qualifies, the single
/// best-covered patch is kept; an empty mask projects to nothing.
pub fn project_mask(mask: &BoolGrid, rows: usize, cols: usize) -> BoolGrid {
    let (h, w) = mask.shape();
    if (h, w) == (rows, cols) {
        return mask.clone();
    }
    let span = |i: usize, cells: usize, len: usize| {
        let lo = i * len / cells;
        let hi = ((i + 1) * len / cells).max(lo + 1).min(len);
        lo..hi
    };
    let mut coverage = vec![(0usize, 1usize); rows * cols];
    for r in 0..rows {
        let ys = span(r, rows, h);
        for c in 0..cols {
            let xs = span(c, cols, w);
            let hits = ys.clone().map(|y| xs.clone().filter(|&x| mask.get(y, x)).count()).sum();
            coverage[r * cols + c] = (hits, ys.len() * xs.len());
        }
    }
    let mut out = BoolGrid::from_fn(rows, cols, |r, c| {
        let (hits, area) = coverage[r * cols + c];
        hits > 0 && 2 * hits >= area
    });
    if out.is_empty() {
        // best coverage fraction, lowest index on ties
        let mut best: Option<usize> = None;
        for (i, &(hits, area)) in coverage.iter().enumerate() {
            if hits == 0 {
                continue;
            }
            let better = best.is_none_or(|b| {
                let (bh, ba) = coverage[b];
                hits * ba > bh * area
            });
            if better {
                best = Some(i);
            }
        }
        if let Some(b) = best {
            out.as_mut_slice()[b] = true;
        }
    }
    out
}

/// Mean grounding feature under `mask`, which may be at pixel or patch
/// resolution.
pub fn object_prototype(features: &FeatureMap, mask: &BoolGrid) -> Result<Vec<f64>> {
    let patches = project_mask(mask, features.height(), features.width()).indices();
    if patches.is_empty() {
        return Err(Error::EmptyMask(format!("mask of {} pixels covers no grounding patch", mask.count())));
    }
    let mut sum = vec![0.0f64; features.channels()];
    for &p in &patches {
        sum.iter_mut().zip(features.node(p)).for_each(|(s, &f)| *s += f64::from(f));
    }
    let n = patches.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of `prototype` to every query; all zeros for a zero
/// prototype.
pub fn cosine_logits(prototype: &[f64], texts: &TextEmbeddingSet) -> Vec<f64> {
    let pn = norm(prototype.iter().copied());
    (0..texts.len())
        .map(|q| {
            if pn == 0.0 {
                return 0.0;
            }
            let t = texts.vector(q);
            let dot: f64 = prototype.iter().zip(t).map(|(p, &t)| p * f64::from(t)).sum();
            (dot / (pn * norm(t.iter().map(|&x| f64::from(x))))).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Assigns a query or background from raw logits. The first best
/// non-background query is the object candidate; background takes over when
/// its merged score is at least as high.
pub fn merge_background(object_id: u32, logits: Vec<f64>, texts: &TextEmbeddingSet, rule: MergeRule) -> ObjectLogits {
    let bg = texts.background_indices();
    let background_score = (!bg.is_empty()).then(|| match rule {
        MergeRule::Max => bg.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max),
        MergeRule::Mean => bg.iter().map(|&i| logits[i]).sum::<f64>() / bg.len() as f64,
    });
    let mut best: Option<usize> = None;
    for (q, &v) in logits.iter().enumerate() {
        if texts.is_background(q) {
            continue;
        }
        if best.is_none_or(|b| v > logits[b]) {
            best = Some(q);
        }
    }
    let assigned = match (best, background_score) {
        (None, _) => Assignment::Background,
        (Some(q), Some(b)) if b >= logits[q] => Assignment::Background,
        (Some(q), _) => Assignment::Query(q),
    };
    ObjectLogits { object_id, logits, background_score, assigned, zero_prototype: false, empty_mask: false }
}

/// Grounds every object against the text queries. Masks are only read.
pub fn ground_objects(
    masks: &[ObjectMask],
    features: &FeatureMap,
    texts: &TextEmbeddingSet,
    rule: MergeRule,
) -> Result<Vec<ObjectLogits>> {
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
    masks
        .iter()
        .map(|m| match object_prototype(features, &m.pixel_mask) {
            Ok(proto) => {
                let zero = proto.iter().all(|&v| v == 0.0);
                if zero {
                    log::warn!("object {} has a zero prototype", m.id);
                }
                let mut out = merge_background(m.id, cosine_logits(&proto, texts), texts, rule);
                out.zero_prototype = zero;
                Ok(out)
            }
            Err(Error::EmptyMask(msg)) => {
                log::warn!("object {}: {msg}; labelled background", m.id);
                Ok(ObjectLogits {
                    object_id: m.id,
                    logits: vec![0.0; texts.len()],
                    background_score: None,
                    assigned: Assignment::Background,
                    zero_prototype: false,
                    empty_mask: true,
                })
            }
            Err(e) => Err(e),
        })
        .collect()
}

/// Maps query indices to dataset class ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub query_classes: Vec<u32>,
    /// Class id for background; `None` for datasets without one.
    pub background_class: Option<u32>,
    pub ignore_value: u32,
}

impl ClassMapping {
    pub fn class_of(&self, assigned: Assignment) -> Option<u32> {
        match assigned {
            Assignment::Query(q) => self.query_classes.get(q).copied(),
            Assignment::Background => self.background_class,
        }
    }
}

/// What uncovered pixels become.
#[derive(Debug, Clone, PartialEq)]
pub enum Uncovered {
    Constant(u32),
    /// Row-major label per pixel.
    PerPixel(Vec<u32>),
}

/// Paints each mask with its class; returns the map and the fraction of
/// pixels filled from a per-pixel fallback.
pub fn render_segmentation(
    masks: &[ObjectMask],
    classes: &[u32],
    uncovered: &Uncovered,
    height: usize,
    width: usize,
    ignore_value: u32,
) -> Result<(LabelMap, f64)> {
    if masks.len() != classes.len() {
        return Err(Error::Shape(format!("{} masks but {} classes", masks.len(), classes.len())));
    }
    if let Some(m) = masks.iter().find(|m| m.pixel_mask.shape() != (height, width)) {
        return Err(Error::Shape(format!("object {} mask is {:?}, expected {height}x{width}", m.id, m.pixel_mask.shape())));
    }
    let mut labels: Vec<Option<u32>> = vec![None; height * width];
    for (m, &class) in masks.iter().zip(classes) {
        for (p, &on) in m.pixel_mask.as_slice().iter().enumerate() {
            if on {
                if labels[p].is_some() {
                    return Err(Error::Data(format!("object {} overlaps an earlier mask", m.id)));
                }
                labels[p] = Some(class);
            }
        }
    }
    let mut fallback = 0usize;
    let out = match uncovered {
        Uncovered::Constant(c) => labels.into_iter().map(|l| l.unwrap_or(*c)).collect(),
        Uncovered::PerPixel(per) => {
            if per.len() != height * width {
                return Err(Error::Shape(format!("fallback has {} pixels, expected {}", per.len(), height * width)));
            }
            labels
                .into_iter()
                .zip(per)
                .map(|(l, &f)| {
                    l.unwrap_or_else(|| {
                        fallback += 1;
                        f
                    })
                })
                .collect()
        }
    };
    let fraction = fallback as f64 / (height * width).max(1) as f64;
    Ok((LabelMap::new(height, width, out, ignore_value)?, fraction))
}
