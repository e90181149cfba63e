//! Dataset class lists and mean-IoU scoring.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::ClassMapping;
use crate::tensor_io::{LabelMap, TextEmbeddingSet};

/// On-disk dataset description. A dataset has a background class exactly when
/// it lists background queries; that class is then `classes[0]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub classes: Vec<String>,
    #[serde(default)]
    pub background_queries: Vec<String>,
    #[serde(default = "default_ignore")]
    pub ignore_value: u32,
}

fn default_ignore() -> u32 {
    crate::tensor_io::DEFAULT_IGNORE_VALUE
}

const BUNDLED: [(&str, &str); 7] = [
    ("voc21", include_str!("../data/datasets/voc21.json")),
    ("context60", include_str!("../data/datasets/context60.json")),
    ("coco_object", include_str!("../data/datasets/coco_object.json")),
    ("voc20", include_str!("../data/datasets/voc20.json")),
    ("context59", include_str!("../data/datasets/context59.json")),
    ("ade20k", include_str!("../data/datasets/ade20k.json")),
    ("coco_stuff", include_str!("../data/datasets/coco_stuff.json")),
];

impl DatasetConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("dataset config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a JSON file, or a bundled config when `source` names one.
    pub fn load(source: impl AsRef<Path>) -> Result<Self> {
        let path = source.as_ref();
        if let Some(cfg) = path.to_str().and_then(|s| Self::bundled(s).ok()) {
            if !path.exists() {
                return Ok(cfg);
            }
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn bundled(key: &str) -> Result<Self> {
        let key = key.to_ascii_lowercase().replace('-', "_");
        BUNDLED
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, text)| Self::from_json(text))
            .unwrap_or_else(|| Err(Error::Config(format!("no bundled dataset `{key}`"))))
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(k, _)| *k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config(format!("dataset `{}` lists no classes", self.name)));
        }
        if self.has_background() && self.classes.len() < 2 {
            return Err(Error::Config(format!("dataset `{}` has only a background class", self.name)));
        }
        if (self.ignore_value as usize) < self.classes.len() {
            return Err(Error::Config(format!(
                "dataset `{}`: ignore value {} collides with a class id",
                self.name, self.ignore_value
            )));
        }
        Ok(())
    }

    pub fn has_background(&self) -> bool {
        !self.background_queries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Text query order: every non-background class, then the background queries.
    pub fn query_labels(&self) -> Vec<String> {
        let skip = usize::from(self.has_background());
        self.classes[skip..].iter().chain(&self.background_queries).cloned().collect()
    }

    pub fn background_query_indices(&self) -> Vec<usize> {
        let n = self.classes.len() - usize::from(self.has_background());
        (n..n + self.background_queries.len()).collect()
    }

    pub fn class_mapping(&self) -> ClassMapping {
        let skip = usize::from(self.has_background());
        let mut query_classes: Vec<u32> = (skip..self.classes.len()).map(|c| c as u32).collect();
        if self.has_background() {
            query_classes.extend(std::iter::repeat_n(0, self.background_queries.len()));
        }
        ClassMapping {
            query_classes,
            background_class: self.has_background().then_some(0),
            ignore_value: self.ignore_value,
        }
    }

    /// Pairs an `[queries, dim]` embedding matrix with this dataset's query order.
    pub fn text_embeddings(&self, dim: usize, flat: Vec<f32>) -> Result<TextEmbeddingSet> {
        let labels = self.query_labels();
        if dim == 0 || flat.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "dataset `{}` expects {} text queries, embedding matrix has {} values of width {dim}",
                self.name,
                labels.len(),
                flat.len()
            )));
        }
        TextEmbeddingSet::from_flat(labels, dim, flat, self.background_query_indices())
    }
}

/// Pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes], ignored: 0 }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.ignored
    }

    /// Adds one prediction/ground-truth pair. Ground-truth pixels equal to its
    /// ignore value are only counted as ignored.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let y = self.classes;
        let mut local = vec![0u64; y * y];
        let mut ignored = 0;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == gt.ignore_value {
                ignored += 1;
                continue;
            }
            if g as usize >= y {
                return Err(Error::Label(format!("ground-truth label {g} outside {y} classes")));
            }
            if p as usize >= y {
                return Err(Error::Label(format!("predicted label {p} outside {y} classes")));
            }
            local[g as usize * y + p as usize] += 1;
        }
        self.counts.iter_mut().zip(local).for_each(|(c, l)| *c += l);
        self.ignored += ignored;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!("cannot merge {} and {} classes", self.classes, other.classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.ignored += other.ignored;
        Ok(())
    }

    pub fn miou(&self) -> Result<MiouReport> {
        let y = self.classes;
        let mut per_class = Vec::with_capacity(y);
        let mut excluded = Vec::new();
        let mut gt_pixels = Vec::with_capacity(y);
        for c in 0..y {
            let tp = self.get(c, c);
            let fn_: u64 = (0..y).map(|p| self.get(c, p)).sum::<u64>() - tp;
            let fp: u64 = (0..y).map(|g| self.get(g, c)).sum::<u64>() - tp;
            gt_pixels.push(tp + fn_);
            let union = tp + fp + fn_;
            if union == 0 {
                excluded.push(c);
                per_class.push(None);
            } else {
                per_class.push(Some(tp as f64 / union as f64));
            }
        }
        let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
        if valid.is_empty() {
            return Err(Error::EmptyEval("no class has any ground-truth or predicted pixel".into()));
        }
        Ok(MiouReport {
            miou: valid.iter().sum::<f64>() / valid.len() as f64,
            per_class_iou: per_class,
            excluded_classes: excluded,
            pixel_counts: PixelCounts { ground_truth: gt_pixels, ignored: self.ignored, total: self.total() },
            class_names: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub ground_truth: Vec<u64>,
    pub ignored: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` for classes with an empty union.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub excluded_classes: Vec<usize>,
    pub pixel_counts: PixelCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}
