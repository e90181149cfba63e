//! Full segmentation of one synthetic image: discovery, refinement,
//! grounding and rendering to a class map.

use pancut::grounding::ClassMapping;
use pancut::pipeline::{segment_image, Frame, GroundingInput, PipelineConfig};
use pancut::tensor_io::{FeatureMap, RgbImage, TextEmbeddingSet};

fn region(r: usize, c: usize) -> usize {
    match (r, c) {
        (1..=4, 0..=4) => 1,
        (5, 1..=4) => 2,
        _ => 0,
    }
}

fn one_hot(patch: usize) -> pancut::Result<FeatureMap> {
    let data = (0..36).flat_map(|i| (0..3).map(move |k| if k == region(i / 6, i % 6) { 1.0 } else { 0.0 })).collect();
    FeatureMap::new(6, 6, 3, data, patch, "demo")
}

fn main() -> pancut::Result<()> {
    let colors = [[40, 40, 40], [200, 80, 40], [40, 160, 220]];
    let image = RgbImage::from_fn(48, 48, |x, y| image::Rgb(colors[region(y as usize / 8, x as usize / 8)]));
    let texts = TextEmbeddingSet::new(
        vec!["cat".into(), "dog".into(), "ground".into()],
        vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]],
        vec![2],
    )?;
    let mapping = ClassMapping { query_classes: vec![1, 2, 0], background_class: Some(0), ignore_value: 255 };
    let mut cfg = PipelineConfig::default();
    cfg.cut.min_nodes = 2;
    let out = segment_image(
        "demo",
        &one_hot(8)?,
        &GroundingInput::FullFrame(one_hot(16)?),
        Frame::from_image(&image),
        &texts,
        &mapping,
        &cfg,
    )?;
    for obj in &out.summary.objects {
        println!("object {} -> {} (logit {:.3}, {} px)", obj.id, obj.label, obj.logit, obj.area);
    }
    for y in (0..48).step_by(4) {
        let row: String = (0..48).step_by(2).map(|x| char::from(b'0' + out.labels.get(y, x) as u8)).collect();
        println!("  {row}");
    }
    Ok(())
}
