//! Assigns discovered objects to text queries by prototype cosine similarity,
//! with a background query competing under the max rule.

use pancut::grounding::{ground_objects, MergeRule};
use pancut::panoptic::ObjectMask;
use pancut::refine::BoolGrid;
use pancut::tensor_io::{FeatureMap, TextEmbeddingSet};

fn main() -> pancut::Result<()> {
    let (h, w) = (4, 4);
    // left half looks like "cat", the top-right quadrant like "sky"
    let data: Vec<f32> = (0..h * w)
        .flat_map(|i| match (i / w, i % w) {
            (_, 0..=1) => [0.9, 0.1, 0.0],
            (0..=1, _) => [0.0, 0.2, 0.9],
            _ => [0.1, 0.9, 0.1],
        })
        .collect();
    let features = FeatureMap::new(h, w, 3, data, 16, "demo")?;
    let object = |id: u32, f: &dyn Fn(usize, usize) -> bool| {
        let mask = BoolGrid::from_fn(h, w, f);
        ObjectMask { id, discovery_order: id as usize - 1, patch_mask: mask.clone(), pixel_mask: mask }
    };
    let objects = [object(1, &|_, c| c < 2), object(2, &|r, c| r < 2 && c >= 2), object(3, &|r, c| r >= 2 && c >= 2)];
    let texts = TextEmbeddingSet::new(
        vec!["cat".into(), "dog".into(), "sky".into()],
        vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        vec![2],
    )?;
    for out in ground_objects(&objects, &features, &texts, MergeRule::Max)? {
        println!(
            "object {}: logits {:.3?}, background {:.3?} -> {:?}",
            out.object_id, out.logits, out.background_score, out.assigned
        );
    }
    Ok(())
}
