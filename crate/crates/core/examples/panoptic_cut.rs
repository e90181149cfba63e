//! Peels objects off a synthetic feature grid one normalized cut at a time.

use pancut::panoptic::{panoptic_cut, CutConfig};
use pancut::tensor_io::FeatureMap;

fn main() -> pancut::Result<()> {
    // a large interior block, a strip along part of the bottom edge and background
    let n = 12;
    let region = |r: usize, c: usize| match (r, c) {
        (1..=9, 1..=8) => 1,
        (11, 3..=8) => 2,
        _ => 0,
    };
    let data: Vec<f32> =
        (0..n * n).flat_map(|i| (0..3).map(move |k| if k == region(i / n, i % n) { 1.0 } else { 0.0 })).collect();
    let features = FeatureMap::new(n, n, 3, data, 8, "demo")?;
    let result = panoptic_cut(&features, &CutConfig::default())?;
    println!("{} objects after {} cuts, halted: {:?}", result.objects.len(), result.iterations, result.halt);
    for obj in &result.objects {
        println!("\nobject {} ({} patches)", obj.id, obj.patch_mask.count());
        for r in 0..n {
            let row: String = (0..n).map(|c| if obj.patch_mask.get(r, c) { '#' } else { '.' }).collect();
            println!("  {row}");
        }
    }
    println!("\nfiedler values: {:.4?}", result.eigenvalues);
    Ok(())
}
