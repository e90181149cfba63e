//! Builds a cosine affinity graph over a feature grid and scores two
//! candidate bipartitions with the normalized-cut objective.

use pancut::affinity::{build_affinity, AffinityConfig};
use pancut::tensor_io::FeatureMap;

fn main() -> pancut::Result<()> {
    // left half points one way, right half the other
    let (h, w) = (3, 4);
    let data: Vec<f32> = (0..h * w).flat_map(|i| if i % w < 2 { [1.0, 0.1] } else { [0.1, 1.0] }).collect();
    let features = FeatureMap::new(h, w, 2, data, 8, "demo")?;
    let graph = build_affinity(&features, None, &AffinityConfig::default())?;
    println!("{} nodes, degrees {:.3?}", graph.len(), graph.degrees());

    let left: Vec<usize> = (0..h * w).filter(|i| i % w < 2).collect();
    let right: Vec<usize> = (0..h * w).filter(|i| i % w >= 2).collect();
    let top: Vec<usize> = (0..w).collect();
    let rest: Vec<usize> = (w..h * w).collect();
    println!("ncut(left | right) = {:.4}", graph.ncut_objective(&left, &right)?);
    println!("ncut(top  | rest)  = {:.4}", graph.ncut_objective(&top, &rest)?);
    Ok(())
}
