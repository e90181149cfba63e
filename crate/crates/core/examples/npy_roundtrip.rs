//! Writes a patch-feature tensor to `.npy` and reads it back.

use pancut::tensor_io::{load_feature_map, save_feature_map, FeatureMap};

fn main() -> pancut::Result<()> {
    let (h, w, d) = (4, 5, 3);
    let data: Vec<f32> = (0..h * w * d).map(|i| i as f32 / 10.0).collect();
    let map = FeatureMap::new(h, w, d, data, 8, "demo")?;
    let path = std::env::temp_dir().join("pancut_npy_roundtrip.npy");
    save_feature_map(&map, &path)?;
    let back = load_feature_map(&path, 8, "demo")?;
    println!("{} -> {}x{}x{}, patch {}", path.display(), back.height(), back.width(), back.channels(), back.patch_size());
    println!("feature at (2, 3): {:?}", back.at(2, 3));
    assert_eq!(back.data(), map.data());
    Ok(())
}
