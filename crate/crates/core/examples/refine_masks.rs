//! Fills holes in a coarse mask, upsamples it to pixels and sharpens it
//! against the image with the dense CRF.

use pancut::refine::{crf_refine, fill_holes, mask_probabilities, upsample_mask, BoolGrid, CrfConfig};
use pancut::tensor_io::RgbImage;

fn main() -> pancut::Result<()> {
    // a ring on a 6x6 patch grid: the hole is filled first
    let ring = BoolGrid::from_fn(6, 6, |r, c| (1..=4).contains(&r) && (1..=4).contains(&c) && !(r == 2 && c == 3));
    let filled = fill_holes(&ring);
    println!("ring {} patches, filled {}", ring.count(), filled.count());

    let (h, w) = (48, 48);
    let coarse = upsample_mask(&filled, 8, h, w)?;
    // the object in the image is a little smaller than the patch mask claims
    let image = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        if (10..38).contains(&x) && (10..38).contains(&y) { image::Rgb([220, 60, 40]) } else { image::Rgb([30, 30, 90]) }
    });
    let cfg = CrfConfig::default();
    let probs = mask_probabilities(&[&coarse], h, w, cfg.smoothing)?;
    let refined = crf_refine(&probs, &image, &cfg)?;
    let area = refined.labels.iter().filter(|&&l| l == 1).count();
    println!("coarse area {} px, refined area {area} px (true object 784 px)", coarse.count());
    Ok(())
}
