//! Accumulates a confusion matrix over a small batch and reports mean IoU.

use pancut::eval::{ConfusionMatrix, DatasetConfig};
use pancut::tensor_io::LabelMap;

fn main() -> pancut::Result<()> {
    let dataset = DatasetConfig::bundled("voc21")?;
    let mut confusion = ConfusionMatrix::new(dataset.num_classes());
    let pairs = [
        // (prediction, ground truth), 255 marks ignored pixels
        (vec![0, 15, 15, 0], vec![0, 15, 15, 15]),
        (vec![8, 8, 0, 0], vec![8, 8, 8, 255]),
    ];
    for (pred, gt) in pairs {
        confusion.accumulate(&LabelMap::new(2, 2, pred, 255)?, &LabelMap::new(2, 2, gt, 255)?)?;
    }
    let report = confusion.miou()?;
    println!("mIoU over {} scored classes: {:.4}", dataset.num_classes() - report.excluded_classes.len(), report.miou);
    for (class, iou) in report.per_class_iou.iter().enumerate() {
        if let Some(iou) = iou {
            println!("  {:<12} {iou:.4}", dataset.classes[class]);
        }
    }
    println!("{} pixels ignored", confusion.ignored());
    Ok(())
}
