//! Plans overlapping windows over a resized frame and averages per-window
//! logits back onto it.

use pancut::pipeline::{aggregate_logits, plan_windows, resized_dims, LogitMap};

fn main() -> pancut::Result<()> {
    let (h, w) = resized_dims(480, 640);
    let plan = plan_windows(h, w);
    println!("480x640 resizes to {h}x{w}; {} windows of {}x{}", plan.len(), plan.window_h, plan.window_w);
    println!("row origins {:?}, column origins {:?}", plan.row_origins, plan.col_origins);
    let counts = plan.coverage_count();
    println!("coverage ranges over {}..={}", counts.iter().min().unwrap(), counts.iter().max().unwrap());

    // window k reports the constant logit k; overlaps average
    let crops: Vec<LogitMap> =
        (0..plan.len()).map(|k| LogitMap::filled(plan.window_h, plan.window_w, 1, k as f64)).collect();
    let field = aggregate_logits(&crops, &plan)?;
    for x in [0, 120, 200, 300, 440] {
        println!("logit at (0, {x}) = {:.3}", field.at(0, x)[0]);
    }
    Ok(())
}
