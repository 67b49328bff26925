use std::f64::consts::PI;

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then cosine decay
/// to 0 at `total`. Steps count from 1 for the first update.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    let warmup = warmup.min(total);
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return if total == warmup { base_lr } else { 0.0 };
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}
