use std::f64::consts::PI;

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn cosine_lr(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}
