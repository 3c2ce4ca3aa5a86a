/// Number of warmup steps: `round(fraction · total)`, kept within `[1, total − 1]`
/// so the peak is reached before the schedule ends.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    ((warmup_fraction * total_steps as f64).round() as usize).clamp(1, total_steps.saturating_sub(1).max(1))
}

/// Linear warmup from 0 to `peak`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, peak: f64, warmup_fraction: f64, total_steps: usize) -> f64 {
    let w = warmup_steps(total_steps, warmup_fraction);
    if step >= total_steps {
        0.0
    } else if step < w {
        peak * step as f64 / w as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - w) as f64
    }
}
