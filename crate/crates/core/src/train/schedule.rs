use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at
/// `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, peak: f64) -> Result<f64> {
    if total <= warmup {
        return Err(Error::Config(format!(
            "schedule needs total steps ({total}) above warmup steps ({warmup})"
        )));
    }
    if step > total {
        return Err(Error::Config(format!("step {step} beyond schedule end {total}")));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok((peak * 0.5 * (1.0 + (PI * progress).cos())).max(0.0))
}
