use crate::error::{CliError, Result};

/// Target latency as a fraction of the teacher's.
pub const LATENCY_TARGET: f64 = 0.6;
pub const LATENCY_EXPONENT: f64 = -0.06;

/// `(1 − hs_loss) · (lat_s / (0.6 · lat_t))^(−0.06)`.
pub fn nas_reward(hs_loss: f64, lat_s: f64, lat_t: f64) -> Result<f64> {
    if !(lat_s > 0.0 && lat_s.is_finite()) || !(lat_t > 0.0 && lat_t.is_finite()) {
        return Err(CliError::config(format!(
            "latencies must be positive and finite, got lat_s={lat_s}, lat_t={lat_t}"
        )));
    }
    if !(0.0..=1.0).contains(&hs_loss) {
        return Err(CliError::config(format!("hs_loss must lie in [0, 1], got {hs_loss}")));
    }
    Ok((1.0 - hs_loss) * (lat_s / (LATENCY_TARGET * lat_t)).powf(LATENCY_EXPONENT))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_latency() {
        assert!(nas_reward(0.1, 0.0, 1.0).is_err());
        assert!(nas_reward(0.1, 1.0, -2.0).is_err());
        assert!(nas_reward(0.1, f64::NAN, 1.0).is_err());
        assert!(nas_reward(1.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_loss_at_target_latency_is_one() {
        assert!((nas_reward(0.0, 6.0, 10.0).unwrap() - 1.0).abs() < 1e-15);
    }
}
