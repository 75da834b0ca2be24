use super::NnError;

pub const DEFAULT_PEAK_LR: f64 = 3e-5;
pub const DEFAULT_FLOOR_LR: f64 = 1e-5;
pub const DEFAULT_WARMUP_FRAC: f64 = 0.01;

/// Linear warm-up from 0 to `peak` over `warmup_frac * total` steps, then
/// linear decay to `floor` at `total`.
pub fn lr_schedule(
    step: u64,
    peak: f64,
    warmup_frac: f64,
    total: u64,
    floor: f64,
) -> Result<f64, NnError> {
    if floor > peak {
        return Err(NnError::FloorAbovePeak { floor, peak });
    }
    if step > total {
        return Err(NnError::StepOutOfRange { step, total });
    }
    if !(0.0..=1.0).contains(&warmup_frac) {
        return Err(NnError::Shape(format!("warm-up fraction {warmup_frac} outside [0, 1]")));
    }
    let (s, t) = (step as f64, total as f64);
    let warm = warmup_frac * t;
    if s < warm {
        return Ok(peak * s / warm);
    }
    if t <= warm {
        return Ok(peak);
    }
    Ok(peak - (peak - floor) * (s - warm) / (t - warm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_hit_zero_peak_and_floor() {
        let total = 10_000;
        let at = |s| lr_schedule(s, DEFAULT_PEAK_LR, DEFAULT_WARMUP_FRAC, total, DEFAULT_FLOOR_LR).unwrap();
        assert_eq!(at(0), 0.0);
        assert!((at(100) - 3e-5).abs() < 1e-18);
        assert!((at(total) - 1e-5).abs() < 1e-18);
        assert!(at(50) < at(100) && at(5000) < at(100) && at(5000) > at(total));
    }

    #[test]
    fn floor_above_peak_rejected() {
        assert!(matches!(
            lr_schedule(0, 1e-5, 0.01, 10, 1e-4),
            Err(NnError::FloorAbovePeak { .. })
        ));
    }

    #[test]
    fn step_past_total_rejected() {
        assert!(lr_schedule(11, 1e-4, 0.01, 10, 1e-5).is_err());
    }
}
