/// Warm-up learning-rate schedule: a linear ramp from 0 to `peak` over
/// `warmup` steps followed by inverse-square-root decay,
/// `peak * sqrt(warmup / step)`. With no warm-up the rate stays at `peak`.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize) -> f64 {
    if warmup == 0 {
        return peak;
    }
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (warmup as f64 / step as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_apex_midpoint_and_decay() {
        let peak = 0.002;
        assert_eq!(lr_schedule(100, peak, 100), peak);
        assert_eq!(lr_schedule(50, peak, 100), peak / 2.0);
        assert_eq!(lr_schedule(400, peak, 100), peak / 2.0);
        assert_eq!(lr_schedule(0, peak, 0), peak);
        assert_eq!(lr_schedule(7, peak, 0), peak);
    }

    #[test]
    fn monotone_ramp_then_decay() {
        let lrs: Vec<f64> = (0..=300).map(|s| lr_schedule(s, 1.0, 100)).collect();
        assert!(lrs[..=100].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[100..].windows(2).all(|w| w[0] > w[1]));
    }
}
