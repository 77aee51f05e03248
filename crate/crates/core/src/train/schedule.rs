use crate::error::{Error, Result};

/// Linear warmup to `lr0` at `warmup`, then inverse square-root decay:
/// `lr0 · min(step / warmup, sqrt(warmup / step))`.
pub fn lr_schedule(step: usize, lr0: f64, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning-rate steps start at 1".into()));
    }
    if warmup == 0 {
        return Ok(lr0 / (step as f64).sqrt());
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(lr0 * (s / w).min((w / s).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let lr0 = 5e-4;
        assert_eq!(lr_schedule(4000, lr0, 4000).unwrap(), lr0);
        assert_eq!(lr_schedule(2000, lr0, 4000).unwrap(), lr0 / 2.0);
        assert_eq!(lr_schedule(16000, lr0, 4000).unwrap(), lr0 / 2.0);
        assert_eq!(lr_schedule(200, lr0, 200).unwrap(), lr0);
        assert!(lr_schedule(0, lr0, 4000).is_err());
    }

    #[test]
    fn peaks_at_warmup() {
        let w = 50;
        let peak = (1..500)
            .map(|s| (s, lr_schedule(s, 1.0, w).unwrap()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(peak.0, w);
    }
}
