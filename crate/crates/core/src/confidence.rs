//! Keypoint confidences from the spread of grouped 3D pose proposals.

use crate::error::{Error, Result};

/// Variances are clamped to this before taking logs.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Score-attenuated variance `v_k`.
pub fn attenuated_variance(var: f64, score: f64) -> f64 {
    var.max(VARIANCE_FLOOR) / (1.0 + (-0.2 * score + 3.5).exp())
}

/// 99th percentile of the log joint variances over a recording.
pub fn log_variance_p99(variances: &[f64]) -> Option<f64> {
    let logs: Vec<f64> = variances.iter().map(|v| v.max(VARIANCE_FLOOR).ln()).collect();
    percentile(&logs, 99.0)
}

/// Confidence of one joint from its proposal variance `var` (m²), the pose
/// score `score` and the recording's log-variance percentile `p99`.
///
/// Low variances map to high confidence when `p99` is negative, which is
/// the case whenever typical variances are below 1 m².
pub fn joint_confidence(var: f64, score: f64, p99: f64) -> Result<f64> {
    if !(var >= 0.0) || !score.is_finite() || !p99.is_finite() || p99 == 0.0 {
        return Err(Error::InvalidInput(format!(
            "confidence needs var >= 0, finite score and nonzero finite P99 (got {var}, {score}, {p99})"
        )));
    }
    let v = attenuated_variance(var, score);
    let inner = (v.ln() / p99).exp();
    let c = 1.0 / (1.0 + (-10.0 * inner + 24.0).exp());
    Ok(c.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 50.0), Some(3.0));
        assert_eq!(percentile(&[0.0, 10.0], 95.0), Some(9.5));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn low_variance_gets_high_confidence() {
        let vars: Vec<f64> = (1..200).map(|i| 1e-4 * i as f64).collect();
        let p99 = log_variance_p99(&vars).unwrap();
        assert!(p99 < 0.0);
        let lo = joint_confidence(1e-4, 10.0, p99).unwrap();
        let hi = joint_confidence(1e-2, 10.0, p99).unwrap();
        assert!(lo > hi);
    }

    #[test]
    fn floor_value_matches_direct_evaluation() {
        let c = joint_confidence(0.0, 5.0, -3.0).unwrap();
        let v = 1e-12 / (1.0 + (-0.2f64 * 5.0 + 3.5).exp());
        let want = 1.0 / (1.0 + (-10.0 * (v.ln() / -3.0).exp() + 24.0).exp());
        assert_eq!(c, want.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
    }

    #[test]
    fn rejects_zero_percentile() {
        assert!(joint_confidence(0.1, 1.0, 0.0).is_err());
        assert!(joint_confidence(-0.1, 1.0, -1.0).is_err());
    }
}
