//! Fake quantization for quantization-aware training.
//!
//! Forward: symmetric int8 round-and-clamp. Backward: straight-through,
//! masked to zero where the input saturates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{round_half_away, QMAX};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QatParams {
    scale: f32,
}

impl QatParams {
    pub const BITS: u32 = 8;

    pub fn new(scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Argument(format!("QAT scale must be finite and positive, got {scale}")));
        }
        Ok(Self { scale })
    }

    /// Scale mapping `max_abs` onto code 127; 1 when `max_abs` is zero.
    pub fn from_max_abs(max_abs: f32) -> Result<Self> {
        if max_abs == 0.0 {
            Self::new(1.0)
        } else {
            Self::new(max_abs / QMAX as f32)
        }
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }
}

pub fn qat_fake_quantize(y: &[f32], q: QatParams) -> Vec<f32> {
    let s = f64::from(q.scale);
    let qmax = f64::from(QMAX);
    y.iter()
        .map(|&v| (round_half_away(f64::from(v) / s).clamp(-qmax, qmax) as f32) * q.scale)
        .collect()
}

/// True where the quantizer is in range and the straight-through gradient passes.
pub fn qat_pass_mask(y: &[f32], q: QatParams) -> Vec<bool> {
    let s = f64::from(q.scale);
    y.iter().map(|&v| (f64::from(v) / s).abs() <= f64::from(QMAX)).collect()
}

pub fn qat_backward_rule(upstream: &[f64], y: &[f32], q: QatParams) -> Result<Vec<f64>> {
    if upstream.len() != y.len() {
        return Err(Error::dim("qat_backward_rule", upstream.len(), y.len()));
    }
    Ok(upstream
        .iter()
        .zip(qat_pass_mask(y, q))
        .map(|(&g, pass)| if pass { g } else { 0.0 })
        .collect())
}

/// Running `max|y|` calibration with exponential moving average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleCalibrator {
    decay: f32,
    ema: Option<f32>,
}

impl ScaleCalibrator {
    pub fn new(decay: f32) -> Self {
        Self { decay, ema: None }
    }

    pub fn observe(&mut self, batch_max_abs: f32) -> Result<QatParams> {
        let ema = match self.ema {
            None => batch_max_abs,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * batch_max_abs,
        };
        self.ema = Some(ema);
        QatParams::from_max_abs(ema)
    }

    pub fn current(&self) -> Option<QatParams> {
        self.ema.and_then(|e| QatParams::from_max_abs(e).ok())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points_are_fixed() {
        let q = QatParams::new(0.25).unwrap();
        let y = [0.0, 0.25, -1.5, 31.75, -31.75];
        assert_eq!(qat_fake_quantize(&y, q), y.to_vec());
    }

    #[test]
    fn hand_evaluated_rounding() {
        let q = QatParams::new(2.0 / 127.0).unwrap();
        let out = qat_fake_quantize(&[1.0], q);
        assert!((out[0] - 64.0 * 2.0 / 127.0).abs() < 1e-7, "{out:?}");
        assert!((out[0] - 1.007_87).abs() < 1e-5);
    }

    #[test]
    fn saturation() {
        let q = QatParams::new(0.1).unwrap();
        let out = qat_fake_quantize(&[1e6, -1e6], q);
        assert_eq!(out, vec![127.0 * 0.1f32, -127.0 * 0.1f32]);
    }

    #[test]
    fn idempotent() {
        let q = QatParams::new(0.037).unwrap();
        let y: Vec<f32> = (0..200).map(|i| (i as f32 - 100.0) * 0.0731).collect();
        let once = qat_fake_quantize(&y, q);
        assert_eq!(qat_fake_quantize(&once, q), once);
    }

    #[test]
    fn straight_through_mask() {
        let q = QatParams::new(0.01).unwrap();
        let up = [1.0, -2.0, 3.0];
        assert_eq!(qat_backward_rule(&up, &[0.1, -0.2, 1.26], q).unwrap(), up.to_vec());
        assert_eq!(qat_backward_rule(&up, &[5.0, -5.0, 2.0], q).unwrap(), vec![0.0; 3]);

        let y = [0.5, 2.0, -1.0, -1.3, 1.26];
        let got = qat_backward_rule(&[1.0; 5], &y, q).unwrap();
        let expect: Vec<f64> = y.iter().map(|&v| if v.abs() <= 1.27 { 1.0 } else { 0.0 }).collect();
        assert_eq!(got, expect);
        assert!(qat_backward_rule(&[1.0], &y, q).is_err());
    }

    #[test]
    fn calibrator_ema() {
        let mut c = ScaleCalibrator::new(0.9);
        assert_eq!(c.observe(127.0).unwrap().scale(), 1.0);
        let s = c.observe(0.0).unwrap().scale();
        assert!((s - 0.9).abs() < 1e-6);
        assert!(QatParams::new(0.0).is_err());
        assert_eq!(QatParams::from_max_abs(0.0).unwrap().scale(), 1.0);
    }
}
