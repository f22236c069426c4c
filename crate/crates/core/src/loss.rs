//! Training objectives: L1 spectral-magnitude loss, the negative cosine
//! similarity ("SDR loss") between time-domain signals, and their sum.
//!
//! Gradients with respect to complex spectrogram bins use the convention
//! `dL/dRe + i dL/dIm`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use num_complex::Complex64;

use crate::error::{check_shape, Error, Result};
use crate::stft::{OverlapAdd, Spectrogram, Waveform};

/// Denominator regularizer for the SDR loss during training.
pub const TRAIN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<G> {
    pub value: f64,
    pub gradient: Option<G>,
}

/// Gradient of the combined loss, one part per input representation.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedGradient {
    pub wave: Vec<f64>,
    pub spec: Array2<Complex64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Mag,
    Sdr,
    SdrMag,
}

impl LossKind {
    pub fn uses_time_domain(self) -> bool {
        matches!(self, LossKind::Sdr | LossKind::SdrMag)
    }

    pub fn uses_magnitude(self) -> bool {
        matches!(self, LossKind::Mag | LossKind::SdrMag)
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mag" => Ok(LossKind::Mag),
            "sdr" => Ok(LossKind::Sdr),
            "sdr+mag" => Ok(LossKind::SdrMag),
            other => Err(Error::param(format!(
                "unknown loss '{other}' (expected mag, sdr or sdr+mag)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mag => "mag",
            LossKind::Sdr => "sdr",
            LossKind::SdrMag => "sdr+mag",
        })
    }
}

/// Mean absolute difference of bin magnitudes, with gradient w.r.t. the
/// estimate. Ties and zero-magnitude estimate bins get a zero subgradient.
pub fn magnitude_loss(
    target: &Spectrogram,
    estimate: &Spectrogram,
) -> Result<LossValue<Array2<Complex64>>> {
    target.check_same_shape(estimate)?;
    let (value, grad) = magnitude_l1(target.bins.view(), estimate.bins.view());
    Ok(LossValue {
        value,
        gradient: Some(grad),
    })
}

fn magnitude_l1(
    target: ArrayView2<Complex64>,
    estimate: ArrayView2<Complex64>,
) -> (f64, Array2<Complex64>) {
    let n = target.len().max(1) as f64;
    let mut value = 0.0;
    let grad = Zip::from(&target).and(&estimate).map_collect(|y, e| {
        let (ty, te) = (y.norm(), e.norm());
        value += (ty - te).abs();
        if te == 0.0 || ty == te {
            Complex64::new(0.0, 0.0)
        } else {
            let sign = if te > ty { 1.0 } else { -1.0 };
            e * (sign / (te * n))
        }
    });
    (value / n, grad)
}

/// Negative cosine similarity `-(y . e) / (|y| |e|)`.
///
/// Unregularized, so identities such as `sdr_loss(y, y) == -1` hold to
/// rounding. A silent estimate falls back to the training regularizer.
pub fn sdr_loss(target: &Waveform, estimate: &Waveform) -> Result<LossValue<Vec<f64>>> {
    if target.len() != estimate.len() {
        return Err(Error::param(format!(
            "length mismatch: {} vs {} samples",
            target.len(),
            estimate.len()
        )));
    }
    let eps = if estimate.energy() == 0.0 {
        TRAIN_EPS
    } else {
        0.0
    };
    sdr_loss_regularized(&target.samples, &estimate.samples, eps)
}

/// `-(y . e) / ((|y| + eps)(|e| + eps))` with its gradient w.r.t. `e`.
/// A silent target is an error unless `eps > 0`.
pub fn sdr_loss_regularized(
    target: &[f64],
    estimate: &[f64],
    eps: f64,
) -> Result<LossValue<Vec<f64>>> {
    check_shape(&[target.len()], &[estimate.len()])?;
    let norm_t = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_t == 0.0 {
        // The regularized loss is identically zero for a silent target.
        if eps > 0.0 {
            return Ok(LossValue {
                value: 0.0,
                gradient: Some(vec![0.0; estimate.len()]),
            });
        }
        return Err(Error::param("SDR loss needs a non-silent target"));
    }
    let norm_e = estimate.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = target.iter().zip(estimate).map(|(a, b)| a * b).sum();
    let a = norm_t + eps;
    let b = norm_e + eps;
    let value = -dot / (a * b);
    // d/de of -dot/(a b) = -y/(a b) + dot/(a b^2) * e/|e|
    let radial = if norm_e > 0.0 {
        dot / (a * b * b * norm_e)
    } else {
        0.0
    };
    let gradient = target
        .iter()
        .zip(estimate)
        .map(|(y, e)| -y / (a * b) + radial * e)
        .collect();
    Ok(LossValue {
        value: value.clamp(-1.0, 1.0),
        gradient: Some(gradient),
    })
}

/// Unweighted sum of the SDR loss and the magnitude loss.
pub fn sdr_plus_mag_loss(
    target_wave: &Waveform,
    estimate_wave: &Waveform,
    target_spec: &Spectrogram,
    estimate_spec: &Spectrogram,
) -> Result<LossValue<CombinedGradient>> {
    let sdr = sdr_loss(target_wave, estimate_wave)?;
    let mag = magnitude_loss(target_spec, estimate_spec)?;
    Ok(LossValue {
        value: sdr.value + mag.value,
        gradient: Some(CombinedGradient {
            wave: sdr.gradient.unwrap_or_default(),
            spec: mag.gradient.unwrap_or_default(),
        }),
    })
}

/// A loss on an estimated spectrogram block, differentiated w.r.t. the
/// block's bins. Time-domain terms go through `synthesis`, so their
/// gradient is pulled back with the synthesis adjoint.
pub struct SpectralObjective<'a> {
    pub kind: LossKind,
    pub synthesis: &'a OverlapAdd,
    pub eps: f64,
}

impl SpectralObjective<'_> {
    /// Returns the loss value and `dL/dEstimate`.
    ///
    /// `target_wave` must be `synthesis` applied to `target`; it is passed
    /// in so callers can cache it across steps.
    pub fn evaluate(
        &self,
        target: ArrayView2<Complex64>,
        target_wave: &[f64],
        estimate: ArrayView2<Complex64>,
    ) -> Result<(f64, Array2<Complex64>)> {
        check_shape(target.shape(), estimate.shape())?;
        let mut value = 0.0;
        let mut grad = Array2::zeros(estimate.raw_dim());
        if self.kind.uses_magnitude() {
            let (v, g) = magnitude_l1(target, estimate);
            value += v;
            grad += &g;
        }
        if self.kind.uses_time_domain() {
            let est_wave = self.synthesis.apply(estimate)?;
            let sdr = sdr_loss_regularized(target_wave, &est_wave, self.eps)?;
            value += sdr.value;
            grad += &self.synthesis.adjoint(&sdr.gradient.unwrap_or_default())?;
        }
        Ok((value, grad))
    }
}
