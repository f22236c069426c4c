//! Signal-to-distortion ratios for reporting separation quality.
//!
//! These are plain energy ratios; no distortion filters or framewise
//! aggregation are applied. Values are clamped to +/-300 dB so reports stay
//! finite.

use crate::error::{Error, Result};
use crate::stft::Waveform;

pub const DB_CAP: f64 = 300.0;

/// Per-source evaluation numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub name: String,
    pub sdr_db: f64,
    pub si_sdr_db: f64,
    pub num_samples: usize,
}

impl EvalReport {
    pub fn compute(name: &str, reference: &Waveform, estimate: &Waveform) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            sdr_db: sdr_db(reference, estimate)?,
            si_sdr_db: si_sdr_db(reference, estimate)?,
            num_samples: reference.len(),
        })
    }
}

fn check(reference: &Waveform, estimate: &Waveform) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::param(format!(
            "length mismatch: reference {} vs estimate {} samples",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.energy() == 0.0 {
        return Err(Error::param("reference signal is silent"));
    }
    Ok(())
}

fn ratio_db(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        return DB_CAP;
    }
    (10.0 * (signal / noise).log10()).clamp(-DB_CAP, DB_CAP)
}

/// `10 log10(|y|^2 / |y - e|^2)`.
pub fn sdr_db(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check(reference, estimate)?;
    let noise: f64 = reference
        .samples
        .iter()
        .zip(&estimate.samples)
        .map(|(y, e)| (y - e).powi(2))
        .sum();
    Ok(ratio_db(reference.energy(), noise))
}

/// Scale-invariant SDR: the estimate is projected onto the reference with
/// the optimal gain before measuring the residual.
pub fn si_sdr_db(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check(reference, estimate)?;
    let y = &reference.samples;
    let e = &estimate.samples;
    let alpha = y.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / reference.energy();
    let target: f64 = y.iter().map(|v| (alpha * v).powi(2)).sum();
    let noise: f64 = y.iter().zip(e).map(|(a, b)| (b - alpha * a).powi(2)).sum();
    Ok(ratio_db(target, noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::sdr_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, 22050).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn sdr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = wave(random(&mut rng, 1000));
        assert_eq!(sdr_db(&y, &y).unwrap(), DB_CAP);
        assert_eq!(sdr_db(&y, &Waveform::zeros(1000, 22050)).unwrap(), 0.0);

        let noise = random(&mut rng, 1000);
        let scale = y.energy().sqrt() / 10.0 / noise.iter().map(|v| v * v).sum::<f64>().sqrt();
        let est = wave(
            y.samples
                .iter()
                .zip(&noise)
                .map(|(a, n)| a + scale * n)
                .collect(),
        );
        assert!((sdr_db(&y, &est).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn si_sdr_examples() {
        let n = 2000;
        let sin = wave(
            (0..n)
                .map(|i| (2.0 * PI * 5.0 * i as f64 / n as f64).sin())
                .collect(),
        );
        let cos = wave(
            (0..n)
                .map(|i| (2.0 * PI * 5.0 * i as f64 / n as f64).cos())
                .collect(),
        );
        let double = wave(sin.samples.iter().map(|v| 2.0 * v).collect());
        assert_eq!(si_sdr_db(&sin, &double).unwrap(), DB_CAP);
        assert!(si_sdr_db(&sin, &cos).unwrap() <= -100.0);
    }

    #[test]
    fn errors() {
        let y = wave(vec![1.0, 0.0]);
        assert!(sdr_db(&y, &wave(vec![1.0])).is_err());
        assert!(si_sdr_db(&wave(vec![0.0, 0.0]), &y).is_err());
    }

    #[test]
    fn sdr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = wave(random(&mut rng, 500));
        let noise = random(&mut rng, 500);
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let est = wave(
                y.samples
                    .iter()
                    .zip(&noise)
                    .map(|(a, n)| a + 0.05 * k as f64 * n)
                    .collect(),
            );
            let v = sdr_db(&y, &est).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn scale_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = wave(random(&mut rng, 500));
        let e = wave(random(&mut rng, 500));
        let e3 = wave(e.samples.iter().map(|v| v * 3.0).collect());
        assert!((si_sdr_db(&y, &e).unwrap() - si_sdr_db(&y, &e3).unwrap()).abs() < 1e-9);
        assert!((sdr_db(&y, &e).unwrap() - sdr_db(&y, &e3).unwrap()).abs() > 1.0);
    }

    #[test]
    fn si_sdr_follows_cosine_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let y = wave(random(&mut rng, 300));
            let mix = rng.gen_range(0.0..1.0);
            let e = wave(
                y.samples
                    .iter()
                    .map(|v| mix * v + (1.0 - mix) * rng.gen_range(-1.0..1.0))
                    .collect(),
            );
            let cos = -sdr_loss(&y, &e).unwrap().value;
            let expected = -10.0 * (1.0 / (cos * cos) - 1.0).log10();
            assert!((si_sdr_db(&y, &e).unwrap() - expected).abs() < 1e-6);
        }
    }
}
