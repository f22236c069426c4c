//! Real (magnitude-domain) and complex spectral masks.
//!
//! A real mask scales each mixture bin's magnitude and keeps the mixture
//! phase. A complex mask scales the magnitude and rotates the phase, which
//! is the same as an elementwise complex product. Network outputs are mapped
//! to masks with a logistic sigmoid (real) or a tanh-bounded modulus with
//! the output's own phase (complex).

use ndarray::{Array2, Zip};
use num_complex::Complex64;

use crate::error::{check_shape, Error, Result};
use crate::stft::{bin_phase, istft, stft, Spectrogram, StftParams, Waveform};

/// Guard for divisions by a modulus.
pub const EPS: f64 = 1e-8;

/// Largest f64 below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
/// tanh ceiling; leaves room for rounding in `O * (t / |O|)` to stay below 1.
const MODULUS_CEILING: f64 = 1.0 - 2.0 * f64::EPSILON;

#[derive(Debug, Clone, PartialEq)]
pub struct RealMask {
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMask {
    pub values: Array2<Complex64>,
}

impl RealMask {
    pub fn shape(&self) -> [usize; 2] {
        [self.values.nrows(), self.values.ncols()]
    }
}

impl ComplexMask {
    pub fn shape(&self) -> [usize; 2] {
        [self.values.nrows(), self.values.ncols()]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `M = sigmoid(O)`, clamped so every entry stays strictly inside (0, 1).
pub fn real_mask_from_output(output: &Array2<f64>) -> RealMask {
    RealMask {
        values: output.mapv(|o| sigmoid(o).clamp(f64::MIN_POSITIVE, BELOW_ONE)),
    }
}

/// `|M| = tanh(|O|)`, `M / |M| = O / |O|`; outputs with `|O| < EPS` give 0.
pub fn complex_mask_from_output(output: &Array2<Complex64>) -> ComplexMask {
    ComplexMask {
        values: output.mapv(complex_mask_bin),
    }
}

fn complex_mask_bin(o: Complex64) -> Complex64 {
    let r = o.norm();
    if r < EPS {
        return Complex64::new(0.0, 0.0);
    }
    o * (r.tanh().min(MODULUS_CEILING) / r)
}

/// `Y = M |X| e^{i angle X}`, computed as `M X` so an all-ones mask is exact.
pub fn apply_real_mask(mask: &RealMask, mixture: &Spectrogram) -> Result<Spectrogram> {
    check_shape(&mixture.shape(), &mask.shape())?;
    let bins = Zip::from(&mask.values)
        .and(&mixture.bins)
        .map_collect(|&m, &x| x * m);
    Ok(Spectrogram {
        bins,
        params: mixture.params,
    })
}

/// Complex masking as the elementwise product `M X`.
pub fn apply_complex_mask(mask: &ComplexMask, mixture: &Spectrogram) -> Result<Spectrogram> {
    check_shape(&mixture.shape(), &mask.shape())?;
    let bins = Zip::from(&mask.values)
        .and(&mixture.bins)
        .map_collect(|&m, &x| m * x);
    Ok(Spectrogram {
        bins,
        params: mixture.params,
    })
}

/// Complex masking in polar form: magnitudes multiply and phases add.
pub fn apply_complex_mask_polar(mask: &ComplexMask, mixture: &Spectrogram) -> Result<Spectrogram> {
    check_shape(&mixture.shape(), &mask.shape())?;
    let bins = Zip::from(&mask.values)
        .and(&mixture.bins)
        .map_collect(|&m, &x| {
            Complex64::from_polar(m.norm() * x.norm(), bin_phase(m) + bin_phase(x))
        });
    Ok(Spectrogram {
        bins,
        params: mixture.params,
    })
}

/// Ideal ratio mask `min(|Y| / max(|X|, EPS), 1)`.
pub fn ideal_real_mask(source: &Spectrogram, mixture: &Spectrogram) -> Result<RealMask> {
    source.check_same_shape(mixture)?;
    let values = Zip::from(&source.bins)
        .and(&mixture.bins)
        .map_collect(|y, x| (y.norm() / x.norm().max(EPS)).min(1.0));
    Ok(RealMask { values })
}

/// Complex ideal ratio mask `Y / X` (0 where `|X| < EPS`), optionally with
/// its modulus limited to `clip` while keeping its phase.
pub fn ideal_complex_mask(
    source: &Spectrogram,
    mixture: &Spectrogram,
    clip: Option<f64>,
) -> Result<ComplexMask> {
    source.check_same_shape(mixture)?;
    if let Some(c) = clip {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::param(format!(
                "clip bound must be positive, got {c}"
            )));
        }
    }
    let values = Zip::from(&source.bins)
        .and(&mixture.bins)
        .map_collect(|&y, &x| {
            if x.norm() < EPS {
                return Complex64::new(0.0, 0.0);
            }
            let m = y / x;
            match clip {
                Some(c) if m.norm() > c => m * (c / m.norm()),
                _ => m,
            }
        });
    Ok(ComplexMask { values })
}

/// The residual source: mixture minus the sum of the estimates.
pub fn residual_other(mixture: &Waveform, estimates: &[Waveform]) -> Result<Waveform> {
    let mut out = mixture.samples.clone();
    for est in estimates {
        mixture.check_compatible(est)?;
        for (o, e) in out.iter_mut().zip(&est.samples) {
            *o -= e;
        }
    }
    Ok(Waveform {
        samples: out,
        sample_rate: mixture.sample_rate,
    })
}

/// Which ideal mask an oracle separation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Irm,
    Cirm,
    /// Complex ratio mask with modulus clipped to 1.
    CirmClipped,
}

impl std::str::FromStr for OracleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irm" => Ok(OracleKind::Irm),
            "cirm" => Ok(OracleKind::Cirm),
            "cirm-clipped" => Ok(OracleKind::CirmClipped),
            other => Err(Error::param(format!(
                "unknown mask type '{other}' (expected irm, cirm or cirm-clipped)"
            ))),
        }
    }
}

/// Masks `mixture` with the ideal mask for `source` and resynthesizes.
pub fn oracle_estimate(
    mixture: &Waveform,
    source: &Waveform,
    kind: OracleKind,
    params: &StftParams,
) -> Result<Waveform> {
    mixture.check_compatible(source)?;
    let x = stft(mixture, params)?;
    let y = stft(source, params)?;
    let est = match kind {
        OracleKind::Irm => apply_real_mask(&ideal_real_mask(&y, &x)?, &x)?,
        OracleKind::Cirm => apply_complex_mask(&ideal_complex_mask(&y, &x, None)?, &x)?,
        OracleKind::CirmClipped => apply_complex_mask(&ideal_complex_mask(&y, &x, Some(1.0))?, &x)?,
    };
    istft(&est, mixture.len())
}

/// Gradient of a loss w.r.t. raw real-mask outputs `O`, given the gradient
/// `dL/dRe + i dL/dIm` on the masked estimate `sigmoid(O) X`.
pub fn real_mask_backward(
    output: &Array2<f64>,
    mixture: &Array2<Complex64>,
    grad_estimate: &Array2<Complex64>,
) -> Result<Array2<f64>> {
    check_shape(output.shape(), mixture.shape())?;
    check_shape(output.shape(), grad_estimate.shape())?;
    Ok(Zip::from(output)
        .and(mixture)
        .and(grad_estimate)
        .map_collect(|&o, &x, &g| {
            let s = sigmoid(o);
            s * (1.0 - s) * (g.re * x.re + g.im * x.im)
        }))
}

/// Gradient w.r.t. raw complex-mask outputs `O` (as `dL/dRe O + i dL/dIm O`)
/// given the gradient on the estimate `M(O) X`.
pub fn complex_mask_backward(
    output: &Array2<Complex64>,
    mixture: &Array2<Complex64>,
    grad_estimate: &Array2<Complex64>,
) -> Result<Array2<Complex64>> {
    check_shape(output.shape(), mixture.shape())?;
    check_shape(output.shape(), grad_estimate.shape())?;
    Ok(Zip::from(output)
        .and(mixture)
        .and(grad_estimate)
        .map_collect(|&o, &x, &g| {
            let r = o.norm();
            if r < EPS {
                return Complex64::new(0.0, 0.0);
            }
            let t = r.tanh();
            if t > MODULUS_CEILING {
                // Clamped region: M depends only on the phase of O.
                let gm = g * x.conj();
                let s = MODULUS_CEILING / r;
                let radial = (gm.re * o.re + gm.im * o.im) / (r * r);
                return (gm - o * radial) * s;
            }
            // Gradient on M, then through M = s(r) O with s = tanh(r) / r.
            let gm = g * x.conj();
            let s = t / r;
            // (ds/dr) / r, with a series expansion where cancellation bites.
            let ds_over_r = if r < 1e-2 {
                let r2 = r * r;
                -2.0 / 3.0 + r2 * (8.0 / 15.0 - r2 * 102.0 / 315.0)
            } else {
                ((1.0 - t * t) * r - t) / (r * r * r)
            };
            let dot = gm.re * o.re + gm.im * o.im;
            gm * s + o * (ds_over_r * dot)
        }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::{stft, StftParams};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn params() -> StftParams {
        StftParams {
            window_size: 4,
            hop_size: 1,
            ..StftParams::default()
        }
    }

    fn spec(bins: Array2<Complex64>) -> Spectrogram {
        Spectrogram::new(bins, params()).unwrap()
    }

    fn random_complex(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((rows, cols), |_| {
            Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))
        })
    }

    #[test]
    fn sigmoid_examples() {
        let m = real_mask_from_output(&array![[0.0, 100.0, -(3f64.ln()), -1000.0]]);
        assert_eq!(m.values[[0, 0]], 0.5);
        assert!(m.values[[0, 1]] < 1.0 && m.values[[0, 1]] > 1.0 - 1e-15);
        assert!((m.values[[0, 2]] - 0.25).abs() < 1e-15);
        assert!(m.values[[0, 3]] > 0.0);
    }

    #[test]
    fn apply_real_mask_examples() {
        let x = spec(array![[
            Complex64::new(3.0, 4.0),
            Complex64::new(-1.0, 0.5),
            Complex64::new(0.0, -2.0)
        ]]);
        let ones = RealMask {
            values: Array2::ones((1, 3)),
        };
        assert_eq!(apply_real_mask(&ones, &x).unwrap(), x);
        let zeros = RealMask {
            values: Array2::zeros((1, 3)),
        };
        assert!(apply_real_mask(&zeros, &x)
            .unwrap()
            .bins
            .iter()
            .all(|c| c.norm() == 0.0));
        let half = RealMask {
            values: Array2::from_elem((1, 3), 0.5),
        };
        assert_eq!(
            apply_real_mask(&half, &x).unwrap().bins[[0, 0]],
            Complex64::new(1.5, 2.0)
        );
        let wrong = RealMask {
            values: Array2::ones((2, 3)),
        };
        assert!(matches!(
            apply_real_mask(&wrong, &x),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn real_mask_preserves_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = spec(random_complex(&mut rng, 20, 3));
        let mask = real_mask_from_output(&Array2::from_shape_fn((20, 3), |_| {
            rng.gen_range(-6.0..6.0)
        }));
        let y = apply_real_mask(&mask, &x).unwrap();
        for (a, b) in y.bins.iter().zip(&x.bins) {
            assert!((bin_phase(*a) - bin_phase(*b)).abs() < 1e-15);
        }
    }

    #[test]
    fn complex_mask_from_output_examples() {
        let m = complex_mask_from_output(&array![[
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 3.0),
            Complex64::new(50.0, -50.0)
        ]]);
        assert!((m.values[[0, 0]] - Complex64::new(0.761594155955765, 0.0)).norm() < 1e-12);
        assert_eq!(m.values[[0, 1]], Complex64::new(0.0, 0.0));
        assert!((m.values[[0, 2]].norm() - 0.9950547536867305).abs() < 1e-12);
        assert!((bin_phase(m.values[[0, 2]]) - PI / 2.0).abs() < 1e-15);
        assert!(m.values[[0, 3]].norm() < 1.0);
    }

    #[test]
    fn apply_complex_mask_examples() {
        let x = spec(array![[
            Complex64::new(2.0, 0.0),
            Complex64::from_polar(4.0, PI / 4.0),
            Complex64::new(-1.0, 3.0)
        ]]);
        let ident = ComplexMask {
            values: Array2::from_elem((1, 3), Complex64::new(1.0, 0.0)),
        };
        assert_eq!(apply_complex_mask(&ident, &x).unwrap(), x);
        let mask = ComplexMask {
            values: array![[
                Complex64::new(0.0, 1.0),
                Complex64::from_polar(0.5, PI / 4.0),
                Complex64::new(0.0, 0.0)
            ]],
        };
        let y = apply_complex_mask(&mask, &x).unwrap();
        assert!((y.bins[[0, 0]] - Complex64::new(0.0, 2.0)).norm() < 1e-15);
        assert!((y.bins[[0, 1]].norm() - 2.0).abs() < 1e-14);
        assert!((bin_phase(y.bins[[0, 1]]) - PI / 2.0).abs() < 1e-14);
    }

    #[test]
    fn polar_and_product_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = spec(random_complex(&mut rng, 10, 3));
            let mask = complex_mask_from_output(&random_complex(&mut rng, 10, 3));
            let a = apply_complex_mask(&mask, &x).unwrap();
            let b = apply_complex_mask_polar(&mask, &x).unwrap();
            for (p, q) in a.bins.iter().zip(&b.bins) {
                assert!((p - q).norm() <= 1e-9 * p.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn ideal_real_mask_examples() {
        let x = spec(array![[
            Complex64::new(4.0, 0.0),
            Complex64::new(0.0, 4.0),
            Complex64::new(0.0, 0.0)
        ]]);
        let y = spec(array![[
            Complex64::new(0.0, 3.0),
            Complex64::new(3.0, 4.0),
            Complex64::new(0.0, 0.0)
        ]]);
        let m = ideal_real_mask(&y, &x).unwrap();
        assert_eq!(m.values, array![[0.75, 1.0, 0.0]]);
        assert!(ideal_real_mask(&x, &x)
            .unwrap()
            .values
            .iter()
            .take(2)
            .all(|&v| v == 1.0));
        let silent = Spectrogram::zeros(1, params());
        assert!(ideal_real_mask(&silent, &x)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn ideal_complex_mask_examples() {
        let x = spec(array![[
            Complex64::new(1.0, -1.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0)
        ]]);
        let y = spec(array![[
            Complex64::new(1.0, 1.0),
            Complex64::new(0.0, -3.0),
            Complex64::new(1.0, 0.0)
        ]]);
        let m = ideal_complex_mask(&y, &x, None).unwrap();
        assert!((m.values[[0, 0]] - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        assert_eq!(m.values[[0, 1]], Complex64::new(0.0, -3.0));
        assert_eq!(m.values[[0, 2]], Complex64::new(0.0, 0.0));
        let clipped = ideal_complex_mask(&y, &x, Some(1.0)).unwrap();
        assert!((clipped.values[[0, 1]] - Complex64::new(0.0, -1.0)).norm() < 1e-15);
        let same = ideal_complex_mask(&x, &x, Some(1.0)).unwrap();
        assert!((same.values[[0, 0]] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert!(ideal_complex_mask(&y, &x, Some(0.0)).is_err());
    }

    #[test]
    fn complex_oracle_inverts_the_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = spec(random_complex(&mut rng, 30, 3));
        let y = spec(random_complex(&mut rng, 30, 3));
        let est = apply_complex_mask(&ideal_complex_mask(&y, &x, None).unwrap(), &x).unwrap();
        for (a, b) in est.bins.iter().zip(&y.bins) {
            assert!((a - b).norm() <= 1e-9 * b.norm());
        }
    }

    #[test]
    fn residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w =
            || Waveform::new((0..100).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap();
        let (s1, s2, s3) = (w(), w(), w());
        let mix = Waveform::new(
            (0..100)
                .map(|i| s1.samples[i] + s2.samples[i] + s3.samples[i])
                .collect(),
            8000,
        )
        .unwrap();
        assert_eq!(residual_other(&mix, &[]).unwrap(), mix);
        assert!(residual_other(&mix, &[mix.clone()])
            .unwrap()
            .samples
            .iter()
            .all(|&v| v == 0.0));
        let r = residual_other(&mix, &[s1, s2]).unwrap();
        for (a, b) in r.samples.iter().zip(&s3.samples) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(residual_other(&mix, &[Waveform::zeros(99, 8000)]).is_err());
        assert!(residual_other(&mix, &[Waveform::zeros(100, 16000)]).is_err());
    }

    #[test]
    fn mask_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_complex(&mut rng, 4, 5);
        let target = random_complex(&mut rng, 4, 5);
        // L = sum |M X - T|^2, gradient on the estimate is 2 (M X - T).
        let loss_c = |o: &Array2<Complex64>| -> f64 {
            let m = complex_mask_from_output(o);
            Zip::from(&m.values)
                .and(&x)
                .and(&target)
                .fold(0.0, |acc, &m, &x, &t| acc + (m * x - t).norm_sqr())
        };
        let mut o = random_complex(&mut rng, 4, 5);
        o[[0, 0]] = Complex64::new(1e-5, -2e-5);
        let m = complex_mask_from_output(&o);
        let g_est = Zip::from(&m.values)
            .and(&x)
            .and(&target)
            .map_collect(|&m, &x, &t| (m * x - t) * 2.0);
        let grad = complex_mask_backward(&o, &x, &g_est).unwrap();
        let h = 1e-7;
        for idx in [(0, 0), (1, 2), (3, 4), (2, 1)] {
            for (part, analytic) in [(0, grad[idx].re), (1, grad[idx].im)] {
                let mut p = o.clone();
                let mut q = o.clone();
                if part == 0 {
                    p[idx].re += h;
                    q[idx].re -= h;
                } else {
                    p[idx].im += h;
                    q[idx].im -= h;
                }
                let fd = (loss_c(&p) - loss_c(&q)) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() < 1e-6 * fd.abs().max(1.0),
                    "{idx:?} {part}: {fd} vs {analytic}"
                );
            }
        }

        let o_r = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-3.0..3.0));
        let loss_r = |o: &Array2<f64>| -> f64 {
            let m = real_mask_from_output(o);
            Zip::from(&m.values)
                .and(&x)
                .and(&target)
                .fold(0.0, |acc, &m, &x, &t| acc + (x * m - t).norm_sqr())
        };
        let m = real_mask_from_output(&o_r);
        let g_est = Zip::from(&m.values)
            .and(&x)
            .and(&target)
            .map_collect(|&m, &x, &t| (x * m - t) * 2.0);
        let grad = real_mask_backward(&o_r, &x, &g_est).unwrap();
        for idx in [(0, 0), (1, 2), (3, 4)] {
            let mut p = o_r.clone();
            let mut q = o_r.clone();
            p[idx] += h;
            q[idx] -= h;
            let fd = (loss_r(&p) - loss_r(&q)) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn oracle_on_real_signals_beats_real_mask() {
        // Two same-frequency sinusoids with a phase offset: the mixture phase
        // differs from the source phase in every active bin.
        let params = StftParams::default();
        let n = 8192;
        let tone = |phase: f64, amp: f64| {
            Waveform::new(
                (0..n)
                    .map(|i| amp * (2.0 * PI * 440.0 * i as f64 / 22050.0 + phase).sin())
                    .collect(),
                22050,
            )
            .unwrap()
        };
        let src = tone(0.0, 0.5);
        let other = tone(2.0, 0.4);
        let mix = Waveform::new(
            src.samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| a + b)
                .collect(),
            22050,
        )
        .unwrap();
        let x = stft(&mix, &params).unwrap();
        let y = stft(&src, &params).unwrap();
        let irm = apply_real_mask(&ideal_real_mask(&y, &x).unwrap(), &x).unwrap();
        let cirm = apply_complex_mask(&ideal_complex_mask(&y, &x, Some(1.0)).unwrap(), &x).unwrap();
        let err = |e: &Spectrogram| -> f64 {
            e.bins
                .iter()
                .zip(&y.bins)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum()
        };
        assert!(err(&cirm) < err(&irm));
    }
}
