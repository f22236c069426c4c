//! Mono WAV input/output and band-limited resampling.
//!
//! Reads 16-bit PCM or 32-bit float; writes 32-bit float. The resampler is
//! a Blackman-windowed sinc with 16 zero crossings per side and its cutoff at
//! 0.95 of the lower Nyquist frequency. Stopband rejection is about 70 dB.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::stft::Waveform;

const ZERO_CROSSINGS: f64 = 16.0;
const CUTOFF: f64 = 0.95;

/// Reads a mono WAV file at its native rate.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    // Once the file is open, every decoder failure is a malformed file.
    let bad = |e: hound::Error| Error::format(format!("{}: {e}", path.display()));
    let reader = WavReader::new(BufReader::new(File::open(path)?)).map_err(bad)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?,
        (fmt, bits) => {
            return Err(Error::format(format!(
                "{}: unsupported sample format {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Reads a mono WAV file and resamples it to `rate` if needed. The flag is
/// true when resampling happened.
pub fn load_wav(path: &Path, rate: u32) -> Result<(Waveform, bool)> {
    let wave = read_wav(path)?;
    if wave.sample_rate == rate {
        return Ok((wave, false));
    }
    Ok((resample_to(&wave, rate)?, true))
}

/// Writes 32-bit float mono.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        writer.write_sample(s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Changes the sample rate, keeping the duration:
/// the output has `round(len * rate / wave.sample_rate)` samples.
pub fn resample_to(wave: &Waveform, rate: u32) -> Result<Waveform> {
    if rate == 0 {
        return Err(Error::param("target sample rate must be positive"));
    }
    let factor = rate as f64 / wave.sample_rate as f64;
    let len = (wave.len() as f64 * factor).round() as usize;
    Waveform::new(resample(&wave.samples, factor, len), rate)
}

/// Evaluates the band-limited interpolant of `x` at `t = j / factor` for
/// `j in 0..len`. `factor < 1` shortens the signal and lowers the cutoff
/// accordingly.
pub fn resample(x: &[f64], factor: f64, len: usize) -> Vec<f64> {
    if factor == 1.0 {
        let mut out: Vec<f64> = x.iter().copied().take(len).collect();
        out.resize(len, 0.0);
        return out;
    }
    let fc = CUTOFF * factor.min(1.0);
    let half = ZERO_CROSSINGS / fc;
    (0..len)
        .map(|j| {
            let t = j as f64 / factor;
            let lo = (t - half).ceil().max(0.0) as usize;
            let hi = ((t + half).floor() as usize).min(x.len().saturating_sub(1));
            let mut acc = 0.0;
            for (i, &v) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - i as f64;
                acc += v * fc * sinc(fc * d) * blackman(d / half);
            }
            acc
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on `[-1, 1]`.
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let a = PI * (u + 1.0);
    0.42 - 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
}
