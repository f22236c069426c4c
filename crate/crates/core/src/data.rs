//! Synthetic multi-stem tracks, stem-level augmentation and spectrogram
//! patching for training.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{load_wav, resample};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::stft::{Spectrogram, Waveform};

/// The five stems of a track, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Vocals,
    Guitar,
    Bass,
    Percussion,
    Other,
}

impl Source {
    pub const ALL: [Source; 5] = [
        Source::Vocals,
        Source::Guitar,
        Source::Bass,
        Source::Percussion,
        Source::Other,
    ];

    /// The four sources that get their own model; "other" is the residual.
    pub const MODELED: [Source; 4] = [
        Source::Vocals,
        Source::Guitar,
        Source::Bass,
        Source::Percussion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Source::Vocals => "vocals",
            Source::Guitar => "guitar",
            Source::Bass => "bass",
            Source::Percussion => "percussion",
            Source::Other => "other",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Source::ALL
            .into_iter()
            .find(|src| src.name() == s)
            .ok_or_else(|| {
                Error::param(format!(
                    "unknown source '{s}' (expected vocals, guitar, bass, percussion or other)"
                ))
            })
    }
}

/// Five equal-length stems and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct StemSet {
    stems: Vec<Waveform>,
    mixture: Waveform,
}

impl StemSet {
    /// `stems` must be in [`Source::ALL`] order.
    pub fn new(stems: Vec<Waveform>) -> Result<Self> {
        if stems.len() != Source::ALL.len() {
            return Err(Error::param(format!(
                "expected 5 stems, got {}",
                stems.len()
            )));
        }
        let (len, rate) = (stems[0].len(), stems[0].sample_rate);
        for (s, w) in Source::ALL.iter().zip(&stems) {
            if w.len() != len || w.sample_rate != rate {
                return Err(Error::param(format!(
                    "stem {s} has {} samples at {} Hz, expected {len} at {rate} Hz",
                    w.len(),
                    w.sample_rate
                )));
            }
        }
        let mut mix = vec![0.0; len];
        for w in &stems {
            for (m, v) in mix.iter_mut().zip(&w.samples) {
                *m += v;
            }
        }
        let mixture = Waveform::new(mix, rate)?;
        Ok(Self { stems, mixture })
    }

    pub fn stem(&self, source: Source) -> &Waveform {
        &self.stems[source.index()]
    }

    pub fn stems(&self) -> impl Iterator<Item = (Source, &Waveform)> {
        Source::ALL.into_iter().zip(&self.stems)
    }

    pub fn mixture(&self) -> &Waveform {
        &self.mixture
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.mixture.sample_rate
    }

    /// Loads `<dir>/{vocals,guitar,bass,percussion,other}.wav`, resampling
    /// to `rate`. Missing stems are reported together.
    pub fn load_dir(dir: &Path, rate: u32) -> Result<Self> {
        let missing: Vec<_> = Source::ALL
            .iter()
            .filter(|s| !dir.join(format!("{s}.wav")).is_file())
            .map(|s| format!("{s}.wav"))
            .collect();
        if !missing.is_empty() {
            return Err(Error::param(format!(
                "track {} is missing stems: {}",
                dir.display(),
                missing.join(", ")
            )));
        }
        let stems = Source::ALL
            .iter()
            .map(|s| load_wav(&dir.join(format!("{s}.wav")), rate).map(|(w, _)| w))
            .collect::<Result<Vec<_>>>()?;
        Self::new(stems).map_err(|e| Error::param(format!("track {}: {e}", dir.display())))
    }
}

/// Finds tracks under `root`: either `root` itself holds the stems or each
/// subdirectory is a track. Subdirectories are visited in name order.
pub fn find_tracks(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    if !root.is_dir() {
        return Err(Error::param(format!(
            "dataset directory {} does not exist",
            root.display()
        )));
    }
    let has_stems = Source::ALL
        .iter()
        .any(|s| root.join(format!("{s}.wav")).is_file());
    if has_stems {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::param(format!(
            "dataset directory {} contains no tracks (expected {} or track subdirectories)",
            root.display(),
            Source::ALL.map(|s| format!("{s}.wav")).join(", ")
        )));
    }
    Ok(dirs)
}

// ---------------------------------------------------------------------------
// Synthesis

fn envelope(i: usize, len: usize, attack: usize, release: usize) -> f64 {
    let rise = if i < attack {
        0.5 - 0.5 * (PI * i as f64 / attack as f64).cos()
    } else {
        1.0
    };
    let left = len - i;
    let fall = if left < release {
        0.5 - 0.5 * (PI * left as f64 / release as f64).cos()
    } else {
        1.0
    };
    rise * fall
}

/// A pitch from a pentatonic scale over `root`, `octaves` wide.
fn scale_pitch(rng: &mut ChaCha8Rng, root: f64, octaves: u32) -> f64 {
    const STEPS: [i32; 5] = [0, 2, 4, 7, 9];
    let octave = rng.gen_range(0..octaves) as i32;
    let step = STEPS[rng.gen_range(0..STEPS.len())];
    root * 2f64.powf((12 * octave + step) as f64 / 12.0)
}

struct Clock {
    rate: f64,
    beat: usize,
}

impl Clock {
    /// Highest partial frequency, leaving room for vibrato below Nyquist.
    fn band_limit(&self) -> f64 {
        0.45 * self.rate
    }
}

fn synth_bass(rng: &mut ChaCha8Rng, clock: &Clock, out: &mut [f64]) {
    let n = out.len();
    let mut start = 0;
    while start < n {
        let len = (clock.beat * rng.gen_range(1..=2)).min(n - start);
        let f0 = {
            let root = rng.gen_range(60.0..100.0);
            scale_pitch(rng, root, 1)
        };
        let amp = rng.gen_range(0.2..0.35);
        let ramp = (0.06 * clock.rate) as usize;
        let harmonics: Vec<usize> = (1..=6).filter(|&k| k as f64 * f0 <= 600.0).collect();
        let phases: Vec<f64> = harmonics
            .iter()
            .map(|_| rng.gen_range(0.0..2.0 * PI))
            .collect();
        for i in 0..len {
            let t = i as f64 / clock.rate;
            let env = envelope(i, len, ramp.min(len / 2), ramp.min(len / 2));
            let v: f64 = harmonics
                .iter()
                .zip(&phases)
                .map(|(&k, p)| (2.0 * PI * k as f64 * f0 * t + p).sin() / k as f64)
                .sum();
            out[start + i] += amp * env * v;
        }
        start += len;
    }
}

fn synth_vocals(rng: &mut ChaCha8Rng, clock: &Clock, out: &mut [f64]) {
    let n = out.len();
    let mut start = rng.gen_range(0..clock.beat / 2 + 1);
    while start < n {
        let len = (clock.beat * rng.gen_range(1..=3)).min(n - start);
        let f0 = {
            let root = rng.gen_range(200.0..260.0);
            scale_pitch(rng, root, 2)
        };
        let f1 = rng.gen_range(500.0..900.0);
        let f2 = rng.gen_range(1200.0..2500.0);
        let vib_rate = rng.gen_range(4.5..6.5);
        let vib_depth = rng.gen_range(0.005..0.02);
        let amp = rng.gen_range(0.15..0.3);
        let kmax = (4000f64.min(clock.band_limit()) / f0) as usize;
        let weights: Vec<f64> = (1..=kmax)
            .map(|k| {
                let f = k as f64 * f0;
                (1.0 + 2.0 * (-((f - f1) / 200.0).powi(2)).exp()
                    + (-((f - f2) / 300.0).powi(2)).exp())
                    / k as f64
            })
            .collect();
        let mut phase = 0.0;
        let attack = (0.02 * clock.rate) as usize;
        let release = (0.05 * clock.rate) as usize;
        let transient = (0.015 * clock.rate) as usize;
        for i in 0..len {
            let t = i as f64 / clock.rate;
            let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
            phase += 2.0 * PI * f / clock.rate;
            let env = envelope(i, len, attack.min(len / 2), release.min(len / 2));
            let v: f64 = weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * ((k + 1) as f64 * phase).sin())
                .sum();
            let mut s = amp * env * v;
            if i < transient {
                s += 0.1
                    * amp
                    * (-(i as f64) / (0.004 * clock.rate)).exp()
                    * rng.gen_range(-1.0..1.0);
            }
            out[start + i] += s;
        }
        let gap = rng.gen_range(0..=1) * clock.beat / 2;
        start += len + gap;
    }
}

fn synth_guitar(rng: &mut ChaCha8Rng, clock: &Clock, out: &mut [f64]) {
    let n = out.len();
    let step = clock.beat / 2;
    let mut start = 0;
    while start < n {
        if rng.gen_bool(0.75) {
            let f0 = {
                let root = rng.gen_range(110.0..150.0);
                scale_pitch(rng, root, 2)
            };
            let tau = rng.gen_range(0.3..0.8);
            let amp = rng.gen_range(0.1..0.2);
            let len = ((5.0 * tau * clock.rate) as usize).min(n - start);
            let kmax = ((5000f64.min(clock.band_limit()) / f0) as usize).clamp(1, 12);
            let attack = (0.002 * clock.rate) as usize;
            for i in 0..len {
                let t = i as f64 / clock.rate;
                let env = envelope(i, len, attack.min(len / 2), (len / 8).max(1));
                let v: f64 = (1..=kmax)
                    .map(|k| {
                        let tk = tau / (1.0 + 0.5 * (k - 1) as f64);
                        (2.0 * PI * k as f64 * f0 * t).sin() * (-t / tk).exp() / k as f64
                    })
                    .sum();
                out[start + i] += amp * env * v;
            }
        }
        start += step;
    }
}

fn synth_percussion(rng: &mut ChaCha8Rng, clock: &Clock, out: &mut [f64]) -> Result<()> {
    let n = out.len();
    let step = clock.beat / 2;
    let rate = clock.rate;
    let mut slot = 0usize;
    let mut start = 0;
    while start < n {
        let (tau, filter, amp) = match slot % 4 {
            0 => (0.04, Biquad::lowpass(150.0, 0.8, rate)?, 0.5),
            2 => (
                0.025,
                Biquad::bandpass(1500f64.min(0.3 * rate), 0.9, rate)?,
                0.35,
            ),
            _ => (
                0.01,
                Biquad::highpass(6000f64.min(0.35 * rate), 0.7, rate)?,
                0.2,
            ),
        };
        let len = ((6.0 * tau * rate) as usize).min(n - start);
        let burst: Vec<f64> = (0..len)
            .map(|i| rng.gen_range(-1.0..1.0) * (-(i as f64) / (tau * rate)).exp())
            .collect();
        for (o, v) in out[start..start + len]
            .iter_mut()
            .zip(filter.process(&burst))
        {
            *o += amp * v;
        }
        slot += 1;
        start += step;
    }
    Ok(())
}

fn synth_other(rng: &mut ChaCha8Rng, clock: &Clock, out: &mut [f64]) -> Result<()> {
    let center: f64 = rng.gen_range(300.0..2000.0);
    let filter = Biquad::bandpass(center.min(0.3 * clock.rate), 0.7, clock.rate)?;
    let noise: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lfo = rng.gen_range(0.2..0.5);
    let offset = rng.gen_range(0.0..2.0 * PI);
    for (i, (o, v)) in out.iter_mut().zip(filter.process(&noise)).enumerate() {
        let t = i as f64 / clock.rate;
        *o += 0.08 * (0.5 + 0.5 * (2.0 * PI * lfo * t + offset).sin()) * v;
    }
    Ok(())
}

/// Lowest rate [`synth_stems`] accepts.
pub const MIN_SYNTH_RATE: u32 = 4000;

/// Generates a deterministic five-stem track.
///
/// Stems share a tempo grid and overlap in time and partly in frequency:
/// bass harmonics stay below 600 Hz, vocals and guitar cover roughly
/// 100 Hz to 5 kHz, percussion and the band-passed noise pad are broadband.
/// At low rates the upper frequencies are capped below Nyquist.
pub fn synth_stems(seed: u64, duration_s: f64, sample_rate: u32) -> Result<StemSet> {
    if !(duration_s > 0.0 && duration_s.is_finite()) || sample_rate < MIN_SYNTH_RATE {
        return Err(Error::param(format!(
            "duration must be positive (got {duration_s}) and rate at least \
             {MIN_SYNTH_RATE} Hz (got {sample_rate})"
        )));
    }
    let n = ((duration_s * sample_rate as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bpm = rng.gen_range(90.0..140.0);
    let rate = sample_rate as f64;
    let clock = Clock {
        rate,
        beat: ((60.0 / bpm * rate) as usize).max(2),
    };
    let mut stems = Vec::with_capacity(5);
    for (i, source) in Source::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut out = vec![0.0; n];
        match source {
            Source::Vocals => synth_vocals(&mut rng, &clock, &mut out),
            Source::Guitar => synth_guitar(&mut rng, &clock, &mut out),
            Source::Bass => synth_bass(&mut rng, &clock, &mut out),
            Source::Percussion => synth_percussion(&mut rng, &clock, &mut out)?,
            Source::Other => synth_other(&mut rng, &clock, &mut out)?,
        }
        stems.push(Waveform::new(out, sample_rate)?);
    }
    StemSet::new(stems)
}

// ---------------------------------------------------------------------------
// Augmentation

/// Second-order IIR section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Result<Self> {
        let f = Self {
            b0: b[0] / a[0],
            b1: b[1] / a[0],
            b2: b[2] / a[0],
            a1: a[1] / a[0],
            a2: a[2] / a[0],
        };
        f.validate()?;
        Ok(f)
    }

    fn check_design(freq: f64, q: f64, rate: f64) -> Result<f64> {
        if !(freq > 0.0 && freq < rate / 2.0 && q > 0.0) {
            return Err(Error::param(format!(
                "filter needs 0 < freq < {} Hz and q > 0, got freq {freq}, q {q}",
                rate / 2.0
            )));
        }
        Ok(2.0 * PI * freq / rate)
    }

    /// Peaking equalizer.
    pub fn peaking(freq: f64, gain_db: f64, q: f64, rate: f64) -> Result<Self> {
        let w = Self::check_design(freq, q, rate)?;
        let a = 10f64.powf(gain_db / 40.0);
        let alpha = w.sin() / (2.0 * q);
        Self::normalized(
            [1.0 + alpha * a, -2.0 * w.cos(), 1.0 - alpha * a],
            [1.0 + alpha / a, -2.0 * w.cos(), 1.0 - alpha / a],
        )
    }

    pub fn lowpass(freq: f64, q: f64, rate: f64) -> Result<Self> {
        let w = Self::check_design(freq, q, rate)?;
        let alpha = w.sin() / (2.0 * q);
        let c = w.cos();
        Self::normalized(
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    pub fn highpass(freq: f64, q: f64, rate: f64) -> Result<Self> {
        let w = Self::check_design(freq, q, rate)?;
        let alpha = w.sin() / (2.0 * q);
        let c = w.cos();
        Self::normalized(
            [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    /// Band-pass with 0 dB peak gain.
    pub fn bandpass(freq: f64, q: f64, rate: f64) -> Result<Self> {
        let w = Self::check_design(freq, q, rate)?;
        let alpha = w.sin() / (2.0 * q);
        Self::normalized(
            [alpha, 0.0, -alpha],
            [1.0 + alpha, -2.0 * w.cos(), 1.0 - alpha],
        )
    }

    /// Fails unless both poles lie strictly inside the unit circle.
    pub fn validate(&self) -> Result<()> {
        let finite = [self.b0, self.b1, self.b2, self.a1, self.a2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.a2.abs() >= 1.0 || self.a1.abs() >= 1.0 + self.a2 {
            return Err(Error::param(format!(
                "unstable biquad coefficients {self:?}"
            )));
        }
        Ok(())
    }

    /// Filters from rest (transposed direct form II).
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let (mut z1, mut z2) = (0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b0 * v + z1;
                z1 = self.b1 * v - self.a1 * y + z2;
                z2 = self.b2 * v - self.a2 * y;
                y
            })
            .collect()
    }
}

/// Inclusive range a parameter is drawn from; `lo == hi` is a fixed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uniform {
    pub lo: f64,
    pub hi: f64,
}

impl Uniform {
    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }

    fn check(&self, what: &str, min: f64, max: f64) -> Result<()> {
        if !(self.lo <= self.hi && self.lo >= min && self.hi <= max) {
            return Err(Error::param(format!(
                "{what} range [{}, {}] must lie within [{min}, {max}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Equalizer {
    Fixed(Biquad),
    Peaking {
        freq_hz: Uniform,
        gain_db: Uniform,
        q: Uniform,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StemAugment {
    pub gain_db: Uniform,
    pub eq: Option<Equalizer>,
}

impl StemAugment {
    pub const IDENTITY: Self = Self {
        gain_db: Uniform { lo: 0.0, hi: 0.0 },
        eq: None,
    };
}

/// Stem-level gain and equalization plus a track-level resampling ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    /// Indexed like [`Source::ALL`].
    pub stems: [StemAugment; 5],
    /// Ratio `r`; the output has `round(len / r)` samples.
    pub resample_ratio: Uniform,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            stems: [StemAugment::IDENTITY; 5],
            resample_ratio: Uniform::fixed(1.0),
        }
    }

    /// Random gain, a random peaking EQ per stem and random resampling.
    pub fn training() -> Self {
        let stem = StemAugment {
            gain_db: Uniform::new(-6.0, 6.0),
            eq: Some(Equalizer::Peaking {
                freq_hz: Uniform::new(100.0, 5000.0),
                gain_db: Uniform::new(-6.0, 6.0),
                q: Uniform::new(0.7, 2.0),
            }),
        };
        Self {
            stems: [stem; 5],
            resample_ratio: Uniform::new(0.9, 1.1),
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        for (s, a) in Source::ALL.iter().zip(&self.stems) {
            a.gain_db.check(&format!("{s} gain (dB)"), -12.0, 12.0)?;
            match a.eq {
                Some(Equalizer::Fixed(f)) => f.validate()?,
                Some(Equalizer::Peaking {
                    freq_hz,
                    gain_db,
                    q,
                }) => {
                    freq_hz.check(
                        "EQ frequency",
                        f64::MIN_POSITIVE,
                        sample_rate as f64 / 2.0 * 0.999,
                    )?;
                    gain_db.check("EQ gain", -24.0, 24.0)?;
                    q.check("EQ q", 1e-3, 100.0)?;
                }
                None => {}
            }
        }
        self.resample_ratio.check("resample ratio", 0.9, 1.1)
    }
}

/// Applies `spec` with parameters drawn from `seed`: per-stem gain and EQ,
/// then one shared resampling of every stem. The mixture is recomputed.
pub fn augment(stems: &StemSet, spec: &AugmentSpec, seed: u64) -> Result<StemSet> {
    let rate = stems.sample_rate();
    spec.validate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(5);
    for ((_, wave), aug) in stems.stems().zip(&spec.stems) {
        let mut samples = wave.samples.clone();
        let gain_db = aug.gain_db.sample(&mut rng);
        if gain_db != 0.0 {
            let g = 10f64.powf(gain_db / 20.0);
            samples.iter_mut().for_each(|v| *v *= g);
        }
        let filter = match aug.eq {
            None => None,
            Some(Equalizer::Fixed(f)) => Some(f),
            Some(Equalizer::Peaking {
                freq_hz,
                gain_db,
                q,
            }) => {
                let f = freq_hz.sample(&mut rng);
                let g = gain_db.sample(&mut rng);
                let q = q.sample(&mut rng);
                Some(Biquad::peaking(f, g, q, rate as f64)?)
            }
        };
        if let Some(f) = filter {
            samples = f.process(&samples);
        }
        out.push(samples);
    }
    let ratio = spec.resample_ratio.sample(&mut rng);
    if ratio != 1.0 {
        let len = (stems.len() as f64 / ratio).round().max(1.0) as usize;
        for s in out.iter_mut() {
            *s = resample(s, 1.0 / ratio, len);
        }
    }
    StemSet::new(
        out.into_iter()
            .map(|s| Waveform::new(s, rate))
            .collect::<Result<_>>()?,
    )
}

// ---------------------------------------------------------------------------
// Patching

pub const PATCH_FRAMES: usize = 256;
pub const BATCH_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelsMode {
    /// One channel, `|X|`.
    Magnitude,
    /// Two channels, `Re X` and `Im X`.
    Complex,
}

impl ChannelsMode {
    pub fn channels(self) -> usize {
        match self {
            ChannelsMode::Magnitude => 1,
            ChannelsMode::Complex => 2,
        }
    }
}

/// Up to [`BATCH_SIZE`] zero-padded spectrogram patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    /// `(batch, channels, PATCH_FRAMES, padded_bins)`.
    pub patches: Tensor<f64>,
    /// First source frame of each patch.
    pub offsets: Vec<usize>,
    /// Unpadded frame count of each patch.
    pub valid_frames: Vec<usize>,
    pub valid_bins: usize,
    pub mode: ChannelsMode,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// `(PATCH_FRAMES, padded_bins)`, true where the patch holds real data.
    pub fn validity_mask(&self, patch: usize) -> Array2<bool> {
        let bins = self.patches.shape()[3];
        let frames = self.valid_frames[patch];
        Array2::from_shape_fn((PATCH_FRAMES, bins), |(t, f)| {
            t < frames && f < self.valid_bins
        })
    }
}

/// Non-overlapping [`PATCH_FRAMES`]-frame patches with the frequency axis
/// zero-padded to the window size, grouped into batches of [`BATCH_SIZE`].
pub fn make_patches(spec: &Spectrogram, mode: ChannelsMode) -> Result<Vec<PatchBatch>> {
    let [frames, bins] = spec.shape();
    if frames == 0 {
        return Err(Error::param("spectrogram has no frames"));
    }
    let padded = spec.params.window_size;
    let ch = mode.channels();
    let starts: Vec<usize> = (0..frames).step_by(PATCH_FRAMES).collect();
    Ok(starts
        .chunks(BATCH_SIZE)
        .map(|chunk| {
            let mut data = vec![0.0; chunk.len() * ch * PATCH_FRAMES * padded];
            let mut valid = Vec::with_capacity(chunk.len());
            for (b, &start) in chunk.iter().enumerate() {
                let n = (frames - start).min(PATCH_FRAMES);
                valid.push(n);
                for t in 0..n {
                    for f in 0..bins {
                        let v = spec.bins[[start + t, f]];
                        let at = |c: usize| ((b * ch + c) * PATCH_FRAMES + t) * padded + f;
                        match mode {
                            ChannelsMode::Magnitude => data[at(0)] = v.norm(),
                            ChannelsMode::Complex => {
                                data[at(0)] = v.re;
                                data[at(1)] = v.im;
                            }
                        }
                    }
                }
            }
            PatchBatch {
                patches: Tensor::new(vec![chunk.len(), ch, PATCH_FRAMES, padded], data)
                    .expect("sized above"),
                offsets: chunk.to_vec(),
                valid_frames: valid,
                valid_bins: bins,
                mode,
            }
        })
        .collect())
}

/// Crops padding and concatenates patches back into `(channels, frames, bins)`.
pub fn reassemble(batches: &[PatchBatch]) -> Result<Array3<f64>> {
    let first = batches
        .first()
        .ok_or_else(|| Error::param("no patches to reassemble"))?;
    let ch = first.mode.channels();
    let bins = first.valid_bins;
    let mut expected_start = 0;
    let mut pieces = Vec::new();
    for batch in batches {
        let padded = batch.patches.shape()[3];
        for b in 0..batch.len() {
            if batch.offsets[b] != expected_start || batch.mode != first.mode {
                return Err(Error::param("patches are not contiguous"));
            }
            pieces.push((batch, b, padded));
            expected_start += batch.valid_frames[b];
        }
    }
    let mut out = Array3::zeros((ch, expected_start, bins));
    for (batch, b, padded) in pieces {
        let start = batch.offsets[b];
        for c in 0..ch {
            for t in 0..batch.valid_frames[b] {
                for f in 0..bins {
                    out[[c, start + t, f]] =
                        batch.patches.data()[((b * ch + c) * PATCH_FRAMES + t) * padded + f];
                }
            }
        }
    }
    Ok(out)
}

/// Reassembles complex-mode patches into spectrogram bins.
pub fn reassemble_complex(batches: &[PatchBatch]) -> Result<Array2<Complex64>> {
    if batches.iter().any(|b| b.mode != ChannelsMode::Complex) {
        return Err(Error::param("magnitude patches carry no phase"));
    }
    let parts = reassemble(batches)?;
    let (_, frames, bins) = parts.dim();
    Ok(Array2::from_shape_fn((frames, bins), |(t, f)| {
        Complex64::new(parts[[0, t, f]], parts[[1, t, f]])
    }))
}

/// Deterministic stream of training examples: tracks times augmented
/// variants, visited in a fresh seeded order every epoch.
#[derive(Debug)]
pub struct ExampleOrder {
    tracks: usize,
    variants: usize,
    seed: u64,
    epoch: u64,
    queue: VecDeque<(usize, usize)>,
}

impl ExampleOrder {
    /// `variants` counts the unaugmented original as variant 0.
    pub fn new(tracks: usize, variants: usize, seed: u64) -> Result<Self> {
        if tracks == 0 || variants == 0 {
            return Err(Error::param("need at least one track and one variant"));
        }
        Ok(Self {
            tracks,
            variants,
            seed,
            epoch: 0,
            queue: VecDeque::new(),
        })
    }

    /// True when the current epoch has been fully handed out.
    pub fn at_epoch_end(&self) -> bool {
        self.queue.is_empty()
    }

    /// The next `(track, variant)` pair.
    pub fn next_example(&mut self) -> (usize, usize) {
        if self.queue.is_empty() {
            let mut all: Vec<_> = (0..self.tracks)
                .flat_map(|t| (0..self.variants).map(move |v| (t, v)))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(self.epoch);
            for i in (1..all.len()).rev() {
                all.swap(i, rng.gen_range(0..=i));
            }
            self.queue = all.into();
            self.epoch += 1;
        }
        self.queue.pop_front().expect("refilled above")
    }
}
