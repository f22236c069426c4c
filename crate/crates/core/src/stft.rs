//! Short-time Fourier analysis and overlap-add synthesis.
//!
//! Framing is centered: the signal is padded with `window_size / 2` zeros on
//! both ends, frame `t` covers padded samples `[t * hop, t * hop + window)`,
//! and there are `ceil((len + window) / hop)` frames. A periodic Hann window
//! is applied before an unnormalized real-input DFT, so bin magnitudes are in
//! natural DFT scale. Synthesis divides the windowed overlap-add by the
//! per-sample sum of squared windows, which inverts the analysis exactly
//! wherever at least one frame has non-zero window weight.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use realfft::RealFftPlanner;

use crate::error::{check_shape, Error, Result};

/// Analysis window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / N)`.
    #[default]
    Hann,
}

impl Window {
    pub fn coefficients(self, size: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..size)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / size as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftParams {
    pub window_size: usize,
    pub hop_size: usize,
    pub sample_rate: u32,
    pub window: Window,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            window_size: 1024,
            hop_size: 256,
            sample_rate: 22050,
            window: Window::Hann,
        }
    }
}

impl StftParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 != 0 {
            return Err(Error::param(format!(
                "window_size must be positive and even, got {}",
                self.window_size
            )));
        }
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return Err(Error::param(format!(
                "hop_size must be in 1..={}, got {}",
                self.window_size, self.hop_size
            )));
        }
        if self.window_size % self.hop_size != 0 {
            return Err(Error::param(format!(
                "window_size {} is not a multiple of hop_size {}",
                self.window_size, self.hop_size
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::param("sample_rate must be positive"));
        }
        Ok(())
    }

    /// Number of one-sided frequency bins.
    pub fn num_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Frame count produced for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        (len + self.window_size).div_ceil(self.hop_size)
    }

    /// Sum of the analysis window, the DFT gain for a constant signal.
    pub fn window_sum(&self) -> f64 {
        self.window.coefficients(self.window_size).iter().sum()
    }
}

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::param(format!("non-finite sample at index {i}")));
        }
        if sample_rate == 0 {
            return Err(Error::param("sample_rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub(crate) fn check_compatible(&self, other: &Waveform) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::param(format!(
                "sample rate mismatch: {} vs {}",
                self.sample_rate, other.sample_rate
            )));
        }
        if self.len() != other.len() {
            return Err(Error::param(format!(
                "length mismatch: {} vs {} samples",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

/// Complex spectrogram, shape `(num_frames, window_size / 2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: Array2<Complex64>,
    pub params: StftParams,
}

impl Spectrogram {
    pub fn new(bins: Array2<Complex64>, params: StftParams) -> Result<Self> {
        params.validate()?;
        if bins.ncols() != params.num_bins() {
            return Err(Error::param(format!(
                "spectrogram has {} bins, window {} implies {}",
                bins.ncols(),
                params.window_size,
                params.num_bins()
            )));
        }
        if bins.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::param("spectrogram contains non-finite bins"));
        }
        Ok(Self { bins, params })
    }

    pub fn zeros(num_frames: usize, params: StftParams) -> Self {
        Self {
            bins: Array2::zeros((num_frames, params.num_bins())),
            params,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.bins.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.bins.ncols()
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.num_frames(), self.num_bins()]
    }

    pub(crate) fn check_same_shape(&self, other: &Spectrogram) -> Result<()> {
        check_shape(&self.shape(), &other.shape())
    }

    /// Rebuilds a spectrogram from polar components.
    pub fn from_polar(
        magnitude: &Array2<f64>,
        phase: &Array2<f64>,
        params: StftParams,
    ) -> Result<Self> {
        check_shape(magnitude.shape(), phase.shape())?;
        let bins = ndarray::Zip::from(magnitude)
            .and(phase)
            .map_collect(|&m, &p| Complex64::from_polar(m, p));
        Spectrogram::new(bins, params)
    }
}

/// Elementwise modulus.
pub fn magnitude(spec: &Spectrogram) -> Array2<f64> {
    spec.bins.mapv(|c| c.norm())
}

/// Elementwise argument in `(-pi, pi]`; zero bins have phase 0.
pub fn phase(spec: &Spectrogram) -> Array2<f64> {
    spec.bins.mapv(bin_phase)
}

pub(crate) fn bin_phase(c: Complex64) -> f64 {
    if c.re == 0.0 && c.im == 0.0 {
        0.0
    } else if c.im == 0.0 && c.re < 0.0 {
        // atan2(-0.0, x < 0) is -pi, outside the half-open range.
        PI
    } else {
        c.im.atan2(c.re)
    }
}

/// Forward STFT of `wave`.
pub fn stft(wave: &Waveform, params: &StftParams) -> Result<Spectrogram> {
    params.validate()?;
    if wave.sample_rate != params.sample_rate {
        return Err(Error::param(format!(
            "waveform sample rate {} does not match STFT sample rate {}",
            wave.sample_rate, params.sample_rate
        )));
    }
    if wave.is_empty() {
        return Err(Error::param("cannot transform an empty waveform"));
    }
    let n = params.window_size;
    let hop = params.hop_size;
    let frames = params.num_frames(wave.len());
    let mut padded = vec![0.0; (frames - 1) * hop + n];
    padded[n / 2..n / 2 + wave.len()].copy_from_slice(&wave.samples);

    let window = params.window.coefficients(n);
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n);
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();
    let mut bins = Array2::zeros((frames, params.num_bins()));
    for (t, mut row) in bins.outer_iter_mut().enumerate() {
        let frame = &padded[t * hop..t * hop + n];
        for ((dst, &x), &w) in input.iter_mut().zip(frame).zip(&window) {
            *dst = x * w;
        }
        fft.process_with_scratch(&mut input, &mut output, &mut scratch)
            .expect("buffer sizes come from the planner");
        for (dst, &src) in row.iter_mut().zip(&output) {
            *dst = src;
        }
    }
    Ok(Spectrogram {
        bins,
        params: *params,
    })
}

/// Inverse STFT returning exactly `out_length` samples.
pub fn istft(spec: &Spectrogram, out_length: usize) -> Result<Waveform> {
    let ola = OverlapAdd::for_signal(&spec.params, spec.num_frames(), out_length)?;
    let samples = ola.apply(spec.bins.view())?;
    Ok(Waveform {
        samples,
        sample_rate: spec.params.sample_rate,
    })
}

/// Linear overlap-add synthesis operator with its adjoint.
///
/// Maps a block of `num_frames` complex frames to a real signal. Two
/// normalizations exist: exact per-sample squared-window normalization with
/// a centered crop (the true inverse STFT), and a constant normalization
/// over the uncropped block, used to reconstruct training patches where
/// only a slice of the frames is available.
#[derive(Debug, Clone)]
pub struct OverlapAdd {
    params: StftParams,
    num_frames: usize,
    window: Vec<f64>,
    /// Per padded-sample factor applied after overlap-add.
    gain: Vec<f64>,
    offset: usize,
    out_length: usize,
}

impl OverlapAdd {
    pub fn for_signal(params: &StftParams, num_frames: usize, out_length: usize) -> Result<Self> {
        params.validate()?;
        if num_frames == 0 {
            return Err(Error::param("spectrogram has no frames"));
        }
        let n = params.window_size;
        let implied = num_frames * params.hop_size - n;
        if out_length == 0 || out_length.abs_diff(implied) > n {
            return Err(Error::param(format!(
                "output length {out_length} inconsistent with {num_frames} frames \
                 (implied length {implied})"
            )));
        }
        let window = params.window.coefficients(n);
        let buf_len = (num_frames - 1) * params.hop_size + n;
        let mut norm = vec![0.0; buf_len];
        for t in 0..num_frames {
            for (m, w) in window.iter().enumerate() {
                norm[t * params.hop_size + m] += w * w;
            }
        }
        let gain = norm
            .into_iter()
            .map(|s| if s > 1e-10 { 1.0 / s } else { 0.0 })
            .collect();
        Ok(Self {
            params: *params,
            num_frames,
            window,
            gain,
            offset: n / 2,
            out_length,
        })
    }

    /// Block synthesis with the steady-state normalization, uncropped.
    pub fn for_block(params: &StftParams, num_frames: usize) -> Result<Self> {
        params.validate()?;
        if num_frames == 0 {
            return Err(Error::param("block has no frames"));
        }
        let n = params.window_size;
        let window = params.window.coefficients(n);
        let steady: f64 = (0..params.hop_size)
            .map(|phase| {
                window
                    .iter()
                    .skip(phase)
                    .step_by(params.hop_size)
                    .map(|w| w * w)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / params.hop_size as f64;
        let buf_len = (num_frames - 1) * params.hop_size + n;
        Ok(Self {
            params: *params,
            num_frames,
            window,
            gain: vec![1.0 / steady; buf_len],
            offset: 0,
            out_length: buf_len,
        })
    }

    pub fn out_length(&self) -> usize {
        self.out_length
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn apply(&self, frames: ArrayView2<Complex64>) -> Result<Vec<f64>> {
        check_shape(&[self.num_frames, self.params.num_bins()], frames.shape())?;
        let n = self.params.window_size;
        let hop = self.params.hop_size;
        let ifft = RealFftPlanner::<f64>::new().plan_fft_inverse(n);
        let mut spectrum = ifft.make_input_vec();
        let mut time = ifft.make_output_vec();
        let mut scratch = ifft.make_scratch_vec();
        let mut buf = vec![0.0; self.gain.len()];
        let scale = 1.0 / n as f64;
        for (t, row) in frames.outer_iter().enumerate() {
            for (dst, &src) in spectrum.iter_mut().zip(row.iter()) {
                *dst = src;
            }
            // The inverse real transform only reads the real part of DC and Nyquist.
            spectrum[0].im = 0.0;
            let last = spectrum.len() - 1;
            spectrum[last].im = 0.0;
            ifft.process_with_scratch(&mut spectrum, &mut time, &mut scratch)
                .expect("buffer sizes come from the planner");
            let dst = &mut buf[t * hop..t * hop + n];
            for ((d, &x), &w) in dst.iter_mut().zip(&time).zip(&self.window) {
                *d += x * w * scale;
            }
        }
        Ok((0..self.out_length)
            .map(|i| {
                let p = i + self.offset;
                if p < buf.len() {
                    buf[p] * self.gain[p]
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Adjoint map: a gradient on the output samples to a gradient on the
    /// frames, written as `dL/dRe + i dL/dIm` per bin.
    pub fn adjoint(&self, grad: &[f64]) -> Result<Array2<Complex64>> {
        if grad.len() != self.out_length {
            return Err(Error::param(format!(
                "gradient has {} samples, operator produces {}",
                grad.len(),
                self.out_length
            )));
        }
        let n = self.params.window_size;
        let hop = self.params.hop_size;
        let mut buf = vec![0.0; self.gain.len()];
        for (i, &g) in grad.iter().enumerate() {
            let p = i + self.offset;
            if p < buf.len() {
                buf[p] = g * self.gain[p];
            }
        }
        let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n);
        let mut input = fft.make_input_vec();
        let mut output = fft.make_output_vec();
        let mut scratch = fft.make_scratch_vec();
        let bins = self.params.num_bins();
        let mut out = Array2::zeros((self.num_frames, bins));
        for (t, mut row) in out.outer_iter_mut().enumerate() {
            let src = &buf[t * hop..t * hop + n];
            for ((d, &g), &w) in input.iter_mut().zip(src).zip(&self.window) {
                *d = g * w;
            }
            fft.process_with_scratch(&mut input, &mut output, &mut scratch)
                .expect("buffer sizes come from the planner");
            for (k, (dst, &src)) in row.iter_mut().zip(&output).enumerate() {
                let weight = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 } / n as f64;
                *dst = src * weight;
            }
            row[0].im = 0.0;
            row[bins - 1].im = 0.0;
        }
        Ok(out)
    }
}
