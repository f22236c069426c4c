//! A trained separator: a U-Net plus the mask type and STFT settings it was
//! trained with. Inference runs on the whole spectrogram at once.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use num_complex::Complex64;

use crate::audio::{resample, resample_to};
use crate::data::{ChannelsMode, Source};
use crate::error::{Error, Result};
use crate::loss::{LossKind, SpectralObjective};
use crate::masking::{
    complex_mask_backward, complex_mask_from_output, real_mask_backward, real_mask_from_output,
    residual_other,
};
use crate::nn::{Checkpoint, Graph, Mode, Tensor, UNet, UNetConfig};
use crate::stft::{istft, stft, Spectrogram, StftParams, Window};
use crate::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskType {
    Real,
    #[default]
    Complex,
}

impl MaskType {
    pub fn channels_mode(self) -> ChannelsMode {
        match self {
            MaskType::Real => ChannelsMode::Magnitude,
            MaskType::Complex => ChannelsMode::Complex,
        }
    }

    pub fn channels(self) -> usize {
        self.channels_mode().channels()
    }

    /// Magnitude loss for real masks, SDR loss for complex masks.
    pub fn default_loss(self) -> LossKind {
        match self {
            MaskType::Real => LossKind::Mag,
            MaskType::Complex => LossKind::Sdr,
        }
    }
}

impl FromStr for MaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(MaskType::Real),
            "complex" => Ok(MaskType::Complex),
            other => Err(Error::param(format!(
                "unknown mask type '{other}' (expected real or complex)"
            ))),
        }
    }
}

impl fmt::Display for MaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskType::Real => "real",
            MaskType::Complex => "complex",
        })
    }
}

/// Raw network output `O` for one example, cropped to the spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub enum RawOutput {
    Real(Array2<f64>),
    Complex(Array2<Complex64>),
}

/// A mask produced from [`RawOutput`].
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    Real(Array2<f64>),
    Complex(Array2<Complex64>),
}

impl Mask {
    pub fn from_output(output: &RawOutput) -> Self {
        match output {
            RawOutput::Real(o) => Mask::Real(real_mask_from_output(o).values),
            RawOutput::Complex(o) => Mask::Complex(complex_mask_from_output(o).values),
        }
    }

    pub fn apply(&self, mixture: ArrayView2<Complex64>) -> Array2<Complex64> {
        match self {
            Mask::Real(m) => Zip::from(m).and(mixture).map_collect(|&m, &x| x * m),
            Mask::Complex(m) => Zip::from(m).and(mixture).map_collect(|&m, &x| m * x),
        }
    }

    /// Values as complex numbers (real masks have zero imaginary part).
    pub fn to_complex(&self) -> Array2<Complex64> {
        match self {
            Mask::Real(m) => m.mapv(|v| Complex64::new(v, 0.0)),
            Mask::Complex(m) => m.clone(),
        }
    }

    pub fn is_real(&self) -> bool {
        matches!(self, Mask::Real(_))
    }
}

/// Loss of one masked example and its gradient w.r.t. the raw output.
pub fn masked_loss(
    objective: &SpectralObjective,
    mixture: ArrayView2<Complex64>,
    target: ArrayView2<Complex64>,
    target_wave: &[f64],
    output: &RawOutput,
) -> Result<(f64, RawOutput)> {
    let mask = Mask::from_output(output);
    let estimate = mask.apply(mixture);
    let (value, grad) = objective.evaluate(target, target_wave, estimate.view())?;
    let mixture = mixture.to_owned();
    let grad_out = match output {
        RawOutput::Real(o) => RawOutput::Real(real_mask_backward(o, &mixture, &grad)?),
        RawOutput::Complex(o) => RawOutput::Complex(complex_mask_backward(o, &mixture, &grad)?),
    };
    Ok((value, grad_out))
}

/// Writes network input features for `bins` into one `(channels, h, w)`
/// block, zero padding beyond the spectrogram.
pub(crate) fn write_features(
    bins: ArrayView2<Complex64>,
    mask: MaskType,
    scale: f64,
    block: &mut [f32],
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for ((t, f), x) in bins.indexed_iter() {
        let at = t * w + f;
        match mask {
            MaskType::Real => block[at] = (x.norm() * scale) as f32,
            MaskType::Complex => {
                block[at] = (x.re * scale) as f32;
                block[plane + at] = (x.im * scale) as f32;
            }
        }
    }
}

/// Reads the raw output for one `(channels, h, w)` block, cropped to
/// `frames` by `bins`.
pub(crate) fn read_output(
    block: &[f32],
    mask: MaskType,
    frames: usize,
    bins: usize,
    h: usize,
    w: usize,
) -> RawOutput {
    let plane = h * w;
    match mask {
        MaskType::Real => RawOutput::Real(Array2::from_shape_fn((frames, bins), |(t, f)| {
            block[t * w + f] as f64
        })),
        MaskType::Complex => RawOutput::Complex(Array2::from_shape_fn((frames, bins), |(t, f)| {
            Complex64::new(block[t * w + f] as f64, block[plane + t * w + f] as f64)
        })),
    }
}

/// Writes the gradient on a cropped raw output into a padded block.
pub(crate) fn write_output_grad(
    grad: &RawOutput,
    scale: f64,
    block: &mut [f32],
    h: usize,
    w: usize,
) {
    let plane = h * w;
    match grad {
        RawOutput::Real(g) => {
            for ((t, f), v) in g.indexed_iter() {
                block[t * w + f] = (v * scale) as f32;
            }
        }
        RawOutput::Complex(g) => {
            for ((t, f), v) in g.indexed_iter() {
                block[t * w + f] = (v.re * scale) as f32;
                block[plane + t * w + f] = (v.im * scale) as f32;
            }
        }
    }
}

/// One source's separator.
#[derive(Debug, Clone)]
pub struct SeparationModel {
    pub net: UNet<f32>,
    pub source: Source,
    pub mask: MaskType,
    pub loss: LossKind,
    pub stft: StftParams,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl SeparationModel {
    /// Builds a fresh model. The U-Net's channel counts are set from the
    /// mask type.
    pub fn new(
        source: Source,
        mask: MaskType,
        loss: LossKind,
        stft: StftParams,
        mut unet: UNetConfig,
    ) -> Result<Self> {
        stft.validate()?;
        unet.in_channels = mask.channels();
        unet.out_channels = mask.channels();
        unet.validate()?;
        if stft.window_size % unet.divisor() != 0 {
            return Err(Error::param(format!(
                "window size {} (padded bin count) must be a multiple of {} for depth {}",
                stft.window_size,
                unet.divisor(),
                unet.depth
            )));
        }
        Ok(Self {
            net: UNet::new(unet)?,
            source,
            mask,
            loss,
            stft,
            step: 0,
        })
    }

    /// Bin axis length the network sees.
    pub fn padded_bins(&self) -> usize {
        self.stft.window_size
    }

    /// Features are spectrogram bins divided by the window sum, so a
    /// full-scale sinusoid maps to magnitudes near 0.5.
    pub fn input_scale(&self) -> f64 {
        1.0 / self.stft.window_sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let extra = [
            ("source", self.source.to_string()),
            ("mask", self.mask.to_string()),
            ("loss", self.loss.to_string()),
            ("window_size", self.stft.window_size.to_string()),
            ("hop_size", self.stft.hop_size.to_string()),
            ("sample_rate", self.stft.sample_rate.to_string()),
            ("step", self.step.to_string()),
        ]
        .map(|(k, v)| (k.to_string(), v));
        Checkpoint::from_model(&self.net, &extra)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        fn field<T: FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
            let v = ckpt
                .get(key)
                .ok_or_else(|| Error::format(format!("checkpoint config is missing '{key}'")))?;
            v.parse()
                .map_err(|_| Error::format(format!("bad checkpoint value '{v}' for '{key}'")))
        }
        let stft = StftParams {
            window_size: field(ckpt, "window_size")?,
            hop_size: field(ckpt, "hop_size")?,
            sample_rate: field(ckpt, "sample_rate")?,
            window: Window::Hann,
        };
        stft.validate()
            .map_err(|e| Error::format(format!("checkpoint STFT settings: {e}")))?;
        let mask: MaskType = field(ckpt, "mask")?;
        let net = ckpt.to_model::<f32>()?;
        if net.config().in_channels != mask.channels() {
            return Err(Error::format(format!(
                "{mask} mask needs {} network channels, checkpoint has {}",
                mask.channels(),
                net.config().in_channels
            )));
        }
        Ok(Self {
            net,
            source: field(ckpt, "source")?,
            mask,
            loss: field(ckpt, "loss")?,
            stft,
            step: field(ckpt, "step")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Predicts the mask for a whole spectrogram. Frames are zero padded to
    /// a multiple of the network's stride product and bins to the window
    /// size; batch norm uses its running statistics.
    pub fn predict_mask(&mut self, mixture: &Spectrogram) -> Result<Mask> {
        if mixture.params != self.stft {
            return Err(Error::param(
                "spectrogram STFT settings differ from the model's",
            ));
        }
        let [frames, bins] = mixture.shape();
        let div = self.net.config().divisor();
        let h = frames.div_ceil(div) * div;
        let w = self.padded_bins();
        let ch = self.mask.channels();
        let mut input = vec![0f32; ch * h * w];
        write_features(
            mixture.bins.view(),
            self.mask,
            self.input_scale(),
            &mut input,
            h,
            w,
        );
        let mut graph = Graph::new();
        let x = graph.leaf(Tensor::new(vec![1, ch, h, w], input)?);
        let out = self.net.forward(&mut graph, x, Mode::Eval, 0)?;
        graph.check_finite()?;
        let raw = read_output(
            graph.value(out.output).data(),
            self.mask,
            frames,
            bins,
            h,
            w,
        );
        Ok(Mask::from_output(&raw))
    }

    /// Estimates this model's source from a mixture of the same length.
    pub fn separate(&mut self, mixture: &Waveform) -> Result<Waveform> {
        let x = stft(mixture, &self.stft)?;
        let mask = self.predict_mask(&x)?;
        let est = Spectrogram::new(mask.apply(x.bins.view()), self.stft)?;
        istft(&est, mixture.len())
    }
}

impl SeparationModel {
    /// Like [`SeparationModel::separate`], but accepts any input rate and
    /// returns the estimate at the input's rate and length.
    pub fn separate_resampling(&mut self, mixture: &Waveform) -> Result<Waveform> {
        let rate = self.stft.sample_rate;
        if mixture.sample_rate == rate {
            return self.separate(mixture);
        }
        let est = self.separate(&resample_to(mixture, rate)?)?;
        let factor = mixture.sample_rate as f64 / rate as f64;
        Waveform::new(
            resample(&est.samples, factor, mixture.len()),
            mixture.sample_rate,
        )
    }
}

/// Runs every model and appends the residual "other" source, so the
/// outputs always sum to the mixture. Models at another sample rate see a
/// resampled mixture; their estimates are resampled back.
pub fn separate_all(
    models: &mut [SeparationModel],
    mixture: &Waveform,
) -> Result<Vec<(Source, Waveform)>> {
    let mut out = Vec::with_capacity(models.len() + 1);
    for m in models.iter_mut() {
        if m.source == Source::Other {
            return Err(Error::param(
                "'other' is the residual and cannot have its own model",
            ));
        }
        if out.iter().any(|(s, _)| *s == m.source) {
            return Err(Error::param(format!("two models for source {}", m.source)));
        }
        out.push((m.source, m.separate_resampling(mixture)?));
    }
    let estimates: Vec<_> = out.iter().map(|(_, w)| w.clone()).collect();
    out.push((Source::Other, residual_other(mixture, &estimates)?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::TRAIN_EPS;
    use crate::stft::OverlapAdd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(mask: MaskType) -> SeparationModel {
        SeparationModel::new(
            Source::Vocals,
            mask,
            mask.default_loss(),
            StftParams {
                window_size: 64,
                hop_size: 16,
                ..StftParams::default()
            },
            UNetConfig::new(vec![4, 8], 2, 1),
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_keeps_metadata() {
        let mut m = small(MaskType::Real);
        m.step = 12;
        let back = SeparationModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back.mask, MaskType::Real);
        assert_eq!(back.source, Source::Vocals);
        assert_eq!(back.loss, LossKind::Mag);
        assert_eq!(back.stft, m.stft);
        assert_eq!(back.step, 12);
        assert_eq!(back.net.config().in_channels, 1);
    }

    #[test]
    fn separation_keeps_length_and_silence() {
        for mask in [MaskType::Real, MaskType::Complex] {
            let mut m = small(mask);
            let silent = Waveform::zeros(1001, 22050);
            let out = m.separate(&silent).unwrap();
            assert_eq!(out.len(), 1001);
            assert!(out.samples.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn separate_all_conserves_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mix =
            Waveform::new((0..777).map(|_| rng.gen_range(-1.0..1.0)).collect(), 22050).unwrap();
        let mut a = small(MaskType::Complex);
        let mut b = small(MaskType::Real);
        b.source = Source::Bass;
        let outs = separate_all(&mut [a.clone(), b], &mix).unwrap();
        assert_eq!(outs.len(), 3);
        assert_eq!(outs[2].0, Source::Other);
        for i in 0..mix.len() {
            let sum: f64 = outs.iter().map(|(_, w)| w.samples[i]).sum();
            assert!((sum - mix.samples[i]).abs() < 1e-12);
        }
        assert!(separate_all(&mut [a.clone(), a.clone()], &mix).is_err());

        let mix_44 = Waveform::new(mix.samples.clone(), 44100).unwrap();
        let outs = separate_all(&mut [a.clone()], &mix_44).unwrap();
        assert_eq!(outs[0].1.len(), 777);
        assert_eq!(outs[0].1.sample_rate, 44100);
        for i in 0..mix.len() {
            let sum: f64 = outs.iter().map(|(_, w)| w.samples[i]).sum();
            assert!((sum - mix.samples[i]).abs() < 1e-12);
        }
        a.source = Source::Other;
        assert!(separate_all(&mut [a], &mix).is_err());
    }

    #[test]
    fn rejects_indivisible_window() {
        let r = SeparationModel::new(
            Source::Vocals,
            MaskType::Complex,
            LossKind::Sdr,
            StftParams {
                window_size: 48,
                hop_size: 12,
                ..StftParams::default()
            },
            UNetConfig::new(vec![4, 8, 8, 8, 8], 2, 1),
        );
        assert!(r.is_err());
    }

    #[test]
    fn masked_loss_gradient_matches_finite_differences() {
        let params = StftParams {
            window_size: 16,
            hop_size: 4,
            ..StftParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut c = || Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let (frames, bins) = (6, 9);
        let mix = Array2::from_shape_fn((frames, bins), |_| c());
        let target = Array2::from_shape_fn((frames, bins), |_| c());
        let raw = Array2::from_shape_fn((frames, bins), |_| c());
        let synthesis = OverlapAdd::for_block(&params, frames).unwrap();
        let target_wave = synthesis.apply(target.view()).unwrap();
        for kind in [LossKind::Mag, LossKind::Sdr, LossKind::SdrMag] {
            let obj = SpectralObjective {
                kind,
                synthesis: &synthesis,
                eps: TRAIN_EPS,
            };
            let eval = |o: &Array2<Complex64>| {
                masked_loss(
                    &obj,
                    mix.view(),
                    target.view(),
                    &target_wave,
                    &RawOutput::Complex(o.clone()),
                )
                .unwrap()
            };
            let RawOutput::Complex(grad) = eval(&raw).1 else {
                panic!("complex output expected")
            };
            let h = 1e-6;
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for idx in [(0, 0), (2, 3), (5, 8), (3, 4)] {
                for (part, unit) in [(0, Complex64::new(1.0, 0.0)), (1, Complex64::new(0.0, 1.0))] {
                    let mut p = raw.clone();
                    p[idx] += unit * h;
                    let mut m = raw.clone();
                    m[idx] -= unit * h;
                    let fd = (eval(&p).0 - eval(&m).0) / (2.0 * h);
                    let an = if part == 0 {
                        grad[idx].re
                    } else {
                        grad[idx].im
                    };
                    num += (fd - an).powi(2);
                    den += fd.powi(2).max(an.powi(2));
                }
            }
            assert!(
                num.sqrt() <= 1e-6 * den.sqrt().max(1e-3),
                "{kind}: {}",
                num.sqrt()
            );
        }
    }
}
