//! Patch-based training of one source's separator.

use std::collections::VecDeque;
use std::time::Instant;

use ndarray::{s, Array2};
use num_complex::Complex64;

use crate::data::{augment, AugmentSpec, ExampleOrder, Source, StemSet, BATCH_SIZE, PATCH_FRAMES};
use crate::error::{Error, Result};
use crate::loss::{LossKind, SpectralObjective, TRAIN_EPS};
use crate::metrics::{sdr_db, si_sdr_db};
use crate::model::{
    masked_loss, read_output, write_features, write_output_grad, MaskType, SeparationModel,
};
use crate::nn::{Adam, Graph, Mode, Tensor, UNetConfig};
use crate::stft::{stft, OverlapAdd, StftParams};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub source: Source,
    pub mask: MaskType,
    pub loss: LossKind,
    pub stft: StftParams,
    pub unet: UNetConfig,
    pub steps: usize,
    pub lr: f64,
    /// Augmented copies per track, in addition to the original.
    pub augmentations: usize,
    pub augment: AugmentSpec,
    /// Validate every this many steps (0: only after the last step).
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            source: Source::Vocals,
            mask: MaskType::Complex,
            loss: LossKind::Sdr,
            stft: StftParams::default(),
            unet: UNetConfig::default(),
            steps: 1000,
            lr: 1e-4,
            augmentations: 10,
            augment: AugmentSpec::training(),
            validate_every: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Step {
        step: usize,
        loss: f64,
        wall_ms: u128,
    },
    Validation {
        step: usize,
        sdr_db: f64,
        si_sdr_db: f64,
    },
}

/// SplitMix64 finalizer over two words, for deriving independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The held-out synthetic track used for validation during training.
pub fn validation_track(seed: u64, sample_rate: u32) -> Result<StemSet> {
    crate::data::synth_stems(mix_seed(seed, 0x76_61_6c), 3.0, sample_rate)
}

struct Patch {
    mixture: Array2<Complex64>,
    target: Array2<Complex64>,
    target_wave: Vec<f64>,
    synthesis: OverlapAdd,
}

pub struct Trainer {
    pub model: SeparationModel,
    config: TrainConfig,
    tracks: Vec<StemSet>,
    order: ExampleOrder,
    pending: VecDeque<Patch>,
    opt: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, tracks: Vec<StemSet>) -> Result<Self> {
        if tracks.is_empty() {
            return Err(Error::param("no training tracks"));
        }
        if let Some(t) = tracks
            .iter()
            .find(|t| t.sample_rate() != config.stft.sample_rate)
        {
            return Err(Error::param(format!(
                "track at {} Hz but STFT expects {} Hz",
                t.sample_rate(),
                config.stft.sample_rate
            )));
        }
        if config.source == Source::Other {
            return Err(Error::param("'other' is the residual and is not trained"));
        }
        if config.augmentations > 0 {
            config.augment.validate(config.stft.sample_rate)?;
        }
        let mut unet = config.unet.clone();
        unet.seed = config.seed;
        let model =
            SeparationModel::new(config.source, config.mask, config.loss, config.stft, unet)?;
        let order = ExampleOrder::new(
            tracks.len(),
            config.augmentations + 1,
            mix_seed(config.seed, 1),
        )?;
        Ok(Self {
            model,
            opt: Adam::new(config.lr)?,
            config,
            tracks,
            order,
            pending: VecDeque::new(),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn example_patches(&self, track: usize, variant: usize) -> Result<Vec<Patch>> {
        let stems = if variant == 0 {
            self.tracks[track].clone()
        } else {
            let seed = mix_seed(self.config.seed, ((track as u64) << 32) | variant as u64);
            augment(&self.tracks[track], &self.config.augment, seed)?
        };
        let params = &self.config.stft;
        let x = stft(stems.mixture(), params)?;
        let y = stft(stems.stem(self.config.source), params)?;
        let frames = x.num_frames();
        (0..frames)
            .step_by(PATCH_FRAMES)
            .map(|start| {
                let end = (start + PATCH_FRAMES).min(frames);
                let target = y.bins.slice(s![start..end, ..]).to_owned();
                let synthesis = OverlapAdd::for_block(params, end - start)?;
                Ok(Patch {
                    mixture: x.bins.slice(s![start..end, ..]).to_owned(),
                    target_wave: synthesis.apply(target.view())?,
                    target,
                    synthesis,
                })
            })
            .collect()
    }

    /// Fills a batch from the current epoch without wrapping into the next.
    fn next_batch(&mut self) -> Result<Vec<Patch>> {
        if self.pending.is_empty() {
            loop {
                let (track, variant) = self.order.next_example();
                let patches = self.example_patches(track, variant)?;
                self.pending.extend(patches);
                if self.pending.len() >= BATCH_SIZE || self.order.at_epoch_end() {
                    break;
                }
            }
        }
        let n = self.pending.len().min(BATCH_SIZE);
        Ok(self.pending.drain(..n).collect())
    }

    /// One optimizer step; returns the frame-weighted mean patch loss before
    /// the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.next_batch()?;
        let mask = self.model.mask;
        let ch = mask.channels();
        let (h, w) = (PATCH_FRAMES, self.model.padded_bins());
        let block = ch * h * w;
        let scale = self.model.input_scale();
        let mut input = vec![0f32; batch.len() * block];
        for (p, chunk) in batch.iter().zip(input.chunks_mut(block)) {
            write_features(p.mixture.view(), mask, scale, chunk, h, w);
        }
        let mut graph = Graph::new();
        let x = graph.leaf(Tensor::new(vec![batch.len(), ch, h, w], input)?);
        let fwd = self
            .model
            .net
            .forward(&mut graph, x, Mode::Train, self.step as u64)?;
        let out = graph.value(fwd.output).data();
        let mut seed = vec![0f32; out.len()];
        // Patches are weighted by their unpadded frame count.
        let mut total = 0.0;
        let inv_frames = 1.0 / batch.iter().map(|p| p.mixture.nrows()).sum::<usize>() as f64;
        for (i, p) in batch.iter().enumerate() {
            let (frames, bins) = p.mixture.dim();
            let raw = read_output(&out[i * block..(i + 1) * block], mask, frames, bins, h, w);
            let objective = SpectralObjective {
                kind: self.config.loss,
                synthesis: &p.synthesis,
                eps: TRAIN_EPS,
            };
            let (value, grad) = masked_loss(
                &objective,
                p.mixture.view(),
                p.target.view(),
                &p.target_wave,
                &raw,
            )?;
            let weight = frames as f64 * inv_frames;
            total += weight * value;
            write_output_grad(&grad, weight, &mut seed[i * block..(i + 1) * block], h, w);
        }
        graph.backward(fwd.output, seed)?;
        graph.check_finite()?;
        let grads: Vec<Vec<f32>> = fwd
            .params
            .iter()
            .map(|&v| {
                graph
                    .grad(v)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; graph.value(v).numel()])
            })
            .collect();
        drop(graph);
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let mut params = self.model.net.parameters_mut();
        self.opt.step(&mut params, &grad_refs)?;
        self.step += 1;
        self.model.step = self.step as u64;
        Ok(total)
    }

    /// SDR and SI-SDR of this model's source on `track`.
    pub fn validate(&mut self, track: &StemSet) -> Result<(f64, f64)> {
        let est = self.model.separate(track.mixture())?;
        let reference = track.stem(self.config.source);
        Ok((sdr_db(reference, &est)?, si_sdr_db(reference, &est)?))
    }
}

/// Trains for `config.steps` steps, reporting progress through `on_event`.
pub fn train(
    config: TrainConfig,
    tracks: Vec<StemSet>,
    validation: Option<&StemSet>,
    mut on_event: impl FnMut(&TrainEvent) -> Result<()>,
) -> Result<SeparationModel> {
    let steps = config.steps;
    let every = config.validate_every;
    let mut trainer = Trainer::new(config, tracks)?;
    let start = Instant::now();
    for step in 1..=steps {
        let loss = trainer.train_step()?;
        on_event(&TrainEvent::Step {
            step,
            loss,
            wall_ms: start.elapsed().as_millis(),
        })?;
        let due = step == steps || (every > 0 && step % every == 0);
        if let (true, Some(track)) = (due, validation) {
            let (sdr, si_sdr) = trainer.validate(track)?;
            on_event(&TrainEvent::Validation {
                step,
                sdr_db: sdr,
                si_sdr_db: si_sdr,
            })?;
        }
    }
    Ok(trainer.model)
}
