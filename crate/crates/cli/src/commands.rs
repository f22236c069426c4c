use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cmask::audio::{load_wav, read_wav, write_wav};
use cmask::data::{find_tracks, synth_stems, Source, StemSet};
use cmask::masking::oracle_estimate;
use cmask::metrics::EvalReport;
use cmask::model::{separate_all, SeparationModel};
use cmask::nn::UNetConfig;
use cmask::stft::{stft, Window};
use cmask::train::{train, validation_track, TrainConfig, TrainEvent};
use cmask::{Error, Result, StftParams, Waveform};

use crate::{
    dump, Cli, Command, DumpMaskArgs, EvaluateArgs, GlobalArgs, OracleArgs, SeparateArgs,
    SynthArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Train(a) => cmd_train(&g, a),
        Command::Separate(a) => cmd_separate(a),
        Command::Oracle(a) => cmd_oracle(&g, a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::DumpMask(a) => cmd_dump_mask(a),
        Command::Synth(a) => cmd_synth(&g, a),
    }
}

fn stft_params(g: &GlobalArgs) -> Result<StftParams> {
    let p = StftParams {
        window_size: g.window,
        hop_size: g.hop,
        sample_rate: g.sample_rate,
        window: Window::Hann,
    };
    p.validate()?;
    Ok(p)
}

/// Loads a WAV at `rate`, warning when it had to be resampled.
fn load_at(path: &Path, rate: u32) -> Result<Waveform> {
    let (wave, resampled) = load_wav(path, rate)?;
    if resampled {
        eprintln!("warning: {} resampled to {rate} Hz", path.display());
    }
    Ok(wave)
}

fn unet_config(a: &TrainArgs, seed: u64) -> Result<UNetConfig> {
    let defaults = UNetConfig::default().channels;
    let channels = match (&a.channels, a.depth) {
        (Some(c), Some(d)) if c.len() != d => {
            return Err(Error::Param(format!(
                "--depth {d} but --channels lists {} layers",
                c.len()
            )))
        }
        (Some(c), _) => c.clone(),
        (None, Some(d)) => (0..d)
            .map(|i| {
                defaults
                    .get(i)
                    .copied()
                    .unwrap_or(defaults[defaults.len() - 1] << (i + 1 - defaults.len()))
            })
            .collect(),
        (None, None) => defaults,
    };
    let mut cfg = UNetConfig::new(channels, 2, seed);
    cfg.dropout_rate = a.dropout;
    Ok(cfg)
}

fn cmd_train(g: &GlobalArgs, a: TrainArgs) -> Result<()> {
    let stft = stft_params(g)?;
    let unet = unet_config(&a, g.seed)?;
    let tracks = find_tracks(&a.data)?
        .iter()
        .map(|dir| StemSet::load_dir(dir, stft.sample_rate))
        .collect::<Result<Vec<_>>>()?;
    let config = TrainConfig {
        source: a.source,
        mask: a.mask,
        loss: a.loss.unwrap_or(a.mask.default_loss()),
        stft,
        unet,
        steps: a.steps,
        lr: a.lr,
        augmentations: a.augmentations,
        validate_every: a.validate_every,
        seed: g.seed,
        ..TrainConfig::default()
    };
    let validation = if a.steps > 0 {
        Some(validation_track(g.seed, stft.sample_rate)?)
    } else {
        None
    };

    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let val_path = a.out.with_extension("val.csv");
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "step,loss,wall_ms")?;
    let mut val_log = BufWriter::new(File::create(&val_path)?);
    writeln!(val_log, "step,sdr_db,si_sdr_db")?;
    let mut last_loss = None;
    let model = train(config, tracks, validation.as_ref(), |event| {
        match *event {
            TrainEvent::Step {
                step,
                loss,
                wall_ms,
            } => {
                writeln!(log, "{step},{loss},{wall_ms}")?;
                last_loss = Some(loss);
            }
            TrainEvent::Validation {
                step,
                sdr_db,
                si_sdr_db,
            } => {
                writeln!(val_log, "{step},{sdr_db},{si_sdr_db}")?;
                eprintln!("step {step}: validation SDR {sdr_db:.2} dB, SI-SDR {si_sdr_db:.2} dB");
            }
        }
        Ok(())
    })?;
    log.flush()?;
    val_log.flush()?;
    model.save(&a.out)?;
    match last_loss {
        Some(loss) => println!("steps={}\tfinal_loss={loss}", model.step),
        None => println!("steps=0"),
    }
    Ok(())
}

fn manifest_models(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Param(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

fn cmd_separate(a: SeparateArgs) -> Result<()> {
    let mut paths = a.models.clone();
    if let Some(m) = &a.manifest {
        paths.extend(manifest_models(m)?);
    }
    if paths.is_empty() {
        return Err(Error::Param("give --model or --manifest".into()));
    }
    let mut models = paths
        .iter()
        .map(|p| SeparationModel::load(p))
        .collect::<Result<Vec<_>>>()?;
    let mixture = read_wav(&a.input)?;
    for m in &models {
        if m.stft.sample_rate != mixture.sample_rate {
            eprintln!(
                "warning: input is {} Hz, {} model expects {} Hz; resampling",
                mixture.sample_rate, m.source, m.stft.sample_rate
            );
        }
    }
    let outputs = separate_all(&mut models, &mixture)?;
    std::fs::create_dir_all(&a.outdir)?;
    for (source, wave) in &outputs {
        let path = a.outdir.join(format!("{source}.wav"));
        write_wav(&path, wave)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn print_report(r: &EvalReport, json: bool) {
    if json {
        let v = serde_json::json!({
            "name": r.name,
            "sdr_db": r.sdr_db,
            "si_sdr_db": r.si_sdr_db,
            "num_samples": r.num_samples,
        });
        println!("{v}");
    } else {
        println!(
            "{}\tSDR_dB={:.4}\tSI-SDR_dB={:.4}",
            r.name, r.sdr_db, r.si_sdr_db
        );
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_oracle(g: &GlobalArgs, a: OracleArgs) -> Result<()> {
    let params = stft_params(g)?;
    let mixture = load_at(&a.mixture, params.sample_rate)?;
    let source = load_at(&a.source, params.sample_rate)?;
    if mixture.len() != source.len() {
        return Err(Error::Param(format!(
            "mixture has {} samples, source {}",
            mixture.len(),
            source.len()
        )));
    }
    let est = oracle_estimate(&mixture, &source, a.mask, &params)?;
    if let Some(dir) = a.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_wav(&a.out, &est)?;
    print_report(
        &EvalReport::compute(&file_stem(&a.source), &source, &est)?,
        a.json,
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    if a.references.len() != a.estimates.len() {
        return Err(Error::Param(format!(
            "{} references but {} estimates",
            a.references.len(),
            a.estimates.len()
        )));
    }
    if !a.names.is_empty() && a.names.len() != a.estimates.len() {
        return Err(Error::Param("give one --name per estimate, or none".into()));
    }
    for (i, (r, e)) in a.references.iter().zip(&a.estimates).enumerate() {
        let reference = read_wav(r)?;
        let estimate = read_wav(e)?;
        if reference.sample_rate != estimate.sample_rate {
            return Err(Error::Param(format!(
                "{} is {} Hz but {} is {} Hz",
                r.display(),
                reference.sample_rate,
                e.display(),
                estimate.sample_rate
            )));
        }
        let name = a.names.get(i).cloned().unwrap_or_else(|| file_stem(e));
        print_report(&EvalReport::compute(&name, &reference, &estimate)?, a.json);
    }
    Ok(())
}

fn cmd_dump_mask(a: DumpMaskArgs) -> Result<()> {
    let mut model = SeparationModel::load(&a.model)?;
    let input = load_at(&a.input, model.stft.sample_rate)?;
    let mask = model.predict_mask(&stft(&input, &model.stft)?)?;
    for path in dump::write_mask(&mask, model.source.name(), &a.outdir, a.format)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_synth(g: &GlobalArgs, a: SynthArgs) -> Result<()> {
    let set = synth_stems(g.seed, a.duration, g.sample_rate)?;
    std::fs::create_dir_all(&a.outdir)?;
    for source in Source::ALL {
        write_wav(&a.outdir.join(format!("{source}.wav")), set.stem(source))?;
    }
    write_wav(&a.outdir.join("mixture.wav"), set.mixture())?;
    Ok(())
}
