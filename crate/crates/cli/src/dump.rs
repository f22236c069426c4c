//! Mask export as binary PGM images or CSV tables.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cmask::model::Mask;
use cmask::{Error, Result};
use ndarray::Array2;
use num_complex::Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Pgm,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(Format::Pgm),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Param(format!(
                "unknown format '{other}' (expected pgm or csv)"
            ))),
        }
    }
}

/// `|M|` clamped to [0, 1] and scaled to 0..=255.
pub fn magnitude_raster(mask: &Array2<Complex64>) -> Array2<u8> {
    mask.mapv(|m| (m.norm().clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// `|arg M|` in [0, pi] scaled to 0..=255.
pub fn phase_raster(mask: &Array2<Complex64>) -> Array2<u8> {
    mask.mapv(|m| (m.arg().abs() / PI * 255.0).round().min(255.0) as u8)
}

/// Binary P5 image, one row per frame and one column per bin.
pub fn pgm(raster: &Array2<u8>) -> Vec<u8> {
    let (frames, bins) = raster.dim();
    let mut out = format!("P5\n{bins} {frames}\n255\n").into_bytes();
    out.extend(raster.iter());
    out
}

pub fn csv(values: &Array2<f64>) -> String {
    let mut out = String::from("frame,bin,value\n");
    for ((frame, bin), v) in values.indexed_iter() {
        let _ = writeln!(out, "{frame},{bin},{v}");
    }
    out
}

fn sidecar(source: &str, mask: &Mask, format: Format, frames: usize, bins: usize) -> String {
    let mut s = format!(
        "{source} mask, {} valued, {frames} frames x {bins} bins\n",
        if mask.is_real() { "real" } else { "complex" }
    );
    match format {
        Format::Pgm => s.push_str(
            "PGM layout: width = bins, height = frames. Row r is frame r (time runs \
             top to bottom); column c is bin c, so frequency ascends left to right.\n\
             Magnitude: |M| clamped to [0, 1], mapped linearly to 0..255.\n\
             Phase: |arg M| in [0, pi], mapped linearly to 0..255.\n",
        ),
        Format::Csv => s.push_str(
            "CSV rows: frame,bin,value. Magnitude file holds |M|; phase file holds \
             arg M in radians, in (-pi, pi].\n",
        ),
    }
    if mask.is_real() {
        s.push_str("Real masks never rotate phase: the phase file is all zeros.\n");
    }
    s
}

/// Writes `<source>_mask_mag`, `<source>_mask_phase` and a
/// `<source>_mask.txt` sidecar into `outdir`.
pub fn write_mask(
    mask: &Mask,
    source: &str,
    outdir: &Path,
    format: Format,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir)?;
    let values = mask.to_complex();
    let (frames, bins) = values.dim();
    let ext = match format {
        Format::Pgm => "pgm",
        Format::Csv => "csv",
    };
    let mag_path = outdir.join(format!("{source}_mask_mag.{ext}"));
    let phase_path = outdir.join(format!("{source}_mask_phase.{ext}"));
    match format {
        Format::Pgm => {
            std::fs::write(&mag_path, pgm(&magnitude_raster(&values)))?;
            std::fs::write(&phase_path, pgm(&phase_raster(&values)))?;
        }
        Format::Csv => {
            std::fs::write(&mag_path, csv(&values.mapv(|m| m.norm())))?;
            let phase = if mask.is_real() {
                Array2::zeros((frames, bins))
            } else {
                values.mapv(|m| m.arg())
            };
            std::fs::write(&phase_path, csv(&phase))?;
        }
    }
    let note = outdir.join(format!("{source}_mask.txt"));
    std::fs::write(&note, sidecar(source, mask, format, frames, bins))?;
    Ok(vec![mag_path, phase_path, note])
}
