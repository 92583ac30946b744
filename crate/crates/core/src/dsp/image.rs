//! Spectrogram export as a binary PGM image plus a CSV of the raw values.

use std::fmt::Write as _;
use std::path::Path;

use realfft::num_complex::Complex64;

use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-10;

/// 8-bit greyscale P5 image: one column per frame, low frequencies at the
/// bottom, log-magnitude stretched to `[0, 255]`.
pub fn spectrogram_pgm(frames: usize, bins: usize, spec: &[Complex64]) -> Vec<u8> {
    let log: Vec<f64> = spec.iter().map(|z| (z.norm() + LOG_FLOOR).ln()).collect();
    let lo = log.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = log.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{frames} {bins}\n255\n").into_bytes();
    for row in 0..bins {
        let bin = bins - 1 - row;
        for f in 0..frames {
            let v = (log[f * bins + bin] - lo) / range * 255.0;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn spectrogram_csv(frames: usize, bins: usize, spec: &[Complex64]) -> String {
    let mut out = String::from("frame,bin,re,im,magnitude\n");
    for f in 0..frames {
        for b in 0..bins {
            let z = spec[f * bins + b];
            let _ = writeln!(out, "{f},{b},{},{},{}", z.re, z.im, z.norm());
        }
    }
    out
}

/// Writes `<stem>.pgm` and `<stem>.csv`.
pub fn write_spectrogram(stem: &Path, frames: usize, bins: usize, spec: &[Complex64]) -> Result<()> {
    let pgm = stem.with_extension("pgm");
    let csv = stem.with_extension("csv");
    std::fs::write(&pgm, spectrogram_pgm(frames, bins, spec)).map_err(|e| Error::io(&pgm, e))?;
    std::fs::write(&csv, spectrogram_csv(frames, bins, spec)).map_err(|e| Error::io(&csv, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let spec = vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.5, 0.0),
        ];
        let img = spectrogram_pgm(2, 2, &spec);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        assert_eq!(px.len(), 4);
        // bottom-left pixel is frame 0, bin 0: the loudest cell.
        assert_eq!(px[2], 255);
        assert_eq!((px[0], px[3]), (0, 0));
        let csv = spectrogram_csv(2, 2, &spec);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("frame,bin,re,im,magnitude\n0,0,1,0,1\n"));
    }
}
