use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 510,
            hop: 128,
            sample_rate: 8000,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.hop == 0 || self.hop > self.n_fft / 2 {
            return Err(Error::InvalidParam(format!(
                "need n_fft >= 2 and 0 < hop <= n_fft/2, got n_fft={} hop={}",
                self.n_fft, self.hop
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidParam("sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for a signal of `len` samples (centered framing).
    pub fn num_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.n_fft as f64
    }

    /// Square root of the periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.n_fft as f64;
        (0..self.n_fft)
            .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).sqrt())
            .collect()
    }
}

/// Complex time-frequency data, `channels x frames x bins`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn zeros(channels: usize, frames: usize, bins: usize) -> Self {
        Self {
            channels,
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); channels * frames * bins],
        }
    }

    pub fn channel(&self, c: usize) -> &[Complex64] {
        let n = self.frames * self.bins;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn frame(&self, c: usize, f: usize) -> &[Complex64] {
        let start = (c * self.frames + f) * self.bins;
        &self.data[start..start + self.bins]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Reusable STFT analysis/synthesis pair with zero-padded centered frames and
/// a square-root Hann window on both sides. Synthesis divides by the summed
/// squared window, so reconstruction is exact for any hop up to `n_fft / 2`.
#[derive(Clone)]
pub struct StftPlan {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("cfg", &self.cfg).finish()
    }
}

impl StftPlan {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            window: cfg.window(),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    fn pad(&self) -> usize {
        self.cfg.n_fft / 2
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < self.cfg.n_fft {
            return Err(Error::SignalTooShort {
                len,
                n_fft: self.cfg.n_fft,
            });
        }
        Ok(())
    }

    /// Summed squared window over the padded signal.
    fn envelope(&self, len: usize) -> Vec<f64> {
        let frames = self.cfg.num_frames(len);
        let mut env = vec![0.0; len + 2 * self.pad()];
        for f in 0..frames {
            let start = f * self.cfg.hop;
            for (j, w) in self.window.iter().enumerate() {
                if let Some(e) = env.get_mut(start + j) {
                    *e += w * w;
                }
            }
        }
        env
    }

    /// Spectrum of one channel, `frames x bins`.
    pub fn analyze(&self, signal: &[f64]) -> Result<Vec<Complex64>> {
        self.check_len(signal.len())?;
        let n = self.cfg.n_fft;
        let pad = self.pad();
        let frames = self.cfg.num_frames(signal.len());
        let bins = self.cfg.num_bins();
        let mut padded = vec![0.0; signal.len() + 2 * pad];
        padded[pad..pad + signal.len()].copy_from_slice(signal);
        let mut buf = vec![0.0; n];
        let mut spectrum = vec![Complex64::new(0.0, 0.0); bins];
        let mut scratch = self.forward.make_scratch_vec();
        let mut out = Vec::with_capacity(frames * bins);
        for f in 0..frames {
            let start = f * self.cfg.hop;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = padded.get(start + j).copied().unwrap_or(0.0) * self.window[j];
            }
            self.forward
                .process_with_scratch(&mut buf, &mut spectrum, &mut scratch)
                .expect("buffer sizes come from the plan");
            out.extend_from_slice(&spectrum);
        }
        Ok(out)
    }

    fn irfft_frame(&self, spectrum: &[Complex64], spec_buf: &mut [Complex64], out: &mut [f64], scratch: &mut [Complex64]) {
        spec_buf.copy_from_slice(spectrum);
        spec_buf[0].im = 0.0;
        if self.cfg.n_fft.is_multiple_of(2) {
            spec_buf[self.cfg.num_bins() - 1].im = 0.0;
        }
        self.inverse
            .process_with_scratch(spec_buf, out, scratch)
            .expect("buffer sizes come from the plan");
    }

    /// Overlap-add synthesis of one channel back to `len` samples.
    pub fn synthesize(&self, frames_data: &[Complex64], len: usize) -> Result<Vec<f64>> {
        self.check_len(len)?;
        let n = self.cfg.n_fft;
        let bins = self.cfg.num_bins();
        let frames = self.cfg.num_frames(len);
        if frames_data.len() != frames * bins {
            return Err(Error::shape(
                format!("{frames}x{bins} coefficients"),
                format!("{} coefficients", frames_data.len()),
            ));
        }
        let pad = self.pad();
        let env = self.envelope(len);
        let mut acc = vec![0.0; len + 2 * pad];
        let mut spec_buf = self.inverse.make_input_vec();
        let mut buf = vec![0.0; n];
        let mut scratch = self.inverse.make_scratch_vec();
        let norm = 1.0 / n as f64;
        for f in 0..frames {
            self.irfft_frame(&frames_data[f * bins..(f + 1) * bins], &mut spec_buf, &mut buf, &mut scratch);
            let start = f * self.cfg.hop;
            for (j, v) in buf.iter().enumerate() {
                if let Some(a) = acc.get_mut(start + j) {
                    *a += v * norm * self.window[j];
                }
            }
        }
        Ok((0..len).map(|i| acc[pad + i] / env[pad + i]).collect())
    }

    /// Adjoint of [`synthesize`](Self::synthesize): maps a gradient on the
    /// output samples to a gradient on the real/imag parts of each coefficient
    /// (packed as `re + i·im`).
    pub fn synthesize_adjoint(&self, grad: &[f64]) -> Result<Vec<Complex64>> {
        let len = grad.len();
        self.check_len(len)?;
        let n = self.cfg.n_fft;
        let bins = self.cfg.num_bins();
        let frames = self.cfg.num_frames(len);
        let pad = self.pad();
        let env = self.envelope(len);
        let mut padded = vec![0.0; len + 2 * pad];
        for i in 0..len {
            padded[pad + i] = grad[i] / env[pad + i];
        }
        let mut buf = vec![0.0; n];
        let mut spectrum = vec![Complex64::new(0.0, 0.0); bins];
        let mut scratch = self.forward.make_scratch_vec();
        let nyquist = n.is_multiple_of(2).then_some(bins - 1);
        let mut out = Vec::with_capacity(frames * bins);
        for f in 0..frames {
            let start = f * self.cfg.hop;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = padded.get(start + j).copied().unwrap_or(0.0) * self.window[j];
            }
            self.forward
                .process_with_scratch(&mut buf, &mut spectrum, &mut scratch)
                .expect("buffer sizes come from the plan");
            for (k, z) in spectrum.iter().enumerate() {
                let edge = k == 0 || Some(k) == nyquist;
                let c = if edge { 1.0 } else { 2.0 } / n as f64;
                out.push(if edge { Complex64::new(c * z.re, 0.0) } else { z * c });
            }
        }
        Ok(out)
    }

    /// Multi-channel analysis; every channel must have the same length.
    pub fn stft(&self, channels: &[&[f64]]) -> Result<ComplexSpectrogram> {
        let len = channels.first().map_or(0, |c| c.len());
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::shape("channels of equal length", "ragged channels"));
        }
        self.check_len(len)?;
        let mut data = Vec::new();
        for c in channels {
            data.extend(self.analyze(c)?);
        }
        Ok(ComplexSpectrogram {
            channels: channels.len(),
            frames: self.cfg.num_frames(len),
            bins: self.cfg.num_bins(),
            data,
        })
    }

    pub fn istft(&self, spec: &ComplexSpectrogram, len: usize) -> Result<Vec<Vec<f64>>> {
        if spec.bins != self.cfg.num_bins() || spec.frames != self.cfg.num_frames(len) {
            return Err(Error::shape(
                format!("{} frames x {} bins", self.cfg.num_frames(len), self.cfg.num_bins()),
                format!("{} frames x {} bins", spec.frames, spec.bins),
            ));
        }
        (0..spec.channels)
            .map(|c| self.synthesize(spec.channel(c), len))
            .collect()
    }
}

/// One-shot multi-channel STFT.
pub fn stft(channels: &[&[f64]], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    StftPlan::new(*cfg)?.stft(channels)
}

/// One-shot inverse STFT back to `len` samples per channel.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig, len: usize) -> Result<Vec<Vec<f64>>> {
    StftPlan::new(*cfg)?.istft(spec, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{root_rng, standard_normals};

    fn max_abs(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn config_contract() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.num_bins(), 256);
        assert!(cfg.validate().is_ok());
        assert!(StftConfig { hop: 256, ..cfg }.validate().is_err());
        assert_eq!(StftConfig { n_fft: 9, hop: 3, ..cfg }.num_bins(), 5);
    }

    #[test]
    fn impulse_round_trip() {
        let plan = StftPlan::new(StftConfig::default()).unwrap();
        let mut x = vec![0.0; 2000];
        x[777] = 1.0;
        let spec = plan.analyze(&x).unwrap();
        let back = plan.synthesize(&spec, x.len()).unwrap();
        assert!(max_abs(&x, &back) < 1e-10);
    }

    #[test]
    fn sine_concentrates_and_round_trips() {
        let cfg = StftConfig::default();
        let plan = StftPlan::new(cfg).unwrap();
        let x: Vec<f64> = (0..8000).map(|i| (2.0 * PI * 1000.0 * i as f64 / 8000.0).sin()).collect();
        let spec = plan.analyze(&x).unwrap();
        let bins = cfg.num_bins();
        let mut energy = vec![0.0; bins];
        for f in 2..cfg.num_frames(x.len()) - 2 {
            for (k, z) in spec[f * bins..(f + 1) * bins].iter().enumerate() {
                energy[k] += z.norm_sqr();
            }
        }
        let peak = (0..bins).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap();
        let nearest = (1000.0 * cfg.n_fft as f64 / 8000.0).round() as usize;
        assert_eq!(peak, nearest);
        let back = plan.synthesize(&spec, x.len()).unwrap();
        assert!(max_abs(&x, &back) < 1e-7);
    }

    #[test]
    fn linearity() {
        let plan = StftPlan::new(StftConfig::default()).unwrap();
        let mut rng = root_rng(5);
        let a = standard_normals(&mut rng, 1500);
        let b = standard_normals(&mut rng, 1500);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(u, v)| 0.7 * u - 2.5 * v).collect();
        let (sa, sb, sm) = (plan.analyze(&a).unwrap(), plan.analyze(&b).unwrap(), plan.analyze(&mix).unwrap());
        for ((za, zb), zm) in sa.iter().zip(&sb).zip(&sm) {
            assert!((za * 0.7 - zb * 2.5 - zm).norm() < 1e-10);
        }
    }

    #[test]
    fn perfect_reconstruction_across_lengths() {
        let plan = StftPlan::new(StftConfig::default()).unwrap();
        let mut rng = root_rng(6);
        for len in [1000, 1001, 4097, 12_345, 20_000] {
            let x = standard_normals(&mut rng, len);
            let back = plan.synthesize(&plan.analyze(&x).unwrap(), len).unwrap();
            assert!(max_abs(&x, &back) < 1e-7, "len {len}");
        }
        let odd = StftPlan::new(StftConfig { n_fft: 255, hop: 64, sample_rate: 8000 }).unwrap();
        let x = standard_normals(&mut rng, 900);
        assert!(max_abs(&x, &odd.synthesize(&odd.analyze(&x).unwrap(), 900).unwrap()) < 1e-7);
    }

    #[test]
    fn rejects_short_signal() {
        let plan = StftPlan::new(StftConfig::default()).unwrap();
        assert!(matches!(plan.analyze(&[0.0; 100]), Err(Error::SignalTooShort { .. })));
    }

    #[test]
    fn adjoint_identity() {
        // <synthesize(X), g> == <X, adjoint(g)> with the real inner product on (re, im).
        let mut rng = root_rng(8);
        for cfg in [
            StftConfig::default(),
            StftConfig { n_fft: 63, hop: 16, sample_rate: 8000 },
        ] {
            let plan = StftPlan::new(cfg).unwrap();
            let len = 700;
            let n = cfg.num_frames(len) * cfg.num_bins();
            let re = standard_normals(&mut rng, n);
            let im = standard_normals(&mut rng, n);
            let spec: Vec<Complex64> = re.iter().zip(&im).map(|(&a, &b)| Complex64::new(a, b)).collect();
            let g = standard_normals(&mut rng, len);
            let lhs: f64 = plan.synthesize(&spec, len).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum();
            let adj = plan.synthesize_adjoint(&g).unwrap();
            let rhs: f64 = spec.iter().zip(&adj).map(|(x, a)| x.re * a.re + x.im * a.im).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}
