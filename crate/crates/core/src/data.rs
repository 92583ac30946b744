//! Synthetic separation datasets.
//!
//! Two families are provided: i.i.d. Gaussian sources that match
//! [`GaussianOraclePrior`](crate::denoise::GaussianOraclePrior), and a
//! tonal-versus-noise pair whose sources occupy disjoint frequency bands.
//! Every instance is a pure function of `(seed, index)`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{write_wav, Complex64};
use crate::error::{Error, Result};
use crate::mixalg::StackedSignal;
use crate::rng::{stream_rng, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Gaussian,
    TonalVsNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub num_sources: usize,
    pub num_samples: usize,
    pub count: usize,
    pub seed: u64,
    pub snr_range_db: [f64; 2],
    /// Per-sample standard deviation of Gaussian sources.
    pub sigma_s: f64,
    pub sample_rate: u32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::TonalVsNoise,
            num_sources: 2,
            num_samples: 16_000,
            count: 1000,
            seed: 0,
            snr_range_db: [-5.0, 5.0],
            sigma_s: 0.1,
            sample_rate: 8000,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.snr_range_db;
        if !(lo <= hi) {
            return Err(Error::InvalidParam(format!("snr range [{lo}, {hi}] is empty")));
        }
        if self.count == 0 || self.num_samples == 0 {
            return Err(Error::InvalidParam("dataset needs count >= 1 and num_samples >= 1".into()));
        }
        if self.num_sources < 2 {
            return Err(Error::InvalidParam("dataset needs at least 2 sources".into()));
        }
        if self.kind == DatasetKind::TonalVsNoise && self.num_sources != 2 {
            return Err(Error::InvalidParam("tonal-vs-noise data has exactly 2 sources".into()));
        }
        if !(self.sigma_s > 0.0) {
            return Err(Error::InvalidParam("sigma_s must be positive".into()));
        }
        Ok(())
    }
}

/// One generated instance.
#[derive(Clone, Debug)]
pub struct SourcePair {
    pub sources: StackedSignal,
    pub mixture: Vec<f64>,
    /// Source-0 to source-1 energy ratio in dB, when the generator imposes one.
    pub snr_db: Option<f64>,
}

pub fn generate(spec: &DatasetSpec, index: u64) -> Result<SourcePair> {
    match spec.kind {
        DatasetKind::Gaussian => gen_gaussian_pair(spec, index),
        DatasetKind::TonalVsNoise => gen_tonal_vs_noise_pair(spec, index),
    }
}

pub fn gen_gaussian_pair(spec: &DatasetSpec, index: u64) -> Result<SourcePair> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Purpose::Dataset, index);
    let n = spec.num_sources * spec.num_samples;
    let data = (0..n)
        .map(|_| spec.sigma_s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let sources = StackedSignal::new(spec.num_sources, spec.num_samples, data)?;
    let mixture = sources.row_sum();
    Ok(SourcePair {
        sources,
        mixture,
        snr_db: None,
    })
}

const TONE_BAND_HZ: (f64, f64) = (100.0, 800.0);
const NOISE_BAND_HZ: (f64, f64) = (1200.0, 3600.0);
const TONE_RMS: f64 = 0.1;

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Gaussian noise restricted to `band` by zeroing FFT bins outside it.
fn band_limited_noise(rng: &mut impl Rng, len: usize, sample_rate: f64, band: (f64, f64)) -> Vec<f64> {
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut buf: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let mut spec = fwd.make_output_vec();
    fwd.process(&mut buf, &mut spec).expect("sizes from plan");
    let nbins = spec.len();
    for (k, z) in spec.iter_mut().enumerate() {
        let f = k as f64 * sample_rate / len as f64;
        if f < band.0 || f > band.1 {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    spec[0].im = 0.0;
    if len.is_multiple_of(2) {
        spec[nbins - 1].im = 0.0;
    }
    let mut out = inv.make_output_vec();
    inv.process(&mut spec, &mut out).expect("sizes from plan");
    out
}

/// Source 0: three sinusoids in 100-800 Hz under a slow amplitude envelope.
/// Source 1: noise band-limited to 1.2-3.6 kHz, rescaled to a random SNR.
pub fn gen_tonal_vs_noise_pair(spec: &DatasetSpec, index: u64) -> Result<SourcePair> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Purpose::Dataset, index);
    let m = spec.num_samples;
    let sr = spec.sample_rate as f64;

    let mut tone = vec![0.0; m];
    for _ in 0..3 {
        let freq = rng.gen_range(TONE_BAND_HZ.0..TONE_BAND_HZ.1);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let amp = rng.gen_range(0.5..1.0);
        for (n, v) in tone.iter_mut().enumerate() {
            *v += amp * (2.0 * PI * freq * n as f64 / sr + phase).sin();
        }
    }
    let env_rate = rng.gen_range(0.5..2.0);
    let env_phase = rng.gen_range(0.0..2.0 * PI);
    for (n, v) in tone.iter_mut().enumerate() {
        *v *= 0.7 + 0.3 * (2.0 * PI * env_rate * n as f64 / sr + env_phase).sin();
    }
    let rms = (energy(&tone) / m as f64).sqrt();
    tone.iter_mut().for_each(|v| *v *= TONE_RMS / rms);

    let [lo, hi] = spec.snr_range_db;
    let snr_db = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let mut noise = band_limited_noise(&mut rng, m, sr, NOISE_BAND_HZ);
    let target = energy(&tone) / 10f64.powf(snr_db / 10.0);
    let gain = (target / energy(&noise)).sqrt();
    noise.iter_mut().for_each(|v| *v *= gain);

    let mixture = tone.iter().zip(&noise).map(|(a, b)| a + b).collect();
    let sources = StackedSignal::new(2, m, [tone, noise].concat())?;
    Ok(SourcePair {
        sources,
        mixture,
        snr_db: Some(snr_db),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub s_paths: Vec<PathBuf>,
    pub mix_path: PathBuf,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub instances: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `s{k}_{id}.wav` per source, `mix_{id}.wav`, and `manifest.json`
/// (paths relative to `dir`).
pub fn make_manifest(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut instances = Vec::with_capacity(spec.count);
    for id in 0..spec.count as u64 {
        let pair = generate(spec, id)?;
        let mut s_paths = Vec::new();
        for (k, row) in pair.sources.rows().enumerate() {
            let name = PathBuf::from(format!("s{k}_{id:05}.wav"));
            write_wav(dir.join(&name), row, spec.sample_rate)?;
            s_paths.push(name);
        }
        let mix_path = PathBuf::from(format!("mix_{id:05}.wav"));
        write_wav(dir.join(&mix_path), &pair.mixture, spec.sample_rate)?;
        instances.push(ManifestEntry {
            id,
            s_paths,
            mix_path,
            snr_db: pair.snr_db,
            seed: spec.seed,
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        instances,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
