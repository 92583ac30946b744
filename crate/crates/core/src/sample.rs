//! Reverse-time samplers: the stochastic sampler (denoise, re-noise, then an
//! Euler step of the probability-flow ODE), the plain probability-flow ODE,
//! and an Euler–Maruyama discretisation of the reverse SDE.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoise::{Denoiser, DenoiserInput};
use crate::error::{Error, Result};
use crate::mixalg::{spectral_apply, stack_mixture, StackedSignal};
use crate::sde::{apply_lt, apply_sigma_inverse, standard_normal_like, SdeParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridShape {
    #[default]
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    #[default]
    Algorithm1,
    Ode,
    ReverseEm,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "algorithm1" => Ok(Self::Algorithm1),
            "ode" => Ok(Self::Ode),
            "reverse-em" => Ok(Self::ReverseEm),
            _ => Err(Error::Config(format!("unknown sampler `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub sampler: SamplerKind,
    pub n_steps: usize,
    pub grid: GridShape,
    pub mean_correct: bool,
    /// Use the first denoiser output of a step in place of the second one.
    pub reuse_denoise: bool,
    /// Number of sources to separate into; taken from the data section when
    /// loaded as part of a run configuration.
    #[serde(skip)]
    pub num_sources: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Algorithm1,
            n_steps: 29,
            grid: GridShape::Linear,
            mean_correct: true,
            reuse_denoise: false,
            num_sources: 2,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidParam("sampler needs at least one step".into()));
        }
        if self.num_sources < 2 {
            return Err(Error::InvalidParam("sampler needs at least 2 sources".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Consecutive `(t_i, t_{i+1})` pairs.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }
}

pub fn build_time_grid(p: &SdeParams, cfg: &SamplerConfig) -> Result<TimeGrid> {
    if cfg.n_steps == 0 {
        return Err(Error::InvalidParam("time grid needs at least one step".into()));
    }
    let n = cfg.n_steps;
    let span = p.t_max - p.t_eps;
    let times = match cfg.grid {
        GridShape::Linear => (0..=n)
            .map(|i| if i == n { p.t_eps } else { p.t_max - span * i as f64 / n as f64 })
            .collect(),
    };
    Ok(TimeGrid { times })
}

/// `A(t) (x - d) - γ P̄ x` for a denoised `d`.
fn drift_from(p: &SdeParams, x: &StackedSignal, d: &StackedSignal, t: f64) -> Result<StackedSignal> {
    let (a1, a2) = p.flow_coefficients(t)?;
    let diff = spectral_apply(&x.sub(d)?, a1, a2);
    let damp = spectral_apply(x, 0.0, -p.gamma);
    diff.add(&damp)
}

/// Probability-flow drift `−γP̄x + A x − A D(x)` with one denoiser call.
pub fn ode_drift(model: &impl Denoiser, x: &StackedSignal, t: f64, y: &[f64], p: &SdeParams) -> Result<StackedSignal> {
    p.flow_coefficients(t)?;
    let d = model.denoise(p, &DenoiserInput::new(x, t, y))?;
    drift_from(p, x, &d, t)
}

/// `s̄ + e^{γ t_eps} P̄ x`.
pub fn mean_correction(x: &StackedSignal, y: &[f64], p: &SdeParams) -> Result<StackedSignal> {
    let sbar = stack_mixture(y, x.num_sources())?;
    let resid = spectral_apply(x, 0.0, (p.gamma * p.t_eps).exp());
    sbar.add(&resid)
}

/// Where in a sampler step a recorded state was taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    PostNoise,
    PostDrift,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PostNoise => "post_noise",
            Stage::PostDrift => "post_drift",
        }
    }
}

/// Sink for intermediate sampler states.
pub trait Observer {
    fn record(&mut self, stage: Stage, t: f64, x: &StackedSignal);
}

impl Observer for () {
    fn record(&mut self, _: Stage, _: f64, _: &StackedSignal) {}
}

/// Keeps every recorded state for CSV export.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryRecorder {
    pub entries: Vec<(Stage, f64, StackedSignal)>,
}

impl Observer for TrajectoryRecorder {
    fn record(&mut self, stage: Stage, t: f64, x: &StackedSignal) {
        self.entries.push((stage, t, x.clone()));
    }
}

impl TrajectoryRecorder {
    /// `t,source_index,sample_index,value,stage`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,source_index,sample_index,value,stage\n");
        for (stage, t, x) in &self.entries {
            for (k, row) in x.rows().enumerate() {
                for (n, v) in row.iter().enumerate() {
                    out += &format!("{t},{k},{n},{v},{}\n", stage.as_str());
                }
            }
        }
        out
    }
}

fn check_inputs(y: &[f64], cfg: &SamplerConfig) -> Result<()> {
    cfg.validate()?;
    if y.is_empty() {
        return Err(Error::InvalidParam("empty mixture".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixture".into()));
    }
    Ok(())
}

/// `s̄ + L_T z`.
fn initial_state(y: &[f64], p: &SdeParams, k: usize, rng: &mut impl Rng) -> Result<StackedSignal> {
    let z = standard_normal_like(k, y.len(), rng);
    stack_mixture(y, k)?.add(&apply_lt(&z, p, p.t_max)?)
}

fn guard(x: &StackedSignal, stage: &'static str, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { stage, step })
    }
}

fn finish(x: StackedSignal, y: &[f64], p: &SdeParams, cfg: &SamplerConfig) -> Result<StackedSignal> {
    if cfg.mean_correct {
        mean_correction(&x, y, p)
    } else {
        Ok(x)
    }
}

pub fn stochastic_sample(
    model: &impl Denoiser,
    y: &[f64],
    p: &SdeParams,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<StackedSignal> {
    stochastic_sample_observed(model, y, p, cfg, rng, &mut ())
}

/// Per step: `x̂ = D(x, t_i) + n` with `n ~ N(0, Σ_{t_i})`, then
/// `x ← x̂ + (−γP̄x̂ + A x̂ − A D(x̂, t_i)) Δt`. Two denoiser calls per step
/// unless `reuse_denoise` is set.
pub fn stochastic_sample_observed(
    model: &impl Denoiser,
    y: &[f64],
    p: &SdeParams,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
    observer: &mut impl Observer,
) -> Result<StackedSignal> {
    check_inputs(y, cfg)?;
    let grid = build_time_grid(p, cfg)?;
    let k = cfg.num_sources;
    let mut x = initial_state(y, p, k, rng)?;
    for (i, (t, t_next)) in grid.steps().enumerate() {
        let d = model.denoise(p, &DenoiserInput::new(&x, t, y))?;
        let z = standard_normal_like(k, y.len(), rng);
        let x_hat = d.add(&apply_lt(&z, p, t)?)?;
        guard(&x_hat, "stochastic sampler", i)?;
        observer.record(Stage::PostNoise, t, &x_hat);
        let d_hat = if cfg.reuse_denoise {
            d
        } else {
            model.denoise(p, &DenoiserInput::new(&x_hat, t, y))?
        };
        let drift = drift_from(p, &x_hat, &d_hat, t)?;
        let dt = t_next - t;
        x = x_hat.zip_with(&drift, |a, b| a + b * dt)?;
        guard(&x, "stochastic sampler", i)?;
        observer.record(Stage::PostDrift, t_next, &x);
    }
    finish(x, y, p, cfg)
}

/// Euler integration of the probability-flow ODE from `s̄ + L_T z`.
pub fn ode_sample(
    model: &impl Denoiser,
    y: &[f64],
    p: &SdeParams,
    cfg: &SamplerConfig,
    rng_for_init: &mut impl Rng,
) -> Result<StackedSignal> {
    check_inputs(y, cfg)?;
    let grid = build_time_grid(p, cfg)?;
    let mut x = initial_state(y, p, cfg.num_sources, rng_for_init)?;
    for (i, (t, t_next)) in grid.steps().enumerate() {
        let drift = ode_drift(model, &x, t, y, p)?;
        let dt = t_next - t;
        x = x.zip_with(&drift, |a, b| a + b * dt)?;
        guard(&x, "ode sampler", i)?;
    }
    finish(x, y, p, cfg)
}

/// `Σ_t⁻¹ (D(x) - x)`.
pub fn score(model: &impl Denoiser, x: &StackedSignal, t: f64, y: &[f64], p: &SdeParams) -> Result<StackedSignal> {
    let d = model.denoise(p, &DenoiserInput::new(x, t, y))?;
    apply_sigma_inverse(&d.sub(x)?, p, t)
}

/// Euler–Maruyama on `dx = [−γP̄x − g² ∇log p] dt + g dw̄`, uniform steps
/// from `T` to `t_eps`; one denoiser call per step.
pub fn reverse_em_sample(
    model: &impl Denoiser,
    y: &[f64],
    p: &SdeParams,
    cfg: &SamplerConfig,
    n_steps: usize,
    rng: &mut impl Rng,
) -> Result<StackedSignal> {
    let cfg = SamplerConfig {
        n_steps,
        ..cfg.clone()
    };
    check_inputs(y, &cfg)?;
    let grid = build_time_grid(p, &cfg)?;
    let k = cfg.num_sources;
    let mut x = initial_state(y, p, k, rng)?;
    for (i, (t, t_next)) in grid.steps().enumerate() {
        let sc = score(model, &x, t, y, p)?;
        let g = p.diffusion_g(t)?;
        let dt = t_next - t;
        let noise_scale = g * (-dt).sqrt();
        let damp = spectral_apply(&x, 0.0, -p.gamma);
        let z = standard_normal_like(k, y.len(), rng);
        let mut next = x.clone();
        for (((v, d), s), n) in next
            .as_mut_slice()
            .iter_mut()
            .zip(damp.as_slice())
            .zip(sc.as_slice())
            .zip(z.as_slice())
        {
            *v += (d - g * g * s) * dt + noise_scale * n;
        }
        guard(&next, "reverse-em sampler", i)?;
        x = next;
    }
    finish(x, y, p, &cfg)
}

/// Dispatches on `cfg.sampler`; `reverse-em` runs `cfg.n_steps` steps.
pub fn run_sampler(
    model: &impl Denoiser,
    y: &[f64],
    p: &SdeParams,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<StackedSignal> {
    match cfg.sampler {
        SamplerKind::Algorithm1 => stochastic_sample(model, y, p, cfg, rng),
        SamplerKind::Ode => ode_sample(model, y, p, cfg, rng),
        SamplerKind::ReverseEm => reverse_em_sample(model, y, p, cfg, cfg.n_steps, rng),
    }
}
