//! Denoisers `D(x_t, σ(t), y)`.
//!
//! Every backend answers the same question: given a noisy state `x_t`, the
//! process time and the mixture, return an estimate of the marginal mean
//! `μ_t`. The trainable backend uses the skip parameterisation
//! `D = x_t + L_t F(x_t, c_noise, y)`; the Gaussian oracle returns the exact
//! conditional mean for Gaussian sources.

mod net;
mod oracle;

use serde::{Deserialize, Serialize};

pub use net::{
    grad_check, grad_check_corrupted, GradCheckProbe, Layer, LossItem, NetConfig, NetGrads, NeuralDenoiser,
};
pub use oracle::GaussianOraclePrior;

use crate::error::{Error, Result};
use crate::mixalg::StackedSignal;
use crate::sde::SdeParams;

/// Arguments of one denoiser evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserInput<'a> {
    pub x_t: &'a StackedSignal,
    pub t: f64,
    pub y: &'a [f64],
}

impl<'a> DenoiserInput<'a> {
    pub fn new(x_t: &'a StackedSignal, t: f64, y: &'a [f64]) -> Self {
        Self { x_t, t, y }
    }

    pub fn validate(&self, p: &SdeParams) -> Result<()> {
        if self.y.len() != self.x_t.num_samples() {
            return Err(Error::shape(
                format!("mixture of length {}", self.x_t.num_samples()),
                format!("length {}", self.y.len()),
            ));
        }
        if !(self.t >= p.t_eps && self.t <= p.t_max) {
            return Err(Error::TimeOutOfRange {
                t: self.t,
                lo: p.t_eps,
                hi: p.t_max,
            });
        }
        if !self.x_t.is_finite() || self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser input".into()));
        }
        Ok(())
    }
}

/// Which scalar of the noise level is fed to the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConditioning {
    /// `ln(σ(t) / 2)`.
    #[default]
    LnHalfSigma,
    /// `½ ln σ(t)`.
    HalfLnSigma,
}

impl NoiseConditioning {
    pub fn value(self, sigma: f64) -> f64 {
        match self {
            NoiseConditioning::LnHalfSigma => (0.5 * sigma).ln(),
            NoiseConditioning::HalfLnSigma => 0.5 * sigma.ln(),
        }
    }
}

pub trait Denoiser: Sync {
    /// Estimate of `μ_t` for the given state.
    fn denoise(&self, p: &SdeParams, input: &DenoiserInput<'_>) -> Result<StackedSignal>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, p: &SdeParams, input: &DenoiserInput<'_>) -> Result<StackedSignal> {
        (**self).denoise(p, input)
    }
}

/// The two production backends behind one type.
#[derive(Clone, Debug)]
pub enum Backend {
    Neural(NeuralDenoiser),
    Oracle(GaussianOraclePrior),
}

impl Denoiser for Backend {
    fn denoise(&self, p: &SdeParams, input: &DenoiserInput<'_>) -> Result<StackedSignal> {
        match self {
            Backend::Neural(net) => net.denoise(p, input),
            Backend::Oracle(prior) => prior.denoise(p, input),
        }
    }
}

/// Free-function form of [`Denoiser::denoise`].
pub fn denoise(model: &impl Denoiser, p: &SdeParams, input: &DenoiserInput<'_>) -> Result<StackedSignal> {
    model.denoise(p, input)
}

/// Counts evaluations of a wrapped denoiser.
#[derive(Debug)]
pub struct CountingDenoiser<D> {
    pub inner: D,
    calls: std::sync::atomic::AtomicUsize,
}

impl<D> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: Default::default(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn denoise(&self, p: &SdeParams, input: &DenoiserInput<'_>) -> Result<StackedSignal> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.denoise(p, input)
    }
}

/// Returns its input unchanged, i.e. the skip connection with a zero network.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn denoise(&self, p: &SdeParams, input: &DenoiserInput<'_>) -> Result<StackedSignal> {
        input.validate(p)?;
        Ok(input.x_t.clone())
    }
}
