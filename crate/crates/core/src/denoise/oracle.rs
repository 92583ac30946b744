//! Closed-form denoiser for i.i.d. Gaussian sources.
//!
//! Suppose every source sample is drawn independently from `N(0, σ_s²)` and
//! `y = Σ_k s_k`. The mixture pins down the mean part exactly, `P s = s̄`,
//! while the residual `P̄ s` is independent of `y` with law `N(0, σ_s² P̄)`.
//!
//! The marginal mean is `μ_t = s̄ + e^{-γt} P̄ s`, and the state decomposes as
//!
//! ```text
//! P̄ x_t = e^{-γt} P̄ s + √λ₂ P̄ z.
//! ```
//!
//! Within the `P̄` subspace both terms are isotropic, so `(e^{-γt} P̄ s, P̄ x_t)`
//! is jointly Gaussian with scalar covariances and the conditional mean is a
//! scalar Wiener gain:
//!
//! ```text
//! E[e^{-γt} P̄ s | x_t, y] = κ(t) P̄ x_t,   κ = e^{-2γt} σ_s² / (e^{-2γt} σ_s² + λ₂(t)).
//! ```
//!
//! Hence `E[μ_t | x_t, y] = s̄ + κ(t) P̄ x_t`, which minimises the whitened
//! squared error `E‖L_t⁻¹(D - μ_t)‖²` among all functions of `(x_t, y)`.

use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserInput};
use crate::error::{Error, Result};
use crate::mixalg::{residual_unchecked, stack_mixture, StackedSignal};
use crate::sde::SdeParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianOraclePrior {
    pub sigma_s: f64,
}

impl GaussianOraclePrior {
    pub fn new(sigma_s: f64) -> Result<Self> {
        if !(sigma_s > 0.0 && sigma_s.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma_s must be positive, got {sigma_s}")));
        }
        Ok(Self { sigma_s })
    }

    /// Wiener gain `κ(t)` on the residual subspace.
    pub fn gain(&self, p: &SdeParams, t: f64) -> Result<f64> {
        let signal = (-2.0 * p.gamma * t).exp() * self.sigma_s.powi(2);
        let lambda2 = p.noise_scales(t)?.lambda2;
        Ok(signal / (signal + lambda2))
    }

    /// `s̄ + κ(t) P̄ x_t`.
    pub fn oracle_denoise(&self, p: &SdeParams, input: &DenoiserInput<'_>) -> Result<StackedSignal> {
        input.validate(p)?;
        let kappa = self.gain(p, input.t)?;
        let sbar = stack_mixture(input.y, input.x_t.num_sources())?;
        let resid = residual_unchecked(input.x_t);
        sbar.zip_with(&resid, |b, r| b + kappa * r)
    }
}

impl Denoiser for GaussianOraclePrior {
    fn denoise(&self, p: &SdeParams, input: &DenoiserInput<'_>) -> Result<StackedSignal> {
        self.oracle_denoise(p, input)
    }
}
