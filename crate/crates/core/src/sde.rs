//! Schedule quantities of the mixing SDE
//!
//! ```text
//! dx = -γ P̄ x dt + g(t) dw,   x(0) = s
//! ```
//!
//! with the variance-exploding diffusion `g(t) = σ_min ρ^t sqrt(2 ln ρ)`,
//! `ρ = σ_max / σ_min`. The marginal at time `t` is Gaussian with mean
//! `μ_t = s̄ + e^{-γt} P̄ s` and covariance `Σ_t = λ₁(t) P + λ₂(t) P̄`, where
//!
//! ```text
//! λ_k(t) = σ_min² (ρ^{2t} - e^{-2 ξ_k t}) ln ρ / (ξ_k + ln ρ),   ξ₁ = 0, ξ₂ = γ.
//! ```

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixalg::{residual_unchecked, spectral_apply, stack_mixture, StackedSignal};
use crate::rng::{standard_normals, stream_rng, Purpose};

/// Absolute tolerance for `y == Σ_k s_k`, scaled by `max(1, |y|_∞)`.
pub const MIXTURE_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeParams {
    pub gamma: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_eps: f64,
    #[serde(rename = "T")]
    pub t_max: f64,
}

impl Default for SdeParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            sigma_min: 0.05,
            sigma_max: 0.5,
            t_eps: 0.03,
            t_max: 1.0,
        }
    }
}

/// Eigenvalues of `Σ_t` and the scalar noise level `σ(t) = √λ₁ + √λ₂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseScales {
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma: f64,
}

impl SdeParams {
    pub fn new(gamma: f64, sigma_min: f64, sigma_max: f64, t_eps: f64, t_max: f64) -> Result<Self> {
        let p = Self {
            gamma,
            sigma_min,
            sigma_max,
            t_eps,
            t_max,
        };
        p.validate()?;
        Ok(p)
    }

    /// Noise-free variant (`σ_min == σ_max`, so `g ≡ 0`); only meant for
    /// exercising the deterministic drift in tests.
    #[doc(hidden)]
    pub fn degenerate(gamma: f64, sigma: f64, t_eps: f64, t_max: f64) -> Self {
        Self {
            gamma,
            sigma_min: sigma,
            sigma_max: sigma,
            t_eps,
            t_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma, self.sigma_min, self.sigma_max, self.t_eps, self.t_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("SDE parameters must be finite".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::InvalidParam(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max) {
            return Err(Error::InvalidParam(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(0.0 < self.t_eps && self.t_eps < self.t_max) {
            return Err(Error::InvalidParam(format!(
                "need 0 < t_eps < T, got {} and {}",
                self.t_eps, self.t_max
            )));
        }
        Ok(())
    }

    pub fn log_rho(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    pub(crate) fn check_time(&self, t: f64, lo: f64) -> Result<()> {
        if !(t >= lo && t <= self.t_max) {
            return Err(Error::TimeOutOfRange {
                t,
                lo,
                hi: self.t_max,
            });
        }
        Ok(())
    }

    /// `λ₁(t) = σ_min² (ρ^{2t} - 1)`.
    fn lambda1_raw(&self, t: f64) -> f64 {
        self.sigma_min.powi(2) * (2.0 * t * self.log_rho()).exp_m1()
    }

    /// `λ₂(t)`, rewritten as `σ_min² e^{-2γt} expm1(2t(ln ρ + γ)) ln ρ / (γ + ln ρ)`
    /// so it stays accurate for small `t`.
    fn lambda2_raw(&self, t: f64) -> f64 {
        let l = self.log_rho();
        let g = self.gamma;
        self.sigma_min.powi(2) * (-2.0 * g * t).exp() * (2.0 * t * (l + g)).exp_m1() * l / (g + l)
    }

    pub fn noise_scales(&self, t: f64) -> Result<NoiseScales> {
        self.check_time(t, 0.0)?;
        let lambda1 = self.lambda1_raw(t);
        let lambda2 = self.lambda2_raw(t);
        if !(lambda1.is_finite() && lambda2.is_finite()) {
            return Err(Error::NonFinite(format!("noise scales at t={t}")));
        }
        Ok(NoiseScales {
            lambda1,
            lambda2,
            sigma: lambda1.sqrt() + lambda2.sqrt(),
        })
    }

    /// Analytic time derivatives `(λ̇₁, λ̇₂)`.
    pub fn noise_scales_dot(&self, t: f64) -> Result<(f64, f64)> {
        if t <= 0.0 {
            return Err(Error::TimeOutOfRange {
                t,
                lo: f64::MIN_POSITIVE,
                hi: self.t_max,
            });
        }
        self.check_time(t, 0.0)?;
        let l = self.log_rho();
        let s2 = self.sigma_min.powi(2);
        let grow = (2.0 * t * l).exp();
        let d = |xi: f64| s2 * l / (xi + l) * (2.0 * l * grow + 2.0 * xi * (-2.0 * xi * t).exp());
        let out = (d(0.0), d(self.gamma));
        if !(out.0.is_finite() && out.1.is_finite()) {
            return Err(Error::NonFinite(format!("noise scale derivatives at t={t}")));
        }
        Ok(out)
    }

    /// Diffusion coefficient `g(t)`.
    pub fn diffusion_g(&self, t: f64) -> Result<f64> {
        self.check_time(t, 0.0)?;
        let l = self.log_rho();
        let g = self.sigma_min * (t * l).exp() * (2.0 * l).sqrt();
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("diffusion coefficient at t={t}")));
        }
        Ok(g)
    }

    /// Gain applied to the residual subspace of the mean, `e^{-γt}`.
    pub fn mean_decay(&self, t: f64) -> f64 {
        (-self.gamma * t).exp()
    }

    /// Eigenvalues `(λ̇₁ / 2λ₁, λ̇₂ / 2λ₂)` of the probability-flow matrix `A(t)`.
    pub fn flow_coefficients(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t, self.t_eps)?;
        let ns = self.noise_scales(t)?;
        let (d1, d2) = self.noise_scales_dot(t)?;
        Ok((d1 / (2.0 * ns.lambda1), d2 / (2.0 * ns.lambda2)))
    }
}

/// Verifies `y` equals the row-sum of `s`.
pub fn check_mixture(s: &StackedSignal, y: &[f64]) -> Result<()> {
    if y.len() != s.num_samples() {
        return Err(Error::shape(
            format!("mixture of length {}", s.num_samples()),
            format!("length {}", y.len()),
        ));
    }
    let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let dev = s
        .row_sum()
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if !(dev <= MIXTURE_TOLERANCE * scale) {
        return Err(Error::MixtureInconsistent(dev));
    }
    Ok(())
}

/// `μ_t = (1 - e^{-γt}) s̄ + e^{-γt} s`.
pub fn marginal_mean(s: &StackedSignal, y: &[f64], p: &SdeParams, t: f64) -> Result<StackedSignal> {
    check_mixture(s, y)?;
    p.check_time(t, 0.0)?;
    let sbar = stack_mixture(y, s.num_sources())?;
    let e = p.mean_decay(t);
    sbar.zip_with(s, |b, v| (1.0 - e) * b + e * v)
}

/// `L_t x = √λ₁ P x + √λ₂ P̄ x`.
pub fn apply_lt(x: &StackedSignal, p: &SdeParams, t: f64) -> Result<StackedSignal> {
    let ns = p.noise_scales(t)?;
    Ok(spectral_apply(x, ns.lambda1.sqrt(), ns.lambda2.sqrt()))
}

/// `L_t⁻¹ x`; only defined from `t_eps` on, where both eigenvalues are
/// bounded away from zero.
pub fn apply_lt_inverse(x: &StackedSignal, p: &SdeParams, t: f64) -> Result<StackedSignal> {
    p.check_time(t, p.t_eps)?;
    let ns = p.noise_scales(t)?;
    Ok(spectral_apply(x, ns.lambda1.sqrt().recip(), ns.lambda2.sqrt().recip()))
}

/// `Σ_t x = λ₁ P x + λ₂ P̄ x`.
pub fn apply_sigma(x: &StackedSignal, p: &SdeParams, t: f64) -> Result<StackedSignal> {
    let ns = p.noise_scales(t)?;
    Ok(spectral_apply(x, ns.lambda1, ns.lambda2))
}

/// `Σ_t⁻¹ x`, defined from `t_eps` on.
pub fn apply_sigma_inverse(x: &StackedSignal, p: &SdeParams, t: f64) -> Result<StackedSignal> {
    p.check_time(t, p.t_eps)?;
    let ns = p.noise_scales(t)?;
    Ok(spectral_apply(x, ns.lambda1.recip(), ns.lambda2.recip()))
}

/// Standard normal `K x M` block.
pub fn standard_normal_like(k: usize, m: usize, rng: &mut impl Rng) -> StackedSignal {
    StackedSignal::from_raw(k, m, standard_normals(rng, k * m))
}

/// One exact draw `x_t = μ_t + L_t z`.
pub fn sample_marginal(
    s: &StackedSignal,
    y: &[f64],
    p: &SdeParams,
    t: f64,
    rng: &mut impl Rng,
) -> Result<StackedSignal> {
    let mu = marginal_mean(s, y, p, t)?;
    let z = standard_normal_like(s.num_sources(), s.num_samples(), rng);
    mu.add(&apply_lt(&z, p, t)?)
}

/// A discretised forward path.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StackedSignal>,
}

impl Trajectory {
    pub fn endpoint(&self) -> &StackedSignal {
        self.states.last().expect("trajectory holds at least the initial state")
    }
}

/// Long-format CSV: `t,source_index,sample_index,value`.
pub fn trajectory_csv(tr: &Trajectory) -> String {
    let mut out = String::from("t,source_index,sample_index,value\n");
    for (t, x) in tr.times.iter().zip(&tr.states) {
        for (k, row) in x.rows().enumerate() {
            for (n, v) in row.iter().enumerate() {
                out += &format!("{t},{k},{n},{v}\n");
            }
        }
    }
    out
}

pub const MIN_FORWARD_STEPS: usize = 100;

/// Simulates the forward SDE from `x₀ = s` to `T` on a uniform grid.
///
/// The noise increment is Euler–Maruyama (`g(t_n) √Δt ξ`); the linear drift is
/// integrated exactly over each step (`P̄` part scaled by `e^{-γΔt}`), so with
/// `g ≡ 0` the endpoint equals the closed-form mean. Only the endpoint is kept
/// unless `keep_path` is set.
pub fn forward_em_simulate(
    s: &StackedSignal,
    y: &[f64],
    p: &SdeParams,
    n_steps: usize,
    keep_path: bool,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    if n_steps < MIN_FORWARD_STEPS {
        return Err(Error::InvalidParam(format!(
            "forward simulation needs at least {MIN_FORWARD_STEPS} steps, got {n_steps}"
        )));
    }
    check_mixture(s, y)?;
    let (k, m) = s.shape();
    let dt = p.t_max / n_steps as f64;
    let decay = (-p.gamma * dt).exp();
    let sqrt_dt = dt.sqrt();
    let mut x = s.clone();
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    for n in 0..n_steps {
        let t = n as f64 * dt;
        let g = if p.sigma_min == p.sigma_max {
            0.0
        } else {
            p.diffusion_g(t)?
        };
        let mut next = spectral_apply(&x, 1.0, decay);
        let noise = standard_normals(rng, k * m);
        for (v, xi) in next.as_mut_slice().iter_mut().zip(noise) {
            *v += g * sqrt_dt * xi;
        }
        if !next.is_finite() {
            return Err(Error::Diverged {
                stage: "forward simulation",
                step: n,
            });
        }
        x = next;
        if keep_path {
            times.push((n + 1) as f64 * dt);
            states.push(x.clone());
        }
    }
    if !keep_path {
        times.push(p.t_max);
        states.push(x);
    }
    Ok(Trajectory { times, states })
}

/// Endpoints of `n_paths` independent forward paths; path `i` uses the
/// stream `(seed, i)` so the ensemble is independent of the thread count.
pub fn forward_ensemble(
    s: &StackedSignal,
    y: &[f64],
    p: &SdeParams,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<StackedSignal>> {
    (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, Purpose::Trajectory, i as u64);
            forward_em_simulate(s, y, p, n_steps, false, &mut rng).map(|tr| tr.endpoint().clone())
        })
        .collect()
}

/// Per-column squared norms of the `P` and `P̄` parts of `x`, normalised so
/// their expectation under `Σ_t` is `λ₁` and `λ₂` respectively.
pub fn eigen_energies(x: &StackedSignal) -> (f64, f64) {
    let k = x.num_sources() as f64;
    let m = x.num_samples() as f64;
    let resid = residual_unchecked(x);
    let total = x.squared_norm();
    let r = resid.squared_norm();
    ((total - r) / m, r / (m * (k - 1.0)))
}
