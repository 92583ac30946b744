//! Denoising score matching with the permutation-invariant boundary branch.
//!
//! Each batch element either takes the ordinary branch (`t ~ U(t_eps, T)`,
//! `x_t` drawn from the exact marginal) or, with probability `p_T`, the
//! boundary branch: `x̂_T = s̄ + L_T z` scored against the closest of the
//! permuted marginal means `μ_T(a)`.

mod adam;
mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{generate, DatasetSpec, SourcePair};
use crate::denoise::{Denoiser, DenoiserInput, LossItem, NeuralDenoiser};
use crate::error::{Error, Result};
use crate::mixalg::{all_permutations, apply_permutation, stack_mixture, Permutation, StackedSignal};
use crate::rng::{stream_rng, EngineRng, Purpose};
use crate::sde::{apply_lt, apply_lt_inverse, check_mixture, marginal_mean, sample_marginal, standard_normal_like, SdeParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub total_steps: u64,
    #[serde(rename = "p_T")]
    pub p_t: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Smoothing factor of the logged loss average.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            total_steps: 20_000,
            p_t: 0.1,
            seed: 0,
            checkpoint_interval: 1000,
            ema_decay: 0.99,
        }
    }
}

impl TrainConfig {
    /// `p_T` may be 0 or 1 here so the degenerate branches stay testable.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParam("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_t) {
            return Err(Error::InvalidParam(format!("p_T must lie in [0, 1], got {}", self.p_t)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParam(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidParam("adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidParam("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// `‖L_t⁻¹(d - target)‖² / (K M)`.
pub fn weighted_error(d: &StackedSignal, target: &StackedSignal, p: &SdeParams, t: f64) -> Result<f64> {
    let e = apply_lt_inverse(&d.sub(target)?, p, t)?;
    Ok(e.squared_norm() / e.as_slice().len() as f64)
}

/// One-sample score-matching loss at time `t`.
pub fn dsm_loss(
    model: &impl Denoiser,
    p: &SdeParams,
    s: &StackedSignal,
    y: &[f64],
    t: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    p.check_time(t, p.t_eps)?;
    let x_t = sample_marginal(s, y, p, t, rng)?;
    let mu = marginal_mean(s, y, p, t)?;
    let d = model.denoise(p, &DenoiserInput::new(&x_t, t, y))?;
    weighted_error(&d, &mu, p, t)
}

/// `x̂_T = s̄ + L_T z`.
pub fn boundary_state(y: &[f64], p: &SdeParams, k: usize, rng: &mut impl Rng) -> Result<StackedSignal> {
    let z = standard_normal_like(k, y.len(), rng);
    stack_mixture(y, k)?.add(&apply_lt(&z, p, p.t_max)?)
}

/// Minimum over permutations `a` of the weighted error between `d` and
/// `μ_T(a s)`; ties go to the lexicographically first permutation.
pub fn min_over_permutations(
    d: &StackedSignal,
    s: &StackedSignal,
    y: &[f64],
    p: &SdeParams,
) -> Result<(f64, Permutation)> {
    let mut best: Option<(f64, Permutation)> = None;
    for a in all_permutations(s.num_sources())? {
        let mu = marginal_mean(&apply_permutation(s, &a)?, y, p, p.t_max)?;
        let loss = weighted_error(d, &mu, p, p.t_max)?;
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, a));
        }
    }
    Ok(best.expect("at least one permutation"))
}

pub fn boundary_pit_loss(
    model: &impl Denoiser,
    p: &SdeParams,
    s: &StackedSignal,
    y: &[f64],
    rng: &mut impl Rng,
) -> Result<(f64, Permutation)> {
    check_mixture(s, y)?;
    let x_hat = boundary_state(y, p, s.num_sources(), rng)?;
    let d = model.denoise(p, &DenoiserInput::new(&x_hat, p.t_max, y))?;
    min_over_permutations(&d, s, y, p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Dsm,
    Boundary,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: NeuralDenoiser,
    pub moments: AdamState,
    /// Completed optimizer steps.
    pub step: u64,
    pub sde: SdeParams,
    pub config: TrainConfig,
    pub data: DatasetSpec,
}

impl TrainState {
    pub fn new(net: NeuralDenoiser, sde: SdeParams, config: TrainConfig, data: DatasetSpec) -> Result<Self> {
        sde.validate()?;
        config.validate()?;
        data.validate()?;
        if data.num_sources != net.config().num_sources {
            return Err(Error::Config(format!(
                "dataset has {} sources but the network separates {}",
                data.num_sources,
                net.config().num_sources
            )));
        }
        let moments = AdamState::zeros(net.tensors().iter().map(|t| t.len()));
        Ok(Self {
            net,
            moments,
            step: 0,
            sde,
            config,
            data,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub loss: f64,
    pub dsm: usize,
    pub boundary: usize,
}

/// Noisy input and regression target for one batch element.
fn prepare_element(
    net: &NeuralDenoiser,
    p: &SdeParams,
    pair: &SourcePair,
    branch: Branch,
    rng: &mut impl Rng,
) -> Result<(StackedSignal, f64, StackedSignal)> {
    let (s, y) = (&pair.sources, pair.mixture.as_slice());
    match branch {
        Branch::Dsm => {
            let t = rng.gen_range(p.t_eps..=p.t_max);
            let x_t = sample_marginal(s, y, p, t, rng)?;
            let mu = marginal_mean(s, y, p, t)?;
            Ok((x_t, t, mu))
        }
        Branch::Boundary => {
            let x_hat = boundary_state(y, p, s.num_sources(), rng)?;
            let d = net.denoise(p, &DenoiserInput::new(&x_hat, p.t_max, y))?;
            let (_, a) = min_over_permutations(&d, s, y, p)?;
            let mu = marginal_mean(&apply_permutation(s, &a)?, y, p, p.t_max)?;
            Ok((x_hat, p.t_max, mu))
        }
    }
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NonFiniteActivation(_) | Error::NonFinite(_))
}

/// One optimizer step on `batch`. Branches, times and noise are drawn from
/// `rng` in batch order; all frames of the batch go through the network as
/// a single matrix, so the result does not depend on the thread count.
pub fn train_step(state: &mut TrainState, batch: &[SourcePair], rng: &mut impl Rng) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let net = &state.net;
    let p = &state.sde;
    let mut branches = Vec::with_capacity(batch.len());
    let mut prepared = Vec::with_capacity(batch.len());
    for (i, pair) in batch.iter().enumerate() {
        let u: f64 = rng.gen();
        let branch = if u < state.config.p_t { Branch::Boundary } else { Branch::Dsm };
        let item = prepare_element(net, p, pair, branch, rng).map_err(|e| {
            if is_numeric_failure(&e) {
                Error::NonFiniteLoss(i)
            } else {
                e
            }
        })?;
        branches.push(branch);
        prepared.push(item);
    }
    let items: Vec<LossItem<'_>> = prepared
        .iter()
        .zip(batch)
        .map(|((x_t, t, target), pair)| LossItem {
            x_t,
            t: *t,
            y: &pair.mixture,
            target,
        })
        .collect();
    let (losses, grads) = match net.loss_and_grad_batch(p, &items) {
        Ok(v) => v,
        Err(e) if is_numeric_failure(&e) => {
            // Locate the element that broke the batch.
            for (i, it) in items.iter().enumerate() {
                match net.loss_and_grad(p, it.x_t, it.t, it.y, it.target) {
                    Ok((l, _)) if l.is_finite() => {}
                    _ => return Err(Error::NonFiniteLoss(i)),
                }
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss(i));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("batch gradient".into()));
    }

    let step = state.step + 1;
    let grad_views = grads.tensors();
    let mut params = state.net.tensors_mut();
    adam_update(&mut params, &grad_views, &mut state.moments, &state.config.adam(), step)?;
    state.step = step;
    let boundary = branches.iter().filter(|b| **b == Branch::Boundary).count();
    Ok(StepOutcome {
        loss: losses.iter().sum::<f64>() / losses.len() as f64,
        dsm: batch.len() - boundary,
        boundary,
    })
}

/// Batch for the next step: indices drawn uniformly from the dataset.
pub fn draw_batch(state: &TrainState, rng: &mut impl Rng) -> Result<Vec<SourcePair>> {
    let count = state.data.count as u64;
    (0..state.config.batch_size)
        .map(|_| generate(&state.data, rng.gen_range(0..count)))
        .collect()
}

/// Rng driving step `step` (counted from 0); a pure function of the seed.
pub fn step_rng(seed: u64, step: u64) -> EngineRng {
    stream_rng(seed, Purpose::Training, step)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub ema_loss: f64,
    pub branch: BranchCounts,
    pub wallclock: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub dsm: usize,
    pub boundary: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_loss: f64,
    pub ema_loss: f64,
    pub branches: BranchCounts,
    pub checkpoints: Vec<PathBuf>,
}

/// Optional side outputs of [`train_loop`].
#[derive(Default)]
pub struct TrainOutputs<'a> {
    /// JSON-lines log sink.
    pub log: Option<&'a mut dyn Write>,
    /// Directory for `ckpt_{step}.edsp` files.
    pub checkpoint_dir: Option<&'a Path>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:07}.edsp"))
}

/// Runs until `state.step == until_step`.
pub fn train_loop(state: &mut TrainState, until_step: u64, out: TrainOutputs<'_>) -> Result<TrainSummary> {
    let TrainOutputs { mut log, checkpoint_dir } = out;
    let start = Instant::now();
    let mut summary = TrainSummary::default();
    let mut ema: Option<f64> = None;
    while state.step < until_step {
        let mut rng = step_rng(state.config.seed, state.step);
        let batch = draw_batch(state, &mut rng)?;
        let outcome = train_step(state, &batch, &mut rng)?;
        let decay = state.config.ema_decay;
        let e = ema.map_or(outcome.loss, |e| decay * e + (1.0 - decay) * outcome.loss);
        ema = Some(e);
        summary.steps_run += 1;
        summary.final_loss = outcome.loss;
        summary.ema_loss = e;
        summary.branches.dsm += outcome.dsm;
        summary.branches.boundary += outcome.boundary;
        if let Some(w) = log.as_deref_mut() {
            let rec = LogRecord {
                step: state.step,
                loss: outcome.loss,
                ema_loss: e,
                branch: BranchCounts {
                    dsm: outcome.dsm,
                    boundary: outcome.boundary,
                },
                wallclock: start.elapsed().as_secs_f64(),
            };
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        if let Some(dir) = checkpoint_dir {
            let interval = state.config.checkpoint_interval;
            if (interval > 0 && state.step.is_multiple_of(interval)) || state.step == until_step {
                let path = checkpoint_path(dir, state.step);
                save_checkpoint(state, &path)?;
                summary.checkpoints.push(path);
            }
        }
    }
    Ok(summary)
}

/// Mean held-out loss `E‖L_t⁻¹(D − μ_t)‖² / (K M)` over `count` instances
/// with `t` drawn uniformly; instance `i` uses the evaluation stream `i`.
pub fn heldout_loss(model: &impl Denoiser, p: &SdeParams, data: &DatasetSpec, count: usize, seed: u64) -> Result<f64> {
    let losses: Vec<f64> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, Purpose::Evaluation, i);
            let pair = generate(data, i)?;
            let t = rng.gen_range(p.t_eps..=p.t_max);
            dsm_loss(model, p, &pair.sources, &pair.mixture, t, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / count as f64)
}
