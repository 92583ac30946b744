//! Small per-frame network `F(x_t, c_noise, y)` with hand-written backprop.
//!
//! Each STFT frame is processed independently with shared weights:
//!
//! 1. the K channels of `x_t` and the mixture `y` are transformed and
//!    magnitude-compressed; real and imaginary parts of every bin, scaled by
//!    `input_scale`, are concatenated with the noise-conditioning scalar;
//! 2. a stack of fully connected SiLU layers maps the frame features to a
//!    linear head of `K (K+1)` real gains per bin;
//! 3. output channel `k` is `Σ_j G[k, j] ⊙ X_j`, where `X_j` are the
//!    *uncompressed* spectra of the K state channels and the mixture;
//! 4. a linear inverse STFT returns the K time-domain residual channels.
//!
//! The output is linear in the head's gains, so gradients never pass through
//! the magnitude compression.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserInput, NoiseConditioning};
use crate::dsp::{compress_value, Complex64, StftConfig, StftPlan, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::mixalg::StackedSignal;
use crate::rng::{stream_rng, Purpose};
use crate::sde::{apply_lt, apply_lt_inverse, SdeParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub num_sources: usize,
    pub hidden: Vec<usize>,
    pub conditioning: NoiseConditioning,
    pub alpha: f64,
    pub beta: f64,
    /// Fixed scale applied to the compressed input features.
    pub input_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            num_sources: 2,
            hidden: vec![256, 256, 256],
            conditioning: NoiseConditioning::LnHalfSigma,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            input_scale: 0.1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sources < 2 {
            return Err(Error::InvalidParam("network needs at least 2 sources".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidParam("hidden layer widths must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.input_scale > 0.0) {
            return Err(Error::InvalidParam("alpha, beta and input_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self, stft: &StftConfig) -> usize {
        (self.num_sources + 1) * 2 * stft.num_bins() + 1
    }

    pub fn output_dim(&self, stft: &StftConfig) -> usize {
        self.num_sources * (self.num_sources + 1) * stft.num_bins()
    }

    /// `(fan_in, fan_out)` of every layer, head last.
    pub fn layer_dims(&self, stft: &StftConfig) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim(stft);
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim(stft)));
        dims
    }
}

/// Affine layer `x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

/// Gradients with the same layout as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<Layer>,
}

impl NetGrads {
    pub fn zeros_like(net: &NeuralDenoiser) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight *= c;
            l.bias *= c;
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        flat_views(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn flat_views(layers: &[Layer]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct NeuralDenoiser {
    cfg: NetConfig,
    plan: StftPlan,
    layers: Vec<Layer>,
}

/// Intermediate values kept for the backward pass. Frames of all batch
/// items are stacked row-wise.
struct ForwardCache {
    /// Input of every layer (features first).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    /// Per item: uncompressed spectra of the K state channels and the mixture.
    spectra: Vec<Vec<Vec<Complex64>>>,
    /// Per item: first row in the stacked matrices and frame count.
    rows: Vec<(usize, usize)>,
}

/// One training example for [`NeuralDenoiser::loss_and_grad_batch`].
#[derive(Clone, Copy, Debug)]
pub struct LossItem<'a> {
    pub x_t: &'a StackedSignal,
    pub t: f64,
    pub y: &'a [f64],
    pub target: &'a StackedSignal,
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

#[inline]
fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

#[inline]
fn silu_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

impl NeuralDenoiser {
    /// Random initialisation, uniform in `±1/√fan_in` for weights and biases.
    pub fn new(cfg: NetConfig, stft: StftConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(cfg, stft)?;
        let mut rng = stream_rng(seed, Purpose::Init, 0);
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.weight.nrows() as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.gen_range(-bound..bound));
            layer.bias.mapv_inplace(|_| rng.gen_range(-bound..bound));
        }
        Ok(net)
    }

    /// All parameters zero.
    pub fn zeroed(cfg: NetConfig, stft: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = StftPlan::new(stft)?;
        let layers = cfg
            .layer_dims(&stft)
            .into_iter()
            .map(|(i, o)| Layer::zeros(i, o))
            .collect();
        Ok(Self { cfg, plan, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn stft_config(&self) -> &StftConfig {
        self.plan.config()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Named parameter tensors in a fixed order.
    pub fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layer{i}.weight"), l.weight.shape().to_vec()),
                    (format!("layer{i}.bias"), l.bias.shape().to_vec()),
                ]
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        flat_views(&self.layers)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn noise_conditioning(&self, p: &SdeParams, t: f64) -> Result<f64> {
        Ok(self.cfg.conditioning.value(p.noise_scales(t)?.sigma))
    }

    fn check_shapes(&self, x_t: &StackedSignal, y: &[f64]) -> Result<()> {
        if x_t.num_sources() != self.cfg.num_sources {
            return Err(Error::shape(
                format!("{} sources", self.cfg.num_sources),
                format!("{} sources", x_t.num_sources()),
            ));
        }
        if y.len() != x_t.num_samples() {
            return Err(Error::shape(
                format!("mixture of length {}", x_t.num_samples()),
                format!("length {}", y.len()),
            ));
        }
        Ok(())
    }

    fn forward_cached(&self, items: &[(&StackedSignal, f64, &[f64])]) -> Result<(Vec<StackedSignal>, ForwardCache)> {
        let k = self.cfg.num_sources;
        let stft = self.plan.config();
        let bins = stft.num_bins();
        let in_dim = self.cfg.input_dim(stft);
        let (alpha, beta, scale) = (self.cfg.alpha, self.cfg.beta, self.cfg.input_scale);

        let mut rows = Vec::with_capacity(items.len());
        let mut all_spectra = Vec::with_capacity(items.len());
        let mut total = 0;
        for &(x_t, _, y) in items {
            self.check_shapes(x_t, y)?;
            let frames = stft.num_frames(x_t.num_samples());
            let mut spectra = Vec::with_capacity(k + 1);
            for c in 0..k {
                spectra.push(self.plan.analyze(x_t.row(c))?);
            }
            spectra.push(self.plan.analyze(y)?);
            all_spectra.push(spectra);
            rows.push((total, frames));
            total += frames;
        }

        let mut features = Array2::<f64>::zeros((total, in_dim));
        for (item, &(start, frames)) in rows.iter().enumerate() {
            let cond = items[item].1;
            for f in 0..frames {
                let mut row = features.row_mut(start + f);
                let row = row.as_slice_mut().expect("standard layout");
                for (c, spec) in all_spectra[item].iter().enumerate() {
                    let base = c * 2 * bins;
                    for (b, &z) in spec[f * bins..(f + 1) * bins].iter().enumerate() {
                        let w = compress_value(z, alpha, beta);
                        row[base + b] = scale * w.re;
                        row[base + bins + b] = scale * w.im;
                    }
                }
                row[in_dim - 1] = cond;
            }
        }

        let mut inputs = vec![features];
        let mut pre = Vec::with_capacity(self.cfg.hidden.len());
        let n_layers = self.layers.len();
        let mut gains = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut a = inputs[i].dot(&layer.weight);
            a += &layer.bias;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation(i));
            }
            if i + 1 == n_layers {
                gains = Some(a);
            } else {
                inputs.push(a.mapv(silu));
                pre.push(a);
            }
        }
        let gains = gains.expect("network has a head layer");

        let mut outputs = Vec::with_capacity(items.len());
        for (item, &(start, frames)) in rows.iter().enumerate() {
            let m = items[item].0.num_samples();
            let spectra = &all_spectra[item];
            let mut out = Vec::with_capacity(k * m);
            let mut coeffs = vec![Complex64::new(0.0, 0.0); frames * bins];
            for ko in 0..k {
                for f in 0..frames {
                    let grow = gains.row(start + f);
                    let grow = grow.as_slice().expect("standard layout");
                    for b in 0..bins {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for (j, spec) in spectra.iter().enumerate() {
                            acc += spec[f * bins + b] * grow[(ko * (k + 1) + j) * bins + b];
                        }
                        coeffs[f * bins + b] = acc;
                    }
                }
                out.extend(self.plan.synthesize(&coeffs, m)?);
            }
            outputs.push(StackedSignal::new(k, m, out).map_err(|_| Error::NonFiniteActivation(n_layers))?);
        }
        Ok((
            outputs,
            ForwardCache {
                inputs,
                pre,
                spectra: all_spectra,
                rows,
            },
        ))
    }

    /// `F(x_t, c_noise, y)`: the K-channel time-domain residual.
    pub fn net_forward(&self, x_t: &StackedSignal, noise_cond: f64, y: &[f64]) -> Result<StackedSignal> {
        let (mut out, _) = self.forward_cached(&[(x_t, noise_cond, y)])?;
        Ok(out.pop().expect("one item"))
    }

    /// Parameter gradients of `Σ_i ⟨grad_out_i, F_i⟩`.
    fn backward(&self, cache: &ForwardCache, grad_outs: &[StackedSignal]) -> Result<NetGrads> {
        let k = self.cfg.num_sources;
        let bins = self.plan.config().num_bins();
        let out_dim = self.cfg.output_dim(self.plan.config());
        let total = cache.inputs[0].nrows();

        let mut d_gains = Array2::<f64>::zeros((total, out_dim));
        for (item, &(start, frames)) in cache.rows.iter().enumerate() {
            let spectra = &cache.spectra[item];
            for ko in 0..k {
                let g_spec = self.plan.synthesize_adjoint(grad_outs[item].row(ko))?;
                for f in 0..frames {
                    let mut drow = d_gains.row_mut(start + f);
                    let drow = drow.as_slice_mut().expect("standard layout");
                    for (j, spec) in spectra.iter().enumerate() {
                        let base = (ko * (k + 1) + j) * bins;
                        for b in 0..bins {
                            let g = g_spec[f * bins + b];
                            let x = spec[f * bins + b];
                            drow[base + b] = g.re * x.re + g.im * x.im;
                        }
                    }
                }
            }
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_gains;
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            grads.push(Layer {
                weight: input.t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut d_in = delta.dot(&self.layers[i].weight.t());
                d_in.zip_mut_with(&cache.pre[i - 1], |d, &a| *d *= silu_grad(a));
                delta = d_in;
            }
        }
        grads.reverse();
        Ok(NetGrads { layers: grads })
    }

    /// Per-item whitened losses and the gradient of their mean, with all
    /// frames pushed through the network as one matrix.
    pub fn loss_and_grad_batch(&self, p: &SdeParams, items: &[LossItem<'_>]) -> Result<(Vec<f64>, NetGrads)> {
        if items.is_empty() {
            return Err(Error::InvalidParam("empty batch".into()));
        }
        let conds = items
            .iter()
            .map(|it| self.noise_conditioning(p, it.t))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<_> = items.iter().zip(&conds).map(|(it, &c)| (it.x_t, c, it.y)).collect();
        let (f_outs, cache) = self.forward_cached(&inputs)?;
        let n_items = items.len() as f64;
        let mut losses = Vec::with_capacity(items.len());
        let mut grad_outs = Vec::with_capacity(items.len());
        for (it, f_out) in items.iter().zip(&f_outs) {
            // L⁻¹(x + L F - target) = L⁻¹(x - target) + F
            let err = apply_lt_inverse(&it.x_t.sub(it.target)?, p, it.t)?.add(f_out)?;
            let n = err.as_slice().len() as f64;
            losses.push(err.squared_norm() / n);
            grad_outs.push(err.scale(2.0 / (n * n_items)));
        }
        let grads = self.backward(&cache, &grad_outs)?;
        Ok((losses, grads))
    }

    /// Whitened squared error `‖L_t⁻¹(D(x_t) - target)‖² / (K M)` and its
    /// parameter gradient.
    pub fn loss_and_grad(
        &self,
        p: &SdeParams,
        x_t: &StackedSignal,
        t: f64,
        y: &[f64],
        target: &StackedSignal,
    ) -> Result<(f64, NetGrads)> {
        let (losses, grads) = self.loss_and_grad_batch(p, &[LossItem { x_t, t, y, target }])?;
        Ok((losses[0], grads))
    }

    /// Loss only, same convention as [`loss_and_grad`](Self::loss_and_grad).
    pub fn loss(&self, p: &SdeParams, x_t: &StackedSignal, t: f64, y: &[f64], target: &StackedSignal) -> Result<f64> {
        let d = self.denoise(p, &DenoiserInput::new(x_t, t, y))?;
        let err = apply_lt_inverse(&d.sub(target)?, p, t)?;
        Ok(err.squared_norm() / err.as_slice().len() as f64)
    }

    /// Overwrites parameters from flat tensors in [`named_shapes`](Self::named_shapes) order.
    pub fn load_tensors(&mut self, tensors: &[Vec<f64>]) -> Result<()> {
        let shapes = self.named_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::shape(
                format!("{} tensors", shapes.len()),
                format!("{} tensors", tensors.len()),
            ));
        }
        for ((dst, src), (name, shape)) in self.tensors_mut().into_iter().zip(tensors).zip(&shapes) {
            if dst.len() != src.len() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    found: vec![src.len()],
                    expected: shape.clone(),
                });
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }
}

impl Denoiser for NeuralDenoiser {
    fn denoise(&self, p: &SdeParams, input: &DenoiserInput<'_>) -> Result<StackedSignal> {
        input.validate(p)?;
        let cond = self.noise_conditioning(p, input.t)?;
        let f_out = self.net_forward(input.x_t, cond, input.y)?;
        let out = input.x_t.add(&apply_lt(&f_out, p, input.t)?)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("network denoiser output".into()));
        }
        Ok(out)
    }
}

/// One fixed example for the gradient check: `x_t = target + L_t z`.
#[derive(Clone, Debug)]
pub struct GradCheckProbe {
    pub x_t: StackedSignal,
    pub t: f64,
    pub y: Vec<f64>,
    pub target: StackedSignal,
}

impl GradCheckProbe {
    pub fn from_marginal(s: &StackedSignal, y: &[f64], p: &SdeParams, t: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            x_t: crate::sde::sample_marginal(s, y, p, t, rng)?,
            t,
            y: y.to_vec(),
            target: crate::sde::marginal_mean(s, y, p, t)?,
        })
    }
}

/// Whitened errors `L_t⁻¹(D(x_t) - target)` for every probe.
fn probe_errors(net: &NeuralDenoiser, p: &SdeParams, probes: &[GradCheckProbe]) -> Result<Vec<StackedSignal>> {
    probes
        .iter()
        .map(|pr| {
            let d = net.denoise(p, &DenoiserInput::new(&pr.x_t, pr.t, &pr.y))?;
            apply_lt_inverse(&d.sub(&pr.target)?, p, pr.t)
        })
        .collect()
}

/// `loss(plus) - loss(minus)` summed as `Σ (e₊ - e₋)(e₊ + e₋)`, which
/// cancels the large shared part of the two errors before rounding.
fn loss_difference(plus: &[StackedSignal], minus: &[StackedSignal]) -> f64 {
    let mut total = 0.0;
    for (a, b) in plus.iter().zip(minus) {
        let n = a.as_slice().len() as f64;
        let d: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(u, v)| (u - v) * (u + v)).sum();
        total += d / n;
    }
    total / plus.len() as f64
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared in absolute terms.
const GRAD_CHECK_FLOOR: f64 = 1e-8;

fn grad_check_impl(
    net: &NeuralDenoiser,
    p: &SdeParams,
    probes: &[GradCheckProbe],
    n_params: usize,
    seed: u64,
    corrupt_layer: Option<usize>,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::InvalidParam("gradient check needs at least one probe".into()));
    }
    let per_probe = probes
        .par_iter()
        .map(|pr| net.loss_and_grad(p, &pr.x_t, pr.t, &pr.y, &pr.target).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = NetGrads::zeros_like(net);
    for g in &per_probe {
        grads.add_assign(g);
    }
    grads.scale(1.0 / probes.len() as f64);
    if let Some(layer) = corrupt_layer {
        let l = &mut grads.layers[layer];
        l.weight.mapv_inplace(|v| -v);
        l.bias.mapv_inplace(|v| -v);
    }
    let analytic: Vec<f64> = grads.tensors().concat();

    let mut rng = stream_rng(seed, Purpose::GradCheck, 0);
    let total = analytic.len();
    let picks: Vec<usize> = (0..n_params).map(|_| rng.gen_range(0..total)).collect();
    let errors = picks
        .par_iter()
        .map(|&idx| -> Result<f64> {
            let mut probe_net = net.clone();
            let (tensor, offset) = locate(&probe_net, idx);
            let orig = probe_net.tensors()[tensor][offset];
            probe_net.tensors_mut()[tensor][offset] = orig + GRAD_CHECK_STEP;
            let plus = probe_errors(&probe_net, p, probes)?;
            probe_net.tensors_mut()[tensor][offset] = orig - GRAD_CHECK_STEP;
            let minus = probe_errors(&probe_net, p, probes)?;
            let numeric = loss_difference(&plus, &minus) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs());
            Ok(if denom < GRAD_CHECK_FLOOR {
                (a - numeric).abs() / GRAD_CHECK_FLOOR
            } else {
                (a - numeric).abs() / denom
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

fn locate(net: &NeuralDenoiser, mut idx: usize) -> (usize, usize) {
    for (i, t) in net.tensors().iter().enumerate() {
        if idx < t.len() {
            return (i, idx);
        }
        idx -= t.len();
    }
    unreachable!("parameter index out of range")
}

/// Maximum relative error between analytic gradients of the whitened loss
/// and central finite differences (step `1e-5`) over `n_params` randomly
/// chosen parameters.
pub fn grad_check(net: &NeuralDenoiser, p: &SdeParams, probes: &[GradCheckProbe], n_params: usize, seed: u64) -> Result<f64> {
    grad_check_impl(net, p, probes, n_params, seed, None)
}

/// Same as [`grad_check`] with one layer's analytic gradient negated; used to
/// confirm that the checker detects broken gradients.
#[doc(hidden)]
pub fn grad_check_corrupted(
    net: &NeuralDenoiser,
    p: &SdeParams,
    probes: &[GradCheckProbe],
    n_params: usize,
    seed: u64,
    layer: usize,
) -> Result<f64> {
    grad_check_impl(net, p, probes, n_params, seed, Some(layer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::root_rng;
    use crate::sde::standard_normal_like;

    fn small_cfg() -> (NetConfig, StftConfig) {
        (
            NetConfig {
                hidden: vec![16, 12],
                ..NetConfig::default()
            },
            StftConfig {
                n_fft: 30,
                hop: 8,
                sample_rate: 8000,
            },
        )
    }

    #[test]
    fn zero_network_is_skip_connection() {
        let (cfg, stft) = small_cfg();
        let net = NeuralDenoiser::zeroed(cfg, stft).unwrap();
        let p = SdeParams::default();
        let x = standard_normal_like(2, 64, &mut root_rng(1));
        let y = x.row_sum();
        assert!(net.net_forward(&x, -1.0, &y).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let d = net.denoise(&p, &DenoiserInput::new(&x, 0.7, &y)).unwrap();
        assert_eq!(d, x);
    }

    #[test]
    fn shapes_determinism_and_conditioning() {
        let (cfg, stft) = small_cfg();
        let net = NeuralDenoiser::new(cfg.clone(), stft, 4).unwrap();
        let again = NeuralDenoiser::new(cfg, stft, 4).unwrap();
        let x = standard_normal_like(2, 50, &mut root_rng(2));
        let y = x.row_sum();
        let a = net.net_forward(&x, -1.2, &y).unwrap();
        assert_eq!(a.shape(), (2, 50));
        assert_eq!(a.as_slice(), again.net_forward(&x, -1.2, &y).unwrap().as_slice());
        assert_eq!(net.net_forward(&x.scale(2.0), -1.2, &y).unwrap().shape(), (2, 50));
        let y2: Vec<f64> = y.iter().map(|v| v + 0.3).collect();
        assert_ne!(a, net.net_forward(&x, -1.2, &y2).unwrap());
        assert!(net.net_forward(&x, -1.2, &y[..40]).is_err());
    }

    #[test]
    fn skip_composition_is_exact() {
        let (cfg, stft) = small_cfg();
        let net = NeuralDenoiser::new(cfg, stft, 9).unwrap();
        let p = SdeParams::default();
        let x = standard_normal_like(2, 64, &mut root_rng(3));
        let y = x.row_sum();
        let t = 0.42;
        let d = net.denoise(&p, &DenoiserInput::new(&x, t, &y)).unwrap();
        let f = net.net_forward(&x, net.noise_conditioning(&p, t).unwrap(), &y).unwrap();
        let rebuilt = x.add(&apply_lt(&f, &p, t).unwrap()).unwrap();
        assert_eq!(d, rebuilt);
    }

    fn probes(p: &SdeParams, n: usize, m: usize) -> Vec<GradCheckProbe> {
        let mut rng = root_rng(12);
        (0..n)
            .map(|i| {
                let s = standard_normal_like(2, m, &mut rng).scale(0.3);
                let y = s.row_sum();
                GradCheckProbe::from_marginal(&s, &y, p, 0.2 + 0.3 * i as f64, &mut rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (cfg, stft) = small_cfg();
        let net = NeuralDenoiser::new(cfg, stft, 5).unwrap();
        let p = SdeParams::default();
        let pr = probes(&p, 2, 48);
        let err = grad_check(&net, &p, &pr, 200, 1).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
        let bad = grad_check_corrupted(&net, &p, &pr, 200, 1, 1).unwrap();
        assert!(bad > 1e-1, "corrupted gradient not detected: {bad}");
    }

    #[test]
    fn zero_net_zero_target_has_zero_gradient() {
        let (cfg, stft) = small_cfg();
        let net = NeuralDenoiser::zeroed(cfg, stft).unwrap();
        let p = SdeParams::default();
        let zero = StackedSignal::zeros(2, 40).unwrap();
        let probe = GradCheckProbe {
            x_t: zero.clone(),
            t: 0.5,
            y: vec![0.0; 40],
            target: zero,
        };
        let (loss, g) = net.loss_and_grad(&p, &probe.x_t, 0.5, &probe.y, &probe.target).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert_eq!(grad_check(&net, &p, &[probe], 200, 3).unwrap(), 0.0);
    }
}
