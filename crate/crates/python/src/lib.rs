//! Python bindings. Signals cross the boundary as lists of floats; stacked
//! signals are lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use edsep::config::RunConfig;
use edsep::data::{self, DatasetKind, DatasetSpec};
use edsep::denoise::{Backend, GaussianOraclePrior, NeuralDenoiser};
use edsep::eval;
use edsep::rng::{stream_rng, Purpose};
use edsep::sample::{run_sampler, SamplerConfig, SamplerKind};
use edsep::train::{load_checkpoint, save_checkpoint, train_loop, TrainOutputs, TrainState};
use edsep::{sde, Error, StackedSignal};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::NonFiniteActivation(_) | Error::NonFiniteLoss(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn stacked(rows: Vec<Vec<f64>>) -> PyResult<StackedSignal> {
    StackedSignal::from_rows(&rows).map_err(to_py)
}

/// Schedule parameters of the mixing SDE.
#[pyclass(name = "SdeParams", module = "edsep_py")]
#[derive(Clone)]
struct PySdeParams {
    inner: sde::SdeParams,
}

#[pymethods]
impl PySdeParams {
    #[new]
    #[pyo3(signature = (gamma=2.0, sigma_min=0.05, sigma_max=0.5, t_eps=0.03, t_max=1.0))]
    fn new(gamma: f64, sigma_min: f64, sigma_max: f64, t_eps: f64, t_max: f64) -> PyResult<Self> {
        let inner = sde::SdeParams::new(gamma, sigma_min, sigma_max, t_eps, t_max).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn t_eps(&self) -> f64 {
        self.inner.t_eps
    }

    #[getter]
    fn t_max(&self) -> f64 {
        self.inner.t_max
    }

    /// `(lambda1, lambda2, sigma)` at time `t`.
    fn noise_scales(&self, t: f64) -> PyResult<(f64, f64, f64)> {
        let ns = self.inner.noise_scales(t).map_err(to_py)?;
        Ok((ns.lambda1, ns.lambda2, ns.sigma))
    }

    fn diffusion_g(&self, t: f64) -> PyResult<f64> {
        self.inner.diffusion_g(t).map_err(to_py)
    }

    fn marginal_mean(&self, sources: Vec<Vec<f64>>, mixture: Vec<f64>, t: f64) -> PyResult<Vec<Vec<f64>>> {
        let s = stacked(sources)?;
        Ok(sde::marginal_mean(&s, &mixture, &self.inner, t).map_err(to_py)?.to_rows())
    }

    fn apply_lt(&self, x: Vec<Vec<f64>>, t: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(sde::apply_lt(&stacked(x)?, &self.inner, t).map_err(to_py)?.to_rows())
    }

    fn apply_lt_inverse(&self, x: Vec<Vec<f64>>, t: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(sde::apply_lt_inverse(&stacked(x)?, &self.inner, t).map_err(to_py)?.to_rows())
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!(
            "SdeParams(gamma={}, sigma_min={}, sigma_max={}, t_eps={}, t_max={})",
            p.gamma, p.sigma_min, p.sigma_max, p.t_eps, p.t_max
        )
    }
}

/// A denoiser backend: the Gaussian oracle or a trained network.
#[pyclass(name = "Denoiser", module = "edsep_py")]
struct PyDenoiser {
    backend: Backend,
    sde: sde::SdeParams,
    num_sources: usize,
}

#[pymethods]
impl PyDenoiser {
    #[staticmethod]
    #[pyo3(signature = (sigma_s=0.1, params=None, num_sources=2))]
    fn oracle(sigma_s: f64, params: Option<PySdeParams>, num_sources: usize) -> PyResult<Self> {
        Ok(Self {
            backend: Backend::Oracle(GaussianOraclePrior::new(sigma_s).map_err(to_py)?),
            sde: params.map(|p| p.inner).unwrap_or_default(),
            num_sources,
        })
    }

    /// Network and SDE parameters from a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let st = load_checkpoint(&path).map_err(to_py)?;
        let num_sources = st.net.config().num_sources;
        Ok(Self {
            backend: Backend::Neural(st.net),
            sde: st.sde,
            num_sources,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.backend {
            Backend::Neural(_) => "neural",
            Backend::Oracle(_) => "oracle",
        }
    }

    /// Draws separated sources for `mixture`.
    #[pyo3(signature = (mixture, sampler="algorithm1", n_steps=29, seed=0, mean_correct=true, reuse_denoise=false))]
    fn separate(
        &self,
        py: Python<'_>,
        mixture: Vec<f64>,
        sampler: &str,
        n_steps: usize,
        seed: u64,
        mean_correct: bool,
        reuse_denoise: bool,
    ) -> PyResult<Vec<Vec<f64>>> {
        let kind: SamplerKind = sampler.parse().map_err(to_py)?;
        let cfg = SamplerConfig {
            sampler: kind,
            n_steps,
            mean_correct,
            reuse_denoise,
            num_sources: self.num_sources,
            seed,
            ..SamplerConfig::default()
        };
        let out = py.allow_threads(|| {
            let mut rng = stream_rng(seed, Purpose::Sampling, 0);
            run_sampler(&self.backend, &mixture, &self.sde, &cfg, &mut rng)
        });
        Ok(out.map_err(to_py)?.to_rows())
    }
}

/// Trainer state; `RunConfig` JSON selects model, data and optimiser.
#[pyclass(name = "Trainer", module = "edsep_py")]
struct PyTrainer {
    state: TrainState,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config_json="{}"))]
    fn new(config_json: &str) -> PyResult<Self> {
        let cfg = RunConfig::from_json(config_json).map_err(to_py)?;
        let net = NeuralDenoiser::new(cfg.net_config(), cfg.stft, cfg.train.seed).map_err(to_py)?;
        let state = TrainState::new(net, cfg.sde, cfg.train, cfg.data).map_err(to_py)?;
        Ok(Self { state })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: load_checkpoint(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    /// Trains until `until_step`; returns `(final_loss, ema_loss)`.
    fn train(&mut self, py: Python<'_>, until_step: u64) -> PyResult<(f64, f64)> {
        let state = &mut self.state;
        let summary = py
            .allow_threads(|| train_loop(state, until_step, TrainOutputs::default()))
            .map_err(to_py)?;
        Ok((summary.final_loss, summary.ema_loss))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.state, &path).map_err(to_py)
    }

    fn denoiser(&self) -> PyDenoiser {
        PyDenoiser {
            backend: Backend::Neural(self.state.net.clone()),
            sde: self.state.sde,
            num_sources: self.state.net.config().num_sources,
        }
    }
}

/// `(sources, mixture)` for instance `index` of a synthetic dataset.
#[pyfunction]
#[pyo3(signature = (kind="tonal_vs_noise", index=0, num_samples=16000, seed=0, sigma_s=0.1))]
fn generate_pair(
    kind: &str,
    index: u64,
    num_samples: usize,
    seed: u64,
    sigma_s: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let kind = match kind {
        "gaussian" => DatasetKind::Gaussian,
        "tonal_vs_noise" => DatasetKind::TonalVsNoise,
        other => return Err(PyValueError::new_err(format!("unknown dataset kind `{other}`"))),
    };
    let spec = DatasetSpec {
        kind,
        num_samples,
        seed,
        sigma_s,
        count: (index + 1) as usize,
        ..DatasetSpec::default()
    };
    let pair = data::generate(&spec, index).map_err(to_py)?;
    Ok((pair.sources.to_rows(), pair.mixture))
}

#[pyfunction]
fn si_sdr(estimate: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    eval::si_sdr(&estimate, &reference).map_err(to_py)
}

/// `(permutation, per_source_db, mean_db)`.
#[pyfunction]
fn pit_eval(estimates: Vec<Vec<f64>>, references: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, Vec<f64>, f64)> {
    let r = eval::pit_eval(&stacked(estimates)?, &stacked(references)?).map_err(to_py)?;
    Ok((r.permutation.as_slice().to_vec(), r.per_source_db, r.mean_db))
}

#[pyfunction]
fn si_sdr_improvement(estimates: Vec<Vec<f64>>, references: Vec<Vec<f64>>, mixture: Vec<f64>) -> PyResult<f64> {
    eval::si_sdr_improvement(&stacked(estimates)?, &stacked(references)?, &mixture).map_err(to_py)
}

#[pymodule]
pub fn edsep_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySdeParams>()?;
    m.add_class::<PyDenoiser>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(generate_pair, m)?)?;
    m.add_function(wrap_pyfunction!(si_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(pit_eval, m)?)?;
    m.add_function(wrap_pyfunction!(si_sdr_improvement, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
