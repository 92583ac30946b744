//! `edsep` command-line front end.
//!
//! Exit codes: 0 success, 1 validation or runtime failure, 2 usage or
//! configuration error, 3 I/O error.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;

use edsep::config::{load_config, RunConfig};
use edsep::data::{self, make_manifest, DatasetKind, DatasetSpec, Manifest, MANIFEST_FILE};
use edsep::denoise::{Backend, GaussianOraclePrior, NeuralDenoiser};
use edsep::dsp::{read_wav, write_spectrogram, write_wav, StftPlan};
use edsep::eval::{evaluate_instance, EvalReport};
use edsep::rng::{stream_rng, Purpose};
use edsep::sample::{run_sampler, stochastic_sample_observed, SamplerConfig, SamplerKind, TrajectoryRecorder};
use edsep::sde::{
    eigen_energies, forward_em_simulate, forward_ensemble, marginal_mean, trajectory_csv, SdeParams,
};
use edsep::train::{load_checkpoint, save_checkpoint, train_loop, TrainOutputs, TrainState};
use edsep::{Error, StackedSignal};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "edsep", version, about = "Diffusion-based single-channel source separation")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set sde.gamma=3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-instance parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte-Carlo check of the forward marginals at T.
    ValidateSde {
        #[arg(long, default_value_t = 20_000)]
        paths: usize,
        #[arg(long, default_value_t = 2_000)]
        em_steps: usize,
        /// Samples per source of the fixed test signal.
        #[arg(long, default_value_t = 16)]
        num_samples: usize,
    },
    /// Write a synthetic dataset (WAV triplets plus manifest).
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the neural denoiser.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train until this many optimizer steps have been taken.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Separate mixture WAVs into per-source WAVs.
    Separate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Score estimates against a manifest (separating first when no
    /// estimate directory is given).
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<mix stem>_s<k>.wav` estimates.
        #[arg(long)]
        estimates: Option<PathBuf>,
        /// Report path (default `<out_dir>/report.json`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Write a forward or sampler trajectory as CSV.
    DumpTrajectory {
        #[arg(long, value_enum, default_value_t = TrajectoryMode::Sampler)]
        mode: TrajectoryMode,
        /// Dataset instance to use.
        #[arg(long, default_value_t = 0)]
        instance: u64,
        #[arg(long, default_value_t = 100)]
        em_steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Write a WAV's log-magnitude STFT as PGM plus CSV.
    Spectrogram {
        input: PathBuf,
        /// Output stem (default: input path without extension).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gaussian data, oracle denoiser, evaluation report.
    OracleDemo {
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TrajectoryMode {
    Forward,
    Sampler,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SamplerArg {
    Algorithm1,
    Ode,
    ReverseEm,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Algorithm1 => SamplerKind::Algorithm1,
            SamplerArg::Ode => SamplerKind::Ode,
            SamplerArg::ReverseEm => SamplerKind::ReverseEm,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum BackendArg {
    Neural,
    Oracle,
}

#[derive(Args, Debug, Clone)]
struct SamplingArgs {
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    #[arg(long, value_enum, default_value_t = BackendArg::Neural)]
    backend: BackendArg,
    /// Sampler steps N.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    no_mean_correct: bool,
    #[arg(long)]
    reuse_denoise: bool,
    /// Trained model for the neural backend (default `paths.checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => EXIT_IO,
            Error::Config(_) | Error::InvalidParam(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn init_logging() {
    let env = env_logger::Env::new().filter_or("EDSEP_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<i32> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build().map_err(|e| usage(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::ValidateSde {
            paths,
            em_steps,
            num_samples,
        } => validate_sde(&cfg, paths, em_steps, num_samples),
        Command::GenData { out, count } => gen_data(cfg, out, count),
        Command::Train { out, steps, resume } => train(cfg, out, steps, resume),
        Command::Separate { inputs, out, sampling } => separate(cfg, &inputs, out, &sampling),
        Command::Evaluate {
            manifest,
            estimates,
            out,
            sampling,
        } => evaluate(cfg, &manifest, estimates, out, &sampling),
        Command::DumpTrajectory {
            mode,
            instance,
            em_steps,
            out,
            sampling,
        } => dump_trajectory(cfg, mode, instance, em_steps, &out, &sampling),
        Command::Spectrogram { input, out } => spectrogram(&cfg, &input, out),
        Command::OracleDemo { count, out, sampling } => oracle_demo(cfg, count, out, &sampling),
    })
}

fn validate_sde(cfg: &RunConfig, n_paths: usize, em_steps: usize, m: usize) -> CliResult<i32> {
    if n_paths < 2 {
        return Err(usage("--paths must be at least 2"));
    }
    let p = cfg.sde;
    let k = 2;
    let mut rng = stream_rng(cfg.train.seed, Purpose::Trajectory, u64::MAX);
    let s = edsep::sde::standard_normal_like(k, m, &mut rng);
    let y = s.row_sum();
    let ends = forward_ensemble(&s, &y, &p, em_steps, n_paths, cfg.train.seed)?;
    let mu = marginal_mean(&s, &y, &p, p.t_max)?;
    let n = n_paths as f64;

    let mut mean = vec![0.0; k * m];
    for x in &ends {
        for (a, v) in mean.iter_mut().zip(x.as_slice()) {
            *a += v / n;
        }
    }
    let mut var = vec![0.0; k * m];
    for x in &ends {
        for ((a, v), mu_i) in var.iter_mut().zip(x.as_slice()).zip(&mean) {
            *a += (v - mu_i).powi(2) / (n - 1.0);
        }
    }
    let worst_z = mean
        .iter()
        .zip(mu.as_slice())
        .zip(&var)
        .map(|((a, b), v)| (a - b).abs() / (v / n).sqrt())
        .fold(0.0, f64::max);

    let (mut e1, mut e2) = (0.0, 0.0);
    for x in &ends {
        let (a, b) = eigen_energies(&x.sub(&mu)?);
        e1 += a / n;
        e2 += b / n;
    }
    let ns = p.noise_scales(p.t_max)?;
    let rows = [
        ("mean max |z|", worst_z, 4.0, worst_z <= 4.0),
        ("P variance", e1, ns.lambda1, (e1 / ns.lambda1 - 1.0).abs() <= 0.05),
        ("Pbar variance", e2, ns.lambda2, (e2 / ns.lambda2 - 1.0).abs() <= 0.05),
    ];
    println!("{:<16} {:>14} {:>14}  result", "check", "measured", "target");
    for (name, got, want, ok) in rows {
        println!(
            "{name:<16} {got:>14.6} {want:>14.6}  {}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(if rows.iter().all(|r| r.3) { EXIT_OK } else { EXIT_FAILURE })
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.paths.out_dir.clone())
}

fn gen_data(mut cfg: RunConfig, out: Option<PathBuf>, count: Option<usize>) -> CliResult<i32> {
    if let Some(c) = count {
        cfg.data.count = c;
    }
    let dir = out
        .or_else(|| cfg.paths.data_dir.clone())
        .unwrap_or_else(|| cfg.paths.out_dir.join("data"));
    let manifest = make_manifest(&cfg.data, &dir)?;
    cfg.write_resolved(&dir)?;
    println!("wrote {} instances to {}", manifest.instances.len(), dir.display());
    Ok(EXIT_OK)
}

fn train(cfg: RunConfig, out: Option<PathBuf>, steps: Option<u64>, resume: Option<PathBuf>) -> CliResult<i32> {
    let dir = out_dir(&cfg, out);
    let mut state = match &resume {
        Some(path) => {
            let st = load_checkpoint(path)?;
            info!("resuming from {} at step {}", path.display(), st.step);
            st
        }
        None => {
            let net = NeuralDenoiser::new(cfg.net_config(), cfg.stft, cfg.train.seed)?;
            TrainState::new(net, cfg.sde, cfg.train.clone(), cfg.data.clone())?
        }
    };
    let until = steps.unwrap_or(state.config.total_steps);
    cfg.write_resolved(&dir)?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Failure::from(Error::Io {
            path: log_path.clone(),
            source: e,
        }))?;
    let ckpt_dir = dir.join("checkpoints");
    let summary = train_loop(
        &mut state,
        until,
        TrainOutputs {
            log: Some(&mut log),
            checkpoint_dir: Some(&ckpt_dir),
        },
    )?;
    let model = dir.join("model.edsp");
    save_checkpoint(&state, &model)?;
    println!(
        "trained to step {} (ema loss {:.6}, boundary samples {}/{}); model at {}",
        state.step,
        summary.ema_loss,
        summary.branches.boundary,
        summary.branches.boundary + summary.branches.dsm,
        model.display()
    );
    Ok(EXIT_OK)
}

/// Backend, SDE parameters and sampler settings for a sampling command.
fn sampling_setup(cfg: &RunConfig, args: &SamplingArgs) -> CliResult<(Backend, SdeParams, SamplerConfig)> {
    let mut sc = cfg.sample.clone();
    if let Some(s) = args.sampler {
        sc.sampler = s.into();
    }
    if let Some(n) = args.steps {
        sc.n_steps = n;
    }
    if args.no_mean_correct {
        sc.mean_correct = false;
    }
    if args.reuse_denoise {
        sc.reuse_denoise = true;
    }
    sc.validate()?;
    match args.backend {
        BackendArg::Oracle => {
            let prior = GaussianOraclePrior::new(cfg.data.sigma_s)?;
            Ok((Backend::Oracle(prior), cfg.sde, sc))
        }
        BackendArg::Neural => {
            let path = args
                .checkpoint
                .clone()
                .or_else(|| cfg.paths.checkpoint.clone())
                .ok_or_else(|| usage("the neural backend needs --checkpoint or paths.checkpoint"))?;
            let state = load_checkpoint(&path)?;
            if state.sde != cfg.sde {
                warn!("using the SDE parameters stored in {}", path.display());
            }
            sc.num_sources = state.net.config().num_sources;
            Ok((Backend::Neural(state.net), state.sde, sc))
        }
    }
}

fn separate(cfg: RunConfig, inputs: &[PathBuf], out: Option<PathBuf>, args: &SamplingArgs) -> CliResult<i32> {
    let (backend, p, sc) = sampling_setup(&cfg, args)?;
    let dir = out_dir(&cfg, out);
    cfg.write_resolved(&dir)?;
    let results: Vec<CliResult<Vec<PathBuf>>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, input)| {
            let (y, sr) = read_wav(input)?;
            if sr != cfg.stft.sample_rate {
                warn!("{}: sample rate {sr} differs from the configured {}", input.display(), cfg.stft.sample_rate);
            }
            let mut rng = stream_rng(sc.seed, Purpose::Sampling, i as u64);
            let est = run_sampler(&backend, &y, &p, &sc, &mut rng)?;
            let stem = file_stem(input);
            let mut written = Vec::new();
            for (k, row) in est.rows().enumerate() {
                let path = dir.join(format!("{stem}_s{k}.wav"));
                write_wav(&path, row, sr)?;
                written.push(path);
            }
            Ok(written)
        })
        .collect();
    for r in results {
        for path in r? {
            println!("{}", path.display());
        }
    }
    Ok(EXIT_OK)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_sources(paths: &[PathBuf]) -> CliResult<StackedSignal> {
    let rows = paths
        .iter()
        .map(|p| read_wav(p).map(|(x, _)| x))
        .collect::<edsep::Result<Vec<_>>>()?;
    Ok(StackedSignal::from_rows(&rows)?)
}

fn evaluate(
    cfg: RunConfig,
    manifest_path: &Path,
    estimates: Option<PathBuf>,
    out: Option<PathBuf>,
    args: &SamplingArgs,
) -> CliResult<i32> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let setup = match estimates {
        Some(_) => None,
        None => Some(sampling_setup(&cfg, args)?),
    };
    let reports = manifest
        .instances
        .par_iter()
        .map(|entry| -> CliResult<_> {
            let refs = read_sources(&entry.s_paths.iter().map(|p| base.join(p)).collect::<Vec<_>>())?;
            let (y, _) = read_wav(base.join(&entry.mix_path))?;
            let est = match (&estimates, &setup) {
                (Some(dir), _) => {
                    let stem = file_stem(&entry.mix_path);
                    let paths: Vec<PathBuf> = (0..refs.num_sources())
                        .map(|k| dir.join(format!("{stem}_s{k}.wav")))
                        .collect();
                    read_sources(&paths)?
                }
                (None, Some((backend, p, sc))) => {
                    let mut rng = stream_rng(sc.seed, Purpose::Sampling, entry.id);
                    run_sampler(backend, &y, p, sc, &mut rng)?
                }
                (None, None) => unreachable!("sampling setup exists when no estimates are given"),
            };
            Ok(evaluate_instance(entry.id, &est, &refs, &y)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = EvalReport::from_instances(reports);
    let path = out.unwrap_or_else(|| cfg.paths.out_dir.join("report.json"));
    write_report(&cfg, &report, &path)?;
    print!("{}", report.table());
    Ok(EXIT_OK)
}

fn write_report(cfg: &RunConfig, report: &EvalReport, path: &Path) -> CliResult<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    cfg.write_resolved(dir)?;
    let text = serde_json::to_string_pretty(report).map_err(Error::from)?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn dump_trajectory(
    cfg: RunConfig,
    mode: TrajectoryMode,
    instance: u64,
    em_steps: usize,
    out: &Path,
    args: &SamplingArgs,
) -> CliResult<i32> {
    let pair = data::generate(&cfg.data, instance)?;
    let csv = match mode {
        TrajectoryMode::Forward => {
            let mut rng = stream_rng(cfg.train.seed, Purpose::Trajectory, instance);
            let tr = forward_em_simulate(&pair.sources, &pair.mixture, &cfg.sde, em_steps, true, &mut rng)?;
            trajectory_csv(&tr)
        }
        TrajectoryMode::Sampler => {
            let (backend, p, sc) = sampling_setup(&cfg, args)?;
            let mut rng = stream_rng(sc.seed, Purpose::Sampling, instance);
            let mut rec = TrajectoryRecorder::default();
            stochastic_sample_observed(&backend, &pair.mixture, &p, &sc, &mut rng, &mut rec)?;
            rec.to_csv()
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        cfg.write_resolved(dir)?;
    }
    std::fs::write(out, csv).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(EXIT_OK)
}

fn spectrogram(cfg: &RunConfig, input: &Path, out: Option<PathBuf>) -> CliResult<i32> {
    let (x, _) = read_wav(input)?;
    let plan = StftPlan::new(cfg.stft)?;
    let spec = plan.analyze(&x)?;
    let stem = out.unwrap_or_else(|| input.with_extension(""));
    write_spectrogram(&stem, cfg.stft.num_frames(x.len()), cfg.stft.num_bins(), &spec)?;
    println!("{}.pgm", stem.display());
    Ok(EXIT_OK)
}

fn oracle_demo(mut cfg: RunConfig, count: usize, out: Option<PathBuf>, args: &SamplingArgs) -> CliResult<i32> {
    cfg.data.kind = DatasetKind::Gaussian;
    cfg.data.count = count;
    let args = SamplingArgs {
        backend: BackendArg::Oracle,
        ..args.clone()
    };
    let (backend, p, sc) = sampling_setup(&cfg, &args)?;
    let spec: DatasetSpec = cfg.data.clone();
    let reports = (0..count as u64)
        .into_par_iter()
        .map(|id| -> CliResult<_> {
            let pair = data::generate(&spec, id)?;
            let mut rng = stream_rng(sc.seed, Purpose::Sampling, id);
            let est = run_sampler(&backend, &pair.mixture, &p, &sc, &mut rng)?;
            Ok(evaluate_instance(id, &est, &pair.sources, &pair.mixture)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = EvalReport::from_instances(reports);
    let dir = out_dir(&cfg, out);
    write_report(&cfg, &report, &dir.join("report.json"))?;
    print!("{}", report.table());
    Ok(EXIT_OK)
}

/// Manifest file inside a dataset directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
