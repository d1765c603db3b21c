//! `specdn`: synthesize, corrupt, train, denoise and analyze spectra.

mod experiment;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use specdn::analysis::{
    extract_mdc, fit_mdc_lorentzian, gaussian_smooth, second_derivative, trace_dispersion, DerivativeAxis, MdcFitResult,
};
use specdn::config::{parse_range, ConfigMap};
use specdn::io::{load_spectrum, save_signed, save_spectrum};
use specdn::nn::load_checkpoint;
use specdn::noise::{apply_detector_psf, sample_log_weighted_count, sample_poisson_counts, NoiseConfig};
use specdn::study::{Budget, Dataset};
use specdn::synth::{random_config, synth_spectrum, SynthConfig};
use specdn::train::{denoise_spectrum, depth_ablation, train_network, NetConfig, TrainConfig};
use specdn::{normalize_to_probability, rng, Error, Result};

#[derive(Parser)]
#[command(
    name = "specdn",
    version,
    about = "Deep denoising of two-dimensional counting spectra"
)]
struct Cli {
    /// Master seed; every subcommand is deterministic given it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path (file or directory, depending on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic probability map (from --config, or random from --seed).
    Synth {
        #[arg(long, default_value_t = 300)]
        height: usize,
        #[arg(long, default_value_t = 300)]
        width: usize,
        /// Write expected counts N·P instead of the normalized map.
        #[arg(long)]
        counts: Option<f64>,
    },
    /// Draw a low-count acquisition from a spectrum.
    Corrupt {
        #[arg(long = "in", visible_alias = "input")]
        input: PathBuf,
        /// Total count `N`, or a `min:max` range sampled log-uniformly
        /// (default: the configured range).
        #[arg(long)]
        count: Option<String>,
        /// Detector blur on every recorded event.
        #[arg(long, value_enum, default_value_t = Switch::On)]
        psf: Switch,
    },
    /// Train a denoiser on synthetic maps; writes a DNW1 checkpoint.
    Train {
        /// Loss history CSV (default: checkpoint path with `.history.csv`).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Apply a checkpoint to a spectrum.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in", visible_alias = "input")]
        input: PathBuf,
    },
    /// Gaussian smoothing; `--sigma s` or `--sigma s_energy,s_momentum` in pixels.
    Smooth {
        #[arg(long = "in", visible_alias = "input")]
        input: PathBuf,
        #[arg(long)]
        sigma: String,
    },
    /// Second-derivative map.
    D2 {
        #[arg(long = "in", visible_alias = "input")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = AxisArg::Momentum)]
        axis: AxisArg,
        #[arg(long, default_value_t = 0.0)]
        presmooth: f64,
    },
    /// Lorentzian fit of one momentum distribution curve.
    Mdcfit {
        #[arg(long = "in", visible_alias = "input")]
        input: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        energy: f64,
        #[arg(long, allow_hyphen_values = true)]
        kmin: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        kmax: Option<f64>,
    },
    /// Row-by-row MDC fits over an energy range.
    Trace {
        #[arg(long = "in", visible_alias = "input")]
        input: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        from: f64,
        #[arg(long, allow_hyphen_values = true)]
        to: f64,
        /// Energy step (default: one row).
        #[arg(long)]
        step: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        kmin: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        kmax: Option<f64>,
    },
    /// Validation loss against network depth, several seeds per depth.
    Ablate {
        #[arg(long, default_value = "2,5,10")]
        depths: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Scripted experiments.
    Experiment {
        #[command(subcommand)]
        which: ExperimentCmd,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Data behind every figure: spectra panels, MDC fits, ablation tables, loss history.
    Figs {
        #[arg(long, value_enum, default_value_t = experiment::Scale::Desk)]
        scale: experiment::Scale,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Energy,
    Momentum,
}

impl From<AxisArg> for DerivativeAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Energy => DerivativeAxis::Energy,
            AxisArg::Momentum => DerivativeAxis::Momentum,
        }
    }
}

/// Exit status for an error: 2 for usage and configuration problems, 4 for
/// training divergence, 3 for everything data-related.
fn exit_status(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::UnsupportedFilterSize(_) => 2,
        Error::DivergenceDetected { .. } => 4,
        _ => 3,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ZeroSpectrum => "zero_spectrum",
        Error::Io { .. } => "io",
        Error::FormatViolation(_) => "format",
        Error::InvalidArgument(_) => "usage",
        Error::Config(_) => "config",
        Error::ShapeMismatch { .. } => "shape",
        Error::DegenerateConfig(_) => "degenerate_config",
        Error::UnsupportedFilterSize(_) => "filter_size",
        Error::TooSmallForScales { .. } => "too_small",
        Error::TooFewSamples { .. } => "too_few_samples",
        Error::OutOfRange { .. } => "out_of_range",
        Error::DegenerateData(_) => "degenerate_data",
        Error::NonSquareInput { .. } => "non_square",
        Error::DivergenceDetected { .. } => "divergence",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let status = exit_status(&e);
            eprintln!(
                "error kind={} status={status} message={:?}",
                error_kind(&e),
                e.to_string()
            );
            ExitCode::from(status)
        }
    }
}

fn config(cli: &Cli) -> Result<ConfigMap> {
    match &cli.config {
        Some(p) => ConfigMap::load(p),
        None => Ok(ConfigMap::default()),
    }
}

fn out_path(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("this subcommand needs --out".into()))
}

fn log(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

/// CSV text goes to `--out` when given, otherwise to stdout.
fn emit_csv(cli: &Cli, text: &str) -> Result<()> {
    match &cli.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { height, width, counts } => {
            let mut map = config(&cli)?;
            let cfg = if cli.config.is_some() {
                let c = SynthConfig::from_config(&mut map)?;
                map.finish()?;
                c
            } else {
                random_config(cli.seed, *height, *width)
            };
            let p = synth_spectrum(&cfg)?;
            let s = match counts {
                Some(n) => p.expected_counts(*n),
                None => p.into_spectrum(),
            };
            save_spectrum(&s, out_path(&cli)?)?;
            log(&cli, format!("wrote {}x{} spectrum", cfg.height, cfg.width));
        }
        Command::Corrupt { input, count, psf } => {
            let s = load_spectrum(input)?;
            let mut map = config(&cli)?;
            let (h, w) = s.dim();
            let mut noise = NoiseConfig::from_config(&mut map, h, w)?;
            map.finish()?;
            noise.psf_enabled = *psf == Switch::On;
            let fixed = match count.as_deref() {
                None => None,
                Some(raw) if raw.contains(':') => {
                    (noise.count_min, noise.count_max) = parse_range(raw).map_err(Error::InvalidArgument)?;
                    None
                }
                Some(raw) => Some(
                    raw.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("--count expects N or min:max, got '{raw}'")))?,
                ),
            };
            noise.validate()?;
            let mut r = rng::seeded(cli.seed);
            let n = match fixed {
                Some(n) if !(n >= 0.0 && n.is_finite()) => {
                    return Err(Error::InvalidArgument(format!(
                        "--count must be a finite N ≥ 0, got {n}"
                    )))
                }
                Some(n) => n,
                None => sample_log_weighted_count(&noise, &mut r),
            };
            let counts = if n == 0.0 {
                s.scaled(0.0)?
            } else {
                let p = normalize_to_probability(&s)?;
                let c = sample_poisson_counts(&p, n, &mut r)?;
                if noise.psf_enabled {
                    apply_detector_psf(&c, &noise, &mut r)?
                } else {
                    c
                }
            };
            save_spectrum(&counts, out_path(&cli)?)?;
            log(
                &cli,
                format!("total count {n:.0}, recorded {:.0}", counts.total_count()),
            );
        }
        Command::Train { history } => train(&cli, history.as_deref())?,
        Command::Denoise { checkpoint, input } => {
            let net = load_checkpoint(checkpoint)?;
            let s = load_spectrum(input)?;
            let t = std::time::Instant::now();
            let out = denoise_spectrum(&net, &s)?;
            save_spectrum(&out, out_path(&cli)?)?;
            log(
                &cli,
                format!(
                    "denoised {}x{} in {:.2} s",
                    s.height(),
                    s.width(),
                    t.elapsed().as_secs_f64()
                ),
            );
        }
        Command::Smooth { input, sigma } => {
            let s = load_spectrum(input)?;
            let sig = parse_sigma(sigma)?;
            save_spectrum(&gaussian_smooth(&s, sig)?, out_path(&cli)?)?;
        }
        Command::D2 { input, axis, presmooth } => {
            let s = load_spectrum(input)?;
            save_signed(&second_derivative(&s, (*axis).into(), *presmooth)?, out_path(&cli)?)?;
        }
        Command::Mdcfit {
            input,
            energy,
            kmin,
            kmax,
        } => {
            let s = load_spectrum(input)?;
            let mut mdc = extract_mdc(&s, *energy)?;
            if kmin.is_some() || kmax.is_some() {
                mdc = mdc.window(kmin.unwrap_or(f64::NEG_INFINITY), kmax.unwrap_or(f64::INFINITY))?;
            }
            let fit = fit_mdc_lorentzian(&mdc, None)?;
            let mut text = String::from(FIT_HEADER);
            push_fit_row(&mut text, None, mdc.energy, &fit);
            emit_csv(&cli, &text)?;
        }
        Command::Trace {
            input,
            from,
            to,
            step,
            kmin,
            kmax,
        } => {
            let s = load_spectrum(input)?;
            let step = step.unwrap_or_else(|| s.energy_axis().step());
            let window = (kmin.is_some() || kmax.is_some())
                .then(|| (kmin.unwrap_or(f64::NEG_INFINITY), kmax.unwrap_or(f64::INFINITY)));
            let points = trace_dispersion(&s, (*from, *to), step, window)?;
            let mut text = String::from(FIT_HEADER);
            for p in &points {
                push_fit_row(&mut text, None, p.energy, &p.fit);
            }
            emit_csv(&cli, &text)?;
        }
        Command::Ablate { depths, seeds } => ablate(&cli, depths, *seeds)?,
        Command::Experiment {
            which: ExperimentCmd::Figs { scale },
        } => {
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("figs"));
            experiment::run_figs(*scale, &dir, cli.seed, cli.quiet)?;
        }
    }
    Ok(())
}

pub(crate) const FIT_HEADER: &str = "energy,peak_position,width,amplitude,offset,slope,residual_norm,converged\n";

pub(crate) fn push_fit_row(text: &mut String, prefix: Option<&str>, energy: f64, f: &MdcFitResult) {
    if let Some(p) = prefix {
        let _ = write!(text, "{p},");
    }
    let _ = writeln!(
        text,
        "{energy},{},{},{},{},{},{},{}",
        f.peak_position, f.width, f.amplitude, f.background.0, f.background.1, f.residual_norm, f.converged
    );
}

fn parse_sigma(raw: &str) -> Result<(f64, f64)> {
    let bad = || Error::InvalidArgument(format!("--sigma expects 's' or 's_energy,s_momentum', got '{raw}'"));
    let parts: Vec<f64> = raw
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match parts[..] {
        [s] => Ok((s, s)),
        [a, b] => Ok((a, b)),
        _ => Err(bad()),
    }
}

/// Training and validation data described by config keys, plus the noise model.
fn dataset(map: &mut ConfigMap, seed: u64) -> Result<Dataset> {
    let d = Budget::desk();
    let budget = Budget {
        size: map.take_or("map_size", d.size)?,
        maps: map.take_or("maps", d.maps)?,
        validation_maps: map.take_or("validation_maps", d.validation_maps)?,
        validation_pairs_per_map: map.take_or("validation_pairs_per_map", d.validation_pairs_per_map)?,
        ..d
    };
    let noise = NoiseConfig::from_config(map, budget.size, budget.size)?;
    Dataset::generate(&budget, noise, seed)
}

fn train(cli: &Cli, history: Option<&Path>) -> Result<()> {
    let out = out_path(cli)?.to_path_buf();
    let mut map = config(cli)?;
    if !map.contains("seed") {
        map.set("seed", cli.seed);
    }
    let data = dataset(&mut map, cli.seed)?;
    let net = NetConfig::from_config(&mut map)?;
    let mut cfg = TrainConfig::from_config(&mut map)?;
    map.finish()?;
    cfg.checkpoint = Some(out.clone());
    let init = specdn::nn::Network::<f32>::init(net.depth, net.width, cfg.seed)?;
    let quiet = cli.quiet;
    let (report, _) = train_network(init, &data.maps, &data.validation, &data.noise, &cfg, |e| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  train {:.5}  val {:.5}  lr {:.1e}",
                e.epoch + 1,
                e.train_loss,
                e.val_loss,
                e.learning_rate
            );
        }
    })?;
    let history = history
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("history.csv"));
    std::fs::write(&history, report.history_csv()).map_err(|e| Error::Io {
        path: history.clone(),
        source: e,
    })?;
    log(
        cli,
        format!(
            "checkpoint {} in {:.1} s",
            out.display(),
            report.wall_time.as_secs_f64()
        ),
    );
    Ok(())
}

fn ablate(cli: &Cli, depths: &str, seeds: u64) -> Result<()> {
    let depths: Vec<usize> = depths
        .split(',')
        .map(|d| {
            d.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad depth '{d}' in --depths")))
        })
        .collect::<Result<_>>()?;
    if seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be ≥ 1".into()));
    }
    let mut map = config(cli)?;
    let data = dataset(&mut map, cli.seed)?;
    let width: usize = map.take_or("width", specdn::nn::DEFAULT_WIDTH)?;
    let cfg = TrainConfig::from_config(&mut map)?;
    map.finish()?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| cli.seed.wrapping_add(i)).collect();
    log(cli, format!("ablating depths {depths:?} over {seeds} seeds"));
    let rows = depth_ablation(
        &depths,
        &seed_list,
        &data.maps,
        &data.validation,
        &data.noise,
        width,
        &cfg,
    )?;
    emit_csv(cli, &experiment::ablation_csv(&rows))
}
