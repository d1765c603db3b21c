//! Scripted experiments on synthetic data: budgets, datasets, and the
//! trace, depth, loss and detector-blur studies built on top of training.

use crate::analysis::trace_dispersion;
use crate::error::{Error, Result};
use crate::loss::{LossKind, LossSpec};
use crate::nn::{Network, Real};
use crate::noise::{make_raw_pair, NoiseConfig, TrainingPair};
use crate::rng;
use crate::spectrum::{ProbabilityMap, Spectrum};
use crate::synth::{random_config, synth_spectrum, BandSpec, Dispersion, SynthConfig};
use crate::train::{
    denoise_spectrum, depth_ablation, evaluate_detailed, generate_pairs, train_model, AblationRow, NetConfig,
    TrainConfig,
};

const STREAM_TRACE: u64 = 11;
const VALIDATION_SEED_OFFSET: u64 = 500_000;

/// Data volume and optimization budget for one experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub size: usize,
    pub maps: usize,
    pub pairs_per_map: usize,
    pub validation_maps: usize,
    pub validation_pairs_per_map: usize,
    pub epochs: usize,
    pub lr_decay_every: usize,
    pub depth: usize,
    pub width: usize,
}

impl Budget {
    /// Main CPU run: depth 5 on 64×64 crops, 40 maps × 5 pairs, 30 epochs.
    pub fn desk() -> Self {
        Self {
            size: 64,
            maps: 40,
            pairs_per_map: 5,
            validation_maps: 20,
            validation_pairs_per_map: 1,
            epochs: 30,
            lr_decay_every: 20,
            depth: 5,
            width: 64,
        }
    }

    /// Cheaper setting for comparisons that need many models.
    pub fn comparison() -> Self {
        Self {
            size: 32,
            maps: 24,
            pairs_per_map: 4,
            validation_maps: 16,
            validation_pairs_per_map: 1,
            epochs: 12,
            lr_decay_every: 8,
            depth: 5,
            width: 32,
        }
    }

    /// Seconds-scale run used to exercise the plumbing end to end.
    pub fn smoke() -> Self {
        Self {
            size: 32,
            maps: 4,
            pairs_per_map: 2,
            validation_maps: 2,
            validation_pairs_per_map: 1,
            epochs: 2,
            lr_decay_every: 1,
            depth: 2,
            width: 8,
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            depth: self.depth,
            width: self.width,
        }
    }

    /// Training schedule for this budget; everything else keeps its default.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr_decay_every: self.lr_decay_every,
            pairs_per_map: self.pairs_per_map,
            regenerate_pairs: false,
            seed,
            ..TrainConfig::default()
        }
    }
}

/// Training maps plus a fixed, normalized validation set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub maps: Vec<ProbabilityMap>,
    pub validation_maps: Vec<ProbabilityMap>,
    pub validation: Vec<TrainingPair>,
    pub noise: NoiseConfig,
}

impl Dataset {
    /// Random maps for `budget`; training and validation maps come from
    /// disjoint seed ranges.
    pub fn generate(budget: &Budget, noise: NoiseConfig, seed: u64) -> Result<Self> {
        if budget.maps == 0 || budget.validation_maps == 0 || budget.validation_pairs_per_map == 0 {
            return Err(Error::InvalidArgument(
                "dataset needs at least one training and one validation map".into(),
            ));
        }
        let base = seed.wrapping_mul(1_000_003);
        let render = |offset: u64, count: usize| -> Result<Vec<ProbabilityMap>> {
            (0..count as u64)
                .map(|i| synth_spectrum(&random_config(base.wrapping_add(offset + i), budget.size, budget.size)))
                .collect()
        };
        let maps = render(0, budget.maps)?;
        let validation_maps = render(VALIDATION_SEED_OFFSET, budget.validation_maps)?;
        let validation = generate_pairs(&validation_maps, &noise, budget.validation_pairs_per_map, seed ^ 0x5a5a)?;
        Ok(Self {
            maps,
            validation_maps,
            validation,
            noise,
        })
    }

    /// Same maps, validation pairs regenerated under another noise model.
    pub fn with_validation_noise(&self, noise: &NoiseConfig, per_map: usize, seed: u64) -> Result<Vec<TrainingPair>> {
        generate_pairs(&self.validation_maps, noise, per_map, seed)
    }
}

/// A single-band test spectrum for peak tracing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceCase {
    /// Lorentzian half-width in energy.
    pub linewidth: f64,
    pub background: f64,
    /// Total count of the noisy draw.
    pub count: f64,
}

/// Straight band crossing the default window, with the Fermi edge above the
/// traced range.
pub fn trace_band() -> Dispersion {
    Dispersion::linear(0.05, -0.25, 1.2)
}

/// Energy range traced in the study.
pub const TRACE_ENERGIES: (f64, f64) = (-0.45, -0.05);

pub fn trace_config(size: usize, case: &TraceCase) -> SynthConfig {
    let mut c = SynthConfig::new(size, size).with_band(BandSpec {
        dispersion: trace_band(),
        linewidth: case.linewidth,
        amplitude: 1.0,
    });
    c.background_level = case.background;
    c.fermi_level = 0.0;
    c.temperature = 0.008;
    c
}

/// Momentum where a piecewise-linear band reaches `energy`.
fn linear_band_momentum(band: Dispersion, energy: f64) -> Result<f64> {
    match band {
        Dispersion::LinearKink {
            kink_momentum,
            kink_energy,
            slope_above,
            slope_below,
        } => {
            let slope = if energy >= kink_energy {
                slope_above
            } else {
                slope_below
            };
            Ok(kink_momentum + (energy - kink_energy) / slope)
        }
        _ => Err(Error::InvalidArgument(
            "trace truth needs a piecewise-linear band".into(),
        )),
    }
}

/// RMS distance, in momentum pixels, between the traced peak and the band.
pub fn trace_rms_pixels(s: &Spectrum, band: Dispersion, energies: (f64, f64)) -> Result<f64> {
    let points = trace_dispersion(s, energies, s.energy_axis().step(), None)?;
    if points.is_empty() {
        return Err(Error::DegenerateData("no rows inside the traced energy range".into()));
    }
    let dk = s.momentum_axis().step();
    let mut sum = 0.0;
    for p in &points {
        let d = (p.fit.peak_position - linear_band_momentum(band, p.energy)?) / dk;
        sum += d * d;
    }
    Ok((sum / points.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOutcome {
    pub case: TraceCase,
    pub realization: u64,
    pub raw_rms: f64,
    pub denoised_rms: f64,
}

/// Trace raw and denoised draws of every case, `realizations` times each.
pub fn trace_study<T: Real>(
    net: &Network<T>,
    size: usize,
    cases: &[TraceCase],
    realizations: u64,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<Vec<TraceOutcome>> {
    let mut out = Vec::with_capacity(cases.len() * realizations as usize);
    for (ci, case) in cases.iter().enumerate() {
        let p = synth_spectrum(&trace_config(size, case))?;
        for r in 0..realizations {
            let mut g = rng::stream(seed, &[STREAM_TRACE, ci as u64, r]);
            let raw = make_raw_pair(&p, case.count, noise, &mut g)?;
            let den = denoise_spectrum(net, &raw.noisy)?;
            out.push(TraceOutcome {
                case: *case,
                realization: r,
                raw_rms: trace_rms_pixels(&raw.noisy, trace_band(), TRACE_ENERGIES)?,
                denoised_rms: trace_rms_pixels(&den, trace_band(), TRACE_ENERGIES)?,
            });
        }
    }
    Ok(out)
}

/// Summary over the draws whose raw trace is worse than `raw_threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSummary {
    pub qualifying: usize,
    pub total: usize,
    /// RMS of the denoised errors over the qualifying draws.
    pub pooled_denoised_rms: f64,
    pub worst_denoised_rms: f64,
}

pub fn summarize_trace(outcomes: &[TraceOutcome], raw_threshold: f64) -> TraceSummary {
    let q: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.raw_rms > raw_threshold)
        .map(|o| o.denoised_rms)
        .collect();
    let pooled = if q.is_empty() {
        f64::NAN
    } else {
        (q.iter().map(|d| d * d).sum::<f64>() / q.len() as f64).sqrt()
    };
    TraceSummary {
        qualifying: q.len(),
        total: outcomes.len(),
        pooled_denoised_rms: pooled,
        worst_denoised_rms: q.iter().copied().fold(f64::NAN, f64::max),
    }
}

/// Depth sweep at `budget`, seeds `seed, seed+1, …`.
pub fn depth_study(
    budget: &Budget,
    data: &Dataset,
    depths: &[usize],
    seeds: u64,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let seed_list: Vec<u64> = (0..seeds).map(|i| seed.wrapping_add(i)).collect();
    depth_ablation(
        depths,
        &seed_list,
        &data.maps,
        &data.validation,
        &data.noise,
        budget.width,
        &budget.train_config(seed),
    )
}

/// Validation MS-SSIM of models trained on the combined and the MSE loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComparison {
    pub seed: u64,
    pub combined_ms_ssim: f64,
    pub mse_ms_ssim: f64,
}

pub fn loss_study(budget: &Budget, data: &Dataset, seeds: u64, seed: u64) -> Result<Vec<LossComparison>> {
    let spec = LossSpec::default();
    (0..seeds)
        .map(|i| {
            let s = seed.wrapping_add(i);
            let score = |loss: LossKind| -> Result<f64> {
                let cfg = TrainConfig {
                    loss,
                    ..budget.train_config(s)
                };
                let (_, net) = train_model(&data.maps, &data.validation, &data.noise, &budget.net(), &cfg)?;
                Ok(evaluate_detailed(&net, &data.validation, &spec)?.ms_ssim)
            };
            Ok(LossComparison {
                seed: s,
                combined_ms_ssim: score(LossKind::Combined)?,
                mse_ms_ssim: score(LossKind::Mse)?,
            })
        })
        .collect()
}

/// Combined loss on blurred validation pairs for models trained with and
/// without detector blur.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurComparison {
    pub seed: u64,
    pub with_blur: f64,
    pub without_blur: f64,
}

pub fn blur_study(budget: &Budget, data: &Dataset, seeds: u64, seed: u64) -> Result<Vec<BlurComparison>> {
    let blurred = NoiseConfig {
        psf_enabled: true,
        ..data.noise.clone()
    };
    let clean_detector = NoiseConfig {
        psf_enabled: false,
        ..data.noise.clone()
    };
    let validation = data.with_validation_noise(&blurred, budget.validation_pairs_per_map, seed ^ 0xb1)?;
    let spec = LossSpec::default();
    (0..seeds)
        .map(|i| {
            let s = seed.wrapping_add(i);
            let cfg = budget.train_config(s);
            let score = |noise: &NoiseConfig| -> Result<f64> {
                let (_, net) = train_model(&data.maps, &validation, noise, &budget.net(), &cfg)?;
                Ok(evaluate_detailed(&net, &validation, &spec)?.combined)
            };
            Ok(BlurComparison {
                seed: s,
                with_blur: score(&blurred)?,
                without_blur: score(&clean_detector)?,
            })
        })
        .collect()
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_truth_inverts_the_band() {
        let b = trace_band();
        for e in [-0.4, -0.25, -0.1] {
            let k = linear_band_momentum(b, e).unwrap();
            assert!((b.energy(k) - e).abs() < 1e-12);
        }
        assert!(linear_band_momentum(
            Dispersion::Parabolic {
                center: 0.0,
                curvature: 1.0,
                offset: 0.0
            },
            0.0
        )
        .is_err());
    }

    #[test]
    fn clean_trace_is_accurate() {
        let case = TraceCase {
            linewidth: 0.03,
            background: 0.05,
            count: 0.0,
        };
        let p = synth_spectrum(&trace_config(64, &case)).unwrap();
        let rms = trace_rms_pixels(p.spectrum(), trace_band(), TRACE_ENERGIES).unwrap();
        assert!(rms < 0.1, "rms {rms}");
    }

    #[test]
    fn summary_pools_only_bad_raw_traces() {
        let case = TraceCase {
            linewidth: 0.02,
            background: 0.1,
            count: 100.0,
        };
        let o = |raw_rms, denoised_rms| TraceOutcome {
            case,
            realization: 0,
            raw_rms,
            denoised_rms,
        };
        let s = summarize_trace(&[o(3.0, 0.6), o(1.0, 5.0), o(2.5, 0.8)], 2.0);
        assert_eq!(s.qualifying, 2);
        assert_eq!(s.total, 3);
        assert!((s.pooled_denoised_rms - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.worst_denoised_rms, 0.8);
        assert!(summarize_trace(&[o(1.0, 1.0)], 2.0).pooled_denoised_rms.is_nan());
    }

    #[test]
    fn datasets_are_reproducible_and_disjoint() {
        let b = Budget::smoke();
        let noise = NoiseConfig::for_grid(b.size, b.size);
        let a = Dataset::generate(&b, noise.clone(), 3).unwrap();
        let c = Dataset::generate(&b, noise, 3).unwrap();
        assert_eq!(a.maps[0].values(), c.maps[0].values());
        assert_ne!(a.maps[0].values(), a.validation_maps[0].values());
        assert_eq!(a.validation.len(), b.validation_maps * b.validation_pairs_per_map);
    }
}
