//! Training-pair generation: log-weighted total counts, per-pixel Poisson
//! sampling of a probability map, and random Gaussian detector splats.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};

use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::spectrum::{ProbabilityMap, Spectrum};
use crate::train::normalize_pair;

/// Grid size at which the default count range is quoted.
pub const REFERENCE_PIXELS: f64 = 300.0 * 300.0;
pub const DEFAULT_COUNT_MIN: f64 = 9.0e3;
pub const DEFAULT_COUNT_MAX: f64 = 3.0e6;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub count_min: f64,
    pub count_max: f64,
    pub psf_enabled: bool,
    /// Blob standard deviation range in pixels.
    pub psf_sigma_range: (f64, f64),
    /// Blob mass range.
    pub psf_amplitude_range: (f64, f64),
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            count_min: DEFAULT_COUNT_MIN,
            count_max: DEFAULT_COUNT_MAX,
            psf_enabled: true,
            psf_sigma_range: (0.8, 2.0),
            psf_amplitude_range: (0.5, 1.5),
            seed: 0,
        }
    }
}

impl NoiseConfig {
    /// Defaults with the count range rescaled to a `height × width` grid so the
    /// average count per pixel spans the same 0.1–33.3 as on 300 × 300.
    pub fn for_grid(height: usize, width: usize) -> Self {
        let f = (height * width) as f64 / REFERENCE_PIXELS;
        Self {
            count_min: DEFAULT_COUNT_MIN * f,
            count_max: DEFAULT_COUNT_MAX * f,
            ..Self::default()
        }
    }

    /// Reads `count_min`, `count_max`, `psf`, `psf_sigma_range`,
    /// `psf_amplitude_range` and `noise_seed` on top of [`NoiseConfig::for_grid`].
    pub fn from_config(map: &mut ConfigMap, height: usize, width: usize) -> Result<Self> {
        let d = Self::for_grid(height, width);
        let cfg = Self {
            count_min: map.take_or("count_min", d.count_min)?,
            count_max: map.take_or("count_max", d.count_max)?,
            psf_enabled: map.take_or("psf", d.psf_enabled)?,
            psf_sigma_range: map.take_range("psf_sigma_range")?.unwrap_or(d.psf_sigma_range),
            psf_amplitude_range: map.take_range("psf_amplitude_range")?.unwrap_or(d.psf_amplitude_range),
            seed: map.take_or("noise_seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.count_min > 0.0 && self.count_min <= self.count_max && self.count_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < count_min ≤ count_max, got {}..{}",
                self.count_min, self.count_max
            )));
        }
        if self.psf_enabled {
            self.validate_psf()?;
        }
        Ok(())
    }

    fn validate_psf(&self) -> Result<()> {
        let (slo, shi) = self.psf_sigma_range;
        let (alo, ahi) = self.psf_amplitude_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return Err(Error::Config(format!(
                "psf sigma range must satisfy 0 < low ≤ high, got {slo}..{shi}"
            )));
        }
        if !(alo >= 0.0 && alo <= ahi && ahi.is_finite()) {
            return Err(Error::Config(format!(
                "psf amplitude range must satisfy 0 ≤ low ≤ high, got {alo}..{ahi}"
            )));
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Total count N with ln N uniform on [ln count_min, ln count_max].
pub fn sample_log_weighted_count(cfg: &NoiseConfig, rng: &mut Rng) -> f64 {
    if cfg.count_min == cfg.count_max {
        return cfg.count_min;
    }
    let (lo, hi) = (cfg.count_min.ln(), cfg.count_max.ln());
    let u: f64 = rng.random();
    (lo + u * (hi - lo)).exp().clamp(cfg.count_min, cfg.count_max)
}

/// One Poisson deviate with the given mean; zero for non-positive means.
pub fn sample_poisson(mean: f64, rng: &mut Rng) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    match Poisson::new(mean) {
        Ok(d) => d.sample(rng) as u64,
        // Means beyond the sampler's range are far outside any count grid.
        Err(_) => mean.round() as u64,
    }
}

/// Independent Poisson draw with mean n·P_ij at every pixel.
pub fn sample_poisson_counts(p: &ProbabilityMap, n: f64, rng: &mut Rng) -> Result<Spectrum> {
    if !(n >= 0.0 && n.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "total count must be finite and ≥ 0, got {n}"
        )));
    }
    let values = p.values().mapv(|prob| sample_poisson(n * prob, rng) as f64);
    p.spectrum().with_values(values)
}

/// Replace every unit count by a Gaussian blob centred on its pixel.
///
/// Each event draws its own σ (pixels) and mass uniformly from the configured
/// ranges. The blob kernel is normalized over its ±4σ support; mass falling
/// off the grid edge is lost, as on a finite detector.
pub fn apply_detector_psf(counts: &Spectrum, cfg: &NoiseConfig, rng: &mut Rng) -> Result<Spectrum> {
    cfg.validate_psf()?;
    let (h, w) = counts.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    let mut weights = Vec::new();
    for ((i, j), &c) in counts.values().indexed_iter() {
        if c.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "PSF input must hold integer counts, found {c}"
            )));
        }
        for _ in 0..c as u64 {
            let sigma = uniform(rng, cfg.psf_sigma_range);
            let mass = uniform(rng, cfg.psf_amplitude_range);
            let r = (4.0 * sigma).ceil() as isize;
            weights.clear();
            weights.extend((-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()));
            let s: f64 = weights.iter().sum();
            let scale = mass / (s * s);
            for (di, wi) in (-r..=r).zip(&weights) {
                let y = i as isize + di;
                if y < 0 || y >= h as isize {
                    continue;
                }
                let row_scale = scale * wi;
                let mut row = out.row_mut(y as usize);
                for (dj, wj) in (-r..=r).zip(&weights) {
                    let x = j as isize + dj;
                    if x >= 0 && x < w as isize {
                        row[x as usize] += row_scale * wj;
                    }
                }
            }
        }
    }
    counts.with_values(out)
}

/// A noisy/clean pair on a common intensity scale.
///
/// `clean` is the expected count map N·P. Both members are divided by `scale`
/// (1 for raw counts; the normalization divisor after [`normalize_pair`]).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub noisy: Spectrum,
    pub clean: Spectrum,
    pub total_count: f64,
    pub scale: f64,
}

impl TrainingPair {
    pub fn new(noisy: Spectrum, clean: Spectrum, total_count: f64) -> Result<Self> {
        if noisy.dim() != clean.dim() {
            return Err(Error::shape(format!("{:?}", noisy.dim()), format!("{:?}", clean.dim())));
        }
        Ok(Self {
            noisy,
            clean,
            total_count,
            scale: 1.0,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.noisy.dim()
    }
}

/// Raw (un-normalized) pair at an explicit total count.
pub fn make_raw_pair(p: &ProbabilityMap, n: f64, cfg: &NoiseConfig, rng: &mut Rng) -> Result<TrainingPair> {
    let counts = sample_poisson_counts(p, n, rng)?;
    let noisy = if cfg.psf_enabled {
        apply_detector_psf(&counts, cfg, rng)?
    } else {
        counts
    };
    TrainingPair::new(noisy, p.expected_counts(n), n)
}

/// Draw N, sample counts, optionally splat them, then normalize the pair.
pub fn make_training_pair(p: &ProbabilityMap, cfg: &NoiseConfig, rng: &mut Rng) -> Result<TrainingPair> {
    cfg.validate()?;
    let n = sample_log_weighted_count(cfg, rng);
    let raw = make_raw_pair(p, n, cfg, rng)?;
    Ok(normalize_pair(&raw)?.0)
}
