//! Noise-free synthetic band-structure spectra.
//!
//! Each band contributes a Lorentzian in energy around its dispersion ε(k),
//! cut off by the Fermi function, on top of a flat background. The result is
//! normalized into a [`ProbabilityMap`] that stands in for high-count data.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng as _;

use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::rng;
use crate::spectrum::{normalize_to_probability, AxisInfo, ProbabilityMap, Spectrum};

/// Band dispersion ε(k).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dispersion {
    /// ε = offset + curvature·(k − center)²
    Parabolic { center: f64, curvature: f64, offset: f64 },
    /// ε = offset + amplitude·cos(2πk / period)
    Cosine { amplitude: f64, period: f64, offset: f64 },
    /// Piecewise linear through (kink_momentum, kink_energy): slope_above on the
    /// side where ε ≥ kink_energy, slope_below on the other. Slopes share a sign.
    LinearKink {
        kink_momentum: f64,
        kink_energy: f64,
        slope_above: f64,
        slope_below: f64,
    },
}

impl Dispersion {
    pub fn linear(k0: f64, e0: f64, slope: f64) -> Self {
        Dispersion::LinearKink {
            kink_momentum: k0,
            kink_energy: e0,
            slope_above: slope,
            slope_below: slope,
        }
    }

    pub fn energy(&self, k: f64) -> f64 {
        match *self {
            Dispersion::Parabolic {
                center,
                curvature,
                offset,
            } => offset + curvature * (k - center).powi(2),
            Dispersion::Cosine {
                amplitude,
                period,
                offset,
            } => offset + amplitude * (2.0 * PI * k / period).cos(),
            Dispersion::LinearKink {
                kink_momentum,
                kink_energy,
                slope_above,
                slope_below,
            } => {
                let dk = k - kink_momentum;
                let slope = if slope_above * dk >= 0.0 {
                    slope_above
                } else {
                    slope_below
                };
                kink_energy + slope * dk
            }
        }
    }

    /// dε/dk.
    pub fn velocity(&self, k: f64) -> f64 {
        match *self {
            Dispersion::Parabolic { center, curvature, .. } => 2.0 * curvature * (k - center),
            Dispersion::Cosine { amplitude, period, .. } => {
                -amplitude * 2.0 * PI / period * (2.0 * PI * k / period).sin()
            }
            Dispersion::LinearKink {
                kink_momentum,
                slope_above,
                slope_below,
                ..
            } => {
                if slope_above * (k - kink_momentum) >= 0.0 {
                    slope_above
                } else {
                    slope_below
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Dispersion::Cosine { period, .. } if period == 0.0 || !period.is_finite() => {
                Err(Error::Config("cosine band needs a finite non-zero period".into()))
            }
            Dispersion::LinearKink {
                slope_above,
                slope_below,
                ..
            } if slope_above == 0.0 || slope_above * slope_below <= 0.0 => {
                Err(Error::Config("kinked band needs non-zero slopes of equal sign".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandSpec {
    pub dispersion: Dispersion,
    /// Lorentzian half-width in energy.
    pub linewidth: f64,
    /// Peak height before the Fermi cutoff.
    pub amplitude: f64,
}

/// Level repulsion between two bands (indices into `SynthConfig::bands`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridizationGap {
    pub first: usize,
    pub second: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub bands: Vec<BandSpec>,
    pub hybridization_gap: Option<HybridizationGap>,
    pub temperature: f64,
    pub fermi_level: f64,
    pub background_level: f64,
    pub height: usize,
    pub width: usize,
    pub energy_range: (f64, f64),
    pub momentum_range: (f64, f64),
    pub seed: u64,
}

impl SynthConfig {
    /// Empty configuration on the default axes; add bands before use.
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            bands: Vec::new(),
            hybridization_gap: None,
            temperature: 0.01,
            fermi_level: 0.0,
            background_level: 0.0,
            height,
            width,
            energy_range: (-0.6, 0.1),
            momentum_range: (-0.5, 0.5),
            seed: 0,
        }
    }

    pub fn with_band(mut self, band: BandSpec) -> Self {
        self.bands.push(band);
        self
    }

    pub fn energy_axis(&self) -> Result<AxisInfo> {
        AxisInfo::new("energy", self.energy_range.0, self.energy_range.1, self.height)
    }

    pub fn momentum_axis(&self) -> Result<AxisInfo> {
        AxisInfo::new("momentum", self.momentum_range.0, self.momentum_range.1, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() {
            return Err(Error::Config("at least one band is required".into()));
        }
        for (n, b) in self.bands.iter().enumerate() {
            if !(b.linewidth > 0.0 && b.linewidth.is_finite()) {
                return Err(Error::Config(format!("band {}: linewidth must be > 0", n + 1)));
            }
            if !(b.amplitude > 0.0 && b.amplitude.is_finite()) {
                return Err(Error::Config(format!("band {}: amplitude must be > 0", n + 1)));
            }
            b.dispersion.validate()?;
        }
        if let Some(g) = self.hybridization_gap {
            if g.first == g.second || g.first >= self.bands.len() || g.second >= self.bands.len() {
                return Err(Error::Config(
                    "hybridization gap must name two distinct existing bands".into(),
                ));
            }
            if !(g.gap >= 0.0) {
                return Err(Error::Config("hybridization gap must be ≥ 0".into()));
            }
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be ≥ 0".into()));
        }
        if !(self.background_level >= 0.0) {
            return Err(Error::Config("background_level must be ≥ 0".into()));
        }
        self.energy_axis()?;
        self.momentum_axis()?;
        Ok(())
    }

    /// Read a configuration from `key = value` entries.
    ///
    /// Keys: `height`, `width`, `energy_range = lo:hi`, `momentum_range = lo:hi`,
    /// `fermi_level`, `temperature`, `background`, `seed`, `random = true|false`,
    /// `band1`, `band2`, ... and `gap = i,j,size` (1-based band indices).
    /// A band is `<kind> key=value ...` with kind `parabolic` (center,
    /// curvature, offset), `cosine` (amplitude_e, period, offset) or `kink`
    /// (k0, e0, slope_above, slope_below), plus `linewidth` and `amplitude`.
    /// `random = true` draws bands and cutoff from [`random_config`] with `seed`.
    pub fn from_config(map: &mut ConfigMap) -> Result<Self> {
        let height = map.take_or("height", 300usize)?;
        let width = map.take_or("width", 300usize)?;
        let seed = map.take_or("seed", 0u64)?;
        let mut cfg = if map.take_or("random", false)? {
            random_config(seed, height, width)
        } else {
            let mut c = SynthConfig::new(height, width);
            c.seed = seed;
            c
        };
        if let Some(r) = map.take_range("energy_range")? {
            cfg.energy_range = r;
        }
        if let Some(r) = map.take_range("momentum_range")? {
            cfg.momentum_range = r;
        }
        if let Some(v) = map.take("fermi_level")? {
            cfg.fermi_level = v;
        }
        if let Some(v) = map.take("temperature")? {
            cfg.temperature = v;
        }
        if let Some(v) = map.take("background")? {
            cfg.background_level = v;
        }
        let mut n = 1;
        while let Some(spec) = map.take::<String>(&format!("band{n}"))? {
            cfg.bands
                .push(parse_band(&spec).map_err(|e| Error::Config(format!("band{n}: {e}")))?);
            n += 1;
        }
        if let Some(g) = map.take_list::<f64>("gap")? {
            if g.len() != 3 || g[0] < 1.0 || g[1] < 1.0 {
                return Err(Error::Config("gap expects 'i,j,size' with 1-based band indices".into()));
            }
            cfg.hybridization_gap = Some(HybridizationGap {
                first: g[0] as usize - 1,
                second: g[1] as usize - 1,
                gap: g[2],
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_band(spec: &str) -> std::result::Result<BandSpec, String> {
    let mut parts = spec.split_whitespace();
    let kind = parts.next().ok_or("empty band specification")?;
    let mut kv = std::collections::BTreeMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got '{p}'"))?;
        let v: f64 = v.parse().map_err(|_| format!("cannot parse '{v}'"))?;
        kv.insert(k.to_string(), v);
    }
    let mut get = |k: &str| kv.remove(k).ok_or_else(|| format!("missing '{k}'"));
    let dispersion = match kind {
        "parabolic" => Dispersion::Parabolic {
            center: get("center")?,
            curvature: get("curvature")?,
            offset: get("offset")?,
        },
        "cosine" => Dispersion::Cosine {
            amplitude: get("amplitude_e")?,
            period: get("period")?,
            offset: get("offset")?,
        },
        "kink" => Dispersion::LinearKink {
            kink_momentum: get("k0")?,
            kink_energy: get("e0")?,
            slope_above: get("slope_above")?,
            slope_below: get("slope_below")?,
        },
        other => return Err(format!("unknown band kind '{other}'")),
    };
    let band = BandSpec {
        dispersion,
        linewidth: get("linewidth")?,
        amplitude: get("amplitude")?,
    };
    if let Some(extra) = kv.keys().next() {
        return Err(format!("unknown band key '{extra}'"));
    }
    Ok(band)
}

/// Occupation factor 1/(1 + exp((E − E_F)/T)); a step function at T = 0.
pub fn fermi_weight(energy: f64, fermi_level: f64, temperature: f64) -> f64 {
    let x = energy - fermi_level;
    if temperature <= 0.0 {
        return if x < 0.0 {
            1.0
        } else if x > 0.0 {
            0.0
        } else {
            0.5
        };
    }
    let t = x / temperature;
    if t > 0.0 {
        let e = (-t).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + t.exp())
    }
}

/// Peak-normalized Lorentzian with half-width `gamma`.
fn lorentzian(x: f64, gamma: f64) -> f64 {
    gamma * gamma / (x * x + gamma * gamma)
}

/// (energy, amplitude, linewidth) of every band at momentum `k`, with the
/// optional level repulsion applied.
fn band_states(cfg: &SynthConfig, k: f64, out: &mut Vec<(f64, f64, f64)>) {
    out.clear();
    for b in &cfg.bands {
        out.push((b.dispersion.energy(k), b.amplitude, b.linewidth));
    }
    if let Some(g) = cfg.hybridization_gap {
        let (ea, aa, ga) = out[g.first];
        let (eb, ab, gb) = out[g.second];
        let d = ea - eb;
        let r = (d * d + g.gap * g.gap).sqrt();
        let mean = 0.5 * (ea + eb);
        // Fraction of band `first` character carried by the upper branch.
        let wa = if r > 0.0 { 0.5 * (1.0 + d / r) } else { 0.5 };
        let mix = |w: f64| (w * aa + (1.0 - w) * ab, w * ga + (1.0 - w) * gb);
        let (au, gu) = mix(wa);
        let (al, gl) = mix(1.0 - wa);
        out[g.first] = (mean + 0.5 * r, au, gu);
        out[g.second] = (mean - 0.5 * r, al, gl);
    }
}

/// Render the configured bands into a normalized probability map.
pub fn synth_spectrum(cfg: &SynthConfig) -> Result<ProbabilityMap> {
    cfg.validate()?;
    let energy = cfg.energy_axis()?;
    let momentum = cfg.momentum_axis()?;
    let ev = energy.values();
    let fermi: Vec<f64> = ev
        .iter()
        .map(|&e| fermi_weight(e, cfg.fermi_level, cfg.temperature))
        .collect();
    let mut values = Array2::from_elem((cfg.height, cfg.width), cfg.background_level);
    let mut states = Vec::with_capacity(cfg.bands.len());
    for (j, k) in momentum.values().into_iter().enumerate() {
        band_states(cfg, k, &mut states);
        for (i, &e) in ev.iter().enumerate() {
            if fermi[i] == 0.0 {
                continue;
            }
            let band: f64 = states
                .iter()
                .map(|&(eps, amp, gamma)| amp * lorentzian(e - eps, gamma))
                .sum();
            values[[i, j]] += band * fermi[i];
        }
    }
    if values.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateConfig("all intensities are zero".into()));
    }
    normalize_to_probability(&Spectrum::new(values, energy, momentum)?)
}

/// Draw a plausible band-structure configuration from `seed`.
///
/// One to three bands of random shape, linewidth and weight; a Fermi cutoff
/// near the top of the window; a weak flat background; and, for multi-band
/// draws, an occasional hybridization gap.
pub fn random_config(seed: u64, height: usize, width: usize) -> SynthConfig {
    let mut r = rng::stream(seed, &[0x5e17]);
    let mut cfg = SynthConfig::new(height, width);
    cfg.seed = seed;
    cfg.fermi_level = r.random_range(-0.05..0.05);
    cfg.temperature = r.random_range(0.004..0.02);
    cfg.background_level = r.random_range(0.0..0.1);
    let nbands = r.random_range(1..=3);
    for _ in 0..nbands {
        let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let dispersion = match r.random_range(0..3) {
            0 => {
                if r.random_bool(0.5) {
                    Dispersion::Parabolic {
                        center: r.random_range(-0.2..0.2),
                        curvature: r.random_range(1.5..6.0),
                        offset: r.random_range(-0.5..-0.1),
                    }
                } else {
                    Dispersion::Parabolic {
                        center: r.random_range(-0.2..0.2),
                        curvature: -r.random_range(1.5..6.0),
                        offset: r.random_range(-0.3..0.1),
                    }
                }
            }
            1 => Dispersion::Cosine {
                amplitude: sign * r.random_range(0.1..0.35),
                period: r.random_range(0.8..1.6),
                offset: r.random_range(-0.35..-0.1),
            },
            _ => {
                let slope = sign * r.random_range(0.6..2.5);
                Dispersion::LinearKink {
                    kink_momentum: r.random_range(-0.25..0.25),
                    kink_energy: r.random_range(-0.25..-0.05),
                    slope_above: slope,
                    slope_below: slope * r.random_range(1.0..2.5),
                }
            }
        };
        cfg.bands.push(BandSpec {
            dispersion,
            linewidth: r.random_range(0.012..0.05),
            amplitude: r.random_range(0.5..1.5),
        });
    }
    if nbands >= 2 && r.random_bool(0.3) {
        cfg.hybridization_gap = Some(HybridizationGap {
            first: 0,
            second: 1,
            gap: r.random_range(0.02..0.08),
        });
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_band(cfg_mut: impl FnOnce(&mut SynthConfig)) -> SynthConfig {
        let mut cfg = SynthConfig::new(40, 50).with_band(BandSpec {
            dispersion: Dispersion::linear(0.0, -0.25, 1.5),
            linewidth: 0.03,
            amplitude: 1.0,
        });
        cfg_mut(&mut cfg);
        cfg
    }

    #[test]
    fn fermi_weight_values() {
        assert_eq!(fermi_weight(0.1, 0.1, 0.02), 0.5);
        assert_eq!(fermi_weight(-0.1, 0.0, 0.0), 1.0);
        assert_eq!(fermi_weight(0.1, 0.0, 0.0), 0.0);
        assert_eq!(fermi_weight(0.0, 0.0, 0.0), 0.5);
        let t = 0.013;
        assert!((fermi_weight(t * 3f64.ln(), 0.0, t) - 0.25).abs() < 1e-15);
        assert!(fermi_weight(-1.0, 0.0, 1e-6) == 1.0);
        assert!(fermi_weight(1.0, 0.0, 1e-6) == 0.0);
    }

    #[test]
    fn normalized_and_deterministic() {
        let cfg = random_config(3, 32, 48);
        let a = synth_spectrum(&cfg).unwrap();
        let b = synth_spectrum(&random_config(3, 32, 48)).unwrap();
        assert!((a.values().sum() - 1.0).abs() < 1e-9);
        assert!(a.values().iter().all(|&v| v >= 0.0));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_temperature_cutoff_leaves_background() {
        let cfg = single_band(|c| {
            c.temperature = 0.0;
            c.fermi_level = -0.25;
            c.background_level = 0.05;
        });
        let p = synth_spectrum(&cfg).unwrap();
        let e = cfg.energy_axis().unwrap();
        let bg = p.values()[[e.sample_count() - 1, 0]];
        for i in 0..e.sample_count() {
            if e.value(i) > cfg.fermi_level {
                assert!(p.values().row(i).iter().all(|&v| v == bg));
            }
        }
        // Some rows below the cutoff carry band weight above background.
        assert!(p.values().row(0).iter().any(|&v| v > bg * 1.5));
    }

    #[test]
    fn maximum_sits_on_dispersion() {
        let cfg = single_band(|c| c.fermi_level = 0.3);
        let p = synth_spectrum(&cfg).unwrap();
        let ((i, j), _) = p.values().indexed_iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        let e = cfg.energy_axis().unwrap();
        let k = cfg.momentum_axis().unwrap();
        let eps = cfg.bands[0].dispersion.energy(k.value(j));
        assert!(((eps - e.value(i)) / e.step()).abs() <= 1.0);
    }

    #[test]
    fn all_zero_is_degenerate() {
        let cfg = single_band(|c| {
            c.temperature = 0.0;
            c.fermi_level = -10.0;
        });
        assert!(matches!(synth_spectrum(&cfg), Err(Error::DegenerateConfig(_))));
    }

    #[test]
    fn gap_opens_between_crossing_bands() {
        let mut cfg = SynthConfig::new(10, 10)
            .with_band(BandSpec {
                dispersion: Dispersion::linear(0.0, -0.2, 1.0),
                linewidth: 0.02,
                amplitude: 1.0,
            })
            .with_band(BandSpec {
                dispersion: Dispersion::linear(0.0, -0.2, -1.0),
                linewidth: 0.02,
                amplitude: 1.0,
            });
        cfg.hybridization_gap = Some(HybridizationGap {
            first: 0,
            second: 1,
            gap: 0.06,
        });
        let mut states = Vec::new();
        for k in [-0.2, -0.01, 0.0, 0.05, 0.3] {
            band_states(&cfg, k, &mut states);
            assert!(states[0].0 - states[1].0 >= 0.06 - 1e-12);
            assert!((states[0].1 + states[1].1 - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kink_dispersion_is_continuous() {
        let d = Dispersion::LinearKink {
            kink_momentum: 0.1,
            kink_energy: -0.1,
            slope_above: 1.0,
            slope_below: 2.0,
        };
        assert_eq!(d.energy(0.1), -0.1);
        assert!((d.energy(0.2) - 0.0).abs() < 1e-12);
        assert!((d.energy(0.0) - -0.3).abs() < 1e-12);
    }

    #[test]
    fn parse_from_config() {
        let mut map = ConfigMap::parse(
            "height = 20\nwidth = 30\nband1 = parabolic center=0 curvature=4 offset=-0.3 linewidth=0.02 amplitude=1\n\
             band2 = kink k0=0 e0=-0.1 slope_above=1 slope_below=2 linewidth=0.03 amplitude=0.5\ngap = 1,2,0.05\n",
        )
        .unwrap();
        let cfg = SynthConfig::from_config(&mut map).unwrap();
        map.finish().unwrap();
        assert_eq!(cfg.bands.len(), 2);
        assert_eq!(cfg.hybridization_gap.unwrap().gap, 0.05);
        assert!(synth_spectrum(&cfg).is_ok());

        let mut bad = ConfigMap::parse("band1 = parabolic center=0 offset=-0.3 linewidth=0.02 amplitude=1\n").unwrap();
        assert!(SynthConfig::from_config(&mut bad).is_err());
    }
}
