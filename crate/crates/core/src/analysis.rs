//! Spectral analysis: Gaussian smoothing, second-derivative maps, momentum
//! distribution curves (MDCs), Lorentzian line-shape fits and dispersion
//! tracing.

use nalgebra::{Matrix3, Matrix5, Vector3, Vector5};
use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::spectrum::{SignedMap, Spectrum};

const KERNEL_TRUNCATION: f64 = 4.0;
const MAX_ITERATIONS: usize = 200;
const STEP_TOLERANCE: f64 = 1e-8;

/// Normalized Gaussian taps for offsets −r..=r, r = ⌈4σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (KERNEL_TRUNCATION * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection: ... 1 0 | 0 1 2 ... n−1 | n−1 n−2 ...
fn reflect(i: isize, n: usize) -> usize {
    let p = 2 * n as isize;
    let m = i.rem_euclid(p) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn smooth_axis(a: &Array2<f64>, axis: Axis, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return a.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut out = Array2::zeros(a.dim());
    for (src, mut dst) in a.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        let n = src.len();
        for i in 0..n {
            let mut acc = 0.0;
            for (t, &w) in k.iter().enumerate() {
                acc += w * src[reflect(i as isize + t as isize - r, n)];
            }
            dst[i] = acc;
        }
    }
    out
}

fn smooth_values(a: &Array2<f64>, (sigma_e, sigma_k): (f64, f64)) -> Array2<f64> {
    let rows = smooth_axis(a, Axis(0), sigma_e);
    smooth_axis(&rows, Axis(1), sigma_k)
}

/// Separable Gaussian blur with σ given in pixels along (energy, momentum).
/// Edges use half-sample reflection, which keeps constants and the total.
pub fn gaussian_smooth(s: &Spectrum, sigma_pixels: (f64, f64)) -> Result<Spectrum> {
    let (se, sk) = sigma_pixels;
    if !(se >= 0.0 && sk >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "smoothing widths must be ≥ 0, got ({se}, {sk})"
        )));
    }
    s.with_values(smooth_values(s.values(), sigma_pixels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeAxis {
    Energy,
    Momentum,
}

impl std::str::FromStr for DerivativeAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" | "e" => Ok(Self::Energy),
            "momentum" | "k" => Ok(Self::Momentum),
            other => Err(Error::InvalidArgument(format!(
                "unknown axis `{other}` (energy, momentum)"
            ))),
        }
    }
}

/// Isotropic Gaussian pre-smoothing, then the central second difference
/// along `axis` in physical units. Border samples repeat their neighbour.
pub fn second_derivative(s: &Spectrum, axis: DerivativeAxis, pre_smooth_sigma: f64) -> Result<SignedMap> {
    let (ax, info) = match axis {
        DerivativeAxis::Energy => (Axis(0), s.energy_axis()),
        DerivativeAxis::Momentum => (Axis(1), s.momentum_axis()),
    };
    let n = s.values().len_of(ax);
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    if !(pre_smooth_sigma >= 0.0) {
        return Err(Error::InvalidArgument("pre-smoothing width must be ≥ 0".into()));
    }
    let sm = smooth_values(s.values(), (pre_smooth_sigma, pre_smooth_sigma));
    let inv = 1.0 / (info.step() * info.step());
    let mut out = Array2::zeros(sm.dim());
    for (src, mut dst) in sm.lanes(ax).into_iter().zip(out.lanes_mut(ax)) {
        for i in 1..n - 1 {
            dst[i] = (src[i + 1] - 2.0 * src[i] + src[i - 1]) * inv;
        }
        dst[0] = dst[1];
        dst[n - 1] = dst[n - 2];
    }
    SignedMap::new(out, s.energy_axis().clone(), s.momentum_axis().clone())
}

/// One momentum distribution curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdc {
    pub momentum: Vec<f64>,
    pub intensity: Vec<f64>,
    pub energy: f64,
}

impl Mdc {
    pub fn new(momentum: Vec<f64>, intensity: Vec<f64>, energy: f64) -> Result<Self> {
        if momentum.len() != intensity.len() {
            return Err(Error::shape(momentum.len(), intensity.len()));
        }
        if momentum.len() < 4 {
            return Err(Error::TooFewSamples {
                needed: 4,
                got: momentum.len(),
            });
        }
        if intensity.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("MDC intensities must be finite and ≥ 0".into()));
        }
        Ok(Self {
            momentum,
            intensity,
            energy,
        })
    }

    pub fn len(&self) -> usize {
        self.momentum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.momentum.is_empty()
    }

    /// The samples with momentum in `[lo, hi]`.
    pub fn window(&self, lo: f64, hi: f64) -> Result<Self> {
        let (m, i): (Vec<f64>, Vec<f64>) = self
            .momentum
            .iter()
            .zip(&self.intensity)
            .filter(|(k, _)| **k >= lo && **k <= hi)
            .map(|(k, v)| (*k, *v))
            .unzip();
        Self::new(m, i, self.energy)
    }
}

/// The row nearest to `energy` (ties go to the lower index).
pub fn extract_mdc(s: &Spectrum, energy: f64) -> Result<Mdc> {
    let ax = s.energy_axis();
    let i = ax.nearest_index(energy)?;
    Mdc::new(s.momentum_axis().values(), s.row(i).to_vec(), ax.value(i))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitGuess {
    pub peak_position: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdcFitResult {
    pub peak_position: f64,
    /// Half width at half maximum.
    pub width: f64,
    pub amplitude: f64,
    /// (offset, slope) of the linear background in absolute momentum.
    pub background: (f64, f64),
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl MdcFitResult {
    pub fn evaluate(&self, k: f64) -> f64 {
        lorentzian(k, self.amplitude, self.peak_position, self.width) + self.background.0 + self.background.1 * k
    }
}

fn lorentzian(k: f64, a: f64, k0: f64, g: f64) -> f64 {
    let d = k - k0;
    a * g * g / (d * d + g * g)
}

/// Data-driven starting point: argmax of a lightly smoothed curve and its
/// half-maximum crossings.
fn auto_guess(k: &[f64], y: &[f64]) -> FitGuess {
    let n = y.len();
    let ker = gaussian_kernel(1.0);
    let r = (ker.len() / 2) as isize;
    let sm: Vec<f64> = (0..n)
        .map(|i| {
            ker.iter()
                .enumerate()
                .map(|(t, w)| w * y[reflect(i as isize + t as isize - r, n)])
                .sum()
        })
        .collect();
    let (imax, &ymax) = sm.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let ymin = sm.iter().copied().fold(f64::INFINITY, f64::min);
    let half = 0.5 * (ymax + ymin);
    let mut lo = imax;
    while lo > 0 && sm[lo] > half {
        lo -= 1;
    }
    let mut hi = imax;
    while hi + 1 < n && sm[hi] > half {
        hi += 1;
    }
    let dk = (k[n - 1] - k[0]).abs() / (n - 1) as f64;
    let width = (0.5 * (k[hi] - k[lo]).abs()).max(dk);
    FitGuess {
        peak_position: k[imax],
        width,
    }
}

/// Least-squares fit of `A·Γ²/((k−k0)²+Γ²) + c + s·k` by Levenberg-Marquardt.
///
/// The fit runs in rescaled units (momentum centred on the window and scaled
/// by its half-span, intensity by its maximum). If the peak leaves the window
/// it is clamped to the edge and the result is marked unconverged.
pub fn fit_mdc_lorentzian(mdc: &Mdc, initial_guess: Option<FitGuess>) -> Result<MdcFitResult> {
    let n = mdc.len();
    if n < 6 {
        return Err(Error::TooFewSamples { needed: 6, got: n });
    }
    let ymax = mdc.intensity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ymin = mdc.intensity.iter().copied().fold(f64::INFINITY, f64::min);
    if !(ymax > ymin) {
        return Err(Error::DegenerateData("flat MDC".into()));
    }
    let (kmin, kmax) = (
        mdc.momentum[0].min(mdc.momentum[n - 1]),
        mdc.momentum[0].max(mdc.momentum[n - 1]),
    );
    let kc = 0.5 * (kmin + kmax);
    let ks = 0.5 * (kmax - kmin);
    let u: Vec<f64> = mdc.momentum.iter().map(|k| (k - kc) / ks).collect();
    let y: Vec<f64> = mdc.intensity.iter().map(|v| v / ymax).collect();

    let guess = initial_guess.unwrap_or_else(|| auto_guess(&mdc.momentum, &mdc.intensity));
    let u0 = ((guess.peak_position - kc) / ks).clamp(-1.0, 1.0);
    let g0 = (guess.width / ks).abs().max(1e-3);
    let base = y.iter().copied().fold(f64::INFINITY, f64::min);
    let at_peak = u
        .iter()
        .zip(&y)
        .min_by(|a, b| (a.0 - u0).abs().total_cmp(&(b.0 - u0).abs()))
        .map(|(_, &v)| v)
        .unwrap();
    let mut p = Vector5::new((at_peak - base).max(1e-3), u0, g0, base, 0.0);

    let residuals = |p: &Vector5<f64>| -> (Vec<f64>, f64) {
        let r: Vec<f64> = u
            .iter()
            .zip(&y)
            .map(|(&ui, &yi)| yi - (lorentzian(ui, p[0], p[1], p[2]) + p[3] + p[4] * ui))
            .collect();
        let c = r.iter().map(|v| v * v).sum();
        (r, c)
    };

    let (mut r, mut cost) = residuals(&p);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = Matrix5::<f64>::zeros();
        let mut jtr = Vector5::<f64>::zeros();
        for (i, &ui) in u.iter().enumerate() {
            let d = ui - p[1];
            let g = p[2];
            let den = d * d + g * g;
            let l = g * g / den;
            let j = Vector5::new(
                l,
                p[0] * g * g * 2.0 * d / (den * den),
                p[0] * 2.0 * g * d * d / (den * den),
                1.0,
                ui,
            );
            jtj += j * j.transpose();
            jtr += j * r[i];
        }
        let mut accepted = false;
        let mut small_step = false;
        for _ in 0..30 {
            let mut a = jtj;
            for d in 0..5 {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(delta) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = p + delta;
            trial[2] = trial[2].abs().max(1e-9);
            small_step = delta.norm() <= STEP_TOLERANCE * (p.norm() + STEP_TOLERANCE);
            let (tr, tc) = residuals(&trial);
            if tc <= cost {
                p = trial;
                r = tr;
                cost = tc;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
            if small_step {
                break;
            }
        }
        if small_step || cost == 0.0 {
            converged = true;
            break;
        }
        if !accepted {
            // No descent direction left at any damping: a stationary point.
            converged = true;
            break;
        }
    }

    let mut peak = kc + ks * p[1];
    if peak < kmin || peak > kmax {
        peak = peak.clamp(kmin, kmax);
        converged = false;
    }
    let slope = ymax * p[4] / ks;
    let offset = ymax * p[3] - slope * kc;
    Ok(MdcFitResult {
        peak_position: peak,
        width: ks * p[2],
        amplitude: ymax * p[0],
        background: (offset, slope),
        residual_norm: ymax * cost.sqrt(),
        converged,
        iterations,
    })
}

/// One traced row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub energy: f64,
    pub row: usize,
    pub fit: MdcFitResult,
}

/// Fit MDCs at energies `from, from + step, …` up to `to`.
///
/// Every row is first fitted on its own; the converged row with the highest
/// peak-to-residual ratio becomes the anchor. The trace then walks outward
/// from the anchor in both directions, seeding each row with its neighbour's
/// converged fit. `momentum_window` restricts every fit to a momentum interval.
pub fn trace_dispersion(
    s: &Spectrum,
    (from, to): (f64, f64),
    step: f64,
    momentum_window: Option<(f64, f64)>,
) -> Result<Vec<TracePoint>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "trace step must be positive, got {step}"
        )));
    }
    if !(from <= to) {
        return Ok(Vec::new());
    }
    let count = ((to - from) / step + 1e-9).floor() as usize + 1;
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let e = from + i as f64 * step;
        let row = s.energy_axis().nearest_index(e)?;
        let mut mdc = extract_mdc(s, e)?;
        if let Some((lo, hi)) = momentum_window {
            mdc = mdc.window(lo, hi)?;
        }
        rows.push((row, mdc));
    }

    let quality = |f: &MdcFitResult, n: usize| f.amplitude * (n as f64).sqrt() / (f.residual_norm + f64::MIN_POSITIVE);
    let mut anchor: Option<(usize, MdcFitResult, f64)> = None;
    for (i, (_, mdc)) in rows.iter().enumerate() {
        // Rows that cannot be fitted on their own simply do not compete.
        if let Ok(f) = fit_mdc_lorentzian(mdc, None) {
            let q = quality(&f, mdc.len());
            if f.converged && f.amplitude > 0.0 && anchor.is_none_or(|(_, _, best)| q > best) {
                anchor = Some((i, f, q));
            }
        }
    }
    let (start, first) = match anchor {
        Some((i, f, _)) => (i, f),
        None => (0, fit_mdc_lorentzian(&rows[0].1, None)?),
    };

    let seed = |f: &MdcFitResult| {
        f.converged.then_some(FitGuess {
            peak_position: f.peak_position,
            width: f.width,
        })
    };
    let mut fits: Vec<Option<MdcFitResult>> = vec![None; count];
    fits[start] = Some(first);
    for i in start + 1..count {
        let guess = fits[i - 1].as_ref().and_then(seed);
        fits[i] = Some(fit_mdc_lorentzian(&rows[i].1, guess)?);
    }
    for i in (0..start).rev() {
        let guess = fits[i + 1].as_ref().and_then(seed);
        fits[i] = Some(fit_mdc_lorentzian(&rows[i].1, guess)?);
    }
    Ok(rows
        .into_iter()
        .zip(fits)
        .map(|((row, mdc), fit)| TracePoint {
            energy: mdc.energy,
            row,
            fit: fit.expect("every row fitted"),
        })
        .collect())
}

/// Continuous two-segment line fit of momentum against energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinkFit {
    pub energy: f64,
    pub momentum: f64,
    /// dk/dE below and above the kink.
    pub slope_below: f64,
    pub slope_above: f64,
    pub residual: f64,
}

fn kink_at(pts: &[(f64, f64)], ek: f64) -> Option<KinkFit> {
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for &(e, k) in pts {
        let d = e - ek;
        let row = Vector3::new(1.0, d.min(0.0), d.max(0.0));
        ata += row * row.transpose();
        atb += row * k;
    }
    let x = ata.lu().solve(&atb)?;
    let residual = pts
        .iter()
        .map(|&(e, k)| {
            let d = e - ek;
            let r = k - (x[0] + x[1] * d.min(0.0) + x[2] * d.max(0.0));
            r * r
        })
        .sum();
    Some(KinkFit {
        energy: ek,
        momentum: x[0],
        slope_below: x[1],
        slope_above: x[2],
        residual,
    })
}

/// Locate the break point of a piecewise-linear `k(E)`: a scan over candidate
/// kink energies ten times finer than the data spacing, then a golden-section
/// refinement around the best candidate.
pub fn locate_kink(points: &[(f64, f64)]) -> Result<KinkFit> {
    if points.len() < 5 {
        return Err(Error::TooFewSamples {
            needed: 5,
            got: points.len(),
        });
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lo = pts[1].0;
    let hi = pts[pts.len() - 2].0;
    if !(hi > lo) {
        return Err(Error::DegenerateData("trace spans no energy range".into()));
    }
    let candidates = 10 * pts.len();
    let h = (hi - lo) / candidates as f64;
    let mut best: Option<KinkFit> = None;
    for c in 0..=candidates {
        if let Some(f) = kink_at(&pts, lo + h * c as f64) {
            if best.is_none_or(|b| f.residual < b.residual) {
                best = Some(f);
            }
        }
    }
    let mut best = best.ok_or_else(|| Error::DegenerateData("no kink candidate could be fitted".into()))?;
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = ((best.energy - h).max(lo), (best.energy + h).min(hi));
    let cost = |e: f64| kink_at(&pts, e).map_or(f64::INFINITY, |f| f.residual);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (cost(x1), cost(x2));
    for _ in 0..60 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = cost(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = cost(x2);
        }
    }
    if let Some(f) = kink_at(&pts, 0.5 * (a + b)) {
        if f.residual <= best.residual {
            best = f;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::AxisInfo;

    fn spectrum(values: Array2<f64>) -> Spectrum {
        Spectrum::from_pixels(values).unwrap()
    }

    fn lorentz_mdc(n: usize, k0: f64, g: f64, a: f64, c: f64, s: f64) -> Mdc {
        let k: Vec<f64> = (0..n).map(|i| -0.5 + i as f64 / (n - 1) as f64).collect();
        let y = k.iter().map(|&x| lorentzian(x, a, k0, g) + c + s * x).collect();
        Mdc::new(k, y, 0.0).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let s = spectrum(Array2::from_shape_fn((5, 6), |(i, j)| (i * 6 + j) as f64));
        assert_eq!(gaussian_smooth(&s, (0.0, 0.0)).unwrap(), s);
    }

    #[test]
    fn constant_and_mass_preserved() {
        let s = spectrum(Array2::from_elem((9, 7), 3.0));
        let out = gaussian_smooth(&s, (2.5, 4.0)).unwrap();
        assert!(out.values().iter().all(|v| (v - 3.0).abs() < 1e-12));
        let r = spectrum(Array2::from_shape_fn((12, 10), |(i, j)| ((i * 7 + j * 3) % 5) as f64));
        let o = gaussian_smooth(&r, (4.0, 3.0)).unwrap();
        assert!((o.total_count() - r.total_count()).abs() < 1e-9 * r.total_count());
    }

    #[test]
    fn impulse_second_moment() {
        let mut a = Array2::zeros((41, 41));
        a[[20, 20]] = 1.0;
        let o = gaussian_smooth(&spectrum(a), (2.0, 2.0)).unwrap();
        let m: f64 = o
            .values()
            .indexed_iter()
            .map(|((i, _), v)| v * (i as f64 - 20.0).powi(2))
            .sum();
        assert!((m - 4.0).abs() < 0.08, "{m}");
    }

    #[test]
    fn quadratic_and_linear_rows() {
        let e = AxisInfo::pixels("energy", 4).unwrap();
        let k = AxisInfo::new("momentum", -1.0, 1.0, 21).unwrap();
        let q = Array2::from_shape_fn((4, 21), |(_, j)| 3.0 * k.value(j).powi(2));
        let d = second_derivative(
            &Spectrum::new(q, e.clone(), k.clone()).unwrap(),
            DerivativeAxis::Momentum,
            0.0,
        )
        .unwrap();
        assert!(d.values().iter().all(|v| (v - 6.0).abs() < 1e-9));
        let l = Array2::from_shape_fn((4, 21), |(_, j)| 2.0 + k.value(j));
        let d = second_derivative(&Spectrum::new(l, e, k).unwrap(), DerivativeAxis::Momentum, 0.0).unwrap();
        assert!(d.values().iter().all(|v| v.abs() < 1e-9));
        let thin = spectrum(Array2::ones((2, 5)));
        assert!(matches!(
            second_derivative(&thin, DerivativeAxis::Energy, 0.0),
            Err(Error::TooFewSamples { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn mdc_extraction_rows_and_ties() {
        let e = AxisInfo::new("energy", 0.0, 3.0, 4).unwrap();
        let k = AxisInfo::pixels("momentum", 5).unwrap();
        let v = Array2::from_shape_fn((4, 5), |(i, j)| (10 * i + j) as f64);
        let s = Spectrum::new(v.clone(), e, k).unwrap();
        assert_eq!(extract_mdc(&s, 0.0).unwrap().intensity, v.row(0).to_vec());
        assert_eq!(extract_mdc(&s, 1.5).unwrap().intensity, v.row(1).to_vec());
        assert_eq!(extract_mdc(&s, 2.6).unwrap().energy, 3.0);
        assert!(matches!(extract_mdc(&s, 3.5), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn recovers_clean_lorentzian() {
        let m = lorentz_mdc(101, 0.1, 0.05, 2.0, 0.0, 0.0);
        let f = fit_mdc_lorentzian(&m, None).unwrap();
        assert!(f.converged);
        assert!((f.peak_position - 0.1).abs() < 1e-4);
        assert!((f.width - 0.05).abs() < 5e-5);
        assert!(f.residual_norm < 1e-8 * 2.0);
    }

    #[test]
    fn recovers_sloped_background() {
        let m = lorentz_mdc(121, -0.07, 0.04, 5.0, 1.0, 1.5);
        let f = fit_mdc_lorentzian(&m, None).unwrap();
        assert!((f.peak_position + 0.07).abs() < 0.01 * 0.07);
        assert!((f.width - 0.04).abs() < 0.01 * 0.04);
        assert!((f.amplitude - 5.0).abs() < 0.05);
        assert!((f.background.0 - 1.0).abs() < 0.01);
        assert!((f.background.1 - 1.5).abs() < 0.015);
    }

    #[test]
    fn symmetric_curve_peaks_at_centre() {
        let m = lorentz_mdc(51, 0.0, 0.1, 1.0, 0.2, 0.0);
        let f = fit_mdc_lorentzian(
            &m,
            Some(FitGuess {
                peak_position: 0.05,
                width: 0.2,
            }),
        )
        .unwrap();
        assert!(f.peak_position.abs() < 1e-9);
    }

    #[test]
    fn flat_and_short_inputs_rejected() {
        let flat = Mdc::new(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], vec![1.0; 6], 0.0).unwrap();
        assert!(matches!(fit_mdc_lorentzian(&flat, None), Err(Error::DegenerateData(_))));
        let short = Mdc::new(vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0, 3.0, 1.0, 0.0], 0.0).unwrap();
        assert!(matches!(
            fit_mdc_lorentzian(&short, None),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn empty_trace_range() {
        let s = spectrum(Array2::ones((8, 8)));
        assert!(trace_dispersion(&s, (5.0, 2.0), 1.0, None).unwrap().is_empty());
    }

    #[test]
    fn kink_on_exact_broken_line() {
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let e = -0.3 + i as f64 * 0.01;
                let k = if e < -0.1 { 0.5 * (e + 0.1) } else { 2.0 * (e + 0.1) };
                (e, k)
            })
            .collect();
        let fit = locate_kink(&pts).unwrap();
        assert!((fit.energy + 0.1).abs() < 2e-3);
        assert!((fit.slope_below - 0.5).abs() < 1e-6);
        assert!((fit.slope_above - 2.0).abs() < 1e-6);
    }
}
