//! Two-dimensional count spectra.
//!
//! Values are stored row-major with rows indexing the energy axis and columns
//! the momentum axis, so `values[[i, j]]` is the count at energy row `i` and
//! momentum column `j`.

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// A uniformly sampled physical axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisInfo {
    label: String,
    minimum: f64,
    maximum: f64,
    sample_count: usize,
}

impl AxisInfo {
    pub fn new(label: impl Into<String>, minimum: f64, maximum: f64, sample_count: usize) -> Result<Self> {
        let label = label.into();
        if !(minimum.is_finite() && maximum.is_finite()) || minimum >= maximum {
            return Err(Error::InvalidArgument(format!(
                "axis '{label}' needs finite minimum < maximum, got [{minimum}, {maximum}]"
            )));
        }
        if sample_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "axis '{label}' needs at least 2 samples, got {sample_count}"
            )));
        }
        Ok(Self {
            label,
            minimum,
            maximum,
            sample_count,
        })
    }

    /// Pixel-index axis `0..n-1`, used when physical units are irrelevant.
    pub fn pixels(label: impl Into<String>, sample_count: usize) -> Result<Self> {
        Self::new(label, 0.0, sample_count.saturating_sub(1) as f64, sample_count)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn minimum(&self) -> f64 {
        self.minimum
    }

    pub fn maximum(&self) -> f64 {
        self.maximum
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Spacing between adjacent samples.
    pub fn step(&self) -> f64 {
        (self.maximum - self.minimum) / (self.sample_count - 1) as f64
    }

    /// Physical coordinate of sample `index`.
    pub fn value(&self, index: usize) -> f64 {
        if index + 1 == self.sample_count {
            self.maximum
        } else {
            self.minimum + index as f64 * self.step()
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.sample_count).map(|i| self.value(i)).collect()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.minimum && x <= self.maximum
    }

    /// Fractional index of coordinate `x`.
    pub fn position(&self, x: f64) -> f64 {
        (x - self.minimum) / self.step()
    }

    /// Nearest sample to `x`; an exact midpoint goes to the lower index.
    pub fn nearest_index(&self, x: f64) -> Result<usize> {
        if !self.contains(x) {
            return Err(Error::OutOfRange {
                value: x,
                min: self.minimum,
                max: self.maximum,
            });
        }
        let pos = self.position(x);
        let idx = (pos - 0.5).ceil().max(0.0) as usize;
        Ok(idx.min(self.sample_count - 1))
    }
}

fn check_shape(values: &Array2<f64>, energy: &AxisInfo, momentum: &AxisInfo) -> Result<()> {
    let (h, w) = values.dim();
    if h != energy.sample_count() || w != momentum.sample_count() {
        return Err(Error::shape(
            format!("{}x{}", energy.sample_count(), momentum.sample_count()),
            format!("{h}x{w}"),
        ));
    }
    Ok(())
}

/// Non-negative count (or intensity) image with axis metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Array2<f64>,
    energy_axis: AxisInfo,
    momentum_axis: AxisInfo,
}

impl Spectrum {
    pub fn new(values: Array2<f64>, energy_axis: AxisInfo, momentum_axis: AxisInfo) -> Result<Self> {
        check_shape(&values, &energy_axis, &momentum_axis)?;
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "spectrum values must be finite and non-negative, found {bad}"
            )));
        }
        Ok(Self {
            values,
            energy_axis,
            momentum_axis,
        })
    }

    /// Spectrum on unit pixel axes.
    pub fn from_pixels(values: Array2<f64>) -> Result<Self> {
        let (h, w) = values.dim();
        Self::new(values, AxisInfo::pixels("energy", h)?, AxisInfo::pixels("momentum", w)?)
    }

    /// Same axes, new values. Negative entries are rejected.
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        Self::new(values, self.energy_axis.clone(), self.momentum_axis.clone())
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn energy_axis(&self) -> &AxisInfo {
        &self.energy_axis
    }

    pub fn momentum_axis(&self) -> &AxisInfo {
        &self.momentum_axis
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// N = Σ n_ij.
    pub fn total_count(&self) -> f64 {
        self.values.sum()
    }

    /// Multiply every value by `factor ≥ 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        self.with_values(&self.values * factor)
    }
}

/// A spectrum normalized to unit total: the per-pixel arrival probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Spectrum);

impl ProbabilityMap {
    pub fn spectrum(&self) -> &Spectrum {
        &self.0
    }

    pub fn into_spectrum(self) -> Spectrum {
        self.0
    }

    pub fn values(&self) -> &Array2<f64> {
        self.0.values()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Expected counts n·P for a total of `n` arrivals.
    pub fn expected_counts(&self, n: f64) -> Spectrum {
        Spectrum {
            values: self.0.values() * n,
            energy_axis: self.0.energy_axis.clone(),
            momentum_axis: self.0.momentum_axis.clone(),
        }
    }
}

/// Divide every pixel by the total count.
pub fn normalize_to_probability(s: &Spectrum) -> Result<ProbabilityMap> {
    let total = s.total_count();
    if total <= 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    let values = s.values() / total;
    Ok(ProbabilityMap(Spectrum {
        values,
        energy_axis: s.energy_axis.clone(),
        momentum_axis: s.momentum_axis.clone(),
    }))
}

/// Signed image with axis metadata, e.g. a second-derivative map.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedMap {
    values: Array2<f64>,
    energy_axis: AxisInfo,
    momentum_axis: AxisInfo,
}

impl SignedMap {
    pub fn new(values: Array2<f64>, energy_axis: AxisInfo, momentum_axis: AxisInfo) -> Result<Self> {
        check_shape(&values, &energy_axis, &momentum_axis)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("map values must be finite".into()));
        }
        Ok(Self {
            values,
            energy_axis,
            momentum_axis,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn energy_axis(&self) -> &AxisInfo {
        &self.energy_axis
    }

    pub fn momentum_axis(&self) -> &AxisInfo {
        &self.momentum_axis
    }

    /// Clamp negatives to zero.
    pub fn into_spectrum(self) -> Spectrum {
        Spectrum {
            values: self.values.mapv(|v| v.max(0.0)),
            energy_axis: self.energy_axis,
            momentum_axis: self.momentum_axis,
        }
    }
}

impl From<Spectrum> for SignedMap {
    fn from(s: Spectrum) -> Self {
        SignedMap {
            values: s.values,
            energy_axis: s.energy_axis,
            momentum_axis: s.momentum_axis,
        }
    }
}
