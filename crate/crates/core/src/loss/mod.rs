//! Training objectives: MAE, MSE, MS-SSIM and the weighted MAE/MS-SSIM mix.
//! Every loss returns its value together with the gradient with respect to
//! the prediction.

mod ms_ssim;

use ndarray::{Array2, ArrayView2, Zip};

use crate::config::ConfigMap;
use crate::error::{Error, Result};

pub use ms_ssim::{effective_scales, ms_ssim, MIN_COMPONENT};

/// Per-scale exponents of the five-scale formulation, before normalization.
pub const STANDARD_SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub alpha: f64,
    pub ms_ssim_scales: usize,
    pub scale_weights: Vec<f64>,
    pub window_size: usize,
    pub window_sigma: f64,
    pub stability_c1: f64,
    pub stability_c2: f64,
    pub dynamic_range: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        let total: f64 = STANDARD_SCALE_WEIGHTS.iter().sum();
        Self {
            alpha: 0.7,
            ms_ssim_scales: 5,
            scale_weights: STANDARD_SCALE_WEIGHTS.iter().map(|w| w / total).collect(),
            window_size: 11,
            window_sigma: 1.5,
            stability_c1: 1e-4,
            stability_c2: 9e-4,
            dynamic_range: 1.0,
        }
    }
}

impl LossSpec {
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Sets the data range and the stability constants derived from it.
    pub fn with_dynamic_range(mut self, range: f64) -> Self {
        self.dynamic_range = range;
        self.stability_c1 = (0.01 * range).powi(2);
        self.stability_c2 = (0.03 * range).powi(2);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.ms_ssim_scales == 0 || self.scale_weights.len() != self.ms_ssim_scales {
            return bad(format!(
                "{} scale weights for {} scales",
                self.scale_weights.len(),
                self.ms_ssim_scales
            ));
        }
        if self.scale_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("scale weights must be non-negative".into());
        }
        let sum: f64 = self.scale_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("scale weights sum to {sum}, expected 1"));
        }
        if self.window_size == 0 || self.window_size.is_multiple_of(2) {
            return bad(format!("window size {} must be odd", self.window_size));
        }
        if !(self.window_sigma > 0.0) {
            return bad("window sigma must be positive".into());
        }
        if !(self.stability_c1 > 0.0 && self.stability_c2 > 0.0 && self.dynamic_range > 0.0) {
            return bad("stability constants and dynamic range must be positive".into());
        }
        Ok(())
    }

    /// The first `scales` weights, renormalized to sum to one.
    pub fn scale_weights_for(&self, scales: usize) -> Vec<f64> {
        let head = &self.scale_weights[..scales];
        let total: f64 = head.iter().sum();
        head.iter().map(|w| w / total).collect()
    }

    /// Reads `alpha`, `ms_ssim_scales`, `window_size`, `window_sigma` and
    /// `dynamic_range`; the stability constants follow the range.
    pub fn from_config(map: &mut ConfigMap) -> Result<Self> {
        let d = Self::default();
        let range: f64 = map.take_or("dynamic_range", d.dynamic_range)?;
        let mut spec = d.with_dynamic_range(range);
        spec.alpha = map.take_or("alpha", spec.alpha)?;
        spec.window_size = map.take_or("window_size", spec.window_size)?;
        spec.window_sigma = map.take_or("window_sigma", spec.window_sigma)?;
        let scales: usize = map.take_or("ms_ssim_scales", spec.ms_ssim_scales)?;
        if scales == 0 || scales > STANDARD_SCALE_WEIGHTS.len() {
            return Err(Error::Config(format!("ms_ssim_scales must be in 1..=5, got {scales}")));
        }
        spec.scale_weights = {
            let head = &STANDARD_SCALE_WEIGHTS[..scales];
            let total: f64 = head.iter().sum();
            head.iter().map(|w| w / total).collect()
        };
        spec.ms_ssim_scales = scales;
        spec.validate()?;
        Ok(spec)
    }
}

/// Objective used by the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `(1 − α)·MAE + α·(1 − MS-SSIM)`.
    Combined,
    Mae,
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" | "mixed" => Ok(Self::Combined),
            "mae" => Ok(Self::Mae),
            "mse" => Ok(Self::Mse),
            other => Err(Error::Config(format!("unknown loss `{other}` (combined, mae, mse)"))),
        }
    }
}

impl LossKind {
    pub fn evaluate(
        self,
        prediction: ArrayView2<f64>,
        target: ArrayView2<f64>,
        spec: &LossSpec,
    ) -> Result<(f64, Array2<f64>)> {
        match self {
            Self::Combined => combined_loss(prediction, target, spec),
            Self::Mae => mae_loss(prediction, target),
            Self::Mse => mse_loss(prediction, target),
        }
    }
}

fn check_shapes(p: &ArrayView2<f64>, t: &ArrayView2<f64>) -> Result<()> {
    if p.dim() != t.dim() {
        return Err(Error::shape(format!("{:?}", t.dim()), format!("{:?}", p.dim())));
    }
    if p.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    Ok(())
}

/// Mean absolute error. The subgradient at ties is zero.
pub fn mae_loss(prediction: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    check_shapes(&prediction, &target)?;
    let n = prediction.len() as f64;
    let mut grad = Array2::zeros(prediction.dim());
    let mut sum = 0.0;
    Zip::from(&mut grad)
        .and(&prediction)
        .and(&target)
        .for_each(|g, &p, &t| {
            let d = p - t;
            sum += d.abs();
            *g = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        });
    Ok((sum / n, grad))
}

pub fn mse_loss(prediction: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    check_shapes(&prediction, &target)?;
    let n = prediction.len() as f64;
    let mut grad = Array2::zeros(prediction.dim());
    let mut sum = 0.0;
    Zip::from(&mut grad)
        .and(&prediction)
        .and(&target)
        .for_each(|g, &p, &t| {
            let d = p - t;
            sum += d * d;
            *g = 2.0 * d / n;
        });
    Ok((sum / n, grad))
}

/// `(1 − α)·MAE + α·(1 − MS-SSIM)`. At the endpoints the unused term is skipped.
pub fn combined_loss(
    prediction: ArrayView2<f64>,
    target: ArrayView2<f64>,
    spec: &LossSpec,
) -> Result<(f64, Array2<f64>)> {
    check_shapes(&prediction, &target)?;
    let a = spec.alpha;
    if a == 0.0 {
        return mae_loss(prediction, target);
    }
    let (ms, g_ms) = ms_ssim(prediction, target, spec)?;
    if a == 1.0 {
        return Ok((1.0 - ms, -g_ms));
    }
    let (mae, g_mae) = mae_loss(prediction, target)?;
    let value = (1.0 - a) * mae + a * (1.0 - ms);
    let grad = g_mae * (1.0 - a) - g_ms * a;
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        Array2::from_shape_fn((h, w), |_| r.random_range(0.0..1.0))
    }

    fn fd_check<F>(f: F, x: &Array2<f64>, grad: &Array2<f64>, probes: usize, eps: f64) -> f64
    where
        F: Fn(&Array2<f64>) -> f64,
    {
        let mut worst: f64 = 0.0;
        let (h, w) = x.dim();
        let mut r = rng::seeded(99);
        for _ in 0..probes {
            let idx = (r.random_range(0..h), r.random_range(0..w));
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (f(&xp) - f(&xm)) / (2.0 * eps);
            let ana = grad[idx];
            let rel = (num - ana).abs() / ana.abs().max(num.abs()).max(1e-10);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn default_spec_is_valid() {
        let s = LossSpec::default();
        s.validate().unwrap();
        assert!((s.scale_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(s, LossSpec::default().with_dynamic_range(1.0));
    }

    #[test]
    fn validation_rejects_bad_fields() {
        assert!(LossSpec::default().with_alpha(1.5).validate().is_err());
        let mut s = LossSpec::default();
        s.scale_weights[0] += 0.01;
        assert!(s.validate().is_err());
        let s = LossSpec {
            window_size: 10,
            ..LossSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn constant_offsets() {
        let p = Array2::from_elem((8, 8), 0.5);
        let t = Array2::from_elem((8, 8), 0.6);
        assert!((mae_loss(p.view(), t.view()).unwrap().0 - 0.1).abs() < 1e-12);
        assert!((mse_loss(p.view(), t.view()).unwrap().0 - 0.01).abs() < 1e-12);
        assert_eq!(mae_loss(p.view(), p.view()).unwrap().0, 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let p = Array2::<f64>::zeros((4, 4));
        let t = Array2::<f64>::zeros((4, 5));
        assert!(matches!(mae_loss(p.view(), t.view()), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            ms_ssim(p.view(), t.view(), &LossSpec::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn constant_field_closed_form() {
        let p = Array2::from_elem((176, 176), 0.5);
        let t = Array2::from_elem((176, 176), 0.6);
        let spec = LossSpec::default();
        let l: f64 = (2.0 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
        let w = spec.scale_weights[4];
        let (ms, _) = ms_ssim(p.view(), t.view(), &spec).unwrap();
        assert!((ms - l.powf(w)).abs() < 1e-12);
        assert!((ms - 0.99780).abs() < 1e-4);
        let (c, _) = combined_loss(p.view(), t.view(), &spec).unwrap();
        assert!((c - 0.03154).abs() < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random(32, 32, 1);
        let y = random(32, 32, 2);
        let spec = LossSpec::default();
        let (_, g) = mse_loss(x.view(), y.view()).unwrap();
        let err = fd_check(|p| mse_loss(p.view(), y.view()).unwrap().0, &x, &g, 20, 1e-5);
        assert!(err < 1e-6, "mse {err}");
        let (_, g) = mae_loss(x.view(), y.view()).unwrap();
        let err = fd_check(|p| mae_loss(p.view(), y.view()).unwrap().0, &x, &g, 20, 1e-7);
        assert!(err < 1e-6, "mae {err}");
        let (_, g) = ms_ssim(x.view(), y.view(), &spec).unwrap();
        let err = fd_check(|p| ms_ssim(p.view(), y.view(), &spec).unwrap().0, &x, &g, 30, 1e-5);
        assert!(err < 1e-4, "ms-ssim {err}");
        let (_, g) = combined_loss(x.view(), y.view(), &spec).unwrap();
        let err = fd_check(
            |p| combined_loss(p.view(), y.view(), &spec).unwrap().0,
            &x,
            &g,
            30,
            1e-6,
        );
        assert!(err < 1e-4, "combined {err}");
    }

    #[test]
    fn endpoints_collapse() {
        let x = random(24, 24, 3);
        let y = random(24, 24, 4);
        let s0 = LossSpec::default().with_alpha(0.0);
        let s1 = LossSpec::default().with_alpha(1.0);
        let mae = mae_loss(x.view(), y.view()).unwrap().0;
        let ms = ms_ssim(x.view(), y.view(), &s1).unwrap().0;
        assert!((combined_loss(x.view(), y.view(), &s0).unwrap().0 - mae).abs() < 1e-12);
        assert!((combined_loss(x.view(), y.view(), &s1).unwrap().0 - (1.0 - ms)).abs() < 1e-12);
    }

    #[test]
    fn transposition_invariance() {
        let x = random(30, 26, 5);
        let y = random(30, 26, 6);
        let spec = LossSpec::default();
        let a = combined_loss(x.view(), y.view(), &spec).unwrap().0;
        let b = combined_loss(x.t(), y.t(), &spec).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }
}
