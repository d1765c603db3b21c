//! Multiscale structural similarity with an exact reverse pass.
//!
//! Per scale the images are filtered with a normalized Gaussian window in
//! "valid" mode. The contrast-structure index enters at every scale, the
//! luminance index only at the coarsest; scales are linked by 2×2 mean
//! pooling and combined as Π v_j^{w_j}.

use ndarray::{Array2, ArrayView2, Zip};

use super::LossSpec;
use crate::error::{Error, Result};

/// Lower clamp on each per-scale index so fractional powers stay defined for
/// anti-correlated inputs. Clamped components pass no gradient.
pub const MIN_COMPONENT: f64 = 1e-6;

pub(crate) fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode correlation: output (h − n + 1, w − n + 1).
fn filter_valid(a: ArrayView2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = a.dim();
    let n = g.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        let src = a.row(i);
        let mut dst = rows.row_mut(i);
        for j in 0..ow {
            let mut acc = 0.0;
            for (k, &gk) in g.iter().enumerate() {
                acc += gk * src[j + k];
            }
            dst[j] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for (k, &gk) in g.iter().enumerate() {
            let src = rows.row(i + k);
            Zip::from(out.row_mut(i)).and(&src).for_each(|o, &v| *o += gk * v);
        }
    }
    out
}

/// Adjoint of [`filter_valid`], back onto an `h × w` grid.
fn filter_valid_adjoint(go: &Array2<f64>, g: &[f64], h: usize, w: usize) -> Array2<f64> {
    let (oh, ow) = go.dim();
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..oh {
        for (k, &gk) in g.iter().enumerate() {
            let src = go.row(i);
            Zip::from(rows.row_mut(i + k)).and(&src).for_each(|o, &v| *o += gk * v);
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        let src = rows.row(i);
        let mut dst = out.row_mut(i);
        for j in 0..ow {
            let v = src[j];
            for (k, &gk) in g.iter().enumerate() {
                dst[j + k] += gk * v;
            }
        }
    }
    out
}

fn pool2(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(i, j)| {
        0.25 * (a[[2 * i, 2 * j]] + a[[2 * i, 2 * j + 1]] + a[[2 * i + 1, 2 * j]] + a[[2 * i + 1, 2 * j + 1]])
    })
}

/// Adjoint of [`pool2`] added into `dst`.
fn unpool2_add(g: &Array2<f64>, dst: &mut Array2<f64>) {
    for ((i, j), &v) in g.indexed_iter() {
        let q = 0.25 * v;
        dst[[2 * i, 2 * j]] += q;
        dst[[2 * i, 2 * j + 1]] += q;
        dst[[2 * i + 1, 2 * j]] += q;
        dst[[2 * i + 1, 2 * j + 1]] += q;
    }
}

struct ScaleStats {
    mu_x: Array2<f64>,
    mu_y: Array2<f64>,
    l: Array2<f64>,
    cs: Array2<f64>,
    b1: Array2<f64>,
    b2: Array2<f64>,
}

fn scale_stats(x: &Array2<f64>, y: &Array2<f64>, g: &[f64], c1: f64, c2: f64) -> ScaleStats {
    let mu_x = filter_valid(x.view(), g);
    let mu_y = filter_valid(y.view(), g);
    let fxx = filter_valid((x * x).view(), g);
    let fyy = filter_valid((y * y).view(), g);
    let fxy = filter_valid((x * y).view(), g);
    let dim = mu_x.dim();
    let mut l = Array2::zeros(dim);
    let mut cs = Array2::zeros(dim);
    let mut b1 = Array2::zeros(dim);
    let mut b2 = Array2::zeros(dim);
    {
        let (ls, css) = (l.as_slice_mut().unwrap(), cs.as_slice_mut().unwrap());
        let (b1s, b2s) = (b1.as_slice_mut().unwrap(), b2.as_slice_mut().unwrap());
        let (mxs, mys) = (mu_x.as_slice().unwrap(), mu_y.as_slice().unwrap());
        let (xxs, yys, xys) = (
            fxx.as_slice().unwrap(),
            fyy.as_slice().unwrap(),
            fxy.as_slice().unwrap(),
        );
        for i in 0..ls.len() {
            let (mx, my) = (mxs[i], mys[i]);
            let sxx = xxs[i] - mx * mx;
            let syy = yys[i] - my * my;
            let sxy = xys[i] - mx * my;
            b1s[i] = mx * mx + my * my + c1;
            b2s[i] = sxx + syy + c2;
            ls[i] = (2.0 * mx * my + c1) / b1s[i];
            css[i] = (2.0 * sxy + c2) / b2s[i];
        }
    }
    ScaleStats {
        mu_x,
        mu_y,
        l,
        cs,
        b1,
        b2,
    }
}

/// Number of scales usable on an `h × w` input: the largest count ≤ the
/// configured maximum whose coarsest level still fits the window.
pub fn effective_scales(h: usize, w: usize, spec: &LossSpec) -> Result<usize> {
    let mut n = h.min(w);
    if n < spec.window_size {
        return Err(Error::TooSmallForScales {
            height: h,
            width: w,
            window: spec.window_size,
        });
    }
    let mut s = 1;
    while s < spec.ms_ssim_scales && n / 2 >= spec.window_size {
        n /= 2;
        s += 1;
    }
    Ok(s)
}

/// MS-SSIM index and its gradient with respect to `prediction`.
pub fn ms_ssim(prediction: ArrayView2<f64>, target: ArrayView2<f64>, spec: &LossSpec) -> Result<(f64, Array2<f64>)> {
    if prediction.dim() != target.dim() {
        return Err(Error::shape(
            format!("{:?}", target.dim()),
            format!("{:?}", prediction.dim()),
        ));
    }
    let (h, w) = prediction.dim();
    let scales = effective_scales(h, w, spec)?;
    let weights = spec.scale_weights_for(scales);
    let g = gaussian_window(spec.window_size, spec.window_sigma);
    let (c1, c2) = (spec.stability_c1, spec.stability_c2);

    let mut xs = vec![prediction.to_owned()];
    let mut ys = vec![target.to_owned()];
    for j in 1..scales {
        xs.push(pool2(&xs[j - 1]));
        ys.push(pool2(&ys[j - 1]));
    }

    let mut stats = Vec::with_capacity(scales);
    let mut comps = Vec::with_capacity(scales);
    for j in 0..scales {
        let st = scale_stats(&xs[j], &ys[j], &g, c1, c2);
        let v = if j + 1 == scales {
            (&st.l * &st.cs).mean().unwrap()
        } else {
            st.cs.mean().unwrap()
        };
        comps.push(v);
        stats.push(st);
    }
    let clamped: Vec<f64> = comps.iter().map(|&v| v.clamp(MIN_COMPONENT, 1.0)).collect();
    let log_value: f64 = clamped.iter().zip(&weights).map(|(v, w)| w * v.ln()).sum();
    let value = log_value.exp();

    // Reverse pass, coarsest scale first so pooled gradients can cascade down.
    let mut carry: Option<Array2<f64>> = None;
    for j in (0..scales).rev() {
        let st = &stats[j];
        let (x, y) = (&xs[j], &ys[j]);
        let live = comps[j] > MIN_COMPONENT && comps[j] <= 1.0;
        let upstream = if live { value * weights[j] / comps[j] } else { 0.0 };
        let p = st.cs.len() as f64;
        let coarsest = j + 1 == scales;

        let dim = st.cs.dim();
        let mut g_mu = Array2::<f64>::zeros(dim);
        let mut g_xx = Array2::<f64>::zeros(dim);
        let mut g_xy = Array2::<f64>::zeros(dim);
        {
            let (gmu, gxx, gxy) = (
                g_mu.as_slice_mut().unwrap(),
                g_xx.as_slice_mut().unwrap(),
                g_xy.as_slice_mut().unwrap(),
            );
            let (mxs, mys) = (st.mu_x.as_slice().unwrap(), st.mu_y.as_slice().unwrap());
            let (ls, css) = (st.l.as_slice().unwrap(), st.cs.as_slice().unwrap());
            let (b1s, b2s) = (st.b1.as_slice().unwrap(), st.b2.as_slice().unwrap());
            for i in 0..gmu.len() {
                let (l, cs) = (ls[i], css[i]);
                let (gl, gcs) = if coarsest {
                    (upstream * cs / p, upstream * l / p)
                } else {
                    (0.0, upstream / p)
                };
                let fxx = -gcs * cs / b2s[i];
                let fxy = gcs * 2.0 / b2s[i];
                gxx[i] = fxx;
                gxy[i] = fxy;
                gmu[i] = gl * 2.0 * (mys[i] - l * mxs[i]) / b1s[i] - 2.0 * mxs[i] * fxx - mys[i] * fxy;
            }
        }
        let (hj, wj) = x.dim();
        let a_mu = filter_valid_adjoint(&g_mu, &g, hj, wj);
        let a_xx = filter_valid_adjoint(&g_xx, &g, hj, wj);
        let a_xy = filter_valid_adjoint(&g_xy, &g, hj, wj);
        let mut gx = a_mu;
        Zip::from(&mut gx)
            .and(&a_xx)
            .and(&a_xy)
            .and(x)
            .and(y)
            .for_each(|o, &axx, &axy, &xv, &yv| *o += 2.0 * xv * axx + yv * axy);
        if let Some(c) = carry.take() {
            unpool2_add(&c, &mut gx);
        }
        carry = Some(gx);
    }
    let grad = carry.expect("at least one scale");
    debug_assert_eq!(grad.dim(), (h, w));
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

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
    }

    #[test]
    fn filter_adjoint_identity() {
        let g = gaussian_window(5, 1.0);
        let x = random(9, 12, 1);
        let y = random(5, 8, 2);
        let lhs = (&filter_valid(x.view(), &g) * &y).sum();
        let rhs = (&x * &filter_valid_adjoint(&y, &g, 9, 12)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_adjoint_identity() {
        let x = random(7, 9, 3);
        let y = random(3, 4, 4);
        let lhs = (&pool2(&x) * &y).sum();
        let mut back = Array2::zeros((7, 9));
        unpool2_add(&y, &mut back);
        assert!((lhs - (&x * &back).sum()).abs() < 1e-12);
    }

    #[test]
    fn scale_count_reduction() {
        let spec = LossSpec::default();
        assert_eq!(effective_scales(300, 300, &spec).unwrap(), 5);
        assert_eq!(effective_scales(176, 200, &spec).unwrap(), 5);
        assert_eq!(effective_scales(175, 200, &spec).unwrap(), 4);
        assert_eq!(effective_scales(64, 64, &spec).unwrap(), 3);
        assert_eq!(effective_scales(32, 40, &spec).unwrap(), 2);
        assert_eq!(effective_scales(11, 11, &spec).unwrap(), 1);
        assert!(matches!(
            effective_scales(10, 64, &spec),
            Err(Error::TooSmallForScales { .. })
        ));
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        let x = random(48, 40, 5);
        let (v, g) = ms_ssim(x.view(), x.view(), &LossSpec::default()).unwrap();
        assert_eq!(v, 1.0);
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn symmetric_in_arguments() {
        let x = random(40, 40, 6);
        let y = random(40, 40, 7);
        let spec = LossSpec::default();
        let a = ms_ssim(x.view(), y.view(), &spec).unwrap().0;
        let b = ms_ssim(y.view(), x.view(), &spec).unwrap().0;
        assert!((a - b).abs() < 1e-12);
        assert!(a > 0.0 && a < 1.0);
    }
}
