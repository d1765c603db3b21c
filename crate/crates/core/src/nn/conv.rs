//! 3×3 same-size convolution (zero padding 1) via im2col + GEMM, and the
//! per-channel parametric rectifier.

use super::{Real, Tensor};
use crate::error::{Error, Result};

const K: usize = 3;
const TAPS: usize = K * K;

/// Borrowed view of one convolution layer's parameters.
///
/// `kernel` is laid out `(out_ch, in_ch, 3, 3)`.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams<'a, T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: &'a [T],
    pub bias: &'a [T],
}

impl<'a, T: Real> ConvParams<'a, T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: &'a [T], bias: &'a [T]) -> Result<Self> {
        if kernel.len() != out_ch * in_ch * TAPS || bias.len() != out_ch {
            return Err(Error::shape(
                format!("kernel {out_ch}x{in_ch}x3x3 and {out_ch} biases"),
                format!("{} kernel values and {} biases", kernel.len(), bias.len()),
            ));
        }
        Ok(Self {
            in_ch,
            out_ch,
            kernel,
            bias,
        })
    }
}

/// Parameter gradients of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

/// Unfold `input` into `(in_ch·9, H·W)` columns; row `c·9 + 3·ky + kx` holds the
/// input shifted by `(ky − 1, kx − 1)`.
pub(crate) fn im2col<T: Real>(input: &Tensor<T>, cols: &mut Vec<T>) {
    let (c_in, h, w) = input.shape();
    let hw = h * w;
    cols.clear();
    cols.resize(c_in * TAPS * hw, T::zero());
    for c in 0..c_in {
        let src = input.channel(c);
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((c * TAPS) + ky * K + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = if dx < 0 { 1 } else { 0 };
                    let x1 = if dx > 0 { w - 1 } else { w };
                    if x0 >= x1 {
                        continue;
                    }
                    let s0 = sy as usize * w;
                    let dst = &mut row[y * w + x0..y * w + x1];
                    let s = &src[(s0 as isize + x0 as isize + dx) as usize..(s0 as isize + x1 as isize + dx) as usize];
                    dst.copy_from_slice(s);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto a `(c_in, h, w)` grid.
pub(crate) fn col2im<T: Real>(cols: &[T], c_in: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut out = Tensor::zeros(c_in, h, w);
    let data = out.data_mut();
    for c in 0..c_in {
        let dst_ch = &mut data[c * hw..(c + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((c * TAPS) + ky * K + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = if dx < 0 { 1 } else { 0 };
                    let x1 = if dx > 0 { w - 1 } else { w };
                    if x0 >= x1 {
                        continue;
                    }
                    let base = (sy as usize * w) as isize + dx;
                    let d = &mut dst_ch[(base + x0 as isize) as usize..(base + x1 as isize) as usize];
                    for (o, &g) in d.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *o = *o + g;
                    }
                }
            }
        }
    }
    out
}

fn check_input<T: Real>(input: &Tensor<T>, layer: &ConvParams<'_, T>) -> Result<()> {
    if input.channels() != layer.in_ch {
        return Err(Error::shape(
            format!("{} input channels", layer.in_ch),
            format!("{} channels", input.channels()),
        ));
    }
    if input.height() == 0 || input.width() == 0 {
        return Err(Error::shape(
            "non-empty spatial dimensions",
            format!("{:?}", input.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn conv_forward_with<T: Real>(input: &Tensor<T>, layer: &ConvParams<'_, T>, cols: &mut Vec<T>) -> Tensor<T> {
    let (_, h, w) = input.shape();
    let hw = h * w;
    im2col(input, cols);
    let mut out = Tensor::zeros(layer.out_ch, h, w);
    let kdim = layer.in_ch * TAPS;
    T::gemm(
        layer.out_ch,
        kdim,
        hw,
        layer.kernel,
        (kdim, 1),
        cols,
        (hw, 1),
        T::zero(),
        out.data_mut(),
        (hw, 1),
    );
    for (o, &b) in out.data_mut().chunks_exact_mut(hw).zip(layer.bias) {
        if b != T::zero() {
            o.iter_mut().for_each(|v| *v = *v + b);
        }
    }
    out
}

/// Same-size 3×3 convolution plus bias.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, layer: &ConvParams<'_, T>) -> Result<Tensor<T>> {
    check_input(input, layer)?;
    Ok(conv_forward_with(input, layer, &mut Vec::new()))
}

/// Accumulate kernel and bias gradients into `gk`/`gb` and, if requested,
/// return the input gradient.
pub(crate) fn conv_backward_into<T: Real>(
    input: &Tensor<T>,
    layer: &ConvParams<'_, T>,
    grad_out: &Tensor<T>,
    gk: &mut [T],
    gb: &mut [T],
    need_input: bool,
    cols: &mut Vec<T>,
) -> Option<Tensor<T>> {
    let (c_in, h, w) = input.shape();
    let hw = h * w;
    let kdim = c_in * TAPS;
    im2col(input, cols);
    // dK = dY · colsᵀ
    T::gemm(
        layer.out_ch,
        hw,
        kdim,
        grad_out.data(),
        (hw, 1),
        cols,
        (1, hw),
        T::one(),
        gk,
        (kdim, 1),
    );
    for (g, row) in gb.iter_mut().zip(grad_out.data().chunks_exact(hw)) {
        *g = *g + row.iter().copied().sum::<T>();
    }
    if !need_input {
        return None;
    }
    // dcols = Kᵀ · dY, reusing the column buffer.
    T::gemm(
        kdim,
        layer.out_ch,
        hw,
        layer.kernel,
        (1, kdim),
        grad_out.data(),
        (hw, 1),
        T::zero(),
        cols,
        (hw, 1),
    );
    Some(col2im(cols, c_in, h, w))
}

/// Reverse pass of [`conv2d_forward`].
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    layer: &ConvParams<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    check_input(input, layer)?;
    if grad_out.shape() != (layer.out_ch, input.height(), input.width()) {
        return Err(Error::shape(
            format!("{:?}", (layer.out_ch, input.height(), input.width())),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut kernel = vec![T::zero(); layer.kernel.len()];
    let mut bias = vec![T::zero(); layer.out_ch];
    let input_grad = conv_backward_into(input, layer, grad_out, &mut kernel, &mut bias, true, &mut Vec::new());
    Ok(ConvGrads {
        input: input_grad,
        kernel,
        bias,
    })
}

fn check_slopes<T: Real>(x: &Tensor<T>, slopes: &[T]) -> Result<()> {
    if slopes.len() != x.channels() {
        return Err(Error::shape(format!("{} slopes", x.channels()), slopes.len()));
    }
    Ok(())
}

/// y = x for x > 0, a·x otherwise, with one slope `a` per channel.
pub fn prelu_forward<T: Real>(x: &Tensor<T>, slopes: &[T]) -> Result<Tensor<T>> {
    check_slopes(x, slopes)?;
    let mut y = x.clone();
    prelu_inplace(&mut y, slopes);
    Ok(y)
}

pub(crate) fn prelu_inplace<T: Real>(x: &mut Tensor<T>, slopes: &[T]) {
    let p = x.pixels();
    for (ch, &a) in x.data_mut().chunks_exact_mut(p).zip(slopes) {
        for v in ch {
            if *v <= T::zero() {
                *v = *v * a;
            }
        }
    }
}

/// Returns (dL/dx, dL/da) given the pre-activation `x` and dL/dy.
pub fn prelu_backward<T: Real>(x: &Tensor<T>, slopes: &[T], grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    check_slopes(x, slopes)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::shape(
            format!("{:?}", x.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut gs = vec![T::zero(); slopes.len()];
    let mut gx = grad_out.clone();
    prelu_backward_inplace(x, slopes, &mut gx, &mut gs);
    Ok((gx, gs))
}

/// Turns dL/dy in `grad` into dL/dx and accumulates dL/da into `gs`.
pub(crate) fn prelu_backward_inplace<T: Real>(x: &Tensor<T>, slopes: &[T], grad: &mut Tensor<T>, gs: &mut [T]) {
    let p = x.pixels();
    for (((xc, gc), &a), ga) in x
        .data()
        .chunks_exact(p)
        .zip(grad.data_mut().chunks_exact_mut(p))
        .zip(slopes)
        .zip(gs.iter_mut())
    {
        let mut acc = T::zero();
        for (&xv, g) in xc.iter().zip(gc.iter_mut()) {
            if xv <= T::zero() {
                acc = acc + *g * xv;
                *g = *g * a;
            }
        }
        *ga = *ga + acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    /// Direct nested-loop convolution, independent of im2col/GEMM.
    fn naive_conv(input: &Tensor<f64>, kernel: &[f64], bias: &[f64], out_ch: usize) -> Tensor<f64> {
        let (c_in, h, w) = input.shape();
        let mut out = Tensor::zeros(out_ch, h, w);
        for o in 0..out_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for c in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = x as isize + kx as isize - 1;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += kernel[((o * c_in + c) * 3 + ky) * 3 + kx]
                                        * input.data()[(c * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = random_tensor(1, 5, 7, 1);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let layer = ConvParams::new(1, 1, &k, &[0.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &layer).unwrap(), x);
    }

    #[test]
    fn averaging_kernel_on_constant() {
        let x = Tensor::from_vec(1, 6, 6, vec![2.5f64; 36]).unwrap();
        let k = vec![1.0 / 9.0; 9];
        let y = conv2d_forward(&x, &ConvParams::new(1, 1, &k, &[0.0]).unwrap()).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                assert!((y.data()[i * 6 + j] - 2.5).abs() < 1e-14);
            }
        }
        // Zero padding pulls the corner down to 4/9 of the constant.
        assert!((y.data()[0] - 2.5 * 4.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn matches_naive_convolution() {
        let x = random_tensor(3, 6, 5, 2);
        let k = random_vec(4 * 3 * 9, 3);
        let b = random_vec(4, 4);
        let fast = conv2d_forward(&x, &ConvParams::new(3, 4, &k, &b).unwrap()).unwrap();
        let slow = naive_conv(&x, &k, &b, 4);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch() {
        let x = random_tensor(2, 4, 4, 5);
        let k = vec![0.0; 9];
        let layer = ConvParams::new(1, 1, &k, &[0.0]).unwrap();
        assert!(matches!(conv2d_forward(&x, &layer), Err(Error::ShapeMismatch { .. })));
        assert!(ConvParams::<f64>::new(1, 2, &k, &[0.0]).is_err());
    }

    #[test]
    fn prelu_definition() {
        let x = Tensor::from_vec(1, 1, 2, vec![2.0, -1.0]).unwrap();
        let y = prelu_forward(&x, &[0.25]).unwrap();
        assert_eq!(y.data(), &[2.0, -0.25]);
        let g = Tensor::from_vec(1, 1, 2, vec![1.0, 1.0]).unwrap();
        let (gx, ga) = prelu_backward(&x, &[0.25], &g).unwrap();
        assert_eq!(gx.data(), &[1.0, 0.25]);
        assert_eq!(ga, vec![-1.0]);
        assert!(prelu_forward(&x, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> = <x, col2im(c)>
        let x = random_tensor(2, 4, 5, 6);
        let mut cols = Vec::new();
        im2col(&x, &mut cols);
        let c = random_vec(cols.len(), 7);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im(&c, 2, 4, 5);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
