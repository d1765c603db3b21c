use std::ops::Range;

use rand_distr::{Distribution, Normal};

use super::conv::{conv_backward_into, conv_forward_with, prelu_backward_inplace, prelu_inplace, ConvParams};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_WIDTH: usize = 64;
/// Initial PReLU slope; also enters the initialization variance.
pub const INITIAL_SLOPE: f64 = 0.25;

/// Where one layer's parameters live in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: Range<usize>,
    pub bias: Range<usize>,
    /// Absent on the final layer.
    pub slopes: Option<Range<usize>>,
}

/// Stack of `depth` 3×3 convolutions; every layer but the last is followed by
/// a PReLU, and the stack output is added to the input.
///
/// Parameters are stored in one flat vector (layer by layer: kernel, bias,
/// slopes) so optimizer state and gradients share a single layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    depth: usize,
    width: usize,
    layout: Vec<LayerLayout>,
    params: Vec<T>,
    steps: u64,
}

/// (2D + 1) for D stacked 3×3 convolutions.
pub fn receptive_field(depth: usize, filter_size: usize) -> Result<usize> {
    if filter_size != 3 {
        return Err(Error::UnsupportedFilterSize(filter_size));
    }
    if depth == 0 {
        return Err(Error::InvalidArgument("depth must be ≥ 1".into()));
    }
    Ok(2 * depth + 1)
}

fn build_layout(depth: usize, width: usize) -> (Vec<LayerLayout>, usize) {
    let mut layout = Vec::with_capacity(depth);
    let mut off = 0;
    for l in 0..depth {
        let in_ch = if l == 0 { 1 } else { width };
        let out_ch = if l + 1 == depth { 1 } else { width };
        let kernel = off..off + out_ch * in_ch * 9;
        off = kernel.end;
        let bias = off..off + out_ch;
        off = bias.end;
        let slopes = if l + 1 < depth {
            let r = off..off + out_ch;
            off = r.end;
            Some(r)
        } else {
            None
        };
        layout.push(LayerLayout {
            in_ch,
            out_ch,
            kernel,
            bias,
            slopes,
        });
    }
    (layout, off)
}

/// Activations retained by the forward pass for the reverse pass.
pub struct ForwardCache<T> {
    /// Input to every convolution (index 0 is the network input).
    inputs: Vec<Tensor<T>>,
    /// Pre-activation output of every hidden convolution.
    pre: Vec<Tensor<T>>,
}

impl<T: Real> Network<T> {
    /// All-zero network of the given shape; it maps every input to itself.
    pub fn zeros(depth: usize, width: usize) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(Error::InvalidArgument("depth and width must be ≥ 1".into()));
        }
        let (layout, n) = build_layout(depth, width);
        Ok(Self {
            depth,
            width,
            layout,
            params: vec![T::zero(); n],
            steps: 0,
        })
    }

    /// He-style initialization corrected for PReLU: kernels ~ N(0, 2/(fan_in·(1+a²)))
    /// with a = 0.25, zero biases, slopes 0.25.
    pub fn init(depth: usize, width: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(depth, width)?;
        let mut r = rng::stream(seed, &[0x1417]);
        for l in 0..depth {
            let lay = net.layout[l].clone();
            let fan_in = (lay.in_ch * 9) as f64;
            let std = (2.0 / (fan_in * (1.0 + INITIAL_SLOPE * INITIAL_SLOPE))).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut net.params[lay.kernel] {
                *w = T::from_f64_lossy(normal.sample(&mut r));
            }
            if let Some(s) = lay.slopes {
                net.params[s].fill(T::from_f64_lossy(INITIAL_SLOPE));
            }
        }
        Ok(net)
    }

    pub(crate) fn from_parts(depth: usize, width: usize, params: Vec<T>, steps: u64) -> Result<Self> {
        let mut net = Self::zeros(depth, width)?;
        if params.len() != net.params.len() {
            return Err(Error::shape(net.params.len(), params.len()));
        }
        net.params = params;
        net.steps = steps;
        Ok(net)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Number of optimizer steps applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    pub fn conv(&self, l: usize) -> ConvParams<'_, T> {
        let lay = &self.layout[l];
        ConvParams {
            in_ch: lay.in_ch,
            out_ch: lay.out_ch,
            kernel: &self.params[lay.kernel.clone()],
            bias: &self.params[lay.bias.clone()],
        }
    }

    pub fn slopes(&self, l: usize) -> Option<&[T]> {
        self.layout[l].slopes.clone().map(|r| &self.params[r])
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            depth: self.depth,
            width: self.width,
            layout: self.layout.clone(),
            params: self.params.iter().map(|&p| U::from_f64_lossy(p.as_f64())).collect(),
            steps: self.steps,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != 1 || x.height() < 3 || x.width() < 3 {
            return Err(Error::shape("1 channel, at least 3x3", format!("{:?}", x.shape())));
        }
        Ok(())
    }

    /// f(x) = x + stack(x).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cols = Vec::new();
        let mut a = x.clone();
        for l in 0..self.depth {
            let mut z = conv_forward_with(&a, &self.conv(l), &mut cols);
            if let Some(s) = self.slopes(l) {
                prelu_inplace(&mut z, s);
            }
            a = z;
        }
        add_inplace(&mut a, x);
        Ok(a)
    }

    /// Forward pass keeping what the reverse pass needs.
    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let mut cols = Vec::new();
        let mut inputs = Vec::with_capacity(self.depth);
        let mut pre = Vec::with_capacity(self.depth.saturating_sub(1));
        inputs.push(x.clone());
        let mut out = None;
        for l in 0..self.depth {
            let z = conv_forward_with(&inputs[l], &self.conv(l), &mut cols);
            match self.slopes(l) {
                Some(s) => {
                    let mut a = z.clone();
                    prelu_inplace(&mut a, s);
                    pre.push(z);
                    inputs.push(a);
                }
                None => out = Some(z),
            }
        }
        let mut y = out.expect("last layer has no activation");
        add_inplace(&mut y, x);
        Ok((y, ForwardCache { inputs, pre }))
    }

    /// Parameter gradients for dL/d(output) = `grad_out`, written into `grads`
    /// (overwritten, same layout as [`Network::params`]).
    pub fn backward_into(&self, cache: &ForwardCache<T>, grad_out: &Tensor<T>, grads: &mut [T]) -> Result<()> {
        let x = &cache.inputs[0];
        if grad_out.shape() != x.shape() {
            return Err(Error::shape(
                format!("{:?}", x.shape()),
                format!("{:?}", grad_out.shape()),
            ));
        }
        if grads.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), grads.len()));
        }
        grads.fill(T::zero());
        let mut cols = Vec::new();
        // The skip path only feeds the input gradient, which is not needed.
        let mut g = grad_out.clone();
        for l in (0..self.depth).rev() {
            let lay = &self.layout[l];
            if let Some(sr) = lay.slopes.clone() {
                prelu_backward_inplace(&cache.pre[l], &self.params[sr.clone()], &mut g, &mut grads[sr]);
            }
            let (gk, gb) = two_ranges(grads, lay.kernel.clone(), lay.bias.clone());
            let next = conv_backward_into(&cache.inputs[l], &self.conv(l), &g, gk, gb, l > 0, &mut cols);
            if let Some(n) = next {
                g = n;
            }
        }
        Ok(())
    }

    /// Reverse-mode gradients of a loss with dL/d(output) = `loss_gradient`.
    pub fn gradients(&self, noisy: &Tensor<T>, loss_gradient: &Tensor<T>) -> Result<Vec<T>> {
        let (_, cache) = self.forward_cached(noisy)?;
        let mut grads = vec![T::zero(); self.params.len()];
        self.backward_into(&cache, loss_gradient, &mut grads)?;
        Ok(grads)
    }
}

fn add_inplace<T: Real>(a: &mut Tensor<T>, b: &Tensor<T>) {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x = *x + y;
    }
}

/// Two disjoint mutable sub-slices, `a` before `b`.
fn two_ranges<T>(v: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}
