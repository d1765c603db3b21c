//! Training loop: Adam with step-decay learning rate, dihedral and brightness
//! augmentation, percentile input scaling, and validation monitoring.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::loss::{combined_loss, ms_ssim, mse_loss, LossKind, LossSpec};
use crate::nn::{save_checkpoint, Network, Real, Tensor, DEFAULT_WIDTH};
use crate::noise::{make_raw_pair, make_training_pair, sample_log_weighted_count, NoiseConfig, TrainingPair};
use crate::rng::{self, Rng};
use crate::spectrum::{ProbabilityMap, SignedMap, Spectrum};

/// Floor on the normalization divisor.
pub const MIN_SCALE: f64 = 1e-12;
/// Percentile of the noisy member used as the normalization divisor.
pub const NORMALIZATION_PERCENTILE: f64 = 99.0;
/// Environment variable capping the number of gradient workers.
pub const THREADS_ENV: &str = "SPECDN_THREADS";

// Stream labels for the seeded generators.
const STREAM_COUNT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_PAIRS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub dihedral: bool,
    pub brightness: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub depth: usize,
    pub width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 20,
            width: DEFAULT_WIDTH,
        }
    }
}

impl NetConfig {
    pub fn from_config(map: &mut ConfigMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            depth: map.take_or("depth", d.depth)?,
            width: map.take_or("width", d.width)?,
        };
        if cfg.depth == 0 || cfg.width == 0 {
            return Err(Error::Config("depth and width must be ≥ 1".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub augmentation: Augmentation,
    pub brightness_range: (f64, f64),
    pub seed: u64,
    /// Noisy pairs drawn per clean map in every epoch.
    pub pairs_per_map: usize,
    /// Draw fresh noise every epoch; otherwise the first epoch's pairs are reused.
    pub regenerate_pairs: bool,
    pub loss: LossKind,
    pub loss_spec: LossSpec,
    /// Requested gradient workers, further capped by `SPECDN_THREADS`.
    pub workers: usize,
    /// Where the final network is written, if anywhere.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr_initial: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 50,
            batch_size: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            augmentation: Augmentation {
                dihedral: true,
                brightness: true,
            },
            brightness_range: (0.5, 1.5),
            seed: 0,
            pairs_per_map: 50,
            regenerate_pairs: true,
            loss: LossKind::Combined,
            loss_spec: LossSpec::default(),
            workers: 1,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad("lr_initial must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must be in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be ≥ 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if self.pairs_per_map == 0 {
            return bad("pairs_per_map must be ≥ 1");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        let (lo, hi) = self.brightness_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("brightness_range must satisfy 0 < low ≤ high");
        }
        self.loss_spec.validate()
    }

    /// Reads every training key; unknown keys are left for the caller's `finish`.
    pub fn from_config(map: &mut ConfigMap) -> Result<Self> {
        let d = Self::default();
        let loss_kind: String = map.take_or("loss", "combined".to_string())?;
        let checkpoint: Option<String> = map.take("checkpoint")?;
        let cfg = Self {
            epochs: map.take_or("epochs", d.epochs)?,
            lr_initial: map.take_or("lr_initial", d.lr_initial)?,
            lr_decay_factor: map.take_or("lr_decay_factor", d.lr_decay_factor)?,
            lr_decay_every: map.take_or("lr_decay_every", d.lr_decay_every)?,
            batch_size: map.take_or("batch_size", d.batch_size)?,
            adam_beta1: map.take_or("adam_beta1", d.adam_beta1)?,
            adam_beta2: map.take_or("adam_beta2", d.adam_beta2)?,
            adam_epsilon: map.take_or("adam_epsilon", d.adam_epsilon)?,
            augmentation: Augmentation {
                dihedral: map.take_or("augment_dihedral", d.augmentation.dihedral)?,
                brightness: map.take_or("augment_brightness", d.augmentation.brightness)?,
            },
            brightness_range: map.take_range("brightness_range")?.unwrap_or(d.brightness_range),
            seed: map.take_or("seed", d.seed)?,
            pairs_per_map: map.take_or("pairs_per_map", d.pairs_per_map)?,
            regenerate_pairs: map.take_or("regenerate_pairs", d.regenerate_pairs)?,
            loss: loss_kind.parse()?,
            loss_spec: LossSpec::from_config(map)?,
            workers: map.take_or("workers", d.workers)?,
            checkpoint: checkpoint.map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lr_initial · factor^⌊epoch / every⌋`.
pub fn learning_rate(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.lr_decay_every.max(1)) as i32;
    cfg.lr_initial * cfg.lr_decay_factor.powi(k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(parameters: usize) -> Self {
        Self {
            first_moment: vec![0.0; parameters],
            second_moment: vec![0.0; parameters],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(params.len(), grads.len()));
    }
    if state.first_moment.len() != params.len() || state.second_moment.len() != params.len() {
        return Err(Error::shape(params.len(), state.first_moment.len()));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    state.step += 1;
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let c1 = 1.0 - b1.powi(state.step.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(state.step.min(i32::MAX as u64) as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let g = g.as_f64();
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        *p = T::from_f64_lossy(p.as_f64() - update);
    }
    Ok(())
}

/// An element of the symmetry group of the square: optional horizontal flip,
/// then `rotation` quarter turns counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub rotation: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Self = Self {
        rotation: 0,
        flip: false,
    };

    pub fn all() -> impl Iterator<Item = Self> {
        (0..8u8).map(|i| Self {
            rotation: i % 4,
            flip: i >= 4,
        })
    }

    /// Elements that keep a non-square grid's shape.
    pub fn shape_preserving() -> impl Iterator<Item = Self> {
        Self::all().filter(|d| d.rotation % 2 == 0)
    }

    pub fn apply(&self, a: &Array2<f64>) -> Array2<f64> {
        let mut out = if self.flip {
            a.slice(s![.., ..;-1]).to_owned()
        } else {
            a.clone()
        };
        for _ in 0..self.rotation % 4 {
            out = rot90(&out);
        }
        out
    }

    pub fn invert(&self, a: &Array2<f64>) -> Array2<f64> {
        let mut out = a.clone();
        for _ in 0..(4 - self.rotation % 4) % 4 {
            out = rot90(&out);
        }
        if self.flip {
            out = out.slice(s![.., ..;-1]).to_owned();
        }
        out
    }
}

fn rot90(a: &Array2<f64>) -> Array2<f64> {
    a.t().slice(s![..;-1, ..]).to_owned()
}

/// What [`augment_pair`] did, so it can be undone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRecord {
    pub element: Dihedral,
    pub brightness: f64,
}

/// Apply an explicit transform to both members of a pair.
pub fn apply_augmentation(pair: &TrainingPair, rec: &AugmentRecord) -> Result<TrainingPair> {
    let (h, w) = pair.dim();
    if rec.element.rotation % 2 == 1 && h != w {
        return Err(Error::NonSquareInput { height: h, width: w });
    }
    let b = rec.brightness;
    let noisy = rec.element.apply(pair.noisy.values()) * b;
    let clean = rec.element.apply(pair.clean.values()) * b;
    Ok(TrainingPair {
        noisy: pair.noisy.with_values(noisy)?,
        clean: pair.clean.with_values(clean)?,
        total_count: pair.total_count,
        scale: pair.scale,
    })
}

/// Random dihedral element (flips only on non-square grids) and brightness
/// factor, applied identically to both members.
pub fn augment_pair(pair: &TrainingPair, cfg: &TrainConfig, rng: &mut Rng) -> Result<(TrainingPair, AugmentRecord)> {
    let (h, w) = pair.dim();
    let element = if cfg.augmentation.dihedral {
        let pool: Vec<Dihedral> = if h == w {
            Dihedral::all().collect()
        } else {
            Dihedral::shape_preserving().collect()
        };
        pool[rng.random_range(0..pool.len())]
    } else {
        Dihedral::IDENTITY
    };
    let brightness = if cfg.augmentation.brightness {
        let (lo, hi) = cfg.brightness_range;
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    } else {
        1.0
    };
    let rec = AugmentRecord { element, brightness };
    Ok((apply_augmentation(pair, &rec)?, rec))
}

/// Linear-interpolated percentile (0–100) of the values.
pub fn percentile(values: &Array2<f64>, q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().collect();
    if v.is_empty() {
        return 0.0;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut a, rest) = v.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return a;
    }
    let b = rest.iter().copied().fold(f64::INFINITY, f64::min);
    a + frac * (b - a)
}

/// Normalization divisor for a noisy map: its 99th percentile, falling back
/// to the maximum for very sparse maps, floored at [`MIN_SCALE`].
pub fn normalization_scale(noisy: &Array2<f64>) -> Result<f64> {
    let total: f64 = noisy.sum();
    if !(total > 0.0) {
        return Err(Error::ZeroSpectrum);
    }
    let mut s = percentile(noisy, NORMALIZATION_PERCENTILE);
    if s <= 0.0 {
        s = noisy.iter().copied().fold(0.0, f64::max);
    }
    Ok(s.max(MIN_SCALE))
}

/// Divide both members by the noisy member's normalization scale. Returns the
/// normalized pair and the divisor.
pub fn normalize_pair(pair: &TrainingPair) -> Result<(TrainingPair, f64)> {
    let s = normalization_scale(pair.noisy.values())?;
    let out = TrainingPair {
        noisy: pair.noisy.with_values(pair.noisy.values() / s)?,
        clean: pair.clean.with_values(pair.clean.values() / s)?,
        total_count: pair.total_count,
        scale: pair.scale * s,
    };
    Ok((out, s))
}

/// Inverse of [`normalize_pair`] for a known divisor.
pub fn denormalize_pair(pair: &TrainingPair, scale: f64) -> Result<TrainingPair> {
    Ok(TrainingPair {
        noisy: pair.noisy.with_values(pair.noisy.values() * scale)?,
        clean: pair.clean.with_values(pair.clean.values() * scale)?,
        total_count: pair.total_count,
        scale: pair.scale / scale,
    })
}

/// Normalize, run the network, and map the output back to count units.
/// Negative outputs are clipped to zero.
pub fn denoise_spectrum<T: Real>(net: &Network<T>, s: &Spectrum) -> Result<Spectrum> {
    let scale = normalization_scale(s.values())?;
    let x = Tensor::<T>::from_array(&(s.values() / scale));
    let y = net.forward(&x)?.to_array() * scale;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData("network produced non-finite output".into()));
    }
    Ok(SignedMap::new(y, s.energy_axis().clone(), s.momentum_axis().clone())?.into_spectrum())
}

/// Network output on the noisy member of a normalized pair.
pub fn predict<T: Real>(net: &Network<T>, pair: &TrainingPair) -> Result<Array2<f64>> {
    Ok(net.forward(&Tensor::from_array(pair.noisy.values()))?.to_array())
}

/// Mean combined loss of the network over normalized pairs.
pub fn evaluate<T: Real>(net: &Network<T>, pairs: &[TrainingPair], spec: &LossSpec) -> Result<f64> {
    Ok(evaluate_detailed(net, pairs, spec)?.combined)
}

/// Validation metrics, overall and per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub combined: f64,
    pub ms_ssim: f64,
    pub mse: f64,
    pub per_pair_combined: Vec<f64>,
    pub per_pair_ms_ssim: Vec<f64>,
}

fn summarize<I: Iterator<Item = Result<(f64, f64, f64)>>>(rows: I) -> Result<Evaluation> {
    let mut e = Evaluation {
        combined: 0.0,
        ms_ssim: 0.0,
        mse: 0.0,
        per_pair_combined: Vec::new(),
        per_pair_ms_ssim: Vec::new(),
    };
    for r in rows {
        let (c, m, q) = r?;
        e.per_pair_combined.push(c);
        e.per_pair_ms_ssim.push(m);
        e.mse += q;
    }
    let n = e.per_pair_combined.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no validation pairs".into()));
    }
    let nf = n as f64;
    e.combined = e.per_pair_combined.iter().sum::<f64>() / nf;
    e.ms_ssim = e.per_pair_ms_ssim.iter().sum::<f64>() / nf;
    e.mse /= nf;
    Ok(e)
}

fn metrics(pred: &Array2<f64>, clean: &Array2<f64>, spec: &LossSpec) -> Result<(f64, f64, f64)> {
    let c = combined_loss(pred.view(), clean.view(), spec)?.0;
    let m = ms_ssim(pred.view(), clean.view(), spec)?.0;
    let q = mse_loss(pred.view(), clean.view())?.0;
    Ok((c, m, q))
}

pub fn evaluate_detailed<T: Real>(net: &Network<T>, pairs: &[TrainingPair], spec: &LossSpec) -> Result<Evaluation> {
    summarize(pairs.iter().map(|p| metrics(&predict(net, p)?, p.clean.values(), spec)))
}

/// The same metrics for the identity mapping (noisy input taken as output).
pub fn identity_baseline(pairs: &[TrainingPair], spec: &LossSpec) -> Result<Evaluation> {
    summarize(pairs.iter().map(|p| metrics(p.noisy.values(), p.clean.values(), spec)))
}

/// Normalized pairs, `per_map` for every map, each from its own seeded stream.
pub fn generate_pairs(
    maps: &[ProbabilityMap],
    noise: &NoiseConfig,
    per_map: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::with_capacity(maps.len() * per_map);
    for (m, p) in maps.iter().enumerate() {
        for f in 0..per_map {
            let mut r = rng::stream(seed, &[STREAM_PAIRS, m as u64, f as u64]);
            out.push(make_training_pair(p, noise, &mut r)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub wall_time: Duration,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss` rows, epochs counted from 1.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            s.push_str(&format!("{},{t},{v}\n", i + 1));
        }
        s
    }
}

/// Progress passed to the per-epoch callback.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

/// Effective gradient worker count: the request, capped by `SPECDN_THREADS`.
pub fn worker_count(requested: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    let n = requested.max(1);
    cap.map_or(n, |c| n.min(c))
}

fn sample_gradient(
    net: &Network<f32>,
    pair: &TrainingPair,
    kind: LossKind,
    spec: &LossSpec,
) -> Result<(f64, Vec<f32>)> {
    let x = Tensor::<f32>::from_array(pair.noisy.values());
    let (y, cache) = net.forward_cached(&x)?;
    let y = y.to_array();
    if y.iter().any(|v| !v.is_finite()) {
        return Ok((f64::NAN, Vec::new()));
    }
    let (loss, g) = kind.evaluate(y.view(), pair.clean.values().view(), spec)?;
    if !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }
    let mut grads = vec![0.0f32; net.parameter_count()];
    net.backward_into(&cache, &Tensor::from_array(&g), &mut grads)?;
    Ok((loss, grads))
}

/// Build the epoch's pair list. Each (map, slot) keeps one total count for
/// the whole run; in regenerate mode the counting noise is redrawn per epoch.
fn epoch_pairs(
    maps: &[ProbabilityMap],
    noise: &NoiseConfig,
    cfg: &TrainConfig,
    epoch: usize,
    cache: &mut Option<Vec<TrainingPair>>,
) -> Result<Vec<TrainingPair>> {
    if let Some(fixed) = cache {
        return Ok(fixed.clone());
    }
    let noise_epoch = if cfg.regenerate_pairs { epoch as u64 } else { 0 };
    let mut raw = Vec::with_capacity(maps.len() * cfg.pairs_per_map);
    for (m, p) in maps.iter().enumerate() {
        for f in 0..cfg.pairs_per_map {
            let n = sample_log_weighted_count(noise, &mut rng::stream(cfg.seed, &[STREAM_COUNT, m as u64, f as u64]));
            let mut r = rng::stream(cfg.seed, &[STREAM_NOISE, noise_epoch, m as u64, f as u64]);
            raw.push(make_raw_pair(p, n, noise, &mut r)?);
        }
    }
    if !cfg.regenerate_pairs {
        *cache = Some(raw.clone());
    }
    Ok(raw)
}

/// Train a freshly initialized network.
pub fn train_model(
    maps: &[ProbabilityMap],
    validation: &[TrainingPair],
    noise: &NoiseConfig,
    net: &NetConfig,
    cfg: &TrainConfig,
) -> Result<(TrainReport, Network<f32>)> {
    let init = Network::<f32>::init(net.depth, net.width, cfg.seed)?;
    train_network(init, maps, validation, noise, cfg, |_| {})
}

/// Train `net` in place of a fresh one, reporting progress after each epoch.
pub fn train_network<F: FnMut(&EpochStats)>(
    mut net: Network<f32>,
    maps: &[ProbabilityMap],
    validation: &[TrainingPair],
    noise: &NoiseConfig,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(TrainReport, Network<f32>)> {
    cfg.validate()?;
    noise.validate()?;
    if maps.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if validation.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let started = Instant::now();
    let workers = worker_count(cfg.workers);
    let pool = if workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut adam = AdamState::new(net.parameter_count());
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::with_capacity(cfg.epochs),
        learning_rate: Vec::with_capacity(cfg.epochs),
        wall_time: Duration::ZERO,
        checkpoint: None,
    };
    let mut fixed = None;
    let mut batch_grad = vec![0.0f32; net.parameter_count()];

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(epoch, cfg);
        let raw = epoch_pairs(maps, noise, cfg, epoch, &mut fixed)?;
        let mut aug_rng = rng::stream(cfg.seed, &[STREAM_AUGMENT, epoch as u64]);
        let mut pairs = Vec::with_capacity(raw.len());
        for p in &raw {
            let (a, _) = augment_pair(p, cfg, &mut aug_rng)?;
            pairs.push(normalize_pair(&a)?.0);
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let run = |&i: &usize| sample_gradient(&net, &pairs[i], cfg.loss, &cfg.loss_spec);
            let results: Vec<Result<(f64, Vec<f32>)>> = match &pool {
                Some(p) => p.install(|| batch.par_iter().map(run).collect()),
                None => batch.iter().map(run).collect(),
            };
            // Reduction in batch order keeps the sum independent of scheduling.
            batch_grad.fill(0.0);
            for r in results {
                let (loss, g) = r?;
                if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    report.wall_time = started.elapsed();
                    return Err(Error::DivergenceDetected { epoch, loss });
                }
                loss_sum += loss;
                for (b, v) in batch_grad.iter_mut().zip(&g) {
                    *b += v;
                }
            }
            let inv = 1.0 / batch.len() as f32;
            batch_grad.iter_mut().for_each(|v| *v *= inv);
            adam_step(net.params_mut(), &batch_grad, &mut adam, lr, cfg)?;
            net.set_steps(net.steps() + 1);
        }
        let train_loss = loss_sum / pairs.len() as f64;
        let val_loss = evaluate(&net, validation, &cfg.loss_spec)?;
        if !val_loss.is_finite() {
            return Err(Error::DivergenceDetected { epoch, loss: val_loss });
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.learning_rate.push(lr);
        on_epoch(&EpochStats {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
        });
    }
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(&net, path)?;
        report.checkpoint = Some(path.clone());
    }
    report.wall_time = started.elapsed();
    Ok((report, net))
}

/// One row of a depth ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub depth: usize,
    /// Final validation loss for each seed, in seed order.
    pub losses: Vec<f64>,
    pub mean: f64,
}

/// Train one model per (depth, seed) on identical data and budgets and
/// report the final validation losses, sorted by depth.
pub fn depth_ablation(
    depths: &[usize],
    seeds: &[u64],
    maps: &[ProbabilityMap],
    validation: &[TrainingPair],
    noise: &NoiseConfig,
    width: usize,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if depths.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one depth and one seed".into()));
    }
    let mut ds = depths.to_vec();
    ds.sort_unstable();
    ds.dedup();
    let mut rows = Vec::with_capacity(ds.len());
    for depth in ds {
        let mut losses = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let c = TrainConfig {
                seed,
                checkpoint: None,
                ..cfg.clone()
            };
            let (report, _) = train_model(maps, validation, noise, &NetConfig { depth, width }, &c)?;
            losses.push(*report.val_loss.last().unwrap_or(&f64::NAN));
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        rows.push(AblationRow { depth, losses, mean });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::normalize_to_probability;
    use crate::synth::{random_config, synth_spectrum};

    fn ramp(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(i, j)| (i * w + j) as f64)
    }

    fn pair(h: usize, w: usize) -> TrainingPair {
        let noisy = Spectrum::from_pixels(ramp(h, w)).unwrap();
        let clean = Spectrum::from_pixels(ramp(h, w) * 0.5 + 1.0).unwrap();
        TrainingPair::new(noisy, clean, 100.0).unwrap()
    }

    #[test]
    fn step_schedule_plateaus() {
        let c = TrainConfig::default();
        assert_eq!(learning_rate(0, &c), 5e-4);
        assert!((learning_rate(49, &c) - 5e-4).abs() < 1e-18);
        assert!((learning_rate(50, &c) - 5e-5).abs() < 1e-18);
        assert!((learning_rate(149, &c) - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0f64, -2.0, 0.5];
        let g = vec![0.3, -4.0, 0.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, 1e-3, &cfg).unwrap();
        assert!(((1.0 - p[0]) - 1e-3).abs() < 1e-9);
        assert!(((p[1] + 2.0) - 1e-3).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
        assert!(adam_step(&mut p, &g[..2], &mut st, 1e-3, &cfg).is_err());
    }

    #[test]
    fn dihedral_inverse_and_mass() {
        let a = ramp(5, 5);
        for d in Dihedral::all() {
            let b = d.apply(&a);
            assert_eq!(b.sum(), a.sum());
            assert_eq!(d.invert(&b), a);
        }
        let distinct: std::collections::HashSet<Vec<i64>> = Dihedral::all()
            .map(|d| d.apply(&a).iter().map(|&v| v as i64).collect())
            .collect();
        assert_eq!(distinct.len(), 8);
    }

    #[test]
    fn augmentation_is_shared_and_undoable() {
        let p = pair(6, 6);
        let cfg = TrainConfig::default();
        let mut r = rng::seeded(3);
        for _ in 0..10 {
            let (a, rec) = augment_pair(&p, &cfg, &mut r).unwrap();
            let back = rec.element.invert(a.clean.values()) / rec.brightness;
            assert!((back - p.clean.values()).iter().all(|v| v.abs() < 1e-12));
            assert!((a.noisy.total_count() - rec.brightness * p.noisy.total_count()).abs() < 1e-9);
        }
    }

    #[test]
    fn non_square_uses_flips_only() {
        let p = pair(4, 7);
        let cfg = TrainConfig::default();
        let mut r = rng::seeded(4);
        for _ in 0..20 {
            let (a, rec) = augment_pair(&p, &cfg, &mut r).unwrap();
            assert_eq!(rec.element.rotation % 2, 0);
            assert_eq!(a.dim(), (4, 7));
        }
        let rot = AugmentRecord {
            element: Dihedral {
                rotation: 1,
                flip: false,
            },
            brightness: 1.0,
        };
        assert!(matches!(
            apply_augmentation(&p, &rot),
            Err(Error::NonSquareInput { .. })
        ));
    }

    #[test]
    fn percentile_interpolates() {
        let a = Array2::from_shape_fn((1, 101), |(_, j)| j as f64);
        assert_eq!(percentile(&a, 99.0), 99.0);
        let b = Array2::from_shape_vec((1, 3), vec![0.0, 10.0, 20.0]).unwrap();
        assert!((percentile(&b, 99.0) - 19.8).abs() < 1e-12);
    }

    #[test]
    fn normalization_roundtrip_and_scale_invariance() {
        let p = pair(10, 10);
        let (n, s) = normalize_pair(&p).unwrap();
        assert_eq!(s, percentile(p.noisy.values(), 99.0));
        let back = denormalize_pair(&n, s).unwrap();
        for (x, y) in back.clean.values().iter().zip(p.clean.values()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        let scaled = TrainingPair::new(p.noisy.scaled(3.0).unwrap(), p.clean.scaled(3.0).unwrap(), 100.0).unwrap();
        let (m, _) = normalize_pair(&scaled).unwrap();
        for (x, y) in m.noisy.values().iter().zip(n.noisy.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        let zero = TrainingPair::new(
            Spectrum::from_pixels(Array2::zeros((3, 3))).unwrap(),
            Spectrum::from_pixels(Array2::ones((3, 3))).unwrap(),
            1.0,
        )
        .unwrap();
        assert!(matches!(normalize_pair(&zero), Err(Error::ZeroSpectrum)));
    }

    #[test]
    fn sparse_map_falls_back_to_max() {
        let mut a = Array2::zeros((20, 20));
        a[[3, 3]] = 2.0;
        assert_eq!(normalization_scale(&a).unwrap(), 2.0);
    }

    #[test]
    fn identity_network_matches_baseline() {
        let maps = [normalize_to_probability(&Spectrum::from_pixels(ramp(16, 16) + 1.0).unwrap()).unwrap()];
        let pairs = generate_pairs(&maps, &NoiseConfig::for_grid(16, 16), 3, 1).unwrap();
        let spec = LossSpec::default();
        let id = Network::<f64>::zeros(3, 4).unwrap();
        let a = evaluate(&id, &pairs, &spec).unwrap();
        let b = identity_baseline(&pairs, &spec).unwrap().combined;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn small_run_is_deterministic() {
        let maps: Vec<_> = (0..2)
            .map(|i| synth_spectrum(&random_config(i, 16, 16)).unwrap())
            .collect();
        let noise = NoiseConfig::for_grid(16, 16);
        let val = generate_pairs(&maps, &noise, 1, 77).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            pairs_per_map: 2,
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let net = NetConfig { depth: 2, width: 4 };
        let (a, na) = train_model(&maps, &val, &noise, &net, &cfg).unwrap();
        let (b, nb) = train_model(&maps, &val, &noise, &net, &cfg).unwrap();
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(a.val_loss, b.val_loss);
        assert_eq!(na.params(), nb.params());
        assert_eq!(na.steps(), 4);
        assert_eq!(a.history_csv().lines().count(), 3);
    }

    #[test]
    fn ablation_table_sorted() {
        let maps = vec![synth_spectrum(&random_config(9, 16, 16)).unwrap()];
        let noise = NoiseConfig::for_grid(16, 16);
        let val = generate_pairs(&maps, &noise, 1, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            pairs_per_map: 1,
            ..TrainConfig::default()
        };
        let rows = depth_ablation(&[3, 1], &[1], &maps, &val, &noise, 4, &cfg).unwrap();
        assert_eq!(rows.iter().map(|r| r.depth).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(
            depth_ablation(&[2], &[1], &maps, &val, &noise, 4, &cfg).unwrap().len(),
            1
        );
    }
}
