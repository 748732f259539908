//! A small fixed 3D segmentation network with hand-written gradients.
//!
//! Architecture, per voxel:
//!
//! ```text
//! x (HU) -> window/normalise -> conv3x3x3 1->8 -> ReLU -> conv3x3x3 8->8 -> ReLU
//!        -> linear 8->C -> softmax
//! ```
//!
//! Convolutions use zero padding and stride 1, so spatial shape is preserved.
//! Parameters live in one flat vector, which is what FedAvg averages and what
//! checkpoints store. The loss is soft Dice over foreground classes plus mean
//! voxel cross-entropy.
//!
//! All math is generic over [`Real`] so the same code can be run in f64 for
//! gradient checks; training uses f32.

mod checkpoint;
mod kernels;

pub use checkpoint::{checkpoint_size_bytes, read_checkpoint, write_checkpoint, CHECKPOINT_HEADER_LEN, CHECKPOINT_MAGIC};

use std::fmt::Debug;
use std::ops::{AddAssign, Range};

use ndarray::{Array3, Array5, ArrayView3, ArrayView4, Axis};
use num_traits::Float;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::rng::{self, purpose};
use kernels::{conv1_backward, conv1_forward, conv2_backward, conv2_forward, TAPS};

/// Hidden channel width of both convolutions.
pub const HIDDEN: usize = 8;
/// Dice smoothing term.
pub const DICE_EPS: f64 = 1e-5;
/// Intensities are clipped to this HU window, centred and divided by [`INPUT_SCALE`].
pub const INPUT_WINDOW: (f32, f32) = (-300.0, 600.0);
/// HU per unit of network input.
pub const INPUT_SCALE: f32 = 100.0;

/// Float type the network can be evaluated in.
pub trait Real: Float + AddAssign + Send + Sync + Debug + Default + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Offsets of each parameter group in the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub w3: Range<usize>,
    pub b3: Range<usize>,
}

impl ParamLayout {
    pub fn new(num_classes: usize) -> Self {
        let mut at = 0;
        let mut next = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        ParamLayout {
            w1: next(TAPS * HIDDEN),
            b1: next(HIDDEN),
            w2: next(TAPS * HIDDEN * HIDDEN),
            b2: next(HIDDEN),
            w3: next(HIDDEN * num_classes),
            b3: next(num_classes),
        }
    }

    pub fn len(&self) -> usize {
        self.b3.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of parameters for `num_classes` output classes.
pub fn param_count(num_classes: usize) -> usize {
    ParamLayout::new(num_classes).len()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub dice_term: f64,
    pub ce_term: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    num_classes: usize,
    params: Vec<f32>,
}

impl SegModel {
    /// All-zero parameters: every voxel gets the uniform distribution.
    pub fn zeros(num_classes: usize) -> Self {
        assert!(num_classes >= 1, "need at least one class");
        SegModel { num_classes, params: vec![0.0; param_count(num_classes)] }
    }

    /// He initialisation, `N(0, 2 / fan_in)` weights and zero biases.
    pub fn init(num_classes: usize, seed: u64) -> Self {
        let mut m = Self::zeros(num_classes);
        let layout = ParamLayout::new(num_classes);
        let mut rng = rng::stream(seed, &[purpose::INIT]);
        for (range, fan_in) in [(layout.w1, TAPS), (layout.w2, TAPS * HIDDEN), (layout.w3, HIDDEN)] {
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).unwrap();
            for p in &mut m.params[range] {
                *p = normal.sample(&mut rng) as f32;
            }
        }
        m
    }

    pub fn from_params(num_classes: usize, params: Vec<f32>) -> Result<Self> {
        let want = param_count(num_classes);
        if num_classes == 0 || params.len() != want {
            return Err(invalid(format!(
                "{} parameters given, {num_classes} classes need {want}",
                params.len()
            )));
        }
        Ok(SegModel { num_classes, params })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.num_classes)
    }

    /// Per-voxel class probabilities, `(B, C, H, W, D)`.
    pub fn forward(&self, batch: ArrayView4<'_, f32>) -> Result<Array5<f32>> {
        let sh = batch.shape();
        if sh.contains(&0) {
            return Err(invalid(format!("batch shape {sh:?} has an empty axis")));
        }
        let c = self.num_classes;
        let (b, h, w, d) = (sh[0], sh[1], sh[2], sh[3]);
        let mut out = Array5::zeros((b, c, h, w, d));
        for (s, x) in batch.axis_iter(Axis(0)).enumerate() {
            let acts = forward_sample(&self.params, c, x);
            for ((i, j, k), _) in x.indexed_iter() {
                let v = (i * w + j) * d + k;
                for cls in 0..c {
                    out[[s, cls, i, j, k]] = acts.probs[v * c + cls];
                }
            }
        }
        Ok(out)
    }

    /// Arg-max label per voxel; ties resolve to the lowest class id.
    pub fn predict_labels(&self, x: ArrayView3<'_, f32>) -> Array3<u8> {
        let c = self.num_classes;
        let acts = forward_sample(&self.params, c, x);
        let sh = x.shape();
        let labels: Vec<u8> = acts
            .logits
            .chunks_exact(c)
            .map(|z| {
                let mut best = 0;
                for k in 1..c {
                    if z[k] > z[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Array3::from_shape_vec((sh[0], sh[1], sh[2]), labels).expect("shape")
    }

    /// Loss over the whole batch and its gradient with respect to the parameters.
    pub fn loss_and_grad(&self, batch: ArrayView4<'_, f32>, labels: ArrayView4<'_, u8>) -> Result<(LossValue, Vec<f32>)> {
        loss_and_grad_with(&self.params, self.num_classes, batch, labels)
    }

    pub fn loss(&self, batch: ArrayView4<'_, f32>, labels: ArrayView4<'_, u8>) -> Result<LossValue> {
        loss_with(&self.params, self.num_classes, batch, labels)
    }

    /// `params <- params - lr * grad`.
    pub fn sgd_step(&self, grad: &[f32], lr: f32) -> Result<SegModel> {
        let mut next = self.clone();
        next.sgd_step_in_place(grad, lr)?;
        Ok(next)
    }

    pub fn sgd_step_in_place(&mut self, grad: &[f32], lr: f32) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(invalid(format!("gradient has {} entries, model has {}", grad.len(), self.params.len())));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(invalid(format!("learning rate {lr} must be non-negative")));
        }
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        Ok(())
    }
}

fn normalise<T: Real>(x: f32) -> T {
    let (lo, hi) = INPUT_WINDOW;
    let mid = 0.5 * (lo + hi) as f64;
    T::of((x.clamp(lo, hi) as f64 - mid) / INPUT_SCALE as f64)
}

struct Activations<T> {
    shape: [usize; 3],
    input: Vec<T>,
    r1: Vec<T>,
    r2: Vec<T>,
    logits: Vec<T>,
    probs: Vec<T>,
}

fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn forward_sample<T: Real>(params: &[T], c: usize, x: ArrayView3<'_, f32>) -> Activations<T> {
    let layout = ParamLayout::new(c);
    let sh = x.shape();
    let shape = [sh[0], sh[1], sh[2]];
    let n = x.len();
    let input: Vec<T> = x.iter().map(|&v| normalise(v)).collect();

    let mut r1 = vec![T::zero(); n * HIDDEN];
    conv1_forward(&input, shape, &params[layout.w1.clone()], &params[layout.b1.clone()], &mut r1);
    relu_in_place(&mut r1);
    let mut r2 = vec![T::zero(); n * HIDDEN];
    conv2_forward(&r1, shape, &params[layout.w2.clone()], &params[layout.b2.clone()], &mut r2);
    relu_in_place(&mut r2);

    let w3 = &params[layout.w3.clone()];
    let b3 = &params[layout.b3.clone()];
    let mut logits = vec![T::zero(); n * c];
    let mut probs = vec![T::zero(); n * c];
    for v in 0..n {
        let h = &r2[v * HIDDEN..(v + 1) * HIDDEN];
        let z = &mut logits[v * c..(v + 1) * c];
        z.copy_from_slice(b3);
        for ci in 0..HIDDEN {
            if h[ci] != T::zero() {
                for k in 0..c {
                    z[k] += h[ci] * w3[ci * c + k];
                }
            }
        }
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let p = &mut probs[v * c..(v + 1) * c];
        let mut sum = T::zero();
        for k in 0..c {
            p[k] = (z[k] - m).exp();
            sum += p[k];
        }
        for pk in p.iter_mut() {
            *pk = *pk / sum;
        }
    }
    Activations { shape, input, r1, r2, logits, probs }
}

fn check_batch(c: usize, batch: &ArrayView4<'_, f32>, labels: &ArrayView4<'_, u8>) -> Result<()> {
    if batch.shape() != labels.shape() {
        return Err(invalid(format!("batch {:?} and labels {:?} differ in shape", batch.shape(), labels.shape())));
    }
    if batch.shape().contains(&0) {
        return Err(invalid("empty batch"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(invalid(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// Per-class sums over the batch: intersection, prediction mass, label count.
struct DiceSums {
    inter: Vec<f64>,
    pred: Vec<f64>,
    gt: Vec<f64>,
}

fn accumulate<T: Real>(acts: &Activations<T>, labels: ArrayView3<'_, u8>, c: usize, sums: &mut DiceSums, ce: &mut f64) {
    for (v, &y) in labels.iter().enumerate() {
        let y = y as usize;
        let p = &acts.probs[v * c..(v + 1) * c];
        let z = &acts.logits[v * c..(v + 1) * c];
        let m = z.iter().copied().fold(T::neg_infinity(), T::max).f64();
        let lse = m + z.iter().map(|&zk| (zk.f64() - m).exp()).sum::<f64>().ln();
        *ce += lse - z[y].f64();
        for k in 0..c {
            sums.pred[k] += p[k].f64();
        }
        sums.inter[y] += p[y].f64();
        sums.gt[y] += 1.0;
    }
}

fn loss_from_sums(sums: &DiceSums, ce_total: f64, n_vox: usize, c: usize) -> LossValue {
    let fg = c.saturating_sub(1);
    let dice_term = if fg == 0 {
        0.0
    } else {
        let mean: f64 = (1..c)
            .map(|k| (2.0 * sums.inter[k] + DICE_EPS) / (sums.pred[k] + sums.gt[k] + DICE_EPS))
            .sum::<f64>()
            / fg as f64;
        1.0 - mean
    };
    let ce_term = ce_total / n_vox as f64;
    LossValue { total: dice_term + ce_term, dice_term, ce_term }
}

fn forward_batch<T: Real>(
    params: &[T],
    c: usize,
    batch: &ArrayView4<'_, f32>,
    labels: &ArrayView4<'_, u8>,
) -> (Vec<Activations<T>>, DiceSums, LossValue) {
    let mut sums = DiceSums { inter: vec![0.0; c], pred: vec![0.0; c], gt: vec![0.0; c] };
    let mut ce = 0.0;
    let mut acts = Vec::with_capacity(batch.shape()[0]);
    for (x, y) in batch.axis_iter(Axis(0)).zip(labels.axis_iter(Axis(0))) {
        let a = forward_sample(params, c, x);
        accumulate(&a, y, c, &mut sums, &mut ce);
        acts.push(a);
    }
    let loss = loss_from_sums(&sums, ce, batch.len(), c);
    (acts, sums, loss)
}

/// Loss only, in any precision. Used by finite-difference checks.
pub fn loss_with<T: Real>(params: &[T], c: usize, batch: ArrayView4<'_, f32>, labels: ArrayView4<'_, u8>) -> Result<LossValue> {
    check_params(params.len(), c)?;
    check_batch(c, &batch, &labels)?;
    Ok(forward_batch(params, c, &batch, &labels).2)
}

/// Which hidden units are active, concatenated over the batch and both layers.
pub fn relu_pattern_with<T: Real>(params: &[T], c: usize, batch: ArrayView4<'_, f32>) -> Result<Vec<bool>> {
    check_params(params.len(), c)?;
    let mut out = Vec::new();
    for x in batch.axis_iter(Axis(0)) {
        let a = forward_sample(params, c, x);
        out.extend(a.r1.iter().chain(&a.r2).map(|&v| v > T::zero()));
    }
    Ok(out)
}

fn check_params(len: usize, c: usize) -> Result<()> {
    if c == 0 || len != param_count(c) {
        return Err(invalid(format!("{len} parameters do not match {c} classes")));
    }
    Ok(())
}

/// Loss and parameter gradient in any precision.
pub fn loss_and_grad_with<T: Real>(
    params: &[T],
    c: usize,
    batch: ArrayView4<'_, f32>,
    labels: ArrayView4<'_, u8>,
) -> Result<(LossValue, Vec<T>)> {
    check_params(params.len(), c)?;
    check_batch(c, &batch, &labels)?;
    let layout = ParamLayout::new(c);
    let (acts, sums, loss) = forward_batch(params, c, &batch, &labels);
    let n_total = batch.len() as f64;

    // dL_dice/dp_k(v) = coef_a[k] * [y(v) == k] + coef_b[k] for foreground k.
    let fg = c.saturating_sub(1).max(1) as f64;
    let mut coef_a = vec![0.0; c];
    let mut coef_b = vec![0.0; c];
    for k in 1..c {
        let s = sums.pred[k] + sums.gt[k] + DICE_EPS;
        coef_a[k] = -2.0 / (fg * s);
        coef_b[k] = (2.0 * sums.inter[k] + DICE_EPS) / (fg * s * s);
    }
    let coef_a: Vec<T> = coef_a.into_iter().map(T::of).collect();
    let coef_b: Vec<T> = coef_b.into_iter().map(T::of).collect();
    let inv_n = T::of(1.0 / n_total);

    let mut grad = vec![T::zero(); layout.len()];
    let w2 = &params[layout.w2.clone()];
    let w3 = &params[layout.w3.clone()];
    let mut dz = vec![T::zero(); c];
    let mut gp = vec![T::zero(); c];

    for (a, y) in acts.iter().zip(labels.axis_iter(Axis(0))) {
        let n = a.input.len();
        let mut d2 = vec![T::zero(); n * HIDDEN];
        {
            let (gw3, gb3) = {
                let (head, tail) = grad.split_at_mut(layout.b3.start);
                (&mut head[layout.w3.clone()], &mut tail[..c])
            };
            for (v, &lab) in y.iter().enumerate() {
                let lab = lab as usize;
                let p = &a.probs[v * c..(v + 1) * c];
                let mut dot = T::zero();
                for k in 0..c {
                    gp[k] = coef_b[k] + if k == lab { coef_a[k] } else { T::zero() };
                    dot += p[k] * gp[k];
                }
                for k in 0..c {
                    let ce = if k == lab { p[k] - T::one() } else { p[k] };
                    dz[k] = p[k] * (gp[k] - dot) + ce * inv_n;
                    gb3[k] += dz[k];
                }
                let h = &a.r2[v * HIDDEN..(v + 1) * HIDDEN];
                let g2 = &mut d2[v * HIDDEN..(v + 1) * HIDDEN];
                for ci in 0..HIDDEN {
                    if h[ci] > T::zero() {
                        let mut s = T::zero();
                        for k in 0..c {
                            gw3[ci * c + k] += h[ci] * dz[k];
                            s += w3[ci * c + k] * dz[k];
                        }
                        g2[ci] = s;
                    }
                }
            }
        }
        let mut d1 = vec![T::zero(); n * HIDDEN];
        {
            let (head, tail) = grad.split_at_mut(layout.b2.start);
            conv2_backward(&a.r1, &d2, a.shape, w2, &mut head[layout.w2.clone()], &mut tail[..HIDDEN], &mut d1);
        }
        for (g, &r) in d1.iter_mut().zip(&a.r1) {
            if r <= T::zero() {
                *g = T::zero();
            }
        }
        let (head, tail) = grad.split_at_mut(layout.b1.start);
        conv1_backward(&a.input, &d1, a.shape, &mut head[layout.w1.clone()], &mut tail[..HIDDEN]);
    }
    Ok((loss, grad))
}
