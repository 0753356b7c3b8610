//! Cross-entropy, affinity regression, and their weighted sum, each with its
//! analytic gradient with respect to the input logits.
//!
//! The affinity regression (AR) forward pass is the literal composition of the
//! public operations: channel softmax, multi-scale sampling, element-wise
//! square root, and the dot-product affinity. Its loss is the mean squared
//! difference between that affinity and the label affinity, taken over the
//! valid (non-ignored) pairs, diagonal included.
//!
//! Backward pass, with `q` the square-rooted embedding and `G = dL/dÃ`:
//!
//! ```text
//! G_ij    = 2 (Ã_ij − M_ij) · valid_ij / n_valid
//! dL/dq   = q · (G + Gᵀ)
//! dL/dp   = dL/dq / (2 · max(q, ε))
//! dL/dz   = p ⊙ (dL/dp − ⟨p, dL/dp⟩)          per sampled column
//! ```
//!
//! Column gradients are scatter-added into the sampled source pixels; a pixel
//! sampled by several scales accumulates every contribution and unsampled
//! pixels receive zero. All reductions run serially in a fixed order, so
//! results are bit-reproducible.

use crate::affinity::{dot_affinity, label_affinity, sqrt_embedding, AffinityMatrix};
use crate::error::{Error, Result};
use crate::grid::{softmax_channels, LabelMap, ProbMap, ScoreMap};
use crate::pool::{pool_grid_with, pool_label_with, MultiScaleEmbedding, SamplingPlan, ScaleSet};
use crate::scalar::Scalar;

/// Floor applied to `√p` in the square-root derivative.
pub const SQRT_GRAD_FLOOR: f64 = 1e-12;

/// Default weight of the AR term in the total loss.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Scalar loss together with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad: ScoreMap<T>,
    /// Non-ignored pixels that entered the cross-entropy mean.
    pub valid_pixels: Option<usize>,
    /// Valid pairs that entered the affinity mean.
    pub valid_pairs: Option<usize>,
    /// Set when every pixel (or pair) was ignored; loss and gradient are zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    lambda: T,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        Self { lambda: T::c(DEFAULT_LAMBDA) }
    }
}

impl<T: Scalar> LossWeights<T> {
    pub fn new(lambda: T) -> Result<Self> {
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum<T> {
    sum: T,
    carry: T,
}

impl<T: Scalar> CompensatedSum<T> {
    fn add(&mut self, v: T) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> T {
        self.sum + self.carry
    }
}

fn check_shapes<T: Scalar>(logits: &ScoreMap<T>, labels: &LabelMap) -> Result<()> {
    if logits.height() != labels.height() || logits.width() != labels.width() {
        return Err(Error::ShapeMismatch(format!(
            "logits are {}x{}, labels are {}x{}",
            logits.height(),
            logits.width(),
            labels.height(),
            labels.width()
        )));
    }
    let channels = logits.channels();
    for (pixel, &id) in labels.data().iter().enumerate() {
        if !labels.is_ignored(id) && id as usize >= channels {
            return Err(Error::ClassOutOfRange { id, pixel, num_classes: channels });
        }
    }
    Ok(())
}

/// Mean cross-entropy over non-ignored pixels. Forward only.
pub fn ce_value<T: Scalar>(logits: &ScoreMap<T>, labels: &LabelMap) -> Result<(T, usize)> {
    check_shapes(logits, labels)?;
    let (channels, h, w) = logits.shape();
    let plane = h * w;
    let data = logits.data();
    let mut total = CompensatedSum::default();
    let mut valid = 0;
    for (p, &id) in labels.data().iter().enumerate() {
        if labels.is_ignored(id) {
            continue;
        }
        let max = (0..channels).map(|c| data[c * plane + p]).fold(T::neg_infinity(), T::max);
        let sum = (0..channels).fold(T::zero(), |acc, c| acc + (data[c * plane + p] - max).exp());
        // -log p_true = logsumexp(z) - z_true
        total.add(max + sum.ln() - data[id as usize * plane + p]);
        valid += 1;
    }
    if valid == 0 {
        return Ok((T::zero(), 0));
    }
    Ok((total.value() / T::from_count(valid), valid))
}

/// Mean cross-entropy over non-ignored pixels and its gradient
/// `(p − onehot) / n_valid` (zero at ignored pixels).
pub fn ce_loss<T: Scalar>(logits: &ScoreMap<T>, labels: &LabelMap) -> Result<LossGrad<T>> {
    let (loss, valid) = ce_value(logits, labels)?;
    let (channels, h, w) = logits.shape();
    let mut grad = ScoreMap::zeros(channels, h, w);
    if valid > 0 {
        let prob = softmax_channels(logits)?;
        let p = prob.data();
        let plane = h * w;
        let scale = T::one() / T::from_count(valid);
        let g = grad.data_mut();
        for (px, &id) in labels.data().iter().enumerate() {
            if labels.is_ignored(id) {
                continue;
            }
            for c in 0..channels {
                let i = c * plane + px;
                let target = if c == id as usize { T::one() } else { T::zero() };
                g[i] = (p[i] - target) * scale;
            }
        }
    }
    Ok(LossGrad { loss, grad, valid_pixels: Some(valid), valid_pairs: None, degenerate: valid == 0 })
}

/// Intermediate values of the AR forward pass.
#[derive(Debug, Clone)]
pub struct ArForward<T> {
    pub loss: T,
    pub valid_pairs: usize,
    pub plan: SamplingPlan,
    pub prob: ProbMap<T>,
    /// Sampled probabilities, C×L.
    pub embedding: MultiScaleEmbedding<T>,
    /// Square-rooted embedding.
    pub root: MultiScaleEmbedding<T>,
    /// Square-root affinity Ã (all entries valid).
    pub predicted: AffinityMatrix<T>,
    /// Label affinity M with the ignore mask.
    pub target: AffinityMatrix<T>,
}

/// AR forward pass.
pub fn ar_forward<T: Scalar>(logits: &ScoreMap<T>, labels: &LabelMap, scales: &ScaleSet) -> Result<ArForward<T>> {
    check_shapes(logits, labels)?;
    let plan = SamplingPlan::new(labels.height(), labels.width(), scales)?;
    let prob = softmax_channels(logits)?;
    let embedding = pool_grid_with(prob.grid(), &plan);
    let root = sqrt_embedding(&embedding)?;
    let predicted = dot_affinity(&root, &root)?;
    let target = label_affinity(&pool_label_with(labels, &plan), labels.ignore_id())?;

    let valid_pairs = target.valid_count();
    let mut sum = CompensatedSum::default();
    for ((&a, &m), &ok) in predicted.data().iter().zip(target.data()).zip(target.valid_mask()) {
        if ok {
            let d = a - m;
            sum.add(d * d);
        }
    }
    let loss = if valid_pairs == 0 { T::zero() } else { sum.value() / T::from_count(valid_pairs) };
    Ok(ArForward { loss, valid_pairs, plan, prob, embedding, root, predicted, target })
}

/// AR loss value only.
pub fn ar_value<T: Scalar>(logits: &ScoreMap<T>, labels: &LabelMap, scales: &ScaleSet) -> Result<T> {
    Ok(ar_forward(logits, labels, scales)?.loss)
}

/// AR loss and its analytic gradient.
pub fn ar_loss<T: Scalar>(logits: &ScoreMap<T>, labels: &LabelMap, scales: &ScaleSet) -> Result<LossGrad<T>> {
    let fwd = ar_forward(logits, labels, scales)?;
    let (channels, h, w) = logits.shape();
    let mut grad = ScoreMap::zeros(channels, h, w);
    if fwd.valid_pairs > 0 {
        ar_backward(&fwd, &mut grad);
    }
    Ok(LossGrad {
        loss: fwd.loss,
        grad,
        valid_pixels: None,
        valid_pairs: Some(fwd.valid_pairs),
        degenerate: fwd.valid_pairs == 0,
    })
}

fn ar_backward<T: Scalar>(fwd: &ArForward<T>, grad: &mut ScoreMap<T>) {
    let len = fwd.plan.len();
    let channels = fwd.embedding.channels();
    let two = T::c(2.0);
    let norm = two / T::from_count(fwd.valid_pairs);

    // dL/dÃ, zero on masked pairs.
    let mut g = vec![T::zero(); len * len];
    for (idx, slot) in g.iter_mut().enumerate() {
        if fwd.target.valid_mask()[idx] {
            *slot = (fwd.predicted.data()[idx] - fwd.target.data()[idx]) * norm;
        }
    }
    // G + Gᵀ
    let mut sym = vec![T::zero(); len * len];
    for i in 0..len {
        for j in 0..len {
            sym[i * len + j] = g[i * len + j] + g[j * len + i];
        }
    }

    let q = fwd.root.data();
    let p = fwd.embedding.data();
    let floor = T::c(SQRT_GRAD_FLOOR);

    // dL/dp, channel-major like the embedding.
    let mut dp = vec![T::zero(); channels * len];
    for k in 0..channels {
        let qk = &q[k * len..(k + 1) * len];
        let out = &mut dp[k * len..(k + 1) * len];
        for (i, &qki) in qk.iter().enumerate() {
            let row = &sym[i * len..(i + 1) * len];
            for (o, &s) in out.iter_mut().zip(row) {
                *o += qki * s;
            }
        }
        for (o, &qkj) in out.iter_mut().zip(qk) {
            *o /= two * qkj.max(floor);
        }
    }

    let (_, h, w) = grad.shape();
    let plane = h * w;
    let gdata = grad.data_mut();
    for (j, &(r, c)) in fwd.plan.coords().iter().enumerate() {
        let inner = (0..channels).fold(T::zero(), |acc, k| acc + p[k * len + j] * dp[k * len + j]);
        for k in 0..channels {
            let pk = p[k * len + j];
            gdata[k * plane + r * w + c] += pk * (dp[k * len + j] - inner);
        }
    }
}

/// `ce + λ·ar` and its gradient. With `λ = 0` the result carries the
/// cross-entropy loss and gradient unchanged.
pub fn total_loss<T: Scalar>(
    logits: &ScoreMap<T>,
    labels: &LabelMap,
    scales: &ScaleSet,
    weights: LossWeights<T>,
) -> Result<LossGrad<T>> {
    let ce = ce_loss(logits, labels)?;
    let ar = ar_loss(logits, labels, scales)?;
    Ok(combine(ce, &ar, weights.lambda()))
}

pub(crate) fn combine<T: Scalar>(ce: LossGrad<T>, ar: &LossGrad<T>, lambda: T) -> LossGrad<T> {
    let degenerate = ce.degenerate || ar.degenerate;
    if lambda == T::zero() {
        return LossGrad { valid_pairs: ar.valid_pairs, degenerate, ..ce };
    }
    let (channels, h, w) = ce.grad.shape();
    let data = ce.grad.data().iter().zip(ar.grad.data()).map(|(&a, &b)| a + lambda * b).collect();
    LossGrad {
        loss: ce.loss + lambda * ar.loss,
        grad: ScoreMap::new(channels, h, w, data).expect("sum of finite gradients"),
        valid_pixels: ce.valid_pixels,
        valid_pairs: ar.valid_pairs,
        degenerate,
    }
}
