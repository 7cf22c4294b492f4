//! Training losses: dice on the foreground classes, multi-class
//! cross-entropy, and their hybrid average.
//!
//! Each loss exists twice: a plain-float form on [`ProbMap`]/[`LabelMask`]
//! for scoring, and a tensor form used inside the training graph. The two
//! are cross-checked in the tests.

use crate::metrics::{LabelMask, MetricError, NUM_CLASSES};
use crate::tensor::{one_hot, IndexTensor, Scalar, Tensor, TensorError};

pub const DICE_EPS: f64 = 1e-6;
pub const PROB_CLIP: f64 = 1e-7;

// ── ProbMap ────────────────────────────────────────────────────────────────

/// Per-pixel class probabilities, row-major with a trailing class axis.
#[derive(Debug, Clone)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    /// Probabilities must sum to 1 per pixel (±1e-6).
    pub fn new(
        width: usize,
        height: usize,
        classes: usize,
        probs: Vec<f64>,
    ) -> Result<Self, MetricError> {
        if probs.len() != width * height * classes {
            return Err(MetricError::InvalidMask(format!(
                "probability buffer length {} != {width}x{height}x{classes}",
                probs.len()
            )));
        }
        for (i, px) in probs.chunks(classes).enumerate() {
            let s: f64 = px.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(MetricError::InvalidMask(format!(
                    "pixel {i} probabilities sum to {s}"
                )));
            }
        }
        Ok(ProbMap {
            width,
            height,
            classes,
            probs,
        })
    }

    /// Hard one-hot probabilities from a label mask.
    pub fn one_hot(mask: &LabelMask) -> Self {
        let mut probs = vec![0.0; mask.width * mask.height * NUM_CLASSES];
        for (i, &l) in mask.labels().iter().enumerate() {
            probs[i * NUM_CLASSES + l as usize] = 1.0;
        }
        ProbMap {
            width: mask.width,
            height: mask.height,
            classes: NUM_CLASSES,
            probs,
        }
    }

    pub fn at(&self, x: usize, y: usize, class: usize) -> f64 {
        self.probs[(y * self.width + x) * self.classes + class]
    }

    pub fn values(&self) -> &[f64] {
        &self.probs
    }
}

fn check_extents(p: &ProbMap, g: &LabelMask) -> Result<(), MetricError> {
    if (p.width, p.height) != (g.width, g.height) {
        return Err(MetricError::ExtentMismatch {
            a: (p.width, p.height),
            b: (g.width, g.height),
        });
    }
    Ok(())
}

// ── Scalar losses ──────────────────────────────────────────────────────────

/// Soft dice loss averaged over the foreground classes (background is not
/// scored): 1 − (2 Σ p·g + ε) / (Σ p + Σ g + ε) per class, ε = 1e-6.
/// A class absent from both prediction and truth contributes 0.
pub fn dice_loss(p: &ProbMap, g: &LabelMask) -> Result<f64, MetricError> {
    check_extents(p, g)?;
    let mut total = 0.0;
    let foreground = p.classes - 1;
    for class in 1..p.classes {
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for y in 0..p.height {
            for x in 0..p.width {
                let pv = p.at(x, y, class);
                let gv = (g.get(x, y) as usize == class) as u8 as f64;
                inter += pv * gv;
                psum += pv;
                gsum += gv;
            }
        }
        total += 1.0 - (2.0 * inter + DICE_EPS) / (psum + gsum + DICE_EPS);
    }
    Ok(total / foreground as f64)
}

/// Multi-class cross-entropy −(1/N) Σ log p[gᵢ], probabilities clipped to
/// [1e-7, 1−1e-7].
pub fn ce_loss(p: &ProbMap, g: &LabelMask) -> Result<f64, MetricError> {
    check_extents(p, g)?;
    let n = (p.width * p.height) as f64;
    let mut total = 0.0;
    for y in 0..p.height {
        for x in 0..p.width {
            let pv = p
                .at(x, y, g.get(x, y) as usize)
                .clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            total -= pv.ln();
        }
    }
    Ok(total / n)
}

/// The training objective: the exact average of dice and cross-entropy.
pub fn hybrid_loss(p: &ProbMap, g: &LabelMask) -> Result<f64, MetricError> {
    Ok(0.5 * (dice_loss(p, g)? + ce_loss(p, g)?))
}

// ── Tensor losses (training graph) ─────────────────────────────────────────

/// One-hot targets (B, H, W, classes) for a batch of masks.
pub fn batch_one_hot<T: Scalar>(
    masks: &[&LabelMask],
    classes: usize,
) -> Result<Tensor<T>, TensorError> {
    assert!(!masks.is_empty());
    let (w, h) = (masks[0].width, masks[0].height);
    let mut labels = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        labels.extend(m.labels().iter().map(|&l| l as usize));
    }
    one_hot(&labels, classes, &[masks.len(), h, w])
}

/// Dice loss over softmax probabilities and one-hot targets, both
/// (B, H, W, classes); per-class sums pool the whole batch, background is
/// excluded from the average.
pub fn dice_loss_t<T: Scalar>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let classes = *probs.shape().last().unwrap();
    let n: usize = probs.numel() / classes;
    let flat_p = probs.reshape(&[n, classes])?;
    let flat_g = targets.reshape(&[n, classes])?;
    let inter = flat_p.mul_t(&flat_g)?.sum_axis(0); // (classes,)
    let psum = flat_p.sum_axis(0);
    let gsum = flat_g.sum_axis(0);
    let eps = T::from_f64(DICE_EPS);
    let num = inter.mul_scalar(T::from_f64(2.0)).add_scalar(eps);
    let den = psum.add_t(&gsum)?.add_scalar(eps);
    let per_class = num.div_t(&den)?.neg_t().add_scalar(T::one()); // 1 - dice
    let fg = IndexTensor::from_vec((1..classes).collect(), &[classes - 1])?;
    let fg_terms = per_class.gather(&fg, 0)?;
    Ok(fg_terms
        .sum_all()
        .mul_scalar(T::from_f64(1.0 / (classes - 1) as f64)))
}

/// Cross-entropy over softmax probabilities and one-hot targets.
pub fn ce_loss_t<T: Scalar>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let classes = *probs.shape().last().unwrap();
    let n = probs.numel() / classes;
    let clipped = probs.clamp_t(T::from_f64(PROB_CLIP), T::from_f64(1.0 - PROB_CLIP));
    let ll = clipped.ln_t().mul_t(targets)?.sum_all();
    Ok(ll.mul_scalar(T::from_f64(-1.0 / n as f64)))
}

/// Hybrid objective on raw logits (B, H, W, classes): softmax over the class
/// axis, then the average of dice and cross-entropy.
pub fn hybrid_loss_t<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let probs = logits.softmax(logits.rank() - 1);
    let dice = dice_loss_t(&probs, targets)?;
    let ce = ce_loss_t(&probs, targets)?;
    Ok(dice.add_t(&ce)?.mul_scalar(T::from_f64(0.5)))
}
