//! Training objectives, written as losses to minimize (negated
//! log-likelihoods).
//!
//! The weak loss scores the two image-level probabilities against the
//! image label. The fully supervised losses act on region-level
//! probabilities of annotated images: a classification term over labeled
//! regions (malignant vs. benign-or-normal, ignored regions excluded) and
//! a detection term that concentrates the unmasked malignant ranking
//! distribution on the labeled malignant regions. The multi-task total
//! combines them with the weights lambda1 = beta / m_f and lambda2.

use crate::domain::{RegionLabel, WeakLabel};
use crate::model::{Abnormality, ForwardTrace, CLS_B, CLS_M, CLS_N};
use crate::{Error, Result};

/// Probability floor applied before every logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Indices of weakly and fully labeled items within one batch, plus the
/// dataset-wide count of region-level labels that defines lambda1.
#[derive(Clone, Debug, Default)]
pub struct SupervisionSplit {
    pub weak_indices: Vec<usize>,
    pub full_indices: Vec<usize>,
    /// Total number of labeled (non-ignored) regions in the training data.
    pub m_f: usize,
    /// Number of images in the batch.
    pub n: usize,
}

impl SupervisionSplit {
    /// Splits batch indices by the `labels` field of each item.
    pub fn from_items(items: &[LossItem]) -> Self {
        let mut weak_indices = Vec::new();
        let mut full_indices = Vec::new();
        for (t, item) in items.iter().enumerate() {
            if item.labels.is_some() {
                full_indices.push(t);
            } else {
                weak_indices.push(t);
            }
        }
        let m_f = items
            .iter()
            .filter_map(|it| it.labels)
            .flatten()
            .filter(|l| **l != RegionLabel::Ignored)
            .count();
        Self {
            weak_indices,
            full_indices,
            m_f,
            n: items.len(),
        }
    }
}

/// Loss combination weights.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Weight of the region classification term, `beta / m_f`.
    pub lambda1: f64,
    /// Weight of the fully supervised part against the weak part.
    pub lambda2: f64,
    pub beta: f64,
    /// Whether the benign weak term averages over every image (including
    /// fully annotated ones) or over the weak subset only.
    pub weak_b_includes_full: bool,
}

impl LossWeights {
    pub fn new(beta: f64, lambda2: f64, m_f: usize) -> Self {
        Self {
            lambda1: beta / m_f.max(1) as f64,
            lambda2,
            beta,
            weak_b_includes_full: true,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            beta: 1.0,
            weak_b_includes_full: true,
        }
    }
}

#[inline]
pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
fn nll(p_positive: f64, label: bool) -> f64 {
    let p = clamp_prob(p_positive);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Negative log-likelihood of the image label, one term per abnormality
/// class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakLossTerms {
    pub malignant: f64,
    pub benign: f64,
}

impl WeakLossTerms {
    pub fn total(&self) -> f64 {
        self.malignant + self.benign
    }
}

/// Weak loss of one image: `-log p(y_c | x)` for both abnormality classes,
/// with probabilities clamped away from 0 and 1.
pub fn weak_image_loss(trace: &ForwardTrace, label: WeakLabel) -> WeakLossTerms {
    WeakLossTerms {
        malignant: nll(trace.p_malignant(), label.y_m),
        benign: nll(trace.p_benign(), label.y_b),
    }
}

/// Region classification loss of one annotated image: the summed negative
/// log-likelihood of the labeled regions, where the benign-or-normal
/// probability is the complement of the malignant one. Ignored regions
/// contribute nothing. Not normalized; the caller applies lambda1.
pub fn full_cls_loss(trace: &ForwardTrace, labels: &[RegionLabel]) -> f64 {
    assert_eq!(labels.len(), trace.m(), "one label per region");
    let mut loss = 0.0;
    for (i, label) in labels.iter().enumerate() {
        match label {
            RegionLabel::Malignant => {
                loss -= clamp_prob(trace.p_cls.get(i, CLS_M)).ln();
            }
            RegionLabel::BenignOrNormal => {
                let p = trace.p_cls.get(i, CLS_B) + trace.p_cls.get(i, CLS_N);
                loss -= clamp_prob(p).ln();
            }
            RegionLabel::Ignored => {}
        }
    }
    loss
}

/// Detection loss of one annotated image: the negative log of the total
/// unmasked malignant ranking mass on the regions labeled malignant.
/// Returns `None` when the image has no malignant-labeled region (the
/// image is then skipped and does not count toward the average) or when
/// the variant has no detection branch.
pub fn full_det_loss(trace: &ForwardTrace, labels: &[RegionLabel]) -> Option<f64> {
    assert_eq!(labels.len(), trace.m(), "one label per region");
    if !labels.contains(&RegionLabel::Malignant) {
        return None;
    }
    let q = unmasked_det_distribution(trace, Abnormality::Malignant)?;
    let mass: f64 = labels
        .iter()
        .zip(&q)
        .filter(|(l, _)| **l == RegionLabel::Malignant)
        .map(|(_, &p)| p)
        .sum();
    Some(-mass.clamp(PROB_EPS, 1.0).ln())
}

/// Softmax of the stored detection logits over all regions, ignoring the
/// selection mask. `None` when the variant has no detection branch.
pub(crate) fn unmasked_det_distribution(
    trace: &ForwardTrace,
    cls: Abnormality,
) -> Option<Vec<f64>> {
    if !trace.variant.has_detection_branch() {
        return None;
    }
    let dc = cls.det_col();
    let m = trace.m();
    let logits: Vec<f64> = (0..m).map(|i| trace.det_logits.get(i, dc)).collect();
    let mask = vec![true; m];
    crate::model::masked_softmax(&logits, &mask).ok()
}

/// One batch entry for [`total_loss`]: a completed forward trace, the image
/// label, and region labels when the image is fully annotated.
#[derive(Clone, Copy, Debug)]
pub struct LossItem<'a> {
    pub trace: &'a ForwardTrace,
    pub weak: WeakLabel,
    pub labels: Option<&'a [RegionLabel]>,
}

/// Multi-task loss over one batch:
///
/// ```text
/// L = L_weak + lambda2 * (lambda1 * L_cls_full + L_det_full)
/// ```
///
/// where the weak malignant term averages over the weakly labeled images,
/// the weak benign term averages over all images (configurable), the
/// region classification term is a raw sum (lambda1 carries its 1/m_f
/// normalization), and the detection term averages over the annotated
/// images that have at least one malignant-labeled region.
pub fn total_loss(
    items: &[LossItem],
    split: &SupervisionSplit,
    weights: &LossWeights,
) -> Result<f64> {
    let scales = term_scales(items, split, weights)?;
    let mut loss = 0.0;
    for (t, item) in items.iter().enumerate() {
        let weak = weak_image_loss(item.trace, item.weak);
        loss += scales.weak_m[t] * weak.malignant + scales.weak_b[t] * weak.benign;
        if let Some(labels) = item.labels {
            loss += scales.full_cls * full_cls_loss(item.trace, labels);
            if let Some(det) = full_det_loss(item.trace, labels) {
                loss += scales.full_det * det;
            }
        }
    }
    Ok(loss)
}

/// Per-item coefficients of each loss term. Shared between the loss value
/// and the gradient so both always agree.
pub(crate) struct TermScales {
    pub weak_m: Vec<f64>,
    pub weak_b: Vec<f64>,
    pub full_cls: f64,
    pub full_det: f64,
}

pub(crate) fn term_scales(
    items: &[LossItem],
    split: &SupervisionSplit,
    weights: &LossWeights,
) -> Result<TermScales> {
    let n = items.len();
    assert_eq!(split.n, n, "split does not describe this batch");
    if split.weak_indices.is_empty() {
        return Err(Error::DegenerateSplit);
    }
    let n_weak = split.weak_indices.len() as f64;
    let mut weak_m = vec![0.0; n];
    let mut weak_b = vec![0.0; n];
    for &t in &split.weak_indices {
        weak_m[t] = 1.0 / n_weak;
    }
    if weights.weak_b_includes_full {
        for s in &mut weak_b {
            *s = 1.0 / n as f64;
        }
    } else {
        for &t in &split.weak_indices {
            weak_b[t] = 1.0 / n_weak;
        }
    }
    // detection average counts only images contributing a detection term
    let n_det = split
        .full_indices
        .iter()
        .filter(|&&t| {
            items[t]
                .labels
                .map(|ls| ls.contains(&RegionLabel::Malignant))
                .unwrap_or(false)
        })
        .count();
    Ok(TermScales {
        weak_m,
        weak_b,
        full_cls: weights.lambda2 * weights.lambda1,
        full_det: if n_det > 0 {
            weights.lambda2 / n_det as f64
        } else {
            0.0
        },
    })
}
