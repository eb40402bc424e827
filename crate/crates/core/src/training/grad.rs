//! Exact reverse-mode gradients of the multi-task loss.
//!
//! Selection masks and dropout samples are drawn once per forward pass and
//! treated as constants during differentiation; the discrete top-k step
//! has zero derivative almost everywhere, so the piecewise gradient is the
//! exact gradient of the loss actually evaluated.

use crate::domain::{RegionBag, RegionLabel};
use crate::model::{
    forward, forward_frozen, variant_masks, Abnormality, ForwardMode, ForwardTrace, ModelParams,
    CLS_B, CLS_M, CLS_N,
};
use crate::objectives::{
    term_scales, total_loss, unmasked_det_distribution, LossItem, LossWeights, SupervisionSplit,
    PROB_EPS,
};
use crate::rng::Prng;
use crate::{Error, Mat, Result};

/// Parameter-shaped gradient accumulator.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    pub shared_w: Mat,
    pub shared_b: Vec<f64>,
    pub cls_w: Mat,
    pub cls_b: Vec<f64>,
    pub det_w: Option<Mat>,
    pub det_b: Option<Vec<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            shared_w: Mat::zeros(params.shared_w.rows(), params.shared_w.cols()),
            shared_b: vec![0.0; params.shared_b.len()],
            cls_w: Mat::zeros(params.cls_w.rows(), params.cls_w.cols()),
            cls_b: vec![0.0; params.cls_b.len()],
            det_w: params
                .det_w
                .as_ref()
                .map(|w| Mat::zeros(w.rows(), w.cols())),
            det_b: params.det_b.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }

    /// Tensors in the same fixed order as [`ModelParams::tensors`].
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut t: Vec<(&'static str, &[f64])> = vec![
            ("shared_w", self.shared_w.as_slice()),
            ("shared_b", &self.shared_b),
            ("cls_w", self.cls_w.as_slice()),
            ("cls_b", &self.cls_b),
        ];
        if let (Some(w), Some(b)) = (&self.det_w, &self.det_b) {
            t.push(("det_w", w.as_slice()));
            t.push(("det_b", b));
        }
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut t: Vec<(&'static str, &mut [f64])> = vec![
            ("shared_w", self.shared_w.as_mut_slice()),
            ("shared_b", &mut self.shared_b),
            ("cls_w", self.cls_w.as_mut_slice()),
            ("cls_b", &mut self.cls_b),
        ];
        if let (Some(w), Some(b)) = (&mut self.det_w, &mut self.det_b) {
            t.push(("det_w", w.as_mut_slice()));
            t.push(("det_b", b));
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if !t.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: name.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// One training example: a bag plus its region labels when annotated.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub bag: &'a RegionBag,
    pub labels: Option<&'a [RegionLabel]>,
}

/// Dropout sampling instructions for a training pass.
pub struct DropoutSample<'a> {
    pub rng: &'a mut Prng,
    pub keep: f64,
}

/// Recomputes the selection masks every pass (training) or replays the
/// masks of a reference pass (finite differences).
enum PassMode<'a> {
    Sample(Option<DropoutSample<'a>>),
    Frozen(&'a [[Vec<bool>; 2]]),
}

fn run_forward(
    items: &[TrainItem],
    params: &ModelParams,
    mode: PassMode,
) -> Result<Vec<ForwardTrace>> {
    match mode {
        PassMode::Sample(mut dropout) => items
            .iter()
            .map(|item| {
                let fmode = match &mut dropout {
                    Some(d) => ForwardMode::Train {
                        rng: d.rng,
                        dropout_keep: d.keep,
                    },
                    None => ForwardMode::Infer { dropout_keep: 1.0 },
                };
                forward(item.bag, params, fmode)
            })
            .collect(),
        PassMode::Frozen(masks) => items
            .iter()
            .zip(masks)
            .map(|(item, mask)| forward_frozen(&item.bag.features, params, mask))
            .collect(),
    }
}

fn loss_items<'a>(items: &'a [TrainItem], traces: &'a [ForwardTrace]) -> Vec<LossItem<'a>> {
    items
        .iter()
        .zip(traces)
        .map(|(item, trace)| LossItem {
            trace,
            weak: item.bag.weak_label,
            labels: item.labels,
        })
        .collect()
}

fn l2_penalty(params: &ModelParams, c: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let mut sq = 0.0;
    for (name, t) in params.tensors() {
        if !ModelParams::is_bias(name) {
            sq += t.iter().map(|v| v * v).sum::<f64>();
        }
    }
    0.5 * c * sq
}

/// Selection masks of one plain forward pass per item, for replay by the
/// finite difference oracle.
pub fn frozen_masks(items: &[TrainItem], params: &ModelParams) -> Result<Vec<[Vec<bool>; 2]>> {
    items
        .iter()
        .map(|item| {
            let trace = forward(item.bag, params, ForwardMode::Infer { dropout_keep: 1.0 })?;
            Ok(variant_masks(&trace.p_cls, params))
        })
        .collect()
}

/// Loss of a batch re-evaluated with externally fixed selection masks and
/// no dropout. This is what the finite difference oracle probes.
pub fn batch_loss_frozen(
    items: &[TrainItem],
    params: &ModelParams,
    split: &SupervisionSplit,
    weights: &LossWeights,
    l2_coefficient: f64,
    masks: &[[Vec<bool>; 2]],
) -> Result<f64> {
    let traces = run_forward(items, params, PassMode::Frozen(masks))?;
    let li = loss_items(items, &traces);
    Ok(total_loss(&li, split, weights)? + l2_penalty(params, l2_coefficient))
}

/// Loss and exact gradient of the multi-task objective over one batch,
/// including the L2 penalty on the weight matrices. Masks and dropout are
/// sampled by the internal forward pass and held fixed for the backward
/// pass.
pub fn backward(
    items: &[TrainItem],
    params: &ModelParams,
    split: &SupervisionSplit,
    weights: &LossWeights,
    l2_coefficient: f64,
    dropout: Option<DropoutSample>,
) -> Result<(f64, GradientBundle)> {
    assert!(!items.is_empty(), "empty batch");
    let traces = run_forward(items, params, PassMode::Sample(dropout))?;
    backward_on_traces(items, &traces, params, split, weights, l2_coefficient)
}

pub(crate) fn backward_on_traces(
    items: &[TrainItem],
    traces: &[ForwardTrace],
    params: &ModelParams,
    split: &SupervisionSplit,
    weights: &LossWeights,
    l2_coefficient: f64,
) -> Result<(f64, GradientBundle)> {
    let li = loss_items(items, traces);
    let loss = total_loss(&li, split, weights)? + l2_penalty(params, l2_coefficient);
    let scales = term_scales(&li, split, weights)?;

    let mut grads = GradientBundle::zeros_like(params);
    for (t, (item, trace)) in items.iter().zip(traces).enumerate() {
        accumulate_image(
            item,
            trace,
            params,
            scales.weak_m[t],
            scales.weak_b[t],
            scales.full_cls,
            scales.full_det,
            &mut grads,
        );
    }
    if l2_coefficient != 0.0 {
        for ((name, g), (_, p)) in grads.tensors_mut().into_iter().zip(params.tensors()) {
            if !ModelParams::is_bias(name) {
                for (gv, pv) in g.iter_mut().zip(p) {
                    *gv += l2_coefficient * pv;
                }
            }
        }
    }
    grads.check_finite()?;
    Ok((loss, grads))
}

/// d(-ln clamp(p)) / dp for label 1, d(-ln clamp(1-p)) / dp for label 0.
/// Zero inside the clamped flats.
fn d_nll(p: f64, label: bool) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    if label {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_image(
    item: &TrainItem,
    trace: &ForwardTrace,
    params: &ModelParams,
    scale_weak_m: f64,
    scale_weak_b: f64,
    scale_full_cls: f64,
    scale_full_det: f64,
    grads: &mut GradientBundle,
) {
    let m = trace.m();
    let cols = params.variant.cls_columns();
    let n_cls = cols.len();
    let weak = item.bag.weak_label;

    // upstream gradient on the two image-level probabilities
    let mut g_img = [0.0; 2];
    if scale_weak_b != 0.0 {
        g_img[Abnormality::Benign.det_col()] = scale_weak_b * d_nll(trace.p_benign(), weak.y_b);
    }
    if scale_weak_m != 0.0 {
        g_img[Abnormality::Malignant.det_col()] =
            scale_weak_m * d_nll(trace.p_malignant(), weak.y_m);
    }

    // gradients on region class probabilities (compact layout) and on the
    // masked detection distribution
    let mut g_p_cls = Mat::zeros(m, n_cls);
    let mut g_p_det = Mat::zeros(m, 2);
    for cls in Abnormality::ALL {
        let (dc, cc) = (cls.det_col(), cls.cls_col());
        if g_img[dc] == 0.0 {
            continue;
        }
        let compact = cols
            .iter()
            .position(|&c| c == cc)
            .expect("abnormality column");
        for i in 0..m {
            g_p_cls.add_at(i, compact, g_img[dc] * trace.p_det.get(i, dc));
            g_p_det.add_at(i, dc, g_img[dc] * trace.p_cls.get(i, cc));
        }
    }

    // region classification loss on labeled regions
    if let Some(labels) = item.labels {
        if scale_full_cls != 0.0 {
            for (i, label) in labels.iter().enumerate() {
                match label {
                    RegionLabel::Malignant => {
                        let p = trace.p_cls.get(i, CLS_M);
                        if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                            let compact = cols
                                .iter()
                                .position(|&c| c == CLS_M)
                                .expect("malignant column");
                            g_p_cls.add_at(i, compact, -scale_full_cls / p);
                        }
                    }
                    RegionLabel::BenignOrNormal => {
                        let p = trace.p_cls.get(i, CLS_B) + trace.p_cls.get(i, CLS_N);
                        if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                            for (compact, &c) in cols.iter().enumerate() {
                                if c == CLS_B || c == CLS_N {
                                    g_p_cls.add_at(i, compact, -scale_full_cls / p);
                                }
                            }
                        }
                    }
                    RegionLabel::Ignored => {}
                }
            }
        }
    }

    // softmax backward for the classification branch
    let mut g_z_cls = Mat::zeros(m, n_cls);
    for i in 0..m {
        let mut inner = 0.0;
        for (compact, &c) in cols.iter().enumerate() {
            inner += g_p_cls.get(i, compact) * trace.p_cls.get(i, c);
        }
        for (compact, &c) in cols.iter().enumerate() {
            let p = trace.p_cls.get(i, c);
            g_z_cls.set(i, compact, p * (g_p_cls.get(i, compact) - inner));
        }
    }

    // detection branch gradients
    let mut g_z_det = Mat::zeros(m, 2);
    if params.variant.has_detection_branch() {
        // masked softmax backward per class
        for cls in Abnormality::ALL {
            let dc = cls.det_col();
            let mut inner = 0.0;
            for i in 0..m {
                inner += g_p_det.get(i, dc) * trace.p_det.get(i, dc);
            }
            for i in 0..m {
                if trace.mask.get(i, dc) == 1.0 {
                    let p = trace.p_det.get(i, dc);
                    g_z_det.set(i, dc, p * (g_p_det.get(i, dc) - inner));
                }
            }
        }
        // detection loss on the unmasked malignant distribution
        if let Some(labels) = item.labels {
            if scale_full_det != 0.0 && labels.contains(&RegionLabel::Malignant) {
                if let Some(q) = unmasked_det_distribution(trace, Abnormality::Malignant) {
                    let mass: f64 = labels
                        .iter()
                        .zip(&q)
                        .filter(|(l, _)| **l == RegionLabel::Malignant)
                        .map(|(_, &p)| p)
                        .sum();
                    if mass > PROB_EPS {
                        let dc = Abnormality::Malignant.det_col();
                        for (i, (&qi, label)) in q.iter().zip(labels).enumerate() {
                            let hit = if *label == RegionLabel::Malignant {
                                qi / mass
                            } else {
                                0.0
                            };
                            g_z_det.add_at(i, dc, scale_full_det * (qi - hit));
                        }
                    }
                }
            }
        }
    }

    // affine layers back to the shared embedding
    let d_h = params.d_h();
    let mut g_hidden = Mat::zeros(m, d_h);
    for i in 0..m {
        let h = trace.hidden.row(i);
        for compact in 0..n_cls {
            let g = g_z_cls.get(i, compact);
            if g == 0.0 {
                continue;
            }
            grads.cls_b[compact] += g;
            let w_row = params.cls_w.row(compact);
            let gw_row = grads.cls_w.row_mut(compact);
            let gh = g_hidden.row_mut(i);
            for j in 0..d_h {
                gw_row[j] += g * h[j];
                gh[j] += g * w_row[j];
            }
        }
    }
    if let (Some(det_w), Some(g_det_w), Some(g_det_b)) =
        (&params.det_w, &mut grads.det_w, &mut grads.det_b)
    {
        for cls in Abnormality::ALL {
            let dc = cls.det_col();
            let u = det_w.row(dc);
            for i in 0..m {
                let g = g_z_det.get(i, dc);
                if g == 0.0 {
                    continue;
                }
                g_det_b[dc] += g;
                let h = trace.hidden.row(i);
                let gw_row = g_det_w.row_mut(dc);
                let gh = g_hidden.row_mut(i);
                for j in 0..d_h {
                    gw_row[j] += g * h[j];
                    gh[j] += g * u[j];
                }
            }
        }
    }

    // dropout, then ReLU, then the shared affine map
    if let Some(dmask) = &trace.dropout_mask {
        for (g, &keep) in g_hidden.as_mut_slice().iter_mut().zip(dmask.as_slice()) {
            *g *= keep;
        }
    }
    for (g, &a) in g_hidden
        .as_mut_slice()
        .iter_mut()
        .zip(trace.pre_act.as_slice())
    {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
    let features = &item.bag.features;
    for i in 0..m {
        let x = features.row(i);
        for (j, &g) in g_hidden.row(i).iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.shared_b[j] += g;
            for (a, &xv) in x.iter().enumerate() {
                grads.shared_w.add_at(a, j, g * xv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, Supervision, WeakLabel};
    use crate::model::Variant;

    fn bag(features: Mat, weak: WeakLabel) -> RegionBag {
        let m = features.rows();
        let side = 32;
        let stride = 16;
        RegionBag {
            image_id: "g".into(),
            features,
            geometry: build_grid(stride * m as u32 + side, side, side, stride).unwrap()[..m]
                .to_vec(),
            weak_label: weak,
            annotations: vec![],
            supervision: Supervision::Weak,
        }
    }

    #[test]
    fn gradient_vanishes_at_a_constructed_stationary_point() {
        // two identical single-region bags with opposite labels, two-class
        // variant at zero parameters: every probability is 1/2 and the
        // per-image gradients cancel exactly
        let params = ModelParams::zeros(Variant::DbBaseline, 1, 3, 2);
        let features = Mat::from_rows(&[vec![0.3, -0.7, 1.1]]);
        let bag_a = bag(features.clone(), WeakLabel::new(true, false));
        let bag_b = bag(features, WeakLabel::new(false, true));
        let items = [
            TrainItem {
                bag: &bag_a,
                labels: None,
            },
            TrainItem {
                bag: &bag_b,
                labels: None,
            },
        ];
        let split = SupervisionSplit {
            weak_indices: vec![0, 1],
            full_indices: vec![],
            m_f: 0,
            n: 2,
        };
        let weights = LossWeights::default();
        let (loss, grads) = backward(&items, &params, &split, &weights, 0.0, None).unwrap();
        assert!(loss.is_finite());
        assert!(grads.max_abs() < 1e-10, "gradient norm {}", grads.max_abs());
    }

    #[test]
    fn single_region_weak_gradient_is_softmax_cross_entropy() {
        // one region, one weak image with y_M = 1: p(y_M|x) = p_cls(M|r),
        // so the classification logit gradient must be (p - onehot(M))
        let mut rng = Prng::from_seed(40);
        let (d_in, d_h) = (4, 3);
        let mut params = ModelParams::zeros(Variant::ClsDetRs, 5, d_in, d_h);
        for (_, t) in params.tensors_mut() {
            for v in t {
                *v = 0.8 * rng.normal();
            }
        }
        let features = Mat::from_fn(1, d_in, |_, _| rng.normal() + 1.5);
        let the_bag = bag(features, WeakLabel::new(true, false));
        let items = [TrainItem {
            bag: &the_bag,
            labels: None,
        }];
        let split = SupervisionSplit {
            weak_indices: vec![0],
            full_indices: vec![],
            m_f: 0,
            n: 1,
        };
        // silence the benign weak term so only -log p(y_M|x) remains
        let weights = LossWeights::default();
        let trace = forward(&the_bag, &params, ForwardMode::Infer { dropout_keep: 1.0 }).unwrap();
        let (_, grads) = backward(&items, &params, &split, &weights, 0.0, None).unwrap();

        // hand gradient: d(-ln p_M)/dz_c = p_c - [c == M], plus the benign
        // term d(-ln(1-p_B))/dz_c = (p_c opposing) handled by a second
        // softmax-cross-entropy-style factor; verify the malignant bias
        // coordinate against the full finite-difference value instead of
        // re-deriving the combined pair here.
        let p = [
            trace.p_cls.get(0, CLS_N),
            trace.p_cls.get(0, CLS_B),
            trace.p_cls.get(0, CLS_M),
        ];
        // y_B = 0 with p(y_B|x) = p_B: the benign term contributes
        // (1/(1-p_B)) * dp_B/dz, with dp_B/dz_c = p_B([c==B]-p_c)
        let mut expected_bias = [0.0; 3];
        for (c, slot) in expected_bias.iter_mut().enumerate() {
            let ce_m = p[c] - if c == CLS_M { 1.0 } else { 0.0 };
            let d_p_b = p[CLS_B] * (if c == CLS_B { 1.0 } else { 0.0 } - p[c]);
            *slot = ce_m + d_p_b / (1.0 - p[CLS_B]);
        }
        for (c, (&got, &expected)) in grads.cls_b.iter().zip(&expected_bias).enumerate() {
            assert!(
                (got - expected).abs() < 1e-10,
                "bias {c}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn l2_gradient_alone_is_c_times_theta() {
        let mut rng = Prng::from_seed(77);
        let mut params = ModelParams::zeros(Variant::ClsDet, 3, 3, 2);
        for (_, t) in params.tensors_mut() {
            for v in t {
                *v = rng.normal();
            }
        }
        // a bag whose loss terms are all flat: impossible in general, so
        // compare gradients with and without the penalty instead
        let features = Mat::from_fn(2, 3, |_, _| rng.normal());
        let the_bag = bag(features, WeakLabel::new(false, false));
        let items = [TrainItem {
            bag: &the_bag,
            labels: None,
        }];
        let split = SupervisionSplit {
            weak_indices: vec![0],
            full_indices: vec![],
            m_f: 0,
            n: 1,
        };
        let weights = LossWeights::default();
        let c = 0.37;
        let (l0, g0) = backward(&items, &params, &split, &weights, 0.0, None).unwrap();
        let (l1, g1) = backward(&items, &params, &split, &weights, c, None).unwrap();
        let mut sq = 0.0;
        for (name, t) in params.tensors() {
            if !ModelParams::is_bias(name) {
                sq += t.iter().map(|v| v * v).sum::<f64>();
            }
        }
        assert!((l1 - l0 - 0.5 * c * sq).abs() < 1e-12);
        for ((name, a), (_, b)) in g1.tensors().into_iter().zip(g0.tensors()) {
            let (_, p) = params
                .tensors()
                .into_iter()
                .find(|(n, _)| *n == name)
                .unwrap();
            for ((&av, &bv), &pv) in a.iter().zip(b).zip(p) {
                let expected = if ModelParams::is_bias(name) {
                    0.0
                } else {
                    c * pv
                };
                assert!((av - bv - expected).abs() < 1e-12);
            }
        }
    }
}
