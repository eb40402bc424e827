//! The dual-branch forward pass.
//!
//! A shared rectified hidden layer embeds each region. The classification
//! branch scores every region over {normal, benign, malignant}; the
//! detection branch ranks the regions of one image against each other for
//! each abnormality class through a softmax over regions. Region selection
//! restricts that softmax to the k regions the classifier ranks highest,
//! and the image-level probability is the detection-weighted average of
//! the region class probabilities.
//!
//! Four variants share this code path:
//! * `ClsDetRs`   - full model with top-k region selection,
//! * `ClsDet`     - detection over all regions (all-ones mask),
//! * `DbBaseline` - no normal region class, all-ones mask,
//! * `MaxRegion`  - no detection branch; the image probability is the
//!   maximum region probability, expressed here as a one-hot detection
//!   distribution on the top-1 region so every trace satisfies the same
//!   aggregation identity.

use crate::rng::Prng;
use crate::{domain::RegionBag, Error, Mat, Result};

/// Region classes scored by the classification branch. Column order of
/// every m x 3 probability matrix.
pub const CLS_N: usize = 0;
pub const CLS_B: usize = 1;
pub const CLS_M: usize = 2;

/// Abnormality classes handled by the detection branch. Column order of
/// every m x 2 matrix (masks, detection distributions, region scores).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Abnormality {
    Benign,
    Malignant,
}

impl Abnormality {
    pub const ALL: [Abnormality; 2] = [Abnormality::Benign, Abnormality::Malignant];

    /// Column in m x 2 detection-side matrices.
    pub fn det_col(self) -> usize {
        match self {
            Abnormality::Benign => 0,
            Abnormality::Malignant => 1,
        }
    }

    /// Column in m x 3 classification probability matrices.
    pub fn cls_col(self) -> usize {
        match self {
            Abnormality::Benign => CLS_B,
            Abnormality::Malignant => CLS_M,
        }
    }
}

/// Model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    ClsDetRs,
    ClsDet,
    DbBaseline,
    MaxRegion,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::ClsDetRs,
        Variant::ClsDet,
        Variant::DbBaseline,
        Variant::MaxRegion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ClsDetRs => "cls-det-rs",
            Variant::ClsDet => "cls-det",
            Variant::DbBaseline => "db-baseline",
            Variant::MaxRegion => "max-region",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cls-det-rs" => Some(Variant::ClsDetRs),
            "cls-det" => Some(Variant::ClsDet),
            "db-baseline" => Some(Variant::DbBaseline),
            "max-region" => Some(Variant::MaxRegion),
            _ => None,
        }
    }

    /// Whether the region classifier includes the normal class.
    pub fn has_normal_class(self) -> bool {
        !matches!(self, Variant::DbBaseline)
    }

    /// Whether trained detection parameters exist.
    pub fn has_detection_branch(self) -> bool {
        !matches!(self, Variant::MaxRegion)
    }

    /// Whether the detection softmax is restricted to the top-k regions.
    pub fn uses_region_selection(self) -> bool {
        matches!(self, Variant::ClsDetRs)
    }

    /// Rows of the classification weight matrix, in storage order, as
    /// columns of the m x 3 probability matrix.
    pub fn cls_columns(self) -> &'static [usize] {
        if self.has_normal_class() {
            &[CLS_N, CLS_B, CLS_M]
        } else {
            &[CLS_B, CLS_M]
        }
    }
}

/// All trainable tensors plus the fixed selection size and variant tag.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    /// Region-selection size for the masked detection softmax.
    pub k: usize,
    /// d_in x d_h weights of the shared hidden layer.
    pub shared_w: Mat,
    pub shared_b: Vec<f64>,
    /// One row per region class, in `variant.cls_columns()` order.
    pub cls_w: Mat,
    pub cls_b: Vec<f64>,
    /// One row per abnormality class (benign, malignant). Absent for
    /// `MaxRegion`.
    pub det_w: Option<Mat>,
    pub det_b: Option<Vec<f64>>,
}

impl ModelParams {
    pub fn d_in(&self) -> usize {
        self.shared_w.rows()
    }

    pub fn d_h(&self) -> usize {
        self.shared_w.cols()
    }

    /// Zero-valued parameter set with the right shapes.
    pub fn zeros(variant: Variant, k: usize, d_in: usize, d_h: usize) -> Self {
        let n_cls = variant.cls_columns().len();
        let (det_w, det_b) = if variant.has_detection_branch() {
            (Some(Mat::zeros(2, d_h)), Some(vec![0.0; 2]))
        } else {
            (None, None)
        };
        Self {
            variant,
            k,
            shared_w: Mat::zeros(d_in, d_h),
            shared_b: vec![0.0; d_h],
            cls_w: Mat::zeros(n_cls, d_h),
            cls_b: vec![0.0; n_cls],
            det_w,
            det_b,
        }
    }

    /// Tensors in the fixed order used by the optimizer, the finite
    /// difference oracle, and the checkpoint format.
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

    /// Whether a tensor name refers to a bias vector. Weight decay and the
    /// L2 penalty skip biases.
    pub fn is_bias(name: &str) -> bool {
        name.ends_with("_b")
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

/// Forward execution mode. Training samples a fresh dropout mask from the
/// given stream; inference is deterministic and scales activations by the
/// keep probability instead.
pub enum ForwardMode<'a> {
    Train {
        rng: &'a mut Prng,
        dropout_keep: f64,
    },
    Infer {
        dropout_keep: f64,
    },
}

/// Everything one forward pass produces, kept for scoring and backprop.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Variant that produced the trace.
    pub variant: Variant,
    /// Pre-activation of the shared layer (needed for the ReLU gradient).
    pub pre_act: Mat,
    /// Shared embedding as seen by both branches (after ReLU and, in
    /// training mode, after dropout).
    pub hidden: Mat,
    /// Dropout mask with entries in {0, 1}; `None` outside training mode.
    pub dropout_mask: Option<Mat>,
    /// m x 3 region class probabilities, columns (N, B, M). The N column
    /// is identically zero for the two-class variant.
    pub p_cls: Mat,
    /// m x 2 detection logits, columns (B, M). Zero when the variant has
    /// no detection branch.
    pub det_logits: Mat,
    /// m x 2 selection mask with entries in {0, 1}, columns (B, M).
    pub mask: Mat,
    /// m x 2 masked detection distribution, columns (B, M).
    pub p_det: Mat,
    /// (p(y_B=1|x), p(y_M=1|x)).
    pub p_image: [f64; 2],
    /// m x 2 region scores, the product of the two branch probabilities.
    pub d_scores: Mat,
}

impl ForwardTrace {
    pub fn m(&self) -> usize {
        self.p_cls.rows()
    }

    pub fn p_benign(&self) -> f64 {
        self.p_image[Abnormality::Benign.det_col()]
    }

    pub fn p_malignant(&self) -> f64 {
        self.p_image[Abnormality::Malignant.det_col()]
    }
}

/// Shared embedding: affine map, ReLU, then dropout (training) or
/// activation scaling by the keep probability (inference).
pub fn shared_embed(features: &Mat, params: &ModelParams, mode: ForwardMode) -> Result<Mat> {
    let (_, hidden, _) = embed_with(features, params, mode)?;
    Ok(hidden)
}

pub(crate) fn embed_with(
    features: &Mat,
    params: &ModelParams,
    mode: ForwardMode,
) -> Result<(Mat, Mat, Option<Mat>)> {
    if features.cols() != params.d_in() {
        return Err(Error::Shape(format!(
            "feature dim {} but shared layer expects {}",
            features.cols(),
            params.d_in()
        )));
    }
    let m = features.rows();
    let d_h = params.d_h();
    let mut pre = Mat::zeros(m, d_h);
    for i in 0..m {
        let x = features.row(i);
        let out = pre.row_mut(i);
        out.copy_from_slice(&params.shared_b);
        for (a, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = params.shared_w.row(a);
            for (o, w) in out.iter_mut().zip(wrow) {
                *o += xv * w;
            }
        }
    }
    if !pre.is_finite() {
        return Err(Error::NonFinite {
            tensor: "hidden pre-activation".into(),
        });
    }
    let mut hidden = pre.clone();
    for v in hidden.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let dropout_mask = match mode {
        ForwardMode::Train { rng, dropout_keep } => {
            assert!(dropout_keep > 0.0 && dropout_keep <= 1.0);
            if dropout_keep < 1.0 {
                let mut mask = Mat::zeros(m, d_h);
                for (h, keep) in hidden.as_mut_slice().iter_mut().zip(mask.as_mut_slice()) {
                    if rng.bernoulli(dropout_keep) {
                        *keep = 1.0;
                    } else {
                        *h = 0.0;
                    }
                }
                Some(mask)
            } else {
                None
            }
        }
        ForwardMode::Infer { dropout_keep } => {
            assert!(dropout_keep > 0.0 && dropout_keep <= 1.0);
            if dropout_keep < 1.0 {
                for v in hidden.as_mut_slice() {
                    *v *= dropout_keep;
                }
            }
            None
        }
    };
    Ok((pre, hidden, dropout_mask))
}

/// Numerically stable softmax over `logits`, written into `out`.
fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Region class probabilities as an m x 3 matrix with columns (N, B, M).
/// The two-class variant leaves the N column at zero.
pub fn classify_regions(hidden: &Mat, params: &ModelParams) -> Result<Mat> {
    if hidden.cols() != params.d_h() {
        return Err(Error::Shape(format!(
            "hidden dim {} but classifier expects {}",
            hidden.cols(),
            params.d_h()
        )));
    }
    let cols = params.variant.cls_columns();
    let m = hidden.rows();
    let mut p = Mat::zeros(m, 3);
    let mut logits = vec![0.0; cols.len()];
    let mut probs = vec![0.0; cols.len()];
    for i in 0..m {
        let h = hidden.row(i);
        for (c, z) in logits.iter_mut().enumerate() {
            let w = params.cls_w.row(c);
            *z = params.cls_b[c] + dot(w, h);
        }
        softmax_into(&logits, &mut probs);
        for (c, &col) in cols.iter().enumerate() {
            p.set(i, col, probs[c]);
        }
    }
    Ok(p)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Marks the min(k, m) regions with the highest classification probability
/// for `cls`. Ties break toward the lower region index.
pub fn select_regions(p_cls: &Mat, k: usize, cls: Abnormality) -> Vec<bool> {
    assert!(k >= 1, "selection size must be at least 1");
    let m = p_cls.rows();
    let col = cls.cls_col();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        p_cls
            .get(b, col)
            .partial_cmp(&p_cls.get(a, col))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; m];
    for &i in order.iter().take(k.min(m)) {
        mask[i] = true;
    }
    mask
}

/// Detection distribution for one abnormality class: softmax of the
/// detection logits restricted to the masked regions, zero elsewhere.
/// With an all-ones mask this is the plain softmax over regions.
pub fn detect_regions(
    hidden: &Mat,
    params: &ModelParams,
    mask: &[bool],
    cls: Abnormality,
) -> Result<Vec<f64>> {
    let logits = detection_logits(hidden, params, cls)?;
    masked_softmax(&logits, mask)
}

pub(crate) fn detection_logits(
    hidden: &Mat,
    params: &ModelParams,
    cls: Abnormality,
) -> Result<Vec<f64>> {
    let (w, b) = match (&params.det_w, &params.det_b) {
        (Some(w), Some(b)) => (w, b),
        _ => return Err(Error::NoDetectionBranch),
    };
    let row = cls.det_col();
    let u = w.row(row);
    Ok((0..hidden.rows())
        .map(|i| b[row] + dot(u, hidden.row(i)))
        .collect())
}

pub(crate) fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    assert_eq!(logits.len(), mask.len());
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyMask);
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for ((o, &z), &m) in out.iter_mut().zip(logits).zip(mask) {
        if m {
            let e = (z - max).exp();
            *o = e;
            sum += e;
        }
    }
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Image-level probabilities: the detection-weighted average of the region
/// class probabilities, one value per abnormality class.
pub fn aggregate_image(p_cls: &Mat, p_det: &Mat) -> [f64; 2] {
    let mut p = [0.0; 2];
    for cls in Abnormality::ALL {
        let (cc, dc) = (cls.cls_col(), cls.det_col());
        p[dc] = (0..p_cls.rows())
            .map(|i| p_det.get(i, dc) * p_cls.get(i, cc))
            .sum();
    }
    p
}

/// Region scores: the product of the classification and detection
/// probabilities per region and abnormality class. Their column sums equal
/// the image-level probabilities.
pub fn score_regions(trace: &ForwardTrace) -> Mat {
    score_from(&trace.p_cls, &trace.p_det)
}

fn score_from(p_cls: &Mat, p_det: &Mat) -> Mat {
    let m = p_cls.rows();
    let mut d = Mat::zeros(m, 2);
    for cls in Abnormality::ALL {
        let (cc, dc) = (cls.cls_col(), cls.det_col());
        for i in 0..m {
            d.set(i, dc, p_cls.get(i, cc) * p_det.get(i, dc));
        }
    }
    d
}

/// Selection masks recomputed from the classifier output according to the
/// variant. The masks are treated as constants during differentiation.
pub(crate) fn variant_masks(p_cls: &Mat, params: &ModelParams) -> [Vec<bool>; 2] {
    let m = p_cls.rows();
    let select = |cls| match params.variant {
        Variant::ClsDetRs => select_regions(p_cls, params.k, cls),
        Variant::ClsDet | Variant::DbBaseline => vec![true; m],
        // top-1 by class probability: the max-region decision rule
        Variant::MaxRegion => select_regions(p_cls, 1, cls),
    };
    [select(Abnormality::Benign), select(Abnormality::Malignant)]
}

/// Full forward pass over one bag.
pub fn forward(bag: &RegionBag, params: &ModelParams, mode: ForwardMode) -> Result<ForwardTrace> {
    let (pre, hidden, dmask) = embed_with(&bag.features, params, mode)?;
    let p_cls = classify_regions(&hidden, params)?;
    let masks = variant_masks(&p_cls, params);
    forward_from_parts(pre, hidden, dmask, p_cls, &masks, params)
}

/// Forward pass with externally fixed selection masks (used when a loss
/// must be re-evaluated with the masks of a reference pass, e.g. by the
/// finite difference oracle).
pub(crate) fn forward_frozen(
    features: &Mat,
    params: &ModelParams,
    masks: &[Vec<bool>; 2],
) -> Result<ForwardTrace> {
    let (pre, hidden, dmask) =
        embed_with(features, params, ForwardMode::Infer { dropout_keep: 1.0 })?;
    let p_cls = classify_regions(&hidden, params)?;
    forward_from_parts(pre, hidden, dmask, p_cls, masks, params)
}

fn forward_from_parts(
    pre_act: Mat,
    hidden: Mat,
    dropout_mask: Option<Mat>,
    p_cls: Mat,
    masks: &[Vec<bool>; 2],
    params: &ModelParams,
) -> Result<ForwardTrace> {
    let m = p_cls.rows();
    let mut mask = Mat::zeros(m, 2);
    let mut det_logits = Mat::zeros(m, 2);
    let mut p_det = Mat::zeros(m, 2);
    for cls in Abnormality::ALL {
        let dc = cls.det_col();
        let cls_mask = &masks[dc];
        for (i, &selected) in cls_mask.iter().enumerate() {
            mask.set(i, dc, if selected { 1.0 } else { 0.0 });
        }
        if params.variant.has_detection_branch() {
            let logits = detection_logits(&hidden, params, cls)?;
            let dist = masked_softmax(&logits, cls_mask)?;
            for i in 0..m {
                det_logits.set(i, dc, logits[i]);
                p_det.set(i, dc, dist[i]);
            }
        } else {
            // one-hot distribution on the selected region
            let chosen = cls_mask.iter().position(|&s| s).ok_or(Error::EmptyMask)?;
            p_det.set(chosen, dc, 1.0);
        }
    }
    let p_image = aggregate_image(&p_cls, &p_det);
    let d_scores = score_from(&p_cls, &p_det);
    Ok(ForwardTrace {
        variant: params.variant,
        pre_act,
        hidden,
        dropout_mask,
        p_cls,
        det_logits,
        mask,
        p_det,
        p_image,
        d_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, Supervision, WeakLabel};
    use proptest::prelude::*;

    fn infer() -> ForwardMode<'static> {
        ForwardMode::Infer { dropout_keep: 1.0 }
    }

    fn bag_from_features(features: Mat) -> RegionBag {
        let m = features.rows();
        let side = 32;
        let stride = 16;
        let width = stride * (m as u32) + side;
        RegionBag {
            image_id: "t".into(),
            features,
            geometry: build_grid(width, side, side, stride).unwrap()[..m].to_vec(),
            weak_label: WeakLabel::new(false, false),
            annotations: vec![],
            supervision: Supervision::Weak,
        }
    }

    #[test]
    fn zero_map_embeds_to_zero() {
        let params = ModelParams::zeros(Variant::ClsDetRs, 10, 3, 4);
        let features = Mat::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]);
        let h = shared_embed(&features, &params, infer()).unwrap();
        assert!(h.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rectifier_zeroes_negative_coordinates() {
        let mut params = ModelParams::zeros(Variant::ClsDetRs, 10, 2, 2);
        params.shared_w.set(0, 0, 1.0);
        params.shared_w.set(1, 1, 1.0);
        let features = Mat::from_rows(&[vec![-3.0, 2.0]]);
        let h = shared_embed(&features, &params, infer()).unwrap();
        assert_eq!(h.row(0), &[0.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let params = ModelParams::zeros(Variant::ClsDetRs, 10, 3, 4);
        let features = Mat::from_rows(&[vec![1.0, 2.0]]);
        assert!(matches!(
            shared_embed(&features, &params, infer()),
            Err(Error::Shape(_))
        ));
        let hidden = Mat::zeros(2, 7);
        assert!(matches!(
            classify_regions(&hidden, &params),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dropout_keeps_roughly_half_at_keep_half() {
        let mut params = ModelParams::zeros(Variant::ClsDetRs, 10, 1, 1000);
        for j in 0..1000 {
            params.shared_w.set(0, j, 1.0);
        }
        let features = Mat::from_rows(&[vec![1.0]]);
        let mut rng = Prng::from_seed(42);
        let h = shared_embed(
            &features,
            &params,
            ForwardMode::Train {
                rng: &mut rng,
                dropout_keep: 0.5,
            },
        )
        .unwrap();
        let survivors = h.row(0).iter().filter(|&&v| v != 0.0).count();
        assert!((400..=600).contains(&survivors), "{survivors} survivors");
    }

    #[test]
    fn inference_scales_activations_by_keep() {
        let mut params = ModelParams::zeros(Variant::ClsDetRs, 10, 1, 3);
        for j in 0..3 {
            params.shared_w.set(0, j, 1.0);
        }
        let features = Mat::from_rows(&[vec![2.0]]);
        let h = shared_embed(&features, &params, ForwardMode::Infer { dropout_keep: 0.5 }).unwrap();
        assert_eq!(h.row(0), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_classifier_is_uniform_over_three_classes() {
        let params = ModelParams::zeros(Variant::ClsDetRs, 10, 2, 2);
        let hidden = Mat::zeros(4, 2);
        let p = classify_regions(&hidden, &params).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert!((p.get(i, c) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_of_unit_logit_matches_hand_value() {
        // logits (0, 0, 1) for (N, B, M)
        let mut params = ModelParams::zeros(Variant::ClsDetRs, 10, 1, 1);
        params.cls_w.set(CLS_M, 0, 1.0);
        let hidden = Mat::from_rows(&[vec![1.0]]);
        let p = classify_regions(&hidden, &params).unwrap();
        let e = std::f64::consts::E;
        assert!((p.get(0, CLS_N) - 1.0 / (e + 2.0)).abs() < 1e-12);
        assert!((p.get(0, CLS_B) - 1.0 / (e + 2.0)).abs() < 1e-12);
        assert!((p.get(0, CLS_M) - e / (e + 2.0)).abs() < 1e-12);
        assert!((p.get(0, CLS_M) - 0.5761).abs() < 1e-4);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut params = ModelParams::zeros(Variant::ClsDetRs, 10, 1, 1);
        params.cls_w.set(CLS_M, 0, 1.0);
        let hidden = Mat::from_rows(&[vec![1.0]]);
        let base = classify_regions(&hidden, &params).unwrap();
        for b in params.cls_b.iter_mut() {
            *b += 100.0;
        }
        let shifted = classify_regions(&hidden, &params).unwrap();
        for c in 0..3 {
            assert!((base.get(0, c) - shifted.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn db_baseline_has_zero_normal_column() {
        let params = ModelParams::zeros(Variant::DbBaseline, 10, 2, 2);
        let hidden = Mat::zeros(3, 2);
        let p = classify_regions(&hidden, &params).unwrap();
        for i in 0..3 {
            assert_eq!(p.get(i, CLS_N), 0.0);
            assert!((p.get(i, CLS_B) - 0.5).abs() < 1e-12);
            assert!((p.get(i, CLS_M) - 0.5).abs() < 1e-12);
        }
    }

    fn p_cls_with_m_column(values: &[f64]) -> Mat {
        let mut p = Mat::zeros(values.len(), 3);
        for (i, &v) in values.iter().enumerate() {
            p.set(i, CLS_M, v);
            p.set(i, CLS_B, (1.0 - v) / 2.0);
            p.set(i, CLS_N, (1.0 - v) / 2.0);
        }
        p
    }

    #[test]
    fn select_all_when_k_at_least_m() {
        let p = p_cls_with_m_column(&[0.2, 0.9, 0.4]);
        assert_eq!(
            select_regions(&p, 10, Abnormality::Malignant),
            vec![true; 3]
        );
    }

    #[test]
    fn select_top_two_by_inspection() {
        let p = p_cls_with_m_column(&[0.9, 0.1, 0.5]);
        assert_eq!(
            select_regions(&p, 2, Abnormality::Malignant),
            vec![true, false, true]
        );
    }

    #[test]
    fn select_breaks_ties_toward_lower_index() {
        let p = p_cls_with_m_column(&[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(
            select_regions(&p, 2, Abnormality::Malignant),
            vec![true, true, false, false]
        );
    }

    #[test]
    fn single_region_distribution_is_one() {
        let mut params = ModelParams::zeros(Variant::ClsDet, 10, 1, 1);
        params.det_w.as_mut().unwrap().set(1, 0, 3.0);
        let hidden = Mat::from_rows(&[vec![2.0]]);
        let p = detect_regions(&hidden, &params, &[true], Abnormality::Malignant).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn equal_logits_give_uniform_distribution() {
        let params = ModelParams::zeros(Variant::ClsDet, 10, 1, 1);
        let hidden = Mat::zeros(4, 1);
        let p = detect_regions(&hidden, &params, &[true; 4], Abnormality::Malignant).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_over_support() {
        // logits (0, 0, ln 2) with the first region masked out
        let mut params = ModelParams::zeros(Variant::ClsDet, 10, 1, 1);
        params.det_w.as_mut().unwrap().set(1, 0, 1.0);
        let hidden = Mat::from_rows(&[vec![0.0], vec![0.0], vec![2.0_f64.ln()]]);
        let p = detect_regions(
            &hidden,
            &params,
            &[false, true, true],
            Abnormality::Malignant,
        )
        .unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[2] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_mask_is_an_error() {
        let params = ModelParams::zeros(Variant::ClsDet, 10, 1, 1);
        let hidden = Mat::zeros(2, 1);
        assert!(matches!(
            detect_regions(&hidden, &params, &[false, false], Abnormality::Malignant),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn aggregate_single_region_is_identity() {
        let p_cls = p_cls_with_m_column(&[0.7]);
        let mut p_det = Mat::zeros(1, 2);
        p_det.set(0, 0, 1.0);
        p_det.set(0, 1, 1.0);
        let p = aggregate_image(&p_cls, &p_det);
        assert!((p[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_the_dot_product() {
        let p_cls = p_cls_with_m_column(&[0.2, 0.6]);
        let mut p_det = Mat::zeros(2, 2);
        p_det.set(0, 1, 0.5);
        p_det.set(1, 1, 0.5);
        let p = aggregate_image(&p_cls, &p_det);
        assert!((p[1] - 0.4).abs() < 1e-12);
    }

    fn random_bag_and_params(
        variant: Variant,
        seed: u64,
        m: usize,
        k: usize,
    ) -> (RegionBag, ModelParams) {
        let mut rng = Prng::from_seed(seed);
        let (d_in, d_h) = (5, 4);
        let features = Mat::from_fn(m, d_in, |_, _| rng.normal());
        let mut params = ModelParams::zeros(variant, k, d_in, d_h);
        for (_, t) in params.tensors_mut() {
            for v in t {
                *v = 0.7 * rng.normal();
            }
        }
        (bag_from_features(features), params)
    }

    #[test]
    fn max_region_image_probability_is_max_region_probability() {
        let (bag, params) = random_bag_and_params(Variant::MaxRegion, 3, 6, 1);
        params.check_finite().unwrap();
        let trace = forward(&bag, &params, infer()).unwrap();
        let max_m = (0..trace.m())
            .map(|i| trace.p_cls.get(i, CLS_M))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((trace.p_malignant() - max_m).abs() < 1e-12);
        let max_b = (0..trace.m())
            .map(|i| trace.p_cls.get(i, CLS_B))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((trace.p_benign() - max_b).abs() < 1e-12);
    }

    #[test]
    fn max_region_matches_spec_example() {
        // p_cls(M) column (0.1, 0.7, 0.3) under a one-hot detection
        // distribution gives image probability 0.7
        let p_cls = p_cls_with_m_column(&[0.1, 0.7, 0.3]);
        let mask = select_regions(&p_cls, 1, Abnormality::Malignant);
        assert_eq!(mask, vec![false, true, false]);
        let mut p_det = Mat::zeros(3, 2);
        p_det.set(1, 1, 1.0);
        let p = aggregate_image(&p_cls, &p_det);
        assert!((p[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn selection_saturates_to_cls_det_when_k_covers_all_regions() {
        let (bag, mut params) = random_bag_and_params(Variant::ClsDetRs, 9, 5, 8);
        let rs = forward(&bag, &params, infer()).unwrap();
        params.variant = Variant::ClsDet;
        let plain = forward(&bag, &params, infer()).unwrap();
        for (a, b) in rs.p_det.as_slice().iter().zip(plain.p_det.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in rs.p_image.iter().zip(plain.p_image.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let (bag, params) = random_bag_and_params(Variant::ClsDetRs, 21, 7, 3);
        let a = forward(&bag, &params, infer()).unwrap();
        let b = forward(&bag, &params, infer()).unwrap();
        assert_eq!(a.p_image, b.p_image);
        assert_eq!(a.d_scores.as_slice(), b.d_scores.as_slice());
    }

    #[test]
    fn masked_regions_score_zero_and_scores_sum_to_image_probability() {
        let (bag, params) = random_bag_and_params(Variant::ClsDetRs, 5, 9, 2);
        let trace = forward(&bag, &params, infer()).unwrap();
        let scores = score_regions(&trace);
        for cls in Abnormality::ALL {
            let dc = cls.det_col();
            let mut sum = 0.0;
            for i in 0..trace.m() {
                if trace.mask.get(i, dc) == 0.0 {
                    assert_eq!(scores.get(i, dc), 0.0);
                }
                sum += scores.get(i, dc);
            }
            assert!((sum - trace.p_image[dc]).abs() < 1e-9);
            assert!(sum <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn score_is_the_product_of_branch_probabilities() {
        let mut p_cls = Mat::zeros(1, 3);
        p_cls.set(0, CLS_M, 0.8);
        let mut p_det = Mat::zeros(1, 2);
        p_det.set(0, 1, 0.5);
        let d = score_from(&p_cls, &p_det);
        assert!((d.get(0, 1) - 0.4).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn selection_is_invariant_under_monotone_transforms(
            vals in proptest::collection::vec(0.001f64..0.999, 2..12),
            k in 1usize..6,
        ) {
            let p = p_cls_with_m_column(&vals);
            let base = select_regions(&p, k, Abnormality::Malignant);
            let squashed = p_cls_with_m_column(
                &vals.iter().map(|v| (3.0 * v + 1.0).ln()).collect::<Vec<_>>(),
            );
            prop_assert_eq!(base, select_regions(&squashed, k, Abnormality::Malignant));
        }

        #[test]
        fn aggregate_stays_within_region_probability_range(
            vals in proptest::collection::vec(0.0f64..1.0, 1..10),
        ) {
            let p_cls = p_cls_with_m_column(&vals);
            let m = vals.len();
            let mut p_det = Mat::zeros(m, 2);
            for i in 0..m {
                p_det.set(i, 1, 1.0 / m as f64);
            }
            let p = aggregate_image(&p_cls, &p_det);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p[1] >= lo - 1e-12 && p[1] <= hi + 1e-12);
        }

        #[test]
        fn detection_distribution_is_shift_invariant(seed in 0u64..500) {
            let (bag, mut params) = random_bag_and_params(Variant::ClsDetRs, seed, 6, 3);
            let base = forward(&bag, &params, ForwardMode::Infer { dropout_keep: 1.0 }).unwrap();
            for b in params.det_b.as_mut().unwrap().iter_mut() {
                *b += 37.5;
            }
            let shifted = forward(&bag, &params, ForwardMode::Infer { dropout_keep: 1.0 }).unwrap();
            for (a, b) in base.p_det.as_slice().iter().zip(shifted.p_det.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn probabilities_stay_normalized_under_large_logits(scale in 1.0f64..1e3) {
            let mut params = ModelParams::zeros(Variant::ClsDetRs, 2, 1, 1);
            params.cls_w.set(CLS_M, 0, scale);
            params.cls_w.set(CLS_B, 0, -scale);
            params.det_w.as_mut().unwrap().set(1, 0, scale);
            let features = Mat::from_rows(&[vec![1.0], vec![-1.0], vec![0.5]]);
            let bag = bag_from_features(features);
            let trace = forward(&bag, &params, ForwardMode::Infer { dropout_keep: 1.0 }).unwrap();
            for i in 0..trace.m() {
                let row_sum: f64 = trace.p_cls.row(i).iter().sum();
                prop_assert!((row_sum - 1.0).abs() < 1e-9);
                prop_assert!(trace.p_cls.row(i).iter().all(|v| v.is_finite()));
            }
            for cls in Abnormality::ALL {
                let sum = trace.p_det.col_sum(cls.det_col());
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }
}
