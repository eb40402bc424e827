//! Classification and localization metrics.
//!
//! AUROC uses the rank formulation with half credit for ties, computed in
//! integer arithmetic so it agrees exactly with brute-force pair counting.
//! ROC-derived numbers (partial-AUC ratio over a sensitivity band,
//! specificity at a target sensitivity) interpolate linearly between
//! operating points. The free-response curve scores localization: a region
//! fires when its score passes the threshold, a firing is correct when the
//! region overlaps a ground-truth lesion of the class with IoM at least
//! one half, sensitivity is the fraction of positive images with at least
//! one correct firing, and the x axis is false-positive firings per image.

use std::fmt::Write as _;
use std::path::Path;

use crate::domain::{iom, ImageClass, LesionAnnotation, RegionBag, RegionGeometry};
use crate::model::{forward, Abnormality, ForwardMode, ModelParams};
use crate::{Error, Mat, Result};

/// IoM threshold for a correct localization.
pub const LOCALIZATION_IOM: f64 = 0.5;

/// One evaluated image: image-level probabilities, per-region scores, and
/// the ground truth carried through for localization scoring.
#[derive(Clone, Debug)]
pub struct ScoredImage {
    pub image_id: String,
    pub p_m: f64,
    pub p_b: f64,
    pub true_class: ImageClass,
    /// m x 2 region scores, columns (benign, malignant).
    pub region_scores: Mat,
    pub geometry: Vec<RegionGeometry>,
    pub annotations: Vec<LesionAnnotation>,
}

/// Runs the model on one bag in inference mode.
pub fn score_bag(bag: &RegionBag, params: &ModelParams, dropout_keep: f64) -> Result<ScoredImage> {
    let trace = forward(bag, params, ForwardMode::Infer { dropout_keep })?;
    Ok(ScoredImage {
        image_id: bag.image_id.clone(),
        p_m: trace.p_malignant(),
        p_b: trace.p_benign(),
        true_class: bag.weak_label.class(),
        region_scores: trace.d_scores,
        geometry: bag.geometry.clone(),
        annotations: bag.annotations.clone(),
    })
}

pub fn score_dataset(
    bags: &[RegionBag],
    params: &ModelParams,
    dropout_keep: f64,
) -> Result<Vec<ScoredImage>> {
    bags.iter()
        .map(|b| score_bag(b, params, dropout_keep))
        .collect()
}

/// The two binary image classification tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Malignant against benign-or-normal, scored by p(y_M=1|x).
    MalignantVsRest,
    /// Any finding against normal, scored by max(p_M, p_B).
    AnyFindingVsNormal,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::MalignantVsRest, Task::AnyFindingVsNormal];

    pub fn name(self) -> &'static str {
        match self {
            Task::MalignantVsRest => "m-vs-bn",
            Task::AnyFindingVsNormal => "mb-vs-n",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "m-vs-bn" => Some(Task::MalignantVsRest),
            "mb-vs-n" => Some(Task::AnyFindingVsNormal),
            _ => None,
        }
    }
}

/// Score and binary label of one image under a task.
pub fn task_scores(scored: &ScoredImage, task: Task) -> (f64, bool) {
    match task {
        Task::MalignantVsRest => (
            scored.p_m,
            matches!(scored.true_class, ImageClass::M | ImageClass::MB),
        ),
        Task::AnyFindingVsNormal => (
            scored.p_m.max(scored.p_b),
            scored.true_class != ImageClass::N,
        ),
    }
}

pub fn task_score_set(scored: &[ScoredImage], task: Task) -> (Vec<f64>, Vec<bool>) {
    scored.iter().map(|s| task_scores(s, task)).unzip()
}

/// Probability that a random positive outscores a random negative, ties
/// counted half. Integer numerator, so the result matches brute-force
/// pair counting exactly.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let p = labels.iter().filter(|&&l| l).count() as u64;
    let n = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::Metric("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut num2 = 0u64; // 2 * concordant pairs + tied pairs
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut pos_group = 0u64;
        let mut neg_group = 0u64;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                pos_group += 1;
            } else {
                neg_group += 1;
            }
            j += 1;
        }
        num2 += 2 * pos_group * neg_below + pos_group * neg_group;
        neg_below += neg_group;
        i = j;
    }
    Ok(num2 as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveKind {
    Roc,
    Froc,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// Ordered operating points, thresholds strictly decreasing. For ROC
/// curves x is the false positive rate and y the sensitivity; for FROC
/// curves x is false positives per image.
#[derive(Clone, Debug)]
pub struct EvalCurve {
    pub kind: CurveKind,
    pub points: Vec<CurvePoint>,
}

/// ROC curve over unique score thresholds, descending, with a leading
/// all-negative point at threshold infinity.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<EvalCurve> {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let n = labels.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return Err(Error::Metric("ROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut points = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let threshold = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == threshold {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(CurvePoint {
            threshold,
            x: fp as f64 / n,
            y: tp as f64 / p,
        });
    }
    Ok(EvalCurve {
        kind: CurveKind::Roc,
        points,
    })
}

/// Partial-AUC ratio: the integral of specificity over the sensitivity
/// band, linearly interpolated, divided by the band width. One for a
/// perfect classifier, 1 - (lo+hi)/2 for the chance diagonal.
pub fn paucr(curve: &EvalCurve, sens_lo: f64, sens_hi: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&sens_lo) || !(0.0..=1.0).contains(&sens_hi) || sens_lo >= sens_hi {
        return Err(Error::Metric(format!(
            "bad sensitivity band [{sens_lo}, {sens_hi}]"
        )));
    }
    let mut integral = 0.0;
    for w in curve.points.windows(2) {
        let (y0, x0) = (w[0].y, w[0].x);
        let (y1, x1) = (w[1].y, w[1].x);
        if y1 <= y0 || y1 <= sens_lo || y0 >= sens_hi {
            continue;
        }
        let a = y0.max(sens_lo);
        let b = y1.min(sens_hi);
        let x_at = |s: f64| x0 + (s - y0) / (y1 - y0) * (x1 - x0);
        let spec_a = 1.0 - x_at(a);
        let spec_b = 1.0 - x_at(b);
        integral += (b - a) * 0.5 * (spec_a + spec_b);
    }
    Ok(integral / (sens_hi - sens_lo))
}

#[derive(Clone, Copy, Debug)]
pub struct SpecAtSens {
    pub specificity: f64,
    /// False when the curve never reaches the requested sensitivity (the
    /// specificity is then reported as zero).
    pub reachable: bool,
}

/// Specificity at a target sensitivity, linearly interpolated between the
/// surrounding operating points; exact hits take the highest-specificity
/// point at that sensitivity.
pub fn spec_at_sens(curve: &EvalCurve, sens: f64) -> SpecAtSens {
    for (i, pt) in curve.points.iter().enumerate() {
        if pt.y >= sens {
            if pt.y == sens || i == 0 {
                return SpecAtSens {
                    specificity: 1.0 - pt.x,
                    reachable: true,
                };
            }
            let prev = curve.points[i - 1];
            let t = (sens - prev.y) / (pt.y - prev.y);
            let x = prev.x + t * (pt.x - prev.x);
            return SpecAtSens {
                specificity: 1.0 - x,
                reachable: true,
            };
        }
    }
    SpecAtSens {
        specificity: 0.0,
        reachable: false,
    }
}

/// What the false-positive count is divided by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FppiDenominator {
    /// Every evaluated image (the default).
    AllImages,
    /// Only the images whose true class contains the target class.
    PositivesOnly,
}

fn class_of(cls: Abnormality, image: ImageClass) -> bool {
    match cls {
        Abnormality::Malignant => matches!(image, ImageClass::M | ImageClass::MB),
        Abnormality::Benign => matches!(image, ImageClass::B | ImageClass::MB),
    }
}

/// Free-response curve for one abnormality class. `thresholds` defaults to
/// every distinct region score, descending, after a leading point at
/// threshold infinity.
pub fn froc(
    scored: &[ScoredImage],
    cls: Abnormality,
    thresholds: Option<&[f64]>,
    denominator: FppiDenominator,
) -> Result<EvalCurve> {
    let lesion_cls = match cls {
        Abnormality::Malignant => crate::domain::LesionClass::Malignant,
        Abnormality::Benign => crate::domain::LesionClass::Benign,
    };
    let any_annotated = scored
        .iter()
        .any(|s| s.annotations.iter().any(|a| a.cls == lesion_cls));
    if !any_annotated {
        return Err(Error::Metric(format!(
            "no {:?} lesion annotations in the evaluated set",
            cls
        )));
    }

    let col = cls.det_col();
    let mut positives = 0u64;
    // best correct-firing score per positive image, and every score that
    // would fire as a false positive, across all images
    let mut hit_max: Vec<f64> = Vec::new();
    let mut fp_scores: Vec<f64> = Vec::new();
    let mut all_scores: Vec<f64> = Vec::new();
    for s in scored {
        let positive = class_of(cls, s.true_class);
        if positive {
            positives += 1;
        }
        let lesions: Vec<_> = s
            .annotations
            .iter()
            .filter(|a| a.cls == lesion_cls)
            .collect();
        let mut best = f64::NEG_INFINITY;
        for (i, g) in s.geometry.iter().enumerate() {
            let score = s.region_scores.get(i, col);
            all_scores.push(score);
            let localizes = lesions.iter().any(|a| {
                iom(&g.rect(), &a.rect)
                    .map(|v| v >= LOCALIZATION_IOM)
                    .unwrap_or(false)
            });
            if localizes {
                if score > best {
                    best = score;
                }
            } else {
                fp_scores.push(score);
            }
        }
        if positive {
            hit_max.push(best);
        }
    }
    if positives == 0 {
        return Err(Error::Metric("no positive images for the class".into()));
    }

    fp_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    hit_max.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let denom = match denominator {
        FppiDenominator::AllImages => scored.len() as f64,
        FppiDenominator::PositivesOnly => positives as f64,
    };

    let default_thresholds = thresholds.is_none();
    let mut levels: Vec<f64> = match thresholds {
        Some(t) => t.to_vec(),
        None => {
            all_scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
            all_scores.dedup();
            all_scores
        }
    };
    if !default_thresholds {
        levels.sort_by(|a, b| b.partial_cmp(a).unwrap());
        levels.dedup();
    }

    let count_at_least = |sorted: &[f64], threshold: f64| -> u64 {
        (sorted.len() - sorted.partition_point(|&v| v < threshold)) as u64
    };
    let mut points = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    for &threshold in &levels {
        if threshold == f64::INFINITY {
            continue;
        }
        let localized = count_at_least(&hit_max, threshold);
        let fp = count_at_least(&fp_scores, threshold);
        points.push(CurvePoint {
            threshold,
            x: fp as f64 / denom,
            y: localized as f64 / positives as f64,
        });
    }
    Ok(EvalCurve {
        kind: CurveKind::Froc,
        points,
    })
}

/// Sensitivity of a FROC curve at a false-positives-per-image budget,
/// linearly interpolated; saturates at the curve ends.
pub fn sens_at_fppi(curve: &EvalCurve, fppi: f64) -> f64 {
    let pts = &curve.points;
    if pts.is_empty() {
        return 0.0;
    }
    // last point not beyond the budget (among x ties this is the one with
    // the highest sensitivity)
    let mut below: Option<usize> = None;
    for (i, pt) in pts.iter().enumerate() {
        if pt.x <= fppi {
            below = Some(i);
        }
    }
    match below {
        None => pts[0].y,
        Some(i) if i + 1 == pts.len() => pts[i].y,
        Some(i) => {
            let (a, b) = (pts[i], pts[i + 1]);
            if b.x <= a.x {
                a.y
            } else {
                a.y + (fppi - a.x) / (b.x - a.x) * (b.y - a.y)
            }
        }
    }
}

/// Writes a curve as comma-separated text with a one-line header naming
/// the kind and task.
pub fn curve_to_string(curve: &EvalCurve, label: &str) -> String {
    let kind = match curve.kind {
        CurveKind::Roc => "ROC",
        CurveKind::Froc => "FROC",
    };
    let mut out = format!("# {kind} {label}\n");
    for pt in &curve.points {
        writeln!(out, "{},{},{}", pt.threshold, pt.x, pt.y).unwrap();
    }
    out
}

pub fn write_curve(curve: &EvalCurve, label: &str, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, curve_to_string(curve, label))?;
    Ok(())
}

/// Probability-plane rows: one image per line with both image-level
/// probabilities and the true class, for external plotting.
pub fn probability_plane_to_string(scored: &[ScoredImage]) -> String {
    let mut out = String::from("image_id,p_M,p_B,true_class\n");
    for s in scored {
        writeln!(
            out,
            "{},{},{},{}",
            s.image_id,
            s.p_m,
            s.p_b,
            s.true_class.name()
        )
        .unwrap();
    }
    out
}

pub fn probability_plane_export(scored: &[ScoredImage], path: impl AsRef<Path>) -> Result<()> {
    if scored.is_empty() {
        return Err(Error::Metric("empty scored set".into()));
    }
    std::fs::write(path, probability_plane_to_string(scored))?;
    Ok(())
}
