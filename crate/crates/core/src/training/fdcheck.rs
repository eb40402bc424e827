//! Central finite differences as an independent gradient oracle.
//!
//! Every loss evaluation replays the selection masks of one reference
//! forward pass and runs without dropout, so the probed function is the
//! same piecewise-smooth function the analytical backward differentiates.

use std::collections::BTreeMap;

use crate::domain::{build_grid, RegionBag, RegionLabel, Supervision, WeakLabel};
use crate::model::{ModelParams, Variant};
use crate::objectives::{LossWeights, SupervisionSplit};
use crate::rng::Prng;
use crate::training::grad::{
    backward_on_traces, batch_loss_frozen, frozen_masks, GradientBundle, TrainItem,
};
use crate::{Mat, Result};

/// Central difference gradient of an arbitrary scalar function of the
/// parameters.
pub fn fd_gradient(
    params: &ModelParams,
    step: f64,
    mut loss: impl FnMut(&ModelParams) -> Result<f64>,
) -> Result<GradientBundle> {
    assert!(step > 0.0);
    let mut work = params.clone();
    let mut grads = GradientBundle::zeros_like(params);
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].1.len();
        for j in 0..len {
            let original = work.tensors()[ti].1[j];
            work.tensors_mut()[ti].1[j] = original + step;
            let up = loss(&work)?;
            work.tensors_mut()[ti].1[j] = original - step;
            let down = loss(&work)?;
            work.tensors_mut()[ti].1[j] = original;
            grads.tensors_mut()[ti].1[j] = (up - down) / (2.0 * step);
        }
    }
    Ok(grads)
}

/// Finite difference gradient of the batch loss with the selection masks
/// frozen from one forward pass at the unperturbed parameters.
pub fn finite_difference_oracle(
    items: &[TrainItem],
    params: &ModelParams,
    split: &SupervisionSplit,
    weights: &LossWeights,
    l2_coefficient: f64,
    step: f64,
) -> Result<GradientBundle> {
    let masks = frozen_masks(items, params)?;
    fd_gradient(params, step, |p| {
        batch_loss_frozen(items, p, split, weights, l2_coefficient, &masks)
    })
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub n_configs: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: negates one analytical coordinate so the detector can be
    /// shown to catch a wrong gradient.
    pub inject_sign_flip: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            n_configs: 120,
            seed: 20_240_001,
            step: 1e-4,
            tolerance: 1e-5,
            inject_sign_flip: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub configs_run: usize,
    /// Worst relative error seen per parameter tensor.
    pub worst_by_tensor: BTreeMap<&'static str, f64>,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Copy)]
enum SplitKind {
    WeakOnly,
    Semi,
    FullyAnnotated,
}

struct CheckCase {
    params: ModelParams,
    bags: Vec<RegionBag>,
    labels: Vec<Option<Vec<RegionLabel>>>,
}

/// One random small configuration. Pre-activations too close to the ReLU
/// kink (within ten steps) are resampled so the central differences stay
/// inside one smooth piece.
fn sample_case(rng: &mut Prng, variant: Variant, split: SplitKind, step: f64) -> CheckCase {
    'resample: loop {
        let d_in = 3 + rng.below(4) as usize;
        let d_h = 3 + rng.below(3) as usize;
        let k = 1 + rng.below(3) as usize;
        let n_items = 2 + rng.below(2) as usize;
        let mut params = ModelParams::zeros(variant, k, d_in, d_h);
        for (_, t) in params.tensors_mut() {
            for v in t {
                *v = 0.6 * rng.normal();
            }
        }
        let mut bags = Vec::new();
        let mut labels: Vec<Option<Vec<RegionLabel>>> = Vec::new();
        for item_idx in 0..n_items {
            let m = 2 + rng.below(5) as usize;
            let features = Mat::from_fn(m, d_in, |_, _| rng.normal());
            let annotated = match split {
                SplitKind::WeakOnly => false,
                // keep at least one weak image so the split stays valid
                SplitKind::Semi => item_idx == 0,
                SplitKind::FullyAnnotated => item_idx + 1 < n_items,
            };
            let weak = WeakLabel::new(annotated || rng.bernoulli(0.5), rng.bernoulli(0.5));
            let side = 32;
            let stride = 16;
            let geometry =
                build_grid(stride * m as u32 + side, side, side, stride).unwrap()[..m].to_vec();
            bags.push(RegionBag {
                image_id: format!("chk{item_idx}"),
                features,
                geometry,
                weak_label: weak,
                annotations: vec![],
                supervision: if annotated {
                    Supervision::Full
                } else {
                    Supervision::Weak
                },
            });
            labels.push(if annotated {
                Some(
                    (0..m)
                        .map(|_| match rng.below(10) {
                            0..=3 => RegionLabel::Malignant,
                            4..=7 => RegionLabel::BenignOrNormal,
                            _ => RegionLabel::Ignored,
                        })
                        .collect(),
                )
            } else {
                None
            });
        }
        // reject configurations with a pre-activation near the ReLU kink
        let margin = 10.0 * step;
        for the_bag in &bags {
            for i in 0..the_bag.m() {
                let x = the_bag.features.row(i);
                for j in 0..params.d_h() {
                    let mut a = params.shared_b[j];
                    for (av, &xv) in x.iter().enumerate() {
                        a += xv * params.shared_w.get(av, j);
                    }
                    if a.abs() < margin {
                        continue 'resample;
                    }
                }
            }
        }
        return CheckCase {
            params,
            bags,
            labels,
        };
    }
}

/// Compares analytical gradients against central finite differences over
/// randomized configurations that cycle through all variants and all
/// supervision split kinds.
pub fn gradient_check_suite(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = Prng::stream(cfg.seed, "gradcheck", 0);
    let mut worst_by_tensor: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let kinds = [
        SplitKind::WeakOnly,
        SplitKind::Semi,
        SplitKind::FullyAnnotated,
    ];
    for idx in 0..cfg.n_configs {
        let variant = Variant::ALL[idx % Variant::ALL.len()];
        let kind = kinds[(idx / Variant::ALL.len()) % kinds.len()];
        let case = sample_case(&mut rng, variant, kind, cfg.step);
        let items: Vec<TrainItem> = case
            .bags
            .iter()
            .zip(&case.labels)
            .map(|(bag, labels)| TrainItem {
                bag,
                labels: labels.as_deref(),
            })
            .collect();
        let split = split_of(&items);
        let weights = LossWeights::new(1.0, 1.0, split.m_f);
        let l2 = 1e-3;

        let masks = frozen_masks(&items, &case.params)?;
        let traces: Vec<_> = items
            .iter()
            .zip(&masks)
            .map(|(item, mask)| {
                crate::model::forward_frozen(&item.bag.features, &case.params, mask)
            })
            .collect::<Result<_>>()?;
        let (_, mut analytic) =
            backward_on_traces(&items, &traces, &case.params, &split, &weights, l2)?;
        if cfg.inject_sign_flip && idx == 0 {
            let t = analytic.tensors_mut();
            // flip the first nonzero coordinate
            for (_, slice) in t {
                if let Some(v) = slice.iter_mut().find(|v| v.abs() > 1e-6) {
                    *v = -*v;
                    break;
                }
            }
        }
        let numeric = fd_gradient(&case.params, cfg.step, |p| {
            batch_loss_frozen(&items, p, &split, &weights, l2, &masks)
        })?;

        for ((name, a), (_, f)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
            for (ci, (&av, &fv)) in a.iter().zip(f).enumerate() {
                let denom = av.abs().max(fv.abs());
                if denom <= 1e-8 {
                    continue;
                }
                let rel = (av - fv).abs() / denom;
                let entry = worst_by_tensor.entry(name).or_insert(0.0);
                if rel > *entry {
                    *entry = rel;
                }
                if rel > worst {
                    worst = rel;
                }
                if rel > cfg.tolerance {
                    failures.push(format!(
                        "config {idx} ({} / {}) tensor {name}[{ci}]: analytic {av:.3e} vs fd {fv:.3e} (rel {rel:.3e})",
                        variant.name(),
                        kind_name(kind),
                    ));
                }
            }
        }
    }
    Ok(GradCheckReport {
        configs_run: cfg.n_configs,
        worst_by_tensor,
        worst,
        failures,
    })
}

fn kind_name(kind: SplitKind) -> &'static str {
    match kind {
        SplitKind::WeakOnly => "weak",
        SplitKind::Semi => "semi",
        SplitKind::FullyAnnotated => "full",
    }
}

fn split_of(items: &[TrainItem]) -> SupervisionSplit {
    let mut split = SupervisionSplit {
        n: items.len(),
        ..Default::default()
    };
    for (t, item) in items.iter().enumerate() {
        match item.labels {
            Some(labels) => {
                split.full_indices.push(t);
                split.m_f += labels
                    .iter()
                    .filter(|l| **l != RegionLabel::Ignored)
                    .count();
            }
            None => split.weak_indices.push(t),
        }
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_recovers_the_gradient_of_a_quadratic() {
        let mut rng = Prng::from_seed(4);
        let mut params = ModelParams::zeros(Variant::ClsDet, 2, 3, 2);
        for (_, t) in params.tensors_mut() {
            for v in t {
                *v = rng.normal();
            }
        }
        let grads = fd_gradient(&params, 1e-4, |p| {
            Ok(0.5
                * p.tensors()
                    .iter()
                    .flat_map(|(_, t)| t.iter())
                    .map(|v| v * v)
                    .sum::<f64>())
        })
        .unwrap();
        for ((_, g), (_, p)) in grads.tensors().into_iter().zip(params.tensors()) {
            for (&gv, &pv) in g.iter().zip(p) {
                assert!((gv - pv).abs() < 1e-8, "{gv} vs {pv}");
            }
        }
    }

    #[test]
    fn small_suite_passes() {
        let cfg = GradCheckConfig {
            n_configs: 24,
            ..GradCheckConfig::default()
        };
        let report = gradient_check_suite(&cfg).unwrap();
        assert!(report.passed(), "failures: {:?}", report.failures);
        assert!(report.worst <= cfg.tolerance);
        assert!(report.worst_by_tensor.contains_key("shared_w"));
    }

    #[test]
    fn injected_sign_flip_is_detected() {
        let cfg = GradCheckConfig {
            n_configs: 4,
            inject_sign_flip: true,
            ..GradCheckConfig::default()
        };
        let report = gradient_check_suite(&cfg).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn frozen_masks_survive_a_selection_flip() {
        use crate::domain::{build_grid, Supervision, WeakLabel};
        use crate::Mat;

        // two regions, top-1 selection; flipping the sign of the malignant
        // classifier weight reverses the top-1 choice, so a loss evaluated
        // with replayed masks must differ from one with recomputed masks
        let mut params = ModelParams::zeros(Variant::ClsDetRs, 1, 1, 1);
        params.shared_w.set(0, 0, 1.0);
        params.cls_w.set(2, 0, 0.5);
        params.det_w.as_mut().unwrap().set(1, 0, 1.3);
        let bag = RegionBag {
            image_id: "flip".into(),
            features: Mat::from_rows(&[vec![0.5], vec![1.5]]),
            geometry: build_grid(48, 32, 32, 16).unwrap()[..2].to_vec(),
            weak_label: WeakLabel::new(true, false),
            annotations: vec![],
            supervision: Supervision::Weak,
        };
        let items = [TrainItem {
            bag: &bag,
            labels: None,
        }];
        let split = split_of(&items);
        let weights = LossWeights::default();

        let masks_base = frozen_masks(&items, &params).unwrap();
        let mut flipped = params.clone();
        flipped.cls_w.set(2, 0, -0.5);
        let masks_flipped = frozen_masks(&items, &flipped).unwrap();
        assert_ne!(
            masks_base, masks_flipped,
            "the flip must change the top-1 choice"
        );

        let replayed =
            batch_loss_frozen(&items, &flipped, &split, &weights, 0.0, &masks_base).unwrap();
        let recomputed =
            batch_loss_frozen(&items, &flipped, &split, &weights, 0.0, &masks_flipped).unwrap();
        assert!(
            (replayed - recomputed).abs() > 1e-6,
            "replaying the reference masks must probe a different loss ({replayed} vs {recomputed})"
        );
    }

    #[test]
    fn halving_the_step_shrinks_truncation_error_quadratically() {
        // probe a single smooth coordinate with deliberately large steps so
        // truncation dominates round-off
        let mut rng = Prng::from_seed(99);
        let mut params = ModelParams::zeros(Variant::ClsDet, 2, 3, 3);
        for (_, t) in params.tensors_mut() {
            for v in t {
                *v = 0.8 * rng.normal();
            }
        }
        let loss = |p: &ModelParams| {
            // smooth nonquadratic scalar of the first weight
            let w = p.shared_w.get(0, 0);
            Ok((1.0 + w * w).ln() + (0.7 * w).sin())
        };
        let exact = {
            let w = params.shared_w.get(0, 0);
            2.0 * w / (1.0 + w * w) + 0.7 * (0.7 * w).cos()
        };
        let err_at = |h: f64| {
            let g = fd_gradient(&params, h, loss).unwrap();
            (g.shared_w.get(0, 0) - exact).abs()
        };
        let coarse = err_at(1e-2);
        let fine = err_at(5e-3);
        let ratio = coarse / fine;
        assert!(
            (2.5..6.0).contains(&ratio),
            "ratio {ratio} (coarse {coarse}, fine {fine})"
        );
    }
}
