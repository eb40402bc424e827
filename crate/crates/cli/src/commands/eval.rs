//! `dmil eval`: score a dataset with a checkpoint and write the metric
//! report, ROC and FROC curve files, and the probability plane.

use std::fmt::Write as _;
use std::path::Path;

use dmil_core::{
    auroc, curve_to_string, froc, load_checkpoint, paucr, probability_plane_to_string,
    read_dataset, roc_curve, score_dataset, sens_at_fppi, spec_at_sens, task_score_set,
    Abnormality, EvalCurve, FppiDenominator, ScoredImage, Task,
};

use crate::commands::dataset_summary;
use crate::config::{Args, FlagSpec};
use crate::CliError;

const FLAGS: [FlagSpec; 6] = [
    FlagSpec {
        name: "data",
        default: "",
        help: "evaluation dataset path (required)",
    },
    FlagSpec {
        name: "checkpoint",
        default: "",
        help: "checkpoint path (required)",
    },
    FlagSpec {
        name: "out-dir",
        default: ".",
        help: "directory for reports and curves",
    },
    FlagSpec {
        name: "dropout-keep",
        default: "0.5",
        help: "keep probability used in training",
    },
    FlagSpec {
        name: "froc-op-sens",
        default: "0.85",
        help: "classifier sensitivity for the filtered FROC",
    },
    FlagSpec {
        name: "fppi-positives-only",
        default: "false",
        help: "divide false positives by positive images only",
    },
];

struct TaskMetrics {
    auroc: f64,
    paucr: f64,
    spec85: f64,
    spec90: f64,
    curve: EvalCurve,
}

fn task_metrics(scored: &[ScoredImage], task: Task) -> Result<TaskMetrics, CliError> {
    let (scores, labels) = task_score_set(scored, task);
    let curve = roc_curve(&scores, &labels)?;
    Ok(TaskMetrics {
        auroc: auroc(&scores, &labels)?,
        paucr: paucr(&curve, 0.8, 1.0)?,
        spec85: spec_at_sens(&curve, 0.85).specificity,
        spec90: spec_at_sens(&curve, 0.90).specificity,
        curve,
    })
}

pub fn run(argv: &[String]) -> Result<(), CliError> {
    let args = Args::parse("eval", &FLAGS, argv)?;
    let data_path = args.required_path("data")?;
    let ckpt_path = args.required_path("checkpoint")?;
    let out_dir = args.str_value("out-dir");
    let keep = args.f64_value("dropout-keep")?;
    let op_sens = args.f64_value("froc-op-sens")?;
    let denominator = if args.bool_value("fppi-positives-only")? {
        FppiDenominator::PositivesOnly
    } else {
        FppiDenominator::AllImages
    };

    let bags = read_dataset(&data_path)?;
    if bags.is_empty() {
        return Err(CliError::Data(format!("{data_path} holds no images")));
    }
    let params = load_checkpoint(&ckpt_path)?;
    if params.d_in() != bags[0].feature_dim() {
        return Err(CliError::Data(format!(
            "checkpoint expects {}-dim features but {data_path} has {}-dim",
            params.d_in(),
            bags[0].feature_dim()
        )));
    }
    std::fs::create_dir_all(&out_dir).map_err(dmil_core::Error::from)?;
    let out = |name: &str| Path::new(&out_dir).join(name);
    let write = |name: &str, text: &str| -> Result<(), CliError> {
        std::fs::write(out(name), text).map_err(dmil_core::Error::from)?;
        Ok(())
    };

    let scored = score_dataset(&bags, &params, keep)?;

    let mut report = format!(
        "dataset    {data_path}: {}\ncheckpoint {ckpt_path}: variant {}, k {}, {}x{} weights\n\n",
        dataset_summary(&bags),
        params.variant.name(),
        params.k,
        params.d_in(),
        params.d_h(),
    );
    let mut summary = String::from("task,auroc,paucr_080_100,spec_at_sens_085,spec_at_sens_090\n");
    report.push_str("task      AUROC    pAUCR[.8,1]  spec@.85  spec@.90\n");
    for task in Task::ALL {
        let m = task_metrics(&scored, task)?;
        writeln!(
            report,
            "{:<9} {:<8.4} {:<12.4} {:<9.4} {:<9.4}",
            task.name(),
            m.auroc,
            m.paucr,
            m.spec85,
            m.spec90
        )
        .unwrap();
        writeln!(
            summary,
            "{},{},{},{},{}",
            task.name(),
            m.auroc,
            m.paucr,
            m.spec85,
            m.spec90
        )
        .unwrap();
        write(
            &format!("roc_{}.csv", task.name().replace('-', "_")),
            &curve_to_string(&m.curve, task.name()),
        )?;
    }

    report.push('\n');
    for cls in Abnormality::ALL {
        let cls_name = match cls {
            Abnormality::Benign => "benign",
            Abnormality::Malignant => "malignant",
        };
        match froc(&scored, cls, None, denominator) {
            Ok(curve) => {
                writeln!(
                    report,
                    "FROC {cls_name:<10} sens@FPPI0.5 {:.4}  sens@FPPI1.0 {:.4}",
                    sens_at_fppi(&curve, 0.5),
                    sens_at_fppi(&curve, 1.0),
                )
                .unwrap();
                write(
                    &format!("froc_{cls_name}.csv"),
                    &curve_to_string(&curve, cls_name),
                )?;
            }
            Err(e) => {
                writeln!(report, "FROC {cls_name:<10} unavailable: {e}").unwrap();
            }
        }
        // the same curve restricted to images the classifier flags at the
        // requested operating point
        let task = match cls {
            Abnormality::Malignant => Task::MalignantVsRest,
            Abnormality::Benign => Task::AnyFindingVsNormal,
        };
        let (scores, labels) = task_score_set(&scored, task);
        if let Ok(roc) = roc_curve(&scores, &labels) {
            let threshold = roc
                .points
                .iter()
                .find(|p| p.y >= op_sens)
                .map(|p| p.threshold)
                .unwrap_or(0.0);
            let flagged: Vec<ScoredImage> = scored
                .iter()
                .zip(&scores)
                .filter(|(_, &s)| s >= threshold)
                .map(|(img, _)| img.clone())
                .collect();
            if let Ok(curve) = froc(&flagged, cls, None, denominator) {
                writeln!(
                    report,
                    "FROC {cls_name:<10} at OP sens {op_sens}: sens@FPPI0.5 {:.4} over {} flagged images",
                    sens_at_fppi(&curve, 0.5),
                    flagged.len(),
                )
                .unwrap();
                write(
                    &format!("froc_{cls_name}_op.csv"),
                    &curve_to_string(&curve, &format!("{cls_name} op{op_sens}")),
                )?;
            }
        }
    }

    write(
        "probability_plane.csv",
        &probability_plane_to_string(&scored),
    )?;
    write("metrics.csv", &summary)?;
    write("report.txt", &report)?;
    print!("{report}");
    println!("curves and reports written to {out_dir}");
    Ok(())
}
