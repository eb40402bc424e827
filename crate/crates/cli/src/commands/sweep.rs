//! `dmil sweep`: train and evaluate across annotation ratios, seeds, and
//! variants, emitting a comma-separated results table plus per-group
//! means.

use std::fmt::Write as _;

use dmil_core::{
    auroc, downsample_full, froc, paucr, read_dataset, roc_curve, score_dataset, sens_at_fppi,
    spec_at_sens, task_score_set, train, Abnormality, FppiDenominator, RegionBag, Task, Variant,
};

use crate::commands::{train_config_from, TRAIN_FLAGS};
use crate::config::{Args, FlagSpec};
use crate::CliError;

const OWN_FLAGS: [FlagSpec; 6] = [
    FlagSpec {
        name: "train",
        default: "",
        help: "training dataset path (required)",
    },
    FlagSpec {
        name: "test",
        default: "",
        help: "evaluation dataset path (required)",
    },
    FlagSpec {
        name: "out",
        default: "sweep.csv",
        help: "results table path",
    },
    FlagSpec {
        name: "ratios",
        default: "0,0.25,0.5,0.75,1.0",
        help: "annotation ratios",
    },
    FlagSpec {
        name: "seeds",
        default: "5",
        help: "number of seeds per cell",
    },
    FlagSpec {
        name: "seed",
        default: "0",
        help: "base seed",
    },
];

fn all_flags() -> &'static [FlagSpec] {
    static FLAGS: std::sync::OnceLock<Vec<FlagSpec>> = std::sync::OnceLock::new();
    FLAGS.get_or_init(|| {
        OWN_FLAGS
            .iter()
            .chain(TRAIN_FLAGS.iter())
            .map(|s| FlagSpec {
                name: s.name,
                default: s.default,
                help: s.help,
            })
            .collect()
    })
}

struct Row {
    variant: Variant,
    ratio: f64,
    seed: u64,
    auroc: f64,
    paucr: f64,
    spec85: f64,
    spec90: f64,
    froc_sens_05: f64,
}

fn run_cell(
    train_bags: &[RegionBag],
    test_bags: &[RegionBag],
    args: &Args,
    variant: Variant,
    ratio: f64,
    seed: u64,
) -> Result<Row, CliError> {
    let mut bags = train_bags.to_vec();
    downsample_full(&mut bags, ratio, seed);
    let config = train_config_from(args, seed, variant)?;
    let out = train(&bags, &config)?;
    let scored = score_dataset(test_bags, &out.params, config.dropout_keep)?;
    let (scores, labels) = task_score_set(&scored, Task::MalignantVsRest);
    let curve = roc_curve(&scores, &labels)?;
    let froc_curve = froc(
        &scored,
        Abnormality::Malignant,
        None,
        FppiDenominator::AllImages,
    )?;
    Ok(Row {
        variant,
        ratio,
        seed,
        auroc: auroc(&scores, &labels)?,
        paucr: paucr(&curve, 0.8, 1.0)?,
        spec85: spec_at_sens(&curve, 0.85).specificity,
        spec90: spec_at_sens(&curve, 0.90).specificity,
        froc_sens_05: sens_at_fppi(&froc_curve, 0.5),
    })
}

pub fn run(argv: &[String]) -> Result<(), CliError> {
    let args = Args::parse("sweep", all_flags(), argv)?;
    let train_path = args.required_path("train")?;
    let test_path = args.required_path("test")?;
    let out_path = args.required_path("out")?;
    let ratios = args.f64_list("ratios")?;
    let n_seeds = args.u64_value("seeds")?;
    let base_seed = args.u64_value("seed")?;
    let variants: Vec<Variant> = args
        .str_list("variant")
        .iter()
        .map(|s| Variant::parse(s).ok_or_else(|| CliError::Usage(format!("unknown variant {s}"))))
        .collect::<Result<_, _>>()?;
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(CliError::Usage("ratios must lie in [0, 1]".into()));
    }

    let train_bags = read_dataset(&train_path)?;
    let test_bags = read_dataset(&test_path)?;
    if train_bags.is_empty() || test_bags.is_empty() {
        return Err(CliError::Data("empty dataset".into()));
    }

    let header = "variant,ratio,seed,auroc,paucr_080_100,spec_at_sens_085,spec_at_sens_090,froc_sens_at_fppi_05";
    println!("{header}");
    let mut table = format!("{header}\n");
    let mut rows: Vec<Row> = Vec::new();
    for &variant in &variants {
        for &ratio in &ratios {
            for s in 0..n_seeds {
                let seed = base_seed + s;
                let row = run_cell(&train_bags, &test_bags, &args, variant, ratio, seed)?;
                let line = format!(
                    "{},{},{},{},{},{},{},{}",
                    row.variant.name(),
                    row.ratio,
                    row.seed,
                    row.auroc,
                    row.paucr,
                    row.spec85,
                    row.spec90,
                    row.froc_sens_05
                );
                println!("{line}");
                table.push_str(&line);
                table.push('\n');
                rows.push(row);
            }
        }
    }
    std::fs::write(&out_path, &table).map_err(dmil_core::Error::from)?;

    // per-(variant, ratio) means for the comparison table
    let mut summary =
        String::from("variant,ratio,mean_auroc,sd_auroc,mean_froc_sens_05,sd_froc_sens_05\n");
    for &variant in &variants {
        for &ratio in &ratios {
            let group: Vec<&Row> = rows
                .iter()
                .filter(|r| r.variant == variant && r.ratio == ratio)
                .collect();
            if group.is_empty() {
                continue;
            }
            let stats = |f: fn(&Row) -> f64| {
                let n = group.len() as f64;
                let mean = group.iter().map(|r| f(r)).sum::<f64>() / n;
                let var = if group.len() > 1 {
                    group.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                (mean, var.sqrt())
            };
            let (ma, sa) = stats(|r| r.auroc);
            let (mf, sf) = stats(|r| r.froc_sens_05);
            writeln!(summary, "{},{ratio},{ma},{sa},{mf},{sf}", variant.name()).unwrap();
        }
    }
    let summary_path = match out_path.strip_suffix(".csv") {
        Some(base) => format!("{base}_summary.csv"),
        None => format!("{out_path}_summary"),
    };
    std::fs::write(&summary_path, &summary).map_err(dmil_core::Error::from)?;
    println!("wrote {out_path} and {summary_path}");
    Ok(())
}
