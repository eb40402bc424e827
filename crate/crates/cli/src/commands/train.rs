//! `dmil train`: train a variant on a dataset file and write a checkpoint
//! plus a per-epoch loss log.

use std::fmt::Write as _;

use dmil_core::{downsample_full, read_dataset, save_checkpoint, train};

use crate::commands::{dataset_summary, parse_variant, train_config_from, TRAIN_FLAGS};
use crate::config::{Args, FlagSpec};
use crate::CliError;

const OWN_FLAGS: [FlagSpec; 5] = [
    FlagSpec {
        name: "data",
        default: "",
        help: "training dataset path (required)",
    },
    FlagSpec {
        name: "out",
        default: "model.ckpt",
        help: "checkpoint output path",
    },
    FlagSpec {
        name: "loss-log",
        default: "",
        help: "loss log path (default <out>.loss.csv)",
    },
    FlagSpec {
        name: "seed",
        default: "0",
        help: "training seed",
    },
    FlagSpec {
        name: "full-ratio-used",
        default: "1",
        help: "fraction of available annotations kept",
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

pub fn run(argv: &[String]) -> Result<(), CliError> {
    let args = Args::parse("train", all_flags(), argv)?;
    let data_path = args.required_path("data")?;
    let seed = args.u64_value("seed")?;
    let ratio_used = args.f64_value("full-ratio-used")?;
    if !(0.0..=1.0).contains(&ratio_used) {
        return Err(CliError::Usage(
            "--full-ratio-used must be in [0, 1]".into(),
        ));
    }
    let config = train_config_from(&args, seed, parse_variant(&args)?)?;

    let mut bags = read_dataset(&data_path)?;
    if bags.is_empty() {
        return Err(CliError::Data(format!("{data_path} holds no images")));
    }
    downsample_full(&mut bags, ratio_used, seed);
    println!("training on {data_path}: {}", dataset_summary(&bags));

    let out = train(&bags, &config)?;
    let ckpt_path = args.required_path("out")?;
    save_checkpoint(&out.params, &ckpt_path)?;

    let loss_path = match args.str_value("loss-log") {
        p if p.is_empty() => format!("{ckpt_path}.loss.csv"),
        p => p,
    };
    let mut log = String::from("epoch,mean_loss\n");
    for (epoch, loss) in out.loss_history.iter().enumerate() {
        writeln!(log, "{},{loss}", epoch + 1).unwrap();
    }
    std::fs::write(&loss_path, log).map_err(dmil_core::Error::from)?;

    println!(
        "wrote {ckpt_path} ({} epochs, final mean loss {:.6}, loss log {loss_path})",
        out.loss_history.len(),
        out.loss_history.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}
