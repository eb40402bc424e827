//! `dmil generate`: write a seeded synthetic dataset.

use dmil_core::{generate, write_dataset, GenConfig};

use crate::commands::dataset_summary;
use crate::config::{Args, FlagSpec};
use crate::CliError;

const FLAGS: [FlagSpec; 12] = [
    FlagSpec {
        name: "out",
        default: "dataset.dmil",
        help: "output dataset path",
    },
    FlagSpec {
        name: "n",
        default: "200",
        help: "number of images",
    },
    FlagSpec {
        name: "seed",
        default: "0",
        help: "base seed",
    },
    FlagSpec {
        name: "width",
        default: "896",
        help: "image width in pixels",
    },
    FlagSpec {
        name: "height",
        default: "1344",
        help: "image height in pixels",
    },
    FlagSpec {
        name: "side",
        default: "224",
        help: "region side in pixels",
    },
    FlagSpec {
        name: "stride",
        default: "112",
        help: "grid stride in pixels",
    },
    FlagSpec {
        name: "feature-dim",
        default: "128",
        help: "region feature dimension",
    },
    FlagSpec {
        name: "class-mix",
        default: "0.4,0.25,0.25,0.1",
        help: "proportions of N,B,M,MB (normalized)",
    },
    FlagSpec {
        name: "separation",
        default: "4",
        help: "class-mean distance in noise units",
    },
    FlagSpec {
        name: "lesion-size",
        default: "64,160",
        help: "min,max lesion edge in pixels",
    },
    FlagSpec {
        name: "full-ratio",
        default: "0",
        help: "fraction of malignant images tagged fully supervised",
    },
];

pub fn run(argv: &[String]) -> Result<(), CliError> {
    let args = Args::parse("generate", &FLAGS, argv)?;
    let mix = args.f64_list("class-mix")?;
    if mix.len() != 4 || mix.iter().any(|&p| p < 0.0) || mix.iter().sum::<f64>() <= 0.0 {
        return Err(CliError::Usage(
            "--class-mix needs four non-negative proportions".into(),
        ));
    }
    let total: f64 = mix.iter().sum();
    let class_mix = [
        mix[0] / total,
        mix[1] / total,
        mix[2] / total,
        mix[3] / total,
    ];
    let lesion = args.f64_list("lesion-size")?;
    if lesion.len() != 2 {
        return Err(CliError::Usage("--lesion-size needs min,max".into()));
    }

    let config = GenConfig {
        n_images: args.usize_value("n")?,
        image_width: args.u32_value("width")?,
        image_height: args.u32_value("height")?,
        side: args.u32_value("side")?,
        stride: args.u32_value("stride")?,
        feature_dim: args.usize_value("feature-dim")?,
        class_mix,
        separation: args.f64_value("separation")?,
        lesion_size_range: (lesion[0] as u32, lesion[1] as u32),
        seed: args.u64_value("seed")?,
        full_ratio: args.f64_value("full-ratio")?,
    };
    let bags = generate(&config)?;
    let out = args.required_path("out")?;
    write_dataset(&bags, &out)?;
    println!("wrote {out}: {}", dataset_summary(&bags));
    Ok(())
}
