//! `dmil gradcheck`: compare analytical gradients against central finite
//! differences across variants and supervision splits.

use dmil_core::{gradient_check_suite, GradCheckConfig};

use crate::config::{Args, FlagSpec};
use crate::CliError;

const FLAGS: [FlagSpec; 5] = [
    FlagSpec {
        name: "configs",
        default: "120",
        help: "number of random configurations",
    },
    FlagSpec {
        name: "seed",
        default: "20240001",
        help: "suite seed",
    },
    FlagSpec {
        name: "step",
        default: "0.0001",
        help: "finite difference step",
    },
    FlagSpec {
        name: "tolerance",
        default: "0.00001",
        help: "max relative error",
    },
    FlagSpec {
        name: "inject-sign-flip",
        default: "false",
        help: "test hook: corrupt one gradient",
    },
];

pub fn run(argv: &[String]) -> Result<(), CliError> {
    let args = Args::parse("gradcheck", &FLAGS, argv)?;
    let cfg = GradCheckConfig {
        n_configs: args.usize_value("configs")?,
        seed: args.u64_value("seed")?,
        step: args.f64_value("step")?,
        tolerance: args.f64_value("tolerance")?,
        inject_sign_flip: args.bool_value("inject-sign-flip")?,
    };
    let report = gradient_check_suite(&cfg)?;
    println!(
        "checked {} configurations (step {}, tolerance {})",
        report.configs_run, cfg.step, cfg.tolerance
    );
    println!("worst relative error per tensor:");
    for (tensor, err) in &report.worst_by_tensor {
        println!("  {tensor:<10} {err:.3e}");
    }
    if report.passed() {
        println!("gradcheck PASS (worst {:.3e})", report.worst);
        Ok(())
    } else {
        for f in report.failures.iter().take(10) {
            eprintln!("mismatch: {f}");
        }
        Err(CliError::CheckFailed(format!(
            "{} coordinate(s) exceeded the tolerance, worst {:.3e}",
            report.failures.len(),
            report.worst
        )))
    }
}
