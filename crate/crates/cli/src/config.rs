//! Flag and configuration handling.
//!
//! Every flag has a default. A `--config PATH` file supplies key=value
//! overrides of the defaults, and command-line flags override the file.
//! `--dump-config PATH` writes the merged configuration back out as a
//! sorted key=value file, so a run can always be reproduced from its own
//! dump.

use std::collections::BTreeMap;

use crate::CliError;

pub struct FlagSpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const SHARED_FLAGS: [FlagSpec; 2] = [
    FlagSpec {
        name: "config",
        default: "",
        help: "key=value file applied before flags",
    },
    FlagSpec {
        name: "dump-config",
        default: "",
        help: "write the effective configuration here",
    },
];

pub struct Args {
    command: &'static str,
    values: BTreeMap<String, String>,
}

impl Args {
    /// Parses argv against the flag specs, applies a config file when one
    /// is named, and honors `--dump-config`.
    pub fn parse(
        command: &'static str,
        specs: &'static [FlagSpec],
        argv: &[String],
    ) -> Result<Args, CliError> {
        if argv.iter().any(|a| a == "--help" || a == "-h") {
            let mut help = format!("usage: dmil {command} [--flag value ...]\n");
            for s in specs.iter().chain(SHARED_FLAGS.iter()) {
                let default = if s.default.is_empty() {
                    String::new()
                } else {
                    format!(" (default {})", s.default)
                };
                help.push_str(&format!("  --{:<18} {}{default}\n", s.name, s.help));
            }
            print!("{help}");
            std::process::exit(0);
        }

        let known = |name: &str| {
            specs
                .iter()
                .chain(SHARED_FLAGS.iter())
                .any(|s| s.name == name)
        };
        let mut from_flags: BTreeMap<String, String> = BTreeMap::new();
        let mut it = argv.iter();
        while let Some(arg) = it.next() {
            let Some(stripped) = arg.strip_prefix("--") else {
                return Err(CliError::Usage(format!("unexpected argument {arg}")));
            };
            let (name, value) = match stripped.split_once('=') {
                Some((n, v)) => (n.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| {
                        CliError::Usage(format!("flag --{stripped} needs a value"))
                    })?;
                    (stripped.to_string(), v.clone())
                }
            };
            if !known(&name) {
                return Err(CliError::Usage(format!(
                    "unknown flag --{name} for dmil {command}"
                )));
            }
            from_flags.insert(name, value);
        }

        // defaults, then config file, then flags
        let mut values: BTreeMap<String, String> = specs
            .iter()
            .map(|s| (s.name.to_string(), s.default.to_string()))
            .collect();
        if let Some(path) = from_flags.get("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("cannot read config {path}: {e}")))?;
            for (line_no, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Data(format!("{path}:{}: expected key=value", line_no + 1))
                })?;
                let (k, v) = (k.trim(), v.trim());
                if !known(k) || k == "config" || k == "dump-config" {
                    return Err(CliError::Data(format!(
                        "{path}:{}: unknown key {k}",
                        line_no + 1
                    )));
                }
                values.insert(k.to_string(), v.to_string());
            }
        }
        for (k, v) in &from_flags {
            if k != "config" && k != "dump-config" {
                values.insert(k.clone(), v.clone());
            }
        }

        if let Some(path) = from_flags.get("dump-config") {
            let mut dump = String::new();
            for (k, v) in &values {
                dump.push_str(&format!("{k}={v}\n"));
            }
            std::fs::write(path, dump)
                .map_err(|e| CliError::Data(format!("cannot write {path}: {e}")))?;
        }
        Ok(Args { command, values })
    }

    fn raw(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("flag {name} not declared for {}", self.command))
    }

    pub fn str_value(&self, name: &str) -> String {
        self.raw(name).to_string()
    }

    pub fn required_path(&self, name: &str) -> Result<String, CliError> {
        let v = self.raw(name);
        if v.is_empty() {
            return Err(CliError::Usage(format!(
                "dmil {}: --{name} is required",
                self.command
            )));
        }
        Ok(v.to_string())
    }

    pub fn u64_value(&self, name: &str) -> Result<u64, CliError> {
        self.parse_with(name, str::parse::<u64>)
    }

    pub fn usize_value(&self, name: &str) -> Result<usize, CliError> {
        self.parse_with(name, str::parse::<usize>)
    }

    pub fn u32_value(&self, name: &str) -> Result<u32, CliError> {
        self.parse_with(name, str::parse::<u32>)
    }

    pub fn f64_value(&self, name: &str) -> Result<f64, CliError> {
        self.parse_with(name, str::parse::<f64>)
    }

    pub fn bool_value(&self, name: &str) -> Result<bool, CliError> {
        match self.raw(name) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(CliError::Usage(format!(
                "flag --{name}: expected a boolean, got {other}"
            ))),
        }
    }

    /// Comma-separated list of floats.
    pub fn f64_list(&self, name: &str) -> Result<Vec<f64>, CliError> {
        self.raw(name)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("flag --{name}: bad number {s}")))
            })
            .collect()
    }

    pub fn str_list(&self, name: &str) -> Vec<String> {
        self.raw(name)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    fn parse_with<T, E>(
        &self,
        name: &str,
        f: impl Fn(&str) -> Result<T, E>,
    ) -> Result<T, CliError> {
        f(self.raw(name)).map_err(|_| {
            CliError::Usage(format!(
                "flag --{name}: cannot parse value {}",
                self.raw(name)
            ))
        })
    }
}
