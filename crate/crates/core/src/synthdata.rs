//! Deterministic synthetic region-feature bags with planted lesions.
//!
//! Each image draws a class (normal, benign, malignant, or both), plants
//! one to three axis-aligned lesion boxes per present abnormality class,
//! and samples region features from isotropic unit noise around a class
//! mean: zero for background, `separation * e0` for benign regions and
//! `separation * e1` for malignant ones. A region takes an abnormal mean
//! exactly when it overlaps a planted lesion of that class with IoM at
//! least one half, malignant taking precedence, so the feature signal
//! matches the labeling rule used in training.
//!
//! The on-disk dataset format is line-oriented text:
//!
//! ```text
//! DMILDS v1 <feature_dim> <side> <stride>
//! IMG <id> <grid_rows> <grid_cols> <y_M> <y_B> <weak|full>
//! LES <M|B> <x_min> <y_min> <x_max> <y_max>      (zero or more)
//! <grid_rows x grid_cols lines of feature_dim floats>
//! ```
//!
//! Floats print in Rust's shortest round-trip form, so a read followed by
//! a write reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::domain::{
    build_grid, iom, LesionAnnotation, LesionClass, RegionBag, RegionGeometry, Supervision,
    WeakLabel,
};
use crate::rng::Prng;
use crate::{Error, Mat, Result};

/// Generator configuration.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub n_images: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub side: u32,
    pub stride: u32,
    pub feature_dim: usize,
    /// Proportions of (normal, benign-only, malignant-only, both).
    pub class_mix: [f64; 4],
    /// Distance between abnormal and background feature means, in units
    /// of the unit feature noise.
    pub separation: f64,
    /// Inclusive pixel range for lesion box edge lengths.
    pub lesion_size_range: (u32, u32),
    pub seed: u64,
    /// Fraction of malignant-containing images tagged fully supervised.
    pub full_ratio: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_images: 200,
            image_width: 896,
            image_height: 1344,
            side: 224,
            stride: 112,
            feature_dim: 128,
            class_mix: [0.40, 0.25, 0.25, 0.10],
            separation: 4.0,
            lesion_size_range: (64, 160),
            seed: 0,
            full_ratio: 0.0,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        let sum: f64 = self.class_mix.iter().sum();
        if self.class_mix.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "class mix must be non-negative and sum to 1, got {:?}",
                self.class_mix
            )));
        }
        if self.separation < 0.0 {
            return Err(Error::Config("separation must be non-negative".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature dim must be at least 2".into()));
        }
        let (lo, hi) = self.lesion_size_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad lesion size range ({lo}, {hi})")));
        }
        if hi > self.image_width || hi > self.image_height {
            return Err(Error::Config("lesions must fit inside the image".into()));
        }
        if !(0.0..=1.0).contains(&self.full_ratio) {
            return Err(Error::Config("full ratio must be in [0, 1]".into()));
        }
        Ok(())
    }
}

const COVERAGE_IOM: f64 = 0.5;
const PLACEMENT_RETRIES: usize = 200;

fn class_means(config: &GenConfig) -> (Vec<f64>, Vec<f64>) {
    let mut mu_b = vec![0.0; config.feature_dim];
    let mut mu_m = vec![0.0; config.feature_dim];
    mu_b[0] = config.separation;
    mu_m[1] = config.separation;
    (mu_b, mu_m)
}

/// Plants one lesion box that some grid region overlaps with IoM >= 0.5,
/// retrying positions and sizes a bounded number of times.
fn plant_lesion(
    config: &GenConfig,
    grid: &[RegionGeometry],
    rng: &mut Prng,
    cls: LesionClass,
) -> Result<LesionAnnotation> {
    let (lo, hi) = config.lesion_size_range;
    for _ in 0..PLACEMENT_RETRIES {
        let w = rng.range_u32(lo, hi);
        let h = rng.range_u32(lo, hi);
        let x0 = rng.range_u32(0, config.image_width - w);
        let y0 = rng.range_u32(0, config.image_height - h);
        let rect = crate::Rect::new(
            f64::from(x0),
            f64::from(y0),
            f64::from(x0 + w),
            f64::from(y0 + h),
        );
        let covered = grid.iter().any(|g| {
            iom(&g.rect(), &rect)
                .map(|v| v >= COVERAGE_IOM)
                .unwrap_or(false)
        });
        if covered {
            return Ok(LesionAnnotation { cls, rect });
        }
    }
    Err(Error::Generation(format!(
        "no placement with region overlap after {PLACEMENT_RETRIES} tries"
    )))
}

/// Generates the full bag list. Deterministic: equal configs produce
/// byte-identical datasets.
pub fn generate(config: &GenConfig) -> Result<Vec<RegionBag>> {
    config.validate()?;
    let grid = build_grid(
        config.image_width,
        config.image_height,
        config.side,
        config.stride,
    )?;
    let (mu_b, mu_m) = class_means(config);

    let mut bags = Vec::with_capacity(config.n_images);
    for idx in 0..config.n_images {
        let mut rng = Prng::stream(config.seed, "image", idx as u64);
        let draw = rng.next_f64();
        let mut acc = 0.0;
        let mut class = 3usize;
        for (c, &p) in config.class_mix.iter().enumerate() {
            acc += p;
            if draw < acc {
                class = c;
                break;
            }
        }
        let (has_b, has_m) = match class {
            0 => (false, false),
            1 => (true, false),
            2 => (false, true),
            _ => (true, true),
        };
        let mut annotations = Vec::new();
        if has_b {
            for _ in 0..rng.range_u32(1, 3) {
                annotations.push(plant_lesion(config, &grid, &mut rng, LesionClass::Benign)?);
            }
        }
        if has_m {
            for _ in 0..rng.range_u32(1, 3) {
                annotations.push(plant_lesion(
                    config,
                    &grid,
                    &mut rng,
                    LesionClass::Malignant,
                )?);
            }
        }

        let mut features = Mat::zeros(grid.len(), config.feature_dim);
        for (i, g) in grid.iter().enumerate() {
            let region = g.rect();
            let mut mean: Option<&[f64]> = None;
            for a in &annotations {
                if iom(&region, &a.rect)? >= COVERAGE_IOM {
                    match a.cls {
                        LesionClass::Malignant => {
                            mean = Some(&mu_m);
                            break;
                        }
                        LesionClass::Benign => mean = Some(&mu_b),
                    }
                }
            }
            let row = features.row_mut(i);
            for (d, v) in row.iter_mut().enumerate() {
                *v = mean.map_or(0.0, |m| m[d]) + rng.normal();
            }
        }

        bags.push(RegionBag {
            image_id: format!("img_{idx:06}"),
            features,
            geometry: grid.clone(),
            weak_label: WeakLabel::new(has_m, has_b),
            annotations,
            supervision: Supervision::Weak,
        });
    }

    tag_fully_supervised(&mut bags, config.full_ratio, config.seed);
    Ok(bags)
}

/// Tags a deterministic `ratio` fraction of the malignant-containing bags
/// as fully supervised (seeded shuffle, then rounded count).
pub fn tag_fully_supervised(bags: &mut [RegionBag], ratio: f64, seed: u64) {
    let mut malignant: Vec<usize> = bags
        .iter()
        .enumerate()
        .filter(|(_, b)| b.weak_label.y_m)
        .map(|(i, _)| i)
        .collect();
    let take = (ratio * malignant.len() as f64).round() as usize;
    let mut rng = Prng::stream(seed, "full-tag", 0);
    rng.shuffle(&mut malignant);
    for (rank, &idx) in malignant.iter().enumerate() {
        bags[idx].supervision = if rank < take {
            Supervision::Full
        } else {
            Supervision::Weak
        };
    }
}

/// Keeps a deterministic `ratio` fraction of the fully supervised bags
/// annotated and demotes the rest to weak supervision, emulating partial
/// annotation budgets on an annotated dataset. Ratio zero reproduces a
/// purely weak dataset.
pub fn downsample_full(bags: &mut [RegionBag], ratio: f64, seed: u64) {
    let mut full: Vec<usize> = bags
        .iter()
        .enumerate()
        .filter(|(_, b)| b.supervision == Supervision::Full)
        .map(|(i, _)| i)
        .collect();
    let keep = (ratio * full.len() as f64).round() as usize;
    let mut rng = Prng::stream(seed, "full-ratio-used", 0);
    rng.shuffle(&mut full);
    for &idx in full.iter().skip(keep) {
        bags[idx].supervision = Supervision::Weak;
    }
}

/// Serializes a dataset to the line-oriented text format.
pub fn dataset_to_string(bags: &[RegionBag]) -> Result<String> {
    let (feature_dim, side, stride) = match bags.first() {
        Some(b) => {
            let side = b.geometry[0].side;
            let stride = grid_stride(&b.geometry).unwrap_or(side);
            (b.feature_dim(), side, stride)
        }
        // header defaults for an empty dataset
        None => (GenConfig::default().feature_dim, 224, 112),
    };
    let mut out = String::new();
    writeln!(out, "DMILDS v1 {feature_dim} {side} {stride}").unwrap();
    for bag in bags {
        bag.validate()?;
        let rows = bag.geometry.iter().map(|g| g.row_index).max().unwrap() + 1;
        let cols = bag.geometry.iter().map(|g| g.col_index).max().unwrap() + 1;
        if (rows * cols) as usize != bag.m() {
            return Err(Error::Shape(format!(
                "bag {} is not a full {rows}x{cols} grid",
                bag.image_id
            )));
        }
        let sup = match bag.supervision {
            Supervision::Weak => "weak",
            Supervision::Full => "full",
        };
        writeln!(
            out,
            "IMG {} {rows} {cols} {} {} {sup}",
            bag.image_id,
            u8::from(bag.weak_label.y_m),
            u8::from(bag.weak_label.y_b),
        )
        .unwrap();
        for a in &bag.annotations {
            let cls = match a.cls {
                LesionClass::Malignant => "M",
                LesionClass::Benign => "B",
            };
            writeln!(
                out,
                "LES {cls} {} {} {} {}",
                a.rect.x_min, a.rect.y_min, a.rect.x_max, a.rect.y_max
            )
            .unwrap();
        }
        for i in 0..bag.m() {
            let row = bag.features.row(i);
            let mut line = String::new();
            for (d, v) in row.iter().enumerate() {
                if d > 0 {
                    line.push(' ');
                }
                write!(line, "{v}").unwrap();
            }
            out.push_str(&line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn grid_stride(geometry: &[RegionGeometry]) -> Option<u32> {
    geometry
        .iter()
        .find(|g| g.col_index == 1)
        .map(|g| g.x0)
        .or_else(|| geometry.iter().find(|g| g.row_index == 1).map(|g| g.y0))
}

pub fn write_dataset(bags: &[RegionBag], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset_to_string(bags)?)?;
    Ok(())
}

/// Parses the text format. Errors carry 1-based line numbers.
pub fn dataset_from_str(text: &str) -> Result<Vec<RegionBag>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 5 || head[0] != "DMILDS" || head[1] != "v1" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("bad header: {header}"),
        });
    }
    let feature_dim: usize = parse_field(head[2], 1, "feature dim")?;
    let side: u32 = parse_field(head[3], 1, "side")?;
    let stride: u32 = parse_field(head[4], 1, "stride")?;

    let mut bags = Vec::new();
    while let Some((idx, line)) = lines.next() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] != "IMG" {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected IMG record, found: {line}"),
            });
        }
        if fields.len() != 7 {
            return Err(Error::Parse {
                line: line_no,
                msg: "IMG record needs 6 fields".into(),
            });
        }
        let image_id = fields[1].to_string();
        let rows: u32 = parse_field(fields[2], line_no, "grid rows")?;
        let cols: u32 = parse_field(fields[3], line_no, "grid cols")?;
        let y_m = parse_binary(fields[4], line_no)?;
        let y_b = parse_binary(fields[5], line_no)?;
        let supervision = match fields[6] {
            "weak" => Supervision::Weak,
            "full" => Supervision::Full,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown supervision tag {other}"),
                })
            }
        };
        let width = (cols - 1) * stride + side;
        let height = (rows - 1) * stride + side;
        let geometry = build_grid(width, height, side, stride)?;
        let m = (rows * cols) as usize;

        let mut annotations = Vec::new();
        let mut features = Mat::zeros(m, feature_dim);
        let mut feature_row = 0usize;
        for (i, l) in lines.by_ref() {
            let line_no = i + 1;
            if l.starts_with("LES ") {
                if feature_row > 0 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("lesion after feature rows in image {image_id}"),
                    });
                }
                let f: Vec<&str> = l.split_whitespace().collect();
                if f.len() != 6 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "LES record needs 5 fields".into(),
                    });
                }
                let cls = match f[1] {
                    "M" => LesionClass::Malignant,
                    "B" => LesionClass::Benign,
                    other => {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("unknown lesion class {other}"),
                        })
                    }
                };
                annotations.push(LesionAnnotation {
                    cls,
                    rect: crate::Rect::new(
                        parse_field(f[2], line_no, "x_min")?,
                        parse_field(f[3], line_no, "y_min")?,
                        parse_field(f[4], line_no, "x_max")?,
                        parse_field(f[5], line_no, "y_max")?,
                    ),
                });
                continue;
            }
            if l.starts_with("IMG ") {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("image {image_id} has {feature_row} feature rows, expected {m}"),
                });
            }
            let values: Vec<&str> = l.split_whitespace().collect();
            if values.len() != feature_dim {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "feature row of image {image_id} has {} values, expected {feature_dim}",
                        values.len()
                    ),
                });
            }
            let row = features.row_mut(feature_row);
            for (slot, v) in row.iter_mut().zip(values) {
                *slot = v.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad float {v} in image {image_id}"),
                })?;
            }
            feature_row += 1;
            if feature_row == m {
                break;
            }
        }
        if feature_row != m {
            return Err(Error::Parse {
                line: text.lines().count(),
                msg: format!("image {image_id} has {feature_row} feature rows, expected {m}"),
            });
        }
        bags.push(RegionBag {
            image_id,
            features,
            geometry,
            weak_label: WeakLabel::new(y_m, y_b),
            annotations,
            supervision,
        });
    }
    Ok(bags)
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what}: {s}"),
    })
}

fn parse_binary(s: &str, line: usize) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse {
            line,
            msg: format!("expected 0 or 1, got {other}"),
        }),
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<RegionBag>> {
    let text = std::fs::read_to_string(path)?;
    dataset_from_str(&text)
}
