//! Core data types: region grids, bags, lesion annotations, and the
//! overlap rule that turns lesion boxes into per-region labels.
//!
//! Rectangles are half-open `[x_min, x_max) x [y_min, y_max)` so adjacent
//! grid cells share no pixel and intersection areas are exact.

use crate::{Error, Mat, Result};

/// Axis-aligned rectangle in pixel coordinates, half-open on both axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.intersection_area(other) > 0.0
    }
}

/// One square cell of the overlapping region grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionGeometry {
    pub row_index: u32,
    pub col_index: u32,
    pub x0: u32,
    pub y0: u32,
    pub side: u32,
}

impl RegionGeometry {
    pub fn rect(&self) -> Rect {
        Rect::new(
            f64::from(self.x0),
            f64::from(self.y0),
            f64::from(self.x0 + self.side),
            f64::from(self.y0 + self.side),
        )
    }
}

/// Image-level label: whether the image contains a malignant and/or a
/// benign finding. `(0,0)` is a normal image, `(1,1)` has both.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeakLabel {
    pub y_m: bool,
    pub y_b: bool,
}

impl WeakLabel {
    pub fn new(y_m: bool, y_b: bool) -> Self {
        Self { y_m, y_b }
    }

    pub fn class(&self) -> ImageClass {
        match (self.y_m, self.y_b) {
            (false, false) => ImageClass::N,
            (false, true) => ImageClass::B,
            (true, false) => ImageClass::M,
            (true, true) => ImageClass::MB,
        }
    }
}

/// The four image classes used for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImageClass {
    N,
    B,
    M,
    MB,
}

impl ImageClass {
    pub fn name(&self) -> &'static str {
        match self {
            ImageClass::N => "N",
            ImageClass::B => "B",
            ImageClass::M => "M",
            ImageClass::MB => "MB",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "N" => Some(ImageClass::N),
            "B" => Some(ImageClass::B),
            "M" => Some(ImageClass::M),
            "MB" => Some(ImageClass::MB),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LesionClass {
    Malignant,
    Benign,
}

/// A ground-truth lesion box with its class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionAnnotation {
    pub cls: LesionClass,
    pub rect: Rect,
}

/// Per-region training label derived from lesion overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionLabel {
    /// Overlaps a malignant lesion with IoM at or above the threshold.
    Malignant,
    /// Disjoint from every malignant lesion (may overlap benign ones).
    BenignOrNormal,
    /// Touches a malignant lesion below the threshold; excluded from
    /// supervised sums.
    Ignored,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Supervision {
    Weak,
    Full,
}

/// One image as an ordered bag of region feature vectors.
#[derive(Clone, Debug)]
pub struct RegionBag {
    pub image_id: String,
    /// m x d feature matrix, one row per region.
    pub features: Mat,
    pub geometry: Vec<RegionGeometry>,
    pub weak_label: WeakLabel,
    pub annotations: Vec<LesionAnnotation>,
    pub supervision: Supervision,
}

impl RegionBag {
    /// Number of regions in the bag.
    pub fn m(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m() == 0 {
            return Err(Error::Shape(format!(
                "bag {} has no regions",
                self.image_id
            )));
        }
        if self.geometry.len() != self.m() {
            return Err(Error::Shape(format!(
                "bag {}: {} geometry entries for {} regions",
                self.image_id,
                self.geometry.len(),
                self.m()
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite {
                tensor: format!("features of {}", self.image_id),
            });
        }
        Ok(())
    }

    pub fn malignant_lesions(&self) -> impl Iterator<Item = &LesionAnnotation> {
        self.annotations
            .iter()
            .filter(|a| a.cls == LesionClass::Malignant)
    }
}

/// All grid positions whose square fits entirely inside the image, in
/// row-major order. The grid overlaps itself whenever `stride < side`.
pub fn build_grid(
    image_width: u32,
    image_height: u32,
    side: u32,
    stride: u32,
) -> Result<Vec<RegionGeometry>> {
    assert!(stride > 0, "stride must be positive");
    assert!(side > 0, "side must be positive");
    if side > image_width || side > image_height {
        return Err(Error::EmptyGrid {
            width: image_width,
            height: image_height,
            side,
        });
    }
    let cols = (image_width - side) / stride + 1;
    let rows = (image_height - side) / stride + 1;
    let mut grid = Vec::with_capacity((rows * cols) as usize);
    for row in 0..rows {
        for col in 0..cols {
            grid.push(RegionGeometry {
                row_index: row,
                col_index: col,
                x0: col * stride,
                y0: row * stride,
                side,
            });
        }
    }
    Ok(grid)
}

/// Intersection over minimum: intersection area divided by the smaller of
/// the two rectangle areas. Always in [0, 1]; equals 1 whenever one
/// rectangle contains the other.
pub fn iom(a: &Rect, b: &Rect) -> Result<f64> {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return Err(Error::ZeroAreaRect);
    }
    Ok(a.intersection_area(b) / area_a.min(area_b))
}

/// Labels every region of a fully annotated bag against its malignant
/// lesions: `Malignant` when some malignant lesion has IoM >= alpha,
/// `BenignOrNormal` when the region is disjoint from all of them, and
/// `Ignored` in between. Benign lesions never produce malignant labels.
pub fn label_regions(bag: &RegionBag, alpha: f64) -> Vec<RegionLabel> {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
    let malignant: Vec<Rect> = bag.malignant_lesions().map(|a| a.rect).collect();
    bag.geometry
        .iter()
        .map(|g| {
            let region = g.rect();
            let mut touched = false;
            for lesion in &malignant {
                let overlap = region.intersection_area(lesion);
                if overlap > 0.0 {
                    touched = true;
                    let v = overlap / region.area().min(lesion.area());
                    if v >= alpha {
                        return RegionLabel::Malignant;
                    }
                }
            }
            if touched {
                RegionLabel::Ignored
            } else {
                RegionLabel::BenignOrNormal
            }
        })
        .collect()
}
