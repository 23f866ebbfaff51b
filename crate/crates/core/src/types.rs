//! Domain types shared by every stage of the pipeline.
//!
//! Coordinates follow one convention everywhere: `x` is the column, `y` is the
//! row, and the origin is the top-left corner of the frame. Rasters are stored
//! row-major as `(rows, cols, channels)`.

use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slide-scanner domain. The four built-in scanners are closed; anything else
/// is an open extension (synthetic domains, unseen test scanners).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum ScannerDomain {
    Xr,
    S360,
    Cs2,
    Gt450,
    Custom(String),
}

impl ScannerDomain {
    pub const BUILTIN: [ScannerDomain; 4] = [
        ScannerDomain::Xr,
        ScannerDomain::S360,
        ScannerDomain::Cs2,
        ScannerDomain::Gt450,
    ];

    pub fn name(&self) -> &str {
        match self {
            ScannerDomain::Xr => "XR",
            ScannerDomain::S360 => "S360",
            ScannerDomain::Cs2 => "CS2",
            ScannerDomain::Gt450 => "GT450",
            ScannerDomain::Custom(name) => name,
        }
    }

    /// Whether slides from this scanner carry mitosis annotations.
    /// GT450 is the unannotated scanner; custom domains are assumed annotated.
    pub fn annotated(&self) -> bool {
        !matches!(self, ScannerDomain::Gt450)
    }
}

impl From<String> for ScannerDomain {
    fn from(s: String) -> Self {
        match s.as_str() {
            "XR" => ScannerDomain::Xr,
            "S360" => ScannerDomain::S360,
            "CS2" => ScannerDomain::Cs2,
            "GT450" => ScannerDomain::Gt450,
            _ => ScannerDomain::Custom(s),
        }
    }
}

impl From<&str> for ScannerDomain {
    fn from(s: &str) -> Self {
        ScannerDomain::from(s.to_string())
    }
}

impl From<ScannerDomain> for String {
    fn from(d: ScannerDomain) -> Self {
        d.name().to_string()
    }
}

impl fmt::Display for ScannerDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Integer pixel containing this point.
    pub fn pixel(&self) -> (i64, i64) {
        (self.x.floor() as i64, self.y.floor() as i64)
    }
}

/// Axis-aligned box in continuous pixel coordinates, half-open: a single
/// pixel at `(x, y)` is the box `(x, y, x + 1, y + 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        if !finite || self.x1 <= self.x0 || self.y1 <= self.y0 {
            return Err(Error::InvalidAnnotation(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> Point {
        Point::new((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self { x0: self.x0 + dx, y0: self.y0 + dy, x1: self.x1 + dx, y1: self.y1 + dy }
    }

    /// Intersection with another box, `None` when empty.
    pub fn intersect(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let b = BoundingBox {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        (b.x1 > b.x0 && b.y1 > b.y0).then_some(b)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Mitosis,
    HardNegative,
}

impl Label {
    pub fn as_target(&self) -> u8 {
        match self {
            Label::Mitosis => 1,
            Label::HardNegative => 0,
        }
    }
}

/// Soft mask in `[0, 1]` anchored in frame coordinates at `origin`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub origin: (i64, i64),
    pub values: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MitosisAnnotation {
    pub id: u64,
    pub centroid: Point,
    pub label: Label,
    pub bbox: Option<BoundingBox>,
    pub mask: Option<SoftMask>,
}

impl MitosisAnnotation {
    pub fn new(id: u64, centroid: Point, label: Label) -> Self {
        Self { id, centroid, label, bbox: None, mask: None }
    }

    pub fn with_box(mut self, bbox: BoundingBox) -> Self {
        self.bbox = Some(bbox);
        self
    }

    /// Checks the annotation against the frame extent it belongs to.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let c = self.centroid;
        if !(c.x >= 0.0 && c.y >= 0.0 && c.x < width as f64 && c.y < height as f64) {
            return Err(Error::InvalidAnnotation(format!(
                "annotation {} centroid ({}, {}) outside {}x{} frame",
                self.id, c.x, c.y, width, height
            )));
        }
        if let Some(b) = &self.bbox {
            b.validate()?;
            if !b.contains(&c) {
                return Err(Error::InvalidAnnotation(format!(
                    "annotation {} centroid outside its box {:?}",
                    self.id,
                    b.to_array()
                )));
            }
        }
        Ok(())
    }
}

/// An H&E image region with its scanner domain and annotations.
#[derive(Clone, Debug)]
pub struct Frame {
    pub slide_id: String,
    pub domain: ScannerDomain,
    /// `(height, width, 3)` RGB raster.
    pub pixels: Array3<u8>,
    pub microns_per_pixel: Option<f64>,
    pub annotations: Vec<MitosisAnnotation>,
}

impl Frame {
    pub fn new(slide_id: impl Into<String>, domain: ScannerDomain, pixels: Array3<u8>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!("frame pixels must be (h>0, w>0, 3), got ({h}, {w}, {c})")));
        }
        Ok(Self {
            slide_id: slide_id.into(),
            domain,
            pixels,
            microns_per_pixel: None,
            annotations: Vec::new(),
        })
    }

    pub fn with_annotations(mut self, annotations: Vec<MitosisAnnotation>) -> Result<Self> {
        for a in &annotations {
            a.validate(self.width(), self.height())?;
        }
        self.annotations = annotations;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn mitoses(&self) -> impl Iterator<Item = &MitosisAnnotation> {
        self.annotations.iter().filter(|a| a.label == Label::Mitosis)
    }
}

/// A candidate produced by the detector, optionally refined by the ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub centroid: Point,
    pub bbox: BoundingBox,
    pub detector_score: f64,
    pub classifier_scores: Vec<f64>,
    /// Set once the ensemble has scored the candidate.
    pub merged_score: Option<f64>,
}

impl Detection {
    pub fn candidate(bbox: BoundingBox, detector_score: f64) -> Self {
        Self {
            centroid: bbox.center(),
            bbox,
            detector_score,
            classifier_scores: Vec::new(),
            merged_score: None,
        }
    }

    /// Score used for ranking: the merged ensemble score once available.
    pub fn score(&self) -> f64 {
        self.merged_score.unwrap_or(self.detector_score)
    }
}
