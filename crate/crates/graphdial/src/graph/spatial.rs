//! Spatial relation classification between object bounding boxes.
//!
//! Two special classes (`inside` = 1, `cover` = 2) handle proper containment,
//! class 3 (`overlap`) handles IoU >= 0.5, and the remaining eight classes
//! 4..=11 discretize the center-to-center angle into 45-degree sectors.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Axis-aligned box in pixel coordinates with positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite())
            || x1 >= x2
            || y1 >= y2
        {
            return Err(Error::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Inclusive containment: every edge of `other` within this box.
    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Containment excluding the identical box.
    pub fn properly_contains(&self, other: &BoundingBox) -> bool {
        self.contains(other) && self != other
    }
}

/// Intersection area over union area; symmetric, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Angle of the vector from `a`'s center to `b`'s center, counter-clockwise
/// from +x, in `(0, 2*pi]`. An exact zero angle is reported as `2*pi` so the
/// angular classes stay in 4..=11.
pub fn center_angle(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let (dx, dy) = (bx - ax, by - ay);
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::CoincidentCenters);
    }
    let angle = dy.atan2(dx);
    Ok(if angle <= 0.0 { angle + 2.0 * PI } else { angle })
}

pub const SPATIAL_INSIDE: u16 = 1;
pub const SPATIAL_COVER: u16 = 2;
pub const SPATIAL_OVERLAP: u16 = 3;

/// Relation class of the ordered pair `(a, b)`, in 1..=11.
///
/// Priority: proper containment (1 or 2), then IoU >= 0.5 (3), then the
/// angular sector `ceil(phi / (pi/4)) + 3`. Coincident centers without
/// containment fall back to class 3.
pub fn classify_spatial_relation(a: &BoundingBox, b: &BoundingBox) -> u16 {
    if a.properly_contains(b) {
        return SPATIAL_INSIDE;
    }
    if b.properly_contains(a) {
        return SPATIAL_COVER;
    }
    if iou(a, b) >= 0.5 {
        return SPATIAL_OVERLAP;
    }
    match center_angle(a, b) {
        Ok(phi) => (phi / (0.25 * PI)).ceil() as u16 + 3,
        Err(_) => SPATIAL_OVERLAP,
    }
}

/// The class an angular class maps to when the angle rotates by pi.
/// Classes 1 and 2 swap; class 3 is its own partner.
pub fn symmetric_partner(class: u16) -> u16 {
    match class {
        SPATIAL_INSIDE => SPATIAL_COVER,
        SPATIAL_COVER => SPATIAL_INSIDE,
        SPATIAL_OVERLAP => SPATIAL_OVERLAP,
        c => ((c - 4 + 4) % 8) + 4,
    }
}
