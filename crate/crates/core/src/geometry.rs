//! Axis-aligned box arithmetic.
//!
//! Boxes are corner-encoded in continuous pixel coordinates with the origin at
//! the top-left corner. Width is `x_max - x_min`; there is no "+1" pixel
//! convention anywhere in the crate.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite or inverted coordinates.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::invalid(format!("non-finite box coordinates {self:?}")));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::invalid(format!("inverted box coordinates {self:?}")));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.coords().iter().all(|v| v.is_finite())
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn from_coords(c: [f64; 4]) -> Self {
        BBox {
            x_min: c[0],
            y_min: c[1],
            x_max: c[2],
            y_max: c[3],
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() <= 0.0 || self.height() <= 0.0
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox::from_coords(self.coords().map(|v| v * s))
    }

    /// Lexicographic order on `(x_min, y_min, x_max, y_max)` using IEEE total order.
    pub fn lex_cmp(&self, other: &BBox) -> Ordering {
        self.coords()
            .iter()
            .zip(other.coords().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

/// Intersection over union of two valid boxes; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// [`iou`] with input validation.
pub fn try_iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou(a, b))
}

/// Clamps every coordinate into `[0, width] x [0, height]`. Total; may return
/// a zero-area box when `b` lies outside the frame.
pub fn clip_to_image(b: &BBox, width: f64, height: f64) -> BBox {
    BBox {
        x_min: b.x_min.clamp(0.0, width),
        y_min: b.y_min.clamp(0.0, height),
        x_max: b.x_max.clamp(0.0, width),
        y_max: b.y_max.clamp(0.0, height),
    }
}
