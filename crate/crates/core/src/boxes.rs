//! Axis-aligned box geometry shared by losses, the detector, and the
//! evaluator. All geometry runs in f64.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const GEOM_EPS: f64 = 1e-9;

/// Image-plane box, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x2 >= x1 && y2 >= y1) {
            return Err(Error::data(format!(
                "invalid box ({x1},{y1},{x2},{y2}): x2 >= x1 and y2 >= y1 required"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= GEOM_EPS {
            return 0.0;
        }
        inter / union
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

/// Anchor geometry in center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorGeom {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl AnchorGeom {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Exponent clamp for the size deltas; keeps decode finite.
pub const DELTA_CLAMP: f64 = 4.0;

/// Center-size delta decoding: cx' = cx + dx*w, w' = w*exp(dw).
pub fn decode_delta(anchor: &AnchorGeom, d: [f64; 4]) -> BBox {
    let cx = anchor.cx + d[0] * anchor.w;
    let cy = anchor.cy + d[1] * anchor.h;
    let w = anchor.w * d[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = anchor.h * d[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Inverse of `decode_delta` for non-degenerate targets.
pub fn encode_delta(anchor: &AnchorGeom, target: &BBox) -> [f64; 4] {
    let (tcx, tcy) = target.center();
    [
        (tcx - anchor.cx) / anchor.w,
        (tcy - anchor.cy) / anchor.h,
        (target.width().max(GEOM_EPS) / anchor.w).ln(),
        (target.height().max(GEOM_EPS) / anchor.h).ln(),
    ]
}

/// Jacobian of the decoded corner coordinates w.r.t. the four deltas,
/// rows (x1,y1,x2,y2), columns (dx,dy,dw,dh). Valid away from the clamp.
pub fn decode_jacobian(anchor: &AnchorGeom, d: [f64; 4]) -> [[f64; 4]; 4] {
    let w = anchor.w * d[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = anchor.h * d[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let dw = if d[2].abs() < DELTA_CLAMP { w } else { 0.0 };
    let dh = if d[3].abs() < DELTA_CLAMP { h } else { 0.0 };
    [
        [anchor.w, 0.0, -dw / 2.0, 0.0],
        [0.0, anchor.h, 0.0, -dh / 2.0],
        [anchor.w, 0.0, dw / 2.0, 0.0],
        [0.0, anchor.h, 0.0, dh / 2.0],
    ]
}
