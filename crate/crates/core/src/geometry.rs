//! Boxes, affine frames and pose records in normalized image coordinates.
//!
//! Normalized coordinates span the image extent: `x = 0` is the left edge,
//! `x = 1` the right edge. Pixel `m` of a `W`-wide raster covers
//! `[m/W, (m+1)/W]`, so its center sits at `(m + 0.5)/W` and a horizontal
//! mirror is exactly `x -> 1 - x`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_left: f64,
    pub x_right: f64,
    pub y_top: f64,
    pub y_down: f64,
}

impl BoundingBox {
    pub const UNIT: BoundingBox = BoundingBox {
        x_left: 0.0,
        x_right: 1.0,
        y_top: 0.0,
        y_down: 1.0,
    };

    pub fn new(x_left: f64, x_right: f64, y_top: f64, y_down: f64) -> BoundingBox {
        BoundingBox {
            x_left,
            x_right,
            y_top,
            y_down,
        }
    }

    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx - w / 2.0, cx + w / 2.0, cy - h / 2.0, cy + h / 2.0)
    }

    pub fn to_cxcywh(&self) -> [f64; 4] {
        let (cx, cy) = self.center();
        [cx, cy, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x_right - self.x_left
    }

    pub fn height(&self) -> f64 {
        self.y_down - self.y_top
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_left + self.x_right),
            0.5 * (self.y_top + self.y_down),
        )
    }

    pub fn is_valid(&self) -> bool {
        [self.x_left, self.x_right, self.y_top, self.y_down]
            .iter()
            .all(|v| v.is_finite())
            && self.x_left < self.x_right
            && self.y_top < self.y_down
    }

    /// Grows width and height by `factor` (0.25 means 25%) about the center.
    pub fn enlarge(&self, factor: f64) -> BoundingBox {
        let (cx, cy) = self.center();
        let s = 1.0 + factor;
        BoundingBox::from_cxcywh(cx, cy, self.width() * s, self.height() * s)
    }

    pub fn clamp_unit(&self) -> BoundingBox {
        BoundingBox::new(
            self.x_left.clamp(0.0, 1.0),
            self.x_right.clamp(0.0, 1.0),
            self.y_top.clamp(0.0, 1.0),
            self.y_down.clamp(0.0, 1.0),
        )
    }

    /// Horizontal mirror about the image center.
    pub fn mirror(&self) -> BoundingBox {
        BoundingBox::new(1.0 - self.x_right, 1.0 - self.x_left, self.y_top, self.y_down)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_left && x <= self.x_right && y >= self.y_top && y <= self.y_down
    }

    fn intersection(&self, other: &BoundingBox) -> f64 {
        let w = self.x_right.min(other.x_right) - self.x_left.max(other.x_left);
        let h = self.y_down.min(other.y_down) - self.y_top.max(other.y_top);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU: IoU minus the share of the enclosing box not covered by the union.
    pub fn giou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let enclosing = (self.x_right.max(other.x_right) - self.x_left.min(other.x_left))
            * (self.y_down.max(other.y_down) - self.y_top.min(other.y_top));
        if union <= 0.0 || enclosing <= 0.0 {
            return 0.0;
        }
        inter / union - (enclosing - union) / enclosing
    }
}

/// Affine map `p -> A·p + t` between two normalized frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        a: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    /// Maps the unit square onto `bbox` (crop frame -> image frame).
    pub fn from_box(bbox: &BoundingBox) -> Affine2 {
        Affine2 {
            a: [[bbox.width(), 0.0], [0.0, bbox.height()]],
            t: [bbox.x_left, bbox.y_top],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Affine2 {
        Affine2 {
            a: [[1.0, 0.0], [0.0, 1.0]],
            t: [dx, dy],
        }
    }

    pub fn linear(a: [[f64; 2]; 2]) -> Affine2 {
        Affine2 { a, t: [0.0, 0.0] }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.t[0],
            self.a[1][0] * x + self.a[1][1] * y + self.t[1],
        )
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        let a = &self.a;
        let b = &other.a;
        Affine2 {
            a: [
                [
                    a[0][0] * b[0][0] + a[0][1] * b[1][0],
                    a[0][0] * b[0][1] + a[0][1] * b[1][1],
                ],
                [
                    a[1][0] * b[0][0] + a[1][1] * b[1][0],
                    a[1][0] * b[0][1] + a[1][1] * b[1][1],
                ],
            ],
            t: [
                a[0][0] * other.t[0] + a[0][1] * other.t[1] + self.t[0],
                a[1][0] * other.t[0] + a[1][1] * other.t[1] + self.t[1],
            ],
        }
    }

    pub fn determinant(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let inv = [
            [self.a[1][1] / det, -self.a[0][1] / det],
            [-self.a[1][0] / det, self.a[0][0] / det],
        ];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Some(Affine2 { a: inv, t })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Joint class in `0..J`.
    pub label: usize,
    pub visible: bool,
    /// Readout confidence; 1 for ground truth.
    pub score: f64,
}

impl Keypoint {
    /// Slot for an unlabeled joint; coordinates are a zero sentinel.
    pub fn missing(label: usize) -> Keypoint {
        Keypoint {
            x: 0.0,
            y: 0.0,
            label,
            visible: false,
            score: 0.0,
        }
    }
}

/// One person: a box and exactly `J` keypoint slots, slot `j` carrying label `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseInstance {
    pub bbox: BoundingBox,
    pub keypoints: Vec<Keypoint>,
    pub score: f64,
}

impl PoseInstance {
    pub fn num_visible(&self) -> usize {
        self.keypoints.iter().filter(|k| k.visible).count()
    }

    /// Mirrors coordinates and swaps left/right slots by `swap`.
    pub fn mirror(&self, swap: &[usize]) -> PoseInstance {
        let mut keypoints = vec![Keypoint::missing(0); self.keypoints.len()];
        for kp in &self.keypoints {
            let to = swap[kp.label];
            keypoints[to] = Keypoint {
                x: 1.0 - kp.x,
                label: to,
                ..*kp
            };
        }
        PoseInstance {
            bbox: self.bbox.mirror(),
            keypoints,
            score: self.score,
        }
    }
}

/// Checks that `swap` is a permutation that is its own inverse.
pub fn is_involution(swap: &[usize]) -> bool {
    swap.iter()
        .enumerate()
        .all(|(i, &j)| j < swap.len() && swap[j] == i)
}
