//! Axis-aligned boxes, delta coding, and non-maximum suppression.

use crate::error::{Error, Result};

/// A rectangle in pixel coordinates, `x2 > x1` and `y2 > y1` when valid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox { x1, y1, x2, y2 }
    }

    /// Box of the given size centred on `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn checked(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BBox> {
        let b = BBox::new(x1, y1, x2, y2);
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::invalid("box", format!("degenerate box ({x1}, {y1}, {x2}, {y2})")))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Clamps the box into `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn scaled(&self, f: f64) -> BBox {
        BBox::new(self.x1 * f, self.y1 * f, self.x2 * f, self.y2 * f)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Largest log-scale delta accepted when decoding.
const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Centre/size delta coding with per-coordinate weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl Default for BoxCoder {
    fn default() -> Self {
        BoxCoder::UNIT
    }
}

impl BoxCoder {
    pub const UNIT: BoxCoder = BoxCoder { weights: [1.0; 4] };

    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f64; 4] {
        let (rx, ry) = reference.center();
        let (tx, ty) = target.center();
        let (rw, rh) = (reference.width(), reference.height());
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * (target.width() / rw).ln(),
            wh * (target.height() / rh).ln(),
        ]
    }

    pub fn decode(&self, reference: &BBox, deltas: [f64; 4]) -> BBox {
        let (rx, ry) = reference.center();
        let (rw, rh) = (reference.width(), reference.height());
        let [wx, wy, ww, wh] = self.weights;
        let dw = (deltas[2] / ww).min(MAX_LOG_DELTA);
        let dh = (deltas[3] / wh).min(MAX_LOG_DELTA);
        BBox::from_center(rx + deltas[0] / wx * rw, ry + deltas[1] / wy * rh, rw * dw.exp(), rh * dh.exp())
    }
}

pub fn decode_boxes(coder: &BoxCoder, references: &[BBox], deltas: &[[f64; 4]]) -> Result<Vec<BBox>> {
    if references.len() != deltas.len() {
        return Err(Error::invalid(
            "decode_boxes",
            format!("{} references but {} deltas", references.len(), deltas.len()),
        ));
    }
    Ok(references.iter().zip(deltas).map(|(r, d)| coder.decode(r, *d)).collect())
}

/// A scored detection; `circle` records which circle produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub circle: Option<usize>,
}

/// A ground-truth instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub visibility: f64,
}

/// Indices sorted by descending score; equal scores keep input order.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy non-maximum suppression. A box is dropped when its IoU with an
/// already kept, higher-ranked box exceeds `threshold`. Returns the kept
/// indices in descending score order.
pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Pools the detections of every circle and suppresses overlaps, so each
/// cluster keeps its highest-scoring member together with that member's
/// circle tag.
pub fn fuse_detections(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let boxes: Vec<BBox> = detections.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    nms(&boxes, &scores, iou_threshold).into_iter().map(|i| detections[i]).collect()
}
