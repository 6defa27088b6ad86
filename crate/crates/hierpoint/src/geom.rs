//! Points, axis-aligned rectangles, and the spatial ordering used to arrange
//! words and lines in reading order.

use serde::{Deserialize, Serialize};

/// 2-d point in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Axis-aligned rectangle, half-open: `[x0,x1) x [y0,y1)`.
///
/// The half-open convention lets adjacent boxes tile a grid without claiming
/// any pixel twice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0.0)) * (self.height().max(0.0))
    }

    pub fn center(&self) -> Point {
        Point::new((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn union(&self, other: &Rect) -> Rect {
        Rect::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clamp to `[0,w) x [0,h)` image bounds.
    pub fn clamp_to(&self, w: f64, h: f64) -> Rect {
        Rect::new(
            self.x0.clamp(0.0, w),
            self.y0.clamp(0.0, h),
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
        )
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn from_array(a: [f64; 4]) -> Rect {
        Rect::new(a[0], a[1], a[2], a[3])
    }
}

/// Membership test with a half-open box: true iff `x0 <= px < x1` and
/// `y0 <= py < y1`.
pub fn point_in_box(p: Point, b: &Rect) -> bool {
    p.x >= b.x0 && p.x < b.x1 && p.y >= b.y0 && p.y < b.y1
}

/// Half of the median box height: two boxes whose vertical centers differ by
/// less than this are treated as sharing a row.
pub fn row_band_threshold(boxes: &[Rect]) -> f64 {
    let mut heights: Vec<f64> = boxes.iter().map(|b| b.height()).collect();
    heights.sort_by(f64::total_cmp);
    let n = heights.len();
    let median = if n == 0 {
        0.0
    } else if n % 2 == 1 {
        heights[n / 2]
    } else {
        0.5 * (heights[n / 2 - 1] + heights[n / 2])
    };
    median / 2.0
}

/// Reading order over boxes: top-to-bottom row bands, then left-to-right
/// inside each band. Boxes whose vertical centers differ by less than half
/// the median box height share a band; ties break on the input index.
pub fn spatial_order(boxes: &[Rect]) -> Vec<usize> {
    if boxes.is_empty() {
        return Vec::new();
    }
    let tau = row_band_threshold(boxes);
    let mut by_y: Vec<usize> = (0..boxes.len()).collect();
    by_y.sort_by(|&a, &b| {
        boxes[a]
            .center()
            .y
            .total_cmp(&boxes[b].center().y)
            .then(a.cmp(&b))
    });
    let mut order = Vec::with_capacity(boxes.len());
    let mut band: Vec<usize> = Vec::new();
    let mut band_ref = f64::NEG_INFINITY;
    let mut flush = |band: &mut Vec<usize>, order: &mut Vec<usize>| {
        band.sort_by(|&a, &b| boxes[a].x0.total_cmp(&boxes[b].x0).then(a.cmp(&b)));
        order.append(band);
    };
    for idx in by_y {
        let yc = boxes[idx].center().y;
        if band.is_empty() || yc - band_ref < tau {
            if band.is_empty() {
                band_ref = yc;
            }
            band.push(idx);
        } else {
            flush(&mut band, &mut order);
            band_ref = yc;
            band.push(idx);
        }
    }
    flush(&mut band, &mut order);
    order
}
