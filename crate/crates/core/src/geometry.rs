//! Bounding-box arithmetic: conversions, IoU, GIoU, L1 box loss, and NMS.
//!
//! Boxes are kept in normalized center format (`cx, cy, w, h`, all fractions
//! of the image side) because that is what the detector heads emit. Ingestion
//! converts from absolute corner-xywh pixels and clamps to the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized center-format bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    /// Center x as a fraction of image width, in `[0, 1]`.
    pub cx: f64,
    /// Center y as a fraction of image height, in `[0, 1]`.
    pub cy: f64,
    /// Width fraction, in `(0, 1]`.
    pub w: f64,
    /// Height fraction, in `(0, 1]`.
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Checks the box invariants: centers in `[0,1]`, positive sides `≤ 1`.
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid box {self:?}")))
        }
    }

    /// Converts an absolute corner-xywh box (pixels) into normalized center
    /// format, clamping to the image. Returns `None` when nothing remains
    /// after clamping; callers log and drop those.
    pub fn from_absolute_xywh(x: f64, y: f64, w: f64, h: f64, img_w: f64, img_h: f64) -> Option<Self> {
        if !(img_w > 0.0 && img_h > 0.0) {
            return None;
        }
        let x1 = x.max(0.0).min(img_w);
        let y1 = y.max(0.0).min(img_h);
        let x2 = (x + w).max(0.0).min(img_w);
        let y2 = (y + h).max(0.0).min(img_h);
        if !(x2 > x1 && y2 > y1) {
            return None;
        }
        Some(Self {
            cx: (x1 + x2) / 2.0 / img_w,
            cy: (y1 + y2) / 2.0 / img_h,
            w: (x2 - x1) / img_w,
            h: (y2 - y1) / img_h,
        })
    }

    /// Inverse of [`BBox::from_absolute_xywh`] for in-bounds boxes.
    pub fn to_absolute_xywh(&self, img_w: f64, img_h: f64) -> (f64, f64, f64, f64) {
        let (x1, y1, x2, y2) = self.corners();
        (x1 * img_w, y1 * img_h, (x2 - x1) * img_w, (y2 - y1) * img_h)
    }

    /// Corner coordinates `(x1, y1, x2, y2)` in normalized space.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union. 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    inter / union
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    if iw > 0.0 && ih > 0.0 {
        iw * ih
    } else {
        0.0
    }
}

/// Generalized IoU: `IoU − (hull − union) / hull`, in `(−1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    if hull <= 0.0 {
        // Degenerate hull only happens for two zero-area boxes.
        return inter / union;
    }
    inter / union - (hull - union) / hull
}

/// GIoU loss `1 − GIoU(a, b)`, in `[0, 2)`.
pub fn giou_loss(a: &BBox, b: &BBox) -> f64 {
    1.0 - giou(a, b)
}

/// Gradient of [`giou_loss`] with respect to the `(cx, cy, w, h)` of both
/// boxes. At the min/max breakpoints (coinciding corners) this returns one
/// of the subgradients.
pub fn giou_loss_grad(a: &BBox, b: &BBox) -> ([f64; 4], [f64; 4]) {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();

    let xi1 = ax1.max(bx1);
    let yi1 = ay1.max(by1);
    let xi2 = ax2.min(bx2);
    let yi2 = ay2.min(by2);
    let iw = xi2 - xi1;
    let ih = yi2 - yi1;
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };

    let area_a = a.area();
    let area_b = b.area();
    let union = area_a + area_b - inter;

    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let hull = cw * ch;

    // loss = 2 − inter/union − union/hull with union = area_a + area_b − inter.
    let d_inter = -(union + inter) / (union * union) + 1.0 / hull;
    let d_area = inter / (union * union) - 1.0 / hull; // per box area
    let d_hull = union / (hull * hull);

    let mut ga = [0.0f64; 4];
    let mut gb = [0.0f64; 4];

    // Corner-space gradients, folded into center format at the end.
    let (mut gax1, mut gay1, mut gax2, mut gay2) = (0.0, 0.0, 0.0, 0.0);
    let (mut gbx1, mut gby1, mut gbx2, mut gby2) = (0.0, 0.0, 0.0, 0.0);

    if overlapping {
        // d inter / d corners through the clamped min/max.
        let gxi1 = -ih * d_inter;
        let gxi2 = ih * d_inter;
        let gyi1 = -iw * d_inter;
        let gyi2 = iw * d_inter;
        if ax1 >= bx1 {
            gax1 += gxi1;
        } else {
            gbx1 += gxi1;
        }
        if ax2 <= bx2 {
            gax2 += gxi2;
        } else {
            gbx2 += gxi2;
        }
        if ay1 >= by1 {
            gay1 += gyi1;
        } else {
            gby1 += gyi1;
        }
        if ay2 <= by2 {
            gay2 += gyi2;
        } else {
            gby2 += gyi2;
        }
    }

    // Hull corners.
    let gxc1 = -ch * d_hull;
    let gxc2 = ch * d_hull;
    let gyc1 = -cw * d_hull;
    let gyc2 = cw * d_hull;
    if ax1 <= bx1 {
        gax1 += gxc1;
    } else {
        gbx1 += gxc1;
    }
    if ax2 >= bx2 {
        gax2 += gxc2;
    } else {
        gbx2 += gxc2;
    }
    if ay1 <= by1 {
        gay1 += gyc1;
    } else {
        gby1 += gyc1;
    }
    if ay2 >= by2 {
        gay2 += gyc2;
    } else {
        gby2 += gyc2;
    }

    // Fold corners into (cx, cy, w, h): x1 = cx − w/2, x2 = cx + w/2.
    ga[0] = gax1 + gax2;
    ga[1] = gay1 + gay2;
    ga[2] = (gax2 - gax1) / 2.0 + d_area * a.h;
    ga[3] = (gay2 - gay1) / 2.0 + d_area * a.w;
    gb[0] = gbx1 + gbx2;
    gb[1] = gby1 + gby2;
    gb[2] = (gbx2 - gbx1) / 2.0 + d_area * b.h;
    gb[3] = (gby2 - gby1) / 2.0 + d_area * b.w;

    (ga, gb)
}

/// Sum of absolute coordinate differences in normalized center space.
pub fn l1_box_loss(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Subgradient of [`l1_box_loss`] with respect to both boxes (0 at ties).
pub fn l1_box_grad(a: &BBox, b: &BBox) -> ([f64; 4], [f64; 4]) {
    let diffs = [a.cx - b.cx, a.cy - b.cy, a.w - b.w, a.h - b.h];
    let mut ga = [0.0f64; 4];
    let mut gb = [0.0f64; 4];
    for (i, d) in diffs.iter().enumerate() {
        let s = if *d > 0.0 {
            1.0
        } else if *d < 0.0 {
            -1.0
        } else {
            0.0
        };
        ga[i] = s;
        gb[i] = -s;
    }
    (ga, gb)
}

/// Greedy non-maximum suppression. Returns the kept indices in descending
/// score order; ties in score are broken by lower original index. A box is
/// suppressed when its IoU with an already-kept box reaches `iou_threshold`.
pub fn nms(dets: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    assert!(
        dets.iter().all(|(_, s)| s.is_finite()),
        "nms scores must be finite"
    );
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j].1
            .partial_cmp(&dets[i].1)
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(&dets[k].0, &dets[i].0) < iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
