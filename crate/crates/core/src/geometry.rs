//! Boxes, IoU, default-box tiling, ground-truth matching, offset coding and
//! greedy non-maximum suppression. All coordinates are normalized to [0,1].

use serde::{Deserialize, Serialize};

use crate::error::{LstdError, Result};

/// Axis-aligned rectangle in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    /// Checked constructor: requires `xmin < xmax`, `ymin < ymax`, all in [0,1].
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = Self {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(LstdError::InvalidBox(format!("{b:?}")))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            xmin: cx - w / 2.0,
            ymin: cy - h / 2.0,
            xmax: cx + w / 2.0,
            ymax: cy + h / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        self.xmin < self.xmax
            && self.ymin < self.ymax
            && in_unit(self.xmin)
            && in_unit(self.xmax)
            && in_unit(self.ymin)
            && in_unit(self.ymax)
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    pub fn clipped(&self) -> Self {
        Self {
            xmin: self.xmin.clamp(0.0, 1.0),
            ymin: self.ymin.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.xmin && x <= self.xmax && y >= self.ymin && y <= self.ymax
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }
}

/// A ground-truth box with its category. Class 0 is background and never
/// appears here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class_id: usize,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerLayout {
    pub grid_h: usize,
    pub grid_w: usize,
    pub scale: f64,
    pub ratios: Vec<f64>,
}

impl LayerLayout {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w * self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Default boxes for every detection layer. Flattened order is layer-major,
/// then row, column, ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefaultBoxLayout {
    pub layers: Vec<LayerLayout>,
}

impl DefaultBoxLayout {
    pub fn len(&self) -> usize {
        self.layers.iter().map(LayerLayout::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the first default box of `layer` in the flattened order.
    pub fn layer_offset(&self, layer: usize) -> usize {
        self.layers[..layer].iter().map(LayerLayout::len).sum()
    }
}

/// Box for cell (i, j) and ratio r: centered on the cell, `s·√r` wide and
/// `s/√r` tall, clipped to the image.
pub fn generate_default_boxes(layout: &DefaultBoxLayout) -> Vec<BBox> {
    let mut boxes = Vec::with_capacity(layout.len());
    for l in &layout.layers {
        for i in 0..l.grid_h {
            for j in 0..l.grid_w {
                let cx = (j as f64 + 0.5) / l.grid_w as f64;
                let cy = (i as f64 + 0.5) / l.grid_h as f64;
                for &r in &l.ratios {
                    let w = l.scale * r.sqrt();
                    let h = l.scale / r.sqrt();
                    boxes.push(BBox::from_center(cx, cy, w, h).clipped());
                }
            }
        }
    }
    boxes
}

/// SSD-style matching. First every ground truth claims one default box:
/// repeatedly take the highest-IoU (gt, default) pair among unmatched gts
/// and unclaimed defaults (ties go to the lower gt, then lower default
/// index). Then every remaining default whose best IoU reaches `pos_iou`
/// is matched to its best gt (ties to the lower gt index).
pub fn match_defaults(defaults: &[BBox], gts: &[LabeledBox], pos_iou: f64) -> Vec<Option<usize>> {
    let mut assignment = vec![None; defaults.len()];
    if gts.is_empty() || defaults.is_empty() {
        return assignment;
    }
    let overlaps: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| defaults.iter().map(|d| iou(&g.bbox, d)).collect())
        .collect();

    let mut gt_done = vec![false; gts.len()];
    for _ in 0..gts.len().min(defaults.len()) {
        let mut best: Option<(usize, usize, f64)> = None;
        for (gi, row) in overlaps.iter().enumerate() {
            if gt_done[gi] {
                continue;
            }
            for (di, &v) in row.iter().enumerate() {
                if assignment[di].is_some() {
                    continue;
                }
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((gi, di, v));
                }
            }
        }
        let Some((gi, di, _)) = best else { break };
        assignment[di] = Some(gi);
        gt_done[gi] = true;
    }

    for di in 0..defaults.len() {
        if assignment[di].is_some() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (gi, row) in overlaps.iter().enumerate() {
            if best.is_none_or(|(_, b)| row[di] > b) {
                best = Some((gi, row[di]));
            }
        }
        if let Some((gi, v)) = best {
            if v >= pos_iou {
                assignment[di] = Some(gi);
            }
        }
    }
    assignment
}

/// Offsets of `gt` relative to `default`: center shift in default-box
/// units, then log size ratios. No variance scaling.
pub fn encode_offsets(gt: &BBox, default: &BBox) -> Result<[f64; 4]> {
    if gt.width() <= 0.0 || gt.height() <= 0.0 {
        return Err(LstdError::InvalidBox(format!("cannot encode degenerate box {gt:?}")));
    }
    let (gcx, gcy) = gt.center();
    let (dcx, dcy) = default.center();
    let (dw, dh) = (default.width(), default.height());
    Ok([
        (gcx - dcx) / dw,
        (gcy - dcy) / dh,
        (gt.width() / dw).ln(),
        (gt.height() / dh).ln(),
    ])
}

/// Inverse of [`encode_offsets`], without clipping.
pub fn decode_offsets_unclipped(t: &[f64; 4], default: &BBox) -> BBox {
    let (dcx, dcy) = default.center();
    let (dw, dh) = (default.width(), default.height());
    BBox::from_center(dcx + t[0] * dw, dcy + t[1] * dh, dw * t[2].exp(), dh * t[3].exp())
}

pub fn decode_offsets(t: &[f64; 4], default: &BBox) -> BBox {
    decode_offsets_unclipped(t, default).clipped()
}

/// Greedy NMS. Visits boxes by descending score (ties by input index) and
/// keeps a box unless its IoU with an already kept box exceeds
/// `iou_threshold`. Returns at most `keep_top` indices in visit order.
pub fn nms(boxes: &[(BBox, f64)], iou_threshold: f64, keep_top: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].1.total_cmp(&boxes[a].1).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= keep_top {
            break;
        }
        if kept.iter().all(|&k| iou(&boxes[k].0, &boxes[i].0) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
