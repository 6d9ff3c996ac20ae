//! Detection post-processing, VOC-style average precision at IoU 0.5,
//! false-positive error modes, and feature heatmaps.

use std::collections::BTreeMap;
use std::path::Path;

use ndgrad::{softmax_rows, Graph, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LstdError, Result};
use crate::geometry::{iou, nms, BBox, LabeledBox};
use crate::losses::background_cells;
use crate::model::{DetectorParams, Lstd, ProposalMode};
use crate::synthdata::{encode_pgm, write_atomic, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub class_id: usize,
    /// Softmax probability of `class_id` over the K+1 classes.
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub confidence_threshold: f64,
    pub nms_iou: f64,
    pub max_per_image: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.01,
            nms_iou: 0.45,
            max_per_image: 20,
        }
    }
}

/// Turns per-proposal class probabilities into final detections:
/// threshold, per-class NMS, then the most confident `max_per_image`.
pub fn postprocess(
    image_id: &str,
    boxes: &[BBox],
    probs: &[f64],
    num_classes: usize,
    cfg: &DetectConfig,
) -> Vec<Detection> {
    let cols = num_classes + 1;
    let mut out = Vec::new();
    for class in 1..=num_classes {
        let candidates: Vec<(BBox, f64)> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| (*b, probs[i * cols + class]))
            .filter(|&(_, p)| p >= cfg.confidence_threshold)
            .collect();
        for k in nms(&candidates, cfg.nms_iou, usize::MAX) {
            out.push(Detection {
                image_id: image_id.to_string(),
                bbox: candidates[k].0,
                class_id: class,
                confidence: candidates[k].1,
            });
        }
    }
    // stable: equal confidences keep class order
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out.truncate(cfg.max_per_image);
    out
}

/// Forward pass in evaluation mode followed by [`postprocess`]. The
/// soften head, if any, is ignored.
pub fn detect(net: &Lstd, params: &DetectorParams, image: &Tensor, image_id: &str, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let out = net.forward(&g, &p, image, ProposalMode::Eval, &[], None)?;
    let k = net.config().num_classes();
    let probs = softmax_rows(g.value(out.class_logits).data(), k + 1, 1.0);
    let boxes: Vec<BBox> = out.proposals.iter().map(|p| p.bbox).collect();
    Ok(postprocess(image_id, &boxes, &probs, k, cfg))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApMetric {
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    #[default]
    ElevenPoint,
    /// Area under the monotone precision envelope.
    AllPoint,
}

/// Ground truth of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTruth {
    pub image_id: String,
    pub boxes: Vec<LabeledBox>,
}

impl ImageTruth {
    pub fn from_dataset(dataset: &Dataset) -> Vec<ImageTruth> {
        dataset
            .samples
            .iter()
            .map(|s| ImageTruth {
                image_id: s.id.clone(),
                boxes: s.boxes.clone(),
            })
            .collect()
    }
}

/// Indices of `class` detections in descending confidence, ties by input
/// position.
fn ranked(detections: &[Detection], class: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].class_id == class)
        .collect();
    idx.sort_by(|&a, &b| detections[b].confidence.total_cmp(&detections[a].confidence).then(a.cmp(&b)));
    idx
}

/// VOC greedy assignment for one class. Each detection, in confidence
/// order, goes to its highest-IoU gt of the same class in the same image;
/// it is a true positive if that IoU reaches the threshold and the gt is
/// still unclaimed. Returns (detection index, is_tp) in rank order and the
/// gt count.
pub fn match_class(
    detections: &[Detection],
    truth: &[ImageTruth],
    class: usize,
    iou_threshold: f64,
) -> (Vec<(usize, bool)>, usize) {
    let mut gts: BTreeMap<&str, Vec<(BBox, bool)>> = BTreeMap::new();
    let mut n_gt = 0;
    for t in truth {
        let entry = gts.entry(t.image_id.as_str()).or_default();
        for b in t.boxes.iter().filter(|b| b.class_id == class) {
            entry.push((b.bbox, false));
            n_gt += 1;
        }
    }
    let mut flags = Vec::new();
    for i in ranked(detections, class) {
        let d = &detections[i];
        let mut tp = false;
        if let Some(list) = gts.get_mut(d.image_id.as_str()) {
            let best = list
                .iter()
                .enumerate()
                .map(|(j, (b, _))| (j, iou(&d.bbox, b)))
                .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                    Some(a) if a.1 >= cur.1 => Some(a),
                    _ => Some(cur),
                });
            if let Some((j, v)) = best {
                if v >= iou_threshold && !list[j].1 {
                    list[j].1 = true;
                    tp = true;
                }
            }
        }
        flags.push((i, tp));
    }
    (flags, n_gt)
}

/// Cumulative (recall, precision) points of a ranked TP/FP sequence.
pub fn pr_curve(tp_flags: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let (mut tp, mut fp) = (0usize, 0usize);
    tp_flags
        .iter()
        .map(|&t| {
            if t {
                tp += 1;
            } else {
                fp += 1;
            }
            (tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect()
}

/// AP of a PR curve. An empty curve scores 0.
pub fn average_precision(curve: &[(f64, f64)], metric: ApMetric) -> f64 {
    match metric {
        ApMetric::ElevenPoint => {
            (0..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|(r, _)| *r >= t)
                        .map(|&(_, p)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        ApMetric::AllPoint => {
            let mut recall = vec![0.0];
            let mut precision = vec![0.0];
            for &(r, p) in curve {
                recall.push(r);
                precision.push(p);
            }
            recall.push(1.0);
            precision.push(0.0);
            for i in (0..precision.len() - 1).rev() {
                precision[i] = precision[i].max(precision[i + 1]);
            }
            (1..recall.len())
                .map(|i| (recall[i] - recall[i - 1]) * precision[i])
                .sum()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub n_gt: usize,
    /// (recall, precision) after each ranked detection.
    pub pr: Vec<(f64, f64)>,
}

/// Per-class AP for classes 1..=`num_classes`.
pub fn voc_ap(
    detections: &[Detection],
    truth: &[ImageTruth],
    num_classes: usize,
    iou_threshold: f64,
    metric: ApMetric,
) -> Vec<ClassAp> {
    (1..=num_classes)
        .map(|class| {
            let (flags, n_gt) = match_class(detections, truth, class, iou_threshold);
            if n_gt == 0 {
                return ClassAp {
                    class_id: class,
                    ap: None,
                    n_gt,
                    pr: Vec::new(),
                };
            }
            let tp: Vec<bool> = flags.iter().map(|f| f.1).collect();
            let pr = pr_curve(&tp, n_gt);
            ClassAp {
                class_id: class,
                ap: Some(average_precision(&pr, metric)),
                n_gt,
                pr,
            }
        })
        .collect()
}

/// Mean over classes that have ground truth; 0 if none do.
pub fn mean_ap(per_class: &[ClassAp]) -> f64 {
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorMode {
    Loc,
    Cls,
    #[serde(rename = "BG")]
    Bg,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub loc: usize,
    pub cls: usize,
    pub bg: usize,
    pub loc_pct: f64,
    pub cls_pct: f64,
    pub bg_pct: f64,
}

impl ErrorHistogram {
    pub fn total(&self) -> usize {
        self.loc + self.cls + self.bg
    }
}

/// Loc if it overlaps a same-class gt at IoU ≥ 0.1 (this includes
/// duplicates of an already claimed gt), Cls if it overlaps a different
/// class gt at IoU ≥ 0.1, BG otherwise.
pub fn classify_false_positive(fp: &Detection, gts: &[LabeledBox]) -> ErrorMode {
    let best = |same: bool| {
        gts.iter()
            .filter(|g| (g.class_id == fp.class_id) == same)
            .map(|g| iou(&fp.bbox, &g.bbox))
            .fold(0.0, f64::max)
    };
    if best(true) >= 0.1 {
        ErrorMode::Loc
    } else if best(false) >= 0.1 {
        ErrorMode::Cls
    } else {
        ErrorMode::Bg
    }
}

pub fn error_modes(false_positives: &[Detection], truth: &[ImageTruth]) -> ErrorHistogram {
    let by_image: BTreeMap<&str, &[LabeledBox]> = truth
        .iter()
        .map(|t| (t.image_id.as_str(), t.boxes.as_slice()))
        .collect();
    let mut h = ErrorHistogram::default();
    for fp in false_positives {
        let gts = by_image.get(fp.image_id.as_str()).copied().unwrap_or(&[]);
        match classify_false_positive(fp, gts) {
            ErrorMode::Loc => h.loc += 1,
            ErrorMode::Cls => h.cls += 1,
            ErrorMode::Bg => h.bg += 1,
        }
    }
    let n = h.total();
    if n > 0 {
        h.loc_pct = 100.0 * h.loc as f64 / n as f64;
        h.cls_pct = 100.0 * h.cls as f64 / n as f64;
        h.bg_pct = 100.0 - h.loc_pct - h.cls_pct;
    }
    h
}

/// False positives of a detection set under VOC matching.
pub fn false_positives(detections: &[Detection], truth: &[ImageTruth], num_classes: usize, iou_threshold: f64) -> Vec<Detection> {
    let mut fps = Vec::new();
    for class in 1..=num_classes {
        let (flags, _) = match_class(detections, truth, class, iou_threshold);
        fps.extend(flags.into_iter().filter(|f| !f.1).map(|f| detections[f.0].clone()));
    }
    fps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub iou_threshold: f64,
    pub metric: ApMetric,
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    pub error_modes: ErrorHistogram,
}

/// Detects on every image, then scores the detections.
pub fn evaluate(
    net: &Lstd,
    params: &DetectorParams,
    dataset: &Dataset,
    cfg: &DetectConfig,
    metric: ApMetric,
) -> Result<EvalReport> {
    let k = net.config().num_classes();
    if dataset.num_classes() != k {
        return Err(LstdError::Dataset(format!(
            "network has {k} classes but the dataset declares {}",
            dataset.num_classes()
        )));
    }
    let per_image: Vec<Vec<Detection>> = dataset
        .samples
        .par_iter()
        .map(|s| detect(net, params, &s.to_tensor(), &s.id, cfg))
        .collect::<Result<_>>()?;
    let detections: Vec<Detection> = per_image.into_iter().flatten().collect();
    let truth = ImageTruth::from_dataset(dataset);
    Ok(report(&detections, &truth, k, metric))
}

pub fn report(detections: &[Detection], truth: &[ImageTruth], num_classes: usize, metric: ApMetric) -> EvalReport {
    const IOU: f64 = 0.5;
    let per_class = voc_ap(detections, truth, num_classes, IOU, metric);
    let fps = false_positives(detections, truth, num_classes, IOU);
    EvalReport {
        num_images: truth.len(),
        iou_threshold: IOU,
        metric,
        map: mean_ap(&per_class),
        per_class,
        error_modes: error_modes(&fps, truth),
    }
}

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Heatmap {
    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(self.width, self.height, &self.pixels)
    }
}

/// Channel mean of a C×H×W cube, min-max scaled to [0,255] and rounded.
/// A constant map gives all zeros.
pub fn normalized_channel_mean(cube: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let s = cube.shape();
    if s.len() != 3 {
        return Err(LstdError::InvalidArgument(format!("feature cube must be C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut mean = vec![0.0; h * w];
    for ch in cube.data().chunks(h * w) {
        for (m, v) in mean.iter_mut().zip(ch) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let gray = mean
        .iter()
        .map(|&m| if range > 0.0 { ((m - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect();
    Ok((h, w, gray))
}

/// Nearest-neighbor upscale of an h×w grid to `out_h`×`out_w`.
pub fn upscale_nearest(h: usize, w: usize, gray: &[u8], out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out.push(gray[sy * w + x * w / out_w]);
        }
    }
    out
}

fn layer_cube(net: &Lstd, params: &DetectorParams, image: &Tensor, layer: &str) -> Result<Tensor> {
    let idx = net.config().layer_index(layer)?;
    Ok(net.features(params, image)?.swap_remove(idx))
}

pub fn heatmap(net: &Lstd, params: &DetectorParams, image: &Tensor, layer: &str) -> Result<Heatmap> {
    let cube = layer_cube(net, params, image, layer)?;
    let (h, w, gray) = normalized_channel_mean(&cube)?;
    let size = net.config().input_size;
    Ok(Heatmap {
        width: size,
        height: size,
        pixels: upscale_nearest(h, w, &gray, size, size),
    })
}

/// Writes the heatmap of `layer` as a binary PGM.
pub fn export_heatmap(net: &Lstd, params: &DetectorParams, image: &Tensor, layer: &str, out: &Path) -> Result<Heatmap> {
    let map = heatmap(net, params, image, layer)?;
    write_atomic(out, &map.to_pgm())?;
    Ok(map)
}

/// Mean normalized heat (0..255) over the cells of `layer` whose centers
/// fall outside every ground-truth box. `None` if every cell is covered.
pub fn background_heat(net: &Lstd, params: &DetectorParams, image: &Tensor, gts: &[BBox], layer: &str) -> Result<Option<f64>> {
    let cube = layer_cube(net, params, image, layer)?;
    let (h, w, gray) = normalized_channel_mean(&cube)?;
    let mask = background_cells(h, w, gts);
    let vals: Vec<f64> = gray
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .collect();
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

/// Mean of [`background_heat`] over the first `limit` images of a dataset.
pub fn mean_background_heat(net: &Lstd, params: &DetectorParams, dataset: &Dataset, layer: &str, limit: usize) -> Result<f64> {
    let heats: Vec<Option<f64>> = dataset
        .samples
        .par_iter()
        .take(limit)
        .map(|s| background_heat(net, params, &s.to_tensor(), &s.gt_boxes(), layer))
        .collect::<Result<_>>()?;
    let vals: Vec<f64> = heats.into_iter().flatten().collect();
    if vals.is_empty() {
        return Err(LstdError::Dataset("no image has background cells".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn det(image: &str, b: BBox, class_id: usize, confidence: f64) -> Detection {
        Detection {
            image_id: image.into(),
            bbox: b,
            class_id,
            confidence,
        }
    }

    fn truth(image: &str, boxes: &[(BBox, usize)]) -> ImageTruth {
        ImageTruth {
            image_id: image.into(),
            boxes: boxes.iter().map(|&(bbox, class_id)| LabeledBox { bbox, class_id }).collect(),
        }
    }

    #[test]
    fn single_correct_detection_scores_one() {
        let g = bx(0.1, 0.1, 0.5, 0.5);
        let t = [truth("a", &[(g, 1)])];
        let aps = voc_ap(&[det("a", g, 1, 0.9)], &t, 1, 0.5, ApMetric::ElevenPoint);
        assert_eq!(aps[0].ap, Some(1.0));
    }

    #[test]
    fn low_overlap_detection_scores_zero() {
        let g = bx(0.0, 0.0, 0.5, 0.5);
        // IoU = 0.1 / 0.25 = 0.4
        let d = bx(0.0, 0.0, 0.5, 0.2);
        assert!((iou(&g, &d) - 0.4).abs() < 1e-12);
        let t = [truth("a", &[(g, 1)])];
        let aps = voc_ap(&[det("a", d, 1, 0.9)], &t, 1, 0.5, ApMetric::ElevenPoint);
        assert_eq!(aps[0].ap, Some(0.0));
    }

    #[test]
    fn tp_fp_tp_hand_trace() {
        let g1 = bx(0.0, 0.0, 0.3, 0.3);
        let g2 = bx(0.6, 0.6, 0.9, 0.9);
        let t = [truth("a", &[(g1, 1), (g2, 1)])];
        let dets = [
            det("a", g1, 1, 0.9),
            det("a", bx(0.35, 0.35, 0.55, 0.55), 1, 0.8),
            det("a", g2, 1, 0.7),
        ];
        // PR points: (0.5, 1), (0.5, 0.5), (1, 2/3). Interpolated precision
        // is 1 at recall 0..0.5 (6 points) and 2/3 at 0.6..1 (5 points).
        let expected = (6.0 + 5.0 * 2.0 / 3.0) / 11.0;
        let aps = voc_ap(&dets, &t, 1, 0.5, ApMetric::ElevenPoint);
        assert!((aps[0].ap.unwrap() - expected).abs() < 1e-12);
        // all-point: 0.5·1 + 0.5·2/3
        let all = voc_ap(&dets, &t, 1, 0.5, ApMetric::AllPoint);
        assert!((all[0].ap.unwrap() - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicates_count_once() {
        let g = bx(0.1, 0.1, 0.5, 0.5);
        let t = [truth("a", &[(g, 1)])];
        let dets = [det("a", g, 1, 0.9), det("a", g, 1, 0.8), det("a", g, 1, 0.7)];
        let (flags, n) = match_class(&dets, &t, 1, 0.5);
        assert_eq!(n, 1);
        assert_eq!(flags.iter().filter(|f| f.1).count(), 1);
        let fps = false_positives(&dets, &t, 1, 0.5);
        assert_eq!(fps.len(), 2);
        assert_eq!(error_modes(&fps, &t).loc, 2);
    }

    #[test]
    fn class_without_truth_is_excluded() {
        let g = bx(0.1, 0.1, 0.5, 0.5);
        let t = [truth("a", &[(g, 1)])];
        let aps = voc_ap(&[det("a", g, 1, 0.9), det("a", g, 2, 0.9)], &t, 2, 0.5, ApMetric::ElevenPoint);
        assert_eq!(aps[1].ap, None);
        assert_eq!(mean_ap(&aps), 1.0);
    }

    #[test]
    fn error_mode_bands() {
        let g = bx(0.0, 0.0, 0.5, 0.5);
        let t = [truth("a", &[(g, 1)])];
        let far = det("a", bx(0.7, 0.7, 0.9, 0.9), 1, 0.5);
        // IoU = 0.075 / 0.25 = 0.3
        let loose = det("a", bx(0.0, 0.0, 0.5, 0.15), 1, 0.5);
        let other = det("a", bx(0.0, 0.0, 0.5, 0.4), 2, 0.5);
        assert_eq!(classify_false_positive(&far, &t[0].boxes), ErrorMode::Bg);
        assert_eq!(classify_false_positive(&loose, &t[0].boxes), ErrorMode::Loc);
        assert_eq!(classify_false_positive(&other, &t[0].boxes), ErrorMode::Cls);
        let h = error_modes(&[far, loose, other], &t);
        assert_eq!(h.total(), 3);
        assert!((h.loc_pct + h.cls_pct + h.bg_pct - 100.0).abs() < 1e-9);
    }

    #[test]
    fn postprocess_thresholds_and_suppresses() {
        let boxes = [bx(0.1, 0.1, 0.5, 0.5), bx(0.1, 0.1, 0.5, 0.48), bx(0.6, 0.6, 0.9, 0.9)];
        // K = 1: rows (background, class 1)
        let probs = [0.2, 0.8, 0.3, 0.7, 0.995, 0.005];
        let dets = postprocess("a", &boxes, &probs, 1, &DetectConfig::default());
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].confidence, 0.8);
    }

    #[test]
    fn constant_cube_gives_zero_heatmap() {
        let cube = Tensor::full(&[4, 3, 3], 2.5);
        let (h, w, gray) = normalized_channel_mean(&cube).unwrap();
        assert_eq!((h, w), (3, 3));
        assert!(gray.iter().all(|&v| v == 0));
        let ramp = Tensor::from_slice(&[1, 1, 3], &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(normalized_channel_mean(&ramp).unwrap().2, vec![0, 128, 255]);
    }

    #[test]
    fn nearest_upscale() {
        let up = upscale_nearest(2, 2, &[1, 2, 3, 4], 4, 4);
        assert_eq!(up, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    }
}
