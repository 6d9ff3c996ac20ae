//! Brute-force reference implementations of the detection utilities and
//! randomized instance generators. Shared by the oracle tests and the
//! acceptance harness.

#![allow(dead_code)]

use lstd::evaluation::{voc_ap, ApMetric, Detection, ImageTruth};
use lstd::geometry::{match_defaults, nms, BBox, LabeledBox};
use lstd::model::label_proposals;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let h = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = w * h;
    let union = (a.xmax - a.xmin) * (a.ymax - a.ymin) + (b.xmax - b.xmin) * (b.ymax - b.ymin) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(0.05..0.6);
    let h = rng.random_range(0.05..0.6);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// A box near `b`, so overlaps of every size occur.
pub fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let d = |rng: &mut ChaCha8Rng| rng.random_range(-0.12..0.12);
    let x0 = (b.xmin + d(rng)).clamp(0.0, 0.9);
    let y0 = (b.ymin + d(rng)).clamp(0.0, 0.9);
    let x1 = (b.xmax + d(rng)).clamp(x0 + 0.02, 1.0);
    let y1 = (b.ymax + d(rng)).clamp(y0 + 0.02, 1.0);
    BBox::new(x0, y0, x1, y1).unwrap()
}

pub fn clustered(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    let seeds: Vec<BBox> = (0..3).map(|_| random_box(rng)).collect();
    (0..n)
        .map(|_| {
            let s = &seeds[rng.random_range(0..seeds.len())];
            if rng.random_bool(0.8) {
                jitter(rng, s)
            } else {
                random_box(rng)
            }
        })
        .collect()
}

/// Repeatedly take the best remaining box and discard everything that
/// overlaps it too much.
pub fn ref_nms(boxes: &[(BBox, f64)], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| boxes[i].1 > boxes[b].1) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && ref_iou(&boxes[i].0, &boxes[b].0) > thr {
                alive[i] = false;
            }
        }
    }
    kept
}

/// Sort all (gt, default) pairs by IoU once and take each pair whose gt and
/// default are both still free; then threshold the rest.
pub fn ref_match(defaults: &[BBox], gts: &[LabeledBox], thr: f64) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (g, gt) in gts.iter().enumerate() {
        for (d, def) in defaults.iter().enumerate() {
            pairs.push((ref_iou(&gt.bbox, def), g, d));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; defaults.len()];
    let mut gt_used = vec![false; gts.len()];
    for &(_, g, d) in &pairs {
        if !gt_used[g] && out[d].is_none() {
            out[d] = Some(g);
            gt_used[g] = true;
        }
    }
    for d in 0..defaults.len() {
        if out[d].is_some() {
            continue;
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for (g, gt) in gts.iter().enumerate() {
            let v = ref_iou(&gt.bbox, &defaults[d]);
            if v > best.0 {
                best = (v, g);
            }
        }
        if best.0 >= thr {
            out[d] = Some(best.1);
        }
    }
    out
}

pub fn ref_labels(props: &[BBox], gts: &[LabeledBox], pos: f64, neg: f64) -> Vec<Option<usize>> {
    props
        .iter()
        .map(|p| {
            let mut best = 0.0;
            let mut class = 0;
            for g in gts {
                let v = ref_iou(p, &g.bbox);
                if v > best {
                    best = v;
                    class = g.class_id;
                }
            }
            if best >= pos {
                Some(class)
            } else if best < neg {
                Some(0)
            } else {
                None
            }
        })
        .collect()
}

/// Matches detections with an explicit claimed-set and enumerates the
/// precision at every rank cutoff.
pub fn ref_ap(dets: &[Detection], truth: &[ImageTruth], class: usize) -> Option<f64> {
    let n_gt: usize = truth.iter().map(|t| t.boxes.iter().filter(|b| b.class_id == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == class).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut claimed: Vec<(String, usize)> = Vec::new();
    let mut tp = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let t = truth.iter().find(|t| t.image_id == d.image_id).unwrap();
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in t.boxes.iter().enumerate() {
            if g.class_id != class {
                continue;
            }
            let v = ref_iou(&d.bbox, &g.bbox);
            if best.is_none_or(|b| v > b.1) {
                best = Some((j, v));
            }
        }
        let hit = match best {
            Some((j, v)) if v >= 0.5 && !claimed.contains(&(d.image_id.clone(), j)) => {
                claimed.push((d.image_id.clone(), j));
                true
            }
            _ => false,
        };
        tp.push(hit);
    }
    let mut total = 0.0;
    for step in 0..=10 {
        let t = step as f64 / 10.0;
        let mut best = 0.0f64;
        for cut in 1..=tp.len() {
            let hits = tp[..cut].iter().filter(|&&h| h).count();
            let recall = hits as f64 / n_gt as f64;
            let precision = hits as f64 / cut as f64;
            if recall >= t {
                best = best.max(precision);
            }
        }
        total += best;
    }
    Some(total / 11.0)
}

pub fn random_eval_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<ImageTruth>) {
    let truth: Vec<ImageTruth> = (0..2)
        .map(|i| ImageTruth {
            image_id: format!("img{i}"),
            boxes: (0..rng.random_range(0..=3))
                .map(|_| LabeledBox {
                    bbox: random_box(rng),
                    class_id: rng.random_range(1..=2),
                })
                .collect(),
        })
        .collect();
    let n = rng.random_range(0..=10);
    let dets = (0..n)
        .map(|_| {
            let t = &truth[rng.random_range(0..truth.len())];
            let bbox = match t.boxes.get(rng.random_range(0..t.boxes.len().max(1))) {
                Some(g) if rng.random_bool(0.7) => jitter(rng, &g.bbox),
                _ => random_box(rng),
            };
            Detection {
                image_id: t.image_id.clone(),
                bbox,
                class_id: rng.random_range(1..=2),
                // coarse grid so equal confidences occur
                confidence: rng.random_range(1..=5) as f64 / 5.0,
            }
        })
        .collect();
    (dets, truth)
}

/// First instance where NMS disagrees with the reference.
pub fn nms_mismatch(instances: u64) -> Option<String> {
    (0..instances).find_map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(0..=10);
        let boxes: Vec<(BBox, f64)> = clustered(&mut rng, n)
            .into_iter()
            .map(|b| (b, rng.random_range(0.0..1.0)))
            .collect();
        let thr = rng.random_range(0.2..0.8);
        let (got, want) = (nms(&boxes, thr, usize::MAX), ref_nms(&boxes, thr));
        (got != want).then(|| format!("nms instance {seed}: {got:?} vs {want:?}"))
    })
}

pub fn matching_mismatch(instances: u64) -> Option<String> {
    (0..instances).find_map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n_defaults = rng.random_range(1..=10);
        let defaults = clustered(&mut rng, n_defaults);
        let n_gts = rng.random_range(1..=5);
        let gts: Vec<LabeledBox> = clustered(&mut rng, n_gts)
            .into_iter()
            .map(|bbox| LabeledBox { bbox, class_id: 1 })
            .collect();
        let got = match_defaults(&defaults, &gts, 0.5);
        let want = ref_match(&defaults, &gts, 0.5);
        if got != want {
            return Some(format!("matching instance {seed}: {got:?} vs {want:?}"));
        }
        // every gt claims a default when there are enough of them
        let unclaimed = defaults.len() >= gts.len() && (0..gts.len()).any(|g| !got.contains(&Some(g)));
        unclaimed.then(|| format!("matching instance {seed}: a ground truth claimed no default"))
    })
}

pub fn labeling_mismatch(instances: u64) -> Option<String> {
    (0..instances).find_map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let all = clustered(&mut rng, 10);
        let n_gt = rng.random_range(1..=4);
        let gts: Vec<LabeledBox> = all[..n_gt]
            .iter()
            .map(|&bbox| LabeledBox {
                bbox,
                class_id: rng.random_range(1..=3),
            })
            .collect();
        let props: Vec<BBox> = all.iter().map(|b| jitter(&mut rng, b)).collect();
        let got = label_proposals(&props, &gts, 0.5, 0.3);
        let want = ref_labels(&props, &gts, 0.5, 0.3);
        (got != want).then(|| format!("labeling instance {seed}: {got:?} vs {want:?}"))
    })
}

pub fn voc_ap_mismatch(instances: u64) -> Option<String> {
    (0..instances).find_map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (dets, truth) = random_eval_instance(&mut rng);
        voc_ap(&dets, &truth, 2, 0.5, ApMetric::ElevenPoint).iter().find_map(|c| {
            let want = ref_ap(&dets, &truth, c.class_id);
            let agree = match (c.ap, want) {
                (Some(a), Some(b)) => (a - b).abs() < 1e-12 && (0.0..=1.0).contains(&a),
                (a, b) => a == b,
            };
            (!agree).then(|| format!("AP instance {seed} class {}: {:?} vs {want:?}", c.class_id, c.ap))
        })
    })
}
