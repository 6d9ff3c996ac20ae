//! Brute-force reference implementations compared against the library on
//! randomized small instances.

mod common;

use common::brute::*;
use lstd::evaluation::{voc_ap, ApMetric, Detection};
use lstd::geometry::BBox;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 200;

fn assert_none(mismatch: Option<String>) {
    if let Some(m) = mismatch {
        panic!("{m}");
    }
}

#[test]
fn nms_matches_reference() {
    assert_none(nms_mismatch(INSTANCES));
}

#[test]
fn matching_matches_reference() {
    assert_none(matching_mismatch(INSTANCES));
}

#[test]
fn labeling_matches_reference() {
    assert_none(labeling_mismatch(INSTANCES));
}

#[test]
fn voc_ap_matches_reference() {
    assert_none(voc_ap_mismatch(INSTANCES));
}

#[test]
fn map_is_invariant_to_input_order_with_distinct_confidences() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let (mut dets, truth) = random_eval_instance(&mut rng);
        for (i, d) in dets.iter_mut().enumerate() {
            d.confidence = (i as f64 + 1.0) / 20.0;
        }
        let a = voc_ap(&dets, &truth, 2, 0.5, ApMetric::ElevenPoint);
        dets.reverse();
        let b = voc_ap(&dets, &truth, 2, 0.5, ApMetric::ElevenPoint);
        let aps = |v: &[lstd::evaluation::ClassAp]| v.iter().map(|c| c.ap).collect::<Vec<_>>();
        assert_eq!(aps(&a), aps(&b));
    }
}

proptest! {
    #[test]
    fn adding_a_true_positive_never_lowers_ap(seed in 0u64..10_000, conf in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, truth) = random_eval_instance(&mut rng);
        for class in 1..=2 {
            let before = voc_ap(&dets, &truth, 2, 0.5, ApMetric::ElevenPoint);
            // a gt of this class that no detection currently claims
            let (flags, _) = lstd::evaluation::match_class(&dets, &truth, class, 0.5);
            let claimed: Vec<(String, BBox)> = flags
                .iter()
                .filter(|f| f.1)
                .map(|f| (dets[f.0].image_id.clone(), dets[f.0].bbox))
                .collect();
            let free = truth.iter().flat_map(|t| t.boxes.iter().map(move |b| (t, b))).find(|(t, b)| {
                b.class_id == class
                    && !claimed.iter().any(|(id, d)| *id == t.image_id && lstd::geometry::iou(d, &b.bbox) >= 0.5)
            });
            let Some((t, g)) = free else { continue };
            let mut more = dets.clone();
            more.push(Detection { image_id: t.image_id.clone(), bbox: g.bbox, class_id: class, confidence: conf });
            let after = voc_ap(&more, &truth, 2, 0.5, ApMetric::ElevenPoint);
            let (a, b) = (before[class - 1].ap.unwrap(), after[class - 1].ap.unwrap());
            prop_assert!(b >= a - 1e-12, "class {}: {} -> {}", class, a, b);
        }
    }
}
