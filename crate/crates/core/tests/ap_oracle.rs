//! Equivalence of the average-precision implementation against an exhaustive
//! threshold-enumeration oracle on randomized small scenes.
//!
//! The oracle is fully independent: its own IOU, its own greedy matcher, its
//! own envelope and trapezoid integration, re-run from scratch at every
//! distinct score threshold.

use npdk_core::detection::{Detection, GroundTruthBox};
use npdk_core::eval::average_precision;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn oracle_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let (ax0, ay0, ax1, ay1) = (a.0 - a.2 / 2.0, a.1 - a.3 / 2.0, a.0 + a.2 / 2.0, a.1 + a.3 / 2.0);
    let (bx0, by0, bx1, by1) = (b.0 - b.2 / 2.0, b.1 - b.3 / 2.0, b.0 + b.2 / 2.0, b.1 + b.3 / 2.0);
    let iw = ax1.min(bx1) - ax0.max(bx0);
    let ih = ay1.min(by1) - ay0.max(by0);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.2 * a.3 + b.2 * b.3 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy matching of the subset scoring at least `threshold`, recomputed
/// from scratch; returns (tp, detection count).
fn oracle_match_at(
    scenes: &[(Vec<Detection>, Vec<GroundTruthBox>)],
    threshold: f64,
    iou_thr: f64,
) -> (usize, usize) {
    let mut tp = 0;
    let mut count = 0;
    for (dets, gts) in scenes {
        let mut subset: Vec<&Detection> = dets.iter().filter(|d| d.score >= threshold).collect();
        subset.sort_by(|x, y| y.score.partial_cmp(&x.score).unwrap());
        count += subset.len();
        let mut taken = vec![false; gts.len()];
        for d in subset {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = oracle_iou((d.cx, d.cy, d.w, d.h), (gt.cx, gt.cy, gt.w, gt.h));
                if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                tp += 1;
            }
        }
    }
    (tp, count)
}

fn oracle_ap(scenes: &[(Vec<Detection>, Vec<GroundTruthBox>)], iou_thr: f64) -> f64 {
    let total_gts: usize = scenes.iter().map(|(_, g)| g.len()).sum();
    assert!(total_gts > 0);
    let mut thresholds: Vec<f64> = scenes
        .iter()
        .flat_map(|(d, _)| d.iter().map(|x| x.score))
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    if thresholds.is_empty() {
        return 0.0;
    }
    let mut points: Vec<(f64, f64)> = Vec::new();
    for &t in &thresholds {
        let (tp, count) = oracle_match_at(scenes, t, iou_thr);
        points.push((tp as f64 / total_gts as f64, tp as f64 / count as f64));
    }
    // monotone precision envelope from the right
    let mut running = 0.0f64;
    for p in points.iter_mut().rev() {
        running = running.max(p.1);
        p.1 = running;
    }
    // trapezoid over recall, anchored at recall zero
    let mut ap = 0.0;
    let mut prev = (0.0, points[0].1);
    for &(r, p) in &points {
        ap += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    ap
}

fn random_scenes(rng: &mut ChaCha8Rng) -> Vec<(Vec<Detection>, Vec<GroundTruthBox>)> {
    let n_images = rng.gen_range(1..=3);
    let mut scenes = Vec::new();
    let mut total_gts = 0;
    for _ in 0..n_images {
        let n_gts = rng.gen_range(0..=4);
        total_gts += n_gts;
        let gts: Vec<GroundTruthBox> = (0..n_gts)
            .map(|_| GroundTruthBox {
                cx: rng.gen_range(10.0..90.0),
                cy: rng.gen_range(10.0..90.0),
                w: rng.gen_range(5.0..30.0),
                h: rng.gen_range(5.0..30.0),
                class_id: 0,
            })
            .collect();
        let n_dets = rng.gen_range(0..=6);
        let dets: Vec<Detection> = (0..n_dets)
            .map(|_| {
                // half the detections perturb a ground truth, half are noise
                let (cx, cy, w, h) = if !gts.is_empty() && rng.gen_bool(0.5) {
                    let g = &gts[rng.gen_range(0..gts.len())];
                    (
                        g.cx + rng.gen_range(-6.0..6.0),
                        g.cy + rng.gen_range(-6.0..6.0),
                        g.w * rng.gen_range(0.7..1.4),
                        g.h * rng.gen_range(0.7..1.4),
                    )
                } else {
                    (
                        rng.gen_range(10.0..90.0),
                        rng.gen_range(10.0..90.0),
                        rng.gen_range(5.0..30.0),
                        rng.gen_range(5.0..30.0),
                    )
                };
                // quantized scores produce deliberate ties
                let score = (rng.gen_range(0.05f64..1.0) * 10.0).round() / 10.0;
                Detection {
                    cx,
                    cy,
                    w,
                    h,
                    confidence: score,
                    class_probs: vec![1.0],
                    class_id: 0,
                    score,
                }
            })
            .collect();
        scenes.push((dets, gts));
    }
    if total_gts == 0 {
        // ensure AP is defined
        scenes[0].1.push(GroundTruthBox {
            cx: 50.0,
            cy: 50.0,
            w: 10.0,
            h: 10.0,
            class_id: 0,
        });
    }
    scenes
}

#[test]
fn implementation_matches_exhaustive_oracle_on_500_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(20_000);
    for case in 0..500 {
        let scenes = random_scenes(&mut rng);
        let (ap, _) = average_precision(&scenes, 0.5).unwrap();
        let expected = oracle_ap(&scenes, 0.5);
        assert!(
            (ap - expected).abs() < 1e-12,
            "case {case}: ap {ap} vs oracle {expected}"
        );
    }
}

#[test]
fn worked_example_three_detections_two_truths() {
    // TP at .9, FP at .8, TP at .7 over two ground truths; the oracle fixes
    // the expected value at 5/6.
    let gts = vec![
        GroundTruthBox {
            cx: 10.0,
            cy: 10.0,
            w: 8.0,
            h: 8.0,
            class_id: 0,
        },
        GroundTruthBox {
            cx: 40.0,
            cy: 40.0,
            w: 8.0,
            h: 8.0,
            class_id: 0,
        },
    ];
    let mk = |cx: f64, cy: f64, score: f64| Detection {
        cx,
        cy,
        w: 8.0,
        h: 8.0,
        confidence: score,
        class_probs: vec![1.0],
        class_id: 0,
        score,
    };
    let scenes = vec![(
        vec![mk(10.0, 10.0, 0.9), mk(70.0, 70.0, 0.8), mk(40.0, 40.0, 0.7)],
        gts,
    )];
    let expected = oracle_ap(&scenes, 0.5);
    assert!((expected - 5.0 / 6.0).abs() < 1e-15);
    let (ap, _) = average_precision(&scenes, 0.5).unwrap();
    assert!((ap - expected).abs() < 1e-12);
}
