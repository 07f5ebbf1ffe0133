//! Detection matching, precision/recall, average precision over the PR
//! curve, classification accuracy, and per-group reporting.

use std::fmt::Write as _;

use thiserror::Error;

use crate::anchors::iou as rect_iou;
use crate::detection::{Detection, GroundTruthBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("average precision is undefined without ground-truth boxes")]
    NoGroundTruth,
    #[error("empty input: {0}")]
    EmptyInput(String),
}

/// Match counts plus per-detection true-positive flags ordered by descending
/// score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchOutcome {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub flags: Vec<bool>,
}

/// Greedy one-to-one matching by descending detection score: each detection
/// claims the unmatched ground truth with the highest IOU when that IOU
/// reaches `iou_threshold` (inclusive); every ground truth matches at most
/// once; leftovers are false negatives.
pub fn match_detections(
    detections: &[Detection],
    ground_truths: &[GroundTruthBox],
    iou_threshold: f64,
) -> MatchOutcome {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut gt_taken = vec![false; ground_truths.len()];
    let mut flags = Vec::with_capacity(detections.len());
    let mut tp = 0;
    for &idx in &order {
        let det_rect = detections[idx].rect();
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truths.iter().enumerate() {
            if gt_taken[g] {
                continue;
            }
            let v = rect_iou(&det_rect, &gt.rect());
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                gt_taken[g] = true;
                tp += 1;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    MatchOutcome {
        tp,
        fp: detections.len() - tp,
        fn_: ground_truths.len() - tp,
        flags,
    }
}

/// TP / (TP + FP); 1.0 when there are no detections at all.
pub fn precision(outcome: &MatchOutcome) -> f64 {
    if outcome.tp + outcome.fp == 0 {
        1.0
    } else {
        outcome.tp as f64 / (outcome.tp + outcome.fp) as f64
    }
}

/// TP / (TP + FN); 1.0 when there are no ground truths at all.
pub fn recall(outcome: &MatchOutcome) -> f64 {
    if outcome.tp + outcome.fn_ == 0 {
        1.0
    } else {
        outcome.tp as f64 / (outcome.tp + outcome.fn_) as f64
    }
}

/// One point of the precision/recall sweep, taken at a score threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score_threshold: f64,
}

/// Average precision over a set of scenes: detections are flagged TP/FP by
/// per-scene greedy matching, pooled and swept over every distinct score;
/// the PR points get the monotone precision envelope and are integrated by
/// trapezoid over recall.
pub fn average_precision(
    scenes: &[(Vec<Detection>, Vec<GroundTruthBox>)],
    iou_threshold: f64,
) -> Result<(f64, Vec<PrPoint>), EvalError> {
    let total_gts: usize = scenes.iter().map(|(_, gts)| gts.len()).sum();
    if total_gts == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    // per-scene greedy matching flags, pooled as (score, is_tp)
    let mut pool: Vec<(f64, bool)> = Vec::new();
    for (dets, gts) in scenes {
        let outcome = match_detections(dets, gts, iou_threshold);
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            dets[b]
                .score
                .partial_cmp(&dets[a].score)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for (rank, &idx) in order.iter().enumerate() {
            pool.push((dets[idx].score, outcome.flags[rank]));
        }
    }
    pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut points: Vec<PrPoint> = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (i, &(score, is_tp)) in pool.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let boundary = i + 1 == pool.len() || pool[i + 1].0 != score;
        if boundary {
            points.push(PrPoint {
                recall: tp as f64 / total_gts as f64,
                precision: tp as f64 / (tp + fp) as f64,
                score_threshold: score,
            });
        }
    }
    Ok((integrate_pr(&points), points))
}

/// Monotone precision envelope (from the right) followed by trapezoid
/// integration over recall, anchored at recall zero.
fn integrate_pr(points: &[PrPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut envelope: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    let mut running = 0.0f64;
    for p in envelope.iter_mut().rev() {
        running = running.max(p.1);
        p.1 = running;
    }
    let mut ap = 0.0;
    let mut prev = (0.0, envelope[0].1);
    for &(r, p) in &envelope {
        ap += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    ap
}

/// Fraction of exact matches between predicted and true class ids.
pub fn classification_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64, EvalError> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(EvalError::EmptyInput(format!(
            "{} predictions vs {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let correct = predicted
        .iter()
        .zip(truth.iter())
        .filter(|(a, b)| a == b)
        .count();
    Ok(correct as f64 / predicted.len() as f64)
}

/// Per-group AP results; `ap` is None for groups without ground truths,
/// which are excluded from the group mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub label: String,
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub num_gts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// AP pooled over all scenes.
    pub ap: f64,
    /// Precision/recall of the detections as provided (the operating point).
    pub precision: f64,
    pub recall: f64,
    pub groups: Vec<GroupResult>,
    /// Mean of per-group APs over groups that have ground truths.
    pub mean_group_ap: f64,
    pub accuracy: Option<f64>,
}

/// Pooled and per-group evaluation; groups appear in first-seen order.
pub fn per_group_report(
    samples: &[(String, Vec<Detection>, Vec<GroundTruthBox>)],
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyInput("no samples".into()));
    }
    let pooled: Vec<(Vec<Detection>, Vec<GroundTruthBox>)> = samples
        .iter()
        .map(|(_, d, g)| (d.clone(), g.clone()))
        .collect();
    let (ap, _) = average_precision(&pooled, iou_threshold)?;

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (_, dets, gts) in samples {
        let o = match_detections(dets, gts, iou_threshold);
        tp += o.tp;
        fp += o.fp;
        fn_ += o.fn_;
    }
    let pooled_outcome = MatchOutcome {
        tp,
        fp,
        fn_,
        flags: Vec::new(),
    };

    let mut labels: Vec<String> = Vec::new();
    for (label, _, _) in samples {
        if !labels.contains(label) {
            labels.push(label.clone());
        }
    }
    let mut groups = Vec::with_capacity(labels.len());
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    for label in labels {
        let scenes: Vec<(Vec<Detection>, Vec<GroundTruthBox>)> = samples
            .iter()
            .filter(|(l, _, _)| *l == label)
            .map(|(_, d, g)| (d.clone(), g.clone()))
            .collect();
        let mut gtp = 0;
        let mut gfp = 0;
        let mut gfn = 0;
        for (dets, gts) in &scenes {
            let o = match_detections(dets, gts, iou_threshold);
            gtp += o.tp;
            gfp += o.fp;
            gfn += o.fn_;
        }
        let outcome = MatchOutcome {
            tp: gtp,
            fp: gfp,
            fn_: gfn,
            flags: Vec::new(),
        };
        let group_ap = match average_precision(&scenes, iou_threshold) {
            Ok((v, _)) => {
                ap_sum += v;
                ap_n += 1;
                Some(v)
            }
            Err(EvalError::NoGroundTruth) => None,
            Err(e) => return Err(e),
        };
        groups.push(GroupResult {
            label,
            ap: group_ap,
            precision: precision(&outcome),
            recall: recall(&outcome),
            num_gts: gtp + gfn,
        });
    }

    Ok(EvalReport {
        ap,
        precision: precision(&pooled_outcome),
        recall: recall(&pooled_outcome),
        groups,
        mean_group_ap: if ap_n > 0 { ap_sum / ap_n as f64 } else { 0.0 },
        accuracy: None,
    })
}

/// `threshold,recall,precision` rows in sweep order.
pub fn pr_curve_csv(points: &[PrPoint]) -> String {
    let mut out = String::from("threshold,recall,precision\n");
    for p in points {
        let _ = writeln!(out, "{:.6},{:.6},{:.6}", p.score_threshold, p.recall, p.precision);
    }
    out
}

/// `group,ap,precision,recall` rows, one per group plus a pooled row.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("group,ap,precision,recall\n");
    for g in &report.groups {
        let ap = g
            .ap
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "undefined".into());
        let _ = writeln!(out, "{},{},{:.6},{:.6}", g.label, ap, g.precision, g.recall);
    }
    let _ = writeln!(
        out,
        "pooled,{:.6},{:.6},{:.6}",
        report.ap, report.precision, report.recall
    );
    out
}

/// Minimal SVG of the PR curve: unit axes and a single polyline.
pub fn pr_curve_svg(points: &[PrPoint]) -> String {
    let (w, h, margin) = (320.0, 320.0, 40.0);
    let sx = |r: f64| margin + r * (w - 2.0 * margin);
    let sy = |p: f64| h - margin - p * (h - 2.0 * margin);
    let mut path = String::new();
    for p in points {
        let _ = write!(path, "{:.2},{:.2} ", sx(p.recall), sy(p.precision));
    }
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{m}\" y1=\"{ym}\" x2=\"{xm}\" y2=\"{ym}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{ym}\" stroke=\"black\"/>\n",
            "<text x=\"{xm}\" y=\"{ylab}\" text-anchor=\"end\" font-size=\"12\">recall</text>\n",
            "<text x=\"{m}\" y=\"{ytop}\" font-size=\"12\">precision</text>\n",
            "<polyline fill=\"none\" stroke=\"crimson\" stroke-width=\"1.5\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        m = margin,
        xm = w - margin,
        ym = h - margin,
        ylab = h - margin + 16.0,
        ytop = margin - 8.0,
        pts = path.trim_end()
    )
}
