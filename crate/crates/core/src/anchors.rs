//! Pyramid-of-anchors generation and IOU coverage analysis of bounding-box
//! size distributions.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnchorError {
    #[error("pyramid needs at least one base size")]
    EmptyBases,
    #[error("pyramid scale must be > 1, got {0}")]
    BadScale(f64),
    #[error("anchor set is empty")]
    EmptyAnchors,
    #[error("box list is empty")]
    EmptyBoxes,
}

/// A bounding-box size in pixels, height first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSize {
    pub h: f64,
    pub w: f64,
}

impl BoxSize {
    pub fn new(h: f64, w: f64) -> Self {
        Self { h, w }
    }

    pub fn area(&self) -> f64 {
        self.h * self.w
    }
}

/// Geometric anchor pyramid: every base size scaled through `num_levels`
/// powers of `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    pub base_sizes: Vec<BoxSize>,
    pub num_levels: usize,
    pub scale: f64,
}

impl Default for PyramidConfig {
    /// Six minimum plate sizes, 15 levels, scale 1.3: 90 anchors.
    fn default() -> Self {
        Self {
            base_sizes: vec![
                BoxSize::new(10.0, 10.0),
                BoxSize::new(10.0, 20.0),
                BoxSize::new(10.0, 30.0),
                BoxSize::new(10.0, 40.0),
                BoxSize::new(10.0, 50.0),
                BoxSize::new(30.0, 14.0),
            ],
            num_levels: 15,
            scale: 1.3,
        }
    }
}

/// Ordered anchor sizes: base index major, pyramid level minor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<BoxSize>,
    pub provenance: PyramidConfig,
}

impl AnchorSet {
    pub fn anchors(&self) -> &[BoxSize] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Set with explicit sizes; provenance records them as one-level bases.
    pub fn from_sizes(sizes: Vec<BoxSize>) -> Result<Self, AnchorError> {
        if sizes.is_empty() {
            return Err(AnchorError::EmptyAnchors);
        }
        Ok(Self {
            provenance: PyramidConfig {
                base_sizes: sizes.clone(),
                num_levels: 1,
                scale: f64::INFINITY,
            },
            anchors: sizes,
        })
    }
}

/// Anchor (i, k) has size base_sizes[i] * scale^k for k in 0..num_levels.
pub fn generate_pyramid(config: &PyramidConfig) -> Result<AnchorSet, AnchorError> {
    if config.base_sizes.is_empty() {
        return Err(AnchorError::EmptyBases);
    }
    if !(config.scale > 1.0) {
        return Err(AnchorError::BadScale(config.scale));
    }
    let mut anchors = Vec::with_capacity(config.base_sizes.len() * config.num_levels);
    for base in &config.base_sizes {
        for level in 0..config.num_levels {
            let factor = config.scale.powi(level as i32);
            anchors.push(BoxSize::new(base.h * factor, base.w * factor));
        }
    }
    Ok(AnchorSet {
        anchors,
        provenance: config.clone(),
    })
}

/// Axis-aligned rectangle, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union of two rectangles. Degenerate zero-area boxes
/// yield 0 against anything, including themselves.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// IOU of two sizes placed co-centered, the anchor-assignment convention:
/// intersection is min(w)*min(h) since both boxes share a center.
pub fn size_iou(a: BoxSize, b: BoxSize) -> f64 {
    let inter = a.w.min(b.w) * a.h.min(b.h);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Index and IOU of the best co-centered anchor for `size`; ties break to
/// the lowest index. Values within 1e-12 count as ties so that mathematically
/// equal candidates computed along different float routes resolve the same
/// way.
pub fn best_anchor(size: BoxSize, anchors: &AnchorSet) -> Result<(usize, f64), AnchorError> {
    if anchors.is_empty() {
        return Err(AnchorError::EmptyAnchors);
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, anchor) in anchors.anchors().iter().enumerate() {
        let v = size_iou(size, *anchor);
        if v > best.1 + 1e-12 {
            best = (i, v);
        }
    }
    Ok(best)
}

pub const COVERAGE_HISTOGRAM_BINS: usize = 20;

/// Best-anchor IOU statistics over a box-size population.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub min_best_iou: f64,
    pub mean_best_iou: f64,
    /// Counts of best-IOU values over 20 equal bins spanning [0, 1].
    pub histogram: [usize; COVERAGE_HISTOGRAM_BINS],
    /// (anchor index, best IOU) per input box, in input order.
    pub assignments: Vec<(usize, f64)>,
}

pub fn coverage_stats(boxes: &[BoxSize], anchors: &AnchorSet) -> Result<CoverageReport, AnchorError> {
    if boxes.is_empty() {
        return Err(AnchorError::EmptyBoxes);
    }
    let mut assignments = Vec::with_capacity(boxes.len());
    let mut histogram = [0usize; COVERAGE_HISTOGRAM_BINS];
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    for b in boxes {
        let (idx, v) = best_anchor(*b, anchors)?;
        min = min.min(v);
        sum += v;
        let bin = ((v * COVERAGE_HISTOGRAM_BINS as f64) as usize).min(COVERAGE_HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
        assignments.push((idx, v));
    }
    Ok(CoverageReport {
        min_best_iou: min,
        mean_best_iou: sum / boxes.len() as f64,
        histogram,
        assignments,
    })
}

impl CoverageReport {
    /// Per-box rows followed by a `min,mean` summary section.
    pub fn to_csv(&self, boxes: &[BoxSize]) -> String {
        let mut out = String::from("box_h,box_w,best_anchor_index,best_iou\n");
        for (b, (idx, v)) in boxes.iter().zip(self.assignments.iter()) {
            let _ = writeln!(out, "{:.6},{:.6},{},{:.6}", b.h, b.w, idx, v);
        }
        out.push_str("min,mean\n");
        let _ = writeln!(out, "{:.6},{:.6}", self.min_best_iou, self.mean_best_iou);
        out
    }
}

/// Parses `"10x10,10x20,30x14"` into box sizes (height x width).
pub fn parse_box_list(text: &str) -> Result<Vec<BoxSize>, AnchorError> {
    let mut sizes = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (h, w) = part.split_once('x').ok_or(AnchorError::EmptyBases)?;
        let h: f64 = h.trim().parse().map_err(|_| AnchorError::EmptyBases)?;
        let w: f64 = w.trim().parse().map_err(|_| AnchorError::EmptyBases)?;
        sizes.push(BoxSize::new(h, w));
    }
    if sizes.is_empty() {
        return Err(AnchorError::EmptyBases);
    }
    Ok(sizes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_pyramid_has_ninety_anchors_in_documented_order() {
        let set = generate_pyramid(&PyramidConfig::default()).unwrap();
        assert_eq!(set.len(), 90);
        // base-major, level-minor: anchor 15 starts the second base (10x20)
        assert_eq!(set.anchors()[15], BoxSize::new(10.0, 20.0));
        // level 2 of the first base: 10 * 1.3^2 = 16.9
        let a = set.anchors()[2];
        assert!((a.h - 16.9).abs() < 1e-12 && (a.w - 16.9).abs() < 1e-12);
    }

    #[test]
    fn single_base_single_level_is_the_base() {
        let cfg = PyramidConfig {
            base_sizes: vec![BoxSize::new(7.0, 3.0)],
            num_levels: 1,
            scale: 2.0,
        };
        let set = generate_pyramid(&cfg).unwrap();
        assert_eq!(set.anchors(), &[BoxSize::new(7.0, 3.0)]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let empty = PyramidConfig {
            base_sizes: vec![],
            num_levels: 3,
            scale: 1.3,
        };
        assert_eq!(generate_pyramid(&empty), Err(AnchorError::EmptyBases));
        let flat = PyramidConfig {
            base_sizes: vec![BoxSize::new(1.0, 1.0)],
            num_levels: 3,
            scale: 1.0,
        };
        assert!(matches!(generate_pyramid(&flat), Err(AnchorError::BadScale(_))));
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = Rect::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = Rect::new(20.0, 0.0, 5.0, 5.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_overlap_worked_example() {
        // (0,0,10,10) vs (5,0,10,10): intersection 50, union 150
        let a = Rect::new(0.0, 0.0, 10.0, 10.0);
        let b = Rect::new(5.0, 0.0, 10.0, 10.0);
        let v = iou(&a, &b);
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn degenerate_box_has_zero_iou_even_with_itself() {
        let z = Rect::new(3.0, 3.0, 0.0, 5.0);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn best_anchor_exact_match_and_containment() {
        let set = generate_pyramid(&PyramidConfig::default()).unwrap();
        let (idx, v) = best_anchor(BoxSize::new(10.0, 20.0), &set).unwrap();
        assert_eq!(idx, 15);
        assert_eq!(v, 1.0);

        // 13x13 against {10x10, 16.9x16.9}: 13 is the geometric mean of the
        // two anchors, so both give exactly 100/169 and the tie goes low.
        let two = AnchorSet::from_sizes(vec![
            BoxSize::new(10.0, 10.0),
            BoxSize::new(16.9, 16.9),
        ])
        .unwrap();
        let (idx, v) = best_anchor(BoxSize::new(13.0, 13.0), &two).unwrap();
        assert_eq!(idx, 0);
        assert!((v - 100.0 / 169.0).abs() < 1e-12);
    }

    #[test]
    fn aspect_preserving_scale_gives_inverse_square_iou() {
        let anchor = BoxSize::new(12.0, 30.0);
        let set = AnchorSet::from_sizes(vec![anchor]).unwrap();
        for s in [1.0, 1.15, 1.3, 2.0] {
            let boxed = BoxSize::new(anchor.h * s, anchor.w * s);
            let (_, v) = best_anchor(boxed, &set).unwrap();
            assert!((v - 1.0 / (s * s)).abs() < 1e-12, "scale {s}");
        }
    }

    #[test]
    fn coverage_of_exact_anchor_sizes_is_perfect() {
        let set = generate_pyramid(&PyramidConfig::default()).unwrap();
        let boxes: Vec<BoxSize> = set.anchors().to_vec();
        let report = coverage_stats(&boxes, &set).unwrap();
        assert_eq!(report.min_best_iou, 1.0);
        assert_eq!(report.mean_best_iou, 1.0);
        assert_eq!(report.histogram[COVERAGE_HISTOGRAM_BINS - 1], 90);
    }

    #[test]
    fn coverage_of_uniformly_scaled_boxes() {
        // Boxes one scale step past the last pyramid level: the nearest
        // anchor contains them co-centered at ratio 1.3, so every best IOU
        // is the containment value 1/1.3^2.
        let cfg = PyramidConfig {
            base_sizes: vec![BoxSize::new(10.0, 10.0)],
            num_levels: 2,
            scale: 1.3,
        };
        let set = generate_pyramid(&cfg).unwrap();
        let boxes = vec![BoxSize::new(16.9, 16.9); 4];
        let report = coverage_stats(&boxes, &set).unwrap();
        let expect = 1.0 / (1.3 * 1.3);
        assert!((report.min_best_iou - expect).abs() < 1e-9);
        assert!((report.mean_best_iou - expect).abs() < 1e-9);
        assert_eq!(report.min_best_iou, report.mean_best_iou);
    }

    #[test]
    fn csv_layout() {
        let set = AnchorSet::from_sizes(vec![BoxSize::new(10.0, 10.0)]).unwrap();
        let boxes = vec![BoxSize::new(10.0, 10.0)];
        let report = coverage_stats(&boxes, &set).unwrap();
        let csv = report.to_csv(&boxes);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "box_h,box_w,best_anchor_index,best_iou");
        assert_eq!(lines[1], "10.000000,10.000000,0,1.000000");
        assert_eq!(lines[2], "min,mean");
        assert_eq!(lines[3], "1.000000,1.000000");
    }

    #[test]
    fn parse_box_list_round_trip() {
        let sizes = parse_box_list("10x10, 10x20,30x14").unwrap();
        assert_eq!(sizes.len(), 3);
        assert_eq!(sizes[2], BoxSize::new(30.0, 14.0));
        assert!(parse_box_list("").is_err());
        assert!(parse_box_list("10by10").is_err());
    }
}
