//! Grid target encoding, prediction decoding, the composite detection loss,
//! non-maximum suppression, and the assembled detector.

use rand::Rng;
use thiserror::Error;

use crate::anchors::{best_anchor, iou as rect_iou, AnchorError, AnchorSet, BoxSize, Rect};
use crate::arch::{he_normal, DetectionHeadSpec, NetCache, NetGrads, Network, SpecError};
use crate::data::{letterbox, DataError, Image};
use crate::nn::{Activation, ConvCache, ConvGrads, ConvLayer, ShapeError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("box center ({cx}, {cy}) outside image of size {size}")]
    BoxOutsideImage { cx: f64, cy: f64, size: usize },
    #[error("raw tensor has {got} channels, expected (C+5)*A = {expected}")]
    FilterCount { expected: usize, got: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Annotated box in input-image pixels, center coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

impl GroundTruthBox {
    pub fn rect(&self) -> Rect {
        Rect::from_center(self.cx, self.cy, self.w, self.h)
    }

    pub fn size(&self) -> BoxSize {
        BoxSize::new(self.h, self.w)
    }
}

/// Raw-channel layout per anchor: tx, ty, tw, th, objectness, C class logits.
pub const BOX_FIELDS: usize = 5;

/// Regression targets over an S x S grid with A anchors: at most one
/// responsible (anchor, cell) pair per ground-truth box.
#[derive(Debug, Clone)]
pub struct TargetGrid {
    pub num_anchors: usize,
    pub num_classes: usize,
    pub grid_size: usize,
    pub image_size: usize,
    /// (A, 5+C, S, S)
    pub data: Tensor,
    /// Responsibility mask, indexed a*S*S + gy*S + gx.
    pub responsible: Vec<bool>,
    /// Cell-anchor conflicts resolved by keeping the larger box.
    pub collisions: usize,
}

impl TargetGrid {
    #[inline]
    fn cell_index(&self, a: usize, gy: usize, gx: usize) -> usize {
        (a * self.grid_size + gy) * self.grid_size + gx
    }

    #[inline]
    fn value(&self, a: usize, field: usize, gy: usize, gx: usize) -> f64 {
        let s = self.grid_size;
        let ch = BOX_FIELDS + self.num_classes;
        self.data.data()[((a * ch + field) * s + gy) * s + gx]
    }
}

/// Assigns each box to the grid cell containing its center and to its best
/// size-matched anchor. Offsets tx, ty are the center's fractional position
/// inside the cell; tw, th are log size ratios against the anchor.
pub fn encode_targets(
    boxes: &[GroundTruthBox],
    grid_size: usize,
    anchors: &AnchorSet,
    image_size: usize,
    num_classes: usize,
) -> Result<TargetGrid, DetectError> {
    let s = grid_size;
    let ch = BOX_FIELDS + num_classes;
    let a_n = anchors.len();
    let mut grid = TargetGrid {
        num_anchors: a_n,
        num_classes,
        grid_size: s,
        image_size,
        data: Tensor::zeros(&[a_n, ch, s, s]),
        responsible: vec![false; a_n * s * s],
        collisions: 0,
    };
    let cell_px = image_size as f64 / s as f64;
    let mut occupant_area: Vec<f64> = vec![0.0; a_n * s * s];

    for b in boxes {
        if !(b.cx > 0.0 && b.cx < image_size as f64 && b.cy > 0.0 && b.cy < image_size as f64) {
            return Err(DetectError::BoxOutsideImage {
                cx: b.cx,
                cy: b.cy,
                size: image_size,
            });
        }
        let gx = ((b.cx / cell_px) as usize).min(s - 1);
        let gy = ((b.cy / cell_px) as usize).min(s - 1);
        let (anchor_idx, _) = best_anchor(b.size(), anchors)?;
        let cell = grid.cell_index(anchor_idx, gy, gx);
        let area = b.w * b.h;
        if grid.responsible[cell] {
            grid.collisions += 1;
            if area <= occupant_area[cell] {
                continue;
            }
        }
        occupant_area[cell] = area;
        grid.responsible[cell] = true;

        let anchor = anchors.anchors()[anchor_idx];
        let tx = b.cx / cell_px - gx as f64;
        let ty = b.cy / cell_px - gy as f64;
        let tw = (b.w / anchor.w).ln();
        let th = (b.h / anchor.h).ln();
        let base = |field: usize| ((anchor_idx * ch + field) * s + gy) * s + gx;
        let data = grid.data.data_mut();
        data[base(0)] = tx;
        data[base(1)] = ty;
        data[base(2)] = tw;
        data[base(3)] = th;
        data[base(4)] = 1.0;
        for c in 0..num_classes {
            data[base(BOX_FIELDS + c)] = if c == b.class_id { 1.0 } else { 0.0 };
        }
    }
    Ok(grid)
}

/// One scored box prediction in input-image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Objectness after the sigmoid, in [0, 1].
    pub confidence: f64,
    pub class_probs: Vec<f64>,
    pub class_id: usize,
    /// confidence * max class probability; the ranking key.
    pub score: f64,
}

impl Detection {
    pub fn rect(&self) -> Rect {
        Rect::from_center(self.cx, self.cy, self.w, self.h)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes a raw (A*(5+C), S, S) head output into detections scoring at
/// least `conf_threshold`. Centers are sigmoid offsets inside each cell;
/// sizes are anchor sizes scaled by exp of the raw values.
pub fn decode_predictions(
    raw: &Tensor,
    anchors: &AnchorSet,
    num_classes: usize,
    image_size: usize,
    conf_threshold: f64,
) -> Result<Vec<Detection>, DetectError> {
    let shape = raw.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(ShapeError::TensorMismatch {
            expected: vec![0, 0, 0],
            got: shape.to_vec(),
        }
        .into());
    }
    let ch = BOX_FIELDS + num_classes;
    let expected = ch * anchors.len();
    if shape[0] != expected {
        return Err(DetectError::FilterCount {
            expected,
            got: shape[0],
        });
    }
    let s = shape[1];
    let cell_px = image_size as f64 / s as f64;
    let data = raw.data();
    let at = |a: usize, field: usize, gy: usize, gx: usize| data[((a * ch + field) * s + gy) * s + gx];

    let mut out = Vec::new();
    for a in 0..anchors.len() {
        let anchor = anchors.anchors()[a];
        for gy in 0..s {
            for gx in 0..s {
                let confidence = sigmoid(at(a, 4, gy, gx));
                let mut probs = vec![1.0; num_classes];
                if num_classes > 1 {
                    let mut max = f64::NEG_INFINITY;
                    for c in 0..num_classes {
                        max = max.max(at(a, BOX_FIELDS + c, gy, gx));
                    }
                    let mut sum = 0.0;
                    for (c, p) in probs.iter_mut().enumerate() {
                        *p = (at(a, BOX_FIELDS + c, gy, gx) - max).exp();
                        sum += *p;
                    }
                    for p in probs.iter_mut() {
                        *p /= sum;
                    }
                }
                let (class_id, best_p) = probs
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| {
                        if p > acc.1 {
                            (i, p)
                        } else {
                            acc
                        }
                    });
                let score = confidence * best_p;
                if score < conf_threshold {
                    continue;
                }
                out.push(Detection {
                    cx: (gx as f64 + sigmoid(at(a, 0, gy, gx))) * cell_px,
                    cy: (gy as f64 + sigmoid(at(a, 1, gy, gx))) * cell_px,
                    w: anchor.w * at(a, 2, gy, gx).exp(),
                    h: anchor.h * at(a, 3, gy, gx).exp(),
                    confidence,
                    class_probs: probs,
                    class_id,
                    score,
                });
            }
        }
    }
    Ok(out)
}

/// Saturation used when inverting targets into raw logits; sigmoid(18.4) is
/// within 1e-8 of 1.
const IDEAL_LOGIT: f64 = 18.4;

/// Raw tensor that decodes back to exactly the encoded boxes: logit-inverted
/// offsets, log-ratio sizes verbatim, saturated objectness and class logits.
pub fn ideal_raw(target: &TargetGrid) -> Tensor {
    let (a_n, c_n, s) = (target.num_anchors, target.num_classes, target.grid_size);
    let ch = BOX_FIELDS + c_n;
    let mut raw = Tensor::zeros(&[a_n * ch, s, s]);
    let data = raw.data_mut();
    for a in 0..a_n {
        for gy in 0..s {
            for gx in 0..s {
                let base = |field: usize| ((a * ch + field) * s + gy) * s + gx;
                if target.responsible[target.cell_index(a, gy, gx)] {
                    let logit = |t: f64| {
                        let t = t.clamp(1e-12, 1.0 - 1e-12);
                        (t / (1.0 - t)).ln()
                    };
                    data[base(0)] = logit(target.value(a, 0, gy, gx));
                    data[base(1)] = logit(target.value(a, 1, gy, gx));
                    data[base(2)] = target.value(a, 2, gy, gx);
                    data[base(3)] = target.value(a, 3, gy, gx);
                    data[base(4)] = IDEAL_LOGIT;
                    for c in 0..c_n {
                        data[base(BOX_FIELDS + c)] =
                            if target.value(a, BOX_FIELDS + c, gy, gx) > 0.5 {
                                IDEAL_LOGIT
                            } else {
                                -IDEAL_LOGIT
                            };
                    }
                } else {
                    data[base(4)] = -IDEAL_LOGIT;
                }
            }
        }
    }
    raw
}

/// Greedy same-class suppression by descending score: a detection is dropped
/// when its IOU with an already-kept detection of the same class exceeds
/// `iou_threshold`. Kept detections stay in descending-score order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let cand = &detections[idx];
        let suppressed = kept.iter().any(|k| {
            k.class_id == cand.class_id && rect_iou(&k.rect(), &cand.rect()) > iou_threshold
        });
        if !suppressed {
            kept.push(cand.clone());
        }
    }
    kept
}

/// Loss weights for the composite squared-error detection loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YoloLossConfig {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub lambda_obj: f64,
    pub lambda_class: f64,
}

impl Default for YoloLossConfig {
    fn default() -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            lambda_obj: 1.0,
            lambda_class: 1.0,
        }
    }
}

/// Squared-error detection loss over one sample's raw (A*(5+C), S, S) output
/// and its gradient w.r.t. the raw logits.
///
/// Responsible cells pay coordinate, objectness-to-one, and class terms;
/// all other cells pay lambda_noobj * sigmoid(objectness)^2.
pub fn yolo_loss(
    raw: &Tensor,
    target: &TargetGrid,
    config: &YoloLossConfig,
) -> Result<(f64, Tensor), DetectError> {
    let (a_n, c_n, s) = (target.num_anchors, target.num_classes, target.grid_size);
    let ch = BOX_FIELDS + c_n;
    if raw.shape() != [a_n * ch, s, s] {
        return Err(ShapeError::TensorMismatch {
            expected: vec![a_n * ch, s, s],
            got: raw.shape().to_vec(),
        }
        .into());
    }
    let data = raw.data();
    let mut grad = Tensor::zeros(raw.shape());
    let gdata = grad.data_mut();
    let mut loss = 0.0;
    let at = |a: usize, f: usize, gy: usize, gx: usize| data[((a * ch + f) * s + gy) * s + gx];
    let gi = |a: usize, f: usize, gy: usize, gx: usize| ((a * ch + f) * s + gy) * s + gx;

    for a in 0..a_n {
        for gy in 0..s {
            for gx in 0..s {
                let obj_logit = at(a, 4, gy, gx);
                let obj = sigmoid(obj_logit);
                let dsig_obj = obj * (1.0 - obj);
                if target.responsible[target.cell_index(a, gy, gx)] {
                    // center offsets through sigmoid
                    for f in 0..2 {
                        let p = sigmoid(at(a, f, gy, gx));
                        let d = p - target.value(a, f, gy, gx);
                        loss += config.lambda_coord * d * d;
                        gdata[gi(a, f, gy, gx)] =
                            2.0 * config.lambda_coord * d * p * (1.0 - p);
                    }
                    // log-size offsets, raw
                    for f in 2..4 {
                        let d = at(a, f, gy, gx) - target.value(a, f, gy, gx);
                        loss += config.lambda_coord * d * d;
                        gdata[gi(a, f, gy, gx)] = 2.0 * config.lambda_coord * d;
                    }
                    // objectness towards 1
                    let d = obj - 1.0;
                    loss += config.lambda_obj * d * d;
                    gdata[gi(a, 4, gy, gx)] = 2.0 * config.lambda_obj * d * dsig_obj;
                    // class probabilities through softmax
                    let mut max = f64::NEG_INFINITY;
                    for c in 0..c_n {
                        max = max.max(at(a, BOX_FIELDS + c, gy, gx));
                    }
                    let mut probs = vec![0.0; c_n];
                    let mut sum = 0.0;
                    for (c, p) in probs.iter_mut().enumerate() {
                        *p = (at(a, BOX_FIELDS + c, gy, gx) - max).exp();
                        sum += *p;
                    }
                    for p in probs.iter_mut() {
                        *p /= sum;
                    }
                    let mut dot = 0.0;
                    let mut diffs = vec![0.0; c_n];
                    for c in 0..c_n {
                        diffs[c] = probs[c] - target.value(a, BOX_FIELDS + c, gy, gx);
                        loss += config.lambda_class * diffs[c] * diffs[c];
                        dot += diffs[c] * probs[c];
                    }
                    for c in 0..c_n {
                        gdata[gi(a, BOX_FIELDS + c, gy, gx)] =
                            2.0 * config.lambda_class * probs[c] * (diffs[c] - dot);
                    }
                } else {
                    loss += config.lambda_noobj * obj * obj;
                    gdata[gi(a, 4, gy, gx)] = 2.0 * config.lambda_noobj * obj * dsig_obj;
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Backbone + 1x1 detection head with the anchor set and input geometry they
/// were built for.
pub struct Detector {
    pub backbone: Network,
    pub head: ConvLayer,
    pub head_spec: DetectionHeadSpec,
    pub anchors: AnchorSet,
    pub input_size: usize,
    pub class_names: Vec<String>,
}

pub struct DetectorCache {
    backbone: NetCache,
    head: ConvCache,
}

pub struct DetectorGrads {
    pub backbone: NetGrads,
    pub head: ConvGrads,
}

impl DetectorGrads {
    /// Gradients aligned with [`Detector::parameters`].
    pub fn flat(&self) -> Vec<&Tensor> {
        let mut v = self.backbone.flat();
        v.extend(self.head.flat());
        v
    }

    pub fn add_assign(&mut self, other: &DetectorGrads) -> Result<(), ShapeError> {
        self.backbone.add_assign(&other.backbone)?;
        self.head.kernel.add_assign(&other.head.kernel)?;
        self.head.bias.add_assign(&other.head.bias)?;
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.backbone.scale(s);
        self.head.kernel.scale(s);
        self.head.bias.scale(s);
    }
}

impl Detector {
    /// Attaches a raw-logit 1x1 head to an initialized backbone. The backbone
    /// output grid must match `head_spec.grid_size`.
    pub fn new<R: Rng>(
        backbone: Network,
        head_spec: DetectionHeadSpec,
        anchors: AnchorSet,
        class_names: Vec<String>,
        rng: &mut R,
    ) -> Result<Self, DetectError> {
        if anchors.len() != head_spec.num_anchors {
            return Err(DetectError::FilterCount {
                expected: head_spec.num_anchors,
                got: anchors.len(),
            });
        }
        let (c, h, w) = backbone.spec.output_dim()?;
        if h != head_spec.grid_size || w != head_spec.grid_size {
            return Err(SpecError::Invalid(format!(
                "backbone grid {h}x{w} does not match head grid {}",
                head_spec.grid_size
            ))
            .into());
        }
        let input_size = backbone.spec.input_shape.1;
        let mut head = ConvLayer::new(
            c,
            head_spec.filters,
            (1, 1),
            1,
            0,
            false,
            Activation::None,
        );
        // small init keeps the raw logits near zero, so decoding starts from
        // anchor-shaped boxes at confidence 0.5 instead of saturated noise
        head.kernel = he_normal(rng, head.kernel.shape(), c);
        head.kernel.scale(0.1);
        Ok(Self {
            backbone,
            head,
            head_spec,
            anchors,
            input_size,
            class_names,
        })
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut v = self.backbone.parameters();
        v.extend(self.head.params());
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.parameters_mut();
        v.extend(self.head.params_mut());
        v
    }

    pub fn state_tensors(&self) -> Vec<&Tensor> {
        let mut v = self.backbone.state_tensors();
        v.extend(self.head.state_tensors());
        v
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.state_tensors_mut();
        v.extend(self.head.state_tensors_mut());
        v
    }

    /// Raw head output (B, (C+5)*A, S, S) in training mode, with caches.
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<(Tensor, DetectorCache), DetectError> {
        let (features, bcache) = self.backbone.forward_train(batch)?;
        let (raw, hcache) = self.head.forward_train(&features)?;
        Ok((
            raw,
            DetectorCache {
                backbone: bcache,
                head: hcache,
            },
        ))
    }

    pub fn forward_infer(&self, batch: &Tensor) -> Result<Tensor, DetectError> {
        let features = self.backbone.forward_infer(batch)?;
        Ok(self.head.forward_infer(&features)?)
    }

    pub fn backward(
        &self,
        cache: &DetectorCache,
        grad_raw: &Tensor,
    ) -> Result<DetectorGrads, DetectError> {
        let (gfeat, head_grads) = self.head.backward(&cache.head, grad_raw)?;
        let (_, backbone_grads) = self.backbone.backward(&cache.backbone, &gfeat)?;
        Ok(DetectorGrads {
            backbone: backbone_grads,
            head: head_grads,
        })
    }

    /// Extracts one sample's (A*(5+C), S, S) slice from a batched raw tensor.
    pub fn sample_raw(raw_batch: &Tensor, index: usize) -> Result<Tensor, ShapeError> {
        let shape = raw_batch.shape();
        if shape.len() != 4 || index >= shape[0] {
            return Err(ShapeError::TensorMismatch {
                expected: vec![index + 1, 0, 0, 0],
                got: shape.to_vec(),
            });
        }
        let per = shape[1] * shape[2] * shape[3];
        let data = raw_batch.data()[index * per..(index + 1) * per].to_vec();
        Tensor::from_vec(&shape[1..], data)
    }

    /// Full pipeline on one image: letterbox, forward, decode, NMS, inverse
    /// letterbox; detections come back in original-image pixels.
    pub fn detect(
        &self,
        image: &Image,
        conf_threshold: f64,
        nms_threshold: f64,
    ) -> Result<Vec<Detection>, DetectError> {
        let (boxed, tf) = letterbox(image, self.input_size)?;
        let raw_batch = self.forward_infer(&boxed.to_tensor())?;
        let raw = Self::sample_raw(&raw_batch, 0)?;
        let dets = decode_predictions(
            &raw,
            &self.anchors,
            self.head_spec.num_classes,
            self.input_size,
            conf_threshold,
        )?;
        let kept = nms(&dets, nms_threshold);
        Ok(kept
            .into_iter()
            .map(|d| {
                let rect = tf.rect_to_original(&d.rect());
                Detection {
                    cx: rect.x + rect.w / 2.0,
                    cy: rect.y + rect.h / 2.0,
                    w: rect.w,
                    h: rect.h,
                    ..d
                }
            })
            .collect())
    }
}
