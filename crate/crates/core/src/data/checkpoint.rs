//! Binary model checkpoints: magic, version, a plain-text config block that
//! rebuilds the architecture, little-endian f32 parameter blobs, and a
//! trailing FNV-1a content checksum.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fnv1a64, DataError};
use crate::anchors::{AnchorSet, BoxSize};
use crate::arch::{DetectionHeadSpec, Network, NetworkSpec};
use crate::detection::Detector;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NPDK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub struct ClassifierModel {
    pub network: Network,
    pub class_names: Vec<String>,
}

pub type DetectorModel = Detector;

pub enum Model {
    Classifier(ClassifierModel),
    Detector(DetectorModel),
}

impl Model {
    pub fn state_tensors(&self) -> Vec<&Tensor> {
        match self {
            Model::Classifier(m) => m.network.state_tensors(),
            Model::Detector(d) => d.state_tensors(),
        }
    }

    fn state_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Classifier(m) => m.network.state_tensors_mut(),
            Model::Detector(d) => d.state_tensors_mut(),
        }
    }

    fn config_text(&self) -> String {
        match self {
            Model::Classifier(m) => {
                let mut text = String::from("kind=classifier\n");
                text.push_str(&format!("class_names={}\n", m.class_names.join(",")));
                text.push_str("[network]\n");
                text.push_str(&m.network.spec.to_config_text());
                text
            }
            Model::Detector(d) => {
                let mut text = String::from("kind=detector\n");
                text.push_str(&format!("class_names={}\n", d.class_names.join(",")));
                text.push_str(&format!("num_classes={}\n", d.head_spec.num_classes));
                text.push_str(&format!("grid={}\n", d.head_spec.grid_size));
                let anchors: Vec<String> = d
                    .anchors
                    .anchors()
                    .iter()
                    .map(|a| format!("{}x{}", a.h, a.w))
                    .collect();
                text.push_str(&format!("anchors={}\n", anchors.join(",")));
                text.push_str("[network]\n");
                text.push_str(&d.backbone.spec.to_config_text());
                text
            }
        }
    }
}

fn parse_anchor_list(text: &str) -> Result<Vec<BoxSize>, DataError> {
    let mut sizes = Vec::new();
    for part in text.split(',') {
        let (h, w) = part
            .split_once('x')
            .ok_or_else(|| DataError::Parse(format!("bad anchor entry {part:?}")))?;
        let h: f64 = h
            .parse()
            .map_err(|_| DataError::Parse(format!("bad anchor height {h:?}")))?;
        let w: f64 = w
            .parse()
            .map_err(|_| DataError::Parse(format!("bad anchor width {w:?}")))?;
        sizes.push(BoxSize::new(h, w));
    }
    Ok(sizes)
}

fn rebuild_from_config(text: &str) -> Result<Model, DataError> {
    let (meta, network) = text
        .split_once("[network]\n")
        .ok_or_else(|| DataError::Parse("missing [network] section".into()))?;
    let mut kind = "";
    let mut class_names: Vec<String> = Vec::new();
    let mut num_classes = 1usize;
    let mut grid = 0usize;
    let mut anchors: Vec<BoxSize> = Vec::new();
    for line in meta.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DataError::Parse(format!("bad config line {line:?}")))?;
        match key {
            "kind" => kind = value.trim(),
            "class_names" => {
                class_names = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            }
            "num_classes" => {
                num_classes = value
                    .trim()
                    .parse()
                    .map_err(|_| DataError::Parse("bad num_classes".into()))?
            }
            "grid" => {
                grid = value
                    .trim()
                    .parse()
                    .map_err(|_| DataError::Parse("bad grid".into()))?
            }
            "anchors" => anchors = parse_anchor_list(value)?,
            other => return Err(DataError::Parse(format!("unknown config key {other:?}"))),
        }
    }
    let spec = NetworkSpec::from_config_text(network)
        .map_err(|e| DataError::Parse(format!("network spec: {e}")))?;
    // parameters are overwritten from the blobs; the init seed is irrelevant
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match kind {
        "classifier" => {
            let net = Network::initialize(spec, &mut rng)
                .map_err(|e| DataError::Parse(format!("network init: {e}")))?;
            Ok(Model::Classifier(ClassifierModel {
                network: net,
                class_names,
            }))
        }
        "detector" => {
            let backbone = Network::initialize(spec, &mut rng)
                .map_err(|e| DataError::Parse(format!("network init: {e}")))?;
            let head_spec = DetectionHeadSpec {
                num_classes,
                num_anchors: anchors.len(),
                grid_size: grid,
                filters: (num_classes + 5) * anchors.len(),
            };
            let anchor_set = if anchors.is_empty() {
                return Err(DataError::Parse("detector checkpoint has no anchors".into()));
            } else {
                AnchorSet::from_sizes(anchors)
                    .map_err(|e| DataError::Parse(format!("anchors: {e}")))?
            };
            let detector = Detector::new(backbone, head_spec, anchor_set, class_names, &mut rng)
                .map_err(|e| DataError::Parse(format!("detector init: {e}")))?;
            Ok(Model::Detector(detector))
        }
        other => Err(DataError::Parse(format!("unknown model kind {other:?}"))),
    }
}

/// Serializes the model; parameters are stored as little-endian f32.
pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = model.config_text();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let tensors = model.state_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| DataError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes; magic, version, checksum, and completeness are
/// each validated with a distinct error.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated);
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(DataError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(DataError::Truncated);
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(DataError::ChecksumMismatch);
    }

    let mut cur = Cursor {
        bytes: body,
        pos: 8,
    };
    let config_len = cur.u32()? as usize;
    let config = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|_| DataError::Parse("config is not UTF-8".into()))?
        .to_string();
    let mut model = rebuild_from_config(&config)?;

    let blob_count = cur.u32()? as usize;
    {
        let mut tensors = model.state_tensors_mut();
        if blob_count != tensors.len() {
            return Err(DataError::Parse(format!(
                "checkpoint has {blob_count} tensors, model expects {}",
                tensors.len()
            )));
        }
        for t in tensors.iter_mut() {
            let rank = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32()? as usize);
            }
            if dims != t.shape() {
                return Err(DataError::Parse(format!(
                    "tensor shape {:?} does not match expected {:?}",
                    dims,
                    t.shape()
                )));
            }
            for v in t.data_mut() {
                *v = cur.f32()? as f64;
            }
        }
    }
    if cur.pos != body.len() {
        return Err(DataError::Parse("trailing bytes after parameter blobs".into()));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{generate_pyramid, PyramidConfig};
    use crate::arch::{build_backbone, build_classifier, BackboneConfig};
    use crate::Tensor;

    fn tiny_classifier() -> Model {
        let spec = crate::arch::build_compact_classifier(64, 3, &[2, 2, 2, 2, 2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        Model::Classifier(ClassifierModel {
            network: Network::initialize(spec, &mut rng).unwrap(),
            class_names: vec!["a".into(), "b".into(), "c".into()],
        })
    }

    #[test]
    fn classifier_round_trip_preserves_parameter_count() {
        let spec = build_classifier(9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::Classifier(ClassifierModel {
            network: Network::initialize(spec, &mut rng).unwrap(),
            class_names: (0..9).map(|i| format!("c{i}")).collect(),
        });
        let bytes = checkpoint_bytes(&model);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        match back {
            Model::Classifier(m) => {
                assert_eq!(m.network.learnable_count(), 2_634_729);
                assert_eq!(m.class_names.len(), 9);
            }
            _ => panic!("wrong model kind"),
        }
    }

    #[test]
    fn round_trip_is_bit_exact_at_f32() {
        let model = tiny_classifier();
        let bytes = checkpoint_bytes(&model);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        for (a, b) in model.state_tensors().iter().zip(back.state_tensors().iter()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // saving the loaded model reproduces the same bytes
        assert_eq!(checkpoint_bytes(&back), bytes);
    }

    #[test]
    fn forward_pass_matches_within_f32_quantization() {
        let model = tiny_classifier();
        let back = checkpoint_from_bytes(&checkpoint_bytes(&model)).unwrap();
        let input = Tensor::filled(&[1, 3, 64, 64], 0.5);
        let (a, b) = match (&model, &back) {
            (Model::Classifier(m), Model::Classifier(n)) => (
                m.network.forward_infer(&input).unwrap(),
                n.network.forward_infer(&input).unwrap(),
            ),
            _ => unreachable!(),
        };
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn corrupt_byte_fails_checksum() {
        let mut bytes = checkpoint_bytes(&tiny_classifier());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(DataError::ChecksumMismatch)
        ));
    }

    #[test]
    fn wrong_magic_is_distinct_error() {
        let mut bytes = checkpoint_bytes(&tiny_classifier());
        bytes[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(DataError::BadMagic)));
    }

    #[test]
    fn version_mismatch_is_distinct_error() {
        let mut bytes = checkpoint_bytes(&tiny_classifier());
        bytes[4] = 99;
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(DataError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn truncation_is_distinct_error() {
        let bytes = checkpoint_bytes(&tiny_classifier());
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..2]),
            Err(DataError::Truncated)
        ));
        // cutting inside the blobs corrupts the checksum first; cutting the
        // checksum itself truncates
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 9]),
            Err(DataError::ChecksumMismatch) | Err(DataError::Truncated)
        ));
    }

    #[test]
    fn detector_round_trip() {
        let backbone = build_backbone(&BackboneConfig {
            stage_channel_widths: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            downsample_factor: 4,
            input_size: 32,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::initialize(backbone, &mut rng).unwrap();
        let anchors = generate_pyramid(&crate::anchors::PyramidConfig {
            base_sizes: vec![BoxSize::new(8.0, 12.0)],
            num_levels: 2,
            scale: 1.3,
        })
        .unwrap();
        let head_spec = DetectionHeadSpec {
            num_classes: 1,
            num_anchors: 2,
            grid_size: 8,
            filters: 12,
        };
        let det = Detector::new(net, head_spec, anchors, vec!["plate".into()], &mut rng).unwrap();
        let model = Model::Detector(det);
        let back = checkpoint_from_bytes(&checkpoint_bytes(&model)).unwrap();
        match back {
            Model::Detector(d) => {
                assert_eq!(d.head_spec.filters, 12);
                assert_eq!(d.anchors.len(), 2);
                assert_eq!(d.input_size, 32);
                let a = d.anchors.anchors()[1];
                assert!((a.h - 8.0 * 1.3).abs() < 1e-12);
            }
            _ => panic!("wrong model kind"),
        }
    }

    #[test]
    fn pyramid_provenance_not_required_for_reload() {
        // anchors serialize as flat sizes; provenance degrades to one-level
        let set = generate_pyramid(&PyramidConfig::default()).unwrap();
        let text: Vec<String> = set
            .anchors()
            .iter()
            .map(|a| format!("{}x{}", a.h, a.w))
            .collect();
        let parsed = parse_anchor_list(&text.join(",")).unwrap();
        assert_eq!(parsed.len(), 90);
        for (a, b) in set.anchors().iter().zip(parsed.iter()) {
            assert_eq!(a.h, b.h);
            assert_eq!(a.w, b.w);
        }
    }
}
