//! JSON-lines dataset manifests: one sample per line, line-addressable
//! validation errors.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{image::Image, DataError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Pixel-aligned box, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl PixelBox {
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRecord {
    image: String,
    boxes: Vec<PixelBox>,
    class: String,
    split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleAnnotation {
    /// Path resolved against the manifest's directory.
    pub image_ref: PathBuf,
    pub boxes: Vec<PixelBox>,
    pub class_label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<SampleAnnotation>,
    /// Declared by an optional `{"classes": [...]}` header line, otherwise
    /// inferred as the sorted set of labels present.
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleAnnotation> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

/// Loads and validates a JSON-lines manifest. Every referenced image must
/// exist and every box must lie within its image bounds.
pub fn load_manifest(path: &Path) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let reader = BufReader::new(file);
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut declared: Option<Vec<String>> = None;
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DataError::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if line_no == 1 {
            if let Ok(header) = serde_json::from_str::<ManifestHeader>(trimmed) {
                declared = Some(header.classes);
                continue;
            }
        }
        let record: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| DataError::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        let image_ref = base.join(&record.image);
        let (img_w, img_h) = Image::read_ppm_dims(&image_ref).map_err(|e| DataError::Manifest {
            line: line_no,
            message: format!("cannot read image {}: {e}", record.image),
        })?;
        for b in &record.boxes {
            if b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0
                || b.x + b.w > img_w as i64
                || b.y + b.h > img_h as i64
            {
                return Err(DataError::Manifest {
                    line: line_no,
                    message: format!(
                        "box ({},{},{},{}) exceeds image bounds {}x{}",
                        b.x, b.y, b.w, b.h, img_w, img_h
                    ),
                });
            }
        }
        if let Some(classes) = &declared {
            if !classes.contains(&record.class) {
                return Err(DataError::Manifest {
                    line: line_no,
                    message: format!("unknown class {:?}", record.class),
                });
            }
        }
        samples.push(SampleAnnotation {
            image_ref,
            boxes: record.boxes,
            class_label: record.class,
            split: record.split,
        });
    }

    let classes = declared.unwrap_or_else(|| {
        let mut set: Vec<String> = samples.iter().map(|s| s.class_label.clone()).collect();
        set.sort();
        set.dedup();
        set
    });
    Ok(Dataset { samples, classes })
}

/// Writes a manifest with a class-list header line; image paths are stored
/// relative to the manifest location when possible.
pub fn save_manifest(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    let header = ManifestHeader {
        classes: dataset.classes.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).unwrap())
        .map_err(|e| DataError::io(path, e))?;
    for sample in &dataset.samples {
        let rel = sample
            .image_ref
            .strip_prefix(base)
            .unwrap_or(&sample.image_ref);
        let record = ManifestRecord {
            image: rel.to_string_lossy().replace('\\', "/"),
            boxes: sample.boxes.clone(),
            class: sample.class_label.clone(),
            split: sample.split,
        };
        writeln!(out, "{}", serde_json::to_string(&record).unwrap())
            .map_err(|e| DataError::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_image(dir: &Path, name: &str, w: usize, h: usize) {
        let img = Image::new(w, h);
        img.write_ppm(&dir.join(name)).unwrap();
    }

    #[test]
    fn empty_manifest_loads_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, "").unwrap();
        let ds = load_manifest(&path).unwrap();
        assert!(ds.samples.is_empty());
        assert!(ds.classes.is_empty());
    }

    #[test]
    fn one_valid_line_gives_one_annotation() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.ppm", 64, 48);
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(
            &path,
            r#"{"image": "a.ppm", "boxes": [{"x":10,"y":20,"w":30,"h":12}], "class": "IND-1line", "split": "train"}"#,
        )
        .unwrap();
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(ds.classes, vec!["IND-1line".to_string()]);
        assert_eq!(ds.samples[0].boxes[0].center(), (25.0, 26.0));
    }

    #[test]
    fn out_of_bounds_box_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.ppm", 32, 32);
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"image": "a.ppm", "boxes": [], "class": "x", "split": "train"}"#,
                "\n",
                r#"{"image": "a.ppm", "boxes": [{"x":20,"y":0,"w":20,"h":8}], "class": "x", "split": "train"}"#,
            ),
        )
        .unwrap();
        match load_manifest(&path) {
            Err(DataError::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, "{not json}\n").unwrap();
        match load_manifest(&path) {
            Err(DataError::Manifest { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn declared_classes_reject_unknown_labels() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.ppm", 16, 16);
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"classes": ["known"]}"#,
                "\n",
                r#"{"image": "a.ppm", "boxes": [], "class": "mystery", "split": "test"}"#,
            ),
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(DataError::Manifest { line: 2, .. })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "img.ppm", 40, 30);
        let ds = Dataset {
            samples: vec![SampleAnnotation {
                image_ref: dir.path().join("img.ppm"),
                boxes: vec![PixelBox {
                    x: 1,
                    y: 2,
                    w: 10,
                    h: 5,
                }],
                class_label: "EU-1line".into(),
                split: Split::Test,
            }],
            classes: vec!["EU-1line".into()],
        };
        let path = dir.path().join("manifest.jsonl");
        save_manifest(&ds, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, ds);
    }
}
