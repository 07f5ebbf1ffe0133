//! Deterministic synthetic plate scenes: filled rectangles with a contrasting
//! border and glyph-like bar rows, one style per class, exact annotations.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::image::Image;
use super::manifest::{save_manifest, Dataset, PixelBox, SampleAnnotation, Split};
use super::DataError;

/// Visual style of one plate class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassStyle {
    pub name: String,
    pub plate_color: [u8; 3],
    pub border_color: [u8; 3],
    pub glyph_color: [u8; 3],
    /// 1 for one-line layouts, 2 for two-line layouts.
    pub rows: u8,
}

impl ClassStyle {
    fn new(name: &str, plate: [u8; 3], border: [u8; 3], glyph: [u8; 3], rows: u8) -> Self {
        Self {
            name: name.to_string(),
            plate_color: plate,
            border_color: border,
            glyph_color: glyph,
            rows,
        }
    }
}

/// Styles for an arbitrary class count: the six defaults first, then color-
/// rotated variants with flipped row layouts.
pub fn styles_for_count(n: usize) -> Vec<ClassStyle> {
    let base = default_styles();
    let rotate = |c: [u8; 3], k: usize| -> [u8; 3] {
        match k % 3 {
            0 => c,
            1 => [c[2], c[0], c[1]],
            _ => [c[1], c[2], c[0]],
        }
    };
    (0..n)
        .map(|i| {
            let proto = &base[i % base.len()];
            if i < base.len() {
                proto.clone()
            } else {
                let k = i / base.len();
                ClassStyle {
                    name: format!("{}-v{}", proto.name, k + 1),
                    plate_color: rotate(proto.plate_color, k),
                    border_color: rotate(proto.border_color, k),
                    glyph_color: rotate(proto.glyph_color, k),
                    rows: if k % 2 == 1 { 3 - proto.rows } else { proto.rows },
                }
            }
        })
        .collect()
}

/// Six default styles spanning one-line and two-line layouts.
pub fn default_styles() -> Vec<ClassStyle> {
    vec![
        ClassStyle::new("IND-1line", [235, 235, 235], [20, 20, 20], [30, 30, 30], 1),
        ClassStyle::new("USA-1line", [180, 205, 235], [40, 40, 90], [25, 25, 60], 1),
        ClassStyle::new("EU-1line", [240, 220, 90], [30, 30, 30], [40, 40, 40], 1),
        ClassStyle::new("TR-1line", [225, 225, 225], [0, 60, 160], [20, 20, 20], 1),
        ClassStyle::new("KSA-2line", [215, 240, 215], [30, 90, 30], [20, 50, 20], 2),
        ClassStyle::new("UAE-2line", [245, 200, 200], [120, 20, 20], [60, 10, 10], 2),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_scenes: usize,
    pub image_size: usize,
    pub classes: Vec<ClassStyle>,
    /// Plate dimensions are sampled log-uniformly inside this range (pixels).
    pub size_range: (f64, f64),
    /// Inclusive range of plates per scene.
    pub plates_per_scene: (usize, usize),
    /// Leading fraction of scenes marked as the training split.
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_scenes: 100,
            image_size: 768,
            classes: default_styles(),
            size_range: (10.0, 670.0),
            plates_per_scene: (1, 2),
            train_fraction: 0.75,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        if self.classes.is_empty() {
            return Err(DataError::Config("no class styles configured".into()));
        }
        if self.image_size < 8 {
            return Err(DataError::Config("image_size must be at least 8".into()));
        }
        if !(self.size_range.0 > 0.0 && self.size_range.1 >= self.size_range.0) {
            return Err(DataError::Config("bad plate size range".into()));
        }
        if self.plates_per_scene.1 < self.plates_per_scene.0 {
            return Err(DataError::Config("bad plates-per-scene range".into()));
        }
        Ok(())
    }

    fn split_for(&self, index: usize) -> Split {
        let train_count = (self.num_scenes as f64 * self.train_fraction).round() as usize;
        if index < train_count {
            Split::Train
        } else {
            Split::Test
        }
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn rects_overlap(a: &PixelBox, b: &PixelBox) -> bool {
    a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h
}

fn draw_plate(img: &mut Image, rect: &PixelBox, style: &ClassStyle, rng: &mut ChaCha8Rng) {
    let (x, y, w, h) = (rect.x, rect.y, rect.w, rect.h);
    img.fill_rect(x, y, w, h, style.plate_color);
    let t = (w.min(h) / 10).max(1);
    img.fill_rect(x, y, w, t, style.border_color);
    img.fill_rect(x, y + h - t, w, t, style.border_color);
    img.fill_rect(x, y, t, h, style.border_color);
    img.fill_rect(x + w - t, y, t, h, style.border_color);

    // glyph rows: alternating vertical bars inside the border
    let pad = t + 1;
    let inner_x = x + pad;
    let inner_w = w - 2 * pad;
    let inner_y = y + pad;
    let inner_h = h - 2 * pad;
    if inner_w < 2 || inner_h < 1 {
        return;
    }
    let rows = style.rows.max(1) as i64;
    let gap = if rows > 1 { (inner_h / 8).max(1) } else { 0 };
    let band_h = (inner_h - gap * (rows - 1)) / rows;
    if band_h < 1 {
        return;
    }
    for r in 0..rows {
        let band_y = inner_y + r * (band_h + gap);
        let mut cursor = inner_x;
        while cursor < inner_x + inner_w {
            let bar_w = rng.gen_range(1..=(band_h / 2).clamp(1, 6));
            let gap_w = rng.gen_range(1..=(band_h / 3).clamp(1, 4));
            let bar_w = bar_w.min(inner_x + inner_w - cursor);
            img.fill_rect(cursor, band_y, bar_w, band_h, style.glyph_color);
            cursor += bar_w + gap_w;
        }
    }
}

/// Renders scene `index` of the configured sequence. Fully determined by
/// (config.seed, index). Returns the image, the per-plate boxes, the scene's
/// class index, and the number of plates skipped for want of space.
pub fn generate_scene(
    config: &SynthConfig,
    index: usize,
) -> (Image, Vec<PixelBox>, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let size = config.image_size as i64;
    let mut img = Image::new(config.image_size, config.image_size);
    let bg = [
        rng.gen_range(40..=120),
        rng.gen_range(40..=120),
        rng.gen_range(40..=120),
    ];
    img.fill(bg);

    // borderless distractor rectangles
    let distractors = rng.gen_range(0..=3);
    for _ in 0..distractors {
        let dw = rng.gen_range(2..=(size / 4).max(2));
        let dh = rng.gen_range(2..=(size / 4).max(2));
        let dx = rng.gen_range(0..=(size - dw).max(0));
        let dy = rng.gen_range(0..=(size - dh).max(0));
        let color = [
            rng.gen_range(60..=200),
            rng.gen_range(60..=200),
            rng.gen_range(60..=200),
        ];
        img.fill_rect(dx, dy, dw, dh, color);
    }

    let class_idx = rng.gen_range(0..config.classes.len());
    let style = &config.classes[class_idx];

    let plate_count = rng.gen_range(config.plates_per_scene.0..=config.plates_per_scene.1);
    let (lo, hi) = config.size_range;
    let max_fit = (size - 2) as f64;
    let mut boxes: Vec<PixelBox> = Vec::new();
    let mut skipped = 0usize;
    for _ in 0..plate_count {
        let mut placed = false;
        for _attempt in 0..20 {
            let h = log_uniform(&mut rng, lo, hi.min(max_fit)).round();
            let aspect = if style.rows == 1 {
                rng.gen_range(2.0..5.0)
            } else {
                rng.gen_range(1.2..2.0)
            };
            let w = (h * aspect).clamp(lo, hi.min(max_fit)).round();
            if w > max_fit || h > max_fit || w < 1.0 || h < 1.0 {
                continue;
            }
            let (w, h) = (w as i64, h as i64);
            let x = rng.gen_range(1..=(size - w - 1).max(1));
            let y = rng.gen_range(1..=(size - h - 1).max(1));
            let rect = PixelBox { x, y, w, h };
            if boxes.iter().any(|b| rects_overlap(b, &rect)) {
                continue;
            }
            draw_plate(&mut img, &rect, style, &mut rng);
            boxes.push(rect);
            placed = true;
            break;
        }
        if !placed {
            skipped += 1;
        }
    }
    (img, boxes, class_idx, skipped)
}

/// Writes `num_scenes` PPM images under `out_dir/scenes/` plus a manifest at
/// `out_dir/manifest.jsonl`. Returns the dataset and the number of plates
/// skipped because they could not be placed.
pub fn synthesize(config: &SynthConfig, out_dir: &Path) -> Result<(Dataset, usize), DataError> {
    config.validate()?;
    let scenes_dir = out_dir.join("scenes");
    std::fs::create_dir_all(&scenes_dir).map_err(|e| DataError::io(&scenes_dir, e))?;

    let results: Vec<(Vec<PixelBox>, usize, usize)> = (0..config.num_scenes)
        .into_par_iter()
        .map(|i| {
            let (img, boxes, class_idx, skipped) = generate_scene(config, i);
            let path = scenes_dir.join(format!("{i:06}.ppm"));
            img.write_ppm(&path).map(|_| (boxes, class_idx, skipped))
        })
        .collect::<Result<_, _>>()?;

    let mut samples = Vec::with_capacity(config.num_scenes);
    let mut skipped_total = 0;
    for (i, (boxes, class_idx, skipped)) in results.into_iter().enumerate() {
        skipped_total += skipped;
        samples.push(SampleAnnotation {
            image_ref: scenes_dir.join(format!("{i:06}.ppm")),
            boxes,
            class_label: config.classes[class_idx].name.clone(),
            split: config.split_for(i),
        });
    }
    let dataset = Dataset {
        samples,
        classes: config.classes.iter().map(|c| c.name.clone()).collect(),
    };
    save_manifest(&dataset, &out_dir.join("manifest.jsonl"))?;
    Ok((dataset, skipped_total))
}
