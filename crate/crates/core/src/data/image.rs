//! Binary PPM (P6) images, tensor conversion, and letterbox resizing.

use std::io::{Read, Write};
use std::path::Path;

use super::DataError;
use crate::anchors::Rect;
use crate::tensor::Tensor;

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major, length = 3 * width * height.
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; 3 * width * height],
        }
    }

    pub fn fill(&mut self, rgb: [u8; 3]) {
        for px in self.pixels.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Filled axis-aligned rectangle, clipped to the image.
    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, rgb: [u8; 3]) {
        let x0 = x.max(0) as usize;
        let y0 = y.max(0) as usize;
        let x1 = ((x + w).max(0) as usize).min(self.width);
        let y1 = ((y + h).max(0) as usize).min(self.height);
        for yy in y0..y1 {
            for xx in x0..x1 {
                self.set(xx, yy, rgb);
            }
        }
    }

    /// Copy of the given region, clamped to the image; zero-size clamps
    /// yield a 1x1 image.
    pub fn crop(&self, x: i64, y: i64, w: i64, h: i64) -> Image {
        let x0 = x.clamp(0, self.width as i64 - 1) as usize;
        let y0 = y.clamp(0, self.height as i64 - 1) as usize;
        let x1 = (x + w).clamp(x0 as i64 + 1, self.width as i64) as usize;
        let y1 = (y + h).clamp(y0 as i64 + 1, self.height as i64) as usize;
        let mut out = Image::new(x1 - x0, y1 - y0);
        for yy in y0..y1 {
            for xx in x0..x1 {
                out.set(xx - x0, yy - y0, self.get(xx, yy));
            }
        }
        out
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Result<String, DataError> {
            // skip whitespace and `#` comments
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(DataError::Image("truncated PPM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };

        if token(bytes)? != "P6" {
            return Err(DataError::Image("not a P6 PPM".into()));
        }
        let width: usize = token(bytes)?
            .parse()
            .map_err(|_| DataError::Image("bad PPM width".into()))?;
        let height: usize = token(bytes)?
            .parse()
            .map_err(|_| DataError::Image("bad PPM height".into()))?;
        let maxval: usize = token(bytes)?
            .parse()
            .map_err(|_| DataError::Image("bad PPM maxval".into()))?;
        if maxval != 255 {
            return Err(DataError::Image(format!("unsupported PPM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = 3 * width * height;
        if bytes.len() < pos + need {
            return Err(DataError::Image("truncated PPM raster".into()));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), DataError> {
        let mut file = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
        file.write_all(&self.to_ppm_bytes())
            .map_err(|e| DataError::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self, DataError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| DataError::io(path, e))?;
        Self::from_ppm_bytes(&bytes)
    }

    /// Reads only `width` and `height` from a PPM header.
    pub fn read_ppm_dims(path: &Path) -> Result<(usize, usize), DataError> {
        let mut head = [0u8; 64];
        let n = std::fs::File::open(path)
            .and_then(|mut f| f.read(&mut head))
            .map_err(|e| DataError::io(path, e))?;
        let img_or_err = Self::from_ppm_bytes(&head[..n]);
        match img_or_err {
            Ok(img) => Ok((img.width, img.height)),
            Err(_) => {
                // header present but raster cut off by the 64-byte probe
                let mut pos = 0usize;
                let mut nums = Vec::new();
                let bytes = &head[..n];
                if !bytes.starts_with(b"P6") {
                    return Err(DataError::Image(format!(
                        "{}: not a P6 PPM",
                        path.display()
                    )));
                }
                pos += 2;
                while nums.len() < 2 && pos < bytes.len() {
                    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                        pos += 1;
                    }
                    let start = pos;
                    while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                        pos += 1;
                    }
                    if pos > start {
                        let v: usize = std::str::from_utf8(&bytes[start..pos])
                            .unwrap()
                            .parse()
                            .map_err(|_| DataError::Image("bad PPM header".into()))?;
                        nums.push(v);
                    } else {
                        break;
                    }
                }
                if nums.len() < 2 {
                    return Err(DataError::Image(format!(
                        "{}: bad PPM header",
                        path.display()
                    )));
                }
                Ok((nums[0], nums[1]))
            }
        }
    }

    /// (1, 3, height, width) tensor with values scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(&[1, 3, self.height, self.width]);
        let data = t.data_mut();
        let plane = self.height * self.width;
        for (i, px) in self.pixels.chunks(3).enumerate() {
            data[i] = px[0] as f64 / 255.0;
            data[plane + i] = px[1] as f64 / 255.0;
            data[2 * plane + i] = px[2] as f64 / 255.0;
        }
        t
    }
}

/// Mapping between original-image and network coordinates established by a
/// letterbox resize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub orig_width: usize,
    pub orig_height: usize,
    pub target: usize,
}

impl LetterboxTransform {
    pub fn to_network(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_x, y * self.scale + self.pad_y)
    }

    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)
    }

    pub fn rect_to_network(&self, r: &Rect) -> Rect {
        let (x, y) = self.to_network(r.x, r.y);
        Rect::new(x, y, r.w * self.scale, r.h * self.scale)
    }

    pub fn rect_to_original(&self, r: &Rect) -> Rect {
        let (x, y) = self.to_original(r.x, r.y);
        Rect::new(x, y, r.w / self.scale, r.h / self.scale)
    }
}

/// Aspect-preserving resize onto a square `target` canvas, centered, with
/// neutral-gray padding. Bilinear sampling.
pub fn letterbox(image: &Image, target: usize) -> Result<(Image, LetterboxTransform), DataError> {
    if image.width == 0 || image.height == 0 || target == 0 {
        return Err(DataError::Image("letterbox of zero-sized image".into()));
    }
    let scale = (target as f64 / image.width as f64).min(target as f64 / image.height as f64);
    let new_w = ((image.width as f64 * scale).round() as usize).clamp(1, target);
    let new_h = ((image.height as f64 * scale).round() as usize).clamp(1, target);
    let pad_x = (target - new_w) / 2;
    let pad_y = (target - new_h) / 2;

    let mut out = Image::new(target, target);
    out.fill([128, 128, 128]);
    for oy in 0..new_h {
        // sample the source at the center of each destination pixel
        let sy = ((oy as f64 + 0.5) / scale - 0.5)
            .clamp(0.0, image.height as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let fy = sy - y0 as f64;
        for ox in 0..new_w {
            let sx = ((ox as f64 + 0.5) / scale - 0.5)
                .clamp(0.0, image.width as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let fx = sx - x0 as f64;
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let p00 = image.get(x0, y0)[c] as f64;
                let p10 = image.get(x1, y0)[c] as f64;
                let p01 = image.get(x0, y1)[c] as f64;
                let p11 = image.get(x1, y1)[c] as f64;
                let v = p00 * (1.0 - fx) * (1.0 - fy)
                    + p10 * fx * (1.0 - fy)
                    + p01 * (1.0 - fx) * fy
                    + p11 * fx * fy;
                rgb[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.set(ox + pad_x, oy + pad_y, rgb);
        }
    }

    Ok((
        out,
        LetterboxTransform {
            scale,
            pad_x: pad_x as f64,
            pad_y: pad_y as f64,
            orig_width: image.width,
            orig_height: image.height,
            target,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_bytes_round_trip() {
        let mut img = Image::new(3, 2);
        img.fill([10, 20, 30]);
        img.set(2, 1, [255, 0, 128]);
        let bytes = img.to_ppm_bytes();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let back = Image::from_ppm_bytes(&bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn truncated_ppm_rejected() {
        let mut img = Image::new(4, 4);
        img.fill([1, 2, 3]);
        let mut bytes = img.to_ppm_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(Image::from_ppm_bytes(&bytes).is_err());
    }

    #[test]
    fn square_to_square_is_pure_scale() {
        let mut img = Image::new(8, 8);
        img.fill([200, 100, 50]);
        let (out, tf) = letterbox(&img, 16).unwrap();
        assert_eq!(tf.pad_x, 0.0);
        assert_eq!(tf.pad_y, 0.0);
        assert_eq!(tf.scale, 2.0);
        // no gray padding anywhere
        assert!(out.pixels.chunks(3).all(|p| p == [200, 100, 50]));
    }

    #[test]
    fn two_to_one_gets_equal_bands() {
        let mut img = Image::new(32, 16);
        img.fill([255, 255, 255]);
        let (out, tf) = letterbox(&img, 32).unwrap();
        assert_eq!(tf.pad_y, 8.0);
        assert_eq!(tf.pad_x, 0.0);
        // top band and bottom band are gray and the same height
        assert_eq!(out.get(0, 0), [128, 128, 128]);
        assert_eq!(out.get(0, 31), [128, 128, 128]);
        assert_eq!(out.get(0, 8), [255, 255, 255]);
        assert_eq!(out.get(0, 23), [255, 255, 255]);
    }

    #[test]
    fn box_round_trip_is_exact() {
        let img = Image::new(100, 40);
        let (_, tf) = letterbox(&img, 64).unwrap();
        let rect = Rect::new(12.3, 7.9, 33.0, 21.5);
        let back = tf.rect_to_original(&tf.rect_to_network(&rect));
        assert!((back.x - rect.x).abs() < 0.5);
        assert!((back.y - rect.y).abs() < 0.5);
        assert!((back.w - rect.w).abs() < 0.5);
        assert!((back.h - rect.h).abs() < 0.5);
    }

    #[test]
    fn tensor_conversion_scales_to_unit() {
        let mut img = Image::new(2, 1);
        img.set(0, 0, [255, 0, 51]);
        img.set(1, 0, [0, 255, 102]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert!((t.at4(0, 0, 0, 0) - 1.0).abs() < 1e-12);
        assert!((t.at4(0, 1, 0, 1) - 1.0).abs() < 1e-12);
        assert!((t.at4(0, 2, 0, 0) - 0.2).abs() < 1e-12);
    }
}
