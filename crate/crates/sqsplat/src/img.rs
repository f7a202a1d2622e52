//! Small float image buffers and PNG round-trips.
//!
//! Values live in [0, 1]. Grayscale buffers double as silhouettes and soft
//! masks; label buffers hold per-pixel part indices (0 = background) and are
//! written as paletted PNGs so the labels survive a byte-exact round-trip.

use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("png decode error: {0}")]
    Decode(String),
    #[error("png encode error: {0}")]
    Encode(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGray {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl ImageGray {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width * height) as usize],
        }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImgError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width,
            self.height,
            image::ColorType::L8,
        )
        .map_err(|e| ImgError::Encode(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self, ImgError> {
        let img = image::open(path)
            .map_err(|e| ImgError::Decode(e.to_string()))?
            .to_luma8();
        Ok(Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub width: u32,
    pub height: u32,
    /// Interleaved RGB, row-major.
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width * height * 3) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> [f64; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-channel mean over the whole image.
    pub fn mean_color(&self) -> [f64; 3] {
        let n = (self.width * self.height).max(1) as f64;
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        acc.map(|v| v / n)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImgError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width,
            self.height,
            image::ColorType::Rgb8,
        )
        .map_err(|e| ImgError::Encode(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self, ImgError> {
        let img = image::open(path)
            .map_err(|e| ImgError::Decode(e.to_string()))?
            .to_rgb8();
        Ok(Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().flat_map(|p| p.0).map(|v| v as f64 / 255.0).collect(),
        })
    }

    /// 8-bit RGBA bytes (alpha 255), e.g. for canvas display.
    pub fn to_rgba_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity((self.width * self.height * 4) as usize);
        for px in self.data.chunks_exact(3) {
            out.push(to_u8(px[0]));
            out.push(to_u8(px[1]));
            out.push(to_u8(px[2]));
            out.push(255);
        }
        out
    }
}

/// Per-pixel part labels; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u8>,
}

/// Fixed palette for label PNGs; index = label.
const LABEL_PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 80, 60],
    [70, 160, 230],
    [90, 200, 120],
    [240, 200, 70],
    [170, 110, 220],
    [240, 140, 50],
    [120, 210, 200],
];

impl LabelImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            labels: vec![0; (width * height) as usize],
        }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> u8 {
        self.labels[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, label: u8) {
        self.labels[(y * self.width + x) as usize] = label;
    }

    pub fn label_count(&self) -> usize {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        seen.iter().skip(1).filter(|&&s| s).count()
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImgError> {
        let file = std::fs::File::create(path)?;
        let mut encoder = png::Encoder::new(io::BufWriter::new(file), self.width, self.height);
        encoder.set_color(png::ColorType::Indexed);
        encoder.set_depth(png::BitDepth::Eight);
        let palette: Vec<u8> = LABEL_PALETTE.iter().flatten().copied().collect();
        encoder.set_palette(palette);
        let mut writer = encoder
            .write_header()
            .map_err(|e| ImgError::Encode(e.to_string()))?;
        writer
            .write_image_data(&self.labels)
            .map_err(|e| ImgError::Encode(e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, ImgError> {
        let file = std::fs::File::open(path)?;
        let mut decoder = png::Decoder::new(io::BufReader::new(file));
        // Keep palette indices instead of expanding to RGB.
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder
            .read_info()
            .map_err(|e| ImgError::Decode(e.to_string()))?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| ImgError::Decode(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(ImgError::Decode(format!(
                "label png must be 8-bit, got {:?}",
                info.bit_depth
            )));
        }
        match info.color_type {
            png::ColorType::Indexed | png::ColorType::Grayscale => {}
            other => {
                return Err(ImgError::Decode(format!(
                    "label png must be indexed or grayscale, got {:?}",
                    other
                )))
            }
        }
        buf.truncate((info.width * info.height) as usize);
        Ok(Self {
            width: info.width,
            height: info.height,
            labels: buf,
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_png_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("sqsplat_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut img = LabelImage::new(9, 5);
        for y in 0..5 {
            for x in 0..9 {
                img.set(x, y, ((x + y) % 4) as u8);
            }
        }
        let path = dir.join("labels.png");
        img.save_png(&path).unwrap();
        let back = LabelImage::load_png(&path).unwrap();
        assert_eq!(img, back);
        assert_eq!(back.label_count(), 3);
    }

    #[test]
    fn gray_png_roundtrip_is_close() {
        let dir = std::env::temp_dir().join("sqsplat_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut img = ImageGray::new(7, 3);
        for y in 0..3 {
            for x in 0..7 {
                img.set(x, y, (x as f64) / 6.0);
            }
        }
        let path = dir.join("gray.png");
        img.save_png(&path).unwrap();
        let back = ImageGray::load_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }
}
