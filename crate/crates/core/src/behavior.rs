//! Rendered behaviors: fixed-size RGB images and their PNG encoding.

use std::io::Cursor;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const IMAGE_SIZE: usize = 128;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("expected a {expected}x{expected} RGB image, got {width}x{height} ({color:?})")]
    Shape {
        expected: usize,
        width: u32,
        height: u32,
        color: png::ColorType,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A 128x128 RGB image with channel values in `[0, 1]`, row-major and
/// interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorImage {
    pixels: Vec<f64>,
}

impl BehaviorImage {
    pub const SIZE: usize = IMAGE_SIZE;
    pub const LEN: usize = IMAGE_SIZE * IMAGE_SIZE * 3;

    pub fn black() -> Self {
        Self { pixels: vec![0.0; Self::LEN] }
    }

    /// Values are clipped into `[0, 1]`. Panics on a wrong length.
    pub fn from_pixels(pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), Self::LEN, "behavior image must be 128x128x3");
        let pixels = pixels
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self { pixels }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * Self::SIZE + x) * 3 + c]
    }

    /// SHA-256 over the little-endian bit patterns of the pixels.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, Self::SIZE as u32, Self::SIZE as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&self.to_rgb8())?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(Self::LEN)];
        let info = reader.next_frame(&mut buf)?;
        if info.width as usize != Self::SIZE
            || info.height as usize != Self::SIZE
            || info.color_type != png::ColorType::Rgb
            || info.bit_depth != png::BitDepth::Eight
        {
            return Err(ImageError::Shape {
                expected: Self::SIZE,
                width: info.width,
                height: info.height,
                color: info.color_type,
            });
        }
        let pixels = buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self { pixels })
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self, ImageError> {
        Self::from_png(&std::fs::read(path)?)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
