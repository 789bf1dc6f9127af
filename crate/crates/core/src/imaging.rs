//! Float images in `[0, 1]` and 8-bit PNG conversion.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb32FImage};

use crate::error::{ensure, Error, Result};

/// Interleaved row-major float image with 3 (RGB) or 4 (RGBA) channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == width * height * channels,
            Shape,
            "{} values for a {width}x{height}x{channels} image",
            data.len()
        );
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// 8-bit values, rounded to nearest after clamping to `[0, 1]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(
            width,
            height,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Rounds every value through 8 bits, as saving and reloading would.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = quantize(*v) as f32 / 255.0;
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::Contract(format!("cannot encode {c}-channel image as PNG"))),
        };
        let mut out = Vec::new();
        image::write_buffer_with_format(
            &mut Cursor::new(&mut out),
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
            ImageFormat::Png,
        )
        .map_err(|e| Error::Image {
            path: "<memory>".into(),
            source: e,
        })?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads an 8-bit image as RGB in `[0, 1]` (value / 255).
    pub fn load_rgb(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.into(),
                source: other,
            },
        })?;
        let rgb = img.to_rgb8();
        Self::from_u8(rgb.width() as usize, rgb.height() as usize, 3, rgb.as_raw())
    }

    pub fn load_rgba(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?;
        let rgba = img.to_rgba8();
        Self::from_u8(rgba.width() as usize, rgba.height() as usize, 4, rgba.as_raw())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image {
            path: "<memory>".into(),
            source: e,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_alpha() {
            Self::from_u8(w, h, 4, img.to_rgba8().as_raw())
        } else {
            Self::from_u8(w, h, 3, img.to_rgb8().as_raw())
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        let mut out = FloatImage::new(width, height, self.channels);
        for y in 0..height {
            for x in 0..width {
                out.pixel_mut(x, y).copy_from_slice(self.pixel(x0 + x, y0 + y));
            }
        }
        out
    }

    pub fn as_rgb32f(&self) -> Option<Rgb32FImage> {
        if self.channels != 3 {
            return None;
        }
        Rgb32FImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_endpoints() {
        let img = FloatImage::from_u8(1, 1, 3, &[255, 0, 128]).unwrap();
        assert_eq!(img.data[0], 1.0);
        assert_eq!(img.data[1], 0.0);
        assert_eq!(img.to_u8(), vec![255, 0, 128]);
    }

    #[test]
    fn png_round_trip() {
        let data: Vec<f32> = (0..4 * 3 * 4).map(|i| (i * 5 % 256) as f32 / 255.0).collect();
        let img = FloatImage::from_vec(4, 3, 4, data).unwrap();
        let back = FloatImage::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }
}
