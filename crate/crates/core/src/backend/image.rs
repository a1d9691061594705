use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Single-channel image with values in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn row_mut(&mut self, y: usize) -> &mut [f64] {
        &mut self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn check_shape(&self, expected: (usize, usize)) -> Result<()> {
        if self.shape() != expected || self.pixels.len() != expected.0 * expected.1 {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.shape(),
            });
        }
        Ok(())
    }

    /// 16-bit grayscale PNG encoding.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            encoder.set_color(png::ColorType::Grayscale);
            encoder.set_depth(png::BitDepth::Sixteen);
            let mut writer = encoder
                .write_header()
                .map_err(|e| Error::Png(e.to_string()))?;
            let data: Vec<u8> = self
                .pixels
                .iter()
                .flat_map(|v| quantize16(*v).to_be_bytes())
                .collect();
            writer
                .write_image_data(&data)
                .map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let info = reader.info().clone();
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen
        {
            return Err(Error::Png("expected 16-bit grayscale".into()));
        }
        let mut buf = vec![
            0;
            reader
                .output_buffer_size()
                .ok_or_else(|| Error::Png("image too large".into()))?
        ];
        let frame = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        let bytes = &buf[..frame.buffer_size()];
        let pixels = bytes
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / u16::MAX as f64)
            .collect();
        Ok(Self {
            height: info.height as usize,
            width: info.width as usize,
            pixels,
        })
    }
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * u16::MAX as f64).round() as u16
}
