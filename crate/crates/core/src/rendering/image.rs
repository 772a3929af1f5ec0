use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const FLOAT_MAGIC: &[u8; 4] = b"RGBF";

/// Row-major RGB image with float channels, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::contract(format!(
                "image {width}×{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let o = 3 * (j * self.width + i);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Snaps every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect();
        Self { width: self.width, height: self.height, data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|&v| to_u8(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Self { width: img.width() as usize, height: img.height() as usize, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Loads an 8-bit image. An alpha channel is composited over white.
    pub fn load(path: &Path) -> Result<Self> {
        let dynamic = image::open(path)?;
        if dynamic.color().has_alpha() {
            let rgba = dynamic.to_rgba8();
            let mut data = Vec::with_capacity(3 * rgba.width() as usize * rgba.height() as usize);
            for p in rgba.pixels() {
                let a = p[3] as f64 / 255.0;
                for ch in 0..3 {
                    data.push(p[ch] as f64 / 255.0 * a + (1.0 - a));
                }
            }
            return Self::new(rgba.width() as usize, rgba.height() as usize, data);
        }
        Ok(Self::from_rgb8(&dynamic.to_rgb8()))
    }

    /// Lossless dump: magic, width and height as u32, then f32 values, all little-endian.
    pub fn write_float(&self, mut w: impl Write) -> Result<()> {
        w.write_all(FLOAT_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_float(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FLOAT_MAGIC {
            return Err(Error::Format("not a float image dump".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let width = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let height = u32::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(3 * width * height);
        for _ in 0..3 * width * height {
            r.read_exact(&mut word)?;
            data.push(f32::from_le_bytes(word) as f64);
        }
        Self::new(width, height, data)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
