//! Float RGB images, depth maps and PNG I/O.

use std::path::Path;

use crate::error::{CoreError, Result};

/// RGB image with interleaved channels, values clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageF {
    pub fn new(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(CoreError::Dims(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        for v in &mut data {
            *v = clamp01(*v);
        }
        Ok(ImageF { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb.map(clamp01)).collect();
        ImageF { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb.map(clamp01));
    }

    /// One colour plane as a row-major vector.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn gray(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    }

    /// Round-trips through 8-bit, as a PNG save/load would.
    pub fn quantized(&self) -> ImageF {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        ImageF {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Planar CHW copy, the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f32> {
        (0..3).flat_map(|c| self.channel(c)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| CoreError::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| CoreError::io(path, e))?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        ImageF::new(h as usize, w as usize, data)
    }
}

fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

fn to_u8(v: f32) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

/// Per-pixel scene depth, finite and non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

const DEPTH_MAGIC: &[u8; 4] = b"DEP1";

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(CoreError::Dims(format!(
                "depth {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(CoreError::InvalidArgument(format!("depth value {v} is not a finite non-negative number")));
        }
        Ok(DepthMap { height, width, values })
    }

    pub fn uniform(height: usize, width: usize, d: f32) -> Result<Self> {
        Self::new(height, width, vec![d; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// `DEP1`, LE u32 height and width, then LE f32 values row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.values.len() * 4);
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
            return Err(CoreError::Format("missing DEP1 header".into()));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != h * w * 4 {
            return Err(CoreError::Format(format!("DEP1 body has {} bytes, expected {}", body.len(), h * w * 4)));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(h, w, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_clamps() {
        let img = ImageF::new(1, 1, vec![-0.5, 0.5, 2.0]).unwrap();
        assert_eq!(img.pixel(0, 0), [0.0, 0.5, 1.0]);
        assert!(ImageF::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn png_round_trip_matches_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageF::new(2, 3, (0..18).map(|i| i as f32 / 17.0).collect()).unwrap();
        img.save_png(&path).unwrap();
        assert_eq!(ImageF::load_png(&path).unwrap(), img.quantized());
    }

    #[test]
    fn depth_round_trip_and_validation() {
        let d = DepthMap::new(2, 2, vec![0.0, 1.0, 2.5, 3.0]).unwrap();
        assert_eq!(DepthMap::from_bytes(&d.to_bytes()).unwrap(), d);
        assert!(DepthMap::new(1, 1, vec![-1.0]).is_err());
        assert!(DepthMap::new(1, 1, vec![f32::INFINITY]).is_err());
    }
}
