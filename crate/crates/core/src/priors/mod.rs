//! Weather priors: transmission maps for haze, residue maps for rain and
//! snow, their rescaling to feature resolution and the `PRI1` file format.

mod haze;
mod rain;

pub use haze::{
    dark_channel, estimate_atmospheric_light, estimate_transmission, refine_transmission, AtmosphericLight,
    DEFAULT_OMEGA, DEFAULT_PATCH, GUIDED_EPS, GUIDED_RADIUS, T_FLOOR,
};
pub use rain::{extract_rain_residue, RESIDUE_RADIUS, RESIDUE_THRESHOLD};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::ImageF;
use crate::sample::DetectionSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Haze,
    Rain,
    Snow,
    Generic,
}

impl PriorKind {
    pub fn code(self) -> u8 {
        match self {
            PriorKind::Haze => 0,
            PriorKind::Rain => 1,
            PriorKind::Snow => 2,
            PriorKind::Generic => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => PriorKind::Haze,
            1 => PriorKind::Rain,
            2 => PriorKind::Snow,
            3 => PriorKind::Generic,
            _ => return Err(CoreError::Format(format!("unknown prior kind code {code}"))),
        })
    }
}

/// Spatial prior with values in `[0, 1]`, stored row-major and channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
    kind: PriorKind,
    scale_level: u8,
}

const PRIOR_MAGIC: &[u8; 4] = b"PRI1";

impl PriorMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        mut values: Vec<f32>,
        kind: PriorKind,
        scale_level: u8,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(CoreError::Dims(format!("prior {height}x{width}x{channels} is empty")));
        }
        if values.len() != height * width * channels {
            return Err(CoreError::Dims(format!(
                "prior {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        for v in &mut values {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(PriorMap {
            height,
            width,
            channels,
            values,
            kind,
            scale_level,
        })
    }

    pub fn constant(height: usize, width: usize, value: f32, kind: PriorKind) -> Result<Self> {
        Self::new(height, width, 1, vec![value; height * width], kind, 0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    pub fn scale_level(&self) -> u8 {
        self.scale_level
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// Planar copy with the channel axis first.
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.height * self.width;
        (0..self.channels)
            .flat_map(|c| (0..n).map(move |i| self.values[i * self.channels + c]))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.values.len() * 4);
        out.extend_from_slice(PRIOR_MAGIC);
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.kind.code());
        out.push(self.scale_level);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 18 || &bytes[..4] != PRIOR_MAGIC {
            return Err(CoreError::Format("missing PRI1 header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let kind = PriorKind::from_code(bytes[16])?;
        let level = bytes[17];
        let body = &bytes[18..];
        if body.len() != h * w * c * 4 {
            return Err(CoreError::Format(format!(
                "PRI1 body has {} bytes, expected {}",
                body.len(),
                h * w * c * 4
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(h, w, c, values, kind, level)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Binary PGM of the first channel, 0 → black and 1 → white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.values
                .iter()
                .step_by(self.channels)
                .map(|&v| (v * 255.0).round() as u8),
        );
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| CoreError::io(path, e))
    }
}

/// Averages 2×2 blocks, replicating the last row or column of odd dims,
/// until the map sits at conv-block `level`.
pub fn downscale_prior(prior: &PriorMap, level: u8) -> Result<PriorMap> {
    if level < prior.scale_level {
        return Err(CoreError::InvalidArgument(format!(
            "cannot downscale a level-{} prior to level {level}",
            prior.scale_level
        )));
    }
    let steps = (level - prior.scale_level) as u32;
    let shrink = 1usize.checked_shl(steps).unwrap_or(usize::MAX);
    if prior.height / shrink == 0 || prior.width / shrink == 0 {
        return Err(CoreError::Dims(format!(
            "{}x{} prior has no cells at level {level}",
            prior.height, prior.width
        )));
    }
    let c = prior.channels;
    let (mut h, mut w, mut vals) = (prior.height, prior.width, prior.values.clone());
    for _ in 0..steps {
        let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
        let mut next = vec![0.0f32; nh * nw * c];
        for y in 0..nh {
            let (y0, y1) = (2 * y, (2 * y + 1).min(h - 1));
            for x in 0..nw {
                let (x0, x1) = (2 * x, (2 * x + 1).min(w - 1));
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| vals[(yy * w + xx) * c + ch] as f64;
                    let s = at(y0, x0) + at(y0, x1) + at(y1, x0) + at(y1, x1);
                    next[(y * nw + x) * c + ch] = (s / 4.0) as f32;
                }
            }
        }
        (h, w, vals) = (nh, nw, next);
    }
    PriorMap::new(h, w, c, vals, prior.kind, level)
}

/// Where a sample's training prior comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    #[default]
    Estimated,
    Gt,
}

/// Estimator settings shared by synthesis and the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub omega: f32,
    pub patch: usize,
    pub refine: bool,
    pub guided_radius: usize,
    pub guided_eps: f32,
    pub residue_radius: usize,
    pub residue_threshold: f32,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            omega: DEFAULT_OMEGA,
            patch: DEFAULT_PATCH,
            refine: true,
            guided_radius: GUIDED_RADIUS,
            guided_eps: GUIDED_EPS,
            residue_radius: RESIDUE_RADIUS,
            residue_threshold: RESIDUE_THRESHOLD,
        }
    }
}

/// Runs the estimator matching `kind` on an image.
pub fn estimate_prior(image: &ImageF, kind: PriorKind, cfg: &EstimatorConfig) -> Result<PriorMap> {
    match kind {
        PriorKind::Haze => {
            let dark = dark_channel(image, cfg.patch)?;
            let a = estimate_atmospheric_light(image, &dark)?;
            let t = estimate_transmission(image, a, cfg.omega, cfg.patch)?;
            if cfg.refine {
                refine_transmission(&t, image, cfg.guided_radius, cfg.guided_eps)
            } else {
                Ok(t)
            }
        }
        PriorKind::Rain | PriorKind::Snow | PriorKind::Generic => {
            let mut r = extract_rain_residue(image, cfg.residue_radius, cfg.residue_threshold)?;
            r.kind = kind;
            Ok(r)
        }
    }
}

/// The stored ground-truth prior, or the estimator applied to the sample's
/// image (the clean image for source samples).
pub fn prior_for_sample(
    sample: &DetectionSample,
    kind: PriorKind,
    source: PriorSource,
    cfg: &EstimatorConfig,
) -> Result<PriorMap> {
    match source {
        PriorSource::Gt => sample
            .gt_prior
            .clone()
            .ok_or_else(|| CoreError::MissingGroundTruth("sample carries no synthesis ground truth".into())),
        PriorSource::Estimated => estimate_prior(&sample.image, kind, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_clamps_and_validates() {
        let p = PriorMap::new(1, 2, 1, vec![-1.0, 3.0], PriorKind::Rain, 0).unwrap();
        assert_eq!(p.values(), &[0.0, 1.0]);
        assert!(PriorMap::new(2, 2, 1, vec![0.0; 3], PriorKind::Rain, 0).is_err());
    }

    #[test]
    fn pri1_round_trip() {
        let p = PriorMap::new(2, 3, 2, (0..12).map(|i| i as f32 / 11.0).collect(), PriorKind::Snow, 3).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"PRI1");
        assert_eq!(bytes.len(), 18 + 48);
        assert_eq!(PriorMap::from_bytes(&bytes).unwrap(), p);
        assert!(PriorMap::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn pgm_header_and_size() {
        let p = PriorMap::constant(2, 3, 1.0, PriorKind::Haze).unwrap();
        let pgm = p.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[255; 6]);
    }

    #[test]
    fn checkerboard_halves_to_half() {
        let vals = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect();
        let p = PriorMap::new(4, 4, 1, vals, PriorKind::Generic, 0).unwrap();
        let d = downscale_prior(&p, 1).unwrap();
        assert_eq!((d.height(), d.width(), d.scale_level()), (2, 2, 1));
        assert!(d.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn odd_dims_round_up() {
        let p = PriorMap::constant(5, 7, 0.7, PriorKind::Haze).unwrap();
        let d = downscale_prior(&p, 2).unwrap();
        assert_eq!((d.height(), d.width()), (2, 2));
        assert!(d.values().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn downscale_rejects_bad_levels() {
        let p = PriorMap::constant(8, 8, 0.5, PriorKind::Haze).unwrap();
        assert!(downscale_prior(&p, 4).is_err());
        let d = downscale_prior(&p, 2).unwrap();
        assert!(downscale_prior(&d, 1).is_err());
    }
}
