use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{DepthMap, ImageF};
use crate::priors::{AtmosphericLight, PriorKind, PriorMap};

/// Noise values at or above this level seed a streak or flake. Twice the
/// reference noise level 0.25, so the kept fraction grows with the level.
pub const SEED_THRESHOLD: f32 = 0.5;

/// `I = J·t + A·(1 − t)` with `t = exp(−β·d)`; returns the image and `t`.
pub fn apply_haze(clean: &ImageF, depth: &DepthMap, beta: f32, a: AtmosphericLight) -> Result<(ImageF, PriorMap)> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(CoreError::InvalidArgument(format!("beta must be non-negative, got {beta}")));
    }
    let (h, w) = (clean.height(), clean.width());
    if depth.height() != h || depth.width() != w {
        return Err(CoreError::Dims(format!(
            "image {h}x{w} vs depth {}x{}",
            depth.height(),
            depth.width()
        )));
    }
    let t: Vec<f32> = depth.values().iter().map(|&d| transmission(beta, d)).collect();
    let mut out = Vec::with_capacity(h * w * 3);
    for (i, px) in clean.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out.push(px[c] * t[i] + a.0[c] * (1.0 - t[i]));
        }
    }
    Ok((ImageF::new(h, w, out)?, PriorMap::new(h, w, 1, t, PriorKind::Haze, 0)?))
}

/// `exp(−β·d)`, evaluated in double precision.
pub fn transmission(beta: f32, depth: f32) -> f32 {
    (-(beta as f64) * depth as f64).exp() as f32
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "lowercase")]
pub enum MaskPattern {
    Streaks { angle: f32, length: usize },
    Flakes { radius: usize },
}

/// Single-channel residue layer in `[0, 1]` with its generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidueMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
    noise_level: f32,
    pattern: MaskPattern,
}

pub type RainMask = ResidueMask;

impl ResidueMask {
    pub fn new(height: usize, width: usize, values: Vec<f32>, noise_level: f32, pattern: MaskPattern) -> Result<Self> {
        if values.len() != height * width {
            return Err(CoreError::Dims(format!("mask {height}x{width} got {} values", values.len())));
        }
        if let MaskPattern::Streaks { angle, .. } = pattern {
            check_angle(angle)?;
        }
        let values = values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(ResidueMask {
            height,
            width,
            values,
            noise_level,
            pattern,
        })
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

    pub fn noise_level(&self) -> f32 {
        self.noise_level
    }

    pub fn pattern(&self) -> MaskPattern {
        self.pattern
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len().max(1) as f64
    }
}

fn check_angle(angle: f32) -> Result<()> {
    if !(70.0..=110.0).contains(&angle) {
        return Err(CoreError::InvalidArgument(format!("rain angle {angle} outside [70, 110] degrees")));
    }
    Ok(())
}

fn check_noise(noise_level: f32) -> Result<()> {
    if !(noise_level > 0.0 && noise_level <= 1.0) {
        return Err(CoreError::InvalidArgument(format!("noise level {noise_level} outside (0, 1]")));
    }
    Ok(())
}

/// Sparse seeds: Gaussian noise with the given σ, kept where it reaches
/// [`SEED_THRESHOLD`].
fn seed_layer(h: usize, w: usize, noise_level: f32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, noise_level).expect("positive sigma");
    (0..h * w)
        .map(|_| {
            let v = normal.sample(&mut rng);
            if v >= SEED_THRESHOLD {
                v
            } else {
                0.0
            }
        })
        .collect()
}

/// Sums `src` shifted by each offset, scaled by its weight; zero outside.
fn splat(src: &[f32], h: usize, w: usize, taps: &[(isize, isize, f32)]) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = src[y * w + x];
            if v == 0.0 {
                continue;
            }
            for &(dy, dx, wt) in taps {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] += v * wt;
                }
            }
        }
    }
    out
}

fn normalize_by_max(v: &mut [f32]) {
    let m = v.iter().copied().fold(0.0f32, f32::max);
    if m > 0.0 {
        for x in v.iter_mut() {
            *x /= m;
        }
    }
}

/// Line kernel of `length` taps centred on the origin; 90° is vertical.
fn line_taps(angle: f32, length: usize) -> Vec<(isize, isize, f32)> {
    let rad = (angle as f64).to_radians();
    let (dx, dy) = (rad.cos(), rad.sin());
    let mid = (length as f64 - 1.0) / 2.0;
    let wt = 1.0 / length as f32;
    (0..length)
        .map(|k| {
            let s = k as f64 - mid;
            ((s * dy).round() as isize, (s * dx).round() as isize, wt)
        })
        .collect()
}

fn disk_taps(radius: usize) -> Vec<(isize, isize, f32)> {
    let r = radius as isize;
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let dist = ((dx * dx + dy * dy) as f32).sqrt();
            let wt = 1.0 - dist / (radius as f32 + 1.0);
            if wt > 0.0 {
                taps.push((dy, dx, wt));
            }
        }
    }
    taps
}

/// Noise → threshold → motion blur along `angle` → renormalise.
pub fn gen_rain_mask(
    height: usize,
    width: usize,
    noise_level: f32,
    angle: f32,
    streak_length: usize,
    seed: u64,
) -> Result<RainMask> {
    check_noise(noise_level)?;
    check_angle(angle)?;
    if streak_length == 0 {
        return Err(CoreError::InvalidArgument("streak length must be at least 1".into()));
    }
    let seeds = seed_layer(height, width, noise_level, seed);
    let mut v = splat(&seeds, height, width, &line_taps(angle, streak_length));
    normalize_by_max(&mut v);
    ResidueMask::new(
        height,
        width,
        v,
        noise_level,
        MaskPattern::Streaks {
            angle,
            length: streak_length,
        },
    )
}

/// Isotropic counterpart of [`gen_rain_mask`]: seeds spread into soft discs.
pub fn gen_snow_mask(height: usize, width: usize, noise_level: f32, radius: usize, seed: u64) -> Result<ResidueMask> {
    check_noise(noise_level)?;
    let seeds = seed_layer(height, width, noise_level, seed);
    let mut v = splat(&seeds, height, width, &disk_taps(radius));
    normalize_by_max(&mut v);
    ResidueMask::new(height, width, v, noise_level, MaskPattern::Flakes { radius })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    #[default]
    Additive,
    Screen,
}

fn apply_residue(
    clean: &ImageF,
    mask: &ResidueMask,
    intensity: f32,
    blend: BlendMode,
    kind: PriorKind,
) -> Result<(ImageF, PriorMap)> {
    if !(intensity > 0.0 && intensity <= 1.0) {
        return Err(CoreError::InvalidArgument(format!("intensity {intensity} outside (0, 1]")));
    }
    let (h, w) = (clean.height(), clean.width());
    if mask.height != h || mask.width != w {
        return Err(CoreError::Dims(format!("image {h}x{w} vs mask {}x{}", mask.height, mask.width)));
    }
    let r: Vec<f32> = mask.values.iter().map(|&m| intensity * m).collect();
    let mut out = Vec::with_capacity(h * w * 3);
    for (i, px) in clean.data().chunks_exact(3).enumerate() {
        for &j in px {
            out.push(match blend {
                BlendMode::Additive => j + r[i],
                BlendMode::Screen => 1.0 - (1.0 - j) * (1.0 - r[i]),
            });
        }
    }
    Ok((ImageF::new(h, w, out)?, PriorMap::new(h, w, 1, r, kind, 0)?))
}

/// `I = clamp(J + intensity·mask)`; the prior is `intensity·mask`.
pub fn apply_rain(clean: &ImageF, mask: &RainMask, intensity: f32) -> Result<(ImageF, PriorMap)> {
    apply_residue(clean, mask, intensity, BlendMode::Additive, PriorKind::Rain)
}

pub fn apply_rain_blend(clean: &ImageF, mask: &RainMask, intensity: f32, blend: BlendMode) -> Result<(ImageF, PriorMap)> {
    apply_residue(clean, mask, intensity, blend, PriorKind::Rain)
}

pub fn apply_snow(clean: &ImageF, mask: &ResidueMask, intensity: f32) -> Result<(ImageF, PriorMap)> {
    apply_residue(clean, mask, intensity, BlendMode::Additive, PriorKind::Snow)
}

pub fn apply_snow_blend(clean: &ImageF, mask: &ResidueMask, intensity: f32, blend: BlendMode) -> Result<(ImageF, PriorMap)> {
    apply_residue(clean, mask, intensity, blend, PriorKind::Snow)
}

/// Sum of normalised autocorrelations at lags `1..=max_lag` along `angle`
/// (degrees, 0 = horizontal, 90 = vertical), using nearest-pixel steps.
pub fn directional_autocorrelation(values: &[f32], height: usize, width: usize, angle: f32, max_lag: usize) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return 0.0;
    }
    let rad = (angle as f64).to_radians();
    let mut total = 0.0;
    for lag in 1..=max_lag {
        let dx = (lag as f64 * rad.cos()).round() as isize;
        let dy = (lag as f64 * rad.sin()).round() as isize;
        let (mut s, mut cnt) = (0.0, 0usize);
        for y in 0..height as isize {
            let yy = y + dy;
            if yy < 0 || yy >= height as isize {
                continue;
            }
            for x in 0..width as isize {
                let xx = x + dx;
                if xx < 0 || xx >= width as isize {
                    continue;
                }
                let a = values[(y * width as isize + x) as usize] as f64 - mean;
                let b = values[(yy * width as isize + xx) as usize] as f64 - mean;
                s += a * b;
                cnt += 1;
            }
        }
        if cnt > 0 {
            total += s / cnt as f64 / var;
        }
    }
    total
}
