use crate::error::{CoreError, Result};
use crate::filter::{box_mean_f64, min_filter};
use crate::image::ImageF;

use super::{PriorKind, PriorMap};

pub const DEFAULT_OMEGA: f32 = 0.95;
pub const DEFAULT_PATCH: usize = 15;
pub const T_FLOOR: f32 = 0.05;
pub const GUIDED_RADIUS: usize = 20;
pub const GUIDED_EPS: f32 = 1e-3;
const A_FLOOR: f32 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AtmosphericLight(pub [f32; 3]);

impl AtmosphericLight {
    pub fn new(rgb: [f32; 3]) -> Result<Self> {
        if rgb.iter().any(|&c| !(c > 0.0 && c <= 1.0)) {
            return Err(CoreError::InvalidArgument(format!("atmospheric light {rgb:?} outside (0, 1]")));
        }
        Ok(AtmosphericLight(rgb))
    }

    pub fn gray(v: f32) -> Result<Self> {
        Self::new([v; 3])
    }
}

fn check_patch(patch: usize) -> Result<()> {
    if patch == 0 || patch % 2 == 0 {
        return Err(CoreError::InvalidArgument(format!("patch size must be odd and positive, got {patch}")));
    }
    Ok(())
}

fn channel_min(h: usize, w: usize, pixel: impl Fn(usize) -> [f32; 3]) -> Vec<f32> {
    (0..h * w).map(|i| pixel(i).into_iter().fold(f32::INFINITY, f32::min)).collect()
}

fn patch_min(plane: Vec<f32>, h: usize, w: usize, patch: usize) -> Vec<f32> {
    min_filter(&plane, h, w, patch / 2)
}

/// Minimum over RGB and over the `patch × patch` window, row-major.
pub fn dark_channel(image: &ImageF, patch: usize) -> Result<Vec<f32>> {
    check_patch(patch)?;
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 {
        return Err(CoreError::Dims("empty image".into()));
    }
    let d = image.data();
    let mins = channel_min(h, w, |i| [d[3 * i], d[3 * i + 1], d[3 * i + 2]]);
    Ok(patch_min(mins, h, w, patch))
}

/// Mean colour of the 0.1% of pixels with the largest dark channel.
pub fn estimate_atmospheric_light(image: &ImageF, dark: &[f32]) -> Result<AtmosphericLight> {
    let n = image.height() * image.width();
    if dark.len() != n || n == 0 {
        return Err(CoreError::Dims(format!("dark channel has {} values for {n} pixels", dark.len())));
    }
    let k = (n / 1000).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dark[b].total_cmp(&dark[a]).then(a.cmp(&b)));
    let d = image.data();
    let mut sum = [0.0f64; 3];
    for &i in &order[..k] {
        for c in 0..3 {
            sum[c] += d[3 * i + c] as f64;
        }
    }
    Ok(AtmosphericLight(sum.map(|s| ((s / k as f64) as f32).clamp(A_FLOOR, 1.0))))
}

/// `t = 1 − ω · dark(I / A)`, floored at 0.05.
pub fn estimate_transmission(image: &ImageF, a: AtmosphericLight, omega: f32, patch: usize) -> Result<PriorMap> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(CoreError::InvalidArgument(format!("omega must lie in (0, 1], got {omega}")));
    }
    check_patch(patch)?;
    let (h, w) = (image.height(), image.width());
    let d = image.data();
    let mins = channel_min(h, w, |i| [0, 1, 2].map(|c| d[3 * i + c] / a.0[c]));
    let t = patch_min(mins, h, w, patch)
        .into_iter()
        .map(|v| (1.0 - omega * v).clamp(T_FLOOR, 1.0))
        .collect();
    PriorMap::new(h, w, 1, t, PriorKind::Haze, 0)
}

/// Guided filter of `t` with the gray-level image as guide.
pub fn refine_transmission(t: &PriorMap, guide: &ImageF, radius: usize, eps: f32) -> Result<PriorMap> {
    let (h, w) = (t.height(), t.width());
    if guide.height() != h || guide.width() != w || t.channels() != 1 {
        return Err(CoreError::Dims(format!(
            "transmission {h}x{w}x{} vs guide {}x{}",
            t.channels(),
            guide.height(),
            guide.width()
        )));
    }
    if !(eps > 0.0) {
        return Err(CoreError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let g: Vec<f64> = guide.gray().into_iter().map(f64::from).collect();
    let p: Vec<f64> = t.values().iter().map(|&v| v as f64).collect();
    let bm = |v: &[f64]| box_mean_f64(v, h, w, radius);
    let mean_i = bm(&g);
    let mean_p = bm(&p);
    let corr_ip = bm(&g.iter().zip(&p).map(|(a, b)| a * b).collect::<Vec<_>>());
    let corr_ii = bm(&g.iter().map(|a| a * a).collect::<Vec<_>>());
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    for i in 0..h * w {
        let var = corr_ii[i] - mean_i[i] * mean_i[i];
        let cov = corr_ip[i] - mean_i[i] * mean_p[i];
        a[i] = cov / (var + eps as f64);
        b[i] = mean_p[i] - a[i] * mean_i[i];
    }
    let mean_a = bm(&a);
    let mean_b = bm(&b);
    let q = (0..h * w)
        .map(|i| ((mean_a[i] * g[i] + mean_b[i]) as f32).clamp(T_FLOOR, 1.0))
        .collect();
    PriorMap::new(h, w, 1, q, PriorKind::Haze, t.scale_level())
}
