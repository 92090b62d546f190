use crate::error::{CoreError, Result};
use crate::filter::box_mean;
use crate::image::ImageF;

use super::{PriorKind, PriorMap};

pub const RESIDUE_RADIUS: usize = 2;
pub const RESIDUE_THRESHOLD: f32 = 0.02;

/// Positive high-pass residue: `max_c (I − box(I))`, clamped and thresholded.
pub fn extract_rain_residue(image: &ImageF, blur_radius: usize, threshold: f32) -> Result<PriorMap> {
    if blur_radius == 0 {
        return Err(CoreError::InvalidArgument("blur radius must be at least 1".into()));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = vec![f32::NEG_INFINITY; h * w];
    for c in 0..3 {
        let plane = image.channel(c);
        let blur = box_mean(&plane, h, w, blur_radius);
        for i in 0..h * w {
            out[i] = out[i].max(plane[i] - blur[i]);
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
        if *v < threshold {
            *v = 0.0;
        }
    }
    PriorMap::new(h, w, 1, out, PriorKind::Rain, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_residue() {
        let img = ImageF::filled(12, 12, [0.3, 0.6, 0.2]);
        let r = extract_rain_residue(&img, 3, 0.02).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0));
        assert!(extract_rain_residue(&img, 0, 0.02).is_err());
    }

    #[test]
    fn bright_dot_shows_up() {
        let mut img = ImageF::filled(9, 9, [0.2; 3]);
        img.set_pixel(4, 4, [0.9; 3]);
        let r = extract_rain_residue(&img, 2, 0.02).unwrap();
        let peak = r.values()[4 * 9 + 4];
        assert!((peak - 0.7 * 24.0 / 25.0).abs() < 1e-5, "{peak}");
    }
}
