//! Separable window filters on single-channel row-major planes.

/// Mean over the `(2r+1)²` window clipped to the image, via an integral image.
pub fn box_mean(plane: &[f32], height: usize, width: usize, radius: usize) -> Vec<f32> {
    box_mean_f64(&plane.iter().map(|&v| v as f64).collect::<Vec<_>>(), height, width, radius)
        .into_iter()
        .map(|v| v as f32)
        .collect()
}

pub fn box_mean_f64(plane: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    let stride = width + 1;
    let mut integral = vec![0.0f64; (height + 1) * stride];
    for y in 0..height {
        let mut row = 0.0;
        for x in 0..width {
            row += plane[y * width + x];
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let y0 = y.saturating_sub(radius);
        let y1 = (y + radius + 1).min(height);
        for x in 0..width {
            let x0 = x.saturating_sub(radius);
            let x1 = (x + radius + 1).min(width);
            let s = integral[y1 * stride + x1] - integral[y0 * stride + x1] - integral[y1 * stride + x0]
                + integral[y0 * stride + x0];
            out[y * width + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Minimum over the `(2r+1)²` window clipped to the image.
pub fn min_filter(plane: &[f32], height: usize, width: usize, radius: usize) -> Vec<f32> {
    let mut rows = vec![0.0f32; plane.len()];
    for y in 0..height {
        let line = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius + 1).min(width);
            rows[y * width + x] = line[lo..hi].iter().copied().fold(f32::INFINITY, f32::min);
        }
    }
    let mut out = vec![0.0f32; plane.len()];
    for y in 0..height {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius + 1).min(height);
        for x in 0..width {
            out[y * width + x] = (lo..hi).map(|yy| rows[yy * width + x]).fold(f32::INFINITY, f32::min);
        }
    }
    out
}
