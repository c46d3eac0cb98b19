//! Fixed per-pixel features standing in for a frozen image encoder.

use ndarray::{Array1, Array2, Axis};

use crate::image_io::RgbImage;

/// RGB (3), x/y position (2), luminance gradient magnitude (1), 3×3 mean RGB (3).
pub const FEATURE_DIM: usize = 9;

pub const RGB: std::ops::Range<usize> = 0..3;
pub const POS_X: usize = 3;
pub const POS_Y: usize = 4;
pub const GRADIENT: usize = 5;
pub const MEAN_RGB: std::ops::Range<usize> = 6..9;

/// Row `k = y·W + x` holds the features of pixel `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub width: u32,
    pub height: u32,
    pub pixels: Array2<f64>,
    /// Spatial mean of `pixels`, the input to the class token.
    pub pooled: Array1<f64>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.nrows() == 0
    }

    /// One feature channel as an `H × W` grid.
    pub fn channel(&self, j: usize) -> Array2<f64> {
        self.pixels
            .column(j)
            .to_owned()
            .into_shape_with_order((self.height as usize, self.width as usize))
            .expect("row-major pixels")
    }
}

fn unit(v: u8) -> f64 {
    f64::from(v) / 255.0 * 2.0 - 1.0
}

fn centered(i: u32, n: u32) -> f64 {
    (2.0 * f64::from(i) + 1.0) / f64::from(n) - 1.0
}

pub fn extract_features(image: &RgbImage) -> Features {
    let (w, h) = image.dimensions();
    let (wu, hu) = (w as usize, h as usize);
    let px = |x: usize, y: usize| image.get_pixel(x as u32, y as u32).0;
    let lum: Vec<f64> = image
        .pixels()
        .map(|p| (0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])) / 255.0)
        .collect();
    let clamp_x = |x: isize| x.clamp(0, wu as isize - 1) as usize;
    let clamp_y = |y: isize| y.clamp(0, hu as isize - 1) as usize;

    let mut pixels = Array2::<f64>::zeros((wu * hu, FEATURE_DIM));
    for y in 0..hu {
        for x in 0..wu {
            let mut row = pixels.row_mut(y * wu + x);
            let p = px(x, y);
            for c in 0..3 {
                row[RGB.start + c] = unit(p[c]);
            }
            row[POS_X] = centered(x as u32, w);
            row[POS_Y] = centered(y as u32, h);

            let (xi, yi) = (x as isize, y as isize);
            let gx = (lum[y * wu + clamp_x(xi + 1)] - lum[y * wu + clamp_x(xi - 1)]) / 2.0;
            let gy = (lum[clamp_y(yi + 1) * wu + x] - lum[clamp_y(yi - 1) * wu + x]) / 2.0;
            row[GRADIENT] = (gx * gx + gy * gy).sqrt();

            let mut sum = [0.0f64; 3];
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let q = px(clamp_x(xi + dx), clamp_y(yi + dy));
                    for c in 0..3 {
                        sum[c] += unit(q[c]);
                    }
                }
            }
            for c in 0..3 {
                row[MEAN_RGB.start + c] = sum[c] / 9.0;
            }
        }
    }
    let pooled = pixels.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(FEATURE_DIM));
    Features { width: w, height: h, pixels, pooled }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn sample_image() -> RgbImage {
        RgbImage::from_fn(7, 5, |x, y| Rgb([(x * 30) as u8, (y * 50) as u8, ((x * y) % 255) as u8]))
    }

    #[test]
    fn gray_has_no_gradient() {
        let f = extract_features(&RgbImage::from_pixel(6, 4, Rgb([128, 128, 128])));
        assert!(f.channel(GRADIENT).iter().all(|&g| g == 0.0));
        assert_eq!(f.pixels.ncols(), FEATURE_DIM);
    }

    #[test]
    fn deterministic() {
        assert_eq!(extract_features(&sample_image()), extract_features(&sample_image()));
    }

    #[test]
    fn mirror_symmetry() {
        let img = sample_image();
        let mirrored = image::imageops::flip_horizontal(&img);
        let a = extract_features(&img);
        let b = extract_features(&mirrored);
        for j in (0..FEATURE_DIM).filter(|&j| j != POS_X && j != POS_Y) {
            let mut flipped = a.channel(j);
            flipped.invert_axis(Axis(1));
            let diff = (&flipped - &b.channel(j)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(diff < 1e-12, "channel {j}");
        }
        let mut x = a.channel(POS_X);
        x.invert_axis(Axis(1));
        let diff = (&x + &b.channel(POS_X)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12);
        assert_eq!(a.channel(POS_Y), b.channel(POS_Y));
    }
}
