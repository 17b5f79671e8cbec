//! Frozen filter-bank encoder.
//!
//! The encoder is never trained; only the heads on top of it are. Every
//! channel is a fixed linear or gradient filter of the median-centered image.

use ndarray::Array2;

use crate::geometry::image_gradients;

pub const N_CHANNELS: usize = 9;

pub const CH_RAW: usize = 0;
pub const CH_BLUR1: usize = 1;
pub const CH_BLUR2: usize = 2;
pub const CH_BLUR4: usize = 3;
pub const CH_GX: usize = 4;
pub const CH_GY: usize = 5;
pub const CH_EDGE: usize = 6;
pub const CH_DOG: usize = 7;
pub const CH_EDGE_BLUR: usize = 8;

/// Per-pixel feature stack, `channels[c][[row, col]]`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub channels: Vec<Array2<f64>>,
}

impl FeatureMap {
    pub fn dim(&self) -> (usize, usize) {
        self.channels[0].dim()
    }

    /// Sample with coordinates clamped to the image.
    pub fn sample(&self, channel: usize, y: isize, x: isize) -> f64 {
        let (h, w) = self.dim();
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        self.channels[channel][[yy, xx]]
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dim();
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * img[[y, reflect(x as isize + j as isize - r, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[[reflect(y as isize + j as isize - r, h), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Encodes an image of at least 2×2 pixels.
pub fn encode(image: &Array2<f64>, intensity_scale: f64) -> FeatureMap {
    let values: Vec<f64> = image.iter().copied().collect();
    let center = median(&values);
    let raw = image.mapv(|v| (v - center) / intensity_scale);
    let blur1 = gaussian_blur(&raw, 1.0);
    let blur2 = gaussian_blur(&raw, 2.0);
    let blur4 = gaussian_blur(&raw, 4.0);
    let (gx, gy) = image_gradients(&blur1).expect("encoder input is at least 2x2");
    let edge = ndarray::Zip::from(&gx)
        .and(&gy)
        .map_collect(|a, b| a.hypot(*b));
    let dog = &blur2 - &blur4;
    let edge_blur = gaussian_blur(&edge, 2.0);
    FeatureMap {
        channels: vec![raw, blur1, blur2, blur4, gx, gy, edge, dog, edge_blur],
    }
}
