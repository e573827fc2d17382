//! Mid-slice PNG panels with fixed color ranges.

use std::f64::consts::LN_2;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array3, ArrayView2, Axis};

/// Standardized intensities are shown over this many standard deviations.
const INTENSITY_RANGE: (f64, f64) = (-3.0, 3.0);
const MASK_COLOR: [f64; 3] = [230.0, 40.0, 40.0];
const MASK_ALPHA: f64 = 0.45;

pub fn mid_slice<A>(a: &Array3<A>) -> ArrayView2<'_, A> {
    a.index_axis(Axis(0), a.len_of(Axis(0)) / 2)
}

fn to_image(h: usize, w: usize, px: impl Fn(usize, usize) -> [u8; 3]) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(px(y as usize, x as usize)))
}

fn unit(v: f64, lo: f64, hi: f64) -> f64 {
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn mix(a: [u8; 3], b: [f64; 3], alpha: f64) -> [u8; 3] {
    std::array::from_fn(|i| (f64::from(a[i]) * (1.0 - alpha) + b[i] * alpha).round() as u8)
}

fn gray(v: f64) -> [u8; 3] {
    let g = (unit(v, INTENSITY_RANGE.0, INTENSITY_RANGE.1) * 255.0).round() as u8;
    [g, g, g]
}

fn viridis(u: f64) -> [u8; 3] {
    let c = colorous::VIRIDIS.eval_continuous(unit(u, 0.0, LN_2));
    [c.r, c.g, c.b]
}

/// Grayscale intensity slice.
pub fn intensity(slice: ArrayView2<f64>) -> RgbImage {
    let (h, w) = slice.dim();
    to_image(h, w, |y, x| gray(slice[(y, x)]))
}

/// Intensity slice with the predicted mask tinted on top.
pub fn mask_overlay(slice: ArrayView2<f64>, mask: ArrayView2<u8>) -> RgbImage {
    let (h, w) = slice.dim();
    to_image(h, w, |y, x| {
        let base = gray(slice[(y, x)]);
        if mask[(y, x)] == 1 {
            mix(base, MASK_COLOR, MASK_ALPHA)
        } else {
            base
        }
    })
}

/// Entropy on its own, viridis over `[0, ln 2]`.
pub fn uncertainty(u: ArrayView2<f64>) -> RgbImage {
    let (h, w) = u.dim();
    to_image(h, w, |y, x| viridis(u[(y, x)]))
}

/// Intensity slice with entropy blended in proportion to its value.
pub fn uncertainty_overlay(slice: ArrayView2<f64>, u: ArrayView2<f64>) -> RgbImage {
    let (h, w) = slice.dim();
    to_image(h, w, |y, x| {
        let v = u[(y, x)];
        let c = viridis(v).map(f64::from);
        mix(gray(slice[(y, x)]), c, unit(v, 0.0, LN_2))
    })
}

pub fn save(img: &RgbImage, path: &Path) -> std::io::Result<()> {
    img.save(path).map_err(std::io::Error::other)
}
