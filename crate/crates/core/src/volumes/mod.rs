//! Volumes, binary masks and the preprocessing applied before they reach the
//! network.

mod dataset;
pub mod io;
mod phantom;

use ndarray::{Array3, Zip};

use crate::error::{shape_err, Error, Result};

pub use dataset::{split_dataset, Case, DatasetSplit, Manifest, ManifestEntry};
pub use phantom::{make_phantom, PhantomSpec};

/// Dense 3D scalar field in (D, H, W) order.
pub type Field = Array3<f64>;

/// Smallest extent accepted along any axis.
pub const MIN_DIM: usize = 4;

/// Default network input shape used for full-size scans.
pub const DEFAULT_TARGET_SHAPE: [usize; 3] = [112, 112, 80];

/// An intensity volume with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub data: Field,
    /// Millimetres per voxel along (D, H, W).
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(id: impl Into<String>, data: Field, spacing: [f64; 3]) -> Result<Self> {
        check_shape(data.shape())?;
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!("volume contains {bad}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Metadata(format!("invalid spacing {spacing:?}")));
        }
        Ok(Self {
            id: id.into(),
            data,
            spacing,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        dims(&self.data)
    }
}

/// A {0,1} label field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub data: Array3<u8>,
}

impl BinaryMask {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        Ok(Self { data })
    }

    /// Foreground wherever `field >= threshold`.
    pub fn from_threshold(field: &Field, threshold: f64) -> Self {
        Self {
            data: field.mapv(|v| u8::from(v >= threshold)),
        }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            data: Array3::zeros(shape),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        dims(&self.data)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_degenerate(&self) -> bool {
        let n = self.count();
        n == 0 || n == self.data.len()
    }

    pub fn to_field(&self) -> Field {
        self.data.mapv(f64::from)
    }
}

pub(crate) fn dims<T>(a: &Array3<T>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape.iter().any(|&d| d < MIN_DIM) {
        return shape_err(format!(
            "volume dims must be 3D with every axis >= {MIN_DIM}, got {shape:?}"
        ));
    }
    Ok(())
}

/// Per-volume z-score standardization.
pub fn normalize(v: &Volume) -> Result<Volume> {
    let n = v.data.len() as f64;
    let mean = v.data.sum() / n;
    let var = v.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * (1.0 + mean.abs())) {
        return Err(Error::ConstantVolume);
    }
    Ok(Volume {
        id: v.id.clone(),
        data: v.data.mapv(|x| (x - mean) / std),
        spacing: v.spacing,
    })
}

/// Maps output index `i` of an axis of length `out` onto the source axis of
/// length `inp` with corner-aligned sampling.
fn source_coord(i: usize, inp: usize, out: usize) -> f64 {
    if out == 1 || inp == 1 {
        0.0
    } else {
        i as f64 * (inp - 1) as f64 / (out - 1) as f64
    }
}

fn resized_spacing(spacing: [f64; 3], from: [usize; 3], to: [usize; 3]) -> [f64; 3] {
    let mut s = spacing;
    for a in 0..3 {
        s[a] = spacing[a] * (from[a] - 1) as f64 / (to[a] - 1) as f64;
    }
    s
}

/// Trilinear, corner-aligned resampling of a volume to `target`.
pub fn resize(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    check_shape(&target)?;
    let from = v.shape();
    let data = resize_field(&v.data, target);
    Ok(Volume {
        id: v.id.clone(),
        data,
        spacing: resized_spacing(v.spacing, from, target),
    })
}

/// Trilinear resampling of an arbitrary field.
pub fn resize_field(src: &Field, target: [usize; 3]) -> Field {
    let from = dims(src);
    if from == target {
        return src.clone();
    }
    // per-axis (lower index, upper index, upper weight)
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..target[a])
                .map(|i| {
                    let c = source_coord(i, from[a], target[a]);
                    let lo = (c.floor() as usize).min(from[a] - 1);
                    let hi = (lo + 1).min(from[a] - 1);
                    (lo, hi, c - lo as f64)
                })
                .collect()
        })
        .collect();
    Array3::from_shape_fn(target, |(z, y, x)| {
        let (z0, z1, wz) = taps[0][z];
        let (y0, y1, wy) = taps[1][y];
        let (x0, x1, wx) = taps[2][x];
        let lerp = |a: f64, b: f64, w: f64| if w == 0.0 { a } else { a + (b - a) * w };
        let plane = |zz: usize| {
            let r0 = lerp(src[[zz, y0, x0]], src[[zz, y0, x1]], wx);
            let r1 = lerp(src[[zz, y1, x0]], src[[zz, y1, x1]], wx);
            lerp(r0, r1, wy)
        };
        lerp(plane(z0), plane(z1), wz)
    })
}

/// Nearest-neighbour resampling of a mask; preserves binarity.
pub fn resize_mask(m: &BinaryMask, target: [usize; 3]) -> Result<BinaryMask> {
    check_shape(&target)?;
    let from = m.shape();
    let idx: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            (0..target[a])
                .map(|i| (source_coord(i, from[a], target[a]).round() as usize).min(from[a] - 1))
                .collect()
        })
        .collect();
    let data = Array3::from_shape_fn(target, |(z, y, x)| m.data[[idx[0][z], idx[1][y], idx[2][x]]]);
    Ok(BinaryMask { data })
}

/// Standardizes then resamples a labeled or unlabeled case to `target`.
pub fn preprocess(v: &Volume, mask: Option<&BinaryMask>, target: [usize; 3]) -> Result<(Volume, Option<BinaryMask>)> {
    if let Some(m) = mask {
        if m.shape() != v.shape() {
            return shape_err(format!("mask {:?} vs volume {:?}", m.shape(), v.shape()));
        }
    }
    let vol = resize(&normalize(v)?, target)?;
    let mask = mask.map(|m| resize_mask(m, target)).transpose()?;
    Ok((vol, mask))
}

pub(crate) fn same_shape<A, B>(a: &Array3<A>, b: &Array3<B>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Largest absolute difference between two equally shaped fields.
pub fn max_abs_diff(a: &Field, b: &Field) -> f64 {
    let mut m = 0.0f64;
    Zip::from(a).and(b).for_each(|x, y| m = m.max((x - y).abs()));
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: Field) -> Volume {
        Volume::new("t", data, [1.0; 3]).unwrap()
    }

    #[test]
    fn normalize_standardizes_affine_data() {
        // values 5 ± 2 alternating: mean 5, std 2
        let data = Array3::from_shape_fn((4, 4, 4), |(z, y, x)| if (z + y + x) % 2 == 0 { 3.0 } else { 7.0 });
        let n = normalize(&vol(data)).unwrap();
        let mean = n.data.mean().unwrap();
        let std = n.data.std(0.0);
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-12);
        let again = normalize(&n).unwrap();
        assert!(max_abs_diff(&again.data, &n.data) < 1e-6);
    }

    #[test]
    fn normalize_matches_direct_summation() {
        let data = Array3::from_shape_fn((4, 4, 4), |(z, y, x)| (z * 16 + y * 4 + x + 1) as f64);
        let vals: Vec<f64> = (1..=64).map(f64::from).collect();
        let mu = vals.iter().sum::<f64>() / 64.0;
        let sigma = (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 64.0).sqrt();
        assert_eq!(mu, 32.5);
        let n = normalize(&vol(data)).unwrap();
        for (i, v) in n.data.iter().enumerate() {
            assert!((v - ((i + 1) as f64 - mu) / sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_volume_rejected() {
        let err = normalize(&vol(Array3::from_elem((4, 4, 4), 3.0))).unwrap_err();
        assert!(matches!(err, Error::ConstantVolume));
    }

    #[test]
    fn resize_identity_and_constant() {
        let data = Array3::from_shape_fn((5, 6, 7), |(z, y, x)| (z * y + x) as f64 * 0.3);
        let v = vol(data.clone());
        assert!(max_abs_diff(&resize(&v, [5, 6, 7]).unwrap().data, &data) < 1e-6);
        let c = vol(Array3::from_elem((4, 5, 6), 2.5));
        assert!(resize(&c, [9, 7, 4]).unwrap().data.iter().all(|&x| x == 2.5));
        assert!(matches!(resize(&v, [3, 8, 8]), Err(Error::Shape(_))));
    }

    #[test]
    fn resize_matches_trilinear_formula() {
        // 2x2x2 corner values upsampled to 4x4x4; 2-wide inputs sit below
        // MIN_DIM so go through resize_field directly.
        let corner = |z: usize, y: usize, x: usize| (1 + z * 4 + y * 2 + x) as f64;
        let src = Array3::from_shape_fn((2, 2, 2), |(z, y, x)| corner(z, y, x));
        let out = resize_field(&src, [4, 4, 4]);
        for ((z, y, x), v) in out.indexed_iter() {
            let (tz, ty, tx) = (z as f64 / 3.0, y as f64 / 3.0, x as f64 / 3.0);
            let mut expect = 0.0;
            for cz in 0..2 {
                for cy in 0..2 {
                    for cx in 0..2 {
                        let w = (if cz == 1 { tz } else { 1.0 - tz })
                            * (if cy == 1 { ty } else { 1.0 - ty })
                            * (if cx == 1 { tx } else { 1.0 - tx });
                        expect += w * corner(cz, cy, cx);
                    }
                }
            }
            assert!((v - expect).abs() < 1e-12, "{z},{y},{x}: {v} vs {expect}");
        }
    }

    #[test]
    fn mask_resize_stays_binary() {
        let m = BinaryMask::new(Array3::from_shape_fn((8, 8, 8), |(z, y, x)| u8::from(z + y > x))).unwrap();
        let r = resize_mask(&m, [5, 11, 6]).unwrap();
        assert_eq!(r.shape(), [5, 11, 6]);
        assert!(r.data.iter().all(|&v| v <= 1));
        assert_eq!(resize_mask(&m, [8, 8, 8]).unwrap(), m);
    }

    #[test]
    fn invalid_inputs() {
        assert!(BinaryMask::new(Array3::from_elem((4, 4, 4), 2)).is_err());
        assert!(Volume::new("x", Array3::zeros((4, 4, 2)), [1.0; 3]).is_err());
        assert!(Volume::new("x", Array3::zeros((4, 4, 4)), [0.0, 1.0, 1.0]).is_err());
    }
}
