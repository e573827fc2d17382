//! Signed distance maps and their logistic inverse.
//!
//! The exact Euclidean distance transform is the separable lower-envelope
//! algorithm of Felzenszwalb and Huttenlocher: one pass of 1D squared-distance
//! transforms per axis, each line processed independently.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volumes::{dims, BinaryMask, Field};

/// Logistic argument clamp; keeps `exp` finite at any steepness.
pub const EXP_CLAMP: f64 = 500.0;

/// Signed distance field: positive inside, negative outside, scaled so the
/// largest magnitude is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDistanceMap {
    pub data: Field,
}

/// Sigmoid sharpness `k` used by the inverse transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Steepness(f64);

impl Steepness {
    pub const DEFAULT: f64 = 1500.0;

    pub fn new(k: f64) -> Result<Self> {
        if k.is_finite() && k > 0.0 {
            Ok(Self(k))
        } else {
            Err(Error::Config(format!("steepness must be positive and finite, got {k}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Steepness {
    fn default() -> Self {
        Self(Self::DEFAULT)
    }
}

impl TryFrom<f64> for Steepness {
    type Error = Error;
    fn try_from(k: f64) -> Result<Self> {
        Self::new(k)
    }
}

impl From<Steepness> for f64 {
    fn from(k: Steepness) -> f64 {
        k.0
    }
}

/// 1D squared distance transform of sampled function `f` with axis weight `w`
/// (squared spacing): `out[p] = min_q w (p - q)^2 + f[q]`. Infinite samples are
/// treated as absent.
fn edt_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let rf = r as f64;
                    let s = ((f[q] + w * qf * qf) - (f[r] + w * rf * rf)) / (2.0 * w * (qf - rf));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while k + 1 < v.len() && z[k + 1] < pf {
            k += 1;
        }
        let d = pf - v[k] as f64;
        *o = w * d * d + f[v[k]];
    }
}

fn pass_along(data: &mut Array3<f64>, axis: usize, w: f64) {
    let mut perm = [0usize, 1, 2];
    perm.swap(axis, 2);
    let moved = data.view().permuted_axes(perm).as_standard_layout().into_owned();
    let n = moved.shape()[2];
    let mut src = moved.into_raw_vec_and_offset().0;
    let input = src.clone();
    par::for_each_chunk_mut(&mut src, n, |line, out| {
        let mut v = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        edt_1d(&input[line * n..(line + 1) * n], w, out, &mut v, &mut z);
    });
    let s = data.shape();
    let mut pshape = [s[0], s[1], s[2]];
    pshape.swap(axis, 2);
    let result = Array3::from_shape_vec(pshape, src).expect("shape preserved");
    data.assign(&result.permuted_axes(perm));
}

/// Squared Euclidean distance (in mm², given per-axis `spacing`) from every
/// voxel to the nearest `true` voxel. Infinite everywhere when there is none.
pub fn squared_edt(features: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut d = features.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    for axis in (0..3).rev() {
        if d.len_of(Axis(axis)) > 0 {
            pass_along(&mut d, axis, spacing[axis] * spacing[axis]);
        }
    }
    d
}

/// Unnormalized signed distances in voxel units.
pub fn signed_distances(mask: &BinaryMask) -> Result<Field> {
    if mask.is_degenerate() {
        return Err(Error::DegenerateMask);
    }
    let fg = mask.data.mapv(|v| v == 1);
    let bg = mask.data.mapv(|v| v == 0);
    let to_fg = squared_edt(&fg, [1.0; 3]);
    let to_bg = squared_edt(&bg, [1.0; 3]);
    let mut out = Array3::zeros(dims(&mask.data));
    ndarray::Zip::from(&mut out)
        .and(&mask.data)
        .and(&to_fg)
        .and(&to_bg)
        .for_each(|o, &m, &df, &db| *o = if m == 1 { db.sqrt() } else { -df.sqrt() });
    Ok(out)
}

/// The distance-map transform: exact signed Euclidean distance, inside
/// positive, divided by its largest magnitude.
pub fn sdm(mask: &BinaryMask) -> Result<SignedDistanceMap> {
    let raw = signed_distances(mask)?;
    let max = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(SignedDistanceMap {
        data: raw.mapv(|v| v / max),
    })
}

/// `1 / (1 + exp(-k z))` with the exponent clamped to ±500.
#[inline]
pub fn logistic(k: f64, z: f64) -> f64 {
    let a = (k * z).clamp(-EXP_CLAMP, EXP_CLAMP);
    1.0 / (1.0 + (-a).exp())
}

/// Elementwise logistic map of a distance field to a soft foreground map.
pub fn inverse_sdm(z: &Field, k: Steepness) -> Field {
    z.mapv(|v| logistic(k.get(), v))
}
