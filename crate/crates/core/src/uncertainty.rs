//! Monte Carlo dropout sampling and predictive entropy.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::network::SegNet;
use crate::tensor::{lit, Real, Tensor};
use crate::volumes::{BinaryMask, Field};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_samples: 8, seed: 0 }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config(format!("need at least 2 MC samples, got {}", self.n_samples)));
        }
        Ok(())
    }
}

/// Voxelwise predictive entropy in nats, within `[0, ln 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub data: Field,
    pub n_samples: usize,
}

/// Entropy of a Bernoulli variable, with `0 ln 0 = 0`.
pub fn bernoulli_entropy(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    let h = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    (h(p) + h(1.0 - p)).clamp(0.0, LN_2)
}

/// `n` stochastic segmentation maps for one volume.
pub fn mc_sample_tensors<T: Real>(model: &SegNet<T>, x: &Tensor<T>, cfg: &McConfig) -> Result<Vec<Tensor<T>>> {
    cfg.validate()?;
    if model.cfg.dropout_rate == 0.0 {
        return Err(Error::UselessSampling);
    }
    model.mc_seg_samples(x, cfg.n_samples, cfg.seed)
}

pub fn mc_sample<T: Real>(model: &SegNet<T>, x: &Field, cfg: &McConfig) -> Result<Vec<Field>> {
    let samples = mc_sample_tensors(model, &Tensor::from_field(x), cfg)?;
    Ok(samples.iter().map(|s| s.channel_to_field(0)).collect())
}

/// Entropy of the mean of equally sized flat samples.
pub fn mean_entropy<T: Real>(samples: &[&[T]]) -> Result<Vec<T>> {
    if samples.len() < 2 {
        return Err(Error::Contract(format!("need at least 2 samples, got {}", samples.len())));
    }
    let n = samples[0].len();
    if samples.iter().any(|s| s.len() != n) {
        return shape_err("samples differ in size");
    }
    let inv = 1.0 / samples.len() as f64;
    Ok((0..n)
        .map(|i| {
            let mean = samples.iter().map(|s| s[i].to_f64().unwrap()).sum::<f64>() * inv;
            lit(bernoulli_entropy(mean))
        })
        .collect())
}

pub fn entropy_map(samples: &[Field]) -> Result<UncertaintyMap> {
    let Some(first) = samples.first() else {
        return Err(Error::Contract("no samples".into()));
    };
    if samples.iter().any(|s| s.shape() != first.shape()) {
        return shape_err("samples differ in shape");
    }
    let flat: Vec<Vec<f64>> = samples.iter().map(|s| s.iter().copied().collect()).collect();
    let refs: Vec<&[f64]> = flat.iter().map(|v| v.as_slice()).collect();
    let u = mean_entropy(&refs)?;
    let data = Field::from_shape_vec(first.raw_dim(), u).expect("same size");
    Ok(UncertaintyMap {
        data,
        n_samples: samples.len(),
    })
}

/// 1 where `U < t`.
pub fn certainty_mask(u: &UncertaintyMap, t: f64) -> Result<BinaryMask> {
    if !(t > 0.0) {
        return Err(Error::Contract(format!("threshold must be > 0, got {t}")));
    }
    Ok(BinaryMask {
        data: u.data.mapv(|v| u8::from(v < t)),
    })
}
