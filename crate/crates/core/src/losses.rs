//! Loss terms with analytic gradients.
//!
//! Voxelwise losses work on flat slices in a common layout and return the
//! value together with the gradient for every input slice. Field-level
//! wrappers check shapes and return plain values.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{lit, Real};
use crate::transforms::{logistic, SignedDistanceMap, Steepness, EXP_CLAMP};
use crate::volumes::{same_shape, BinaryMask, Field};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_dist: f64,
    pub lambda_ct: f64,
    pub lambda_g: f64,
    /// Weight of the adversarial term (the trainer ramps it up to this value).
    pub gamma: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dist: 0.3,
            lambda_ct: 0.3,
            lambda_g: 0.3,
            gamma: 0.1,
            beta: 0.5,
            epsilon: 1e-5,
        }
    }
}

impl LossWeights {
    /// Dice only.
    pub fn supervised() -> Self {
        Self {
            lambda_dist: 0.0,
            lambda_ct: 0.0,
            lambda_g: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_dist, self.lambda_ct, self.lambda_g, self.gamma];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Which side of the adversarial objective the labeled scores sit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvPairing {
    /// Generator residual `s_l^2 + (s_ul - 1)^2`; discriminator target 1 for labeled.
    #[default]
    AsPrinted,
    /// Generator residual `(s_l - 1)^2 + s_ul^2`; discriminator target 0 for labeled.
    Swapped,
}

/// Loss value with the gradient for each of two input slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Grad2<T> {
    pub value: T,
    pub da: Vec<T>,
    pub db: Vec<T>,
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return shape_err(format!("length mismatch: {a} vs {b}"));
    }
    if a == 0 {
        return shape_err("empty input");
    }
    Ok(())
}

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`; gradients for `pred` and `gt`.
pub fn dice_grad<T: Real>(pred: &[T], gt: &[T], eps: T) -> Result<Grad2<T>> {
    check_len(pred.len(), gt.len())?;
    let two = lit::<T>(2.0);
    let mut inter = T::zero();
    let mut sp = T::zero();
    let mut sg = T::zero();
    for (&p, &g) in pred.iter().zip(gt) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    let num = two * inter + eps;
    let den = sp + sg + eps;
    let den2 = den * den;
    let value = T::one() - num / den;
    let da = gt.iter().map(|&g| -(two * g * den - num) / den2).collect();
    let db = pred.iter().map(|&p| -(two * p * den - num) / den2).collect();
    Ok(Grad2 { value, da, db })
}

/// Mean squared difference; gradients for `pred` and `target`.
pub fn mse_grad<T: Real>(pred: &[T], target: &[T]) -> Result<Grad2<T>> {
    check_len(pred.len(), target.len())?;
    let n = T::from_usize(pred.len()).unwrap();
    let two = lit::<T>(2.0);
    let mut value = T::zero();
    let mut da = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        value += d * d;
        da.push(two * d / n);
    }
    let db = da.iter().map(|&g| -g).collect();
    Ok(Grad2 { value: value / n, da, db })
}

/// Mean of `(seg - logistic(k dist))^2`; gradients for `seg` and `dist`.
pub fn cross_task_grad<T: Real>(seg: &[T], dist: &[T], k: Steepness) -> Result<Grad2<T>> {
    check_len(seg.len(), dist.len())?;
    let n = T::from_usize(seg.len()).unwrap();
    let kk = lit::<T>(k.get());
    let two = lit::<T>(2.0);
    let mut value = T::zero();
    let mut da = Vec::with_capacity(seg.len());
    let mut db = Vec::with_capacity(seg.len());
    for (&s, &d) in seg.iter().zip(dist) {
        let (q, dq) = logistic_with_slope(kk, d);
        let r = s - q;
        value += r * r;
        da.push(two * r / n);
        db.push(-two * r * dq / n);
    }
    Ok(Grad2 {
        value: value / n,
        da,
        db,
    })
}

/// `logistic(k z)` and its derivative in `z`; zero slope where the argument is clamped.
fn logistic_with_slope<T: Real>(k: T, z: T) -> (T, T) {
    let arg = k * z;
    let lim = lit::<T>(EXP_CLAMP);
    let q: T = lit(logistic(1.0, arg.to_f64().unwrap()));
    if arg.abs() >= lim {
        (q, T::zero())
    } else {
        (q, k * q * (T::one() - q))
    }
}

/// Guidance loss value, gradients and coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance<T> {
    pub value: T,
    pub d_seg: Vec<T>,
    pub d_dist: Vec<T>,
    /// Voxels with `U < t`.
    pub covered: usize,
    pub total: usize,
}

impl<T> Guidance<T> {
    pub fn coverage(&self) -> f64 {
        self.covered as f64 / self.total as f64
    }

    pub fn zero_coverage(&self) -> bool {
        self.covered == 0
    }
}

/// Cross-task penalty averaged over voxels with `U < t`. The uncertainty is
/// a constant filter, so its gradient is zero almost everywhere.
pub fn guidance_grad<T: Real>(seg: &[T], dist: &[T], unc: &[T], t: f64, k: Steepness) -> Result<Guidance<T>> {
    check_len(seg.len(), dist.len())?;
    check_len(seg.len(), unc.len())?;
    if !(t > 0.0) {
        return Err(Error::Contract(format!("threshold must be > 0, got {t}")));
    }
    let kk = lit::<T>(k.get());
    let tt = lit::<T>(t);
    let covered = unc.iter().filter(|&&u| u < tt).count();
    let mut d_seg = vec![T::zero(); seg.len()];
    let mut d_dist = vec![T::zero(); seg.len()];
    let mut value = T::zero();
    if covered > 0 {
        let m = T::from_usize(covered).unwrap();
        let two = lit::<T>(2.0);
        for i in 0..seg.len() {
            if unc[i] < tt {
                let (q, dq) = logistic_with_slope(kk, dist[i]);
                let r = seg[i] - q;
                value += r * r;
                d_seg[i] = two * r / m;
                d_dist[i] = -two * r * dq / m;
            }
        }
        value = value / m;
    }
    Ok(Guidance {
        value,
        d_seg,
        d_dist,
        covered,
        total: seg.len(),
    })
}

/// Robust adversarial residual `r / (2 beta + r)` with its score derivatives
/// `(value, d/d score_l, d/d score_ul)`.
pub fn adv_gm_grad(score_l: f64, score_ul: f64, beta: f64, pairing: AdvPairing) -> (f64, f64, f64) {
    let (tl, tu) = match pairing {
        AdvPairing::AsPrinted => (0.0, 1.0),
        AdvPairing::Swapped => (1.0, 0.0),
    };
    let (el, eu) = (score_l - tl, score_ul - tu);
    let r = el * el + eu * eu;
    let den = 2.0 * beta + r;
    if den == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let dr = 2.0 * beta / (den * den);
    (r / den, dr * 2.0 * el, dr * 2.0 * eu)
}

pub fn adv_gm_loss(score_l: f64, score_ul: f64, beta: f64) -> f64 {
    adv_gm_grad(score_l, score_ul, beta, AdvPairing::AsPrinted).0
}

/// Least-squares discriminator objective, complementing the generator pairing.
pub fn discriminator_grad(score_l: f64, score_ul: f64, pairing: AdvPairing) -> (f64, f64, f64) {
    let (tl, tu) = match pairing {
        AdvPairing::AsPrinted => (1.0, 0.0),
        AdvPairing::Swapped => (0.0, 1.0),
    };
    let (el, eu) = (score_l - tl, score_ul - tu);
    (el * el + eu * eu, 2.0 * el, 2.0 * eu)
}

pub fn discriminator_loss(score_l: f64, score_ul: f64) -> f64 {
    discriminator_grad(score_l, score_ul, AdvPairing::AsPrinted).0
}

fn flat(f: &Field) -> Vec<f64> {
    f.iter().copied().collect()
}

pub fn dice_loss(pred: &Field, gt: &BinaryMask, epsilon: f64) -> Result<f64> {
    same_shape(pred, &gt.data, "loss input")?;
    Ok(dice_grad(&flat(pred), &flat(&gt.to_field()), epsilon)?.value)
}

pub fn distance_mse(pred: &Field, gt: &SignedDistanceMap) -> Result<f64> {
    same_shape(pred, &gt.data, "loss input")?;
    Ok(mse_grad(&flat(pred), &flat(&gt.data))?.value)
}

pub fn cross_task_loss(seg: &Field, dist: &Field, k: Steepness) -> Result<f64> {
    same_shape(seg, dist, "loss input")?;
    Ok(cross_task_grad(&flat(seg), &flat(dist), k)?.value)
}

/// Returns the loss and the covered fraction of voxels.
pub fn guidance_loss(seg: &Field, dist: &Field, unc: &Field, t: f64, k: Steepness) -> Result<(f64, f64)> {
    same_shape(seg, dist, "loss input")?;
    same_shape(seg, unc, "loss input")?;
    let g = guidance_grad(&flat(seg), &flat(dist), &flat(unc), t, k)?;
    Ok((g.value, g.coverage()))
}

/// Per-term loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice: f64,
    pub dist_mse: f64,
    pub cross_task: f64,
    pub guidance: f64,
    pub adv_gm: f64,
    /// Fraction of guided voxels with `U < t` (1 when guidance is off).
    pub coverage: f64,
    /// Weight actually applied to `adv_gm`.
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted sum of the terms.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.dice + w.lambda_dist * self.dist_mse + w.lambda_ct * self.cross_task + w.lambda_g * self.guidance + self.gamma * self.adv_gm
    }
}

/// Network outputs of one case plus whatever targets apply to it.
#[derive(Debug, Clone, Copy)]
pub struct CaseTerms<'a, T> {
    pub seg: &'a [T],
    pub dist: &'a [T],
    /// Binary label as 0/1 values.
    pub label: Option<&'a [T]>,
    pub sdm: Option<&'a [T]>,
    /// Uncertainty map for the guidance term.
    pub uncertainty: Option<&'a [T]>,
}

/// Total objective with gradients per case and per adversarial pair.
#[derive(Debug, Clone)]
pub struct Objective<T> {
    pub breakdown: LossBreakdown,
    pub d_seg: Vec<Vec<T>>,
    pub d_dist: Vec<Vec<T>>,
    /// Gradients w.r.t. the unlabeled score of each pair.
    pub d_score_ul: Vec<f64>,
}

/// Composite objective. Dice and distance MSE average over labeled cases,
/// cross-task and guidance pool all voxels of all (guided) cases, and the
/// adversarial term averages over `(score_l, score_ul)` pairs weighted by
/// `gamma` (the current ramped value).
pub fn total_loss<T: Real>(
    cases: &[CaseTerms<'_, T>],
    pairs: &[(f64, f64)],
    w: &LossWeights,
    gamma: f64,
    pairing: AdvPairing,
    t: f64,
    k: Steepness,
) -> Result<Objective<T>> {
    let n_labeled = cases.iter().filter(|c| c.label.is_some()).count();
    if n_labeled == 0 {
        return Err(Error::Contract("supervised terms need at least one labeled case".into()));
    }
    let eps = lit::<T>(w.epsilon);
    let mut b = LossBreakdown {
        gamma,
        coverage: 1.0,
        ..LossBreakdown::default()
    };
    let mut d_seg: Vec<Vec<T>> = cases.iter().map(|c| vec![T::zero(); c.seg.len()]).collect();
    let mut d_dist: Vec<Vec<T>> = cases.iter().map(|c| vec![T::zero(); c.dist.len()]).collect();
    let add = |dst: &mut [T], src: &[T], scale: f64| {
        let s = lit::<T>(scale);
        dst.iter_mut().zip(src).for_each(|(d, &g)| *d += s * g);
    };

    let nl = n_labeled as f64;
    for (i, c) in cases.iter().enumerate() {
        let Some(label) = c.label else { continue };
        let dg = dice_grad(c.seg, label, eps)?;
        b.dice += dg.value.to_f64().unwrap() / nl;
        add(&mut d_seg[i], &dg.da, 1.0 / nl);
        if w.lambda_dist > 0.0 {
            let sdm = c
                .sdm
                .ok_or_else(|| Error::Contract("labeled case without signed distance target".into()))?;
            let m = mse_grad(c.dist, sdm)?;
            b.dist_mse += m.value.to_f64().unwrap() / nl;
            add(&mut d_dist[i], &m.da, w.lambda_dist / nl);
        }
    }

    let total_vox: usize = cases.iter().map(|c| c.seg.len()).sum();
    if w.lambda_ct > 0.0 {
        for (i, c) in cases.iter().enumerate() {
            // per-case means reweighted to a pooled voxel mean
            let share = c.seg.len() as f64 / total_vox as f64;
            let g = cross_task_grad(c.seg, c.dist, k)?;
            b.cross_task += share * g.value.to_f64().unwrap();
            add(&mut d_seg[i], &g.da, w.lambda_ct * share);
            add(&mut d_dist[i], &g.db, w.lambda_ct * share);
        }
    }

    if w.lambda_g > 0.0 {
        let guided: Vec<(usize, Guidance<T>)> = cases
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.uncertainty.map(|u| (i, u)))
            .map(|(i, u)| guidance_grad(cases[i].seg, cases[i].dist, u, t, k).map(|g| (i, g)))
            .collect::<Result<_>>()?;
        let covered: usize = guided.iter().map(|(_, g)| g.covered).sum();
        let total: usize = guided.iter().map(|(_, g)| g.total).sum();
        if total > 0 {
            b.coverage = covered as f64 / total as f64;
        }
        for (i, g) in &guided {
            if g.covered == 0 {
                continue;
            }
            let share = g.covered as f64 / covered as f64;
            b.guidance += share * g.value.to_f64().unwrap();
            add(&mut d_seg[*i], &g.d_seg, w.lambda_g * share);
            add(&mut d_dist[*i], &g.d_dist, w.lambda_g * share);
        }
    }

    let mut d_score_ul = vec![0.0; pairs.len()];
    if gamma > 0.0 && !pairs.is_empty() {
        let np = pairs.len() as f64;
        for (j, &(sl, su)) in pairs.iter().enumerate() {
            let (v, _, dsu) = adv_gm_grad(sl, su, w.beta, pairing);
            b.adv_gm += v / np;
            d_score_ul[j] = gamma * dsu / np;
        }
    }

    b.total = b.weighted_sum(w);
    if !b.total.is_finite() {
        return Err(Error::Numerics(format!("non-finite loss: {b:?}")));
    }
    Ok(Objective {
        breakdown: b,
        d_seg,
        d_dist,
        d_score_ul,
    })
}
