use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BinaryMask, Volume, MIN_DIM};
use crate::error::{Error, Result};

/// Synthetic atrium-like phantom: a union of overlapping ellipsoids on a
/// noisy two-intensity background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid_shape: [usize; 3],
    pub n_lobes: usize,
    /// Semi-axis range in voxels.
    pub radius_range: (f64, f64),
    pub noise_sigma: f64,
    pub fg_intensity: f64,
    pub bg_intensity: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let min_dim = *self.grid_shape.iter().min().unwrap();
        let (r_min, r_max) = self.radius_range;
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        if min_dim < MIN_DIM {
            return bad("grid dims must be >= 4");
        }
        if self.n_lobes == 0 {
            return bad("n_lobes must be >= 1");
        }
        if !(r_min > 0.0 && r_min <= r_max) {
            return bad("radius range must satisfy 0 < r_min <= r_max");
        }
        if r_max >= min_dim as f64 / 2.0 {
            return bad("r_max must be below half the smallest grid dim");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if self.fg_intensity == self.bg_intensity {
            return bad("fg and bg intensity must differ");
        }
        Ok(())
    }

    /// Desk-scale default: three lobes sized relative to the grid.
    pub fn desk(grid_shape: [usize; 3], seed: u64) -> Self {
        let min_dim = *grid_shape.iter().min().unwrap() as f64;
        Self {
            grid_shape,
            n_lobes: 3,
            radius_range: (0.16 * min_dim, 0.28 * min_dim),
            noise_sigma: 0.35,
            fg_intensity: 1.0,
            bg_intensity: 0.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Clamps a center so the ellipsoid stays within `[0, dim-1]` on this axis.
fn clamp_center(c: f64, semi: f64, dim: usize) -> f64 {
    let hi = (dim - 1) as f64 - semi;
    if semi > hi {
        (dim - 1) as f64 / 2.0
    } else {
        c.clamp(semi, hi)
    }
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, BinaryMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (r_min, r_max) = spec.radius_range;
    let shape = spec.grid_shape;
    let sample_semi = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        let mut s = [0.0; 3];
        for v in &mut s {
            *v = if r_max > r_min { rng.gen_range(r_min..=r_max) } else { r_min };
        }
        s
    };

    let semi0 = sample_semi(&mut rng);
    let mut center0 = [0.0; 3];
    for a in 0..3 {
        let mid = (shape[a] - 1) as f64 / 2.0;
        let jitter = 0.1 * shape[a] as f64;
        center0[a] = clamp_center(mid + rng.gen_range(-jitter..=jitter), semi0[a], shape[a]);
    }
    let first = Ellipsoid {
        center: center0,
        semi: semi0,
    };
    let mut lobes = vec![first];
    for _ in 1..spec.n_lobes {
        let semi = sample_semi(&mut rng);
        let reach = 0.8 * semi0.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut center = first.center;
        for _attempt in 0..16 {
            let mut cand = [0.0; 3];
            for a in 0..3 {
                cand[a] = clamp_center(first.center[a] + rng.gen_range(-reach..=reach), semi[a], shape[a]);
            }
            // keep the union connected: each lobe center lies inside the first lobe
            if first.contains(cand) {
                center = cand;
                break;
            }
        }
        for a in 0..3 {
            center[a] = clamp_center(center[a], semi[a], shape[a]);
        }
        lobes.push(Ellipsoid { center, semi });
    }

    let mask = Array3::from_shape_fn(shape, |(z, y, x)| {
        let p = [z as f64, y as f64, x as f64];
        u8::from(lobes.iter().any(|e| e.contains(p)))
    });
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let data = mask.mapv(|m| {
        let base = spec.bg_intensity + (spec.fg_intensity - spec.bg_intensity) * f64::from(m);
        if spec.noise_sigma > 0.0 {
            base + noise.sample(&mut rng)
        } else {
            base
        }
    });
    let vol = Volume::new(format!("phantom_{}", spec.seed), data, [1.0; 3])?;
    Ok((vol, BinaryMask { data: mask }))
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeSet, VecDeque};

    use super::*;

    fn sphere(r: f64, seed: u64) -> PhantomSpec {
        PhantomSpec {
            grid_shape: [32, 32, 32],
            n_lobes: 1,
            radius_range: (r, r),
            noise_sigma: 0.0,
            fg_intensity: 2.0,
            bg_intensity: -1.0,
            seed,
        }
    }

    #[test]
    fn noiseless_phantom_has_two_levels() {
        let (v, m) = make_phantom(&sphere(6.0, 1)).unwrap();
        let levels: BTreeSet<u64> = v.data.iter().map(|x| x.to_bits()).collect();
        assert_eq!(levels.len(), 2);
        assert!(m.count() > 0);
    }

    #[test]
    fn deterministic_for_seed() {
        let spec = PhantomSpec::desk([16, 16, 16], 9);
        let a = make_phantom(&spec).unwrap();
        let b = make_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let c = make_phantom(&PhantomSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn sphere_volume_matches_brute_force_count() {
        for (r, seed) in [(5.0, 3), (7.5, 4), (10.0, 5)] {
            let spec = sphere(r, seed);
            let (_, m) = make_phantom(&spec).unwrap();
            let ideal = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
            let count = m.count() as f64;
            assert!((count - ideal).abs() <= 0.1 * ideal, "r={r}: {count} vs {ideal}");
        }
    }

    #[test]
    fn single_lobe_is_connected_and_inside() {
        for seed in 0..5 {
            let (_, m) = make_phantom(&PhantomSpec { n_lobes: 1, ..PhantomSpec::desk([20, 20, 20], seed) }).unwrap();
            assert_eq!(components(&m), 1);
        }
        for seed in 0..5 {
            let (_, m) = make_phantom(&PhantomSpec::desk([24, 24, 24], seed)).unwrap();
            assert_eq!(components(&m), 1, "seed {seed}");
        }
    }

    fn components(m: &BinaryMask) -> usize {
        let s = m.shape();
        let mut seen = Array3::<bool>::from_elem(s, false);
        let mut count = 0;
        for (idx, &v) in m.data.indexed_iter() {
            if v == 0 || seen[idx] {
                continue;
            }
            count += 1;
            let mut q = VecDeque::from([idx]);
            seen[idx] = true;
            while let Some((z, y, x)) = q.pop_front() {
                let n = [(-1i64, 0i64, 0i64), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
                for (dz, dy, dx) in n {
                    let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                    if nz < 0 || ny < 0 || nx < 0 || nz >= s[0] as i64 || ny >= s[1] as i64 || nx >= s[2] as i64 {
                        continue;
                    }
                    let j = (nz as usize, ny as usize, nx as usize);
                    if m.data[j] == 1 && !seen[j] {
                        seen[j] = true;
                        q.push_back(j);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = sphere(16.0, 0);
        assert!(make_phantom(&s).is_err());
        s.radius_range = (4.0, 4.0);
        s.fg_intensity = s.bg_intensity;
        assert!(make_phantom(&s).is_err());
    }
}
