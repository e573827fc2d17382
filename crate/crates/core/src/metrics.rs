//! Segmentation metrics, per-case reports and a paired permutation test.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::seed;
use crate::transforms::squared_edt;
use crate::volumes::{same_shape, BinaryMask};

/// Overlap scores in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Empty prediction against empty truth scores 100 on all four; any other
/// zero denominator scores 0.
pub fn overlap_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<Overlap> {
    same_shape(&pred.data, &gt.data, "overlap metrics")?;
    let mut inter = 0;
    let mut np = 0;
    let mut ng = 0;
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        inter += usize::from(p & g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    if np == 0 && ng == 0 {
        return Ok(Overlap {
            dice: 100.0,
            jaccard: 100.0,
            precision: 100.0,
            recall: 100.0,
        });
    }
    Ok(Overlap {
        dice: ratio(2 * inter, np + ng),
        jaccard: ratio(inter, np + ng - inter),
        precision: ratio(inter, np),
        recall: ratio(inter, ng),
    })
}

/// Foreground voxels with at least one background 6-neighbor; voxels outside
/// the grid count as background.
pub fn boundary(mask: &BinaryMask) -> Array3<bool> {
    let d = &mask.data;
    let (nz, ny, nx) = d.dim();
    Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
        if d[(z, y, x)] == 0 {
            return false;
        }
        z == 0
            || y == 0
            || x == 0
            || z + 1 == nz
            || y + 1 == ny
            || x + 1 == nx
            || d[(z - 1, y, x)] == 0
            || d[(z + 1, y, x)] == 0
            || d[(z, y - 1, x)] == 0
            || d[(z, y + 1, x)] == 0
            || d[(z, y, x - 1)] == 0
            || d[(z, y, x + 1)] == 0
    })
}

/// Nearest boundary-to-boundary distances in both directions, pooled, in mm.
pub fn pooled_surface_distances(pred: &BinaryMask, gt: &BinaryMask, spacing: [f64; 3]) -> Result<Vec<f64>> {
    same_shape(&pred.data, &gt.data, "surface distances")?;
    if pred.count() == 0 {
        return Err(Error::EmptyMask("prediction".into()));
    }
    if gt.count() == 0 {
        return Err(Error::EmptyMask("ground truth".into()));
    }
    let bp = boundary(pred);
    let bg = boundary(gt);
    let to_p = squared_edt(&bp, spacing);
    let to_g = squared_edt(&bg, spacing);
    let mut out = Vec::new();
    for (b, dist) in [(&bp, &to_g), (&bg, &to_p)] {
        out.extend(b.iter().zip(dist.iter()).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()));
    }
    Ok(out)
}

/// Percentile with linear interpolation between order statistics,
/// `q` in `[0, 100]`; rank `q/100 * (n - 1)`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub asd: f64,
}

pub fn surface_distances(pred: &BinaryMask, gt: &BinaryMask, spacing: [f64; 3]) -> Result<SurfaceDistances> {
    let d = pooled_surface_distances(pred, gt, spacing)?;
    Ok(SurfaceDistances {
        hd95: percentile(&d, 95.0),
        asd: d.iter().sum::<f64>() / d.len() as f64,
    })
}

/// Signed relative volume difference in percent.
pub fn ravd(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_shape(&pred.data, &gt.data, "ravd")?;
    let g = gt.count();
    if g == 0 {
        return Err(Error::EmptyMask("ground truth".into()));
    }
    Ok(100.0 * (pred.count() as f64 - g as f64) / g as f64)
}

pub const CSV_HEADER: &str = "case_id,dice,jaccard,hd95,asd,ravd,precision,recall";
pub const SUMMARY_ID: &str = "MEAN±STD";

/// One report row; distance metrics are missing when a mask is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub ravd: Option<f64>,
    pub precision: f64,
    pub recall: f64,
}

impl CaseMetrics {
    pub fn compute(case_id: impl Into<String>, pred: &BinaryMask, gt: &BinaryMask, spacing: [f64; 3]) -> Result<Self> {
        let o = overlap_metrics(pred, gt)?;
        let missing = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::EmptyMask(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let sd = match surface_distances(pred, gt, spacing) {
            Ok(s) => Some(s),
            Err(Error::EmptyMask(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            case_id: case_id.into(),
            dice: o.dice,
            jaccard: o.jaccard,
            hd95: sd.map(|s| s.hd95),
            asd: sd.map(|s| s.asd),
            ravd: missing(ravd(pred, gt))?,
            precision: o.precision,
            recall: o.recall,
        })
    }

    /// Values in CSV column order.
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.dice),
            Some(self.jaccard),
            self.hd95,
            self.asd,
            self.ravd,
            Some(self.precision),
            Some(self.recall),
        ]
    }

    pub fn get(&self, metric: &str) -> Option<Option<f64>> {
        let i = METRICS.iter().position(|m| *m == metric)?;
        Some(self.values()[i])
    }
}

pub const METRICS: [&str; 7] = ["dice", "jaccard", "hd95", "asd", "ravd", "precision", "recall"];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<CaseMetrics>,
}

/// Mean and population standard deviation over the available values.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl MetricReport {
    pub fn summary(&self) -> [Option<(f64, f64)>; 7] {
        std::array::from_fn(|i| {
            let v: Vec<f64> = self.rows.iter().filter_map(|r| r.values()[i]).collect();
            mean_std(&v)
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.case_id);
            for v in r.values() {
                match v {
                    Some(v) => write!(s, ",{v}").unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s.push_str(SUMMARY_ID);
        for m in self.summary() {
            match m {
                Some((mean, std)) => write!(s, ",{mean:.2}±{std:.2}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parses per-case rows back; the summary row is skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Format("report header mismatch".into()));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                return Err(Error::Format(format!("report line {}: expected 8 columns", n + 2)));
            }
            if cols[0] == SUMMARY_ID {
                continue;
            }
            let mut vals = [None; 7];
            for (i, c) in cols[1..].iter().enumerate() {
                if !c.is_empty() {
                    vals[i] = Some(
                        c.parse::<f64>()
                            .map_err(|e| Error::Format(format!("report line {}: {e}", n + 2)))?,
                    );
                }
            }
            let req = |i: usize| vals[i].ok_or_else(|| Error::Format(format!("report line {}: missing {}", n + 2, METRICS[i])));
            rows.push(CaseMetrics {
                case_id: cols[0].to_string(),
                dice: req(0)?,
                jaccard: req(1)?,
                hd95: vals[2],
                asd: vals[3],
                ravd: vals[4],
                precision: req(5)?,
                recall: req(6)?,
            });
        }
        Ok(Self { rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

pub const EXACT_MAX_N: usize = 20;
pub const RESAMPLES: usize = 100_000;
pub const MIN_PAIRS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub p_value: f64,
    /// Mean of `a - b`.
    pub mean_diff: f64,
    pub n: usize,
    pub exact: bool,
}

/// Two-sided paired permutation test on `a - b` with statistic
/// `|mean difference|`. Exact sign-flip enumeration up to 20 pairs, seeded
/// resampling beyond.
pub fn paired_test(a: &[f64], b: &[f64], seed: u64) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("unpaired samples: {} vs {}", a.len(), b.len())));
    }
    if a.len() < MIN_PAIRS {
        return Err(Error::Contract(format!("need at least {MIN_PAIRS} pairs, got {}", a.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite paired values".into()));
    }
    let n = d.len();
    let observed = d.iter().sum::<f64>().abs();
    let scale = d.iter().map(|v| v.abs()).sum::<f64>();
    // ties within rounding count as at least as extreme
    let cut = observed - 1e-12 * scale.max(1.0);
    let stat = |signs: u64| {
        d.iter()
            .enumerate()
            .map(|(i, v)| if signs >> i & 1 == 1 { -v } else { *v })
            .sum::<f64>()
            .abs()
    };
    let (p_value, exact) = if n <= EXACT_MAX_N {
        let total = 1u64 << n;
        let chunks = 64u64.min(total);
        let per = total / chunks;
        let counts = par::map_range(chunks as usize, |c| {
            let lo = c as u64 * per;
            (lo..lo + per).filter(|&s| stat(s) >= cut).count() as u64
        });
        (counts.iter().sum::<u64>() as f64 / total as f64, true)
    } else {
        let mut rng = seed::rng(seed, 0x9E3, 0);
        let mut count = 0usize;
        for _ in 0..RESAMPLES {
            let s: f64 = d.iter().map(|v| if rng.gen::<bool>() { -v } else { *v }).sum();
            count += usize::from(s.abs() >= cut);
        }
        ((1 + count) as f64 / (1 + RESAMPLES) as f64, false)
    };
    Ok(PairedTest {
        p_value,
        mean_diff: d.iter().sum::<f64>() / n as f64,
        n,
        exact,
    })
}
