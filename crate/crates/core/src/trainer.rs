//! Semi-supervised training loop, evaluation and checkpoints.
//!
//! Every random draw of step `s` comes from a stream derived from
//! `(seed, purpose, s)`: labeled sampling, unlabeled sampling, training
//! dropout and MC dropout never share state. A run is therefore a pure
//! function of its config, data and seed, resuming needs no RNG state, and
//! adding unlabeled data leaves the labeled stream untouched.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{discriminator_grad, total_loss, AdvPairing, CaseTerms, LossWeights};
use crate::metrics::{CaseMetrics, MetricReport};
use crate::network::{DiscTrace, Discriminator, Mode, NetConfig, ParamSet, SegNet};
use crate::optim::{load_buffers, Adam, Sgd};
use crate::par;
use crate::seed;
use crate::tensor::{lit, Real, Tensor};
use crate::transforms::{sdm, Steepness};
use crate::uncertainty::{mc_sample_tensors, mean_entropy, McConfig};
use crate::volumes::io::{read_mtv_raw, write_mtv_raw};
use crate::volumes::{BinaryMask, Case, Field, Volume};

const TAG_LABELED: u64 = 1;
const TAG_UNLABELED: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_MC: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub batch_labeled: usize,
    /// 0 trains on labeled data only.
    pub batch_unlabeled: usize,
    pub lr_main: f64,
    pub momentum: f64,
    pub lr_disc: f64,
    pub weights: LossWeights,
    pub gamma_rampup_iters: usize,
    /// Threshold start and end as fractions of ln 2.
    pub t_schedule: (f64, f64),
    pub mc: McConfig,
    pub k: Steepness,
    pub pairing: AdvPairing,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            batch_labeled: 2,
            batch_unlabeled: 2,
            lr_main: 0.01,
            momentum: 0.9,
            lr_disc: 1e-4,
            weights: LossWeights::default(),
            gamma_rampup_iters: 400,
            t_schedule: (0.75, 1.0),
            mc: McConfig::default(),
            k: Steepness::default(),
            pairing: AdvPairing::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch_labeled == 0 {
            return bad("batch_labeled must be >= 1".into());
        }
        if !(self.lr_main > 0.0 && self.lr_disc > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        let (a, b) = self.t_schedule;
        if !(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0 && a <= b) {
            return bad(format!("t_schedule {:?} must satisfy 0 < start <= end <= 1", self.t_schedule));
        }
        self.weights.validate()?;
        if self.weights.lambda_g > 0.0 {
            self.mc.validate()?;
        }
        Ok(())
    }
}

fn ramp_fraction(step: u64, rampup: usize) -> f64 {
    if rampup == 0 {
        1.0
    } else {
        (step as f64 / rampup as f64).min(1.0)
    }
}

/// `gamma_max * exp(-5 (1 - min(step / rampup, 1))^2)`.
pub fn gamma_at(step: u64, cfg: &TrainConfig) -> f64 {
    let x = 1.0 - ramp_fraction(step, cfg.gamma_rampup_iters);
    cfg.weights.gamma * (-5.0 * x * x).exp()
}

/// Linear from `t_start ln 2` to `t_end ln 2` over the ramp-up, constant after.
pub fn threshold_at(step: u64, cfg: &TrainConfig) -> f64 {
    let (a, b) = cfg.t_schedule;
    LN_2 * (a + (b - a) * ramp_fraction(step, cfg.gamma_rampup_iters))
}

/// A training case in network layout.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub id: String,
    pub x: Tensor<T>,
    pub label: Option<Vec<T>>,
    pub sdm: Option<Vec<T>>,
}

impl<T: Real> Sample<T> {
    pub fn new(volume: &Volume, mask: Option<&BinaryMask>, in_shape: [usize; 3]) -> Result<Self> {
        if volume.shape() != in_shape {
            return Err(Error::Shape(format!(
                "case {}: shape {:?} differs from network input {in_shape:?}",
                volume.id,
                volume.shape()
            )));
        }
        let (label, sdm) = match mask {
            Some(m) => {
                if m.shape() != in_shape {
                    return Err(Error::Shape(format!("case {}: mask shape {:?}", volume.id, m.shape())));
                }
                let s = sdm(m)?;
                (
                    Some(m.data.iter().map(|&v| lit(f64::from(v))).collect()),
                    Some(s.data.iter().map(|&v| lit(v)).collect()),
                )
            }
            None => (None, None),
        };
        Ok(Self {
            id: volume.id.clone(),
            x: Tensor::from_field(&volume.data),
            label,
            sdm,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub labeled: Vec<Sample<T>>,
    pub unlabeled: Vec<Sample<T>>,
}

impl<T: Real> TrainData<T> {
    /// Volumes must already be preprocessed to the network input shape.
    pub fn new(labeled: &[(Volume, BinaryMask)], unlabeled: &[Volume], in_shape: [usize; 3]) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::Contract("training needs at least one labeled case".into()));
        }
        Ok(Self {
            labeled: labeled
                .iter()
                .map(|(v, m)| Sample::new(v, Some(m), in_shape))
                .collect::<Result<_>>()?,
            unlabeled: unlabeled
                .iter()
                .map(|v| Sample::new(v, None, in_shape))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub step: usize,
    pub net: SegNet<T>,
    pub disc: Discriminator<T>,
    pub sgd: Sgd<T>,
    pub adam: Adam<T>,
    pub best_val_dice: Option<f64>,
}

impl<T: Real> TrainState<T> {
    pub fn new(net_cfg: NetConfig, cfg: &TrainConfig) -> Result<Self> {
        let net = SegNet::new(net_cfg)?;
        let disc = Discriminator::from_config(&net.cfg);
        Ok(Self {
            step: 0,
            sgd: Sgd::new(&net, cfg.lr_main, cfg.momentum),
            adam: Adam::new(&disc, cfg.lr_disc),
            net,
            disc,
            best_val_dice: None,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub dice: f64,
    pub dist_mse: f64,
    pub cross_task: f64,
    pub guidance: f64,
    pub adv_gm: f64,
    pub disc_loss: Option<f64>,
    pub gamma: f64,
    pub threshold: f64,
    pub coverage: f64,
    pub wall_time_s: f64,
}

fn pair_input<T: Real>(x: &Tensor<T>, dist: &[T]) -> Tensor<T> {
    let mut data = Vec::with_capacity(2 * dist.len());
    data.extend_from_slice(&x.data);
    data.extend_from_slice(dist);
    Tensor {
        channels: 2,
        dims: x.dims,
        data,
    }
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerics(m) => Error::Numerics(format!("step {step}: {m}")),
        other => other,
    }
}

/// One optimization step: segmentation network first (discriminator
/// frozen), then the discriminator on the same predictions.
pub fn train_step<T: Real>(state: &mut TrainState<T>, data: &TrainData<T>, cfg: &TrainConfig) -> Result<StepRecord> {
    let started = Instant::now();
    let step = state.step;
    let s = step as u64;
    if data.labeled.is_empty() || cfg.batch_labeled == 0 {
        return Err(Error::Contract("empty labeled batch".into()));
    }
    let gamma = gamma_at(s, cfg);
    let t = threshold_at(s, cfg);

    let mut lrng = seed::rng(cfg.seed, TAG_LABELED, s);
    let mut batch: Vec<&Sample<T>> = (0..cfg.batch_labeled)
        .map(|_| &data.labeled[lrng.gen_range(0..data.labeled.len())])
        .collect();
    let n_lab = batch.len();
    if !data.unlabeled.is_empty() {
        let mut urng = seed::rng(cfg.seed, TAG_UNLABELED, s);
        batch.extend((0..cfg.batch_unlabeled).map(|_| &data.unlabeled[urng.gen_range(0..data.unlabeled.len())]));
    }
    let n_unl = batch.len() - n_lab;

    let dropout_seed = seed::derive(cfg.seed, TAG_DROPOUT, s);
    let traces = batch
        .iter()
        .enumerate()
        .map(|(slot, c)| state.net.forward_train(&c.x, Mode::Train, &mut seed::rng(dropout_seed, slot as u64, 0)))
        .collect::<Result<Vec<_>>>()
        .map_err(at_step(step))?;

    // uncertainty is a constant filter: no gradient flows through sampling
    let uncertainty: Vec<Option<Vec<T>>> = if cfg.weights.lambda_g > 0.0 {
        let mc_seed = seed::derive(cfg.seed, TAG_MC, s);
        batch
            .iter()
            .enumerate()
            .map(|(slot, c)| {
                let mc = McConfig {
                    n_samples: cfg.mc.n_samples,
                    seed: seed::derive(mc_seed, slot as u64, cfg.mc.seed),
                };
                let samples = mc_sample_tensors(&state.net, &c.x, &mc)?;
                let refs: Vec<&[T]> = samples.iter().map(|t| t.data.as_slice()).collect();
                mean_entropy(&refs).map(Some)
            })
            .collect::<Result<_>>()
            .map_err(at_step(step))?
    } else {
        vec![None; batch.len()]
    };

    let adversarial = gamma > 0.0 && n_unl > 0;
    let mut lab_traces: Vec<DiscTrace<T>> = Vec::new();
    let mut unl_traces: Vec<DiscTrace<T>> = Vec::new();
    if adversarial {
        for j in 0..n_unl {
            let l = batch[j % n_lab];
            let u = n_lab + j;
            let sdm = l.sdm.as_ref().expect("labeled sample");
            lab_traces.push(state.disc.forward(&pair_input(&l.x, sdm)).map_err(at_step(step))?);
            unl_traces.push(state.disc.forward(&pair_input(&batch[u].x, &traces[u].dist().data)).map_err(at_step(step))?);
        }
    }
    let pairs: Vec<(f64, f64)> = lab_traces
        .iter()
        .zip(&unl_traces)
        .map(|(l, u)| (l.score.to_f64().unwrap(), u.score.to_f64().unwrap()))
        .collect();

    let cases: Vec<CaseTerms<'_, T>> = batch
        .iter()
        .zip(&traces)
        .zip(&uncertainty)
        .map(|((c, tr), u)| CaseTerms {
            seg: &tr.seg().data,
            dist: &tr.dist().data,
            label: c.label.as_deref(),
            sdm: c.sdm.as_deref(),
            uncertainty: u.as_deref(),
        })
        .collect();
    let mut obj = total_loss(&cases, &pairs, &cfg.weights, if adversarial { gamma } else { 0.0 }, cfg.pairing, t, cfg.k)
        .map_err(at_step(step))?;

    if adversarial {
        let mut scratch = state.disc.zeros_like();
        for (j, tr) in unl_traces.iter().enumerate() {
            let g = obj.d_score_ul[j];
            if g == 0.0 {
                continue;
            }
            let gin = state.disc.backward(tr, lit(g), &mut scratch, true).expect("input grad");
            let d = &mut obj.d_dist[n_lab + j];
            d.iter_mut().zip(gin.channel(1)).for_each(|(a, &b)| *a += b);
        }
    }

    let mut grads = state.net.zeros_like();
    for (i, tr) in traces.iter().enumerate() {
        state.net.backward(tr, Some(&obj.d_seg[i]), Some(&obj.d_dist[i]), &mut grads);
    }
    if !grads.all_finite() {
        return Err(Error::Numerics(format!("step {step}: non-finite gradients")));
    }
    state.sgd.step(&mut state.net, &grads);
    if !state.net.all_finite() {
        return Err(Error::Numerics(format!("step {step}: non-finite parameters")));
    }

    let mut disc_loss = None;
    if adversarial {
        let np = pairs.len() as f64;
        let mut dgrads = state.disc.zeros_like();
        let mut total = 0.0;
        for (j, &(sl, su)) in pairs.iter().enumerate() {
            let (v, dl, du) = discriminator_grad(sl, su, cfg.pairing);
            total += v / np;
            state.disc.backward(&lab_traces[j], lit(dl / np), &mut dgrads, false);
            state.disc.backward(&unl_traces[j], lit(du / np), &mut dgrads, false);
        }
        if !total.is_finite() || !dgrads.all_finite() {
            return Err(Error::Numerics(format!("step {step}: non-finite discriminator loss")));
        }
        state.adam.step(&mut state.disc, &dgrads);
        disc_loss = Some(total);
    }

    state.step += 1;
    let b = obj.breakdown;
    Ok(StepRecord {
        step,
        total: b.total,
        dice: b.dice,
        dist_mse: b.dist_mse,
        cross_task: b.cross_task,
        guidance: b.guidance,
        adv_gm: b.adv_gm,
        disc_loss,
        gamma: b.gamma,
        threshold: t,
        coverage: b.coverage,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Runs steps until `cfg.max_iters`, calling `on_step` after each.
pub fn train<T: Real>(
    state: &mut TrainState<T>,
    data: &TrainData<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainState<T>, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    while state.step < cfg.max_iters {
        let rec = train_step(state, data, cfg)?;
        on_step(state, &rec)?;
        out.push(rec);
    }
    Ok(out)
}

/// Anything that maps a volume to a foreground probability field.
pub trait Segmenter: Sync {
    fn predict(&self, volume: &Volume) -> Result<Field>;
}

impl<T: Real> Segmenter for SegNet<T> {
    fn predict(&self, volume: &Volume) -> Result<Field> {
        let mut unused = seed::rng(0, 0, 0);
        Ok(self.forward(&volume.data, Mode::Eval, &mut unused)?.seg)
    }
}

/// Foreground where the probability is at least 0.5.
pub fn binarize(prob: &Field) -> BinaryMask {
    BinaryMask::from_threshold(prob, 0.5)
}

/// Per-case metrics of thresholded predictions; one row per case.
pub fn evaluate<S: Segmenter + ?Sized>(model: &S, cases: &[Case]) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = par::map_slice(cases, |c| {
        let gt = c
            .mask
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("case {} has no label", c.id())))?;
        let pred = binarize(&model.predict(&c.volume)?);
        CaseMetrics::compute(c.id(), &pred, gt, c.volume.spacing)
    });
    Ok(MetricReport {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

/// Appends one JSON object per line.
pub struct NdjsonLog {
    out: BufWriter<File>,
}

impl NdjsonLog {
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("log line: {e}"))))
        .collect()
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.toml";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    file: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    version: u32,
    step: usize,
    precision: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_val_dice: Option<f64>,
    lr_main: f64,
    momentum: f64,
    lr_disc: f64,
    adam_t: u64,
    net: NetConfig,
    blob: Vec<BlobEntry>,
}

fn named<T: Real, P: ParamSet<T>>(prefix: &str, p: &P) -> Vec<(String, Vec<T>)> {
    p.named_params()
        .into_iter()
        .map(|(n, v)| (format!("{prefix}/{n}"), v))
        .collect()
}

fn with_names<T: Real, P: ParamSet<T>>(prefix: &str, layout: &P, bufs: &[Vec<T>]) -> Vec<(String, Vec<T>)> {
    layout
        .named_params()
        .into_iter()
        .zip(bufs)
        .map(|((n, _), v)| (format!("{prefix}/{n}"), v.clone()))
        .collect()
}

fn all_blobs<T: Real>(state: &TrainState<T>) -> Vec<(String, Vec<T>)> {
    let mut b = named("net", &state.net);
    b.extend(with_names("net_velocity", &state.net, &state.sgd.velocity));
    b.extend(named("disc", &state.disc));
    b.extend(with_names("disc_m", &state.disc, &state.adam.m));
    b.extend(with_names("disc_v", &state.disc, &state.adam.v));
    b
}

/// Writes parameters and optimizer moments as float32 raw arrays plus a
/// TOML manifest. Resuming is exact for float32 training.
pub fn save_checkpoint<T: Real>(state: &TrainState<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, values) in all_blobs(state) {
        let file = format!("{}.mtv", name.replace('/', "__"));
        let v32: Vec<f32> = values.iter().map(|v| v.to_f32().unwrap()).collect();
        write_mtv_raw(&dir.join(&file), [1, 1, v32.len()], &v32)?;
        entries.push(BlobEntry {
            name,
            file,
            len: values.len(),
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        step: state.step,
        precision: T::NAME.to_string(),
        best_val_dice: state.best_val_dice,
        lr_main: state.sgd.lr,
        momentum: state.sgd.momentum,
        lr_disc: state.adam.lr,
        adam_t: state.adam.t,
        net: state.net.cfg.clone(),
        blob: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(dir.join(CHECKPOINT_MANIFEST), text)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<TrainState<T>> {
    let ck = |m: String| Error::Checkpoint(format!("{}: {m}", dir.display()));
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST)).map_err(|e| ck(format!("manifest: {e}")))?;
    let m: CheckpointManifest = toml::from_str(&text).map_err(|e| ck(format!("manifest: {e}")))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(ck(format!("unsupported version {}", m.version)));
    }
    let net = SegNet::<T>::new(m.net.clone()).map_err(|e| ck(e.to_string()))?;
    let disc = Discriminator::<T>::from_config(&net.cfg);
    let mut state = TrainState {
        step: m.step,
        sgd: Sgd::new(&net, m.lr_main, m.momentum),
        adam: Adam::new(&disc, m.lr_disc),
        net,
        disc,
        best_val_dice: m.best_val_dice,
    };
    state.adam.t = m.adam_t;

    let mut blobs: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for e in &m.blob {
        let (shape, data) = read_mtv_raw(&dir.join(&e.file)).map_err(|err| ck(format!("{}: {err}", e.file)))?;
        if data.len() != e.len || shape.iter().product::<usize>() != e.len {
            return Err(ck(format!("{}: expected {} values", e.file, e.len)));
        }
        blobs.insert(e.name.clone(), data.into_iter().map(|v| lit(f64::from(v))).collect());
    }
    let expected: Vec<(String, usize)> = all_blobs(&state).into_iter().map(|(n, v)| (n, v.len())).collect();
    if expected.len() != blobs.len() {
        return Err(ck(format!("expected {} blobs, manifest lists {}", expected.len(), blobs.len())));
    }
    let mut take = |name: &str, len: usize| -> Result<Vec<T>> {
        let v = blobs.remove(name).ok_or_else(|| ck(format!("missing blob {name}")))?;
        if v.len() != len {
            return Err(ck(format!("blob {name} has {} values, layout needs {len}", v.len())));
        }
        Ok(v)
    };
    let mut it = expected.iter();
    let mut next_group = |count: usize| -> Result<Vec<Vec<T>>> {
        (0..count)
            .map(|_| {
                let (n, l) = it.next().expect("counted");
                take(n, *l)
            })
            .collect()
    };
    let n_net = state.sgd.velocity.len();
    let n_disc = state.adam.m.len();
    let net_p = next_group(n_net)?;
    let net_v = next_group(n_net)?;
    let disc_p = next_group(n_disc)?;
    let disc_m = next_group(n_disc)?;
    let disc_v = next_group(n_disc)?;
    let mut i = 0;
    state.net.visit_mut(&mut |_, p| {
        *p = net_p[i].clone();
        i += 1;
    });
    let mut i = 0;
    state.disc.visit_mut(&mut |_, p| {
        *p = disc_p[i].clone();
        i += 1;
    });
    load_buffers(&mut state.sgd.velocity, net_v)?;
    load_buffers(&mut state.adam.m, disc_m)?;
    load_buffers(&mut state.adam.v, disc_v)?;
    if !state.net.all_finite() || !state.disc.all_finite() {
        return Err(ck("non-finite parameters".into()));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::{make_phantom, normalize, PhantomSpec, Volume};

    fn phantom(shape: [usize; 3], seed: u64) -> (Volume, BinaryMask) {
        let (v, m) = make_phantom(&PhantomSpec::desk(shape, seed)).unwrap();
        (normalize(&v).unwrap(), m)
    }

    fn cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            max_iters: iters,
            batch_labeled: 1,
            batch_unlabeled: 1,
            gamma_rampup_iters: 4,
            mc: McConfig { n_samples: 3, seed: 0 },
            k: Steepness::new(50.0).unwrap(),
            weights: LossWeights {
                gamma: 0.5,
                ..LossWeights::default()
            },
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn data(shape: [usize; 3], n_lab: usize, n_unl: usize) -> TrainData<f32> {
        let lab: Vec<_> = (0..n_lab).map(|i| phantom(shape, i as u64)).collect();
        let unl: Vec<_> = (0..n_unl).map(|i| phantom(shape, 100 + i as u64).0).collect();
        TrainData::new(&lab, &unl, shape).unwrap()
    }

    #[test]
    fn schedules() {
        let c = TrainConfig {
            gamma_rampup_iters: 100,
            weights: LossWeights {
                gamma: 2.0,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        };
        assert!((gamma_at(0, &c) - 2.0 * (-5.0f64).exp()).abs() < 1e-15);
        assert!((gamma_at(50, &c) - 2.0 * (-1.25f64).exp()).abs() < 1e-15);
        assert_eq!(gamma_at(100, &c), 2.0);
        assert_eq!(gamma_at(1000, &c), 2.0);
        assert!((threshold_at(0, &c) - 0.75 * LN_2).abs() < 1e-15);
        assert!((threshold_at(50, &c) - 0.875 * LN_2).abs() < 1e-15);
        assert!((threshold_at(500, &c) - LN_2).abs() < 1e-15);
        for s in 0..200 {
            assert!(gamma_at(s + 1, &c) >= gamma_at(s, &c));
            assert!(threshold_at(s + 1, &c) >= threshold_at(s, &c));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            t_schedule: (0.9, 0.5),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_labeled: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c: std::result::Result<TrainConfig, _> = toml::from_str("max_iters = 3\nbogus = 1\n");
        assert!(c.is_err());
    }

    #[test]
    fn step_isolates_parameters_and_sums_terms() {
        let shape = [8, 8, 8];
        let d = data(shape, 2, 2);
        let c = cfg(10);
        let mut st = TrainState::<f32>::new(NetConfig::desk(shape, 1), &c).unwrap();
        st.step = 8; // past the ramp: adversarial term fully on
        let before = st.clone();
        let rec = train_step(&mut st, &d, &c).unwrap();
        assert_ne!(st.net, before.net);
        assert_ne!(st.disc, before.disc);
        assert!(rec.disc_loss.is_some());
        assert!((rec.total - (rec.dice + 0.3 * (rec.dist_mse + rec.cross_task + rec.guidance) + rec.gamma * rec.adv_gm)).abs() < 1e-6);

        // with adversarial off the discriminator is untouched
        let mut c2 = c.clone();
        c2.weights.gamma = 0.0;
        let mut st2 = before.clone();
        let rec2 = train_step(&mut st2, &d, &c2).unwrap();
        assert_eq!(st2.disc, before.disc);
        assert_eq!(rec2.disc_loss, None);
    }

    #[test]
    fn unlabeled_ignored_when_gamma_and_batch_zero() {
        let shape = [8, 8, 8];
        let with_unl = data(shape, 2, 3);
        let without = TrainData {
            labeled: with_unl.labeled.clone(),
            unlabeled: vec![],
        };
        let mut c = cfg(3);
        c.weights = LossWeights::supervised();
        c.batch_unlabeled = 0;
        let mut a = TrainState::<f32>::new(NetConfig::desk(shape, 1), &c).unwrap();
        let mut b = a.clone();
        let ra = train(&mut a, &with_unl, &c, |_, _| Ok(())).unwrap();
        let rb = train(&mut b, &without, &c, |_, _| Ok(())).unwrap();
        assert_eq!(a.net, b.net);
        let strip = |r: &[StepRecord]| r.iter().map(|x| x.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(strip(&ra), strip(&rb));
    }

    #[test]
    fn empty_labeled_is_contract_error() {
        let shape = [8, 8, 8];
        let d: TrainData<f32> = TrainData {
            labeled: vec![],
            unlabeled: vec![],
        };
        let c = cfg(1);
        let mut st = TrainState::<f32>::new(NetConfig::desk(shape, 1), &c).unwrap();
        assert!(matches!(train_step(&mut st, &d, &c), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_aborts_with_step() {
        let shape = [8, 8, 8];
        let d = data(shape, 1, 1);
        let c = cfg(5);
        let mut st = TrainState::<f32>::new(NetConfig::desk(shape, 1), &c).unwrap();
        st.step = 3;
        st.net.encoder.stem.weight[0] = f32::NAN;
        match train_step(&mut st, &d, &c) {
            Err(Error::Numerics(m)) => assert!(m.contains("step 3"), "{m}"),
            other => panic!("expected numerics error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let shape = [8, 8, 8];
        let d = data(shape, 1, 1);
        let c = cfg(3);
        let mut st = TrainState::<f32>::new(NetConfig::desk(shape, 1), &c).unwrap();
        st.step = 6;
        train_step(&mut st, &d, &c).unwrap();
        st.best_val_dice = Some(0.5);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&st, dir.path()).unwrap();
        let back: TrainState<f32> = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, st);

        let blob = dir.path().join("net__encoder.stem.weight.mtv");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Checkpoint(_))));
        fs::write(&blob, b"XXXX").unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Checkpoint(_))));
    }

    struct Stub(Field);

    impl Segmenter for Stub {
        fn predict(&self, _: &Volume) -> Result<Field> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn evaluate_with_stubs() {
        let shape = [8, 8, 8];
        let (v, m) = phantom(shape, 3);
        let case = Case {
            volume: v,
            mask: Some(m.clone()),
        };
        let cases = vec![case.clone(), case.clone(), case];
        let perfect = evaluate(&Stub(m.to_field()), &cases).unwrap();
        assert_eq!(perfect.rows.len(), 3);
        assert!(perfect.rows.iter().all(|r| r.dice == 100.0 && r.hd95 == Some(0.0)));
        let half = evaluate(&Stub(Field::from_elem(shape, 0.5)), &cases[..1]).unwrap();
        let fg = m.count() as f64;
        assert!((half.rows[0].precision - 100.0 * fg / 512.0).abs() < 1e-9);
        assert_eq!(half.rows[0].recall, 100.0);
        let unlabeled = Case {
            mask: None,
            ..cases[0].clone()
        };
        assert!(matches!(evaluate(&Stub(m.to_field()), &[unlabeled]), Err(Error::Contract(_))));
    }

    #[test]
    fn log_records_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.ndjson");
        let shape = [8, 8, 8];
        let d = data(shape, 1, 1);
        let c = cfg(3);
        let mut st = TrainState::<f32>::new(NetConfig::desk(shape, 1), &c).unwrap();
        let mut log = NdjsonLog::append(&path).unwrap();
        let recs = train(&mut st, &d, &c, |_, r| log.write(r)).unwrap();
        drop(log);
        assert_eq!(read_log(&path).unwrap(), recs);
        assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
