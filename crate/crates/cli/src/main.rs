//! `mtctl`: synthesize phantoms, train, evaluate, predict and compare.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
//! 3 numeric failure during training.

mod config;
mod render;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mtctl_core::metrics::{paired_test, MetricReport, METRICS};
use mtctl_core::network::{Mode, SegNet};
use mtctl_core::trainer::{
    binarize, evaluate, load_checkpoint, save_checkpoint, train, NdjsonLog, TrainData, TrainState,
};
use mtctl_core::uncertainty::{entropy_map, mc_sample, McConfig};
use mtctl_core::volumes::io::{load_volume, save_map_with_spacing, save_mask, save_volume};
use mtctl_core::volumes::{
    make_phantom, normalize, preprocess, resize_field, split_dataset, Case, Manifest, ManifestEntry, PhantomSpec,
};
use mtctl_core::{seed, Error};

use crate::config::RunConfig;

const THREADS_ENV: &str = "MTCTL_NUM_THREADS";
const LOG_FILE: &str = "train_log.ndjson";
const REPORT_FILE: &str = "report.csv";

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerics(_) => Failure::Numeric(e.to_string()),
            Error::Io(_) => Failure::Io(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Res<T = ()> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> Res<T> {
    Err(Failure::Usage(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Mtv,
    Nii,
    #[value(name = "nii.gz")]
    NiiGz,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Mtv => "mtv",
            Format::Nii => "nii",
            Format::NiiGz => "nii.gz",
        }
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(dims).map_err(|d| format!("expected D,H,W, got {} values", d.len()))
}

#[derive(Debug, Parser)]
#[command(name = "mtctl", version, about = "Semi-supervised 3D segmentation with cross-task consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic phantom volumes, masks and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_cases: usize,
        #[arg(long, value_parser = parse_shape, default_value = "32,32,32")]
        shape: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::NiiGz)]
        format: Format,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled manifest and write a CSV report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one volume; optionally add an MC-dropout entropy map.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of MC-dropout samples (at least 2).
        #[arg(long, value_parser = clap::value_parser!(u32).range(2..))]
        uncertainty: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::NiiGz)]
        format: Format,
    },
    /// Paired permutation test between two reports on one metric.
    Compare {
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "dice")]
        metric: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn configure_threads() -> Res {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = match v.trim().parse() {
        Ok(n) if n >= 1 => n,
        _ => return usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")),
    };
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth {
            out,
            n_cases,
            shape,
            seed,
            format,
            force,
        } => synth(&out, n_cases, shape, seed, format, force),
        Command::Train { config, resume } => train_cmd(&config, resume.as_deref()),
        Command::Eval { ckpt, manifest, out } => eval(&ckpt, &manifest, &out),
        Command::Predict {
            ckpt,
            input,
            out,
            uncertainty,
            seed,
            format,
        } => predict(&ckpt, &input, &out, uncertainty.map(|n| n as usize), seed, format),
        Command::Compare { reports, metric, seed } => compare(&reports[0], &reports[1], &metric, seed),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn synth(out: &Path, n: usize, shape: [usize; 3], seed: u64, format: Format, force: bool) -> Res {
    if n == 0 {
        return usage("--n-cases must be at least 1");
    }
    if out.exists() && fs::read_dir(out)?.next().is_some() && !force {
        return usage(format!("{} is not empty; pass --force to write into it", out.display()));
    }
    fs::create_dir_all(out)?;
    let mut manifest = Manifest::default();
    for i in 0..n {
        let id = format!("case_{i:03}");
        let spec = PhantomSpec::desk(shape, seed::derive(seed, 0x5E7, i as u64));
        let (mut vol, mask) = make_phantom(&spec)?;
        vol.id = id.clone();
        let image = PathBuf::from(format!("{id}_img.{}", format.ext()));
        let mask_file = PathBuf::from(format!("{id}_mask.{}", format.ext()));
        save_volume(&vol, out.join(&image))?;
        save_mask(&mask, out.join(&mask_file))?;
        manifest.cases.push(ManifestEntry {
            id,
            image,
            mask: Some(mask_file),
        });
    }
    manifest.write(out.join("manifest.toml"))?;
    println!("wrote {n} cases to {}", out.display());
    Ok(())
}

fn load_cases(manifest: &Path, shape: [usize; 3]) -> Res<Vec<Case>> {
    let m = Manifest::read(manifest)?;
    m.check_paths()?;
    m.load()?
        .into_iter()
        .map(|c| {
            let (volume, mask) = preprocess(&c.volume, c.mask.as_ref(), shape)?;
            Ok(Case { volume, mask })
        })
        .collect()
}

fn require_labels(cases: &[Case], what: &str) -> Res {
    match cases.iter().find(|c| c.mask.is_none()) {
        Some(c) => usage(format!("{what}: case {} has no mask", c.id())),
        None => Ok(()),
    }
}

fn print_summary(report: &MetricReport) {
    for (name, s) in METRICS.iter().zip(report.summary()) {
        match s {
            Some((m, sd)) => println!("{name:>9} {m:.2} ± {sd:.2}"),
            None => println!("{name:>9} -"),
        }
    }
}

fn train_cmd(config: &Path, resume: Option<&Path>) -> Res {
    let cfg = RunConfig::load(config)?;
    let shape = cfg.net.in_shape;

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for c in load_cases(&cfg.data.train_manifest, shape)? {
        match c.mask {
            Some(m) => labeled.push((c.volume, m)),
            None => unlabeled.push(c.volume),
        }
    }
    if labeled.is_empty() {
        return usage("training manifest has no labeled cases");
    }
    let split = split_dataset(labeled, cfg.data.labeled_fraction, cfg.data.split_seed)?;
    unlabeled.extend(split.unlabeled);
    let val = match &cfg.data.val_manifest {
        Some(m) => {
            let v = load_cases(m, shape)?;
            require_labels(&v, "validation manifest")?;
            v
        }
        None => split
            .labeled
            .iter()
            .map(|(v, m)| Case {
                volume: v.clone(),
                mask: Some(m.clone()),
            })
            .collect(),
    };
    println!(
        "{} labeled, {} unlabeled, {} scored after training",
        split.labeled.len(),
        unlabeled.len(),
        val.len()
    );
    let data = TrainData::<f32>::new(&split.labeled, &unlabeled, shape)?;

    let mut state = match resume {
        Some(dir) => {
            let st = load_checkpoint::<f32>(dir)?;
            if st.net.cfg != cfg.net {
                return usage(format!("{}: network config differs from the run config", dir.display()));
            }
            println!("resuming at step {}", st.step);
            st
        }
        None => TrainState::new(cfg.net.clone(), &cfg.train)?,
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join(LOG_FILE);
    if resume.is_none() && log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let mut log = NdjsonLog::append(&log_path)?;
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    let every = cfg.train.checkpoint_every;
    let report_every = (cfg.train.max_iters / 20).max(1);
    train(&mut state, &data, &cfg.train, |st, rec| {
        log.write(rec)?;
        if rec.step % report_every == 0 || st.step == cfg.train.max_iters {
            println!(
                "step {:>6} total {:.4} dice {:.4} ct {:.4} guide {:.4} adv {:.4}",
                rec.step, rec.total, rec.dice, rec.cross_task, rec.guidance, rec.adv_gm
            );
        }
        if every > 0 && st.step % every == 0 {
            save_checkpoint(st, &ckpt_dir.join(format!("step_{:06}", st.step)))?;
        }
        Ok(())
    })?;

    let report = evaluate(&state.net, &val)?;
    let dice = report.summary()[0].map(|(m, _)| m);
    state.best_val_dice = match (state.best_val_dice, dice) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    };
    save_checkpoint(&state, &ckpt_dir.join("final"))?;
    report.write_csv(&cfg.out_dir.join(REPORT_FILE))?;
    print_summary(&report);
    Ok(())
}

fn load_net(ckpt: &Path) -> Res<SegNet<f32>> {
    Ok(load_checkpoint::<f32>(ckpt)?.net)
}

fn eval(ckpt: &Path, manifest: &Path, out: &Path) -> Res {
    let net = load_net(ckpt)?;
    let cases = load_cases(manifest, net.cfg.in_shape)?;
    require_labels(&cases, "evaluation manifest")?;
    let report = evaluate(&net, &cases)?;
    report.write_csv(out)?;
    print_summary(&report);
    Ok(())
}

fn predict(ckpt: &Path, input: &Path, out: &Path, n_mc: Option<usize>, seed: u64, format: Format) -> Res {
    let net = load_net(ckpt)?;
    let raw = load_volume(input)?;
    let shape = raw.shape();
    let (vol, _) = preprocess(&raw, None, net.cfg.in_shape)?;
    let mut unused = seed::rng(seed, 0, 0);
    let pred = net.forward(&vol.data, Mode::Eval, &mut unused)?;
    let prob = resize_field(&pred.seg, shape);
    let dist = resize_field(&pred.dist, shape);
    let mask = binarize(&prob);

    fs::create_dir_all(out)?;
    let file = |name: &str| out.join(format!("{name}.{}", format.ext()));
    save_map_with_spacing(&mask.to_field(), raw.spacing, file("mask"))?;
    save_map_with_spacing(&dist, raw.spacing, file("distance"))?;

    let shown = normalize(&raw)?.data;
    let slice = render::mid_slice(&shown);
    render::save(&render::intensity(slice), &out.join("slice_image.png"))?;
    render::save(&render::mask_overlay(slice, render::mid_slice(&mask.data)), &out.join("slice_overlay.png"))?;

    if let Some(n) = n_mc {
        let samples = mc_sample(&net, &vol.data, &McConfig { n_samples: n, seed })?;
        let u = resize_field(&entropy_map(&samples)?.data, shape);
        save_map_with_spacing(&u, raw.spacing, file("uncertainty"))?;
        let us = render::mid_slice(&u);
        render::save(&render::uncertainty(us), &out.join("slice_uncertainty.png"))?;
        render::save(&render::uncertainty_overlay(slice, us), &out.join("slice_uncertainty_overlay.png"))?;
    }
    println!(
        "{}: {} foreground voxels of {}",
        raw.id,
        mask.count(),
        shape.iter().product::<usize>()
    );
    Ok(())
}

fn compare(a: &Path, b: &Path, metric: &str, seed: u64) -> Res {
    if !METRICS.contains(&metric) {
        return usage(format!("unknown metric {metric:?}; expected one of {}", METRICS.join(", ")));
    }
    let ra = MetricReport::read_csv(a)?;
    let rb = MetricReport::read_csv(b)?;
    let ids = |r: &MetricReport| {
        let mut v: Vec<String> = r.rows.iter().map(|c| c.case_id.clone()).collect();
        v.sort();
        v
    };
    if ids(&ra) != ids(&rb) {
        return usage(format!("{} and {} cover different case ids", a.display(), b.display()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for row in &ra.rows {
        let other = rb.rows.iter().find(|r| r.case_id == row.case_id).expect("ids match");
        if let (Some(Some(x)), Some(Some(y))) = (row.get(metric), other.get(metric)) {
            xs.push(x);
            ys.push(y);
        }
    }
    let t = paired_test(&xs, &ys, seed)?;
    println!("metric={metric}");
    println!("n={}", t.n);
    println!("mean_diff={}", t.mean_diff);
    println!("p_value={}", t.p_value);
    println!("exact={}", t.exact);
    Ok(())
}
