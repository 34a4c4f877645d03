// SPDX-License-Identifier: Apache-2.0

//! `mgaf`: synthetic data, training, inference, evaluation, calibration
//! analysis and self-checks for the detector.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use mgaf_core::data_ingest::{crop_to_range, read_kitti_bin, read_kitti_scene, write_split, CameraToLidar, Scene, SynthConfig};
use mgaf_core::decoder_eval::{
    calibration_stats, metrics_report, pr_curve_svg, read_detections, write_detections, Detection, Metric, ScoreMode,
};
use mgaf_core::decoder_eval::evaluate_ap;
use mgaf_core::selftest;
use mgaf_core::train_harness::{
    checkpoint, synth_scenes, Config, Dataset, Trainer, CKPT_FILE, CONFIG_FILE, KEYS,
};
use mgaf_core::voxel_grid::{dump_voxels, voxelize, VoxelGridSpec};
use mgaf_core::Error;

#[derive(Parser)]
#[command(name = "mgaf", version, about = "Anchor-free single-stage LiDAR 3D detector")]
struct Cli {
    /// Threads for data loading (also read from MGAF_THREADS).
    #[arg(long, global = true, env = "MGAF_THREADS")]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Kitti,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Bev,
    #[value(name = "3d")]
    ThreeD,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Bev => Metric::Bev,
            MetricArg::ThreeD => Metric::ThreeD,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic KITTI-format scenes to <out>/train and <out>/val.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        scenes: usize,
        /// Validation scenes; defaults to a quarter of --scenes.
        #[arg(long)]
        val_scenes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
        /// Comma-separated subset of Car,Pedestrian,Cyclist.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes config.txt, train_log.csv and model.ckpt to --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides applied after --config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Split directory, or a directory holding a `train` split.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from <out>/model.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Write one KITTI result file per frame.
    Infer {
        /// Training output directory holding config.txt and model.ckpt.
        #[arg(long)]
        ckpt: PathBuf,
        /// Refuse to run unless this config matches the checkpoint architecture.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rank detections by the raw classification score.
        #[arg(long)]
        no_recalib: bool,
    },
    /// AP of result files against label files.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        #[arg(long, value_enum, default_value = "3d")]
        metric: MetricArg,
        #[arg(long, value_delimiter = ',', default_value = "Car")]
        classes: Vec<String>,
        /// Precision-recall plot.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// PLCC/SRCC between detection scores and their best IoU.
    Calib {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "Car")]
        classes: Vec<String>,
    },
    /// Gradient checks and invariant checks; nonzero exit on any failure.
    Selftest {
        /// Skip the micro-model gradient check.
        #[arg(long)]
        quick: bool,
    },
    /// Voxelize one point cloud and print the active voxels.
    VoxelDump {
        #[arg(long)]
        bin: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// List every config key with its default.
    Keys,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config { .. } | Error::Invalid(_) => Failure::Usage(msg),
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => Failure::Numerical(msg),
            _ => Failure::Data(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(p: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::io(p, e))
}

/// Frame ids of a split: every `<id>.bin` in `dir`, sorted.
fn frame_ids(dir: &Path) -> Result<Vec<String>, Failure> {
    let mut ids = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = e.map_err(|e| io_err(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "bin") {
            ids.push(p.file_stem().unwrap().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn load_split(dir: &Path, classes: &[String]) -> Result<Vec<Scene>, Failure> {
    let ids = frame_ids(dir)?;
    ids.par_iter()
        .map(|id| read_kitti_scene(&dir.join(format!("{id}.bin")), &dir.join(format!("{id}.txt")), None, classes))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::from)
}

/// Label files of a directory, keyed by frame id.
fn label_ids(dir: &Path) -> Result<Vec<String>, Failure> {
    let mut ids = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = e.map_err(|e| io_err(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "txt") {
            ids.push(p.file_stem().unwrap().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Detections and ground truths of every frame with a label file; a frame
/// without a result file has no detections.
fn load_pairs(dets: &Path, gts: &Path, classes: &[String]) -> Result<(Vec<Vec<Detection>>, Vec<Scene>), Failure> {
    let calib = CameraToLidar::default();
    let ids = label_ids(gts)?;
    let pairs = ids
        .par_iter()
        .map(|id| {
            let dp = dets.join(format!("{id}.txt"));
            let d = if dp.exists() { read_detections(&dp, classes, &calib)? } else { Vec::new() };
            let objs = mgaf_core::data_ingest::read_kitti_objects(&gts.join(format!("{id}.txt")))?;
            let mut s = Scene::new(id.clone(), Default::default(), Vec::new());
            for o in &objs {
                if let Some(c) = classes.iter().position(|k| *k == o.kind) {
                    s.gt_boxes.push(calib.object_to_box(o, c));
                    s.gt_difficulty.push(mgaf_core::data_ingest::difficulty_of(o));
                }
            }
            Ok((d, s))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(pairs.into_iter().unzip())
}

fn load_config(path: Option<&Path>, sets: &[String]) -> Result<Config, Failure> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::toy(),
    };
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("expected KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn split_dir(data: &Path, name: &str) -> PathBuf {
    let sub = data.join(name);
    if sub.is_dir() {
        sub
    } else {
        data.to_path_buf()
    }
}

fn synth_gen(
    out: &Path,
    scenes: usize,
    val: Option<usize>,
    seed: u64,
    preset: Preset,
    classes: Option<Vec<String>>,
    force: bool,
) -> CmdResult {
    if out.is_dir() && fs::read_dir(out).map_err(|e| io_err(out, e))?.next().is_some() {
        if !force {
            return Err(Failure::Usage(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
        fs::remove_dir_all(out).map_err(|e| io_err(out, e))?;
    }
    let mut cfg = match preset {
        Preset::Toy => SynthConfig::toy(),
        Preset::Kitti => SynthConfig::kitti(),
    };
    if let Some(names) = classes {
        let all = cfg.class_names();
        cfg.class_ids = names
            .iter()
            .map(|n| {
                all.iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Failure::Usage(format!("unknown class `{n}`")))
            })
            .collect::<Result<_, _>>()?;
    }
    let names = cfg.class_names();
    let val = val.unwrap_or(scenes / 4);
    write_split(&out.join("train"), &synth_scenes(scenes, &cfg, seed)?, &names)?;
    write_split(&out.join("val"), &synth_scenes(val, &cfg, seed.wrapping_add(1))?, &names)?;
    println!("wrote {scenes} train and {val} val scenes to {}", out.display());
    Ok(())
}

fn train(config: Option<&Path>, sets: &[String], data: &Path, out: &Path, resume: bool) -> CmdResult {
    let cfg = load_config(config, sets)?;
    let scenes = load_split(&split_dir(data, "train"), &cfg.classes)?;
    if scenes.is_empty() {
        return Err(Failure::Data(format!("no scenes under {}", data.display())));
    }
    let mut trainer = Trainer::new(cfg)?;
    let ckpt = out.join(CKPT_FILE);
    if resume {
        if out.join(CONFIG_FILE).exists() {
            let prev = Config::load(&out.join(CONFIG_FILE))?;
            if !prev.same_architecture(&trainer.cfg) {
                return Err(Failure::Usage("config does not match the checkpoint architecture".into()));
            }
        }
        trainer.resume(&ckpt)?;
        log::info!("resumed at step {}", trainer.step);
    }
    let data = Dataset::new(scenes, trainer.cfg.num_classes());
    let logs = trainer.run(&data, Some(out), |_| {})?;
    if let (Some(a), Some(b)) = (logs.first(), logs.last()) {
        println!("L_total {:.4} -> {:.4} over {} steps", a.loss.total, b.loss.total, logs.len());
    }
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn infer(ckpt: &Path, config: Option<&Path>, data: &Path, out: &Path, no_recalib: bool) -> CmdResult {
    let cfg = Config::load(&ckpt.join(CONFIG_FILE))?;
    if let Some(p) = config {
        if !Config::load(p)?.same_architecture(&cfg) {
            return Err(Failure::Usage("config does not match the checkpoint architecture".into()));
        }
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    checkpoint::load_params(&ckpt.join(CKPT_FILE), &mut trainer.store)?;
    let scenes = load_split(&split_dir(data, "val"), &cfg.classes)?;
    let mode = if no_recalib { ScoreMode::Raw } else { ScoreMode::Recalibrated };
    let dets = trainer.detect(&scenes, mode)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let calib = CameraToLidar::default();
    for (s, d) in scenes.iter().zip(&dets) {
        write_detections(&out.join(format!("{}.txt", s.frame_id)), d, &cfg.classes, &calib)?;
    }
    let n: usize = dets.iter().map(Vec::len).sum();
    println!("{n} detections over {} frames written to {}", scenes.len(), out.display());
    Ok(())
}

fn eval(dets: &Path, gts: &Path, iou: f64, metric: Metric, classes: &[String], svg: Option<&Path>) -> CmdResult {
    let (d, s) = load_pairs(dets, gts, classes)?;
    let g: Vec<_> = s.into_iter().map(|s| s.gt_boxes).collect();
    let curve = evaluate_ap(&d, &g, iou, metric);
    let name = format!("AP_{}@{iou}", metric.name());
    print!(
        "{}",
        metrics_report(&[(name.clone(), curve.ap), ("frames".into(), g.len() as f64)])
    );
    if let Some(p) = svg {
        fs::write(p, pr_curve_svg(&[(name, curve)])).map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

fn calib(dets: &Path, gts: &Path, classes: &[String]) -> CmdResult {
    let (d, s) = load_pairs(dets, gts, classes)?;
    let g: Vec<_> = s.into_iter().map(|s| s.gt_boxes).collect();
    let st = calibration_stats(&d, &g);
    print!(
        "{}",
        metrics_report(&[("PLCC".into(), st.plcc), ("SRCC".into(), st.srcc), ("n".into(), st.n as f64)])
    );
    Ok(())
}

fn run_selftest(quick: bool) -> CmdResult {
    let checks = selftest::run_all(!quick);
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} of {} checks failed", checks.len())));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn voxel_dump(bin: &Path, config: Option<&Path>) -> CmdResult {
    let spec: VoxelGridSpec = load_config(config, &[])?.grid()?;
    let mut scene = Scene::new("", read_kitti_bin(bin)?, Vec::new());
    scene = crop_to_range(scene, &spec);
    print!("{}", dump_voxels(&voxelize(&scene.cloud, &spec)?));
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.cmd {
        Cmd::SynthGen {
            out,
            scenes,
            val_scenes,
            seed,
            preset,
            classes,
            force,
        } => synth_gen(&out, scenes, val_scenes, seed, preset, classes, force),
        Cmd::Train {
            config,
            set,
            data,
            out,
            resume,
        } => train(config.as_deref(), &set, &data, &out, resume),
        Cmd::Infer {
            ckpt,
            config,
            data,
            out,
            no_recalib,
        } => infer(&ckpt, config.as_deref(), &data, &out, no_recalib),
        Cmd::Eval {
            dets,
            gts,
            iou,
            metric,
            classes,
            svg,
        } => eval(&dets, &gts, iou, metric.into(), &classes, svg.as_deref()),
        Cmd::Calib { dets, gts, classes } => calib(&dets, &gts, &classes),
        Cmd::Selftest { quick } => run_selftest(quick),
        Cmd::VoxelDump { bin, config } => voxel_dump(&bin, config.as_deref()),
        Cmd::Keys => {
            let d = Config::default().to_text();
            for (k, help) in KEYS {
                let v = d
                    .lines()
                    .find_map(|l| l.split_once(" = ").filter(|(a, _)| a.trim() == *k).map(|(_, v)| v.to_string()))
                    .unwrap_or_default();
                println!("{k} = {v}  # {help}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
