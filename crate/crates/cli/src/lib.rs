//! Operator commands: generate, train, eval, infer, export-pc.

pub mod colormap;
pub mod config;
pub mod error;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use glasstereo::checkpoint::{load_checkpoint, save_checkpoint};
use glasstereo::data::{
    disparity_map_to_depth, export_pointcloud, generate_toy_scene, read_pfm, save_sample, write_pfm, CameraRig,
    DatasetManifest, Split, StereoSample, ToySceneSpec,
};
use glasstereo::metrics::{format_table, ErrorAccumulator, EvalReport, PixelDomain};
use glasstereo::model::StereoModel;
use glasstereo::train::{train_loop, TrainEvent};
use glasstereo::{DType, Device};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::colormap::{colorize, ColorScale};
use crate::config::{ResolvedTrainConfig, RunConfig};
use crate::error::CliError;

pub type CliResult<T> = Result<T, CliError>;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "GLASSTEREO_OUT";

#[derive(Debug, Parser)]
#[command(name = "glasstereo", version, about = "Stereo disparity for transparent-object scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural stereo dataset and its manifest.
    Generate(GenerateArgs),
    /// Train a model from a TOML run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or stored predictions) on a manifest.
    Eval(EvalArgs),
    /// Predict disparity for one image pair.
    Infer(InferArgs),
    /// Export a point cloud from a disparity or depth map, or from a prediction.
    ExportPc(ExportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = "glasstereo-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scene description (TOML); defaults to the built-in toy scene.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    pub count: usize,
    /// Samples tagged `val`, taken after the training samples.
    #[arg(long, default_value_t = 0)]
    pub val_count: usize,
    /// Samples tagged `test`, taken last.
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
    /// Override the transparency fraction of the scene description.
    #[arg(long)]
    pub transparency: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Override the configured number of steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DomainFlag {
    AllValid,
    MaskOnly,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitFlag {
    Train,
    Val,
    Test,
    All,
}

impl SplitFlag {
    fn matches(self, s: Split) -> bool {
        match self {
            SplitFlag::Train => s == Split::Train,
            SplitFlag::Val => s == Split::Val,
            SplitFlag::Test => s == Split::Test,
            SplitFlag::All => true,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model checkpoint.
    #[arg(long, required_unless_present = "pred_dir", conflicts_with = "pred_dir")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of stored predictions named `<sample id>.pfm`.
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    /// Which split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitFlag::All)]
    pub split: SplitFlag,
    /// Pixel domain(s) to report.
    #[arg(long, value_enum, default_value_t = DomainFlag::Both)]
    pub domain: DomainFlag,
    /// Refinement iterations (defaults to the checkpoint's evaluation count).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Row label in the printed table.
    #[arg(long, default_value = "model")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    /// Refinement iterations (defaults to the checkpoint's evaluation count).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Fixed lower end of the color scale.
    #[arg(long)]
    pub vmin: Option<f64>,
    /// Fixed upper end of the color scale.
    #[arg(long)]
    pub vmax: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Camera rig JSON: either a bare rig or a sample `meta.json`.
    #[arg(long)]
    pub rig: PathBuf,
    /// Disparity map (PFM, px).
    #[arg(long, group = "source")]
    pub disparity: Option<PathBuf>,
    /// Depth map (PFM, meters).
    #[arg(long, group = "source")]
    pub depth: Option<PathBuf>,
    /// Checkpoint to predict disparity with (needs --left and --right).
    #[arg(long, group = "source", requires_all = ["left", "right"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub left: Option<PathBuf>,
    #[arg(long)]
    pub right: Option<PathBuf>,
    /// Image providing per-point colors.
    #[arg(long)]
    pub color: Option<PathBuf>,
    /// Depths beyond this many meters become holes.
    #[arg(long)]
    pub z_max: Option<f64>,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "points.txt")]
    pub name: String,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::ExportPc(a) => cmd_export_pc(&a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn echo_config<T: Serialize>(out: &Path, value: &T) -> CliResult<()> {
    create_dir(out)?;
    write_json(&out.join("resolved_config.json"), value)
}

fn read_rgb(path: &Path) -> CliResult<image::RgbImage> {
    let img = image::open(path).map_err(|e| CliError::Data(format!("cannot read image {}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

fn load_spec(path: Option<&Path>) -> CliResult<ToySceneSpec> {
    match path {
        None => Ok(ToySceneSpec::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("cannot read spec {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("spec {}: {e}", p.display())))
        }
    }
}

/// Per-sample scene seeds derived from the run seed.
pub fn sample_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen()).collect()
}

#[derive(Serialize)]
struct GenerateEcho<'a> {
    command: &'static str,
    seed: u64,
    count: usize,
    val_count: usize,
    test_count: usize,
    spec: &'a ToySceneSpec,
}

pub fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let mut spec = load_spec(a.spec.as_deref())?;
    if let Some(t) = a.transparency {
        spec.transparency_fraction = t;
    }
    spec.validate()?;
    if a.val_count + a.test_count > a.count {
        return Err(CliError::Usage("val_count + test_count exceeds count".into()));
    }
    let out = &a.common.out;
    echo_config(
        out,
        &GenerateEcho {
            command: "generate",
            seed: a.common.seed,
            count: a.count,
            val_count: a.val_count,
            test_count: a.test_count,
            spec: &spec,
        },
    )?;
    let n_train = a.count - a.val_count - a.test_count;
    let mut manifest = DatasetManifest::new(out);
    for (i, s) in sample_seeds(a.common.seed, a.count).into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + a.val_count {
            Split::Val
        } else {
            Split::Test
        };
        let sample = generate_toy_scene(s, &spec)?;
        manifest.entries.push(save_sample(&sample, out, &format!("sample_{i:05}"), split)?);
    }
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    println!("wrote {} samples to {}", a.count, path.display());
    Ok(())
}

fn load_split(manifest: &DatasetManifest, split: &str, cap: Option<usize>) -> CliResult<Vec<StereoSample>> {
    let want: Split = serde_json::from_value(serde_json::Value::String(split.into()))
        .map_err(|_| CliError::Usage(format!("unknown split {split:?}")))?;
    manifest
        .split(want)
        .take(cap.unwrap_or(usize::MAX))
        .map(|e| manifest.load_sample(e).map_err(CliError::from))
        .collect()
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut rc = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        rc.seed = s;
    }
    if let Some(o) = &a.out {
        rc.output_dir = Some(o.clone());
    }
    if let Some(n) = a.steps {
        rc.schedule.total_steps = n;
    }
    let out = rc
        .output_dir
        .clone()
        .ok_or_else(|| CliError::Usage(format!("no output directory: set output_dir, --out or {OUT_ENV}")))?;
    let model_cfg = rc.model_config()?;
    rc.schedule.validate()?;
    echo_config(
        &out,
        &ResolvedTrainConfig {
            seed: rc.seed,
            output_dir: &out,
            dataset: &rc.dataset,
            model: &model_cfg,
            schedule: &rc.schedule,
        },
    )?;

    let manifest = DatasetManifest::load(&rc.dataset.manifest)?;
    manifest.verify()?;
    let train = load_split(&manifest, &rc.dataset.train_split, None)?;
    let val = load_split(&manifest, &rc.dataset.val_split, rc.dataset.max_val_samples)?;
    if train.is_empty() {
        return Err(CliError::Data(format!(
            "manifest {} has no {:?} samples",
            rc.dataset.manifest.display(),
            rc.dataset.train_split
        )));
    }

    let model = StereoModel::new(&model_cfg, rc.seed, DType::F32, &Device::Cpu)?;
    let ckpt = out.join("checkpoint.safetensors");
    save_checkpoint(&model, &ckpt)?;
    let open = |name: &str| -> CliResult<BufWriter<File>> {
        let p = out.join(name);
        File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", p.display())))
    };
    let mut step_log = open("train_log.jsonl")?;
    let mut eval_log = open("eval_log.jsonl")?;
    let write_line = |w: &mut BufWriter<File>, line: String| -> glasstereo::Result<()> {
        writeln!(w, "{line}")
            .and_then(|_| w.flush())
            .map_err(|e| glasstereo::Error::Config(format!("cannot write log: {e}")))
    };
    let result = train_loop(&model, &train, &val, &rc.schedule, rc.seed, |ev| match ev {
        TrainEvent::Step(r) => {
            if r.step % 50 == 0 {
                log::info!("step {} loss {:.4} lr {:.2e}", r.step, r.loss, r.lr);
            }
            write_line(&mut step_log, serde_json::to_string(r)?)
        }
        TrainEvent::Epoch(r) => {
            log::info!("epoch {} val AvgErr {:.4}", r.epoch, r.report.avg_err);
            write_line(&mut eval_log, serde_json::to_string(r)?)
        }
    });
    // the model only ever holds finite, fully applied updates
    save_checkpoint(&model, &ckpt)?;
    result?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub name: String,
    pub samples: usize,
    /// Samples dropped because the prediction was not finite.
    pub skipped: usize,
    pub all_valid: Option<EvalReport>,
    pub mask_only: Option<EvalReport>,
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    command: &'static str,
    seed: u64,
    manifest: &'a Path,
    checkpoint: Option<&'a Path>,
    pred_dir: Option<&'a Path>,
    split: String,
    domain: String,
    iterations: Option<usize>,
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let out = &a.common.out;
    let model = a
        .checkpoint
        .as_deref()
        .map(|p| model_with_iterations(p, a.iterations, a.common.seed))
        .transpose()?;
    let iterations = model.as_ref().map(|m| m.config().refinement.iterations_eval);
    echo_config(
        out,
        &EvalEcho {
            command: "eval",
            seed: a.common.seed,
            manifest: &a.manifest,
            checkpoint: a.checkpoint.as_deref(),
            pred_dir: a.pred_dir.as_deref(),
            split: format!("{:?}", a.split).to_lowercase(),
            domain: format!("{:?}", a.domain).to_lowercase(),
            iterations,
        },
    )?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    manifest.verify()?;
    let mut all = ErrorAccumulator::new(PixelDomain::AllValid);
    let mut masked = ErrorAccumulator::new(PixelDomain::MaskOnly);
    let (mut samples, mut skipped) = (0, 0);
    for entry in manifest.entries.iter().filter(|e| a.split.matches(e.split)) {
        let s = manifest.load_sample(entry)?;
        samples += 1;
        let pred: Array2<f32> = match (&model, &a.pred_dir) {
            (Some(m), _) => match m.predict(&s.left, &s.right) {
                Ok(p) => p,
                Err(e) if e.is_numeric() => {
                    log::warn!("sample {}: {e}", entry.id);
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            },
            (None, Some(dir)) => read_pfm(&dir.join(format!("{}.pfm", entry.id)))?,
            (None, None) => unreachable!("clap requires a prediction source"),
        };
        if pred.iter().any(|v| !v.is_finite()) {
            log::warn!("sample {}: non-finite prediction skipped", entry.id);
            skipped += 1;
            continue;
        }
        all.add(pred.view(), s.gt_disparity.view(), s.valid.view(), None)?;
        masked.add(pred.view(), s.gt_disparity.view(), s.valid.view(), Some(s.object_mask.view()))?;
    }
    let finish = |acc: &ErrorAccumulator, wanted: bool| -> CliResult<Option<EvalReport>> {
        if !wanted {
            return Ok(None);
        }
        acc.finish().map(Some).map_err(CliError::from)
    };
    let summary = EvalSummary {
        name: a.name.clone(),
        samples,
        skipped,
        all_valid: finish(&all, a.domain != DomainFlag::MaskOnly)?,
        mask_only: if a.domain == DomainFlag::AllValid || masked.n_pixels() == 0 {
            if a.domain == DomainFlag::MaskOnly {
                return Err(CliError::Data("no object pixels in the evaluated split".into()));
            }
            None
        } else {
            finish(&masked, true)?
        },
    };
    write_json(&out.join("eval_report.json"), &summary)?;
    let mut rows = Vec::new();
    if let Some(r) = &summary.all_valid {
        rows.push((format!("{} (all valid)", a.name), r.clone()));
    }
    if let Some(r) = &summary.mask_only {
        rows.push((format!("{} (objects)", a.name), r.clone()));
    }
    print!("{}", format_table(&rows));
    if skipped > 0 {
        println!("warning: {skipped} of {samples} samples skipped (non-finite prediction)");
    }
    Ok(())
}

fn model_with_iterations(path: &Path, iterations: Option<usize>, seed: u64) -> CliResult<StereoModel> {
    let m = load_checkpoint(path, None, &Device::Cpu)?;
    match iterations {
        Some(it) if it != m.config().refinement.iterations_eval => {
            let mut cfg = m.config().clone();
            cfg.refinement.iterations_eval = it;
            let fresh = StereoModel::new(&cfg, seed, DType::F32, &Device::Cpu)?;
            glasstereo::checkpoint::load_weights(&fresh, &glasstereo::checkpoint::encode_checkpoint(&m)?)?;
            Ok(fresh)
        }
        _ => Ok(m),
    }
}

#[derive(Serialize)]
struct InferEcho<'a> {
    command: &'static str,
    seed: u64,
    checkpoint: &'a Path,
    left: &'a Path,
    right: &'a Path,
    iterations: usize,
}

pub fn cmd_infer(a: &InferArgs) -> CliResult<()> {
    let out = &a.common.out;
    let model = model_with_iterations(&a.checkpoint, a.iterations, a.common.seed)?;
    echo_config(
        out,
        &InferEcho {
            command: "infer",
            seed: a.common.seed,
            checkpoint: &a.checkpoint,
            left: &a.left,
            right: &a.right,
            iterations: model.config().refinement.iterations_eval,
        },
    )?;
    let left = read_rgb(&a.left)?;
    let right = read_rgb(&a.right)?;
    if left.dimensions() != right.dimensions() {
        return Err(CliError::Usage(format!(
            "left image is {:?} but right image is {:?}",
            left.dimensions(),
            right.dimensions()
        )));
    }
    let disp = model.predict(&left, &right)?;
    write_pfm(&out.join("disparity.pfm"), &disp)?;
    let scale = ColorScale::fit(disp.view(), a.vmin, a.vmax);
    let png = out.join("disparity.png");
    colorize(disp.view(), &scale)
        .save(&png)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", png.display())))?;
    write_json(&out.join("disparity.json"), &scale)?;
    println!("wrote {}", out.join("disparity.pfm").display());
    Ok(())
}

fn load_rig(path: &Path) -> CliResult<CameraRig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let rig_value = value.get("rig").cloned().unwrap_or(value);
    let rig: CameraRig = serde_json::from_value(rig_value)
        .map_err(|e| CliError::Data(format!("{}: not a camera rig: {e}", path.display())))?;
    rig.validate()?;
    Ok(rig)
}

#[derive(Serialize)]
struct ExportEcho<'a> {
    command: &'static str,
    seed: u64,
    rig: &'a CameraRig,
    disparity: Option<&'a Path>,
    depth: Option<&'a Path>,
    checkpoint: Option<&'a Path>,
    color: Option<&'a Path>,
    z_max: Option<f64>,
}

pub fn cmd_export_pc(a: &ExportArgs) -> CliResult<()> {
    let out = &a.common.out;
    let rig = load_rig(&a.rig)?;
    echo_config(
        out,
        &ExportEcho {
            command: "export-pc",
            seed: a.common.seed,
            rig: &rig,
            disparity: a.disparity.as_deref(),
            depth: a.depth.as_deref(),
            checkpoint: a.checkpoint.as_deref(),
            color: a.color.as_deref(),
            z_max: a.z_max,
        },
    )?;
    let depth = if let Some(p) = &a.depth {
        let mut d = read_pfm(p)?;
        if let Some(zm) = a.z_max {
            d.mapv_inplace(|z| if (z as f64) <= zm { z } else { f32::INFINITY });
        }
        d
    } else {
        let disp = if let Some(p) = &a.disparity {
            read_pfm(p)?
        } else if let Some(ck) = &a.checkpoint {
            let model = model_with_iterations(ck, None, a.common.seed)?;
            let l = read_rgb(a.left.as_deref().expect("clap enforces --left"))?;
            let r = read_rgb(a.right.as_deref().expect("clap enforces --right"))?;
            model.predict(&l, &r)?
        } else {
            return Err(CliError::Usage("one of --disparity, --depth or --checkpoint is required".into()));
        };
        disparity_map_to_depth(disp.view(), &rig, a.z_max)
    };
    let color = match &a.color {
        Some(p) => Some(read_rgb(p)?),
        None => None,
    };
    let cloud = export_pointcloud(depth.view(), &rig, color.as_ref())?;
    let path = out.join(&a.name);
    cloud.save(&path)?;
    println!("wrote {} points to {}", cloud.len(), path.display());
    Ok(())
}
