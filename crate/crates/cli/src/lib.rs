//! Pipeline commands behind the `trident` binary. Each `cmd_*` function does
//! the work of one subcommand and is usable directly from tests.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use trident_core::cvae::{self, Condition, CvaeModel, EpochLog, LrSchedule, ModelConfig, StepControl, TrainConfig};
use trident_core::dataset::{
    build_samples, gen_synthetic_world, load_pose_log, load_sample, load_samples, route_for_track, write_dataset,
    write_pose_log, BuildOptions, Manifest, ManifestConfig, SampleRecord, WorldKind,
};
use trident_core::geo_graph::{parse_osm, GraphError, Route};
use trident_core::metrics::{evaluate, EvalReport, Generator, Split};
use trident_core::raster::{class_color, waypoints_to_pixels, write_ppm, PixelWaypoint, SemanticMap, SCENE_SIZE};

/// Bad arguments discovered after parsing; maps to exit code 64.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_NO_ROUTE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Exit code for an error returned by one of the commands.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else if matches!(err.downcast_ref::<GraphError>(), Some(GraphError::NoRoute { .. })) {
        EXIT_NO_ROUTE
    } else {
        EXIT_RUNTIME
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_route(osm: &Path, from_xy: [f64; 2], to_xy: [f64; 2], out: &Path) -> Result<Route> {
    let g = parse_osm(&read_text(osm)?)?;
    let src = g.nearest_node(from_xy)?;
    let dst = g.nearest_node(to_xy)?;
    let route = g.shortest_path(src, dst)?;
    write_json(out, &route)?;
    Ok(route)
}

#[derive(Debug, Clone)]
pub struct BuildArgs {
    pub osm: PathBuf,
    pub poses: Vec<PathBuf>,
    pub semantic: PathBuf,
    pub meta: PathBuf,
    pub horizon: usize,
    pub spacing: f64,
    pub split: f64,
    pub seed: u64,
    pub stride: usize,
    pub out: PathBuf,
}

impl BuildArgs {
    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(usage("at least one --poses file is required"));
        }
        if self.horizon == 0 {
            return Err(usage("--horizon must be positive"));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(usage(format!("--spacing must be positive, got {}", self.spacing)));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(usage(format!("--split must lie in (0, 1), got {}", self.split)));
        }
        if self.stride == 0 {
            return Err(usage("--stride must be positive"));
        }
        Ok(())
    }
}

/// Track id of a pose log: its file stem.
fn track_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("no usable file name in {}", path.display()))
}

pub fn cmd_build_dataset(args: &BuildArgs) -> Result<Manifest> {
    args.validate()?;
    let g = parse_osm(&read_text(&args.osm)?)?;
    let map = SemanticMap::load(&args.semantic, &args.meta)?;
    let opts = BuildOptions::new(args.horizon, args.spacing).with_stride(args.stride);
    let mut samples = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    for path in &args.poses {
        let id = track_id(path)?;
        if ids.contains(&id) {
            bail!("two pose logs share the track id '{id}'");
        }
        let track = load_pose_log(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?;
        let route = route_for_track(&g, &track)?;
        samples.extend(build_samples(&id, &track, &map, &g, &route, &opts)?);
        ids.push(id);
    }
    if samples.is_empty() {
        bail!("no pose has {} m of path ahead; no samples built", args.spacing * args.horizon as f64);
    }
    let config = ManifestConfig {
        horizon: args.horizon,
        spacing: args.spacing,
        seed: args.seed,
        split_ratio: args.split,
        stride: args.stride,
        class_names: map.class_names().to_vec(),
    };
    Ok(write_dataset(&args.out, &samples, config)?)
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub modes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub max_steps: Option<u64>,
    pub out_ckpt: PathBuf,
    pub loss_csv: PathBuf,
}

impl TrainArgs {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 || self.epochs == 0 || self.batch == 0 {
            return Err(usage("--modes, --epochs and --batch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(usage(format!("--lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Default loss-log path next to the checkpoint.
pub fn default_loss_csv(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

pub fn loss_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,step,total,nll,kl,mse\n");
    for l in logs {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.epoch, l.step, l.loss.total, l.loss.nll, l.loss.kl, l.loss.mse
        ));
    }
    s
}

pub fn cmd_train(args: &TrainArgs) -> Result<Vec<EpochLog>> {
    args.validate()?;
    let manifest = Manifest::load(&args.data)?;
    if manifest.train.is_empty() {
        bail!("the training split is empty");
    }
    let records = load_samples(&args.data, &manifest.train)?;
    let classes = manifest.config.class_names.len();
    let data: Vec<_> = records
        .iter()
        .map(|r| {
            if r.target.len() != manifest.config.horizon || r.scene.num_classes != classes {
                bail!("sample does not match the manifest config");
            }
            Ok((Condition::from_record(r), r.target.clone()))
        })
        .collect::<Result<_>>()?;
    let mut model = CvaeModel::new(ModelConfig::standard(manifest.config.horizon, classes, args.modes, args.seed))?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr: args.lr,
        seed: args.seed,
        max_steps: args.max_steps,
        schedule: LrSchedule::Constant,
    };
    let logs = cvae::train(&mut model, &data, &cfg, |_, _| StepControl::Continue)?;
    fs::write(&args.loss_csv, loss_csv(&logs)).with_context(|| format!("writing {}", args.loss_csv.display()))?;
    cvae::save_checkpoint(&model, &args.out_ckpt)?;
    Ok(logs)
}

/// Report name in the `TridentNet-H{H}-S{S}` style.
pub fn model_name(horizon: usize, spacing: f64) -> String {
    format!("TridentNet-H{horizon}-S{spacing}")
}

/// JSON twin of a text report path.
pub fn json_report_path(report: &Path) -> PathBuf {
    report.with_extension("json")
}

pub fn eval_with<G: Generator + ?Sized>(gen: &G, data: &Path, report: &Path) -> Result<EvalReport> {
    let manifest = Manifest::load(data)?;
    let name = model_name(manifest.config.horizon, manifest.config.spacing);
    let r = evaluate(gen, &name, data, Split::Test)?;
    fs::write(report, r.to_text()).with_context(|| format!("writing {}", report.display()))?;
    fs::write(json_report_path(report), r.to_json())?;
    Ok(r)
}

pub fn cmd_eval(data: &Path, ckpt: &Path, report: &Path) -> Result<EvalReport> {
    let model = cvae::load_checkpoint(ckpt)?;
    let manifest = Manifest::load(data)?;
    if model.config().scene_channels != manifest.config.class_names.len() {
        bail!(cvae::CvaeError::ConfigMismatch(format!(
            "checkpoint expects {} scene classes, dataset has {}",
            model.config().scene_channels,
            manifest.config.class_names.len()
        )));
    }
    eval_with(&model, data, report)
}

pub const GENERATED_COLOR: [u8; 3] = [0, 255, 0];
pub const TARGET_COLOR: [u8; 3] = [0, 0, 255];

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub generated: Vec<PixelWaypoint>,
    pub target: Vec<PixelWaypoint>,
    pub pixels: Vec<[u8; 3]>,
}

/// Scene colored by class, target waypoints in blue, generated waypoints in
/// green drawn on top. Waypoints outside the raster are skipped.
pub fn render_plot(rec: &SampleRecord, generated: &[[f64; 2]]) -> Plot {
    let mut pixels: Vec<[u8; 3]> = rec.scene.labels.iter().map(|&l| class_color(l)).collect();
    let target = waypoints_to_pixels(&rec.target);
    let gen = waypoints_to_pixels(generated);
    for (wps, color) in [(&target, TARGET_COLOR), (&gen, GENERATED_COLOR)] {
        for w in wps.iter().filter(|w| w.inside) {
            pixels[w.row as usize * SCENE_SIZE + w.col as usize] = color;
        }
    }
    Plot {
        generated: gen,
        target,
        pixels,
    }
}

pub fn generate_with<G: Generator + ?Sized>(gen: &G, sample: &Path, plot: &Path) -> Result<Plot> {
    let rec = load_sample(sample)?;
    let traj = gen.generate(&rec)?;
    let p = render_plot(&rec, &traj);
    let mut f = std::io::BufWriter::new(fs::File::create(plot).with_context(|| format!("creating {}", plot.display()))?);
    write_ppm(&mut f, SCENE_SIZE, SCENE_SIZE, &p.pixels)?;
    f.flush()?;
    Ok(p)
}

pub fn cmd_generate(ckpt: &Path, sample: &Path, plot: &Path) -> Result<Plot> {
    let model = cvae::load_checkpoint(ckpt)?;
    generate_with(&model, sample, plot)
}

/// Files written by [`cmd_gen_synth`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub osm: PathBuf,
    pub semantic: PathBuf,
    pub meta: PathBuf,
    pub poses: Vec<PathBuf>,
}

pub fn cmd_gen_synth(kind: WorldKind, seed: u64, out: &Path) -> Result<SynthFiles> {
    let world = gen_synthetic_world(seed, kind);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let files = SynthFiles {
        osm: out.join("map.osm"),
        semantic: out.join("semantic.pgm"),
        meta: out.join("semantic.json"),
        poses: world.tracks.iter().map(|t| out.join(format!("{}.csv", t.name))).collect(),
    };
    fs::write(&files.osm, world.osm_xml())?;
    world.map.save(&files.semantic, &files.meta)?;
    for (t, path) in world.tracks.iter().zip(&files.poses) {
        fs::write(path, write_pose_log(&t.track))?;
    }
    Ok(files)
}
