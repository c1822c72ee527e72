//! Training samples from pose logs: arc-length waypoint targets, rendered
//! plan and scene rasters, seeded train/test splits and the on-disk format.

mod synth;

use std::io::{self, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geo_graph::{GraphError, RoadGraph, Route};
use crate::raster::{
    extract_local_scene, render_global_plan, BinaryGrid, PlanRaster, Pose2, SceneRaster, SemanticMap, PLAN_SIZE,
    SCENE_SIZE,
};
use crate::rng::XorShift64;

pub use synth::{gen_synthetic_world, SyntheticTrack, SyntheticWorld, WorldKind};

/// Ego-frame waypoints in meters, `[x forward, y left]`.
pub type Trajectory = Vec<[f64; 2]>;

pub const SAMPLE_MAGIC: &[u8; 4] = b"TSMP";
pub const SAMPLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

// remaining arc length may fall short of H*S by accumulated rounding only
const ARC_SLACK: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("pose log header must be 't,x,y,yaw', found '{0}'")]
    BadHeader(String),
    #[error("time does not increase at line {line}")]
    NonMonotonicTime { line: usize },
    #[error("cannot parse line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("remaining path is {available:.3} m, need {needed:.3} m")]
    InsufficientLength { available: f64, needed: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("bad sample file: {0}")]
    BadSample(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    pub t: f64,
    pub pose: Pose2,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseTrack {
    pub poses: Vec<TimedPose>,
}

impl PoseTrack {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.poses.iter().map(|p| [p.pose.x, p.pose.y]).collect()
    }

    /// Polyline length from `start` to the end.
    pub fn remaining_length(&self, start: usize) -> f64 {
        self.poses[start.min(self.poses.len())..]
            .windows(2)
            .map(|w| (w[1].pose.x - w[0].pose.x).hypot(w[1].pose.y - w[0].pose.y))
            .sum()
    }
}

fn parse_field(raw: &str, line: usize, name: &str) -> Result<f64, DatasetError> {
    let v: f64 = raw.trim().parse().map_err(|_| DatasetError::ParseError {
        line,
        msg: format!("{name} = '{raw}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(DatasetError::ParseError {
            line,
            msg: format!("{name} is not finite"),
        });
    }
    Ok(v)
}

/// Parse a `t,x,y,yaw` CSV. Line numbers in errors are 1-based and count
/// the header.
pub fn load_pose_log(csv_text: &str) -> Result<PoseTrack, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let header = rdr.headers().map_err(|e| DatasetError::BadHeader(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["t", "x", "y", "yaw"] {
        return Err(DatasetError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut poses: Vec<TimedPose> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| DatasetError::ParseError { line, msg: e.to_string() })?;
        if rec.len() != 4 {
            return Err(DatasetError::ParseError {
                line,
                msg: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let t = parse_field(&rec[0], line, "t")?;
        let x = parse_field(&rec[1], line, "x")?;
        let y = parse_field(&rec[2], line, "y")?;
        let yaw = parse_field(&rec[3], line, "yaw")?;
        if poses.last().is_some_and(|p| t <= p.t) {
            return Err(DatasetError::NonMonotonicTime { line });
        }
        poses.push(TimedPose {
            t,
            pose: Pose2::new(x, y, yaw),
        });
    }
    Ok(PoseTrack { poses })
}

/// Inverse of [`load_pose_log`]; floats use shortest round-trip formatting.
pub fn write_pose_log(track: &PoseTrack) -> String {
    let mut s = String::from("t,x,y,yaw\n");
    for p in &track.poses {
        s.push_str(&format!("{},{},{},{}\n", p.t, p.pose.x, p.pose.y, p.pose.yaw));
    }
    s
}

/// `H` points at arc lengths `S, 2S, ..., H*S` along the pose polyline from
/// `start`, expressed in the ego frame of `track[start]`.
pub fn resample_arclength(track: &PoseTrack, start: usize, spacing: f64, horizon: usize) -> Result<Trajectory, DatasetError> {
    if !(spacing > 0.0 && spacing.is_finite()) || horizon == 0 {
        return Err(DatasetError::InvalidConfig(format!("spacing {spacing}, horizon {horizon}")));
    }
    if start >= track.len() {
        return Err(DatasetError::InsufficientLength {
            available: 0.0,
            needed: spacing * horizon as f64,
        });
    }
    let pts = &track.poses[start..];
    let needed = spacing * horizon as f64;
    let available = track.remaining_length(start);
    if available < needed - ARC_SLACK {
        return Err(DatasetError::InsufficientLength { available, needed });
    }
    let ego = pts[0].pose;
    let mut out = Vec::with_capacity(horizon);
    let mut seg = 0;
    let mut seg_start_arc = 0.0;
    for k in 1..=horizon {
        let target = k as f64 * spacing;
        loop {
            let (a, b) = (&pts[seg].pose, &pts[seg + 1].pose);
            let len = (b.x - a.x).hypot(b.y - a.y);
            let last = seg + 2 == pts.len();
            if target <= seg_start_arc + len || last {
                let f = if len > 0.0 { ((target - seg_start_arc) / len).min(1.0) } else { 0.0 };
                out.push(ego.to_ego([a.x + f * (b.x - a.x), a.y + f * (b.y - a.y)]));
                break;
            }
            seg_start_arc += len;
            seg += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub track_id: String,
    pub index: usize,
    pub pose: Pose2,
}

impl SampleMeta {
    /// File name encoding the sort key `(track_id, index)`.
    pub fn file_name(&self) -> String {
        format!("{}_{:06}.tsmp", self.track_id, self.index)
    }
}

/// Model inputs and target of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub plan: PlanRaster,
    pub scene: SceneRaster,
    pub target: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record: SampleRecord,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub horizon: usize,
    pub spacing: f64,
    /// Emit a sample at every `stride`-th pose index.
    pub stride: usize,
}

impl BuildOptions {
    pub fn new(horizon: usize, spacing: f64) -> Self {
        Self {
            horizon,
            spacing,
            stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.horizon == 0 || !(self.spacing > 0.0 && self.spacing.is_finite()) || self.stride == 0 {
            return Err(DatasetError::InvalidConfig(format!(
                "horizon {}, spacing {}, stride {}",
                self.horizon, self.spacing, self.stride
            )));
        }
        Ok(())
    }
}

/// One sample per (strided) track index with enough path ahead. Built in
/// parallel, returned in index order.
pub fn build_samples(
    track_id: &str,
    track: &PoseTrack,
    map: &SemanticMap,
    g: &RoadGraph,
    route: &Route,
    opts: &BuildOptions,
) -> Result<Vec<Sample>, DatasetError> {
    opts.validate()?;
    let samples = (0..track.len())
        .into_par_iter()
        .filter(|i| i % opts.stride == 0)
        .filter_map(|i| {
            let target = resample_arclength(track, i, opts.spacing, opts.horizon).ok()?;
            let pose = track.poses[i].pose;
            Some(Sample {
                record: SampleRecord {
                    plan: render_global_plan(g, route, &pose),
                    scene: extract_local_scene(map, &pose),
                    target,
                },
                meta: SampleMeta {
                    track_id: track_id.to_string(),
                    index: i,
                    pose,
                },
            })
        })
        .collect();
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "S")]
    pub spacing: f64,
    pub seed: u64,
    pub split_ratio: f64,
    pub stride: usize,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ManifestConfig,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// Number of training items for `n` samples at `ratio`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    // the slack keeps exact products such as 0.7 * 10 from rounding up
    (((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Seeded train/test partition of sample keys.
///
/// Keys are sorted first so the result depends only on the key set, then
/// shuffled with the seeded xorshift generator; the first `ceil(ratio*n)`
/// go to train. Both halves are returned sorted.
pub fn split(keys: &[String], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>), DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidConfig(format!("split ratio {ratio} not in (0, 1)")));
    }
    let mut order = keys.to_vec();
    order.sort();
    XorShift64::new(seed).shuffle(&mut order);
    let n_train = train_count(order.len(), ratio);
    let mut test = order.split_off(n_train);
    order.sort();
    test.sort();
    Ok((order, test))
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f32s<W: Write>(w: &mut W, vals: impl Iterator<Item = f32>) -> io::Result<()> {
    let bytes: Vec<u8> = vals.flat_map(f32::to_le_bytes).collect();
    w.write_all(&bytes)
}

/// Binary sample record: magic, version, H, then f32 LE plan, one-hot
/// scene and target.
pub fn write_sample<W: Write>(mut w: W, rec: &SampleRecord) -> io::Result<()> {
    w.write_all(SAMPLE_MAGIC)?;
    put_u32(&mut w, SAMPLE_VERSION)?;
    put_u32(&mut w, rec.target.len() as u32)?;
    put_f32s(&mut w, rec.plan.to_f32().into_iter())?;
    put_f32s(&mut w, rec.scene.one_hot_f32().into_iter())?;
    put_f32s(&mut w, rec.target.iter().flat_map(|p| [p[0] as f32, p[1] as f32]))?;
    Ok(())
}

pub fn read_sample<R: Read>(mut r: R) -> Result<SampleRecord, DatasetError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 12 || &buf[..4] != SAMPLE_MAGIC {
        return Err(DatasetError::BadSample("missing TSMP magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != SAMPLE_VERSION {
        return Err(DatasetError::BadSample(format!("version {version}, expected {SAMPLE_VERSION}")));
    }
    let horizon = word(8) as usize;
    let body = &buf[12..];
    if body.len() % 4 != 0 {
        return Err(DatasetError::BadSample("payload is not whole f32 values".into()));
    }
    let vals: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let plan_len = 2 * PLAN_SIZE * PLAN_SIZE;
    let scene_px = SCENE_SIZE * SCENE_SIZE;
    let scene_len = vals
        .len()
        .checked_sub(plan_len + 2 * horizon)
        .filter(|n| n % scene_px == 0 && *n > 0)
        .ok_or_else(|| DatasetError::BadSample(format!("{} values do not fit H = {horizon}", vals.len())))?;
    let classes = scene_len / scene_px;

    let binary = |chunk: &[f32]| -> Result<BinaryGrid, DatasetError> {
        let data = chunk
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                _ => Err(DatasetError::BadSample(format!("plan value {v} is not binary"))),
            })
            .collect::<Result<_, _>>()?;
        Ok(BinaryGrid {
            width: PLAN_SIZE,
            height: PLAN_SIZE,
            data,
        })
    };
    let half = PLAN_SIZE * PLAN_SIZE;
    let plan = PlanRaster {
        roads: binary(&vals[..half])?,
        route: binary(&vals[half..plan_len])?,
    };

    let one_hot = &vals[plan_len..plan_len + scene_len];
    let mut labels = vec![u8::MAX; scene_px];
    for k in 0..classes {
        for (i, &v) in one_hot[k * scene_px..(k + 1) * scene_px].iter().enumerate() {
            if v == 1.0 {
                if labels[i] != u8::MAX {
                    return Err(DatasetError::BadSample(format!("pixel {i} has two classes")));
                }
                labels[i] = k as u8;
            } else if v != 0.0 {
                return Err(DatasetError::BadSample(format!("scene value {v} is not one-hot")));
            }
        }
    }
    if labels.contains(&u8::MAX) {
        return Err(DatasetError::BadSample("scene pixel without a class".into()));
    }
    let target = vals[plan_len + scene_len..]
        .chunks_exact(2)
        .map(|c| [c[0] as f64, c[1] as f64])
        .collect();
    Ok(SampleRecord {
        plan,
        scene: SceneRaster {
            labels,
            num_classes: classes,
        },
        target,
    })
}

pub fn save_sample(path: &Path, rec: &SampleRecord) -> Result<(), DatasetError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_sample(&mut f, rec)?;
    f.flush()?;
    Ok(())
}

pub fn load_sample(path: &Path) -> Result<SampleRecord, DatasetError> {
    read_sample(io::BufReader::new(std::fs::File::open(path)?))
}

/// Shortest route between the graph nodes nearest the track's first and
/// last poses.
pub fn route_for_track(g: &RoadGraph, track: &PoseTrack) -> Result<Route, GraphError> {
    let (Some(first), Some(last)) = (track.poses.first(), track.poses.last()) else {
        return Ok(Route::empty());
    };
    let src = g.nearest_node([first.pose.x, first.pose.y])?;
    let dst = g.nearest_node([last.pose.x, last.pose.y])?;
    g.shortest_path(src, dst)
}

/// Write every sample under `dir` by its file name, split the names with
/// `config.seed` and `config.split_ratio`, and write the manifest.
pub fn write_dataset(dir: &Path, samples: &[Sample], config: ManifestConfig) -> Result<Manifest, DatasetError> {
    let mut keys: Vec<String> = samples.iter().map(|s| s.meta.file_name()).collect();
    keys.sort();
    if keys.windows(2).any(|w| w[0] == w[1]) {
        return Err(DatasetError::InvalidConfig("duplicate sample keys".into()));
    }
    if samples.iter().any(|s| s.record.target.len() != config.horizon) {
        return Err(DatasetError::InvalidConfig("sample horizon differs from config".into()));
    }
    std::fs::create_dir_all(dir)?;
    samples
        .par_iter()
        .try_for_each(|s| save_sample(&dir.join(s.meta.file_name()), &s.record))?;
    let (train, test) = split(&keys, config.split_ratio, config.seed)?;
    let manifest = Manifest { config, train, test };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Load the samples named by `keys` from a dataset directory, in order.
pub fn load_samples(dir: &Path, keys: &[String]) -> Result<Vec<SampleRecord>, DatasetError> {
    keys.par_iter().map(|k| load_sample(&dir.join(k))).collect()
}
