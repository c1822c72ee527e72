//! Ego-centric bird's-eye-view rasters: the global-plan image and the local
//! semantic scene.
//!
//! Every raster here, the stored semantic map included, uses one layout:
//! +x is image up (decreasing row) and +y is image left (decreasing column).
//! Pixel indices address pixel centers.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geo_graph::{RoadGraph, Route};

pub const PLAN_SIZE: usize = 200;
pub const PLAN_RESOLUTION: f64 = 0.5;
pub const SCENE_SIZE: usize = 400;
pub const SCENE_RESOLUTION: f64 = 0.2;
pub const PLAN_THICKNESS_PX: u32 = 3;

/// Class names every semantic map must contain; `unknown` fills off-map pixels.
pub const DEFAULT_CLASSES: [&str; 6] = ["unknown", "road", "crosswalk", "sidewalk", "lane_marking", "vegetation"];

// slack for "within distance" so exact boundary pixels are not lost to rounding
const DIST_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("invalid semantic map: {0}")]
    InvalidMap(String),
    #[error("bad image file: {0}")]
    BadImage(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// SE(2) pose in the map frame. Yaw is kept in (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

pub fn normalize_angle(a: f64) -> f64 {
    // leave in-range values untouched so normalization is idempotent bit for bit
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// (cos yaw, sin yaw), exact at quarter turns.
    ///
    /// The yaw is split into whole quarter turns plus a remainder; only the
    /// remainder goes through `sin_cos`, so multiples of pi/2 give exact 0/±1.
    pub fn cos_sin(&self) -> (f64, f64) {
        let k = (self.yaw / FRAC_PI_2).round();
        let mut rest = self.yaw - k * FRAC_PI_2;
        if rest.abs() < 1e-12 {
            rest = 0.0;
        }
        let (mut s, mut c) = rest.sin_cos();
        for _ in 0..(k as i64).rem_euclid(4) {
            (c, s) = (-s, c);
        }
        (c, s)
    }

    /// Ego-frame point to map frame.
    pub fn to_map(&self, p: [f64; 2]) -> [f64; 2] {
        let (c, s) = self.cos_sin();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Map-frame point to ego frame.
    pub fn to_ego(&self, p: [f64; 2]) -> [f64; 2] {
        let (c, s) = self.cos_sin();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// Size and resolution of an ego-centric raster. The ego origin sits at
/// pixel `(height/2, width/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
}

impl RasterSpec {
    pub const PLAN: RasterSpec = RasterSpec {
        width: PLAN_SIZE,
        height: PLAN_SIZE,
        resolution: PLAN_RESOLUTION,
    };
    pub const SCENE: RasterSpec = RasterSpec {
        width: SCENE_SIZE,
        height: SCENE_SIZE,
        resolution: SCENE_RESOLUTION,
    };

    fn center(&self) -> (f64, f64) {
        ((self.height / 2) as f64, (self.width / 2) as f64)
    }

    /// Ego-frame position of a pixel center.
    pub fn pixel_to_ego(&self, row: usize, col: usize) -> [f64; 2] {
        let (cr, cc) = (self.height as i64 / 2, self.width as i64 / 2);
        [(cr - row as i64) as f64 * self.resolution, (cc - col as i64) as f64 * self.resolution]
    }

    /// Continuous (row, col) of an ego-frame point.
    pub fn ego_to_pixel(&self, p: [f64; 2]) -> (f64, f64) {
        let (cr, cc) = self.center();
        (cr - p[0] / self.resolution, cc - p[1] / self.resolution)
    }
}

/// Row-major grid of 0/1 values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryGrid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_subset_of(&self, other: &BinaryGrid) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(&a, &b)| a == 0 || b != 0)
    }
}

fn seg_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    qx * qx + qy * qy
}

fn stamp_segment(grid: &mut BinaryGrid, spec: &RasterSpec, a: [f64; 2], b: [f64; 2], radius: f64) {
    // endpoint order must not change the result
    let (a, b) = if (a[0], a[1]) <= (b[0], b[1]) { (a, b) } else { (b, a) };
    let (ra, ca) = spec.ego_to_pixel(a);
    let (rb, cb) = spec.ego_to_pixel(b);
    let pad = radius / spec.resolution + 1.0;
    let clip = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
        let lo = (lo - pad).floor().max(0.0);
        let hi = (hi + pad).ceil().min(n as f64 - 1.0);
        (lo <= hi).then_some((lo as usize, hi as usize))
    };
    let Some((r0, r1)) = clip(ra.min(rb), ra.max(rb), spec.height) else { return };
    let Some((c0, c1)) = clip(ca.min(cb), ca.max(cb), spec.width) else { return };
    let lim = (radius + DIST_EPS) * (radius + DIST_EPS);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if seg_dist2(spec.pixel_to_ego(r, c), a, b) <= lim {
                grid.data[r * spec.width + c] = 1;
            }
        }
    }
}

/// Mark every pixel whose center lies within `thickness_px * resolution / 2`
/// of the ego-frame polyline. Parts outside the raster are clipped.
pub fn rasterize_polyline(points: &[[f64; 2]], spec: &RasterSpec, thickness_px: u32) -> BinaryGrid {
    let mut grid = BinaryGrid::zeros(spec.width, spec.height);
    let radius = thickness_px.max(1) as f64 * spec.resolution / 2.0;
    match points {
        [] => {}
        [p] => stamp_segment(&mut grid, spec, *p, *p, radius),
        _ => {
            for w in points.windows(2) {
                stamp_segment(&mut grid, spec, w[0], w[1], radius);
            }
        }
    }
    grid
}

/// Global-plan raster: nearby roads and the route, both binary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanRaster {
    pub roads: BinaryGrid,
    pub route: BinaryGrid,
}

impl PlanRaster {
    pub fn spec(&self) -> RasterSpec {
        RasterSpec::PLAN
    }

    /// Channel-major `[roads, route]` as f32.
    pub fn to_f32(&self) -> Vec<f32> {
        self.roads.data.iter().chain(&self.route.data).map(|&v| v as f32).collect()
    }

    /// Roads white, route green, background black.
    pub fn write_ppm<W: Write>(&self, out: W) -> io::Result<()> {
        let px: Vec<[u8; 3]> = self
            .roads
            .data
            .iter()
            .zip(&self.route.data)
            .map(|(&road, &route)| match (road, route) {
                (_, 1) => [0, 200, 0],
                (1, _) => [255, 255, 255],
                _ => [0, 0, 0],
            })
            .collect();
        write_ppm(out, self.roads.width, self.roads.height, &px)
    }
}

fn segment_in_window(a: [f64; 2], b: [f64; 2], half: f64) -> bool {
    a[0].min(b[0]) <= half && a[0].max(b[0]) >= -half && a[1].min(b[1]) <= half && a[1].max(b[1]) >= -half
}

/// Render the graph's edges around `ego` into the roads channel and the
/// route's edges into the route channel.
pub fn render_global_plan(g: &RoadGraph, route: &Route, ego: &Pose2) -> PlanRaster {
    let spec = RasterSpec::PLAN;
    let radius = PLAN_THICKNESS_PX as f64 * spec.resolution / 2.0;
    let half = spec.width.max(spec.height) as f64 * spec.resolution / 2.0 + radius + spec.resolution;
    let ego_xy: Vec<[f64; 2]> = g.nodes().iter().map(|n| ego.to_ego(n.xy)).collect();

    let mut roads = BinaryGrid::zeros(spec.width, spec.height);
    for e in g.edges() {
        let (a, b) = (ego_xy[e.a], ego_xy[e.b]);
        if segment_in_window(a, b, half) {
            stamp_segment(&mut roads, &spec, a, b, radius);
        }
    }

    let mut route_grid = BinaryGrid::zeros(spec.width, spec.height);
    let index_of = |id: i64| g.nodes().binary_search_by_key(&id, |n| n.id).ok();
    for w in route.node_ids.windows(2) {
        let (Some(i), Some(j)) = (index_of(w[0]), index_of(w[1])) else { continue };
        if g.edge_length(w[0], w[1]).is_none() {
            continue;
        }
        let (a, b) = (ego_xy[i], ego_xy[j]);
        if segment_in_window(a, b, half) {
            stamp_segment(&mut route_grid, &spec, a, b, radius);
        }
    }
    PlanRaster {
        roads,
        route: route_grid,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MapSidecar {
    resolution_m_per_px: f64,
    origin_x_m: f64,
    origin_y_m: f64,
    class_names: Vec<String>,
}

/// Class-index grid in the map frame. Pixel `(r, c)` is centered at
/// `(origin_x - r*res, origin_y - c*res)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    rows: usize,
    cols: usize,
    classes: Vec<u8>,
    resolution: f64,
    origin_xy: [f64; 2],
    class_names: Vec<String>,
    unknown: u8,
}

impl SemanticMap {
    pub fn new(
        rows: usize,
        cols: usize,
        classes: Vec<u8>,
        resolution: f64,
        origin_xy: [f64; 2],
        class_names: Vec<String>,
    ) -> Result<Self, RasterError> {
        if rows == 0 || cols == 0 || classes.len() != rows * cols {
            return Err(RasterError::InvalidMap(format!(
                "{} labels for a {rows}x{cols} grid",
                classes.len()
            )));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(RasterError::InvalidMap(format!("resolution {resolution}")));
        }
        if class_names.len() > 256 {
            return Err(RasterError::InvalidMap("more than 256 classes".into()));
        }
        for required in DEFAULT_CLASSES {
            if !class_names.iter().any(|c| c == required) {
                return Err(RasterError::InvalidMap(format!("missing class '{required}'")));
            }
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= class_names.len()) {
            return Err(RasterError::InvalidMap(format!("class index {bad} out of range")));
        }
        let unknown = class_names.iter().position(|c| c == "unknown").unwrap_or(0) as u8;
        Ok(Self {
            rows,
            cols,
            classes,
            resolution,
            origin_xy,
            class_names,
            unknown,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin_xy(&self) -> [f64; 2] {
        self.origin_xy
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn unknown_class(&self) -> u8 {
        self.unknown
    }

    pub fn class_index(&self, name: &str) -> Option<u8> {
        self.class_names.iter().position(|c| c == name).map(|i| i as u8)
    }

    pub fn labels(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.cols + col]
    }

    /// Map-frame center of a pixel.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin_xy[0] - row as f64 * self.resolution,
            self.origin_xy[1] - col as f64 * self.resolution,
        ]
    }

    /// Nearest-neighbor class at a map-frame point; `unknown` off the map.
    pub fn sample(&self, p: [f64; 2]) -> u8 {
        let r = ((self.origin_xy[0] - p[0]) / self.resolution + 0.5).floor();
        let c = ((self.origin_xy[1] - p[1]) / self.resolution + 0.5).floor();
        if r >= 0.0 && c >= 0.0 && r < self.rows as f64 && c < self.cols as f64 {
            self.classes[r as usize * self.cols + c as usize]
        } else {
            self.unknown
        }
    }

    /// Load from a binary PGM of class indices plus its JSON sidecar.
    pub fn load(pgm: &Path, sidecar: &Path) -> Result<Self, RasterError> {
        let (cols, rows, data) = read_pgm(std::fs::File::open(pgm)?)?;
        let meta: MapSidecar = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(sidecar)?))?;
        Self::new(
            rows,
            cols,
            data,
            meta.resolution_m_per_px,
            [meta.origin_x_m, meta.origin_y_m],
            meta.class_names,
        )
    }

    pub fn save(&self, pgm: &Path, sidecar: &Path) -> Result<(), RasterError> {
        let mut f = io::BufWriter::new(std::fs::File::create(pgm)?);
        write_pgm(&mut f, self.cols, self.rows, &self.classes)?;
        f.flush()?;
        let meta = MapSidecar {
            resolution_m_per_px: self.resolution,
            origin_x_m: self.origin_xy[0],
            origin_y_m: self.origin_xy[1],
            class_names: self.class_names.clone(),
        };
        std::fs::write(sidecar, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

/// Local semantic scene stored as class labels; one-hot on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneRaster {
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl SceneRaster {
    pub fn spec(&self) -> RasterSpec {
        RasterSpec::SCENE
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * SCENE_SIZE + col]
    }

    /// One-hot channel `class` as a 0/1 grid.
    pub fn channel(&self, class: usize) -> BinaryGrid {
        BinaryGrid {
            width: SCENE_SIZE,
            height: SCENE_SIZE,
            data: self.labels.iter().map(|&l| (l as usize == class) as u8).collect(),
        }
    }

    /// Channel-major one-hot tensor `[C, 400, 400]`.
    pub fn one_hot_f32(&self) -> Vec<f32> {
        let n = self.labels.len();
        let mut out = vec![0.0f32; self.num_classes * n];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize * n + i] = 1.0;
        }
        out
    }

    pub fn write_ppm<W: Write>(&self, out: W) -> io::Result<()> {
        let px: Vec<[u8; 3]> = self.labels.iter().map(|&l| class_color(l)).collect();
        write_ppm(out, SCENE_SIZE, SCENE_SIZE, &px)
    }
}

/// Fixed palette in the order of [`DEFAULT_CLASSES`].
pub fn class_color(class: u8) -> [u8; 3] {
    match class {
        0 => [0, 0, 0],
        1 => [128, 128, 128],
        2 => [255, 255, 255],
        3 => [70, 110, 220],
        4 => [250, 220, 40],
        5 => [40, 160, 60],
        k => [k.wrapping_mul(67), k.wrapping_mul(151), k.wrapping_mul(29)],
    }
}

/// Sample the map around `ego` into a 400x400 scene, ego at the center and
/// heading up.
pub fn extract_local_scene(map: &SemanticMap, ego: &Pose2) -> SceneRaster {
    let spec = RasterSpec::SCENE;
    let mut labels = vec![map.unknown_class(); SCENE_SIZE * SCENE_SIZE];
    for r in 0..SCENE_SIZE {
        for c in 0..SCENE_SIZE {
            labels[r * SCENE_SIZE + c] = map.sample(ego.to_map(spec.pixel_to_ego(r, c)));
        }
    }
    SceneRaster {
        labels,
        num_classes: map.num_classes(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelWaypoint {
    pub row: i64,
    pub col: i64,
    /// False when the waypoint falls outside the scene raster.
    pub inside: bool,
}

/// Ego-frame waypoints to scene-raster pixels (nearest pixel center).
pub fn waypoints_to_pixels(traj: &[[f64; 2]]) -> Vec<PixelWaypoint> {
    let spec = RasterSpec::SCENE;
    traj.iter()
        .map(|&p| {
            let (r, c) = spec.ego_to_pixel(p);
            let (row, col) = (r.round() as i64, c.round() as i64);
            let inside = (0..spec.height as i64).contains(&row) && (0..spec.width as i64).contains(&col);
            PixelWaypoint { row, col, inside }
        })
        .collect()
}

pub fn write_pgm<W: Write>(mut out: W, width: usize, height: usize, data: &[u8]) -> io::Result<()> {
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(data)
}

pub fn write_ppm<W: Write>(mut out: W, width: usize, height: usize, px: &[[u8; 3]]) -> io::Result<()> {
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.write_all(px.as_flattened())
}

/// Read a binary (P5) PGM with maxval 255. Returns `(width, height, data)`.
pub fn read_pgm<R: Read>(mut input: R) -> Result<(usize, usize, Vec<u8>), RasterError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(RasterError::BadImage("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(RasterError::BadImage(format!("expected P5, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| RasterError::BadImage(format!("bad header field '{s}'")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(RasterError::BadImage(format!("maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates the header from the pixels
    let data = buf.get(pos + 1..).unwrap_or_default();
    if data.len() != w * h {
        return Err(RasterError::BadImage(format!("{} pixel bytes for {w}x{h}", data.len())));
    }
    Ok((w, h, data.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo_graph::GeoPoint;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn names() -> Vec<String> {
        DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
    }

    /// Map with a distinct-looking class pattern at the scene resolution.
    fn patterned_map(rows: usize, cols: usize, origin: [f64; 2]) -> SemanticMap {
        let classes = (0..rows * cols)
            .map(|i| {
                let (r, c) = (i / cols, i % cols);
                ((r * 7 + c * 3 + (r * c) % 5) % 6) as u8
            })
            .collect();
        SemanticMap::new(rows, cols, classes, SCENE_RESOLUTION, origin, names()).unwrap()
    }

    /// Per-pixel oracle: brute force over all pixels, distance to each segment.
    fn polyline_oracle(points: &[[f64; 2]], spec: &RasterSpec, thickness: u32) -> BinaryGrid {
        let mut g = BinaryGrid::zeros(spec.width, spec.height);
        let rad = thickness as f64 * spec.resolution / 2.0;
        for r in 0..spec.height {
            for c in 0..spec.width {
                let px = (spec.height as f64 / 2.0 - r as f64) * spec.resolution;
                let py = (spec.width as f64 / 2.0 - c as f64) * spec.resolution;
                let near = points.windows(2).any(|w| {
                    let (ax, ay, bx, by) = (w[0][0], w[0][1], w[1][0], w[1][1]);
                    let l2 = (bx - ax).powi(2) + (by - ay).powi(2);
                    let t = if l2 == 0.0 { 0.0 } else { (((px - ax) * (bx - ax) + (py - ay) * (by - ay)) / l2).clamp(0.0, 1.0) };
                    ((ax + t * (bx - ax) - px).powi(2) + (ay + t * (by - ay) - py).powi(2)).sqrt() <= rad + 1e-9
                });
                g.data[r * spec.width + c] = near as u8;
            }
        }
        g
    }

    #[test]
    fn empty_polyline_is_blank() {
        assert_eq!(rasterize_polyline(&[], &RasterSpec::PLAN, 3).count_ones(), 0);
    }

    #[test]
    fn forward_segment_fills_center_column() {
        let g = rasterize_polyline(&[[0.0, 0.0], [10.0, 0.0]], &RasterSpec::PLAN, 1);
        assert_eq!(g.count_ones(), 21);
        for r in 80..=100 {
            assert_eq!(g.get(r, 100), 1);
        }
        assert_eq!(g, polyline_oracle(&[[0.0, 0.0], [10.0, 0.0]], &RasterSpec::PLAN, 1));
    }

    #[test]
    fn lateral_segment_fills_center_row_to_the_left() {
        let g = rasterize_polyline(&[[0.0, 0.0], [0.0, 10.0]], &RasterSpec::PLAN, 1);
        assert_eq!(g.count_ones(), 21);
        for c in 80..=100 {
            assert_eq!(g.get(100, c), 1);
        }
    }

    #[test]
    fn polyline_is_deterministic_and_clipped() {
        let pts = [[-80.0, 3.3], [12.5, -7.25], [70.0, 90.0]];
        let a = rasterize_polyline(&pts, &RasterSpec::PLAN, 3);
        assert_eq!(a, rasterize_polyline(&pts, &RasterSpec::PLAN, 3));
        assert_eq!(a, polyline_oracle(&pts, &RasterSpec::PLAN, 3));
        let far = rasterize_polyline(&[[500.0, 500.0], [600.0, 500.0]], &RasterSpec::PLAN, 3);
        assert_eq!(far.count_ones(), 0);
    }

    #[test]
    fn waypoint_pixel_examples() {
        let px = waypoints_to_pixels(&[[0.0, 0.0], [10.0, 0.0], [0.0, 2.0], [100.0, 0.0]]);
        assert_eq!((px[0].row, px[0].col, px[0].inside), (200, 200, true));
        assert_eq!((px[1].row, px[1].col), (150, 200));
        assert_eq!((px[2].row, px[2].col), (200, 190));
        assert!(!px[3].inside);
        assert_eq!(px[3].row, -300);
    }

    fn straight_graph(ids: &[i64]) -> RoadGraph {
        // road running north along a meridian
        let nodes: BTreeMap<i64, GeoPoint> = ids
            .iter()
            .enumerate()
            .map(|(k, &id)| (id, GeoPoint::new(32.88 + 1e-4 * k as f64, -117.23).unwrap()))
            .collect();
        let links: Vec<_> = ids.windows(2).map(|w| (w[0], w[1], 1)).collect();
        RoadGraph::from_links(&nodes, &links).unwrap()
    }

    #[test]
    fn plan_raster_dims_and_empty_route() {
        let g = straight_graph(&[1, 2, 3, 4, 5]);
        let ego = Pose2::new(0.0, 0.0, FRAC_PI_2);
        let plan = render_global_plan(&g, &Route::empty(), &ego);
        assert_eq!((plan.roads.width, plan.roads.height), (200, 200));
        assert_eq!(plan.spec().resolution, 0.5);
        assert_eq!(plan.route.count_ones(), 0);
        let with_route = render_global_plan(&g, &g.shortest_path(1, 5).unwrap(), &ego);
        assert_eq!(with_route.roads, plan.roads);
        assert!(with_route.route.is_subset_of(&with_route.roads));
        assert!(with_route.route.count_ones() > 0);
    }

    #[test]
    fn road_along_heading_is_center_band() {
        let g = straight_graph(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15]);
        let mid = g.node(8).unwrap().xy;
        // road runs along map +y; facing it puts the road along ego +x
        let ego = Pose2::new(mid[0], mid[1], FRAC_PI_2);
        let plan = render_global_plan(&g, &Route::empty(), &ego);
        let pts: Vec<[f64; 2]> = g.nodes().iter().map(|n| ego.to_ego(n.xy)).collect();
        assert_eq!(plan.roads, polyline_oracle(&pts, &RasterSpec::PLAN, 3));
        for r in 0..200 {
            let cols: Vec<usize> = (0..200).filter(|&c| plan.roads.get(r, c) == 1).collect();
            assert_eq!(cols, vec![99, 100, 101], "row {r}");
        }
    }

    #[test]
    fn identity_extraction_is_window_copy() {
        let map = patterned_map(600, 700, [60.0, 70.0]);
        let scene = extract_local_scene(&map, &Pose2::identity());
        // ego origin is map pixel (300, 350), scene pixel (200, 200)
        for r in 0..400 {
            for c in 0..400 {
                assert_eq!(scene.get(r, c), map.get(r + 100, c + 150));
            }
        }
        assert!(scene.labels.iter().any(|&l| l != scene.labels[0]));
    }

    #[test]
    fn off_map_pose_is_unknown() {
        let map = patterned_map(50, 50, [0.0, 0.0]);
        let scene = extract_local_scene(&map, &Pose2::new(1000.0, -1000.0, 0.3));
        assert!(scene.labels.iter().all(|&l| l == map.unknown_class()));
    }

    #[test]
    fn one_hot_sums_to_one() {
        let map = patterned_map(300, 300, [30.0, 30.0]);
        let scene = extract_local_scene(&map, &Pose2::new(3.0, -4.0, 0.7));
        let oh = scene.one_hot_f32();
        let n = 400 * 400;
        for i in 0..n {
            let s: f32 = (0..scene.num_classes).map(|k| oh[k * n + i]).sum();
            assert_eq!(s, 1.0);
        }
    }

    fn quarter_turn_check(map: &SemanticMap, x: f64, y: f64, k: i32) {
        let a = extract_local_scene(map, &Pose2::new(x, y, k as f64 * FRAC_PI_2));
        let b = extract_local_scene(map, &Pose2::new(x, y, (k + 1) as f64 * FRAC_PI_2));
        // rotating the ego frame by +90 deg: b[r][c] == a[400 - c][r]
        for r in 0..400 {
            for c in 1..400 {
                assert_eq!(b.get(r, c), a.get(400 - c, r), "k={k} r={r} c={c}");
            }
        }
    }

    #[test]
    fn quarter_turn_equivariance() {
        let map = patterned_map(500, 500, [50.0, 50.0]);
        for k in -2..=2 {
            quarter_turn_check(&map, 0.0, 0.0, k);
        }
        quarter_turn_check(&map, 4.2, -6.0, 1);
    }

    #[test]
    fn quarter_turn_trig_is_exact() {
        for (k, want) in [(0, (1.0, 0.0)), (1, (0.0, 1.0)), (2, (-1.0, 0.0)), (-1, (0.0, -1.0))] {
            assert_eq!(Pose2::new(0.0, 0.0, k as f64 * FRAC_PI_2).cos_sin(), want);
        }
        assert_eq!(Pose2::new(0.0, 0.0, -PI).yaw, PI);
        assert_eq!(Pose2::new(0.0, 0.0, 3.0 * PI).yaw, PI);
    }

    #[test]
    fn pgm_and_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = patterned_map(13, 17, [1.5, -2.5]);
        let (pgm, json) = (dir.path().join("m.pgm"), dir.path().join("m.json"));
        map.save(&pgm, &json).unwrap();
        assert_eq!(SemanticMap::load(&pgm, &json).unwrap(), map);
        let mut commented = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        commented.extend([1, 2]);
        assert_eq!(read_pgm(&commented[..]).unwrap(), (2, 1, vec![1, 2]));
        assert!(read_pgm(&b"P6\n1 1\n255\n\0\0\0"[..]).is_err());
        assert!(read_pgm(&b"P5\n2 2\n255\n\0"[..]).is_err());
    }

    #[test]
    fn invalid_maps_rejected() {
        assert!(SemanticMap::new(1, 1, vec![9], 0.2, [0.0, 0.0], names()).is_err());
        assert!(SemanticMap::new(1, 1, vec![0], 0.0, [0.0, 0.0], names()).is_err());
        assert!(SemanticMap::new(1, 2, vec![0], 0.2, [0.0, 0.0], names()).is_err());
        assert!(SemanticMap::new(1, 1, vec![0], 0.2, [0.0, 0.0], vec!["road".into()]).is_err());
    }

    #[test]
    fn ppm_export_sizes() {
        let g = straight_graph(&[1, 2, 3]);
        let plan = render_global_plan(&g, &g.shortest_path(1, 3).unwrap(), &Pose2::identity());
        let mut buf = Vec::new();
        plan.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n200 200\n255\n"));
        assert_eq!(buf.len(), 15 + 200 * 200 * 3);
    }

    proptest! {
        #[test]
        fn pose_round_trip(x in -1e3..1e3f64, y in -1e3..1e3f64, yaw in -10.0..10.0f64, px in -500.0..500.0f64, py in -500.0..500.0f64) {
            let pose = Pose2::new(x, y, yaw);
            prop_assert!(pose.yaw > -PI && pose.yaw <= PI);
            let back = pose.to_ego(pose.to_map([px, py]));
            prop_assert!((back[0] - px).abs() <= 1e-9 && (back[1] - py).abs() <= 1e-9);
        }

        #[test]
        fn route_is_subset_of_roads(seed in any::<u64>(), yaw in -PI..PI) {
            let mut r = crate::rng::XorShift64::new(seed);
            let ids: Vec<i64> = (1..=8).collect();
            let nodes: BTreeMap<i64, GeoPoint> = ids
                .iter()
                .map(|&id| (id, GeoPoint::new(32.88 + r.uniform(-4e-4, 4e-4), -117.23 + r.uniform(-4e-4, 4e-4)).unwrap()))
                .collect();
            let links: Vec<_> = (0..14).map(|k| (ids[r.below(8)], ids[r.below(8)], k)).collect();
            let g = RoadGraph::from_links(&nodes, &links).unwrap();
            let ego = Pose2::new(r.uniform(-20.0, 20.0), r.uniform(-20.0, 20.0), yaw);
            if let Ok(route) = g.shortest_path(ids[0], ids[7]) {
                let plan = render_global_plan(&g, &route, &ego);
                prop_assert!(plan.route.is_subset_of(&plan.roads));
            }
        }

        #[test]
        fn polyline_matches_oracle(pts in proptest::collection::vec((-60.0..60.0f64, -60.0..60.0f64), 0..5), t in 1u32..5) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(a, b)| [a, b]).collect();
            let got = rasterize_polyline(&pts, &RasterSpec::PLAN, t);
            if pts.len() >= 2 {
                prop_assert_eq!(got, polyline_oracle(&pts, &RasterSpec::PLAN, t));
            }
        }
    }
}
