//! Closed-form synthetic worlds: road graph, painted semantic map and
//! centerline-following pose tracks.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::geo_graph::{unproject, write_osm, GeoPoint, RoadGraph, Route};
use crate::raster::{Pose2, SemanticMap, DEFAULT_CLASSES, SCENE_RESOLUTION};
use crate::rng::XorShift64;

use super::{PoseTrack, TimedPose};

const ROAD_HALF_WIDTH: f64 = 3.0;
const SIDEWALK_OUTER: f64 = 5.0;
const MARKING_HALF_WIDTH: f64 = 0.15;
const SPEED: f64 = 5.0;
const RATE_HZ: f64 = 10.0;
const NODE_SPACING: f64 = 5.0;
const MAP_MARGIN: f64 = 45.0;
const GEO_ANCHOR: GeoPoint = GeoPoint {
    lat: 32.8801,
    lon: -117.2340,
};

// class indices in DEFAULT_CLASSES order
const ROAD: u8 = 1;
const CROSSWALK: u8 = 2;
const SIDEWALK: u8 = 3;
const MARKING: u8 = 4;
const VEGETATION: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WorldKind {
    Straight,
    Intersection,
    UTurn,
    Curve,
}

impl WorldKind {
    pub const ALL: [WorldKind; 4] = [WorldKind::Straight, WorldKind::Intersection, WorldKind::UTurn, WorldKind::Curve];
}

impl fmt::Display for WorldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorldKind::Straight => "straight",
            WorldKind::Intersection => "intersection",
            WorldKind::UTurn => "u_turn",
            WorldKind::Curve => "curve",
        })
    }
}

impl FromStr for WorldKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WorldKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown world kind '{s}' (expected straight, intersection, u_turn or curve)"))
    }
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    Line(f64),
    /// Radius and signed turn angle (positive = left).
    Arc(f64, f64),
}

/// Arc-length parameterized path of lines and circular arcs.
#[derive(Debug, Clone)]
struct Path {
    start: [f64; 2],
    heading: f64,
    pieces: Vec<Piece>,
}

impl Path {
    fn piece_len(p: &Piece) -> f64 {
        match *p {
            Piece::Line(l) => l,
            Piece::Arc(r, a) => r * a.abs(),
        }
    }

    fn length(&self) -> f64 {
        self.pieces.iter().map(Self::piece_len).sum()
    }

    /// Position and heading at arc length `s` (clamped to the path).
    fn at(&self, s: f64) -> ([f64; 2], f64) {
        let (mut p, mut h) = (self.start, self.heading);
        let mut rest = s.max(0.0);
        for piece in &self.pieces {
            let len = Self::piece_len(piece);
            let u = rest.min(len);
            let (np, nh) = match *piece {
                Piece::Line(_) => ([p[0] + u * h.cos(), p[1] + u * h.sin()], h),
                Piece::Arc(r, a) => {
                    let sign = a.signum();
                    // piece end heading comes from the angle itself so turns stay exact
                    let nh = if u >= len { h + a } else { h + sign * u / r };
                    let np = [p[0] + sign * r * (nh.sin() - h.sin()), p[1] + sign * r * (h.cos() - nh.cos())];
                    (np, nh)
                }
            };
            if rest <= len {
                return (np, nh);
            }
            (p, h) = (np, nh);
            rest -= len;
        }
        (p, h)
    }

    /// Points every `step` meters plus the end point.
    fn polyline(&self, step: f64) -> Vec<[f64; 2]> {
        let len = self.length();
        let n = (len / step).ceil().max(1.0) as usize;
        (0..=n).map(|k| self.at(len * k as f64 / n as f64).0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrack {
    pub name: String,
    pub track: PoseTrack,
    pub route: Route,
}

/// A generated world, all geometry in the graph's metric frame.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub kind: WorldKind,
    pub nodes: BTreeMap<i64, GeoPoint>,
    pub ways: Vec<(i64, Vec<i64>)>,
    pub graph: RoadGraph,
    pub map: SemanticMap,
    pub tracks: Vec<SyntheticTrack>,
}

impl SyntheticWorld {
    /// The first (primary) track.
    pub fn track(&self) -> &PoseTrack {
        &self.tracks[0].track
    }

    pub fn route(&self) -> &Route {
        &self.tracks[0].route
    }

    pub fn osm_xml(&self) -> String {
        write_osm(&self.nodes, &self.ways)
    }
}

struct Layout {
    /// Way centerlines as paths.
    ways: Vec<Path>,
    /// Ways sharing a start point are joined at a common node.
    tracks: Vec<(String, Path)>,
    crossing: bool,
}

fn layout(kind: WorldKind, rng: &mut XorShift64) -> Layout {
    let arm = 60.0 + rng.uniform(0.0, 10.0);
    let line = |x0: f64, y0: f64, h: f64, len: f64| Path {
        start: [x0, y0],
        heading: h,
        pieces: vec![Piece::Line(len)],
    };
    match kind {
        WorldKind::Straight => Layout {
            ways: vec![line(-arm, 0.0, 0.0, 2.0 * arm)],
            tracks: vec![("straight".into(), line(-arm + NODE_SPACING, 0.0, 0.0, 2.0 * arm - 2.0 * NODE_SPACING))],
            crossing: false,
        },
        WorldKind::Intersection => {
            let r = 8.0 + rng.uniform(0.0, 3.0);
            let lead = arm - NODE_SPACING - r;
            let turn = |a: f64| Path {
                start: [-arm + NODE_SPACING, 0.0],
                heading: 0.0,
                pieces: vec![Piece::Line(lead), Piece::Arc(r, a), Piece::Line(lead)],
            };
            Layout {
                ways: vec![
                    line(-arm, 0.0, 0.0, arm),
                    line(0.0, 0.0, 0.0, arm),
                    line(0.0, 0.0, FRAC_PI_2, arm),
                    line(0.0, 0.0, -FRAC_PI_2, arm),
                ],
                tracks: vec![
                    ("left".into(), turn(FRAC_PI_2)),
                    ("straight".into(), line(-arm + NODE_SPACING, 0.0, 0.0, 2.0 * arm - 2.0 * NODE_SPACING)),
                    ("right".into(), turn(-FRAC_PI_2)),
                ],
                crossing: true,
            }
        }
        WorldKind::UTurn => {
            let r = 10.0 + rng.uniform(0.0, 4.0);
            let way = Path {
                start: [-arm, 0.0],
                heading: 0.0,
                pieces: vec![Piece::Line(arm), Piece::Arc(r, PI), Piece::Line(arm)],
            };
            let track = Path {
                start: [-arm + NODE_SPACING, 0.0],
                heading: 0.0,
                pieces: vec![Piece::Line(arm - NODE_SPACING), Piece::Arc(r, PI), Piece::Line(arm - NODE_SPACING)],
            };
            Layout {
                ways: vec![way],
                tracks: vec![("u_turn".into(), track)],
                crossing: false,
            }
        }
        WorldKind::Curve => {
            let r = 25.0 + rng.uniform(0.0, 15.0);
            let angle = rng.uniform(PI / 3.0, FRAC_PI_2) * if rng.below(2) == 0 { 1.0 } else { -1.0 };
            let pieces = |l: f64| vec![Piece::Line(l), Piece::Arc(r, angle), Piece::Line(l)];
            Layout {
                ways: vec![Path {
                    start: [-arm, 0.0],
                    heading: 0.0,
                    pieces: pieces(arm),
                }],
                tracks: vec![(
                    "curve".into(),
                    Path {
                        start: [-arm + NODE_SPACING, 0.0],
                        heading: 0.0,
                        pieces: pieces(arm - NODE_SPACING),
                    },
                )],
                crossing: false,
            }
        }
    }
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let l2 = dx * dx + dy * dy;
    let t = if l2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a[0] + t * dx - p[0]).hypot(a[1] + t * dy - p[1])
}

/// Paint the class grid from the distance to the nearest centerline.
/// Coordinates here are in the design frame (crossing at the origin).
fn paint_map(centerlines: &[Vec<[f64; 2]>], crossing: bool, shift: [f64; 2]) -> SemanticMap {
    let res = SCENE_RESOLUTION;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in centerlines.iter().flatten() {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d] - MAP_MARGIN);
            hi[d] = hi[d].max(p[d] + MAP_MARGIN);
        }
    }
    let rows = ((hi[0] - lo[0]) / res).ceil() as usize + 1;
    let cols = ((hi[1] - lo[1]) / res).ceil() as usize + 1;
    let center = |r: usize, c: usize| [hi[0] - r as f64 * res, hi[1] - c as f64 * res];

    let mut dist = vec![f64::INFINITY; rows * cols];
    let reach = SIDEWALK_OUTER + res;
    for line in centerlines {
        for w in line.windows(2) {
            let (a, b) = (w[0], w[1]);
            let r0 = ((hi[0] - a[0].max(b[0]) - reach) / res).floor().max(0.0) as usize;
            let r1 = (((hi[0] - a[0].min(b[0]) + reach) / res).ceil() as usize).min(rows - 1);
            let c0 = ((hi[1] - a[1].max(b[1]) - reach) / res).floor().max(0.0) as usize;
            let c1 = (((hi[1] - a[1].min(b[1]) + reach) / res).ceil() as usize).min(cols - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let d = seg_dist(center(r, c), a, b);
                    let slot = &mut dist[r * cols + c];
                    if d < *slot {
                        *slot = d;
                    }
                }
            }
        }
    }

    let in_box = |p: [f64; 2]| p[0].abs() <= ROAD_HALF_WIDTH && p[1].abs() <= ROAD_HALF_WIDTH;
    let in_crosswalk = |p: [f64; 2]| {
        let band = |u: f64| (6.0..=9.0).contains(&u.abs());
        (band(p[0]) && p[1].abs() <= ROAD_HALF_WIDTH) || (band(p[1]) && p[0].abs() <= ROAD_HALF_WIDTH)
    };
    let classes = (0..rows * cols)
        .map(|i| {
            let (d, p) = (dist[i], center(i / cols, i % cols));
            if d > SIDEWALK_OUTER {
                VEGETATION
            } else if d > ROAD_HALF_WIDTH {
                SIDEWALK
            } else if crossing && in_crosswalk(p) {
                CROSSWALK
            } else if d <= MARKING_HALF_WIDTH && !(crossing && in_box(p)) {
                MARKING
            } else {
                ROAD
            }
        })
        .collect();
    SemanticMap::new(
        rows,
        cols,
        classes,
        res,
        [hi[0] - shift[0], hi[1] - shift[1]],
        DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
    )
    .expect("painted map is valid by construction")
}

fn sample_track(path: &Path, shift: [f64; 2]) -> PoseTrack {
    let step = SPEED / RATE_HZ;
    let n = (path.length() / step + 1e-9).floor() as usize;
    let poses = (0..=n)
        .map(|k| {
            let (p, h) = path.at(k as f64 * step);
            TimedPose {
                t: k as f64 / RATE_HZ,
                pose: Pose2::new(p[0] - shift[0], p[1] - shift[1], h),
            }
        })
        .collect();
    PoseTrack { poses }
}

/// Generate a world of the given kind; the seed jitters lengths and radii.
///
/// Intersection worlds carry three tracks from the west approach: left,
/// straight and right. Every other kind carries one.
pub fn gen_synthetic_world(seed: u64, kind: WorldKind) -> SyntheticWorld {
    let mut rng = XorShift64::new(seed);
    let lay = layout(kind, &mut rng);

    // graph nodes every ~5 m; ways that meet at a point share a node
    let mut node_xy: Vec<[f64; 2]> = Vec::new();
    let mut way_nodes: Vec<Vec<usize>> = Vec::new();
    for way in &lay.ways {
        let pts = way.polyline(NODE_SPACING);
        let mut ids = Vec::with_capacity(pts.len());
        for p in pts {
            let existing = node_xy.iter().position(|q| (q[0] - p[0]).hypot(q[1] - p[1]) < 1e-6);
            ids.push(existing.unwrap_or_else(|| {
                node_xy.push(p);
                node_xy.len() - 1
            }));
        }
        way_nodes.push(ids);
    }
    let n = node_xy.len() as f64;
    let shift = [
        node_xy.iter().map(|p| p[0]).sum::<f64>() / n,
        node_xy.iter().map(|p| p[1]).sum::<f64>() / n,
    ];

    let node_id = |i: usize| 1000 + i as i64;
    let nodes: BTreeMap<i64, GeoPoint> = node_xy
        .iter()
        .enumerate()
        .map(|(i, p)| (node_id(i), unproject([p[0] - shift[0], p[1] - shift[1]], GEO_ANCHOR)))
        .collect();
    let ways: Vec<(i64, Vec<i64>)> = way_nodes
        .iter()
        .enumerate()
        .map(|(k, ids)| (k as i64 + 1, ids.iter().map(|&i| node_id(i)).collect()))
        .collect();
    let links: Vec<(i64, i64, i64)> = ways
        .iter()
        .flat_map(|(w, ids)| ids.windows(2).map(move |p| (p[0], p[1], *w)))
        .collect();
    let graph = RoadGraph::from_links(&nodes, &links).expect("synthetic graph is non-empty");

    let centerlines: Vec<Vec<[f64; 2]>> = lay.ways.iter().map(|w| w.polyline(0.5)).collect();
    let map = paint_map(&centerlines, lay.crossing, shift);

    let tracks = lay
        .tracks
        .iter()
        .map(|(name, path)| {
            let track = sample_track(path, shift);
            let route = super::route_for_track(&graph, &track).expect("synthetic ways are connected");
            SyntheticTrack {
                name: name.clone(),
                track,
                route,
            }
        })
        .collect();

    SyntheticWorld {
        kind,
        nodes,
        ways,
        graph,
        map,
        tracks,
    }
}
