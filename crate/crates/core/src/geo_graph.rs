//! OpenStreetMap road graphs: parsing, local metric projection, snapping and
//! Dijkstra routing.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};
use serde::{Deserialize, Serialize};

/// Mean Earth radius used for both projection and haversine lengths.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("malformed OSM XML: {0}")]
    MalformedXml(String),
    #[error("way {way} references unknown node {node}")]
    DanglingRef { way: i64, node: i64 },
    #[error("graph is empty (no highway ways)")]
    EmptyGraph,
    #[error("no route from node {src} to node {dst}")]
    NoRoute { src: i64, dst: i64 },
    #[error("unknown node id {0}")]
    UnknownNode(i64),
    #[error("invalid coordinate lat={lat} lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
}

/// WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GraphError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(GraphError::InvalidCoordinate { lat, lon });
        }
        Ok(Self { lat, lon })
    }
}

/// Equirectangular projection of `p` into meters around `origin`.
pub fn project(p: GeoPoint, origin: GeoPoint) -> [f64; 2] {
    let x = EARTH_RADIUS_M * (p.lon - origin.lon).to_radians() * origin.lat.to_radians().cos();
    let y = EARTH_RADIUS_M * (p.lat - origin.lat).to_radians();
    [x, y]
}

/// Inverse of [`project`].
pub fn unproject(xy: [f64; 2], origin: GeoPoint) -> GeoPoint {
    let lat = origin.lat + (xy[1] / EARTH_RADIUS_M).to_degrees();
    let lon = origin.lon + (xy[0] / (EARTH_RADIUS_M * origin.lat.to_radians().cos())).to_degrees();
    GeoPoint { lat, lon }
}

/// Great-circle distance in meters.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: i64,
    pub geo: GeoPoint,
    pub xy: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphEdge {
    /// Node indices (not OSM ids) into [`RoadGraph::nodes`].
    pub a: usize,
    pub b: usize,
    pub length: f64,
    pub way_id: i64,
}

/// Undirected road graph in a local metric frame. Nodes are sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    origin: GeoPoint,
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
    index: HashMap<i64, usize>,
    /// `adjacency[i]` holds `(neighbor, edge index)` sorted by neighbor id.
    adjacency: Vec<Vec<(usize, usize)>>,
}

/// A shortest path as OSM node ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub node_ids: Vec<i64>,
    #[serde(rename = "total_length_m")]
    pub total_length: f64,
}

impl Route {
    pub fn empty() -> Self {
        Self {
            node_ids: Vec::new(),
            total_length: 0.0,
        }
    }
}

impl RoadGraph {
    /// Build from geographic nodes and undirected `(id, id, way)` links.
    ///
    /// Nodes are projected around their centroid, and each link weighs its
    /// haversine length. Self-loops, zero-length and repeated links are dropped.
    pub fn from_links(nodes: &BTreeMap<i64, GeoPoint>, links: &[(i64, i64, i64)]) -> Result<Self, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::EmptyGraph);
        }
        let n = nodes.len() as f64;
        let (slat, slon) = nodes.values().fold((0.0, 0.0), |(a, b), p| (a + p.lat, b + p.lon));
        let origin = GeoPoint {
            lat: slat / n,
            lon: slon / n,
        };
        let graph_nodes: Vec<GraphNode> = nodes
            .iter()
            .map(|(&id, &geo)| GraphNode {
                id,
                geo,
                xy: project(geo, origin),
            })
            .collect();
        let index: HashMap<i64, usize> = graph_nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();

        let mut seen = BTreeSet::new();
        let mut edges = Vec::new();
        let mut adjacency = vec![Vec::new(); graph_nodes.len()];
        for &(u, v, way_id) in links {
            let a = *index.get(&u).ok_or(GraphError::UnknownNode(u))?;
            let b = *index.get(&v).ok_or(GraphError::UnknownNode(v))?;
            if a == b || !seen.insert((a.min(b), a.max(b))) {
                continue;
            }
            let length = haversine(graph_nodes[a].geo, graph_nodes[b].geo);
            if length <= 0.0 {
                continue;
            }
            adjacency[a].push((b, edges.len()));
            adjacency[b].push((a, edges.len()));
            edges.push(GraphEdge { a, b, length, way_id });
        }
        for list in &mut adjacency {
            list.sort_unstable_by_key(|&(nb, _)| nb);
        }
        Ok(Self {
            origin,
            nodes: graph_nodes,
            edges,
            index,
            adjacency,
        })
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn node(&self, id: i64) -> Option<&GraphNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, id: i64) -> bool {
        self.index.contains_key(&id)
    }

    /// Length of the edge between two node ids, if adjacent.
    pub fn edge_length(&self, u: i64, v: i64) -> Option<f64> {
        let (a, b) = (*self.index.get(&u)?, *self.index.get(&v)?);
        self.adjacency[a]
            .iter()
            .find(|&&(nb, _)| nb == b)
            .map(|&(_, e)| self.edges[e].length)
    }

    /// Neighbors of `id` with edge lengths, in ascending id order.
    pub fn neighbors(&self, id: i64) -> impl Iterator<Item = (i64, f64)> + '_ {
        let list = self.index.get(&id).map_or(&[][..], |&i| &self.adjacency[i][..]);
        list.iter().map(|&(nb, e)| (self.nodes[nb].id, self.edges[e].length))
    }

    /// Node closest to `xy`; ties go to the smaller id.
    pub fn nearest_node(&self, xy: [f64; 2]) -> Result<i64, GraphError> {
        // nodes are id-sorted, so strict `<` keeps the smallest id on ties
        let mut best: Option<(f64, i64)> = None;
        for n in &self.nodes {
            let d = (n.xy[0] - xy[0]).powi(2) + (n.xy[1] - xy[1]).powi(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, n.id));
            }
        }
        best.map(|(_, id)| id).ok_or(GraphError::EmptyGraph)
    }

    /// Dijkstra from `src` to `dst`.
    ///
    /// Path cost is the left-to-right sum of edge lengths from `src`. Among
    /// paths of equal cost the lexicographically smallest id sequence wins.
    pub fn shortest_path(&self, src: i64, dst: i64) -> Result<Route, GraphError> {
        let s = *self.index.get(&src).ok_or(GraphError::UnknownNode(src))?;
        let t = *self.index.get(&dst).ok_or(GraphError::UnknownNode(dst))?;
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred: Vec<Option<usize>> = vec![None; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[s] = 0.0;
        heap.push(HeapEntry { cost: 0.0, node: s });
        while let Some(HeapEntry { cost, node: u }) = heap.pop() {
            if done[u] || cost > dist[u] {
                continue;
            }
            done[u] = true;
            if u == t {
                break;
            }
            for &(v, e) in &self.adjacency[u] {
                if done[v] {
                    continue;
                }
                let nd = dist[u] + self.edges[e].length;
                let better = match nd.partial_cmp(&dist[v]) {
                    Some(Ordering::Less) => true,
                    Some(Ordering::Equal) => self.path_via_is_smaller(&pred, u, v),
                    _ => false,
                };
                if better {
                    dist[v] = nd;
                    pred[v] = Some(u);
                    heap.push(HeapEntry { cost: nd, node: v });
                }
            }
        }
        if !dist[t].is_finite() {
            return Err(GraphError::NoRoute { src, dst });
        }
        let mut path = vec![self.nodes[t].id];
        let mut cur = t;
        while let Some(p) = pred[cur] {
            path.push(self.nodes[p].id);
            cur = p;
        }
        path.reverse();
        Ok(Route {
            node_ids: path,
            total_length: dist[t],
        })
    }

    fn id_path(&self, pred: &[Option<usize>], end: usize) -> Vec<i64> {
        let mut path = vec![self.nodes[end].id];
        let mut cur = end;
        while let Some(p) = pred[cur] {
            path.push(self.nodes[p].id);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Whether reaching `v` through `u` beats `v`'s current predecessor in
    /// lexicographic id order.
    fn path_via_is_smaller(&self, pred: &[Option<usize>], u: usize, v: usize) -> bool {
        let Some(current) = pred[v] else { return false };
        let mut via = self.id_path(pred, u);
        via.push(self.nodes[v].id);
        let mut existing = self.id_path(pred, current);
        existing.push(self.nodes[v].id);
        via < existing
    }

    /// Sum of edge lengths along `route`, or `None` if a hop is not an edge.
    pub fn route_length(&self, node_ids: &[i64]) -> Option<f64> {
        node_ids
            .windows(2)
            .try_fold(0.0, |acc, w| self.edge_length(w[0], w[1]).map(|l| acc + l))
    }
}

#[derive(Debug, PartialEq)]
struct HeapEntry {
    cost: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then node index
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn attr(e: &BytesStart<'_>, key: &str) -> Result<Option<String>, GraphError> {
    for a in e.attributes() {
        let a = a.map_err(|err| GraphError::MalformedXml(err.to_string()))?;
        if a.key.0 == key {
            let v = a.normalized_value(XmlVersion::Implicit1_0).map_err(|err| GraphError::MalformedXml(err.to_string()))?;
            return Ok(Some(v.into_owned()));
        }
    }
    Ok(None)
}

fn parse_num<T: std::str::FromStr>(e: &BytesStart<'_>, key: &str) -> Result<T, GraphError> {
    let raw = attr(e, key)?.ok_or_else(|| {
        GraphError::MalformedXml(format!(
            "<{}> missing attribute '{}'",
            e.name().0,
            key
        ))
    })?;
    raw.trim()
        .parse()
        .map_err(|_| GraphError::MalformedXml(format!("bad value '{raw}' for '{key}'")))
}

#[derive(Default)]
struct WayBuilder {
    id: i64,
    refs: Vec<i64>,
    highway: bool,
}

/// Parse the node/way/nd/tag subset of OSM XML into a [`RoadGraph`].
///
/// Only ways tagged `highway` are kept, and only nodes they reference end up
/// in the graph. Each consecutive `nd` pair of a kept way becomes an edge.
pub fn parse_osm(xml: &str) -> Result<RoadGraph, GraphError> {
    let mut reader = Reader::from_str(xml);
    reader.config_mut().check_end_names = true;

    let mut all_nodes: HashMap<i64, GeoPoint> = HashMap::new();
    let mut ways: Vec<WayBuilder> = Vec::new();
    let mut current: Option<WayBuilder> = None;
    let mut depth: usize = 0;

    loop {
        let ev = reader
            .read_event()
            .map_err(|e| GraphError::MalformedXml(format!("at byte {}: {e}", reader.error_position())))?;
        let (e, is_empty) = match &ev {
            Event::Start(e) => {
                depth += 1;
                (e, false)
            }
            Event::Empty(e) => (e, true),
            Event::End(e) => {
                depth = depth.checked_sub(1).ok_or_else(|| GraphError::MalformedXml("unbalanced end tag".into()))?;
                if e.name().0 == "way" {
                    if let Some(w) = current.take() {
                        ways.push(w);
                    }
                }
                continue;
            }
            Event::Eof => break,
            _ => continue,
        };
        match e.name().0 {
            "node" => {
                let id: i64 = parse_num(e, "id")?;
                let lat: f64 = parse_num(e, "lat")?;
                let lon: f64 = parse_num(e, "lon")?;
                let p = GeoPoint::new(lat, lon).map_err(|err| GraphError::MalformedXml(err.to_string()))?;
                all_nodes.insert(id, p);
            }
            "way" => {
                let w = WayBuilder {
                    id: parse_num(e, "id")?,
                    ..Default::default()
                };
                if is_empty {
                    ways.push(w);
                } else {
                    current = Some(w);
                }
            }
            "nd" => {
                if let Some(w) = current.as_mut() {
                    w.refs.push(parse_num(e, "ref")?);
                }
            }
            "tag" => {
                if let Some(w) = current.as_mut() {
                    if attr(e, "k")?.as_deref() == Some("highway") {
                        w.highway = true;
                    }
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(GraphError::MalformedXml("unexpected end of document".into()));
    }

    let mut kept: BTreeMap<i64, GeoPoint> = BTreeMap::new();
    let mut links = Vec::new();
    for w in ways.iter().filter(|w| w.highway) {
        for &r in &w.refs {
            let p = all_nodes.get(&r).ok_or(GraphError::DanglingRef { way: w.id, node: r })?;
            kept.insert(r, *p);
        }
        links.extend(w.refs.windows(2).map(|p| (p[0], p[1], w.id)));
    }
    if kept.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    RoadGraph::from_links(&kept, &links)
}

/// Serialize a graph's nodes and ways back to OSM XML. Each way is a list
/// of node ids; all ways are tagged `highway=residential`.
pub fn write_osm(nodes: &BTreeMap<i64, GeoPoint>, ways: &[(i64, Vec<i64>)]) -> String {
    let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<osm version=\"0.6\" generator=\"trident\">\n");
    for (id, p) in nodes {
        s.push_str(&format!("  <node id=\"{id}\" lat=\"{}\" lon=\"{}\"/>\n", p.lat, p.lon));
    }
    for (id, refs) in ways {
        s.push_str(&format!("  <way id=\"{id}\">\n"));
        for r in refs {
            s.push_str(&format!("    <nd ref=\"{r}\"/>\n"));
        }
        s.push_str("    <tag k=\"highway\" v=\"residential\"/>\n  </way>\n");
    }
    s.push_str("</osm>\n");
    s
}
