//! Fixtures shared by the benchmarks in `benches/`.

use std::collections::BTreeMap;

use trident_core::geo_graph::{GeoPoint, RoadGraph};

/// `n × n` lattice of nodes roughly 20 m apart, linked to their right and
/// lower neighbours.
pub fn grid_graph(n: usize) -> RoadGraph {
    let id = |r: usize, c: usize| (r * n + c) as i64 + 1;
    let mut nodes = BTreeMap::new();
    let mut links = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let p = GeoPoint::new(32.88 + r as f64 * 1.8e-4, -117.23 + c as f64 * 2.1e-4).expect("valid lattice point");
            nodes.insert(id(r, c), p);
            if c + 1 < n {
                links.push((id(r, c), id(r, c + 1), 1));
            }
            if r + 1 < n {
                links.push((id(r, c), id(r + 1, c), 2));
            }
        }
    }
    RoadGraph::from_links(&nodes, &links).expect("lattice is non-empty")
}
