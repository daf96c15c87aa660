//! Road network: nodes with WGS84 coordinates joined by undirected,
//! length-weighted segments.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    /// Identifier as it appeared in the node file.
    pub external_id: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub u: NodeId,
    pub v: NodeId,
    pub length_m: f64,
}

impl Segment {
    pub fn other(&self, n: NodeId) -> NodeId {
        if self.u == n {
            self.v
        } else {
            self.u
        }
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let dlat = (lat2 - lat1).to_radians();
    let dlon = (lon2 - lon1).to_radians();
    let a = (dlat / 2.0).sin().powi(2)
        + lat1.to_radians().cos() * lat2.to_radians().cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub segments: Vec<SegmentId>,
    pub distance_m: f64,
}

impl Path {
    pub fn empty() -> Self {
        Path {
            segments: Vec::new(),
            distance_m: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    segments: Vec<Segment>,
    adjacency: Vec<Vec<(NodeId, SegmentId)>>,
    pair_index: HashMap<(NodeId, NodeId), SegmentId>,
}

/// An edge record before validation. `length_m = None` means "use the
/// haversine distance between the endpoints".
#[derive(Debug, Clone)]
pub struct EdgeRecord {
    pub u: String,
    pub v: String,
    pub length_m: Option<f64>,
}

fn ordered(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl RoadNetwork {
    /// Validates and assembles a network. Node ids are made dense in
    /// record order; segment ids follow first appearance in `edges`.
    pub fn from_records(nodes: Vec<Node>, edges: &[EdgeRecord]) -> Result<Self> {
        let mut by_external: HashMap<&str, NodeId> = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if !n.lat.is_finite() || !n.lon.is_finite() {
                return Err(Error::malformed(format!(
                    "node record {} ({}): non-finite coordinates",
                    i + 1,
                    n.external_id
                )));
            }
            if by_external.insert(n.external_id.as_str(), NodeId(i)).is_some() {
                return Err(Error::malformed(format!(
                    "node record {}: duplicate node id {}",
                    i + 1,
                    n.external_id
                )));
            }
        }

        let mut segments: Vec<Segment> = Vec::new();
        let mut pair_index: HashMap<(NodeId, NodeId), SegmentId> = HashMap::new();
        for (i, e) in edges.iter().enumerate() {
            let lookup = |ext: &str| {
                by_external.get(ext).copied().ok_or_else(|| {
                    Error::malformed(format!(
                        "edge record {} ({},{}): dangling endpoint id {}",
                        i + 1,
                        e.u,
                        e.v,
                        ext
                    ))
                })
            };
            let u = lookup(&e.u)?;
            let v = lookup(&e.v)?;
            if u == v {
                return Err(Error::malformed(format!(
                    "edge record {} ({},{}): self-loop",
                    i + 1,
                    e.u,
                    e.v
                )));
            }
            let length_m = match e.length_m {
                Some(l) => l,
                None => {
                    let (a, b) = (&nodes[u.0], &nodes[v.0]);
                    haversine_m(a.lat, a.lon, b.lat, b.lon)
                }
            };
            if !(length_m.is_finite() && length_m > 0.0) {
                return Err(Error::malformed(format!(
                    "edge record {} ({},{}): non-positive length {}",
                    i + 1,
                    e.u,
                    e.v,
                    length_m
                )));
            }
            match pair_index.get(&ordered(u, v)) {
                Some(&sid) => {
                    let seg = &mut segments[sid.0];
                    if length_m < seg.length_m {
                        seg.length_m = length_m;
                    }
                }
                None => {
                    let sid = SegmentId(segments.len());
                    let (a, b) = ordered(u, v);
                    segments.push(Segment {
                        u: a,
                        v: b,
                        length_m,
                    });
                    pair_index.insert((a, b), sid);
                }
            }
        }

        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (i, s) in segments.iter().enumerate() {
            adjacency[s.u.0].push((s.v, SegmentId(i)));
            adjacency[s.v.0].push((s.u, SegmentId(i)));
        }
        for adj in &mut adjacency {
            adj.sort();
        }

        Ok(RoadNetwork {
            nodes,
            segments,
            adjacency,
            pair_index,
        })
    }

    /// Reads `node_id,lat,lon` and `u,v[,length_m]` CSV sources.
    pub fn load<N: Read, E: Read>(node_src: N, edge_src: E) -> Result<Self> {
        let nodes = read_nodes(node_src)?;
        let edges = read_edges(edge_src)?;
        Self::from_records(nodes, &edges)
    }

    pub fn load_files(
        nodes: impl AsRef<std::path::Path>,
        edges: impl AsRef<std::path::Path>,
    ) -> Result<Self> {
        let n = std::fs::File::open(nodes)?;
        let e = std::fs::File::open(edges)?;
        Self::load(n, e)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.segments[id.0]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn neighbors(&self, id: NodeId) -> &[(NodeId, SegmentId)] {
        &self.adjacency[id.0]
    }

    pub fn segment_between(&self, a: NodeId, b: NodeId) -> Option<SegmentId> {
        self.pair_index.get(&ordered(a, b)).copied()
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.length_m).collect()
    }

    pub fn total_length_m(&self) -> f64 {
        self.segments.iter().map(|s| s.length_m).sum()
    }

    /// Node closest to `(lat, lon)` by haversine distance; ties go to the
    /// smallest id.
    pub fn nearest_node(&self, lat: f64, lon: f64) -> Result<NodeId> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::malformed(format!(
                "non-finite query coordinates ({lat}, {lon})"
            )));
        }
        let mut best: Option<(f64, NodeId)> = None;
        for (i, n) in self.nodes.iter().enumerate() {
            let d = haversine_m(lat, lon, n.lat, n.lon);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, NodeId(i)));
            }
        }
        best.map(|(_, id)| id)
            .ok_or_else(|| Error::malformed("nearest_node on an empty network"))
    }

    /// Single-source distances from `root` to every node.
    pub fn shortest_path_tree(&self, root: NodeId) -> ShortestPathTree {
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        dist[root.0] = 0.0;
        heap.push(HeapEntry {
            dist: 0.0,
            node: root,
        });
        while let Some(HeapEntry { dist: d, node }) = heap.pop() {
            if d > dist[node.0] {
                continue;
            }
            for &(next, sid) in &self.adjacency[node.0] {
                let nd = d + self.segments[sid.0].length_m;
                if nd < dist[next.0] {
                    dist[next.0] = nd;
                    heap.push(HeapEntry {
                        dist: nd,
                        node: next,
                    });
                }
            }
        }
        ShortestPathTree { root, dist }
    }

    /// Minimum-length path; among equal-length paths the lexicographically
    /// smallest node sequence wins.
    pub fn shortest_path(&self, origin: NodeId, dest: NodeId) -> Result<Path> {
        self.check_node(origin)?;
        self.check_node(dest)?;
        if origin == dest {
            return Ok(Path::empty());
        }
        self.shortest_path_tree(dest).path_from(self, origin)
    }

    fn check_node(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::malformed(format!("node {} out of range", id.0)))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct HeapEntry {
    dist: f64,
    node: NodeId,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    // min-heap on distance, then node id
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Distances from every node to a fixed root. Paths are read off by
/// walking from an origin toward the root.
#[derive(Debug, Clone)]
pub struct ShortestPathTree {
    root: NodeId,
    dist: Vec<f64>,
}

impl ShortestPathTree {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn distance(&self, n: NodeId) -> f64 {
        self.dist[n.0]
    }

    /// Path from `origin` to the root. At every step the smallest neighbor
    /// that stays on some shortest path is taken, which yields the
    /// lexicographically smallest node sequence among shortest paths.
    pub fn path_from(&self, net: &RoadNetwork, origin: NodeId) -> Result<Path> {
        if !self.dist[origin.0].is_finite() {
            return Err(Error::NoPath {
                origin: origin.0,
                dest: self.root.0,
            });
        }
        let mut segments = Vec::new();
        let mut distance_m = 0.0;
        let mut at = origin;
        while at != self.root {
            let here = self.dist[at.0];
            let tol = 1e-9 * here.max(1.0);
            let (next, sid) = net.adjacency[at.0]
                .iter()
                .copied()
                .find(|&(n, sid)| {
                    let via = net.segments[sid.0].length_m + self.dist[n.0];
                    self.dist[n.0] < here && (via - here).abs() <= tol
                })
                .expect("a settled node always has a predecessor toward the root");
            distance_m += net.segments[sid.0].length_m;
            segments.push(sid);
            at = next;
        }
        Ok(Path {
            segments,
            distance_m,
        })
    }
}

/// Shortest-path trees for a fixed set of destinations, built up front so
/// lookups need no locking.
#[derive(Debug, Clone, Default)]
pub struct PathCache {
    trees: HashMap<NodeId, ShortestPathTree>,
}

impl PathCache {
    pub fn build(net: &RoadNetwork, dests: &[NodeId]) -> Self {
        let mut uniq = dests.to_vec();
        uniq.sort();
        uniq.dedup();
        let trees = uniq
            .par_iter()
            .map(|&d| (d, net.shortest_path_tree(d)))
            .collect();
        PathCache { trees }
    }

    pub fn tree(&self, dest: NodeId) -> Option<&ShortestPathTree> {
        self.trees.get(&dest)
    }

    /// Falls back to a fresh search for destinations not in the cache.
    pub fn path(&self, net: &RoadNetwork, origin: NodeId, dest: NodeId) -> Result<Path> {
        if origin == dest {
            return Ok(Path::empty());
        }
        match self.trees.get(&dest) {
            Some(t) => t.path_from(net, origin),
            None => net.shortest_path(origin, dest),
        }
    }
}

#[derive(Debug, Deserialize)]
struct NodeRow {
    node_id: String,
    lat: f64,
    lon: f64,
}

fn read_nodes<R: Read>(src: R) -> Result<Vec<Node>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(src);
    let headers = rdr.headers()?.clone();
    for col in ["node_id", "lat", "lon"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::malformed(format!("node file missing column {col}")));
        }
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<NodeRow>().enumerate() {
        let row = row.map_err(|e| Error::malformed(format!("node record {}: {e}", i + 1)))?;
        out.push(Node {
            external_id: row.node_id,
            lat: row.lat,
            lon: row.lon,
        });
    }
    Ok(out)
}

fn read_edges<R: Read>(src: R) -> Result<Vec<EdgeRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(src);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ui), Some(vi)) = (col("u"), col("v")) else {
        return Err(Error::malformed("edge file must have columns u,v"));
    };
    let li = col("length_m");
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::malformed(format!("edge record {}: {e}", i + 1)))?;
        let field = |idx: usize| rec.get(idx).unwrap_or("").to_string();
        let length_m = match li.map(|idx| rec.get(idx).unwrap_or("")) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<f64>().map_err(|_| {
                Error::malformed(format!("edge record {}: bad length {s:?}", i + 1))
            })?),
        };
        out.push(EdgeRecord {
            u: field(ui),
            v: field(vi),
            length_m,
        });
    }
    Ok(out)
}

/// Writes the node and edge files in the format `RoadNetwork::load` reads.
pub fn write_network<N: std::io::Write, E: std::io::Write>(
    net: &RoadNetwork,
    node_sink: N,
    edge_sink: E,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(node_sink);
    w.write_record(["node_id", "lat", "lon"])?;
    for n in &net.nodes {
        w.write_record([n.external_id.clone(), n.lat.to_string(), n.lon.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(edge_sink);
    w.write_record(["u", "v", "length_m"])?;
    for s in &net.segments {
        w.write_record([
            net.nodes[s.u.0].external_id.clone(),
            net.nodes[s.v.0].external_id.clone(),
            s.length_m.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
