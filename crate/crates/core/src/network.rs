//! Road networks, zone-to-zone shortest-path times and detour costs.
//!
//! Networks are read from the TNTP text format. Link times are the free-flow
//! time column; congestion parameters are parsed past and ignored. Links are
//! directed exactly as listed.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type NodeId = u32;

/// Ordered pair of zones: a driver's origin-destination or a task's
/// pickup-delivery locations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ZonePair(pub NodeId, pub NodeId);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub tail: NodeId,
    pub head: NodeId,
    /// Minutes.
    pub time: f64,
}

#[derive(Clone, Debug)]
pub struct Network {
    nodes: Vec<NodeId>,
    links: Vec<Link>,
    zones: Vec<NodeId>,
    position: HashMap<NodeId, usize>,
}

impl Network {
    pub fn new(nodes: Vec<NodeId>, links: Vec<Link>, zones: Vec<NodeId>) -> Result<Self> {
        let mut position = HashMap::with_capacity(nodes.len());
        for (i, &n) in nodes.iter().enumerate() {
            if position.insert(n, i).is_some() {
                return Err(Error::Validation(format!("duplicate node id {n}")));
            }
        }
        for (i, l) in links.iter().enumerate() {
            for end in [l.tail, l.head] {
                if !position.contains_key(&end) {
                    return Err(Error::Validation(format!(
                        "link {} ({} -> {}) references unknown node {end}",
                        i + 1,
                        l.tail,
                        l.head
                    )));
                }
            }
            if !(l.time >= 0.0 && l.time.is_finite()) {
                return Err(Error::Validation(format!(
                    "link {} ({} -> {}) has invalid time {}",
                    i + 1,
                    l.tail,
                    l.head,
                    l.time
                )));
            }
        }
        for z in &zones {
            if !position.contains_key(z) {
                return Err(Error::Validation(format!("zone {z} is not a node")));
            }
        }
        Ok(Network {
            nodes,
            links,
            zones,
            position,
        })
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn zones(&self) -> &[NodeId] {
        &self.zones
    }

    /// Same network with every link reversed.
    pub fn reversed(&self) -> Network {
        let links = self
            .links
            .iter()
            .map(|l| Link {
                tail: l.head,
                head: l.tail,
                time: l.time,
            })
            .collect();
        Network {
            nodes: self.nodes.clone(),
            links,
            zones: self.zones.clone(),
            position: self.position.clone(),
        }
    }

    /// Forward star: (head position, time) per tail position.
    fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for l in &self.links {
            adj[self.position[&l.tail]].push((self.position[&l.head], l.time));
        }
        adj
    }

    /// Shortest times from `source` to every node, indexed like [`Network::nodes`].
    /// Unreachable nodes get `f64::INFINITY`.
    pub fn shortest_times_from(&self, source: NodeId) -> Result<Vec<f64>> {
        let src = *self
            .position
            .get(&source)
            .ok_or_else(|| Error::Validation(format!("unknown source node {source}")))?;
        Ok(dijkstra(&self.adjacency(), src))
    }

    pub fn node_position(&self, node: NodeId) -> Option<usize> {
        self.position.get(&node).copied()
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Label {
    dist: f64,
    node: usize,
}

impl Eq for Label {}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(adj: &[Vec<(usize, f64)>], src: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Label { dist: 0.0, node: src });
    while let Some(Label { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, time) in &adj[node] {
            let nd = d + time;
            if nd < dist[next] {
                dist[next] = nd;
                heap.push(Label { dist: nd, node: next });
            }
        }
    }
    dist
}

/// Shortest-path minutes between every ordered pair of zones.
#[derive(Clone, Debug, PartialEq)]
pub struct TravelTimeMatrix {
    zones: Vec<NodeId>,
    times: Vec<f64>,
    index: HashMap<NodeId, usize>,
}

impl TravelTimeMatrix {
    pub fn from_rows(zones: Vec<NodeId>, times: Vec<f64>) -> Result<Self> {
        let z = zones.len();
        if times.len() != z * z {
            return Err(Error::Validation(format!(
                "travel time table has {} entries for {z} zones",
                times.len()
            )));
        }
        let index = zones.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        Ok(TravelTimeMatrix { zones, times, index })
    }

    pub fn zones(&self) -> &[NodeId] {
        &self.zones
    }

    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    /// Time between zones by position in [`TravelTimeMatrix::zones`].
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.times[i * self.zones.len() + j]
    }

    /// Time between two zone node ids.
    ///
    /// Panics if either node is not a zone.
    pub fn time(&self, from: NodeId, to: NodeId) -> f64 {
        let i = self.index[&from];
        let j = self.index[&to];
        self.at(i, j)
    }

    pub fn pair_time(&self, pair: ZonePair) -> f64 {
        self.time(pair.0, pair.1)
    }

    /// Ordered zone pairs with distinct endpoints and positive time.
    pub fn candidate_pairs(&self) -> Vec<ZonePair> {
        let z = self.zones.len();
        let mut out = Vec::new();
        for i in 0..z {
            for j in 0..z {
                if i != j && self.at(i, j) > 0.0 {
                    out.push(ZonePair(self.zones[i], self.zones[j]));
                }
            }
        }
        out
    }
}

/// Shortest-path times between all ordered zone pairs, one label-setting
/// search per origin zone (run in parallel).
///
/// Fails with [`Error::Unreachable`] if any zone cannot reach another zone.
pub fn all_zone_times(net: &Network) -> Result<TravelTimeMatrix> {
    let adj = net.adjacency();
    let zone_pos: Vec<usize> = net.zones.iter().map(|z| net.position[z]).collect();
    let rows: Vec<Vec<f64>> = zone_pos
        .par_iter()
        .map(|&src| {
            let dist = dijkstra(&adj, src);
            zone_pos.iter().map(|&dst| dist[dst]).collect()
        })
        .collect();

    let mut unreachable = Vec::new();
    let mut total = 0;
    for (i, row) in rows.iter().enumerate() {
        for (j, t) in row.iter().enumerate() {
            if !t.is_finite() {
                total += 1;
                if unreachable.len() < 20 {
                    unreachable.push((net.zones[i], net.zones[j]));
                }
            }
        }
    }
    if total > 0 {
        return Err(Error::Unreachable {
            pairs: unreachable,
            total,
        });
    }
    TravelTimeMatrix::from_rows(net.zones.clone(), rows.concat())
}

/// Extra minutes a driver travelling `od` spends to serve a task `rs`:
/// `t[o][r] + t[r][s] + t[s][d] - t[o][d]`.
pub fn detour_cost(t: &TravelTimeMatrix, od: ZonePair, rs: ZonePair) -> f64 {
    let raw = t.time(od.0, rs.0) + t.time(rs.0, rs.1) + t.time(rs.1, od.1) - t.time(od.0, od.1);
    debug_assert!(raw > -1e-9, "triangle inequality violated: {raw}");
    // Rounding in the four-term sum can dip a hair below zero.
    raw.max(0.0)
}

/// Reads a TNTP `_net.tntp` file.
pub fn parse_tntp(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_tntp_str(&text, path)
}

/// Parses TNTP network text. `origin` is only used in error messages.
pub fn parse_tntp_str(text: &str, origin: &Path) -> Result<Network> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };

    let mut num_zones = None;
    let mut num_nodes = None;
    let mut num_links = None;
    let mut lines = text.lines().enumerate();
    let mut metadata_done = false;

    for (i, raw) in lines.by_ref() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('~') {
            continue;
        }
        if !line.starts_with('<') {
            return Err(err(i + 1, format!("expected metadata tag, found {line:?}")));
        }
        let close = line
            .find('>')
            .ok_or_else(|| err(i + 1, format!("unterminated metadata tag {line:?}")))?;
        let tag = line[1..close].trim().to_ascii_uppercase();
        let value = line[close + 1..].trim();
        let count = || {
            value
                .parse::<usize>()
                .map_err(|_| err(i + 1, format!("bad value {value:?} for <{tag}>")))
        };
        match tag.as_str() {
            "NUMBER OF ZONES" => num_zones = Some(count()?),
            "NUMBER OF NODES" => num_nodes = Some(count()?),
            "NUMBER OF LINKS" => num_links = Some(count()?),
            "END OF METADATA" => {
                metadata_done = true;
                break;
            }
            _ => {}
        }
    }

    let end = text.lines().count();
    if !metadata_done {
        return Err(err(end, "missing <END OF METADATA>".into()));
    }
    let num_zones = num_zones.ok_or_else(|| err(end, "missing <NUMBER OF ZONES>".into()))?;
    let num_nodes = num_nodes.ok_or_else(|| err(end, "missing <NUMBER OF NODES>".into()))?;
    let num_links = num_links.ok_or_else(|| err(end, "missing <NUMBER OF LINKS>".into()))?;
    if num_zones > num_nodes {
        return Err(Error::Validation(format!(
            "{num_zones} zones declared but only {num_nodes} nodes"
        )));
    }

    let mut links = Vec::with_capacity(num_links);
    for (i, raw) in lines {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('~') {
            continue;
        }
        let body = line.split(';').next().unwrap_or("");
        let cols: Vec<&str> = body.split_whitespace().collect();
        if cols.len() < 5 {
            return Err(err(
                i + 1,
                format!("link row needs at least 5 columns, found {}", cols.len()),
            ));
        }
        let node = |s: &str| {
            s.parse::<NodeId>()
                .map_err(|_| err(i + 1, format!("bad node id {s:?}")))
        };
        let tail = node(cols[0])?;
        let head = node(cols[1])?;
        let time = cols[4]
            .parse::<f64>()
            .map_err(|_| err(i + 1, format!("bad free flow time {:?}", cols[4])))?;
        links.push(Link { tail, head, time });
    }
    if links.len() != num_links {
        return Err(err(
            end,
            format!("{} link rows but <NUMBER OF LINKS> is {num_links}", links.len()),
        ));
    }

    let nodes: Vec<NodeId> = (1..=num_nodes as NodeId).collect();
    let zones = nodes[..num_zones].to_vec();
    Network::new(nodes, links, zones)
}

/// Writes the network in TNTP form. Nodes must be `1..=n` with zones first,
/// which is what [`parse_tntp`] produces.
pub fn write_tntp(net: &Network) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "<NUMBER OF ZONES> {}", net.zones.len());
    let _ = writeln!(out, "<NUMBER OF NODES> {}", net.nodes.len());
    let _ = writeln!(out, "<FIRST THRU NODE> 1");
    let _ = writeln!(out, "<NUMBER OF LINKS> {}", net.links.len());
    let _ = writeln!(out, "<END OF METADATA>");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "~\tinit node\tterm node\tcapacity\tlength\tfree flow time\tb\tpower\tspeed limit\ttoll\ttype\t;"
    );
    for l in &net.links {
        // Full precision so a round trip reproduces the times exactly.
        let _ = writeln!(
            out,
            "\t{}\t{}\t1000.0\t{:?}\t{:?}\t0.15\t4\t50\t0\t1\t;",
            l.tail, l.head, l.time, l.time
        );
    }
    out
}

/// Shape of a generated stand-in road network.
#[derive(Clone, Debug)]
pub struct SyntheticNetworkParams {
    pub num_nodes: usize,
    /// Undirected roads; each becomes two directed links.
    pub num_roads: usize,
    pub num_zones: usize,
    /// Side of the square service area, km.
    pub extent_km: f64,
    pub speed_kmh: f64,
    pub seed: u64,
}

impl SyntheticNetworkParams {
    /// Same node, link and zone counts as the Winnipeg benchmark network.
    pub fn winnipeg_scale(seed: u64) -> Self {
        SyntheticNetworkParams {
            num_nodes: 1052,
            num_roads: 1418,
            num_zones: 147,
            extent_km: 25.0,
            speed_kmh: 50.0,
            seed,
        }
    }
}

/// Builds a connected, symmetric road network: random intersections in a
/// square, joined by their Euclidean spanning tree plus the shortest
/// remaining nearest-neighbour chords. Nodes are `1..=n`, zones first.
pub fn synthetic_network(p: &SyntheticNetworkParams) -> Result<Network> {
    let n = p.num_nodes;
    if n < 2 || p.num_zones > n || p.num_roads < n - 1 {
        return Err(Error::Config(format!(
            "cannot build a connected network with {n} nodes, {} roads, {} zones",
            p.num_roads, p.num_zones
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.random::<f64>() * p.extent_km,
                rng.random::<f64>() * p.extent_km,
            )
        })
        .collect();
    let dist = |a: usize, b: usize| ((pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2)).sqrt();

    // Prim's algorithm, dense O(n^2).
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut roads: Vec<(usize, usize)> = Vec::with_capacity(p.num_roads);
    best[0] = 0.0;
    for _ in 0..n {
        let u = (0..n)
            .filter(|&i| !in_tree[i])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]))
            .expect("nodes remain");
        in_tree[u] = true;
        if parent[u] != usize::MAX {
            roads.push((parent[u].min(u), parent[u].max(u)));
        }
        for v in 0..n {
            if !in_tree[v] {
                let d = dist(u, v);
                if d < best[v] {
                    best[v] = d;
                    parent[v] = u;
                }
            }
        }
    }

    let mut existing: std::collections::HashSet<(usize, usize)> = roads.iter().copied().collect();
    let mut chords = Vec::new();
    for u in 0..n {
        let mut near: Vec<usize> = (0..n).filter(|&v| v != u).collect();
        near.sort_by(|&a, &b| dist(u, a).total_cmp(&dist(u, b)));
        for &v in near.iter().take(6) {
            let key = (u.min(v), u.max(v));
            if !existing.contains(&key) {
                chords.push((dist(u, v), key));
            }
        }
    }
    chords.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, key) in chords {
        if roads.len() >= p.num_roads {
            break;
        }
        if existing.insert(key) {
            roads.push(key);
        }
    }
    if roads.len() < p.num_roads {
        return Err(Error::Config(format!(
            "only {} roads available, {} requested",
            roads.len(),
            p.num_roads
        )));
    }

    let mut links = Vec::with_capacity(2 * roads.len());
    for &(a, b) in &roads {
        // Winding factor so link times are not purely Euclidean.
        let winding = 1.0 + 0.3 * rng.random::<f64>();
        let time = dist(a, b) * winding / p.speed_kmh * 60.0;
        links.push(Link {
            tail: a as NodeId + 1,
            head: b as NodeId + 1,
            time,
        });
        links.push(Link {
            tail: b as NodeId + 1,
            head: a as NodeId + 1,
            time,
        });
    }
    let nodes: Vec<NodeId> = (1..=n as NodeId).collect();
    let zones = nodes[..p.num_zones].to_vec();
    Network::new(nodes, links, zones)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_abc() -> Network {
        let l = |tail, head| Link { tail, head, time: 1.0 };
        Network::new(
            vec![1, 2, 3],
            vec![l(1, 2), l(2, 1), l(2, 3), l(3, 2)],
            vec![1, 2, 3],
        )
        .unwrap()
    }

    #[test]
    fn line_network_times() {
        let t = all_zone_times(&line_abc()).unwrap();
        assert_eq!(t.time(1, 3), 2.0);
        for z in [1, 2, 3] {
            assert_eq!(t.time(z, z), 0.0);
        }
    }

    #[test]
    fn detour_examples() {
        let t = all_zone_times(&line_abc()).unwrap();
        assert_eq!(detour_cost(&t, ZonePair(1, 2), ZonePair(1, 2)), 0.0);
        assert_eq!(detour_cost(&t, ZonePair(1, 3), ZonePair(2, 3)), 0.0);
        assert_eq!(detour_cost(&t, ZonePair(1, 2), ZonePair(2, 3)), 2.0);
    }

    const MINIMAL: &str = "<NUMBER OF ZONES> 2\n<NUMBER OF NODES> 2\n<FIRST THRU NODE> 1\n<NUMBER OF LINKS> 1\n<END OF METADATA>\n\n~ init term cap len fft b power speed toll type ;\n\t1\t2\t100\t1\t4\t0.15\t4\t0\t0\t1\t;\n";

    #[test]
    fn minimal_file() {
        let net = parse_tntp_str(MINIMAL, Path::new("mini.tntp")).unwrap();
        assert_eq!(net.nodes().len(), 2);
        assert_eq!(net.zones(), &[1, 2]);
        assert_eq!(net.links()[0].time, 4.0);
        let from1 = net.shortest_times_from(1).unwrap();
        assert_eq!(from1[net.node_position(2).unwrap()], 4.0);
        // 2 -> 1 has no path.
        match all_zone_times(&net) {
            Err(Error::Unreachable { pairs, total }) => {
                assert_eq!(total, 1);
                assert_eq!(pairs, vec![(2, 1)]);
            }
            other => panic!("expected unreachable error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_node_rejected() {
        let text = MINIMAL.replace("\t1\t2\t100", "\t1\t999\t100");
        assert!(matches!(
            parse_tntp_str(&text, Path::new("bad.tntp")),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn garbled_header_names_line() {
        let text = MINIMAL.replace("<NUMBER OF NODES> 2", "<NUMBER OF NODES> two");
        match parse_tntp_str(&text, Path::new("bad.tntp")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("<END OF METADATA>", "");
        assert!(matches!(
            parse_tntp_str(&text, Path::new("bad.tntp")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn negative_time_rejected() {
        let r = Network::new(vec![1, 2], vec![Link { tail: 1, head: 2, time: -1.0 }], vec![1]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn tntp_round_trip_small_synthetic() {
        let p = SyntheticNetworkParams {
            num_nodes: 40,
            num_roads: 60,
            num_zones: 10,
            extent_km: 5.0,
            speed_kmh: 40.0,
            seed: 3,
        };
        let net = synthetic_network(&p).unwrap();
        assert_eq!(net.links().len(), 120);
        let back = parse_tntp_str(&write_tntp(&net), Path::new("rt")).unwrap();
        assert_eq!(back.links(), net.links());
        assert_eq!(back.zones(), net.zones());
        assert_eq!(all_zone_times(&back).unwrap(), all_zone_times(&net).unwrap());
    }
}
