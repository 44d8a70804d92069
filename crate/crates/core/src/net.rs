//! Static network description: nodes, links, OD pairs, the time grid, path sets and the
//! flat-vector layout shared by every other module.
//!
//! All flat indices are 0-based. For `K` OD pairs, `P` paths, `A` links and interval `h`:
//!
//! | entity | position      |
//! |--------|---------------|
//! | OD     | `h * K + od`  |
//! | path   | `h * P + k`   |
//! | link   | `h * A + a`   |

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform discretization of the study period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    num_intervals: usize,
    interval_length: f64,
}

impl TimeGrid {
    pub fn new(num_intervals: usize, interval_length: f64) -> Result<Self> {
        if num_intervals == 0 {
            return Err(Error::Validation("time grid needs at least one interval".into()));
        }
        if !(interval_length > 0.0 && interval_length.is_finite()) {
            return Err(Error::Validation(format!(
                "interval length must be positive, got {interval_length}"
            )));
        }
        Ok(Self {
            num_intervals,
            interval_length,
        })
    }

    pub fn num_intervals(&self) -> usize {
        self.num_intervals
    }

    /// Seconds per interval.
    pub fn interval_length(&self) -> f64 {
        self.interval_length
    }

    /// End of the study period in seconds.
    pub fn horizon(&self) -> f64 {
        self.num_intervals as f64 * self.interval_length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: i64,
    /// Index into [`Network::node_ids`].
    pub from: usize,
    pub to: usize,
    /// Miles.
    pub length: f64,
    /// Miles per hour.
    pub free_flow_speed: f64,
    /// Vehicles per hour.
    pub capacity: f64,
    /// OD connectors carry no delay and no capacity restriction.
    pub is_connector: bool,
    /// Jam density in vehicles per mile. Parsed and kept, never enforced (no spillback).
    pub jam_density: Option<f64>,
}

impl Link {
    /// Free-flow traversal time in seconds; zero for connectors.
    pub fn free_flow_time(&self) -> f64 {
        if self.is_connector {
            0.0
        } else {
            self.length / self.free_flow_speed * 3600.0
        }
    }

    /// Discharge rate in vehicles per second; infinite for connectors.
    pub fn capacity_per_second(&self) -> f64 {
        if self.is_connector {
            f64::INFINITY
        } else {
            self.capacity / 3600.0
        }
    }
}

/// Link attributes as they appear in a network file, before node ids are resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub id: i64,
    pub from: i64,
    pub to: i64,
    pub length: f64,
    pub free_flow_speed: f64,
    pub capacity: f64,
    pub is_connector: bool,
    pub jam_density: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OdPair {
    /// Node index of the origin.
    pub origin: usize,
    /// Node index of the destination.
    pub destination: usize,
}

#[derive(Debug, Clone)]
pub struct Network {
    node_ids: Vec<i64>,
    links: Vec<Link>,
    od_pairs: Vec<OdPair>,
    node_lookup: HashMap<i64, usize>,
    link_lookup: HashMap<i64, usize>,
    out_links: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(node_ids: Vec<i64>, links: Vec<LinkSpec>, od_pairs: Vec<(i64, i64)>) -> Result<Self> {
        let mut node_lookup = HashMap::with_capacity(node_ids.len());
        for (idx, &id) in node_ids.iter().enumerate() {
            if node_lookup.insert(id, idx).is_some() {
                return Err(Error::Validation(format!("duplicate node id {id}")));
            }
        }
        let node = |id: i64, what: &str| {
            node_lookup
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Validation(format!("{what} references missing node {id}")))
        };

        let mut link_lookup = HashMap::with_capacity(links.len());
        let mut resolved = Vec::with_capacity(links.len());
        for spec in links {
            let what = format!("link {}", spec.id);
            let from = node(spec.from, &what)?;
            let to = node(spec.to, &what)?;
            if from == to {
                return Err(Error::Validation(format!("{what} is a self-loop")));
            }
            for (name, v) in [
                ("length", spec.length),
                ("free-flow speed", spec.free_flow_speed),
                ("capacity", spec.capacity),
            ] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Validation(format!("{what}: {name} must be positive, got {v}")));
                }
            }
            if let Some(k) = spec.jam_density {
                if !(k >= 0.0 && k.is_finite()) {
                    return Err(Error::Validation(format!("{what}: jam density must be nonnegative")));
                }
            }
            if link_lookup.insert(spec.id, resolved.len()).is_some() {
                return Err(Error::Validation(format!("duplicate link id {}", spec.id)));
            }
            resolved.push(Link {
                id: spec.id,
                from,
                to,
                length: spec.length,
                free_flow_speed: spec.free_flow_speed,
                capacity: spec.capacity,
                is_connector: spec.is_connector,
                jam_density: spec.jam_density,
            });
        }

        let mut ods = Vec::with_capacity(od_pairs.len());
        for (o, d) in od_pairs {
            let origin = node(o, "OD pair")?;
            let destination = node(d, "OD pair")?;
            if origin == destination {
                return Err(Error::Validation(format!("OD pair {o} -> {d} has identical ends")));
            }
            ods.push(OdPair {
                origin,
                destination,
            });
        }
        if ods.is_empty() {
            return Err(Error::Validation("network declares no OD pairs".into()));
        }

        let mut out_links = vec![Vec::new(); node_ids.len()];
        for (a, link) in resolved.iter().enumerate() {
            out_links[link.from].push(a);
        }

        Ok(Self {
            node_ids,
            links: resolved,
            od_pairs: ods,
            node_lookup,
            link_lookup,
            out_links,
        })
    }

    pub fn node_ids(&self) -> &[i64] {
        &self.node_ids
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn od_pairs(&self) -> &[OdPair] {
        &self.od_pairs
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn num_od(&self) -> usize {
        self.od_pairs.len()
    }

    pub fn node_index(&self, id: i64) -> Option<usize> {
        self.node_lookup.get(&id).copied()
    }

    pub fn link_index(&self, id: i64) -> Option<usize> {
        self.link_lookup.get(&id).copied()
    }

    pub fn out_links(&self, node: usize) -> &[usize] {
        &self.out_links[node]
    }

    /// Parses the sectioned CSV format (`[nodes]`, `[links]`, `[od_pairs]`).
    pub fn from_csv_str(text: &str, source: &str) -> Result<Self> {
        let sections = split_sections(text, source)?;
        let get = |name: &str| {
            sections
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| Error::Parse {
                    path: source.to_string(),
                    line: 0,
                    msg: format!("missing [{name}] section"),
                })
        };
        let nodes = parse_nodes(&get("nodes")?.body, source, get("nodes")?.first_line)?;
        let links = parse_links(&get("links")?.body, source, get("links")?.first_line)?;
        let ods = parse_od_pairs(&get("od_pairs")?.body, source, get("od_pairs")?.first_line)?;
        Network::new(nodes, links, ods)
    }

    /// Serializes back to the sectioned CSV format.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("[nodes]\nid\n");
        for id in &self.node_ids {
            let _ = writeln!(out, "{id}");
        }
        out.push_str("\n[links]\nid,from,to,length_miles,vff_mph,cap_vph,connector,jam_density_vpm\n");
        for l in &self.links {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                l.id,
                self.node_ids[l.from],
                self.node_ids[l.to],
                l.length,
                l.free_flow_speed,
                l.capacity,
                u8::from(l.is_connector),
                l.jam_density.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        out.push_str("\n[od_pairs]\norigin,destination\n");
        for od in &self.od_pairs {
            let _ = writeln!(out, "{},{}", self.node_ids[od.origin], self.node_ids[od.destination]);
        }
        out
    }
}

/// Reads a network either from one sectioned CSV file or from a directory holding
/// `nodes.csv`, `links.csv` and `od_pairs.csv`.
pub fn load_network(path: impl AsRef<FsPath>) -> Result<Network> {
    let path = path.as_ref();
    if path.is_dir() {
        let read = |name: &str| {
            let p = path.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e)).map(|t| (t, p))
        };
        let (nodes, np) = read("nodes.csv")?;
        let (links, lp) = read("links.csv")?;
        let (ods, op) = read("od_pairs.csv")?;
        let nodes = parse_nodes(&nodes, &np.display().to_string(), 1)?;
        let links = parse_links(&links, &lp.display().to_string(), 1)?;
        let ods = parse_od_pairs(&ods, &op.display().to_string(), 1)?;
        return Network::new(nodes, links, ods);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Network::from_csv_str(&text, &path.display().to_string())
}

struct Section {
    name: String,
    first_line: usize,
    body: String,
}

fn split_sections(text: &str, source: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            sections.push(Section {
                name: name.trim().to_ascii_lowercase(),
                first_line: i + 2,
                body: String::new(),
            });
            continue;
        }
        match sections.last_mut() {
            Some(s) => {
                if s.body.is_empty() {
                    s.first_line = i + 1;
                }
                s.body.push_str(line);
                s.body.push('\n');
            }
            None => {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    msg: "content before the first [section] header".into(),
                })
            }
        }
    }
    Ok(sections)
}

fn records(body: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(body.as_bytes())
}

fn field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    idx: usize,
    name: &str,
    source: &str,
    line: usize,
) -> Result<T> {
    let raw = rec.get(idx).ok_or_else(|| Error::Parse {
        path: source.to_string(),
        line,
        msg: format!("missing column `{name}`"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        path: source.to_string(),
        line,
        msg: format!("cannot parse `{name}` from {raw:?}"),
    })
}

fn line_of(rec: &csv::StringRecord, first_line: usize) -> usize {
    // Record line numbers are 1-based and include the header row.
    rec.position().map(|p| p.line() as usize - 1 + first_line).unwrap_or(first_line)
}

fn parse_nodes(body: &str, source: &str, first_line: usize) -> Result<Vec<i64>> {
    let mut out = Vec::new();
    for rec in records(body).records() {
        let rec = rec?;
        out.push(field(&rec, 0, "id", source, line_of(&rec, first_line))?);
    }
    Ok(out)
}

fn parse_flag(raw: &str) -> Option<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Some(true),
        "0" | "false" | "no" | "n" | "" => Some(false),
        _ => None,
    }
}

fn parse_links(body: &str, source: &str, first_line: usize) -> Result<Vec<LinkSpec>> {
    let mut out = Vec::new();
    for rec in records(body).records() {
        let rec = rec?;
        let line = line_of(&rec, first_line);
        if rec.len() < 7 {
            return Err(Error::Parse {
                path: source.to_string(),
                line,
                msg: format!("expected at least 7 columns, found {}", rec.len()),
            });
        }
        let is_connector = parse_flag(&rec[6]).ok_or_else(|| Error::Parse {
            path: source.to_string(),
            line,
            msg: format!("bad connector flag {:?}", &rec[6]),
        })?;
        let jam_density = match rec.get(7).filter(|s| !s.is_empty()) {
            Some(_) => Some(field(&rec, 7, "jam_density_vpm", source, line)?),
            None => None,
        };
        out.push(LinkSpec {
            id: field(&rec, 0, "id", source, line)?,
            from: field(&rec, 1, "from", source, line)?,
            to: field(&rec, 2, "to", source, line)?,
            length: field(&rec, 3, "length_miles", source, line)?,
            free_flow_speed: field(&rec, 4, "vff_mph", source, line)?,
            capacity: field(&rec, 5, "cap_vph", source, line)?,
            is_connector,
            jam_density,
        });
    }
    Ok(out)
}

fn parse_od_pairs(body: &str, source: &str, first_line: usize) -> Result<Vec<(i64, i64)>> {
    let mut out = Vec::new();
    for rec in records(body).records() {
        let rec = rec?;
        let line = line_of(&rec, first_line);
        out.push((
            field(&rec, 0, "origin", source, line)?,
            field(&rec, 1, "destination", source, line)?,
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Path {
    pub od: usize,
    /// Link indices from origin to destination.
    pub links: Vec<usize>,
}

/// Ordered path set. Paths of the same OD pair are contiguous only by convention;
/// use [`PathTable::paths_of`] for grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTable {
    paths: Vec<Path>,
    by_od: Vec<Vec<usize>>,
}

impl PathTable {
    /// Validates each path against the network: node-contiguous, loop-free, joining its
    /// OD pair's ends; every OD pair needs at least one path.
    pub fn new(net: &Network, paths: Vec<Path>) -> Result<Self> {
        let mut by_od = vec![Vec::new(); net.num_od()];
        for (k, p) in paths.iter().enumerate() {
            let od = net.od_pairs().get(p.od).ok_or_else(|| {
                Error::Validation(format!("path {k} references OD index {} out of range", p.od))
            })?;
            check_path(net, od, &p.links).map_err(|m| Error::Validation(format!("path {k}: {m}")))?;
            by_od[p.od].push(k);
        }
        for (od, ks) in by_od.iter().enumerate() {
            if ks.is_empty() {
                let pair = net.od_pairs()[od];
                return Err(Error::NoPath {
                    od,
                    origin: net.node_ids()[pair.origin],
                    destination: net.node_ids()[pair.destination],
                });
            }
        }
        Ok(Self { paths, by_od })
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths_of(&self, od: usize) -> &[usize] {
        &self.by_od[od]
    }

    pub fn free_flow_time(&self, net: &Network, k: usize) -> f64 {
        self.paths[k].links.iter().map(|&a| net.links()[a].free_flow_time()).sum()
    }

    /// Reads a paths file: one path per line, `od_index,link_id,link_id,...`.
    pub fn load(net: &Network, path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(net, &text, &path.display().to_string())
    }

    pub fn parse(net: &Network, text: &str, source: &str) -> Result<Self> {
        let mut paths = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            let mut cols = line.split(',').map(str::trim);
            let od: usize = cols
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("missing OD index".into()))?;
            let mut links = Vec::new();
            for c in cols {
                let id: i64 = c.parse().map_err(|_| err(format!("bad link id {c:?}")))?;
                links.push(net.link_index(id).ok_or_else(|| err(format!("unknown link id {id}")))?);
            }
            if links.is_empty() {
                return Err(err("path without links".into()));
            }
            paths.push(Path { od, links });
        }
        PathTable::new(net, paths)
    }

    pub fn to_file_string(&self, net: &Network) -> String {
        let mut out = String::from("# od_index,link_id,...\n");
        for p in &self.paths {
            let _ = write!(out, "{}", p.od);
            for &a in &p.links {
                let _ = write!(out, ",{}", net.links()[a].id);
            }
            out.push('\n');
        }
        out
    }
}

fn check_path(net: &Network, od: &OdPair, links: &[usize]) -> std::result::Result<(), String> {
    if links.is_empty() {
        return Err("empty link sequence".into());
    }
    let mut node = od.origin;
    let mut seen = HashSet::from([node]);
    for &a in links {
        let link = net.links().get(a).ok_or_else(|| format!("link index {a} out of range"))?;
        if link.from != node {
            return Err(format!("link {} does not start at node {}", link.id, net.node_ids()[node]));
        }
        node = link.to;
        if !seen.insert(node) {
            return Err(format!("revisits node {}", net.node_ids()[node]));
        }
    }
    if node != od.destination {
        return Err("does not end at the OD destination".into());
    }
    Ok(())
}

/// Ordering key for path costs: microsecond resolution, so float noise between
/// equal-cost routes does not defeat the lexicographic tie-break.
fn cost_key(cost: f64) -> i64 {
    (cost * 1e6).round() as i64
}

#[derive(PartialEq)]
struct HeapItem {
    cost: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn shortest_path(
    net: &Network,
    from: usize,
    to: usize,
    banned_nodes: &[bool],
    banned_links: &HashSet<usize>,
) -> Option<Vec<usize>> {
    let n = net.num_nodes();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[from] = 0.0;
    heap.push(HeapItem { cost: 0.0, node: from });
    while let Some(HeapItem { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        if node == to {
            break;
        }
        for &a in net.out_links(node) {
            let link = &net.links()[a];
            if banned_links.contains(&a) || banned_nodes[link.to] {
                continue;
            }
            let c = cost + link.free_flow_time();
            let better = c < dist[link.to]
                || (c == dist[link.to] && pred[link.to].is_some_and(|p| net.links()[a].id < net.links()[p].id));
            if better {
                dist[link.to] = c;
                pred[link.to] = Some(a);
                heap.push(HeapItem { cost: c, node: link.to });
            }
        }
    }
    if !dist[to].is_finite() {
        return None;
    }
    let mut links = Vec::new();
    let mut node = to;
    while node != from {
        let a = pred[node]?;
        links.push(a);
        node = net.links()[a].from;
    }
    links.reverse();
    Some(links)
}

fn k_shortest(net: &Network, od: &OdPair, k: usize) -> Vec<Vec<usize>> {
    let cost = |p: &[usize]| -> f64 { p.iter().map(|&a| net.links()[a].free_flow_time()).sum() };
    let ids = |p: &[usize]| -> Vec<i64> { p.iter().map(|&a| net.links()[a].id).collect() };
    let key = |p: &[usize]| (cost_key(cost(p)), ids(p));

    let no_nodes = vec![false; net.num_nodes()];
    let Some(first) = shortest_path(net, od.origin, od.destination, &no_nodes, &HashSet::new()) else {
        return Vec::new();
    };
    let mut accepted: Vec<Vec<usize>> = vec![first];
    let mut known: HashSet<Vec<usize>> = accepted.iter().cloned().collect();
    let mut candidates: Vec<((i64, Vec<i64>), Vec<usize>)> = Vec::new();

    loop {
        let prev = accepted.last().unwrap().clone();
        for i in 0..prev.len() {
            let root = &prev[..i];
            let spur_node = if i == 0 { od.origin } else { net.links()[prev[i - 1]].to };
            let banned_links: HashSet<usize> = accepted
                .iter()
                .filter(|p| p.len() > i && &p[..i] == root)
                .map(|p| p[i])
                .collect();
            let mut banned_nodes = vec![false; net.num_nodes()];
            banned_nodes[od.origin] = true;
            for &a in root {
                banned_nodes[net.links()[a].to] = true;
            }
            banned_nodes[spur_node] = false;
            if let Some(spur) = shortest_path(net, spur_node, od.destination, &banned_nodes, &banned_links) {
                let mut total = root.to_vec();
                total.extend(spur);
                if known.insert(total.clone()) {
                    candidates.push((key(&total), total));
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        let best = candidates
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .0.cmp(&b.1 .0))
            .map(|(i, _)| i)
            .unwrap();
        let (best_key, path) = candidates.swap_remove(best);
        if accepted.len() >= k {
            // Keep popping only while the cost ties with the k-th accepted path.
            let kth = cost_key(cost(&accepted[k - 1]));
            if best_key.0 > kth {
                break;
            }
        }
        accepted.push(path);
    }
    accepted.sort_by_cached_key(|p| key(p));
    accepted.truncate(k);
    accepted
}

/// Up to `max_paths_per_od` loop-free paths per OD pair, shortest free-flow time first,
/// ties broken by the lexicographic order of link ids.
pub fn enumerate_paths(net: &Network, max_paths_per_od: usize) -> Result<PathTable> {
    if max_paths_per_od == 0 {
        return Err(Error::Validation("max_paths_per_od must be positive".into()));
    }
    let mut paths = Vec::new();
    for (od, pair) in net.od_pairs().iter().enumerate() {
        let found = k_shortest(net, pair, max_paths_per_od);
        if found.is_empty() {
            return Err(Error::NoPath {
                od,
                origin: net.node_ids()[pair.origin],
                destination: net.node_ids()[pair.destination],
            });
        }
        paths.extend(found.into_iter().map(|links| Path { od, links }));
    }
    PathTable::new(net, paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Entity {
    Od,
    Path,
    Link,
}

/// Sizes of every flat vector; maps `(entity, id, interval)` to positions and back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub num_intervals: usize,
    pub num_od: usize,
    pub num_paths: usize,
    pub num_links: usize,
}

impl Layout {
    pub fn new(net: &Network, paths: &PathTable, grid: &TimeGrid) -> Self {
        Self {
            num_intervals: grid.num_intervals(),
            num_od: net.num_od(),
            num_paths: paths.len(),
            num_links: net.num_links(),
        }
    }

    fn width(&self, entity: Entity) -> usize {
        match entity {
            Entity::Od => self.num_od,
            Entity::Path => self.num_paths,
            Entity::Link => self.num_links,
        }
    }

    /// Length of the flat vector for `entity` (e.g. `N * K` for OD vectors).
    pub fn len(&self, entity: Entity) -> usize {
        self.num_intervals * self.width(entity)
    }

    pub fn flat_index(&self, entity: Entity, id: usize, interval: usize) -> Result<usize> {
        let w = self.width(entity);
        if id >= w {
            return Err(Error::OutOfRange(format!("{entity:?} id {id} (have {w})")));
        }
        if interval >= self.num_intervals {
            return Err(Error::OutOfRange(format!(
                "interval {interval} (have {})",
                self.num_intervals
            )));
        }
        Ok(interval * w + id)
    }

    /// Inverse of [`Layout::flat_index`]: returns `(id, interval)`.
    pub fn entry(&self, entity: Entity, position: usize) -> Result<(usize, usize)> {
        let w = self.width(entity);
        if position >= self.len(entity) {
            return Err(Error::OutOfRange(format!("{entity:?} position {position}")));
        }
        Ok((position % w, position / w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: i64, from: i64, to: i64, vff: f64) -> LinkSpec {
        LinkSpec {
            id,
            from,
            to,
            length: 0.5,
            free_flow_speed: vff,
            capacity: 2000.0,
            is_connector: false,
            jam_density: None,
        }
    }

    pub(crate) fn diamond() -> Network {
        // 1 -> 2 -> 4 and 1 -> 3 -> 4; the lower route is faster.
        Network::new(
            vec![1, 2, 3, 4],
            vec![spec(1, 1, 2, 30.0), spec(2, 2, 4, 30.0), spec(3, 1, 3, 45.0), spec(4, 3, 4, 45.0)],
            vec![(1, 4)],
        )
        .unwrap()
    }

    #[test]
    fn minimal_network_parses() {
        let text = "[nodes]\nid\n1\n2\n\n[links]\nid,from,to,length_miles,vff_mph,cap_vph,connector\n\
                    7,1,2,0.5,30,2000,0\n\n[od_pairs]\norigin,destination\n1,2\n";
        let net = Network::from_csv_str(text, "mem").unwrap();
        assert_eq!(net.num_links(), 1);
        assert_eq!(net.links()[0].free_flow_time(), 60.0);
        let paths = enumerate_paths(&net, 5).unwrap();
        assert_eq!(paths.len(), 1);
    }

    #[test]
    fn missing_node_is_rejected() {
        let text = "[nodes]\nid\n1\n2\n[links]\nid,from,to,length_miles,vff_mph,cap_vph,connector\n\
                    1,1,99,0.5,30,2000,0\n[od_pairs]\norigin,destination\n1,2\n";
        let err = Network::from_csv_str(text, "mem").unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("99")), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "[nodes]\nid\n1\n2\n[links]\nid,from,to,length_miles,vff_mph,cap_vph,connector\n\
                    1,1,2,abc,30,2000,0\n[od_pairs]\norigin,destination\n1,2\n";
        match Network::from_csv_str(text, "mem").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 7),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn nonpositive_capacity_is_rejected() {
        let mut l = spec(1, 1, 2, 30.0);
        l.capacity = 0.0;
        assert!(Network::new(vec![1, 2], vec![l], vec![(1, 2)]).is_err());
    }

    #[test]
    fn diamond_paths_ordered_by_free_flow_time() {
        let net = diamond();
        let pt = enumerate_paths(&net, 5).unwrap();
        let ids: Vec<Vec<i64>> = pt
            .paths()
            .iter()
            .map(|p| p.links.iter().map(|&a| net.links()[a].id).collect())
            .collect();
        assert_eq!(ids, vec![vec![3, 4], vec![1, 2]]);
    }

    #[test]
    fn equal_cost_routes_break_ties_lexicographically() {
        let net = Network::new(
            vec![1, 2, 3, 4],
            vec![spec(9, 1, 3, 30.0), spec(4, 3, 4, 30.0), spec(5, 1, 2, 30.0), spec(6, 2, 4, 30.0)],
            vec![(1, 4)],
        )
        .unwrap();
        let pt = enumerate_paths(&net, 5).unwrap();
        let first: Vec<i64> = pt.paths()[0].links.iter().map(|&a| net.links()[a].id).collect();
        assert_eq!(first, vec![5, 6]);
    }

    #[test]
    fn disconnected_od_errors() {
        let net = Network::new(vec![1, 2, 3], vec![spec(1, 1, 2, 30.0)], vec![(1, 3)]).unwrap();
        assert!(matches!(enumerate_paths(&net, 3), Err(Error::NoPath { od: 0, .. })));
    }

    #[test]
    fn flat_index_examples() {
        let layout = Layout {
            num_intervals: 10,
            num_od: 3,
            num_paths: 29,
            num_links: 27,
        };
        assert_eq!(layout.flat_index(Entity::Od, 0, 0).unwrap(), 0);
        assert_eq!(layout.flat_index(Entity::Od, 1, 1).unwrap(), 4);
        assert!(layout.flat_index(Entity::Link, 1, 10).is_err());
        assert!(layout.flat_index(Entity::Path, 29, 0).is_err());
    }

    #[test]
    fn flat_index_round_trips() {
        let layout = Layout {
            num_intervals: 4,
            num_od: 3,
            num_paths: 5,
            num_links: 7,
        };
        for entity in [Entity::Od, Entity::Path, Entity::Link] {
            let mut seen = HashSet::new();
            for pos in 0..layout.len(entity) {
                let (id, h) = layout.entry(entity, pos).unwrap();
                assert_eq!(layout.flat_index(entity, id, h).unwrap(), pos);
                assert!(seen.insert((id, h)));
            }
        }
    }

    #[test]
    fn paths_file_round_trip() {
        let net = diamond();
        let pt = enumerate_paths(&net, 5).unwrap();
        let text = pt.to_file_string(&net);
        assert_eq!(PathTable::parse(&net, &text, "mem").unwrap(), pt);
    }

    #[test]
    fn paths_file_rejects_broken_path() {
        let net = diamond();
        assert!(PathTable::parse(&net, "0,1,4\n", "mem").is_err());
    }
}
