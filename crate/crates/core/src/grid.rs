//! Grid topology, the normalized adjacency operator and overlap selection.
//!
//! Buses are dense integers `0..bus_count`. That ordering is the node
//! ordering of every tensor downstream (features, labels, adjacency).
//! Branches are stored once per undirected edge with `from_bus < to_bus`;
//! positive branch current flows from `from_bus` to `to_bus`.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Phases per bus. Fixed: everything is modelled in the abc frame.
pub const PHASES: usize = 3;

/// Nominal angular frequency used to convert reactances to inductances.
pub const OMEGA_60HZ: f64 = 2.0 * std::f64::consts::PI * 60.0;

/// Per-phase series R-L parameters of one branch.
///
/// Values are per-unit on a 1 Ω / 1 V base, so `resistance` reads directly as
/// ohms and `inductance` as henries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchParams {
    pub from_bus: usize,
    pub to_bus: usize,
    pub resistance: f64,
    pub inductance: f64,
}

impl BranchParams {
    pub fn new(from_bus: usize, to_bus: usize, resistance: f64, inductance: f64) -> Result<Self> {
        if from_bus == to_bus {
            return Err(Error::Topology(format!("branch ({from_bus},{to_bus}) is a self-loop")));
        }
        if !(resistance > 0.0 && resistance.is_finite()) {
            return Err(Error::Topology(format!(
                "branch ({from_bus},{to_bus}): resistance must be positive, got {resistance}"
            )));
        }
        if !(inductance > 0.0 && inductance.is_finite()) {
            return Err(Error::Topology(format!(
                "branch ({from_bus},{to_bus}): inductance must be positive, got {inductance}"
            )));
        }
        Ok(Self { from_bus, to_bus, resistance, inductance })
    }

    pub fn endpoints(&self) -> (usize, usize) {
        (self.from_bus, self.to_bus)
    }
}

/// Branch entry of the topology file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub l_henry: f64,
}

/// The topology file: `{bus_count, branches, sources, loads, overlap}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub bus_count: usize,
    pub branches: Vec<BranchSpec>,
    pub sources: Vec<usize>,
    pub loads: Vec<usize>,
    #[serde(default)]
    pub overlap: Vec<usize>,
}

impl TopologySpec {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// A validated grid graph with its bus role sets.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTopology {
    bus_count: usize,
    branches: Vec<BranchParams>,
    source_buses: Vec<usize>,
    load_buses: Vec<usize>,
    overlap_buses: Vec<usize>,
}

fn role_set(name: &str, ids: &[usize], bus_count: usize) -> Result<Vec<usize>> {
    let mut set = BTreeSet::new();
    for &id in ids {
        if id >= bus_count {
            return Err(Error::Topology(format!(
                "{name} bus {id} out of range for {bus_count} buses"
            )));
        }
        if !set.insert(id) {
            return Err(Error::Topology(format!("{name} bus {id} listed twice")));
        }
    }
    Ok(set.into_iter().collect())
}

/// Validates a topology spec and produces the canonical [`GridTopology`].
pub fn build_topology(spec: &TopologySpec) -> Result<GridTopology> {
    let n = spec.bus_count;
    if n == 0 {
        return Err(Error::Topology("bus_count must be positive".into()));
    }
    let mut seen = BTreeSet::new();
    let mut branches = Vec::with_capacity(spec.branches.len());
    for b in &spec.branches {
        if b.from >= n || b.to >= n {
            return Err(Error::Topology(format!(
                "branch ({},{}) has a dangling endpoint (bus_count {n})",
                b.from, b.to
            )));
        }
        let (lo, hi) = (b.from.min(b.to), b.from.max(b.to));
        let params = BranchParams::new(lo, hi, b.r_ohm, b.l_henry)?;
        if !seen.insert((lo, hi)) {
            return Err(Error::Topology(format!("duplicate edge ({lo},{hi})")));
        }
        branches.push(params);
    }

    let source_buses = role_set("source", &spec.sources, n)?;
    let load_buses = role_set("load", &spec.loads, n)?;
    let overlap_buses = role_set("overlap", &spec.overlap, n)?;
    if let Some(b) = source_buses.iter().find(|b| load_buses.binary_search(b).is_ok()) {
        return Err(Error::Topology(format!("bus {b} is both a source and a load")));
    }

    let g = GridTopology { bus_count: n, branches, source_buses, load_buses, overlap_buses };
    if !g.is_connected() {
        return Err(Error::Topology("branch graph is disconnected".into()));
    }
    Ok(g)
}

impl GridTopology {
    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    pub fn phase_count(&self) -> usize {
        PHASES
    }

    pub fn branches(&self) -> &[BranchParams] {
        &self.branches
    }

    pub fn source_buses(&self) -> &[usize] {
        &self.source_buses
    }

    pub fn load_buses(&self) -> &[usize] {
        &self.load_buses
    }

    /// Buses whose states form the label vector: the load buses, in id order.
    pub fn monitored_buses(&self) -> &[usize] {
        &self.load_buses
    }

    pub fn overlap_buses(&self) -> &[usize] {
        &self.overlap_buses
    }

    pub fn is_source(&self, bus: usize) -> bool {
        self.source_buses.binary_search(&bus).is_ok()
    }

    pub fn is_load(&self, bus: usize) -> bool {
        self.load_buses.binary_search(&bus).is_ok()
    }

    pub fn branch_index(&self, a: usize, b: usize) -> Option<usize> {
        let key = (a.min(b), a.max(b));
        self.branches.iter().position(|br| br.endpoints() == key)
    }

    pub fn neighbors(&self, bus: usize) -> impl Iterator<Item = usize> + '_ {
        self.branches.iter().filter_map(move |b| {
            if b.from_bus == bus {
                Some(b.to_bus)
            } else if b.to_bus == bus {
                Some(b.from_bus)
            } else {
                None
            }
        })
    }

    fn is_connected(&self) -> bool {
        let n = self.bus_count;
        let mut adj = vec![Vec::new(); n];
        for b in &self.branches {
            adj[b.from_bus].push(b.to_bus);
            adj[b.to_bus].push(b.from_bus);
        }
        let mut visited = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        visited[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == n
    }

    pub fn to_spec(&self) -> TopologySpec {
        TopologySpec {
            bus_count: self.bus_count,
            branches: self
                .branches
                .iter()
                .map(|b| BranchSpec {
                    from: b.from_bus,
                    to: b.to_bus,
                    r_ohm: b.resistance,
                    l_henry: b.inductance,
                })
                .collect(),
            sources: self.source_buses.clone(),
            loads: self.load_buses.clone(),
            overlap: self.overlap_buses.clone(),
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(&self.to_spec()).expect("topology serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Digest of the electrical network alone, ignoring the overlap set.
    pub fn network_digest(&self) -> String {
        let spec = TopologySpec { overlap: Vec::new(), ..self.to_spec() };
        let text = serde_json::to_string(&spec).expect("topology serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Relabels bus `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<GridTopology> {
        if perm.len() != self.bus_count {
            return Err(Error::Shape(format!(
                "permutation of length {} for {} buses",
                perm.len(),
                self.bus_count
            )));
        }
        let spec = self.to_spec();
        let map = |v: &Vec<usize>| v.iter().map(|&b| perm[b]).collect::<Vec<_>>();
        build_topology(&TopologySpec {
            bus_count: spec.bus_count,
            branches: spec
                .branches
                .iter()
                .map(|b| BranchSpec { from: perm[b.from], to: perm[b.to], ..b.clone() })
                .collect(),
            sources: map(&spec.sources),
            loads: map(&spec.loads),
            overlap: map(&spec.overlap),
        })
    }

    /// Same graph with a different overlap set.
    pub fn with_overlap(&self, overlap: &[usize]) -> Result<GridTopology> {
        let mut spec = self.to_spec();
        spec.overlap = overlap.to_vec();
        build_topology(&spec)
    }
}

/// Dense `D̃^{-1/2} (A + I) D̃^{-1/2}`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    data: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn from_dense(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!("adjacency data {} for {n}x{n}", data.len())));
        }
        Ok(Self { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

pub fn normalized_adjacency(g: &GridTopology) -> NormalizedAdjacency {
    let all: Vec<usize> = (0..g.bus_count()).collect();
    normalized_adjacency_on(g, &all)
}

/// Normalized adjacency of the subgraph induced by `buses`, rows in the
/// given order.
pub fn normalized_adjacency_on(g: &GridTopology, buses: &[usize]) -> NormalizedAdjacency {
    let n = buses.len();
    let row = |bus: usize| buses.iter().position(|&b| b == bus);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for b in g.branches() {
        if let (Some(i), Some(j)) = (row(b.from_bus), row(b.to_bus)) {
            a[i * n + j] = 1.0;
            a[j * n + i] = 1.0;
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    NormalizedAdjacency { n, data: a }
}

/// Ordered map from overlap bus ids to their row in the monitored output.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapSelector {
    entries: Vec<(usize, usize)>,
}

impl OverlapSelector {
    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(_, p)| p)
    }

    pub fn buses(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(b, _)| b)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position_of(&self, bus: usize) -> Option<usize> {
        self.entries.iter().find(|&&(b, _)| b == bus).map(|&(_, p)| p)
    }
}

/// Maps overlap buses onto monitored-output rows. An empty overlap set gives
/// an empty selector.
pub fn overlap_selector(g: &GridTopology) -> Result<OverlapSelector> {
    let monitored = g.monitored_buses();
    let entries = g
        .overlap_buses()
        .iter()
        .map(|&bus| {
            monitored
                .binary_search(&bus)
                .map(|pos| (bus, pos))
                .map_err(|_| Error::Topology(format!("overlap bus {bus} is not a monitored output bus")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OverlapSelector { entries })
}

/// Built-in feeders used for the desk-scale experiments.
pub mod synthetic {
    use super::*;

    fn branch(from: usize, to: usize, r: f64, x: f64) -> BranchSpec {
        BranchSpec { from, to, r_ohm: r, l_henry: x / OMEGA_60HZ }
    }

    /// Five-bus radial feeder: slack at bus 0, loads on 1..=4, instrumented
    /// branch (2,3).
    pub fn five_bus() -> TopologySpec {
        TopologySpec {
            bus_count: 5,
            branches: vec![
                branch(0, 1, 0.02, 0.06),
                branch(1, 2, 0.03, 0.09),
                branch(2, 3, 0.01, 0.03),
                branch(1, 4, 0.04, 0.12),
            ],
            sources: vec![0],
            loads: vec![1, 2, 3, 4],
            overlap: vec![2, 3],
        }
    }

    /// Random radial feeder with `n` buses; `extra_edges` chords make it meshed.
    ///
    /// Bus 0 is the source, every other bus carries a load and the overlap set
    /// is the endpoints of the last tree branch.
    pub fn random_feeder<R: Rng>(n: usize, extra_edges: usize, rng: &mut R) -> TopologySpec {
        assert!(n >= 2, "a feeder needs at least two buses");
        let mut branches = Vec::new();
        let mut edges = BTreeSet::new();
        let line = |rng: &mut R, a: usize, b: usize| {
            let r = rng.random_range(0.005..0.03);
            let x = r * rng.random_range(1.0..4.0);
            branch(a, b, r, x)
        };
        for k in 1..n {
            let parent = rng.random_range(0..k);
            edges.insert((parent, k));
            branches.push(line(rng, parent, k));
        }
        let mut attempts = 0;
        let mut added = 0;
        while added < extra_edges && attempts < 100 * (extra_edges + 1) {
            attempts += 1;
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            let key = (a.min(b), a.max(b));
            if a == b || edges.contains(&key) {
                continue;
            }
            edges.insert(key);
            branches.push(line(rng, key.0, key.1));
            added += 1;
        }
        let last = &branches[n - 2];
        let mut overlap = vec![last.from, last.to];
        overlap.retain(|&b| b != 0);
        overlap.sort_unstable();
        TopologySpec {
            bus_count: n,
            branches,
            sources: vec![0],
            loads: (1..n).collect(),
            overlap,
        }
    }
}
