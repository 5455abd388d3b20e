//! Graph-based channel reconstruction and collision resolution: minimum
//! weight path search over the tree-decoded paths jointly with quantized
//! offsets, path validation, collision tests and SIC.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;

use crate::analysis::np_threshold;
use crate::channel::cfo_phase;
use crate::config::{ChannelKind, SystemConfig};
use crate::encoder::{TreeCode, TreeDecodeResult};
use crate::{CMatrix, Result};

/// Codeword-domain block of one codeword index, with the number of
/// supported delay rows merged into it.
#[derive(Debug, Clone)]
pub struct ReconstructedBlock {
    pub block: CMatrix,
    pub rows: usize,
}

/// Per-codeword frequency-domain blocks `S x M` from the supported rows of
/// a delay-domain estimate.
pub fn reconstruct_fd_channels(
    x: &CMatrix,
    support: &[usize],
    cfg: &SystemConfig,
) -> BTreeMap<usize, ReconstructedBlock> {
    let n = cfg.n_codewords();
    let nf = cfg.n_fft;
    let sc = 1.0 / (nf as f64).sqrt();
    let mut out: BTreeMap<usize, ReconstructedBlock> = BTreeMap::new();
    for &row in support {
        let (codeword, tap) = (row % n + 1, row / n);
        let e = out.entry(codeword).or_insert_with(|| ReconstructedBlock {
            block: CMatrix::zeros(cfg.n_sub(), x.ncols()),
            rows: 0,
        });
        e.rows += 1;
        for (r, &s) in cfg.occupied.iter().enumerate() {
            let f = Complex64::from_polar(sc, -2.0 * PI * (((s - 1) * tap) % nf) as f64 / nf as f64);
            for m in 0..x.ncols() {
                e.block[(r, m)] += x[(row, m)] * f;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    /// 1-based codeword index.
    pub index: usize,
    pub block: CMatrix,
    /// Per-entry error variance of the block estimate.
    pub err_var: f64,
}

/// Candidate `(TO, CFO)` pairs, TO-major. FSF graphs carry a single zero TO.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetGrid {
    pub to: Vec<usize>,
    pub cfo: Vec<f64>,
}

impl OffsetGrid {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        let to = match cfg.channel_kind {
            ChannelKind::Flat => cfg.to_grid.clone(),
            ChannelKind::Fsf => vec![0],
        };
        Self {
            to,
            cfo: cfg.cfo_grid.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.to.len() * self.cfo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pair(&self, k: usize) -> (usize, f64) {
        (self.to[k / self.cfo.len()], self.cfo[k % self.cfo.len()])
    }
}

/// Rotation `q` of a node in slot `t` (1-based) for one grid pair. Flat
/// graphs include the TO phase of the node's subcarrier.
pub fn node_rotation(cfg: &SystemConfig, t: usize, index: usize, to: usize, eps: f64) -> Complex64 {
    let c = cfo_phase(eps, t, cfg);
    match cfg.channel_kind {
        ChannelKind::Fsf => c,
        ChannelKind::Flat => {
            let s = cfg.occupied[index - 1];
            let ph = ((s - 1) * to % cfg.n_fft) as f64;
            c * Complex64::from_polar(1.0, -2.0 * PI * ph / cfg.n_fft as f64)
        }
    }
}

fn inner(a: &CMatrix, b: &CMatrix) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

fn energy(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// Nodes per stage, tree-decoded paths, and the cached pairwise statistics
/// the weights are computed from.
#[derive(Debug, Clone)]
pub struct DecodingGraph {
    pub stages: Vec<Vec<GraphNode>>,
    /// Node positions per stage, lexicographic in the codeword indices.
    pub paths: Vec<Vec<usize>>,
    pub collided: Vec<Vec<bool>>,
    pub grid: OffsetGrid,
    /// `rot[t][node][k]`.
    rot: Vec<Vec<Vec<Complex64>>>,
    energy: Vec<Vec<f64>>,
    /// `cross[(i, j)][a][b] = <B_{i,a}, B_{j,b}>` for `i < j`.
    cross: BTreeMap<(usize, usize), Vec<Vec<Complex64>>>,
}

impl DecodingGraph {
    /// Builds the graph from per-stage nodes (any order) and index paths.
    pub fn new(mut stages: Vec<Vec<GraphNode>>, index_paths: &[Vec<usize>], cfg: &SystemConfig) -> Self {
        for s in &mut stages {
            s.sort_by_key(|n| n.index);
            s.dedup_by_key(|n| n.index);
        }
        let mut paths: Vec<Vec<usize>> = index_paths
            .iter()
            .filter_map(|p| {
                p.iter()
                    .enumerate()
                    .map(|(t, &d)| stages[t].binary_search_by_key(&d, |n| n.index).ok())
                    .collect::<Option<Vec<usize>>>()
            })
            .collect();
        paths.sort();
        paths.dedup();
        let grid = OffsetGrid::from_config(cfg);
        let rot = stages
            .iter()
            .enumerate()
            .map(|(t, s)| {
                s.iter()
                    .map(|n| {
                        (0..grid.len())
                            .map(|k| {
                                let (to, eps) = grid.pair(k);
                                node_rotation(cfg, t + 1, n.index, to, eps)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let energy = stages
            .iter()
            .map(|s| s.iter().map(|n| energy(&n.block)).collect())
            .collect();
        let mut cross = BTreeMap::new();
        let tp = stages.len();
        for i in 0..tp {
            for j in i + 1..tp {
                let m: Vec<Vec<Complex64>> = stages[i]
                    .iter()
                    .map(|a| stages[j].iter().map(|b| inner(&a.block, &b.block)).collect())
                    .collect();
                cross.insert((i, j), m);
            }
        }
        let collided = stages.iter().map(|s| vec![false; s.len()]).collect();
        Self {
            stages,
            paths,
            collided,
            grid,
            rot,
            energy,
            cross,
        }
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn path_indices(&self, p: &[usize]) -> Vec<usize> {
        p.iter().enumerate().map(|(t, &a)| self.stages[t][a].index).collect()
    }

    pub fn node_energy(&self, t: usize, a: usize) -> f64 {
        self.energy[t][a]
    }

    /// Squared distance of the derotated blocks of node `a` at stage `i`
    /// and node `b` at stage `j` for grid pair `k`.
    pub fn edge_weight(&self, i: usize, a: usize, j: usize, b: usize, k: usize) -> f64 {
        let (i, a, j, b) = if i < j { (i, a, j, b) } else { (j, b, i, a) };
        let c = self.cross[&(i, j)][a][b];
        let r = self.rot[i][a][k] * self.rot[j][b][k].conj() * c;
        (self.energy[i][a] + self.energy[j][b] - 2.0 * r.re).max(0.0)
    }

    /// Total weight over all stage pairs of a path.
    pub fn path_weight(&self, p: &[usize], k: usize) -> f64 {
        let mut w = 0.0;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                w += self.edge_weight(i, p[i], j, p[j], k);
            }
        }
        w
    }

    /// Derotated block of a node.
    pub fn derotated(&self, t: usize, a: usize, k: usize) -> CMatrix {
        &self.stages[t][a].block * self.rot[t][a][k].conj()
    }

    /// Replaces a node's block and refreshes the cached statistics.
    pub fn set_block(&mut self, t: usize, a: usize, block: CMatrix) {
        self.energy[t][a] = energy(&block);
        self.stages[t][a].block = block;
        let tp = self.n_stages();
        for o in 0..tp {
            if o == t {
                continue;
            }
            let key = (o.min(t), o.max(t));
            let vals: Vec<Complex64> = self.stages[o]
                .iter()
                .map(|n| {
                    if o < t {
                        inner(&n.block, &self.stages[t][a].block)
                    } else {
                        inner(&self.stages[t][a].block, &n.block)
                    }
                })
                .collect();
            let m = self.cross.get_mut(&key).expect("stage pair");
            if o < t {
                for (row, v) in m.iter_mut().zip(vals) {
                    row[a] = v;
                }
            } else {
                m[a] = vals;
            }
        }
    }
}

/// Tree-decodes the per-stage node indices and builds the graph.
pub fn build_graph(stages: Vec<Vec<GraphNode>>, tc: &TreeCode, cfg: &SystemConfig) -> (DecodingGraph, TreeDecodeResult) {
    let lists: Vec<Vec<usize>> = stages.iter().map(|s| s.iter().map(|n| n.index).collect()).collect();
    let res = tc.tree_decode(&lists);
    (DecodingGraph::new(stages, &res.paths, cfg), res)
}

/// Best `(path id, grid index, weight)` over the active paths. Ties go to
/// the lexicographically smallest path, then the smallest grid index.
pub fn mwp_search(g: &DecodingGraph, active: &[bool]) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (pid, p) in g.paths.iter().enumerate() {
        if !active[pid] {
            continue;
        }
        for k in 0..g.grid.len() {
            let w = g.path_weight(p, k);
            if best.is_none_or(|(_, _, bw)| w < bw) {
                best = Some((pid, k, w));
            }
        }
    }
    best
}

/// Grid indices ordered by path weight (ties by index), truncated to `n`.
pub fn offset_candidates(g: &DecodingGraph, p: &[usize], n: usize) -> Vec<(usize, f64)> {
    let mut c: Vec<(usize, f64)> = (0..g.grid.len()).map(|k| (k, g.path_weight(p, k))).collect();
    c.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    c.truncate(n);
    c
}

/// Every node pair closer than the larger of the two block energies.
pub fn validate_path(g: &DecodingGraph, p: &[usize], k: usize) -> bool {
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            let w = g.edge_weight(i, p[i], j, p[j], k);
            if w >= g.energy[i][p[i]].max(g.energy[j][p[j]]) {
                return false;
            }
        }
    }
    true
}

/// `sigma_e^2` scaled chi-square quantile at level `zeta` for blocks of
/// `rows x m` entries.
pub fn collision_threshold(sigma_e2: f64, zeta: f64, rows: usize, m: usize) -> Result<f64> {
    np_threshold(sigma_e2, zeta, rows, m)
}

/// Collision flags along a path against its lowest-energy node.
pub fn detect_collisions(g: &DecodingGraph, p: &[usize], k: usize, zeta: f64) -> Result<Vec<bool>> {
    let reference = (0..p.len())
        .min_by(|&a, &b| g.energy[a][p[a]].total_cmp(&g.energy[b][p[b]]).then(a.cmp(&b)))
        .expect("nonempty path");
    let shape = g.stages[reference][p[reference]].block.shape();
    let v_ref = g.stages[reference][p[reference]].err_var;
    let mut flags = vec![false; p.len()];
    for t in 0..p.len() {
        if t == reference {
            continue;
        }
        // relative floor so noise-free blocks are not split by rounding
        let floor = 1e-12 * g.energy[t][p[t]].max(g.energy[reference][p[reference]]) / (shape.0 * shape.1) as f64;
        let s2 = (0.5 * (g.stages[t][p[t]].err_var + v_ref)).max(floor);
        let gamma = collision_threshold(s2, zeta, shape.0, shape.1)?;
        flags[t] = g.edge_weight(t, p[t], reference, p[reference], k) > gamma;
    }
    Ok(flags)
}

/// Mean of the derotated blocks over the non-collided nodes.
pub fn retrieve_channel(g: &DecodingGraph, p: &[usize], flags: &[bool], k: usize) -> Option<CMatrix> {
    let used: Vec<usize> = (0..p.len()).filter(|&t| !flags[t]).collect();
    let first = used.first()?;
    let mut h = g.derotated(*first, p[*first], k);
    for &t in &used[1..] {
        h += g.derotated(t, p[t], k);
    }
    Some(h / Complex64::new(used.len() as f64, 0.0))
}

#[derive(Debug, Clone)]
pub struct RecoveredPath {
    /// Codeword index per stage.
    pub indices: Vec<usize>,
    pub preamble_bits: Vec<u8>,
    pub channel: CMatrix,
    pub grid_index: usize,
    pub to: usize,
    pub cfo: f64,
    pub weight: f64,
    pub collided: Vec<bool>,
    /// `rho_list_len` lowest-weight grid pairs for this path.
    pub candidates: Vec<(usize, f64)>,
    nodes: Vec<usize>,
}

impl RecoveredPath {
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }
}

#[derive(Debug, Clone, Default)]
pub struct GbCr2Output {
    pub users: Vec<RecoveredPath>,
    /// Paths selected by the search but failing validation.
    pub invalid: Vec<Vec<usize>>,
    /// Paths removed for sharing a non-collided node.
    pub pruned: usize,
}

impl GbCr2Output {
    pub fn k_hat(&self) -> usize {
        self.users.len()
    }
}

/// Subtracts `q Ĥ` from every collided node of a recovered path.
pub fn cancel(g: &mut DecodingGraph, nodes: &[usize], flags: &[bool], h: &CMatrix, k: usize) {
    for t in 0..nodes.len() {
        if flags[t] {
            let a = nodes[t];
            let b = &g.stages[t][a].block - h * g.rot[t][a][k];
            g.set_block(t, a, b);
        }
    }
}

/// The search, validate, resolve and cancel loop until no path is left.
pub fn run_gb_cr2(g: &mut DecodingGraph, tc: &TreeCode, cfg: &SystemConfig) -> Result<GbCr2Output> {
    let mut active = vec![true; g.paths.len()];
    let mut out = GbCr2Output::default();
    let zeta = cfg.collision_test_level;
    while let Some((pid, k, w)) = mwp_search(g, &active) {
        active[pid] = false;
        let p = g.paths[pid].clone();
        if !validate_path(g, &p, k) {
            out.invalid.push(g.path_indices(&p));
            continue;
        }
        let flags = detect_collisions(g, &p, k, zeta)?;
        // the reference node is never flagged, so a channel always exists
        let h = retrieve_channel(g, &p, &flags, k).expect("reference node is non-collided");
        let candidates = offset_candidates(g, &p, cfg.rho_list_len);
        cancel(g, &p, &flags, &h, k);
        for t in 0..p.len() {
            g.collided[t][p[t]] |= flags[t];
        }
        for (other, q) in g.paths.iter().enumerate() {
            if active[other] && (0..p.len()).any(|t| !flags[t] && q[t] == p[t]) {
                active[other] = false;
                out.pruned += 1;
            }
        }
        let (to, cfo) = g.grid.pair(k);
        let indices = g.path_indices(&p);
        out.users.push(RecoveredPath {
            preamble_bits: tc.path_bits(&indices),
            indices,
            channel: h,
            grid_index: k,
            to,
            cfo,
            weight: w,
            collided: flags,
            candidates,
            nodes: p,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct NodeDump {
    stage: usize,
    index: usize,
    energy: f64,
    err_var: f64,
    collided: bool,
}

#[derive(Debug, Serialize)]
struct PathDump {
    indices: Vec<usize>,
    min_weight: f64,
    best_grid: usize,
}

#[derive(Debug, Serialize)]
struct GraphDump {
    grid_to: Vec<usize>,
    grid_cfo: Vec<f64>,
    nodes: Vec<NodeDump>,
    paths: Vec<PathDump>,
}

/// Nodes, paths and their minimum weights as JSON.
pub fn graph_dump_json(g: &DecodingGraph) -> String {
    let nodes = g
        .stages
        .iter()
        .enumerate()
        .flat_map(|(t, s)| {
            s.iter().enumerate().map(move |(a, n)| NodeDump {
                stage: t + 1,
                index: n.index,
                energy: g.energy[t][a],
                err_var: n.err_var,
                collided: g.collided[t][a],
            })
        })
        .collect();
    let paths = g
        .paths
        .iter()
        .map(|p| {
            let (best_grid, min_weight) = (0..g.grid.len())
                .map(|k| (k, g.path_weight(p, k)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .unwrap_or((0, f64::INFINITY));
            PathDump {
                indices: g.path_indices(p),
                min_weight,
                best_grid,
            }
        })
        .collect();
    serde_json::to_string_pretty(&GraphDump {
        grid_to: g.grid.to.clone(),
        grid_cfo: g.grid.cfo.clone(),
        nodes,
        paths,
    })
    .expect("graph dump serializes")
}
