//! Random DAG sampling from six graph families.
//!
//! Undirected families (Erdős–Rényi, Watts–Strogatz, stochastic block model,
//! geometric random graphs) first draw an undirected skeleton, then orient
//! every edge from lower to higher position under a uniformly random node
//! permutation, which yields an unbiased acyclic orientation. The scale-free
//! families grow the graph by preferential attachment in random arrival
//! order, so their edges are acyclic by construction.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// The six graph families datasets are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum GraphFamily {
    ErdosRenyi,
    ScaleFreeIn,
    ScaleFreeOut,
    WattsStrogatz,
    StochasticBlockModel,
    GeometricRandom,
}

impl GraphFamily {
    pub const ALL: [GraphFamily; 6] = [
        GraphFamily::ErdosRenyi,
        GraphFamily::ScaleFreeIn,
        GraphFamily::ScaleFreeOut,
        GraphFamily::WattsStrogatz,
        GraphFamily::StochasticBlockModel,
        GraphFamily::GeometricRandom,
    ];

    pub fn id(self) -> u8 {
        Self::ALL.iter().position(|g| *g == self).unwrap() as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GraphFamily::ErdosRenyi => "erdos_renyi",
            GraphFamily::ScaleFreeIn => "scale_free_in",
            GraphFamily::ScaleFreeOut => "scale_free_out",
            GraphFamily::WattsStrogatz => "watts_strogatz",
            GraphFamily::StochasticBlockModel => "stochastic_block_model",
            GraphFamily::GeometricRandom => "geometric_random",
        }
    }
}

/// A graph family together with parameters drawn from the documented domains.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum GraphFamilyConfig {
    ErdosRenyi {
        edges_per_node: u32,
    },
    ScaleFreeIn {
        edges_per_node: u32,
        attach_power: f64,
    },
    ScaleFreeOut {
        edges_per_node: u32,
        attach_power: f64,
    },
    WattsStrogatz {
        lattice_k: u32,
        rewire_prob: f64,
    },
    StochasticBlockModel {
        edges_per_node: u32,
        blocks: u32,
        damping: f64,
    },
    GeometricRandom {
        radius: f64,
    },
}

pub const EDGES_PER_NODE_DOMAIN: [u32; 3] = [1, 2, 3];
pub const ATTACH_POWER_DOMAIN: [f64; 4] = [0.7, 1.0, 1.2, 1.5];
pub const LATTICE_K_DOMAIN: [u32; 2] = [2, 3];
pub const REWIRE_PROB_DOMAIN: [f64; 2] = [0.2, 0.4];
pub const BLOCKS_DOMAIN: [u32; 3] = [2, 5, 10];
pub const DAMPING_DOMAIN: [f64; 1] = [0.1];
pub const RADIUS_DOMAIN: [f64; 3] = [0.08, 0.1, 0.15];

impl GraphFamilyConfig {
    pub fn family(&self) -> GraphFamily {
        match self {
            GraphFamilyConfig::ErdosRenyi { .. } => GraphFamily::ErdosRenyi,
            GraphFamilyConfig::ScaleFreeIn { .. } => GraphFamily::ScaleFreeIn,
            GraphFamilyConfig::ScaleFreeOut { .. } => GraphFamily::ScaleFreeOut,
            GraphFamilyConfig::WattsStrogatz { .. } => GraphFamily::WattsStrogatz,
            GraphFamilyConfig::StochasticBlockModel { .. } => GraphFamily::StochasticBlockModel,
            GraphFamilyConfig::GeometricRandom { .. } => GraphFamily::GeometricRandom,
        }
    }

    /// Check every parameter against its documented domain.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            GraphFamilyConfig::ErdosRenyi { edges_per_node } => {
                EDGES_PER_NODE_DOMAIN.contains(&edges_per_node)
            }
            GraphFamilyConfig::ScaleFreeIn {
                edges_per_node,
                attach_power,
            }
            | GraphFamilyConfig::ScaleFreeOut {
                edges_per_node,
                attach_power,
            } => {
                EDGES_PER_NODE_DOMAIN.contains(&edges_per_node)
                    && ATTACH_POWER_DOMAIN.contains(&attach_power)
            }
            GraphFamilyConfig::WattsStrogatz {
                lattice_k,
                rewire_prob,
            } => LATTICE_K_DOMAIN.contains(&lattice_k) && REWIRE_PROB_DOMAIN.contains(&rewire_prob),
            GraphFamilyConfig::StochasticBlockModel {
                edges_per_node,
                blocks,
                damping,
            } => {
                EDGES_PER_NODE_DOMAIN.contains(&edges_per_node)
                    && BLOCKS_DOMAIN.contains(&blocks)
                    && DAMPING_DOMAIN.contains(&damping)
            }
            GraphFamilyConfig::GeometricRandom { radius } => RADIUS_DOMAIN.contains(&radius),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "graph parameter outside its documented domain: {self:?}"
            )))
        }
    }
}

/// Draw a family uniformly from the six, then each parameter uniformly from
/// its domain.
pub fn sample_graph_config(rng: &mut ChaCha12Rng) -> GraphFamilyConfig {
    sample_graph_config_from(&GraphFamily::ALL, rng)
}

/// Draw a family uniformly from `families`, then each parameter uniformly
/// from its domain. The caller guarantees `families` is non-empty.
pub fn sample_graph_config_from(
    families: &[GraphFamily],
    rng: &mut ChaCha12Rng,
) -> GraphFamilyConfig {
    let family = families[rng.gen_range(0..families.len())];
    match family {
        GraphFamily::ErdosRenyi => GraphFamilyConfig::ErdosRenyi {
            edges_per_node: *EDGES_PER_NODE_DOMAIN.choose(rng).unwrap(),
        },
        GraphFamily::ScaleFreeIn => GraphFamilyConfig::ScaleFreeIn {
            edges_per_node: *EDGES_PER_NODE_DOMAIN.choose(rng).unwrap(),
            attach_power: *ATTACH_POWER_DOMAIN.choose(rng).unwrap(),
        },
        GraphFamily::ScaleFreeOut => GraphFamilyConfig::ScaleFreeOut {
            edges_per_node: *EDGES_PER_NODE_DOMAIN.choose(rng).unwrap(),
            attach_power: *ATTACH_POWER_DOMAIN.choose(rng).unwrap(),
        },
        GraphFamily::WattsStrogatz => GraphFamilyConfig::WattsStrogatz {
            lattice_k: *LATTICE_K_DOMAIN.choose(rng).unwrap(),
            rewire_prob: *REWIRE_PROB_DOMAIN.choose(rng).unwrap(),
        },
        GraphFamily::StochasticBlockModel => GraphFamilyConfig::StochasticBlockModel {
            edges_per_node: *EDGES_PER_NODE_DOMAIN.choose(rng).unwrap(),
            blocks: *BLOCKS_DOMAIN.choose(rng).unwrap(),
            damping: DAMPING_DOMAIN[0],
        },
        GraphFamily::GeometricRandom => GraphFamilyConfig::GeometricRandom {
            radius: *RADIUS_DOMAIN.choose(rng).unwrap(),
        },
    }
}

/// A directed acyclic graph over `f ≥ 2` nodes. `adj[i][j] = 1` means `i → j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    f: usize,
    adj: Vec<u8>, // row-major f*f
}

impl Dag {
    /// Validates the diagonal-zero and acyclicity invariants.
    pub fn new(f: usize, adj: Vec<u8>) -> Result<Self> {
        if f < 2 {
            return Err(Error::Contract(format!("Dag requires f >= 2, got {f}")));
        }
        if adj.len() != f * f {
            return Err(Error::Contract(format!(
                "Dag adjacency has {} entries, expected {}",
                adj.len(),
                f * f
            )));
        }
        if adj.iter().any(|&v| v > 1) {
            return Err(Error::Contract("Dag adjacency entries must be 0 or 1".into()));
        }
        for i in 0..f {
            if adj[i * f + i] != 0 {
                return Err(Error::Contract(format!("Dag has a self-loop at node {i}")));
            }
        }
        let dag = Self { f, adj };
        if dag.kahn_order().is_none() {
            return Err(Error::Contract("Dag adjacency contains a cycle".into()));
        }
        Ok(dag)
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.f + j] == 1
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(|&v| v as usize).sum()
    }

    pub fn parents(&self, j: usize) -> Vec<usize> {
        (0..self.f).filter(|&i| self.edge(i, j)).collect()
    }

    /// Adjacency as a dense 0/1 float matrix.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.f, self.f), |(i, j)| self.adj[i * self.f + j] as f64)
    }

    pub fn adj_bits(&self) -> &[u8] {
        &self.adj
    }

    /// Kahn's algorithm; `None` if the graph has a cycle. Ties broken by
    /// smallest node index, so the order is deterministic.
    fn kahn_order(&self) -> Option<Vec<usize>> {
        let f = self.f;
        let mut indegree = vec![0usize; f];
        for (j, deg) in indegree.iter_mut().enumerate() {
            *deg = (0..f).filter(|&i| self.edge(i, j)).count();
        }
        let mut order = Vec::with_capacity(f);
        let mut done = vec![false; f];
        for _ in 0..f {
            let next = (0..f).find(|&v| !done[v] && indegree[v] == 0)?;
            done[next] = true;
            order.push(next);
            for (j, deg) in indegree.iter_mut().enumerate() {
                if self.edge(next, j) {
                    *deg -= 1;
                }
            }
        }
        Some(order)
    }

    /// A deterministic topological order of the nodes.
    pub fn topological_order(&self) -> Vec<usize> {
        self.kahn_order().expect("validated Dag is acyclic")
    }

    /// Whether `order` visits every node once and respects all edges.
    pub fn is_topological_order(&self, order: &[usize]) -> bool {
        if order.len() != self.f {
            return false;
        }
        let mut pos = vec![usize::MAX; self.f];
        for (p, &v) in order.iter().enumerate() {
            if v >= self.f || pos[v] != usize::MAX {
                return false;
            }
            pos[v] = p;
        }
        for i in 0..self.f {
            for j in 0..self.f {
                if self.edge(i, j) && pos[i] >= pos[j] {
                    return false;
                }
            }
        }
        true
    }
}

/// Uniform random permutation; `pos[v]` is the position of node `v`.
fn random_positions(f: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..f).collect();
    perm.shuffle(rng);
    let mut pos = vec![0usize; f];
    for (p, &v) in perm.iter().enumerate() {
        pos[v] = p;
    }
    pos
}

/// Orient an undirected edge set low→high under `pos` and build the DAG.
fn orient(f: usize, edges: &[(usize, usize)], pos: &[usize]) -> Vec<u8> {
    let mut adj = vec![0u8; f * f];
    for &(u, v) in edges {
        let (a, b) = if pos[u] < pos[v] { (u, v) } else { (v, u) };
        adj[a * f + b] = 1;
    }
    adj
}

/// Pick an index with probability proportional to `weights`, skipping entries
/// where `taken` is set.
fn weighted_pick(weights: &[f64], taken: &[bool], rng: &mut ChaCha12Rng) -> Option<usize> {
    let total: f64 = weights
        .iter()
        .zip(taken)
        .filter(|(_, t)| !**t)
        .map(|(w, _)| *w)
        .sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.gen::<f64>() * total;
    let mut last = None;
    for (i, (w, t)) in weights.iter().zip(taken).enumerate() {
        if *t {
            continue;
        }
        last = Some(i);
        u -= w;
        if u <= 0.0 {
            return Some(i);
        }
    }
    last
}

/// Sample a DAG with `f` nodes from the configured family.
pub fn sample_dag(config: &GraphFamilyConfig, f: usize, rng: &mut ChaCha12Rng) -> Result<Dag> {
    if f < 2 {
        return Err(Error::Contract(format!("sample_dag requires f >= 2, got {f}")));
    }
    config.validate()?;
    let adj = match *config {
        GraphFamilyConfig::ErdosRenyi { edges_per_node } => {
            // Expected edges/node λ over the undirected skeleton: each of the
            // f(f-1)/2 pairs is kept with p = 2λ/(f-1), giving λf/2 edges.
            let pos = random_positions(f, rng);
            let p = (2.0 * edges_per_node as f64 / (f as f64 - 1.0)).min(1.0);
            let mut edges = Vec::new();
            for u in 0..f {
                for v in (u + 1)..f {
                    if rng.gen::<f64>() < p {
                        edges.push((u, v));
                    }
                }
            }
            orient(f, &edges, &pos)
        }
        GraphFamilyConfig::ScaleFreeIn {
            edges_per_node,
            attach_power,
        }
        | GraphFamilyConfig::ScaleFreeOut {
            edges_per_node,
            attach_power,
        } => {
            let new_to_existing = matches!(config, GraphFamilyConfig::ScaleFreeOut { .. });
            // Nodes arrive in random order; each newcomer attaches to up to
            // `edges_per_node` existing nodes with probability ∝ (deg+1)^α.
            let mut arrival: Vec<usize> = (0..f).collect();
            arrival.shuffle(rng);
            let mut degree = vec![0usize; f];
            let mut adj = vec![0u8; f * f];
            for s in 1..f {
                let new = arrival[s];
                let m = (edges_per_node as usize).min(s);
                let weights: Vec<f64> = arrival[..s]
                    .iter()
                    .map(|&u| ((degree[u] + 1) as f64).powf(attach_power))
                    .collect();
                let mut taken = vec![false; s];
                for _ in 0..m {
                    let Some(k) = weighted_pick(&weights, &taken, rng) else {
                        break;
                    };
                    taken[k] = true;
                    let existing = arrival[k];
                    let (src, dst) = if new_to_existing {
                        (new, existing)
                    } else {
                        (existing, new)
                    };
                    adj[src * f + dst] = 1;
                    degree[new] += 1;
                    degree[existing] += 1;
                }
            }
            adj
        }
        GraphFamilyConfig::WattsStrogatz {
            lattice_k,
            rewire_prob,
        } => {
            // Ring lattice in permutation order: each node joins its k nearest
            // neighbours per side, then each lattice edge is rewired to a
            // uniform random endpoint with the given probability.
            let pos = random_positions(f, rng);
            let mut node_at = vec![0usize; f];
            for v in 0..f {
                node_at[pos[v]] = v;
            }
            let mut edge_set = std::collections::BTreeSet::new();
            for p in 0..f {
                for delta in 1..=(lattice_k as usize) {
                    let q = (p + delta) % f;
                    if p == q {
                        continue;
                    }
                    let (u, v) = (node_at[p], node_at[q]);
                    edge_set.insert((u.min(v), u.max(v)));
                }
            }
            let lattice: Vec<(usize, usize)> = edge_set.iter().copied().collect();
            for (u, v) in lattice {
                if rng.gen::<f64>() < rewire_prob {
                    // Rewire the v endpoint globally, avoiding self-loops and
                    // duplicate edges; keep the original edge if no slot opens.
                    let w = rng.gen_range(0..f);
                    let cand = (u.min(w), u.max(w));
                    if w != u && !edge_set.contains(&cand) {
                        edge_set.remove(&(u.min(v), u.max(v)));
                        edge_set.insert(cand);
                    }
                }
            }
            let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();
            orient(f, &edges, &pos)
        }
        GraphFamilyConfig::StochasticBlockModel {
            edges_per_node,
            blocks,
            damping,
        } => {
            // Uniform block assignment; intra-block probability is scaled so
            // the expected undirected edge count is λf/2, with inter-block
            // pairs damped by the documented factor.
            let pos = random_positions(f, rng);
            let assign: Vec<u32> = (0..f).map(|_| rng.gen_range(0..blocks)).collect();
            let mut n_intra = 0usize;
            let mut n_inter = 0usize;
            for u in 0..f {
                for v in (u + 1)..f {
                    if assign[u] == assign[v] {
                        n_intra += 1;
                    } else {
                        n_inter += 1;
                    }
                }
            }
            let target = edges_per_node as f64 * f as f64 / 2.0;
            let denom = n_intra as f64 + damping * n_inter as f64;
            let p_intra = (target / denom).clamp(0.0, 1.0);
            let p_inter = (damping * p_intra).clamp(0.0, 1.0);
            let mut edges = Vec::new();
            for u in 0..f {
                for v in (u + 1)..f {
                    let p = if assign[u] == assign[v] { p_intra } else { p_inter };
                    if rng.gen::<f64>() < p {
                        edges.push((u, v));
                    }
                }
            }
            orient(f, &edges, &pos)
        }
        GraphFamilyConfig::GeometricRandom { radius } => {
            let pos = random_positions(f, rng);
            let pts: Vec<(f64, f64)> = (0..f).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
            let mut edges = Vec::new();
            for u in 0..f {
                for v in (u + 1)..f {
                    let dx = pts[u].0 - pts[v].0;
                    let dy = pts[u].1 - pts[v].1;
                    if (dx * dx + dy * dy).sqrt() < radius {
                        edges.push((u, v));
                    }
                }
            }
            orient(f, &edges, &pos)
        }
    };
    Dag::new(f, adj)
}
