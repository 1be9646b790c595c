//! Discrete pairwise MRF and sequential tree-reweighted message passing.
//!
//! Nodes are processed in index order (forward) and reverse order
//! (backward). Every edge `(i, j)` is stored with `i < j`; the node order
//! splits the graph into monotonic chains, node `i` being shared by
//! `max(#lower neighbours, #higher neighbours)` of them.
//!
//! The lower bound reported after each pass is the sum over those chains
//! of the chain minimum under the current reparameterisation, evaluated
//! exactly by dynamic programming.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MrfEdge {
    pub i: usize,
    pub j: usize,
    /// Row-major `labels(i) x labels(j)` cost table.
    pub cost: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairwiseMrf {
    pub unary: Vec<Vec<f64>>,
    pub edges: Vec<MrfEdge>,
}

impl PairwiseMrf {
    pub fn new(unary: Vec<Vec<f64>>) -> Self {
        Self { unary, edges: Vec::new() }
    }

    /// Adds an edge; stored with the lower node index first.
    pub fn add_edge(&mut self, a: usize, b: usize, cost: Vec<f64>) -> Result<()> {
        if a == b || a >= self.unary.len() || b >= self.unary.len() {
            return Err(Error::Domain(format!("invalid edge ({}, {})", a, b)));
        }
        let (la, lb) = (self.unary[a].len(), self.unary[b].len());
        if cost.len() != la * lb {
            return Err(Error::Domain(format!(
                "edge ({}, {}) table has {} entries, expected {}",
                a,
                b,
                cost.len(),
                la * lb
            )));
        }
        if let Some(bad) = cost.iter().position(|c| !c.is_finite()) {
            let _ = bad;
            return Err(Error::NonFiniteCost(a, b));
        }
        let (i, j, cost) = if a < b {
            (a, b, cost)
        } else {
            let mut t = vec![0.0; cost.len()];
            for x in 0..la {
                for y in 0..lb {
                    t[y * la + x] = cost[x * lb + y];
                }
            }
            (b, a, t)
        };
        self.edges.push(MrfEdge { i, j, cost });
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.unary.len()
    }

    pub fn energy(&self, labels: &[usize]) -> f64 {
        let mut e: f64 = self.unary.iter().zip(labels).map(|(u, &l)| u[l]).sum();
        for ed in &self.edges {
            let lj = self.unary[ed.j].len();
            e += ed.cost[labels[ed.i] * lj + labels[ed.j]];
        }
        e
    }

    fn validate(&self) -> Result<()> {
        for (i, u) in self.unary.iter().enumerate() {
            if u.is_empty() {
                return Err(Error::Domain(format!("node {} has no labels", i)));
            }
            if u.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFiniteCost(i, i));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrwsOptions {
    pub max_passes: usize,
    /// Stop when the bound improves by less than this between passes.
    pub tolerance: f64,
}

impl Default for TrwsOptions {
    fn default() -> Self {
        Self { max_passes: 50, tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrwsResult {
    pub labels: Vec<usize>,
    pub energy: f64,
    /// Lower bound after each forward+backward pass.
    pub lower_bounds: Vec<f64>,
    pub passes: usize,
}

struct Incidence {
    /// (edge, other node) for neighbours with a smaller index
    lower: Vec<Vec<(usize, usize)>>,
    higher: Vec<Vec<(usize, usize)>>,
    gamma: Vec<f64>,
}

impl Incidence {
    fn new(mrf: &PairwiseMrf) -> Self {
        let n = mrf.node_count();
        let mut lower = vec![Vec::new(); n];
        let mut higher = vec![Vec::new(); n];
        for (e, ed) in mrf.edges.iter().enumerate() {
            higher[ed.i].push((e, ed.j));
            lower[ed.j].push((e, ed.i));
        }
        let gamma = (0..n)
            .map(|i| 1.0 / lower[i].len().max(higher[i].len()).max(1) as f64)
            .collect();
        Self { lower, higher, gamma }
    }
}

struct Messages {
    /// message i -> j over labels of j
    fwd: Vec<Vec<f64>>,
    /// message j -> i over labels of i
    bwd: Vec<Vec<f64>>,
}

fn belief(mrf: &PairwiseMrf, inc: &Incidence, msg: &Messages, i: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&mrf.unary[i]);
    for &(e, _) in &inc.lower[i] {
        for (o, m) in out.iter_mut().zip(&msg.fwd[e]) {
            *o += m;
        }
    }
    for &(e, _) in &inc.higher[i] {
        for (o, m) in out.iter_mut().zip(&msg.bwd[e]) {
            *o += m;
        }
    }
}

fn normalize(m: &mut [f64]) {
    let min = m.iter().copied().fold(f64::INFINITY, f64::min);
    m.iter_mut().for_each(|v| *v -= min);
}

pub fn trws(mrf: &PairwiseMrf, opts: &TrwsOptions) -> Result<TrwsResult> {
    mrf.validate()?;
    let n = mrf.node_count();
    let inc = Incidence::new(mrf);
    let mut msg = Messages {
        fwd: mrf.edges.iter().map(|e| vec![0.0; mrf.unary[e.j].len()]).collect(),
        bwd: mrf.edges.iter().map(|e| vec![0.0; mrf.unary[e.i].len()]).collect(),
    };
    let chains = build_chains(n, &inc);

    let mut theta = Vec::new();
    let mut lower_bounds = Vec::new();
    let mut best_labels = vec![0; n];
    let mut best_energy = mrf.energy(&best_labels);
    let mut passes = 0;

    for _ in 0..opts.max_passes.max(1) {
        passes += 1;
        for i in 0..n {
            belief(mrf, &inc, &msg, i, &mut theta);
            let li = theta.len();
            for &(e, j) in &inc.higher[i] {
                let lj = mrf.unary[j].len();
                let cost = &mrf.edges[e].cost;
                let mut out = vec![f64::INFINITY; lj];
                for xi in 0..li {
                    let base = inc.gamma[i] * theta[xi] - msg.bwd[e][xi];
                    for (xj, o) in out.iter_mut().enumerate() {
                        let v = base + cost[xi * lj + xj];
                        if v < *o {
                            *o = v;
                        }
                    }
                }
                normalize(&mut out);
                msg.fwd[e] = out;
            }
        }
        for i in (0..n).rev() {
            belief(mrf, &inc, &msg, i, &mut theta);
            let li = theta.len();
            for &(e, k) in &inc.lower[i] {
                let lk = mrf.unary[k].len();
                let cost = &mrf.edges[e].cost;
                let mut out = vec![f64::INFINITY; lk];
                for xi in 0..li {
                    let base = inc.gamma[i] * theta[xi] - msg.fwd[e][xi];
                    for (xk, o) in out.iter_mut().enumerate() {
                        let v = base + cost[xk * li + xi];
                        if v < *o {
                            *o = v;
                        }
                    }
                }
                normalize(&mut out);
                msg.bwd[e] = out;
            }
        }

        let labels = decode(mrf, &inc, &msg);
        let energy = mrf.energy(&labels);
        if energy < best_energy {
            best_energy = energy;
            best_labels = labels;
        }
        let bound = chain_bound(mrf, &inc, &msg, &chains);
        if !bound.is_finite() {
            return Err(Error::Domain("lower bound became non-finite".into()));
        }
        let improved = lower_bounds.last().map(|&prev: &f64| bound - prev);
        lower_bounds.push(bound);
        if let Some(delta) = improved {
            if delta < opts.tolerance {
                break;
            }
        }
        if best_energy - bound <= opts.tolerance * best_energy.abs().max(1.0) * 1e-3 {
            break;
        }
    }
    Ok(TrwsResult { labels: best_labels, energy: best_energy, lower_bounds, passes })
}

/// Sequential decoding: each node conditions on the labels already chosen
/// for its lower neighbours and on messages from its higher neighbours.
fn decode(mrf: &PairwiseMrf, inc: &Incidence, msg: &Messages) -> Vec<usize> {
    let n = mrf.node_count();
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let li = mrf.unary[i].len();
        let mut best = (f64::INFINITY, 0);
        for x in 0..li {
            let mut v = mrf.unary[i][x];
            for &(e, k) in &inc.lower[i] {
                v += mrf.edges[e].cost[labels[k] * li + x];
            }
            for &(e, _) in &inc.higher[i] {
                v += msg.bwd[e][x];
            }
            if v < best.0 {
                best = (v, x);
            }
        }
        labels[i] = best.1;
    }
    labels
}

/// A monotonic chain: its nodes in increasing order and the edges joining
/// consecutive nodes.
struct Chain {
    nodes: Vec<usize>,
    edges: Vec<usize>,
}

fn build_chains(n: usize, inc: &Incidence) -> Vec<Chain> {
    let mut chains: Vec<Chain> = Vec::new();
    // chain currently ending in each edge's upper node
    let mut open = vec![usize::MAX; inc.lower.iter().map(Vec::len).sum::<usize>()];
    for i in 0..n {
        let lower = &inc.lower[i];
        let higher = &inc.higher[i];
        if lower.is_empty() && higher.is_empty() {
            chains.push(Chain { nodes: vec![i], edges: Vec::new() });
            continue;
        }
        for t in 0..lower.len().max(higher.len()) {
            let c = if t < lower.len() {
                open[lower[t].0]
            } else {
                chains.push(Chain { nodes: vec![i], edges: Vec::new() });
                chains.len() - 1
            };
            if let Some(&(e, j)) = higher.get(t) {
                chains[c].edges.push(e);
                chains[c].nodes.push(j);
                open[e] = c;
            }
        }
    }
    chains
}

fn chain_bound(mrf: &PairwiseMrf, inc: &Incidence, msg: &Messages, chains: &[Chain]) -> f64 {
    let mut theta = Vec::new();
    let unary_share = |i: usize, theta: &mut Vec<f64>| {
        belief(mrf, inc, msg, i, theta);
        let g = inc.gamma[i];
        theta.iter_mut().for_each(|v| *v *= g);
    };
    let mut total = 0.0;
    for chain in chains {
        unary_share(chain.nodes[0], &mut theta);
        let mut dp = theta.clone();
        for (step, &e) in chain.edges.iter().enumerate() {
            let (a, b) = (chain.nodes[step], chain.nodes[step + 1]);
            let ed = &mrf.edges[e];
            debug_assert!(ed.i == a && ed.j == b);
            let lb = mrf.unary[b].len();
            unary_share(b, &mut theta);
            let mut next = vec![f64::INFINITY; lb];
            for (xa, &da) in dp.iter().enumerate() {
                let base = da - msg.bwd[e][xa];
                for xb in 0..lb {
                    let v = base + ed.cost[xa * lb + xb] - msg.fwd[e][xb];
                    if v < next[xb] {
                        next[xb] = v;
                    }
                }
            }
            for (nx, t) in next.iter_mut().zip(&theta) {
                *nx += t;
            }
            dp = next;
        }
        total += dp.iter().copied().fold(f64::INFINITY, f64::min);
    }
    total
}
