//! Boltzmann-machine support prior: graph construction from binary
//! masks, energy evaluation, pseudo-likelihood parameter learning, and
//! MAP inference over spin labelings.
//!
//! Spins live in `{-1, +1}`; the unnormalized log-probability of a
//! labeling `s` is `Σᵢ Wᵢ sᵢ + Σ₍ᵢ,ⱼ₎ Wᵢⱼ sᵢ sⱼ`. The partition
//! function is never computed: MAP and pseudo-likelihood only need
//! score differences.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// L2 regularizer weight for pseudo-likelihood learning. Keeps the
/// single-observation fits the adaptive loop produces from diverging.
pub const PL_LAMBDA: f64 = 0.01;

/// Default gradient-ascent step for pseudo-likelihood learning.
pub const PL_DEFAULT_STEP: f64 = 0.1;

/// Exact MAP inference enumerates `2^N` labelings; refuse above this.
pub const EXACT_MAP_MAX_NODES: usize = 20;

const BP_MAX_SWEEPS: usize = 200;
const BP_DAMPING: f64 = 0.5;
const BP_TOL: f64 = 1e-6;

/// A `{-1,+1}` labeling of `N` nodes, stored as activity flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpinVector {
    active: Vec<bool>,
}

impl SpinVector {
    pub fn from_active(active: Vec<bool>) -> Self {
        Self { active }
    }

    pub fn all_plus(n: usize) -> Self {
        Self {
            active: vec![true; n],
        }
    }

    pub fn all_minus(n: usize) -> Self {
        Self {
            active: vec![false; n],
        }
    }

    /// Interpret strictly positive values as `+1`.
    pub fn from_signs(values: &[f64]) -> Self {
        Self {
            active: values.iter().map(|&v| v > 0.0).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    /// Spin value in `{-1.0, +1.0}`.
    pub fn spin(&self, i: usize) -> f64 {
        if self.active[i] {
            1.0
        } else {
            -1.0
        }
    }

    /// The `{0,1}` image `v = (s+1)/2`.
    pub fn v01(&self, i: usize) -> f64 {
        if self.active[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn support_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.active[i]).collect()
    }

    pub fn support_size(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn iter_spins(&self) -> impl Iterator<Item = f64> + '_ {
        self.active.iter().map(|&a| if a { 1.0 } else { -1.0 })
    }
}

/// Which nodes count as neighbors when building a graph from a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborhoodSpec {
    /// 1-D signal: the two adjacent indices.
    Chain2 { len: usize },
    /// 2-D grid in row-major order: the 8 king-move neighbors.
    Grid8 { height: usize, width: usize },
}

impl NeighborhoodSpec {
    pub fn n_nodes(&self) -> usize {
        match self {
            NeighborhoodSpec::Chain2 { len } => *len,
            NeighborhoodSpec::Grid8 { height, width } => height * width,
        }
    }

    /// Neighbor indices of node `i`, in increasing order.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        match *self {
            NeighborhoodSpec::Chain2 { len } => {
                let mut out = Vec::with_capacity(2);
                if i > 0 {
                    out.push(i - 1);
                }
                if i + 1 < len {
                    out.push(i + 1);
                }
                out
            }
            NeighborhoodSpec::Grid8 { height, width } => {
                let (r, c) = (i / width, i % width);
                let mut out = Vec::with_capacity(8);
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let nr = r as i64 + dr;
                        let nc = c as i64 + dc;
                        if nr >= 0 && nr < height as i64 && nc >= 0 && nc < width as i64 {
                            out.push(nr as usize * width + nc as usize);
                        }
                    }
                }
                out.sort_unstable();
                out
            }
        }
    }
}

/// An undirected graph over `n_nodes` with canonical `(i, j)`, `i < j`
/// edges and per-node adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<(usize, usize)>>, // (neighbor, edge index)
    spec: NeighborhoodSpec,
}

impl Graph {
    /// Build from an explicit edge list; duplicates and orientations
    /// collapse to the canonical sorted form.
    pub fn from_edges(
        spec: NeighborhoodSpec,
        raw_edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let n_nodes = spec.n_nodes();
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for (a, b) in raw_edges {
            if a == b {
                return Err(Error::InvalidDimension(format!("self-loop at node {a}")));
            }
            let e = (a.min(b), a.max(b));
            if e.1 >= n_nodes {
                return Err(Error::InvalidDimension(format!(
                    "edge ({},{}) out of range for {n_nodes} nodes",
                    e.0, e.1
                )));
            }
            edges.push(e);
        }
        edges.sort_unstable();
        edges.dedup();
        let mut adjacency = vec![Vec::new(); n_nodes];
        for (idx, &(a, b)) in edges.iter().enumerate() {
            adjacency[a].push((b, idx));
            adjacency[b].push((a, idx));
        }
        Ok(Self {
            n_nodes,
            edges,
            adjacency,
            spec,
        })
    }

    /// The full neighborhood graph: every spec-adjacent pair is an
    /// edge. Identical to building from an all-active mask.
    pub fn full(spec: NeighborhoodSpec) -> Self {
        update_graph(&SpinVector::all_plus(spec.n_nodes()), spec)
            .expect("all-active mask always matches the spec dims")
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, usize)] {
        &self.adjacency[i]
    }

    pub fn spec(&self) -> NeighborhoodSpec {
        self.spec
    }
}

/// Graph update from a binary mask: node `i` connects to each neighbor
/// `j` in its predefined neighborhood whose mask value is `+1`. An edge
/// therefore always has at least one active endpoint.
pub fn update_graph(b: &SpinVector, spec: NeighborhoodSpec) -> Result<Graph> {
    if b.len() != spec.n_nodes() {
        return Err(Error::InvalidDimension(format!(
            "mask length {} does not match neighborhood over {} nodes",
            b.len(),
            spec.n_nodes()
        )));
    }
    let mut edges = Vec::new();
    for i in 0..b.len() {
        for j in spec.neighbors(i) {
            if b.is_active(j) {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(spec, edges)
}

/// Boltzmann machine over a graph: unary weights per node and one
/// pairwise weight per edge (aligned with `graph.edges()`).
#[derive(Debug, Clone)]
pub struct BoltzmannMachine {
    graph: Graph,
    unary: DVector<f64>,
    pairwise: Vec<f64>,
}

impl BoltzmannMachine {
    pub fn new(graph: Graph, unary: DVector<f64>, pairwise: Vec<f64>) -> Result<Self> {
        if unary.len() != graph.n_nodes() {
            return Err(Error::InvalidDimension(format!(
                "unary length {} vs {} nodes",
                unary.len(),
                graph.n_nodes()
            )));
        }
        if pairwise.len() != graph.n_edges() {
            return Err(Error::InvalidDimension(format!(
                "pairwise length {} vs {} edges",
                pairwise.len(),
                graph.n_edges()
            )));
        }
        if unary.iter().any(|w| !w.is_finite()) || pairwise.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("non-finite Boltzmann machine weight".into()));
        }
        Ok(Self {
            graph,
            unary,
            pairwise,
        })
    }

    /// All-zero weights over the given graph (a flat prior).
    pub fn zeros(graph: Graph) -> Self {
        let n = graph.n_nodes();
        let e = graph.n_edges();
        Self {
            graph,
            unary: DVector::zeros(n),
            pairwise: vec![0.0; e],
        }
    }

    /// Flat prior over an edgeless graph.
    pub fn flat(spec: NeighborhoodSpec) -> Self {
        let graph = Graph::from_edges(spec, std::iter::empty()).expect("empty edge list is valid");
        Self::zeros(graph)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn unary(&self) -> &DVector<f64> {
        &self.unary
    }

    pub fn pairwise(&self) -> &[f64] {
        &self.pairwise
    }

    /// Weight of the canonical edge `(min, max)`, if present.
    pub fn pairwise_weight(&self, i: usize, j: usize) -> Option<f64> {
        let e = (i.min(j), i.max(j));
        self.graph
            .edges()
            .binary_search(&e)
            .ok()
            .map(|idx| self.pairwise[idx])
    }

    /// `true` when every weight is zero (the prior is uninformative).
    pub fn is_flat(&self) -> bool {
        self.unary.iter().all(|&w| w == 0.0) && self.pairwise.iter().all(|&w| w == 0.0)
    }

    /// Serialize to the interchange JSON form.
    pub fn to_json(&self) -> Result<String> {
        let doc = BmJson {
            n_nodes: self.n_nodes(),
            spec: self.graph.spec(),
            edges: self.graph.edges().to_vec(),
            unary: self.unary.iter().copied().collect(),
            pairwise: self
                .graph
                .edges()
                .iter()
                .zip(&self.pairwise)
                .map(|(&(i, j), &w)| (i, j, w))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: BmJson = serde_json::from_str(text)?;
        let graph = Graph::from_edges(doc.spec, doc.edges.iter().copied())?;
        if graph.n_nodes() != doc.n_nodes {
            return Err(Error::InvalidDimension(format!(
                "node count {} does not match neighborhood ({} nodes)",
                doc.n_nodes,
                graph.n_nodes()
            )));
        }
        let mut pairwise = vec![0.0; graph.n_edges()];
        for &(i, j, w) in &doc.pairwise {
            let e = (i.min(j), i.max(j));
            let idx = graph.edges().binary_search(&e).map_err(|_| {
                Error::InvalidDimension(format!("pairwise weight for missing edge ({i},{j})"))
            })?;
            pairwise[idx] = w;
        }
        BoltzmannMachine::new(graph, DVector::from_vec(doc.unary), pairwise)
    }
}

#[derive(Serialize, Deserialize)]
struct BmJson {
    n_nodes: usize,
    spec: NeighborhoodSpec,
    edges: Vec<(usize, usize)>,
    unary: Vec<f64>,
    pairwise: Vec<(usize, usize, f64)>,
}

/// Unnormalized log-probability `Σᵢ Wᵢ sᵢ + Σ₍ᵢ,ⱼ₎ Wᵢⱼ sᵢ sⱼ`.
pub fn bm_log_score(s: &SpinVector, bm: &BoltzmannMachine) -> Result<f64> {
    if s.len() != bm.n_nodes() {
        return Err(Error::InvalidDimension(format!(
            "labeling length {} vs {} nodes",
            s.len(),
            bm.n_nodes()
        )));
    }
    let mut score = 0.0;
    for i in 0..s.len() {
        score += bm.unary[i] * s.spin(i);
    }
    for (idx, &(i, j)) in bm.graph.edges().iter().enumerate() {
        score += bm.pairwise[idx] * s.spin(i) * s.spin(j);
    }
    Ok(score)
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log σ(z)`.
fn log_logistic(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Local field at node `i`: `Wᵢ + Σ_{j ∈ E_i} Wᵢⱼ bⱼ`.
fn local_field(bm: &BoltzmannMachine, b: &SpinVector, i: usize) -> f64 {
    let mut h = bm.unary[i];
    for &(j, eidx) in bm.graph.neighbors(i) {
        h += bm.pairwise[eidx] * b.spin(j);
    }
    h
}

/// Regularized log pseudo-likelihood of the observation `b`:
/// `Σᵢ log σ(2 bᵢ hᵢ) − λ‖Θ‖²` with `hᵢ` the local field.
pub fn pseudolikelihood_objective(
    bm: &BoltzmannMachine,
    b: &SpinVector,
    lambda: f64,
) -> Result<f64> {
    if b.len() != bm.n_nodes() {
        return Err(Error::InvalidDimension(format!(
            "observation length {} vs {} nodes",
            b.len(),
            bm.n_nodes()
        )));
    }
    let mut obj = 0.0;
    for i in 0..b.len() {
        obj += log_logistic(2.0 * b.spin(i) * local_field(bm, b, i));
    }
    let reg = bm.unary.norm_squared() + bm.pairwise.iter().map(|w| w * w).sum::<f64>();
    Ok(obj - lambda * reg)
}

/// Gradient of [`pseudolikelihood_objective`] in the same layout as the
/// machine's parameters: `(unary gradient, pairwise gradient)`.
pub fn pseudolikelihood_gradient(
    bm: &BoltzmannMachine,
    b: &SpinVector,
    lambda: f64,
) -> Result<(DVector<f64>, Vec<f64>)> {
    if b.len() != bm.n_nodes() {
        return Err(Error::InvalidDimension(format!(
            "observation length {} vs {} nodes",
            b.len(),
            bm.n_nodes()
        )));
    }
    // d/dz log σ(z) = σ(−z); z_i = 2 b_i h_i.
    let residual: Vec<f64> = (0..b.len())
        .map(|i| logistic(-2.0 * b.spin(i) * local_field(bm, b, i)))
        .collect();
    let mut g_unary = DVector::zeros(b.len());
    for i in 0..b.len() {
        g_unary[i] = 2.0 * b.spin(i) * residual[i] - 2.0 * lambda * bm.unary[i];
    }
    let mut g_pairwise = vec![0.0; bm.graph.n_edges()];
    for (idx, &(i, j)) in bm.graph.edges().iter().enumerate() {
        let from_i = 2.0 * b.spin(i) * residual[i] * b.spin(j);
        let from_j = 2.0 * b.spin(j) * residual[j] * b.spin(i);
        g_pairwise[idx] = from_i + from_j - 2.0 * lambda * bm.pairwise[idx];
    }
    Ok((g_unary, g_pairwise))
}

/// Fit Boltzmann-machine weights to a single observed labeling by
/// gradient ascent on the regularized log pseudo-likelihood. Starts
/// from zero weights; a proposed step that would decrease the objective
/// halves the step size until it does not, so accepted iterations are
/// non-decreasing.
pub fn learn_pseudolikelihood(
    b: &SpinVector,
    graph: Graph,
    max_iters: usize,
    step: f64,
) -> Result<BoltzmannMachine> {
    if b.len() != graph.n_nodes() {
        return Err(Error::InvalidDimension(format!(
            "observation length {} vs {} nodes",
            b.len(),
            graph.n_nodes()
        )));
    }
    let mut bm = BoltzmannMachine::zeros(graph);
    let mut step = step;
    let mut obj = pseudolikelihood_objective(&bm, b, PL_LAMBDA)?;
    for _ in 0..max_iters {
        let (g_unary, g_pairwise) = pseudolikelihood_gradient(&bm, b, PL_LAMBDA)?;
        loop {
            let cand_unary = &bm.unary + step * &g_unary;
            let cand_pairwise: Vec<f64> = bm
                .pairwise
                .iter()
                .zip(&g_pairwise)
                .map(|(w, g)| w + step * g)
                .collect();
            let cand = BoltzmannMachine {
                graph: bm.graph.clone(),
                unary: cand_unary,
                pairwise: cand_pairwise,
            };
            let cand_obj = pseudolikelihood_objective(&cand, b, PL_LAMBDA)?;
            if !cand_obj.is_finite() {
                return Err(Error::Numeric(
                    "pseudo-likelihood objective diverged".into(),
                ));
            }
            if cand_obj >= obj {
                bm = cand;
                obj = cand_obj;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return Ok(bm);
            }
        }
    }
    Ok(bm)
}

/// Inference mode for [`map_inference`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapMode {
    /// Exhaustive enumeration; limited to [`EXACT_MAP_MAX_NODES`].
    Exact,
    /// Damped synchronous max-product belief propagation.
    Loopy,
}

/// The MAP objective: `Σᵢ cᵢ·vᵢ − log-score(s)` with `v = (s+1)/2`.
/// Lower is better.
pub fn map_objective(
    unary_cost: &DVector<f64>,
    bm: &BoltzmannMachine,
    s: &SpinVector,
) -> Result<f64> {
    if unary_cost.len() != s.len() {
        return Err(Error::InvalidDimension(format!(
            "cost length {} vs labeling length {}",
            unary_cost.len(),
            s.len()
        )));
    }
    let mut cost = 0.0;
    for i in 0..s.len() {
        cost += unary_cost[i] * s.v01(i);
    }
    Ok(cost - bm_log_score(s, bm)?)
}

/// Minimize `Σᵢ cᵢ·vᵢ − log-score(s)` over labelings.
///
/// `Exact` enumerates every labeling and, among ties, keeps the one
/// with the fewest/lowest active bits (all-inactive first). `Loopy`
/// runs damped max-product for at most 200 sweeps, decodes beliefs
/// (ties decode to inactive), and returns whichever of the decoded and
/// the all-inactive labeling scores better.
pub fn map_inference(
    unary_cost: &DVector<f64>,
    bm: &BoltzmannMachine,
    mode: MapMode,
) -> Result<SpinVector> {
    let n = bm.n_nodes();
    if unary_cost.len() != n {
        return Err(Error::InvalidDimension(format!(
            "cost length {} vs {} nodes",
            unary_cost.len(),
            n
        )));
    }
    match mode {
        MapMode::Exact => {
            if n > EXACT_MAP_MAX_NODES {
                return Err(Error::Capacity(format!(
                    "exact MAP supports at most {EXACT_MAP_MAX_NODES} nodes, got {n}"
                )));
            }
            let mut best = SpinVector::all_minus(n);
            let mut best_cost = map_objective(unary_cost, bm, &best)?;
            for code in 1u64..(1u64 << n) {
                let s = SpinVector::from_active((0..n).map(|i| code >> i & 1 == 1).collect());
                let cost = map_objective(unary_cost, bm, &s)?;
                if cost < best_cost {
                    best = s;
                    best_cost = cost;
                }
            }
            Ok(best)
        }
        MapMode::Loopy => {
            let decoded = loopy_max_product(unary_cost, bm);
            let decoded_cost = map_objective(unary_cost, bm, &decoded)?;
            let baseline = SpinVector::all_minus(n);
            let baseline_cost = map_objective(unary_cost, bm, &baseline)?;
            if decoded_cost < baseline_cost {
                Ok(decoded)
            } else {
                Ok(baseline)
            }
        }
    }
}

/// Min-sum message passing on the pairwise model
/// `θᵢ(+1) = cᵢ − Wᵢ`, `θᵢ(−1) = Wᵢ`, `θᵢⱼ(sᵢ,sⱼ) = −Wᵢⱼ sᵢ sⱼ`.
/// Messages are kept normalized to their inactive entry; the scalar
/// stored per directed edge is `m(+1) − m(−1)`.
fn loopy_max_product(unary_cost: &DVector<f64>, bm: &BoltzmannMachine) -> SpinVector {
    let n = bm.n_nodes();
    let n_edges = bm.graph.n_edges();
    let theta_plus: Vec<f64> = (0..n).map(|i| unary_cost[i] - bm.unary[i]).collect();
    let theta_minus: Vec<f64> = (0..n).map(|i| bm.unary[i]).collect();

    // Directed message index: 2*edge for low->high, 2*edge+1 for high->low.
    let mut msg = vec![0.0f64; 2 * n_edges];
    let mut next = vec![0.0f64; 2 * n_edges];
    let dir_index = |eidx: usize, from: usize, edge: (usize, usize)| -> usize {
        if from == edge.0 {
            2 * eidx
        } else {
            2 * eidx + 1
        }
    };

    for _sweep in 0..BP_MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for (eidx, &(a, b)) in bm.graph.edges().iter().enumerate() {
            let w = bm.pairwise[eidx];
            for (from, to) in [(a, b), (b, a)] {
                // Accumulated (normalized) belief at `from`, excluding `to`.
                let mut c_plus = theta_plus[from];
                let c_minus = theta_minus[from];
                for &(nbr, ne) in bm.graph.neighbors(from) {
                    if nbr == to {
                        continue;
                    }
                    c_plus += msg[dir_index(ne, nbr, bm.graph.edges()[ne])];
                }
                // m(s_to) = min over s_from of c(s_from) + θ(s_from, s_to).
                let m_plus = (c_plus - w).min(c_minus + w);
                let m_minus = (c_plus + w).min(c_minus - w);
                let idx = dir_index(eidx, from, (a, b));
                let damped = BP_DAMPING * msg[idx] + (1.0 - BP_DAMPING) * (m_plus - m_minus);
                max_change = max_change.max((damped - msg[idx]).abs());
                next[idx] = damped;
            }
        }
        msg.copy_from_slice(&next);
        if max_change < BP_TOL {
            break;
        }
    }

    let mut active = vec![false; n];
    for i in 0..n {
        let mut belief_plus = theta_plus[i];
        let belief_minus = theta_minus[i];
        for &(nbr, ne) in bm.graph.neighbors(i) {
            belief_plus += msg[dir_index(ne, nbr, bm.graph.edges()[ne])];
        }
        // Ties decode to inactive.
        active[i] = belief_plus < belief_minus;
    }
    SpinVector::from_active(active)
}
