//! Communication topologies and consensus penalty weights.
//!
//! A topology fixes, for every node `j`, an ordered neighborhood `Ω_j`:
//! the set of nodes whose consensus variables node `j` constrains itself
//! against (optionally including `j` itself). Neighborhoods are symmetric
//! (`l ∈ Ω_j ⟺ j ∈ Ω_l`) and the underlying graph must be connected.
//!
//! Penalty weights `ρ_{l,j}` attach to the constraint held at node `l`
//! referencing node `j`'s consensus variable. This crate supports two weight
//! classes — one for self-constraints (`l == j`) and one for neighbor
//! constraints — with an iteration-indexed schedule for the neighbor class.
//!
//! Two derived quantities matter downstream:
//!
//! * [`h_entry`] — the aggregation weight `1 / Σ_{l∈Ω_j} ρ_{l,j}` with which
//!   node `j`'s consensus variable averages its incoming contributions;
//! * [`rho_min`] — the penalty floor above which the per-iteration decrease
//!   bound of the augmented Lagrangian is guaranteed (see
//!   [`curvature_coefficient`]).

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::GramBlock;

/// Named topology families.
#[derive(Debug, Clone, PartialEq)]
pub enum TopologyKind {
    /// Cyclic lattice: node `j` is adjacent to the `k/2` nearest nodes on
    /// each side. `k` must be even and satisfy `1 ≤ k < J`.
    Ring {
        /// Number of neighbors per node (excluding self).
        k: usize,
    },
    /// Every node adjacent to every other node.
    Complete,
    /// Explicit undirected edge list over node ids `0..J`.
    Custom {
        /// Undirected edges; direction and duplicates are ignored.
        edges: Vec<(usize, usize)>,
    },
}

/// An immutable, validated communication topology.
#[derive(Debug, Clone)]
pub struct Topology {
    node_count: usize,
    include_self: bool,
    /// `omegas[j]` is `Ω_j` in its canonical order.
    omegas: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds and validates a topology over `node_count` nodes.
    ///
    /// With `include_self`, every node's own id appears in its neighborhood
    /// (ring and custom orderings place it in its natural position; see
    /// [`Topology::omega`]). The graph induced by the neighborhoods must be
    /// connected and every neighborhood must be nonempty.
    pub fn build(kind: &TopologyKind, node_count: usize, include_self: bool) -> Result<Topology> {
        if node_count == 0 {
            return Err(Error::Topology("node count must be at least 1".into()));
        }
        let omegas = match kind {
            TopologyKind::Ring { k } => {
                if node_count < 2 {
                    return Err(Error::Topology(
                        "ring topology needs at least 2 nodes".into(),
                    ));
                }
                if *k == 0 || *k % 2 != 0 {
                    return Err(Error::Topology(format!(
                        "ring degree must be a positive even number, got {k}"
                    )));
                }
                if *k >= node_count {
                    return Err(Error::Topology(format!(
                        "ring degree {k} must be below the node count {node_count}"
                    )));
                }
                let half = (*k / 2) as i64;
                let j64 = node_count as i64;
                (0..node_count)
                    .map(|j| {
                        let mut omega = Vec::with_capacity(k + 1);
                        for off in -half..=half {
                            if off == 0 && !include_self {
                                continue;
                            }
                            omega.push(((j as i64 + off).rem_euclid(j64)) as usize);
                        }
                        omega
                    })
                    .collect()
            }
            TopologyKind::Complete => (0..node_count)
                .map(|j| {
                    (0..node_count)
                        .filter(|&l| include_self || l != j)
                        .collect::<Vec<_>>()
                })
                .collect(),
            TopologyKind::Custom { edges } => {
                let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); node_count];
                for &(u, v) in edges {
                    if u >= node_count || v >= node_count {
                        return Err(Error::Topology(format!(
                            "edge ({u}, {v}) references a node outside 0..{node_count}"
                        )));
                    }
                    if u == v {
                        return Err(Error::Topology(format!(
                            "self-edge ({u}, {v}) is not allowed; self-constraints \
                             are controlled by the include_self flag"
                        )));
                    }
                    adjacency[u].insert(v);
                    adjacency[v].insert(u);
                }
                adjacency
                    .iter()
                    .enumerate()
                    .map(|(j, nbrs)| {
                        let mut omega: BTreeSet<usize> = nbrs.clone();
                        if include_self {
                            omega.insert(j);
                        }
                        omega.into_iter().collect::<Vec<_>>()
                    })
                    .collect()
            }
        };

        let topo = Topology {
            node_count,
            include_self,
            omegas,
        };
        topo.check_nonempty()?;
        topo.check_symmetry()?;
        topo.check_connected()?;
        Ok(topo)
    }

    /// Reads an undirected edge list (`u v` per line, `#` comments and blank
    /// lines allowed) and builds a [`TopologyKind::Custom`] topology.
    pub fn from_edge_list_file(
        path: &Path,
        node_count: usize,
        include_self: bool,
    ) -> Result<Topology> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<usize> {
                tok.and_then(|t| t.parse::<usize>().ok()).ok_or_else(|| {
                    Error::Topology(format!(
                        "{}:{}: expected two node ids, got {line:?}",
                        path.display(),
                        lineno + 1
                    ))
                })
            };
            let u = parse(parts.next())?;
            let v = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(Error::Topology(format!(
                    "{}:{}: expected two node ids, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            }
            edges.push((u, v));
        }
        Topology::build(&TopologyKind::Custom { edges }, node_count, include_self)
    }

    fn check_nonempty(&self) -> Result<()> {
        for (j, omega) in self.omegas.iter().enumerate() {
            if omega.is_empty() {
                return Err(Error::Topology(format!("node {j} has an empty neighborhood")));
            }
        }
        Ok(())
    }

    fn check_symmetry(&self) -> Result<()> {
        for (j, omega) in self.omegas.iter().enumerate() {
            for &l in omega {
                if l != j && !self.omegas[l].contains(&j) {
                    return Err(Error::Topology(format!(
                        "asymmetric neighborhood: {l} ∈ Ω_{j} but {j} ∉ Ω_{l}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_connected(&self) -> Result<()> {
        let mut seen = vec![false; self.node_count];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(j) = queue.pop_front() {
            for &l in &self.omegas[j] {
                if !seen[l] {
                    seen[l] = true;
                    count += 1;
                    queue.push_back(l);
                }
            }
        }
        if count != self.node_count {
            return Err(Error::Topology(format!(
                "graph is disconnected: only {count} of {} nodes reachable from node 0",
                self.node_count
            )));
        }
        Ok(())
    }

    /// Number of nodes.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Whether each node's own id is part of its neighborhood.
    pub fn includes_self(&self) -> bool {
        self.include_self
    }

    /// Ordered neighborhood `Ω_j`.
    ///
    /// Rings list neighbors in cyclic order from `j − k/2` to `j + k/2`;
    /// complete and custom topologies list ids in ascending order.
    pub fn omega(&self, j: usize) -> &[usize] {
        &self.omegas[j]
    }

    /// `|Ω_j|` (self counted when present).
    pub fn degree(&self, j: usize) -> usize {
        self.omegas[j].len()
    }

    /// Neighbors of `j` excluding `j` itself.
    pub fn neighbors(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.omegas[j].iter().copied().filter(move |&l| l != j)
    }
}

/// Penalty weights in force during one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoWeights {
    /// Weight of each self-constraint (`ρ_{j,j}`).
    pub self_weight: f64,
    /// Weight of each neighbor constraint (`ρ_{l,j}`, `l ≠ j`).
    pub neighbor_weight: f64,
}

impl RhoWeights {
    /// Uniform weights: self and neighbor constraints share one value.
    pub fn uniform(rho: f64) -> RhoWeights {
        RhoWeights {
            self_weight: rho,
            neighbor_weight: rho,
        }
    }

    /// The weight `ρ_{holder,owner}` of the constraint held at `holder`
    /// referencing `owner`'s consensus variable.
    pub fn weight(&self, holder: usize, owner: usize) -> f64 {
        if holder == owner {
            self.self_weight
        } else {
            self.neighbor_weight
        }
    }
}

/// Sum `Σ_{l∈Ω_j} ρ_{l,j}` of the weights attached to node `j`'s consensus
/// variable. By symmetry of the two-class weights this also equals
/// `Σ_{q∈Ω_j} ρ_{j,q}`, the sum over the constraints held at `j`.
pub fn weight_sum(topo: &Topology, weights: &RhoWeights, j: usize) -> f64 {
    let deg = topo.degree(j) as f64;
    if topo.includes_self() {
        weights.self_weight + weights.neighbor_weight * (deg - 1.0)
    } else {
        weights.neighbor_weight * deg
    }
}

/// Aggregation weight `h_j = 1 / Σ_{l∈Ω_j} ρ_{l,j}` used when node `j`'s
/// consensus variable averages its incoming contributions.
pub fn h_entry(topo: &Topology, weights: &RhoWeights, j: usize) -> f64 {
    1.0 / weight_sum(topo, weights, j)
}

/// An iteration-indexed penalty schedule: a fixed self-constraint weight and
/// a piecewise-constant neighbor weight.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoSchedule {
    self_weight: f64,
    /// `(from_iteration, value)` segments, first at iteration 0, strictly
    /// increasing iterations.
    neighbor: Vec<(usize, f64)>,
}

impl RhoSchedule {
    /// Constant uniform schedule.
    pub fn uniform(rho: f64) -> Result<RhoSchedule> {
        RhoSchedule::new(rho, vec![(0, rho)])
    }

    /// Builds a schedule from a self weight and neighbor segments.
    pub fn new(self_weight: f64, neighbor: Vec<(usize, f64)>) -> Result<RhoSchedule> {
        if !(self_weight.is_finite() && self_weight > 0.0) {
            return Err(Error::Schedule(format!(
                "self weight must be positive and finite, got {self_weight}"
            )));
        }
        if neighbor.is_empty() {
            return Err(Error::Schedule("neighbor schedule is empty".into()));
        }
        if neighbor[0].0 != 0 {
            return Err(Error::Schedule(format!(
                "neighbor schedule must start at iteration 0, got {}",
                neighbor[0].0
            )));
        }
        for w in neighbor.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Schedule(format!(
                    "neighbor schedule iterations must be strictly increasing \
                     ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        for &(it, v) in &neighbor {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Schedule(format!(
                    "neighbor weight at iteration {it} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(RhoSchedule {
            self_weight,
            neighbor,
        })
    }

    /// Parses a neighbor schedule spec: either a single value (`"50"`) or
    /// comma-separated `value@iteration` segments (`"10@0,50@5,100@10"`).
    pub fn parse_neighbor_spec(spec: &str) -> Result<Vec<(usize, f64)>> {
        let spec = spec.trim();
        if spec.is_empty() {
            return Err(Error::Schedule("empty neighbor schedule spec".into()));
        }
        let mut out = Vec::new();
        for part in spec.split(',') {
            let part = part.trim();
            match part.split_once('@') {
                Some((v, it)) => {
                    let value: f64 = v.trim().parse().map_err(|_| {
                        Error::Schedule(format!("bad weight value {v:?} in {spec:?}"))
                    })?;
                    let iter: usize = it.trim().parse().map_err(|_| {
                        Error::Schedule(format!("bad iteration index {it:?} in {spec:?}"))
                    })?;
                    out.push((iter, value));
                }
                None => {
                    let value: f64 = part.parse().map_err(|_| {
                        Error::Schedule(format!("bad weight value {part:?} in {spec:?}"))
                    })?;
                    out.push((0, value));
                }
            }
        }
        Ok(out)
    }

    /// Weights in force at the given (0-based) iteration.
    pub fn at(&self, iteration: usize) -> RhoWeights {
        let mut value = self.neighbor[0].1;
        for &(from, v) in &self.neighbor {
            if from <= iteration {
                value = v;
            } else {
                break;
            }
        }
        RhoWeights {
            self_weight: self.self_weight,
            neighbor_weight: value,
        }
    }

    /// `Some(ρ)` when the schedule is a single uniform constant.
    pub fn constant_uniform(&self) -> Option<f64> {
        if self.neighbor.len() == 1 && self.neighbor[0].1 == self.self_weight {
            Some(self.self_weight)
        } else {
            None
        }
    }

    /// Smallest weight anywhere in the schedule.
    pub fn min_weight(&self) -> f64 {
        self.neighbor
            .iter()
            .map(|&(_, v)| v)
            .fold(self.self_weight, f64::min)
    }

    /// The fixed self-constraint weight.
    pub fn self_weight(&self) -> f64 {
        self.self_weight
    }

    /// The neighbor segments as `(from_iteration, value)` pairs.
    pub fn neighbor_segments(&self) -> &[(usize, f64)] {
        &self.neighbor
    }
}

/// Penalty floor for a node: the uniform weight above which the node's term
/// in the per-iteration decrease bound of the augmented Lagrangian is
/// guaranteed non-positive.
///
/// For a centered local kernel block with eigenvalues `λ₁ ≥ … ≥ λ_N ≥ 0` and
/// neighborhood size `deg`:
///
/// ```text
/// rho_min = ( sqrt(λ₁⁴ + 8·deg·λ₁·Σλᵢ³) + λ₁² ) / (deg·λ₁)
/// ```
///
/// Fails on a degenerate spectrum (`λ₁ ≈ 0`); negative eigenvalues from
/// rounding are clamped to zero before the cube sum.
pub fn rho_min(centered_local: &GramBlock, degree: usize) -> Result<f64> {
    if degree == 0 {
        return Err(Error::Topology(
            "penalty floor needs a nonempty neighborhood".into(),
        ));
    }
    if centered_local.nrows() != centered_local.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "penalty floor needs a square block, got {}x{}",
            centered_local.nrows(),
            centered_local.ncols()
        )));
    }
    let eig = centered_local.values.clone().symmetric_eigen();
    let lambda1 = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if lambda1 <= 1e-12 {
        return Err(Error::DegenerateSpectrum(format!(
            "penalty floor undefined: top local eigenvalue {lambda1:e}"
        )));
    }
    let cube_sum: f64 = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            let l = l.max(0.0);
            l * l * l
        })
        .sum();
    let deg = degree as f64;
    Ok(((lambda1.powi(4) + 8.0 * deg * lambda1 * cube_sum).sqrt() + lambda1 * lambda1)
        / (deg * lambda1))
}

/// Curvature coefficient of a node's term in the per-iteration decrease
/// bound, as a function of the uniform penalty `rho`, the neighborhood size,
/// and the extreme eigenvalues `λ₁ ≥ λ_N ≥ 0` of the centered local kernel.
///
/// ```text
/// c = (rho·deg − λ₁)·λ₁    when (λ₁ + λ_N) / (2·deg) ≤ rho
///     (rho·deg − λ_N)·λ_N  otherwise
/// ```
///
/// The boundary case belongs to the first branch.
pub fn curvature_coefficient(rho: f64, degree: usize, lambda_max: f64, lambda_min: f64) -> f64 {
    let deg = degree as f64;
    if (lambda_max + lambda_min) / (2.0 * deg) <= rho {
        (rho * deg - lambda_max) * lambda_max
    } else {
        (rho * deg - lambda_min) * lambda_min
    }
}
