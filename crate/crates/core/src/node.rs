//! Per-node state machine for decentralized kernel PCA.
//!
//! Each node `j` holds a private sample block and maintains three groups of
//! variables, all expressed in kernel coordinates so that raw samples never
//! need to leave the node after the initial neighbor exchange:
//!
//! * `alpha` — its kernel-PCA coefficient vector (length `N_j`);
//! * `d_cols` — for every constraint `(j, q)`, `q ∈ Ω_j`, the kernel products
//!   `dⱼq = Ψⱼᵀ ηⱼq` of its scaled dual variable with its own feature block;
//! * `v_cols` — the projections of the neighborhood consensus variables onto
//!   its feature block, refreshed every iteration.
//!
//! One iteration runs in lock step across all nodes:
//!
//! 1. **Round 1** — each node sends `(alpha, dⱼl · h_l)` to every `l ∈ Ω_j`.
//! 2. **Consensus step** — each node aggregates the received contributions
//!    into a representation of its consensus variable `z_j` ([`ZRepresentation`]),
//!    shrinking it onto the unit ball.
//! 3. **Round 2** — each node sends back `v = (projection of z_j onto m)`
//!    for every `m ∈ Ω_j`.
//! 4. **Coefficient step** — `alpha` solves the regularized local system.
//! 5. **Multiplier step** — `d_cols` absorb the residual of each constraint.
//!
//! Aggregation, projection, and all reductions run in fixed neighborhood
//! order, so node updates are bitwise deterministic.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::central;
use crate::error::{Error, Result};
use crate::kernel::{self, FactoredKernel, GramBlock, KernelSpec, SpdSolver};
use crate::topology::{RhoSchedule, RhoWeights, Topology};

/// Round-1 message: the sender's coefficients and the pre-scaled kernel
/// products of its dual variable for the destination's consensus variable.
#[derive(Debug, Clone)]
pub struct Round1Payload {
    /// Sender's current `alpha` (length: sender's sample count).
    pub alpha: DVector<f64>,
    /// `d_{src,dst} · h_dst` (length: sender's sample count).
    pub eta_slice: DVector<f64>,
}

impl Round1Payload {
    /// Number of scalar values carried by this payload.
    pub fn value_count(&self) -> usize {
        self.alpha.len() + self.eta_slice.len()
    }
}

/// A node's consensus variable, represented as coefficients over the feature
/// blocks of its contributors instead of as an explicit feature-space vector.
///
/// The implied vector is `σ · Σ_l Ψ_l · b_l` over contributors `l`; `sigma`
/// is the shrinkage factor that keeps its norm at most one.
#[derive(Debug, Clone)]
pub struct ZRepresentation {
    /// Node whose consensus variable this is.
    pub owner: usize,
    /// Contributing nodes in neighborhood order.
    pub contributors: Vec<usize>,
    /// Coefficient vector `b_l` per contributor (length: contributor's
    /// sample count).
    pub coefficients: Vec<DVector<f64>>,
    /// Shrinkage factor: 1 when the unshrunk norm is at most 1, else the
    /// reciprocal of that norm.
    pub sigma: f64,
    /// Squared norm of the unshrunk vector.
    pub raw_squared_norm: f64,
}

impl ZRepresentation {
    /// Norm of the represented (shrunk) consensus vector.
    pub fn norm(&self) -> f64 {
        self.sigma * self.raw_squared_norm.max(0.0).sqrt()
    }
}

/// How the ridge added to factored systems is chosen.
#[derive(Debug, Clone, Copy)]
enum JitterRule {
    /// `factor · mean(|diagonal|)` of whatever is being factored.
    Relative(f64),
    /// A fixed value for every system (used by synthetic fixtures).
    Absolute(f64),
}

impl JitterRule {
    fn for_matrix(&self, trace_over_n: f64) -> f64 {
        match *self {
            JitterRule::Relative(f) => f * trace_over_n.abs(),
            JitterRule::Absolute(v) => v,
        }
    }
}

/// The complete state of one node.
#[derive(Debug, Clone)]
pub struct NodeState {
    id: usize,
    /// `Ω_id` in canonical order.
    omega: Vec<usize>,
    include_self: bool,
    /// Neighborhood sizes `|Ω_m|` for every `m ∈ Ω_id ∪ {id}`.
    degrees: BTreeMap<usize, usize>,
    /// Sample counts per owner in `Ω_id ∪ {id}`.
    sizes: BTreeMap<usize, usize>,
    /// Centered kernel blocks over `(Ω_id ∪ {id})²`; `(b, a)` is stored as
    /// the exact transpose of `(a, b)`.
    gram: BTreeMap<(usize, usize), GramBlock>,
    /// Ridge-stabilized factorization of each owner's centered block.
    factored: BTreeMap<usize, FactoredKernel>,
    /// Cache of `K_id²`.
    k_sq: DMatrix<f64>,
    /// Top eigenvalue of the node's own centered block.
    lambda1: f64,
    schedule: RhoSchedule,
    weights: RhoWeights,
    /// Factorization of the coefficient-step system `Σρ·K − 2K²` (+ ridge).
    m_solver: SpdSolver,
    jitter: JitterRule,
    /// Current kernel-PCA coefficients.
    pub alpha: DVector<f64>,
    /// Dual kernel products, one column per constraint (neighborhood order).
    d_cols: DMatrix<f64>,
    /// Consensus projections received this iteration, one column per
    /// constraint (neighborhood order).
    v_cols: DMatrix<f64>,
    iteration: usize,
}

impl NodeState {
    /// Deterministic Gaussian start vector for `alpha`, scaled to unit norm.
    pub fn initial_alpha(seed: u64, n: usize) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = DVector::<f64>::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() == 0.0 {
            v[0] = 1.0;
        }
        v /= v.norm();
        v
    }

    /// Initializes a node from raw data.
    ///
    /// `neighbor_data` must hold exactly one sample block per neighbor in
    /// `Ω_id \ {id}` (the copies received during the initial exchange, which
    /// may carry channel noise). All blocks — including centered kernel
    /// blocks between pairs of neighbors — are evaluated locally, so
    /// identical input bits yield identical block bits on every node that
    /// shares an owner pair.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        id: usize,
        own_data: &DMatrix<f64>,
        neighbor_data: &BTreeMap<usize, DMatrix<f64>>,
        topo: &Topology,
        spec: &KernelSpec,
        schedule: RhoSchedule,
        jitter_factor: f64,
        alpha_seed: u64,
    ) -> Result<NodeState> {
        let omega = topo.omega(id).to_vec();
        let expected: Vec<usize> = omega.iter().copied().filter(|&l| l != id).collect();
        let got: Vec<usize> = neighbor_data.keys().copied().collect();
        {
            let mut want = expected.clone();
            want.sort_unstable();
            if want != got {
                return Err(Error::Protocol {
                    node: id,
                    detail: format!(
                        "initial exchange delivered data for {got:?}, expected {want:?}"
                    ),
                });
            }
        }
        let mut degrees = BTreeMap::new();
        for &l in omega.iter().chain(std::iter::once(&id)) {
            degrees.insert(l, topo.degree(l));
        }

        let mut owners: Vec<usize> = omega.clone();
        if !owners.contains(&id) {
            owners.push(id);
        }
        owners.sort_unstable();

        let data_for = |owner: usize| -> &DMatrix<f64> {
            if owner == id {
                own_data
            } else {
                &neighbor_data[&owner]
            }
        };

        let mut blocks = BTreeMap::new();
        for (ai, &a) in owners.iter().enumerate() {
            for &b in owners.iter().skip(ai) {
                let centered =
                    kernel::center(&kernel::gram(spec, a, data_for(a), b, data_for(b))?);
                if a != b {
                    blocks.insert((b, a), centered.transposed());
                }
                blocks.insert((a, b), centered);
            }
        }

        Self::assemble(
            id,
            omega,
            topo.includes_self(),
            degrees,
            blocks,
            schedule,
            JitterRule::Relative(jitter_factor),
            None,
            alpha_seed,
        )
    }

    /// Builds a node directly from pre-computed (already centered or
    /// synthetic) kernel blocks, with a fixed absolute ridge.
    ///
    /// Blocks must be provided for every pair `(a, b)` with `a ≤ b` over
    /// `Ω_id ∪ {id}`; the mirrored blocks are derived as exact transposes.
    /// Intended for tests and diagnostics that need full control over the
    /// kernel content.
    #[allow(clippy::too_many_arguments)]
    pub fn from_blocks(
        id: usize,
        omega: Vec<usize>,
        include_self: bool,
        degrees: BTreeMap<usize, usize>,
        blocks: BTreeMap<(usize, usize), GramBlock>,
        schedule: RhoSchedule,
        jitter: f64,
        alpha0: DVector<f64>,
    ) -> Result<NodeState> {
        let mut full = BTreeMap::new();
        let mut owners: Vec<usize> = omega.clone();
        if !owners.contains(&id) {
            owners.push(id);
        }
        owners.sort_unstable();
        for (ai, &a) in owners.iter().enumerate() {
            for &b in owners.iter().skip(ai) {
                let block = blocks.get(&(a, b)).ok_or_else(|| {
                    Error::Protocol {
                        node: id,
                        detail: format!("missing kernel block ({a}, {b})"),
                    }
                })?;
                if a != b {
                    full.insert((b, a), block.transposed());
                }
                full.insert((a, b), block.clone());
            }
        }
        let mut state = Self::assemble(
            id,
            omega,
            include_self,
            degrees,
            full,
            schedule,
            JitterRule::Absolute(jitter),
            Some(alpha0),
            0,
        )?;
        state.iteration = 0;
        Ok(state)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        id: usize,
        omega: Vec<usize>,
        include_self: bool,
        degrees: BTreeMap<usize, usize>,
        gram: BTreeMap<(usize, usize), GramBlock>,
        schedule: RhoSchedule,
        jitter: JitterRule,
        alpha0: Option<DVector<f64>>,
        alpha_seed: u64,
    ) -> Result<NodeState> {
        if omega.is_empty() {
            return Err(Error::Topology(format!("node {id} has an empty neighborhood")));
        }
        if include_self && !omega.contains(&id) {
            return Err(Error::Topology(format!(
                "node {id}: include_self set but {id} ∉ Ω"
            )));
        }
        if !include_self && omega.contains(&id) {
            return Err(Error::Topology(format!(
                "node {id}: include_self unset but {id} ∈ Ω"
            )));
        }

        let mut sizes = BTreeMap::new();
        for (&(a, b), block) in &gram {
            let na = *sizes.entry(a).or_insert_with(|| block.nrows());
            if na != block.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "node {id}: inconsistent sample count for owner {a}"
                )));
            }
            let nb = *sizes.entry(b).or_insert_with(|| block.ncols());
            if nb != block.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "node {id}: inconsistent sample count for owner {b}"
                )));
            }
        }
        for &l in omega.iter().chain(std::iter::once(&id)) {
            if !degrees.contains_key(&l) {
                return Err(Error::Protocol {
                    node: id,
                    detail: format!("missing neighborhood size for owner {l}"),
                });
            }
            if !sizes.contains_key(&l) {
                return Err(Error::Protocol {
                    node: id,
                    detail: format!("missing kernel blocks for owner {l}"),
                });
            }
        }

        let mut factored = BTreeMap::new();
        let mut owners: Vec<usize> = sizes.keys().copied().collect();
        owners.sort_unstable();
        for &o in &owners {
            let block = &gram[&(o, o)];
            let j = jitter.for_matrix(block.mean_diagonal());
            factored.insert(o, kernel::factor(block, j)?);
        }

        let k_own = &gram[&(id, id)];
        let n_own = k_own.nrows();
        let k_sq = &k_own.values * &k_own.values;
        let (lambda1, _) = central::top_eigenpair(&k_own.values)?;

        let weights = schedule.at(0);
        let m_solver = Self::build_m_solver(
            id,
            &omega,
            include_self,
            &gram[&(id, id)].values,
            &k_sq,
            lambda1,
            &weights,
            &jitter,
        )?;

        let alpha = match alpha0 {
            Some(a) => {
                if a.len() != n_own {
                    return Err(Error::DimensionMismatch(format!(
                        "node {id}: alpha0 has length {} but the node holds {} samples",
                        a.len(),
                        n_own
                    )));
                }
                a
            }
            None => Self::initial_alpha(alpha_seed, n_own),
        };

        let deg = omega.len();
        Ok(NodeState {
            id,
            omega,
            include_self,
            degrees,
            sizes,
            gram,
            factored,
            k_sq,
            lambda1,
            schedule,
            weights,
            m_solver,
            jitter,
            alpha,
            d_cols: DMatrix::zeros(n_own, deg),
            v_cols: DMatrix::zeros(n_own, deg),
            iteration: 0,
        })
    }

    /// Sum `Σ_{m∈Ω_owner} ρ_{m,owner}` for any owner whose neighborhood size
    /// this node knows.
    fn weight_sum_for(&self, owner: usize) -> f64 {
        let deg = self.degrees[&owner] as f64;
        if self.include_self {
            self.weights.self_weight + self.weights.neighbor_weight * (deg - 1.0)
        } else {
            self.weights.neighbor_weight * deg
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_m_solver(
        id: usize,
        omega: &[usize],
        include_self: bool,
        k: &DMatrix<f64>,
        k_sq: &DMatrix<f64>,
        lambda1: f64,
        weights: &RhoWeights,
        jitter: &JitterRule,
    ) -> Result<SpdSolver> {
        let deg = omega.len() as f64;
        let sum_rho = if include_self {
            weights.self_weight + weights.neighbor_weight * (deg - 1.0)
        } else {
            weights.neighbor_weight * deg
        };
        if sum_rho <= 2.0 * lambda1 {
            return Err(Error::RhoTooSmall {
                node: id,
                sum_rho,
                two_lambda1: 2.0 * lambda1,
            });
        }
        let m = k * sum_rho - k_sq * 2.0;
        let n = m.nrows();
        let trace_over_n = m.trace() / n as f64;
        SpdSolver::factor(
            &m,
            jitter.for_matrix(trace_over_n),
            &format!("coefficient system of node {id}"),
        )
    }

    /// Node id.
    pub fn id(&self) -> usize {
        self.id
    }

    /// This node's neighborhood in canonical order.
    pub fn omega(&self) -> &[usize] {
        &self.omega
    }

    /// Number of samples held by this node.
    pub fn n_own(&self) -> usize {
        self.alpha.len()
    }

    /// Iteration index the node is currently configured for.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Penalty weights currently in force.
    pub fn current_weights(&self) -> RhoWeights {
        self.weights
    }

    /// Dual kernel products, one column per constraint in neighborhood order.
    pub fn d_cols(&self) -> &DMatrix<f64> {
        &self.d_cols
    }

    /// Consensus projections, one column per constraint in neighborhood order.
    pub fn v_cols(&self) -> &DMatrix<f64> {
        &self.v_cols
    }

    /// The node's centered kernel block.
    pub fn own_kernel(&self) -> &GramBlock {
        &self.gram[&(self.id, self.id)]
    }

    /// Moves the node to iteration `t`, refreshing penalty weights and
    /// re-factoring the coefficient-step system when the schedule switches.
    pub fn advance_to_iteration(&mut self, t: usize) -> Result<()> {
        let w = self.schedule.at(t);
        if w != self.weights {
            self.weights = w;
            self.m_solver = Self::build_m_solver(
                self.id,
                &self.omega,
                self.include_self,
                &self.gram[&(self.id, self.id)].values,
                &self.k_sq,
                self.lambda1,
                &self.weights,
                &self.jitter,
            )?;
        }
        self.iteration = t;
        Ok(())
    }

    fn position(&self, owner: usize) -> Option<usize> {
        self.omega.iter().position(|&l| l == owner)
    }

    /// Builds the round-1 payload for every neighbor (excluding self), in
    /// neighborhood order. The dual slice is pre-scaled by the destination's
    /// aggregation weight `h_dst`.
    pub fn make_round1_messages(&self) -> Vec<(usize, Round1Payload)> {
        let mut out = Vec::new();
        for (pos, &l) in self.omega.iter().enumerate() {
            if l == self.id {
                continue;
            }
            let h = 1.0 / self.weight_sum_for(l);
            let eta_slice = self.d_cols.column(pos) * h;
            out.push((
                l,
                Round1Payload {
                    alpha: self.alpha.clone(),
                    eta_slice,
                },
            ));
        }
        out
    }

    /// Aggregates the round-1 payloads into this node's consensus variable.
    ///
    /// `received` must contain exactly one payload per neighbor in
    /// `Ω_id \ {id}`; the self-contribution is composed locally and is never
    /// part of any message. Each contributor's coefficient is
    ///
    /// ```text
    /// b_l = (K_l + ε)⁻¹ (d_{l,id}·h_id)  +  ρ_{l,id}·h_id · alpha_l
    /// ```
    ///
    /// and the unshrunk squared norm `Σ_{l,l'} b_lᵀ K_{(l,l')} b_{l'}` decides
    /// the shrinkage factor `σ` (1 inside the unit ball, else `1/‖·‖`).
    pub fn z_step(&self, received: &BTreeMap<usize, Round1Payload>) -> Result<ZRepresentation> {
        let expected: Vec<usize> = self
            .omega
            .iter()
            .copied()
            .filter(|&l| l != self.id)
            .collect();
        for l in received.keys() {
            if !expected.contains(l) {
                return Err(Error::Protocol {
                    node: self.id,
                    detail: format!("unexpected round-1 payload from node {l}"),
                });
            }
        }
        for l in &expected {
            if !received.contains_key(l) {
                return Err(Error::Protocol {
                    node: self.id,
                    detail: format!("missing round-1 payload from node {l}"),
                });
            }
        }

        let h = 1.0 / self.weight_sum_for(self.id);
        let own_slice: Option<DVector<f64>> = self
            .position(self.id)
            .map(|pos| self.d_cols.column(pos) * h);
        let mut coefficients = Vec::with_capacity(self.omega.len());
        for &l in &self.omega {
            let (alpha_l, slice_l): (&DVector<f64>, &DVector<f64>) = if l == self.id {
                (&self.alpha, own_slice.as_ref().expect("self in omega"))
            } else {
                let p = &received[&l];
                let n_l = self.sizes[&l];
                if p.alpha.len() != n_l || p.eta_slice.len() != n_l {
                    return Err(Error::Protocol {
                        node: self.id,
                        detail: format!(
                            "round-1 payload from node {l} has lengths ({}, {}), expected {}",
                            p.alpha.len(),
                            p.eta_slice.len(),
                            n_l
                        ),
                    });
                }
                (&p.alpha, &p.eta_slice)
            };
            let w = self.weights.weight(l, self.id) * h;
            let mut b = self.factored[&l].solve(slice_l);
            b.axpy(w, alpha_l, 1.0);
            coefficients.push(b);
        }

        // ‖ẑ‖² through the kernel blocks, fixed double loop order.
        let mut raw = 0.0;
        for (ai, &a) in self.omega.iter().enumerate() {
            let mut t = DVector::<f64>::zeros(self.sizes[&a]);
            for (bi, &b) in self.omega.iter().enumerate() {
                t.gemv(1.0, &self.gram[&(a, b)].values, &coefficients[bi], 1.0);
            }
            raw += coefficients[ai].dot(&t);
        }
        if !raw.is_finite() {
            return Err(Error::NonFinite(format!(
                "consensus norm at node {} is {raw}",
                self.id
            )));
        }
        let sigma = if raw <= 1.0 { 1.0 } else { 1.0 / raw.sqrt() };

        Ok(ZRepresentation {
            owner: self.id,
            contributors: self.omega.clone(),
            coefficients,
            sigma,
            raw_squared_norm: raw,
        })
    }

    /// Projects a consensus representation onto `target`'s feature block:
    /// `v = σ · Σ_l K_{(target, l)} b_l`, the vector of kernel products the
    /// target needs for its coefficient and multiplier steps.
    pub fn project_z_onto(&self, z: &ZRepresentation, target: usize) -> Result<DVector<f64>> {
        let n_t = *self.sizes.get(&target).ok_or_else(|| Error::Protocol {
            node: self.id,
            detail: format!("cannot project consensus variable onto unknown owner {target}"),
        })?;
        let mut acc = DVector::<f64>::zeros(n_t);
        for (li, &l) in z.contributors.iter().enumerate() {
            let block = self.gram.get(&(target, l)).ok_or_else(|| Error::Protocol {
                node: self.id,
                detail: format!("missing kernel block ({target}, {l}) for projection"),
            })?;
            acc.gemv(1.0, &block.values, &z.coefficients[li], 1.0);
        }
        Ok(acc * z.sigma)
    }

    /// Deposits the round-2 projection received from `from` (or composed
    /// locally for the self-constraint).
    pub fn set_v_column(&mut self, from: usize, v: DVector<f64>) -> Result<()> {
        let pos = self.position(from).ok_or_else(|| Error::Protocol {
            node: self.id,
            detail: format!("round-2 projection from node {from} ∉ Ω"),
        })?;
        if v.len() != self.n_own() {
            return Err(Error::Protocol {
                node: self.id,
                detail: format!(
                    "round-2 projection from node {from} has length {}, expected {}",
                    v.len(),
                    self.n_own()
                ),
            });
        }
        self.v_cols.set_column(pos, &v);
        Ok(())
    }

    /// Coefficient step: solves
    /// `(Σρ·K − 2K² + ε)·alpha = Σ_q (ρ_{id,q}·v_q − d_q)`.
    pub fn alpha_step(&mut self) -> Result<()> {
        let mut rhs = DVector::<f64>::zeros(self.n_own());
        for (pos, &q) in self.omega.iter().enumerate() {
            let w = self.weights.weight(self.id, q);
            rhs.axpy(w, &self.v_cols.column(pos).into_owned(), 1.0);
            rhs.axpy(-1.0, &self.d_cols.column(pos).into_owned(), 1.0);
        }
        let alpha = self.m_solver.solve(&rhs);
        if !alpha.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "coefficient step at node {} produced a non-finite vector",
                self.id
            )));
        }
        self.alpha = alpha;
        Ok(())
    }

    /// Multiplier step: `d_q += ρ_{id,q} · (K·alpha − v_q)` per constraint.
    pub fn eta_step(&mut self) {
        let ka = &self.gram[&(self.id, self.id)].values * &self.alpha;
        for (pos, &q) in self.omega.iter().enumerate() {
            let w = self.weights.weight(self.id, q);
            let mut col = self.d_cols.column_mut(pos);
            for i in 0..ka.len() {
                col[i] += w * (ka[i] - self.v_cols[(i, pos)]);
            }
        }
    }

    /// Per-constraint residual directions `r_q = alpha − (K+ε)⁻¹·v_q` and
    /// their kernel energies `r_qᵀ K r_q`, in neighborhood order.
    fn residual_terms(&self) -> Vec<(DVector<f64>, f64)> {
        let k = &self.gram[&(self.id, self.id)].values;
        let own = &self.factored[&self.id];
        let mut out = Vec::with_capacity(self.omega.len());
        for pos in 0..self.omega.len() {
            let v = self.v_cols.column(pos).into_owned();
            let mut r = own.solve(&v);
            r.axpy(1.0, &self.alpha, -1.0); // r = alpha − K⁻¹v
            let energy = r.dot(&(k * &r));
            out.push((r, energy));
        }
        out
    }

    /// This node's contribution to the global augmented Lagrangian:
    ///
    /// ```text
    /// L_j = −‖K·alpha‖² + Σ_q [ d_qᵀ r_q + (ρ_{id,q}/2)·r_qᵀ K r_q ]
    /// ```
    ///
    /// with `r_q = alpha − (K+ε)⁻¹ v_q`.
    pub fn local_lagrangian(&self) -> f64 {
        let k = &self.gram[&(self.id, self.id)].values;
        let ka = k * &self.alpha;
        let mut total = -ka.norm_squared();
        for (pos, (r, energy)) in self.residual_terms().into_iter().enumerate() {
            let w = self.weights.weight(self.id, self.omega[pos]);
            total += self.d_cols.column(pos).dot(&r) + 0.5 * w * energy;
        }
        total
    }

    /// Kernel-norm primal residual `√(Σ_q r_qᵀ K r_q)` over this node's
    /// constraints.
    pub fn primal_residual(&self) -> f64 {
        let total: f64 = self
            .residual_terms()
            .into_iter()
            .map(|(_, e)| e.max(0.0))
            .sum();
        total.sqrt()
    }
}
