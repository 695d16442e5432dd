//! Deterministic synchronous message-passing simulator.
//!
//! Drives a set of [`NodeState`](crate::node::NodeState) machines through
//! lock-step iterations with two communication rounds each, maintaining a
//! per-node, per-iteration traffic ledger and a per-iteration snapshot trail.
//!
//! Determinism contract: given the same inputs and seed, the sequence of
//! snapshots is bitwise identical run to run, *and* identical between
//! sequential and parallel node execution — node updates are independent
//! within a phase and every cross-node reduction runs sequentially in node
//! order.
//!
//! Randomness is organized as named streams derived from the master seed via
//! [`derive_seed`], so adding a consumer never shifts another stream.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::node::{NodeState, Round1Payload};
use crate::topology::{RhoSchedule, Topology};

/// Communication rounds within one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Round {
    /// Round 1: coefficients and pre-scaled dual slices.
    AlphaEta,
    /// Round 2: projections of consensus variables.
    Projection,
}

/// Message payloads.
#[derive(Debug, Clone)]
pub enum Payload {
    /// Round-1 payload.
    AlphaEta(Round1Payload),
    /// Round-2 payload: projection of the sender's consensus variable onto
    /// the destination's feature block.
    Projection(DVector<f64>),
}

/// One message on the simulated network.
#[derive(Debug, Clone)]
pub struct Message {
    /// Which round the message belongs to.
    pub round: Round,
    /// Sending node.
    pub src: usize,
    /// Receiving node.
    pub dst: usize,
    /// Iteration the message belongs to.
    pub iteration: usize,
    /// Carried payload.
    pub payload: Payload,
}

impl Message {
    /// Number of scalar values carried (the unit of the traffic ledger).
    pub fn value_count(&self) -> usize {
        match &self.payload {
            Payload::AlphaEta(p) => p.value_count(),
            Payload::Projection(v) => v.len(),
        }
    }
}

/// Traffic counters for one node over one accounting period.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeTraffic {
    /// Messages sent.
    pub sent_messages: usize,
    /// Messages received.
    pub received_messages: usize,
    /// Scalar values sent.
    pub sent_values: usize,
    /// Scalar values received.
    pub received_values: usize,
    /// Portion of `sent_values` belonging to round 1.
    pub sent_values_round1: usize,
    /// Portion of `sent_values` belonging to round 2.
    pub sent_values_round2: usize,
}

impl NodeTraffic {
    fn add_sent(&mut self, round: Round, values: usize) {
        self.sent_messages += 1;
        self.sent_values += values;
        match round {
            Round::AlphaEta => self.sent_values_round1 += values,
            Round::Projection => self.sent_values_round2 += values,
        }
    }

    fn add_received(&mut self, values: usize) {
        self.received_messages += 1;
        self.received_values += values;
    }
}

/// Complete traffic accounting for a run.
#[derive(Debug, Clone, Default)]
pub struct TrafficLedger {
    /// Per-node counters for the one-time initial data exchange.
    pub init_exchange: Vec<NodeTraffic>,
    /// Per-iteration, per-node counters for the two communication rounds.
    pub per_iteration: Vec<Vec<NodeTraffic>>,
}

impl TrafficLedger {
    /// Total values sent across all iterations (excluding the initial
    /// exchange). Every sent value is received exactly once, so this equals
    /// the network-wide value count.
    pub fn iteration_values_sent(&self) -> usize {
        self.per_iteration
            .iter()
            .flat_map(|nodes| nodes.iter().map(|t| t.sent_values))
            .sum()
    }

    /// Total values sent during the initial data exchange.
    pub fn init_values_sent(&self) -> usize {
        self.init_exchange.iter().map(|t| t.sent_values).sum()
    }

    /// Total bytes sent over the whole run at 8 bytes per value.
    pub fn total_bytes(&self) -> usize {
        8 * (self.init_values_sent() + self.iteration_values_sent())
    }
}

/// Per-node state captured at the end of an iteration.
#[derive(Debug, Clone)]
pub struct NodeSnapshot {
    /// Coefficient vector.
    pub alpha: DVector<f64>,
    /// The node's augmented-Lagrangian contribution.
    pub local_lagrangian: f64,
    /// Kernel-norm primal residual over the node's constraints.
    pub primal_residual: f64,
    /// Traffic during the iteration (zeros in the initial snapshot).
    pub traffic: NodeTraffic,
    /// Shrinkage factor of the node's consensus step (1 in the initial
    /// snapshot).
    pub consensus_sigma: f64,
    /// Norm of the node's (shrunk) consensus variable (0 in the initial
    /// snapshot).
    pub consensus_norm: f64,
    /// Dual kernel products, captured when
    /// [`EngineConfig::capture_internals`] is set.
    pub d_cols: Option<DMatrix<f64>>,
    /// Received consensus projections, captured when
    /// [`EngineConfig::capture_internals`] is set.
    pub v_cols: Option<DMatrix<f64>>,
}

/// Global state captured at the end of an iteration.
#[derive(Debug, Clone)]
pub struct IterationSnapshot {
    /// 0 for the initial state, `t + 1` after iteration `t`.
    pub iteration: usize,
    /// Per-node captures, in node order.
    pub nodes: Vec<NodeSnapshot>,
    /// Sum of the per-node Lagrangian contributions.
    pub lagrangian: f64,
    /// Maximum per-node primal residual.
    pub max_primal_residual: f64,
}

/// Engine configuration.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Kernel evaluated on every owner pair.
    pub kernel: KernelSpec,
    /// Penalty-weight schedule shared by all nodes.
    pub schedule: RhoSchedule,
    /// Standard deviation of the noise added to each neighbor copy during
    /// the initial exchange (0 for exact copies).
    pub noise_std: f64,
    /// Master seed; all randomness derives from it.
    pub seed: u64,
    /// Iteration budget.
    pub max_iterations: usize,
    /// Stop early once the maximum primal residual falls below this
    /// (set to 0 to always run the full budget).
    pub residual_tol: f64,
    /// Relative ridge factor for every factored system.
    pub jitter_factor: f64,
    /// Execute node updates on the rayon thread pool. Output is bitwise
    /// identical either way.
    pub parallel: bool,
    /// Capture dual kernel products and received consensus projections in
    /// every snapshot.
    pub capture_internals: bool,
}

/// Result of a simulation run.
#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Snapshot trail: index 0 is the initial state, index `t + 1` the state
    /// after iteration `t`.
    pub snapshots: Vec<IterationSnapshot>,
    /// Traffic accounting.
    pub ledger: TrafficLedger,
    /// Number of iterations executed.
    pub iterations_run: usize,
    /// Whether the residual tolerance stopped the run early.
    pub reached_tolerance: bool,
    /// Wall-clock seconds per executed iteration.
    pub iteration_seconds: Vec<f64>,
}

impl SimOutput {
    /// Final coefficient vectors in node order.
    pub fn final_alphas(&self) -> Vec<DVector<f64>> {
        self.snapshots
            .last()
            .map(|s| s.nodes.iter().map(|n| n.alpha.clone()).collect())
            .unwrap_or_default()
    }
}

/// Stream tag: per-node initial `alpha` vectors.
pub const STREAM_ALPHA: u64 = 1;
/// Stream tag: per-directed-edge channel noise in the initial exchange.
pub const STREAM_NOISE: u64 = 2;
/// Stream tag: dataset partitioning.
pub const STREAM_PARTITION: u64 = 3;
/// Stream tag: synthetic data generation.
pub const STREAM_DATA: u64 = 4;
/// Stream tag: subset selection (for example the bandwidth heuristic).
pub const STREAM_SUBSET: u64 = 5;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from the master seed, a stream tag, and two
/// stream-specific indices, by chaining a splitmix64-style mix.
pub fn derive_seed(master: u64, stream: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(splitmix64(master) ^ stream) ^ a) ^ b)
}

/// Simulates the one-time initial exchange of raw sample blocks.
///
/// Every node sends its block to each of its neighbors; the copy received
/// over the directed edge `src → dst` is perturbed entrywise by
/// `noise_std · N(0,1)` noise drawn from the seed
/// `derive_seed(seed, STREAM_NOISE, src, dst)`. With `noise_std == 0` the
/// copy is an exact clone (no RNG is consumed).
///
/// Returns per-destination neighbor data and per-node traffic counters.
#[allow(clippy::type_complexity)]
pub fn init_exchange(
    blocks: &[DMatrix<f64>],
    topo: &Topology,
    noise_std: f64,
    seed: u64,
) -> Result<(Vec<BTreeMap<usize, DMatrix<f64>>>, Vec<NodeTraffic>)> {
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::Config(format!(
            "noise_std must be finite and non-negative, got {noise_std}"
        )));
    }
    let j = topo.node_count();
    let mut received: Vec<BTreeMap<usize, DMatrix<f64>>> = vec![BTreeMap::new(); j];
    let mut traffic = vec![NodeTraffic::default(); j];
    for dst in 0..j {
        for src in topo.neighbors(dst) {
            let mut copy = blocks[src].clone();
            if noise_std > 0.0 {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_NOISE, src as u64, dst as u64));
                for v in copy.as_mut_slice() {
                    *v += noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let values = copy.nrows() * copy.ncols();
            traffic[src].sent_messages += 1;
            traffic[src].sent_values += values;
            traffic[dst].add_received(values);
            received[dst].insert(src, copy);
        }
    }
    Ok((received, traffic))
}

fn try_update<F>(parallel: bool, nodes: &mut [NodeState], f: F) -> Result<()>
where
    F: Fn(&mut NodeState) -> Result<()> + Sync + Send,
{
    if parallel {
        nodes.par_iter_mut().map(f).collect::<Result<Vec<_>>>()?;
    } else {
        for n in nodes.iter_mut() {
            f(n)?;
        }
    }
    Ok(())
}

/// Output of one node's consensus phase.
struct ConsensusOut {
    sigma: f64,
    norm: f64,
    /// Projection onto the node itself (when it holds a self-constraint).
    self_projection: Option<DVector<f64>>,
    /// Round-2 payloads for the neighbors.
    outbound: Vec<(usize, DVector<f64>)>,
}

fn snapshot_nodes(
    nodes: &[NodeState],
    iteration: usize,
    traffic: &[NodeTraffic],
    consensus: Option<&[ConsensusOut]>,
    capture_internals: bool,
) -> IterationSnapshot {
    let mut captured = Vec::with_capacity(nodes.len());
    let mut lagrangian = 0.0;
    let mut max_resid = 0.0f64;
    for (i, n) in nodes.iter().enumerate() {
        let local = n.local_lagrangian();
        let resid = n.primal_residual();
        lagrangian += local;
        max_resid = max_resid.max(resid);
        let (sigma, norm) = consensus
            .map(|c| (c[i].sigma, c[i].norm))
            .unwrap_or((1.0, 0.0));
        captured.push(NodeSnapshot {
            alpha: n.alpha.clone(),
            local_lagrangian: local,
            primal_residual: resid,
            traffic: traffic[i],
            consensus_sigma: sigma,
            consensus_norm: norm,
            d_cols: capture_internals.then(|| n.d_cols().clone()),
            v_cols: capture_internals.then(|| n.v_cols().clone()),
        });
    }
    IterationSnapshot {
        iteration,
        nodes: captured,
        lagrangian,
        max_primal_residual: max_resid,
    }
}

/// Runs the full simulation on raw per-node sample blocks.
///
/// `blocks[j]` holds node `j`'s samples (one per column; all nodes share the
/// feature dimension). The run stops at `cfg.max_iterations` or as soon as
/// the maximum per-node primal residual drops below `cfg.residual_tol`,
/// whichever comes first.
pub fn run(blocks: &[DMatrix<f64>], topo: &Topology, cfg: &EngineConfig) -> Result<SimOutput> {
    cfg.kernel.validate()?;
    if blocks.len() != topo.node_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} sample blocks for {} nodes",
            blocks.len(),
            topo.node_count()
        )));
    }
    if !(cfg.residual_tol.is_finite() && cfg.residual_tol >= 0.0) {
        return Err(Error::Config(format!(
            "residual_tol must be finite and non-negative, got {}",
            cfg.residual_tol
        )));
    }
    if !(cfg.jitter_factor.is_finite() && cfg.jitter_factor >= 0.0) {
        return Err(Error::Config(format!(
            "jitter_factor must be finite and non-negative, got {}",
            cfg.jitter_factor
        )));
    }

    let n_nodes = topo.node_count();
    let (neighbor_data, init_traffic) = init_exchange(blocks, topo, cfg.noise_std, cfg.seed)?;

    // Node construction (independent per node, so parallelizable).
    let build = |(id, data): (usize, &BTreeMap<usize, DMatrix<f64>>)| -> Result<NodeState> {
        NodeState::init(
            id,
            &blocks[id],
            data,
            topo,
            &cfg.kernel,
            cfg.schedule.clone(),
            cfg.jitter_factor,
            derive_seed(cfg.seed, STREAM_ALPHA, id as u64, 0),
        )
    };
    let mut nodes: Vec<NodeState> = if cfg.parallel {
        neighbor_data
            .par_iter()
            .enumerate()
            .map(build)
            .collect::<Result<Vec<_>>>()?
    } else {
        neighbor_data
            .iter()
            .enumerate()
            .map(build)
            .collect::<Result<Vec<_>>>()?
    };

    let zero_traffic = vec![NodeTraffic::default(); n_nodes];
    let mut snapshots = vec![snapshot_nodes(
        &nodes,
        0,
        &zero_traffic,
        None,
        cfg.capture_internals,
    )];
    let mut ledger = TrafficLedger {
        init_exchange: init_traffic,
        per_iteration: Vec::new(),
    };
    let mut iteration_seconds = Vec::new();
    let mut reached_tolerance = false;
    let mut iterations_run = 0;

    for t in 0..cfg.max_iterations {
        let started = Instant::now();
        let mut traffic = vec![NodeTraffic::default(); n_nodes];

        try_update(cfg.parallel, &mut nodes, |n| n.advance_to_iteration(t))?;

        // Round 1: build, then deliver in node order.
        let round1: Vec<Vec<(usize, Round1Payload)>> =
            nodes.iter().map(|n| n.make_round1_messages()).collect();
        let mut inboxes: Vec<BTreeMap<usize, Round1Payload>> = vec![BTreeMap::new(); n_nodes];
        for (src, out) in round1.into_iter().enumerate() {
            for (dst, payload) in out {
                let msg = Message {
                    round: Round::AlphaEta,
                    src,
                    dst,
                    iteration: t,
                    payload: Payload::AlphaEta(payload),
                };
                let values = msg.value_count();
                traffic[src].add_sent(Round::AlphaEta, values);
                traffic[dst].add_received(values);
                let Payload::AlphaEta(p) = msg.payload else {
                    unreachable!()
                };
                inboxes[dst].insert(src, p);
            }
        }

        // Consensus step and round-2 construction (read-only on nodes).
        let consensus_phase = |(n, inbox): (&NodeState, &BTreeMap<usize, Round1Payload>)| {
            let z = n.z_step(inbox)?;
            let id = n.id();
            let self_projection = if n.omega().contains(&id) {
                Some(n.project_z_onto(&z, id)?)
            } else {
                None
            };
            let mut outbound = Vec::new();
            for &m in n.omega() {
                if m != id {
                    outbound.push((m, n.project_z_onto(&z, m)?));
                }
            }
            Ok(ConsensusOut {
                sigma: z.sigma,
                norm: z.norm(),
                self_projection,
                outbound,
            })
        };
        let consensus: Vec<ConsensusOut> = if cfg.parallel {
            nodes
                .par_iter()
                .zip(inboxes.par_iter())
                .map(consensus_phase)
                .collect::<Result<Vec<_>>>()?
        } else {
            nodes
                .iter()
                .zip(inboxes.iter())
                .map(consensus_phase)
                .collect::<Result<Vec<_>>>()?
        };

        // Round 2: deliver in node order; the self-projection never touches
        // the network.
        for (src, c) in consensus.iter().enumerate() {
            if let Some(v) = &c.self_projection {
                nodes[src].set_v_column(src, v.clone())?;
            }
            for (dst, v) in &c.outbound {
                let msg = Message {
                    round: Round::Projection,
                    src,
                    dst: *dst,
                    iteration: t,
                    payload: Payload::Projection(v.clone()),
                };
                let values = msg.value_count();
                traffic[src].add_sent(Round::Projection, values);
                traffic[*dst].add_received(values);
                let Payload::Projection(p) = msg.payload else {
                    unreachable!()
                };
                nodes[*dst].set_v_column(src, p)?;
            }
        }

        try_update(cfg.parallel, &mut nodes, |n| n.alpha_step())?;
        try_update(cfg.parallel, &mut nodes, |n| {
            n.eta_step();
            Ok(())
        })?;

        let snap = snapshot_nodes(&nodes, t + 1, &traffic, Some(&consensus), cfg.capture_internals);
        let max_resid = snap.max_primal_residual;
        snapshots.push(snap);
        ledger.per_iteration.push(traffic);
        iteration_seconds.push(started.elapsed().as_secs_f64());
        iterations_run = t + 1;

        if cfg.residual_tol > 0.0 && max_resid < cfg.residual_tol {
            reached_tolerance = true;
            break;
        }
    }

    Ok(SimOutput {
        snapshots,
        ledger,
        iterations_run,
        reached_tolerance,
        iteration_seconds,
    })
}
