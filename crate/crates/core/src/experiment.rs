//! Config-driven end-to-end runs with persisted result tables.
//!
//! A [`RunConfig`] names a dataset, a topology, a kernel, and the solver
//! knobs; [`run_experiment`] loads and partitions the data, runs the
//! simulator, scores every recorded iteration against the pooled central
//! solution, and writes four artifacts into the output directory:
//!
//! * `run.csv` — one row per (iteration, node): similarity, Lagrangian
//!   contribution, primal residual, traffic counters.
//! * `summary.csv` — final aggregates: mean/min similarity, traffic totals,
//!   wall time, and (optionally) baseline scores.
//! * `config.echo` — the fully resolved configuration, re-runnable as is.
//! * `oracle_diff.csv` — per-iteration gap to the explicit-feature reference
//!   (only with [`RunConfig::oracle`] set).
//!
//! All floats are printed with round-trip precision and row order is fixed,
//! so re-running the same resolved config reproduces `run.csv` byte for
//! byte.

use std::fmt::Write as FmtWrite;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset;
use crate::engine::{self, EngineConfig, SimOutput};
use crate::error::{Error, Result};
use crate::explicit::{run_explicit, ExplicitConfig, FeatureMap};
use crate::kernel::{self, KernelSpec};
use crate::metrics::{Evaluator, SimilarityReport};
use crate::topology::{rho_min, RhoSchedule, Topology, TopologyKind};

/// Default digit filter for the MNIST dataset.
pub const DEFAULT_DIGITS: [u8; 4] = [0, 3, 5, 8];

fn default_digits() -> Vec<u8> {
    DEFAULT_DIGITS.to_vec()
}

fn default_synthetic_dims() -> usize {
    2
}

fn default_neighbors() -> usize {
    2
}

fn default_true() -> bool {
    true
}

fn default_rho_self() -> f64 {
    100.0
}

fn default_rho_neighbor() -> String {
    "100".into()
}

fn default_iters() -> usize {
    15
}

fn default_poly_degree() -> u32 {
    2
}

fn default_poly_coef() -> f64 {
    1.0
}

fn default_jitter() -> f64 {
    1e-6
}

/// Flat, file-loadable description of one experiment.
///
/// Every field has a TOML key of the same name; unknown keys are rejected so
/// typos fail loudly. `seed` is optional only at the parsing stage — a
/// resolved config must carry one.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Data source: `"synthetic"`, `"mnist"`, or `"csv"`.
    pub dataset: String,
    /// Directory holding the MNIST IDX files (dataset `"mnist"`).
    #[serde(default)]
    pub mnist_dir: Option<PathBuf>,
    /// Digits retained from MNIST.
    #[serde(default = "default_digits")]
    pub digits: Vec<u8>,
    /// Sample file for dataset `"csv"` (one sample per line).
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    /// Sample dimension for dataset `"synthetic"`.
    #[serde(default = "default_synthetic_dims")]
    pub synthetic_dims: usize,

    /// Number of nodes `J`.
    pub nodes: usize,
    /// Samples held by each node.
    pub per_node: usize,

    /// Topology kind: `"ring"`, `"complete"`, or `"custom"`.
    pub topology: String,
    /// Ring width: how many other nodes each node talks to.
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
    /// Edge list file for topology `"custom"` (`u v` per line).
    #[serde(default)]
    pub edge_file: Option<PathBuf>,
    /// Whether each node's own consensus variable constrains it.
    #[serde(default = "default_true")]
    pub self_loop: bool,

    /// Kernel: `"rbf"`, `"linear"`, or `"poly"`.
    pub kernel: String,
    /// RBF bandwidth; non-positive requests the median-distance heuristic
    /// and the resolved value is echoed back.
    #[serde(default)]
    pub gamma: f64,
    /// Polynomial degree (kernel `"poly"`).
    #[serde(default = "default_poly_degree")]
    pub poly_degree: u32,
    /// Polynomial additive constant (kernel `"poly"`).
    #[serde(default = "default_poly_coef")]
    pub poly_coef: f64,

    /// Penalty weight on each node's own consensus constraint.
    #[serde(default = "default_rho_self")]
    pub rho_self: f64,
    /// Neighbor penalty weight: a single number, or a comma-separated
    /// staircase `value@iteration,value@iteration,...`.
    #[serde(default = "default_rho_neighbor")]
    pub rho_neighbor: String,

    /// Channel noise during the initial exchange of sample blocks.
    #[serde(default)]
    pub noise_std: f64,
    /// Iteration budget.
    #[serde(default = "default_iters")]
    pub iters: usize,
    /// Early-stop threshold on the maximum primal residual (0 disables).
    #[serde(default)]
    pub residual_tol: f64,
    /// Master seed; all randomness derives from it.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Relative ridge factor for every factored linear system.
    #[serde(default = "default_jitter")]
    pub jitter_factor: f64,
    /// Run node updates on a thread pool (bitwise-identical output).
    #[serde(default)]
    pub parallel: bool,

    /// Output directory for the result tables.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Also run the explicit-feature reference and write `oracle_diff.csv`.
    #[serde(default)]
    pub oracle: bool,
    /// Also compute local and neighborhood baselines into `summary.csv`.
    #[serde(default)]
    pub baselines: bool,
}

impl RunConfig {
    /// Parses a TOML config file.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })
    }

    /// Builds the communication topology named by the config.
    pub fn build_topology(&self) -> Result<Topology> {
        match self.topology.as_str() {
            "ring" => Topology::build(
                &TopologyKind::Ring { k: self.neighbors },
                self.nodes,
                self.self_loop,
            ),
            "complete" => Topology::build(&TopologyKind::Complete, self.nodes, self.self_loop),
            "custom" => {
                let path = self.edge_file.as_ref().ok_or_else(|| {
                    Error::Config("topology \"custom\" needs edge_file".into())
                })?;
                Topology::from_edge_list_file(path, self.nodes, self.self_loop)
            }
            other => Err(Error::Config(format!(
                "unknown topology {other:?}; expected \"ring\", \"complete\", or \"custom\""
            ))),
        }
    }

    /// The penalty schedule named by the config.
    pub fn schedule(&self) -> Result<RhoSchedule> {
        let segments = RhoSchedule::parse_neighbor_spec(&self.rho_neighbor)?;
        RhoSchedule::new(self.rho_self, segments)
    }

    fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("seed is mandatory; set seed = <integer>".into()))
    }
}

/// Aggregate of a baseline score over all nodes.
#[derive(Debug, Clone, Copy)]
pub struct BaselineStats {
    /// Mean absolute similarity.
    pub mean: f64,
    /// Smallest absolute similarity.
    pub min: f64,
}

/// Everything a finished run produced, with the artifacts already on disk.
#[derive(Debug)]
pub struct RunArtifacts {
    /// The fully resolved configuration (seed set, bandwidth resolved).
    pub config: RunConfig,
    /// Directory the tables were written into (absent if `out` was unset).
    pub out_dir: Option<PathBuf>,
    /// Raw simulator output.
    pub sim: SimOutput,
    /// Final similarity scores.
    pub final_report: SimilarityReport,
    /// Mean similarity at each recorded iteration (index 0 = initial state).
    pub per_iteration_mean: Vec<f64>,
    /// Per-node best-from-own-data scores, when baselines were requested.
    pub local_baseline: Option<BaselineStats>,
    /// Per-node best-from-own-plus-neighbor-data scores, when baselines were
    /// requested.
    pub neighborhood_baseline: Option<BaselineStats>,
    /// Per-iteration maximum coefficient gap to the explicit reference, when
    /// oracle mode was requested.
    pub oracle_rows: Option<Vec<f64>>,
    /// Wall-clock duration of the whole run.
    pub wall_seconds: f64,
}

/// Loads the dataset, partitions it, and resolves every open config field.
///
/// Returns the resolved config (seed fixed, heuristic bandwidth filled in),
/// the per-node sample blocks, and the topology. Warnings about penalty
/// weights below the per-node descent floor go to stderr; they do not abort
/// the run.
pub fn prepare(config: &RunConfig) -> Result<(RunConfig, Vec<DMatrix<f64>>, Topology)> {
    let seed = config.seed()?;
    if config.nodes == 0 {
        return Err(Error::Config("nodes must be at least 1".into()));
    }
    if config.per_node == 0 {
        return Err(Error::Config("per_node must be at least 1".into()));
    }

    let data = match config.dataset.as_str() {
        "synthetic" => dataset::gaussian_blob(
            config.synthetic_dims,
            config.nodes * config.per_node,
            seed,
        )?,
        "mnist" => {
            let dir = config.mnist_dir.as_ref().ok_or_else(|| {
                Error::Config("dataset \"mnist\" needs mnist_dir".into())
            })?;
            dataset::load_mnist(dir, &config.digits)?.0
        }
        "csv" => {
            let path = config.csv_path.as_ref().ok_or_else(|| {
                Error::Config("dataset \"csv\" needs csv_path".into())
            })?;
            dataset::load_csv_columns(path)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown dataset {other:?}; expected \"synthetic\", \"mnist\", or \"csv\""
            )))
        }
    };

    let blocks = dataset::partition(&data, config.nodes, config.per_node, seed)?;
    let used = DMatrix::from_columns(
        &blocks
            .iter()
            .flat_map(|b| b.column_iter().map(|c| c.into_owned()))
            .collect::<Vec<_>>(),
    );

    let mut resolved = config.clone();
    resolved.seed = Some(seed);
    match config.kernel.as_str() {
        "rbf" => {
            if resolved.gamma <= 0.0 {
                resolved.gamma = dataset::median_heuristic_gamma(&used, seed)?;
            }
        }
        "linear" => resolved.gamma = 0.0,
        "poly" => resolved.gamma = 0.0,
        other => {
            return Err(Error::Config(format!(
                "unknown kernel {other:?}; expected \"rbf\", \"linear\", or \"poly\""
            )))
        }
    }
    kernel_spec(&resolved)?.validate()?;

    let topo = resolved.build_topology()?;
    let schedule = resolved.schedule()?;
    warn_below_floor(&resolved, &blocks, &topo, &schedule)?;
    Ok((resolved, blocks, topo))
}

/// The kernel named by a resolved config.
pub fn kernel_spec(config: &RunConfig) -> Result<KernelSpec> {
    match config.kernel.as_str() {
        "rbf" => Ok(KernelSpec::Rbf {
            gamma: config.gamma,
        }),
        "linear" => Ok(KernelSpec::NormalizedLinear),
        "poly" => Ok(KernelSpec::NormalizedPolynomial {
            degree: config.poly_degree,
            coef: config.poly_coef,
        }),
        other => Err(Error::Config(format!(
            "unknown kernel {other:?}; expected \"rbf\", \"linear\", or \"poly\""
        ))),
    }
}

/// Warns (stderr) for every node whose smallest scheduled penalty sum falls
/// below its descent floor. Diagnostics only — small weights are sometimes
/// deliberate, as in warm-up schedules.
fn warn_below_floor(
    config: &RunConfig,
    blocks: &[DMatrix<f64>],
    topo: &Topology,
    schedule: &RhoSchedule,
) -> Result<()> {
    let spec = kernel_spec(config)?;
    for (j, b) in blocks.iter().enumerate() {
        if topo.degree(j) == 0 {
            continue; // isolated node: no constraints, no floor
        }
        let centered = kernel::center(&kernel::gram(&spec, j, b, j, b)?);
        let floor = rho_min(&centered, topo.degree(j))?;
        if schedule.min_weight() < floor {
            eprintln!(
                "warning: node {j}: smallest scheduled penalty weight \
                 {:.6} is below the monotone-descent floor {:.6}",
                schedule.min_weight(),
                floor
            );
        }
    }
    Ok(())
}

/// Runs one experiment end to end and writes the result tables.
///
/// `run.csv` rows are emitted for the initial state and every executed
/// iteration, iteration-major and node-minor. When `out` is unset nothing
/// is written and the artifacts are only returned.
pub fn run_experiment(config: &RunConfig) -> Result<RunArtifacts> {
    let started = Instant::now();
    let (resolved, blocks, topo) = prepare(config)?;
    let spec = kernel_spec(&resolved)?;
    let schedule = resolved.schedule()?;

    let sim = engine::run(
        &blocks,
        &topo,
        &EngineConfig {
            kernel: spec.clone(),
            schedule: schedule.clone(),
            noise_std: resolved.noise_std,
            seed: resolved.seed.expect("resolved config carries a seed"),
            max_iterations: resolved.iters,
            residual_tol: resolved.residual_tol,
            jitter_factor: resolved.jitter_factor,
            parallel: resolved.parallel,
            capture_internals: false,
        },
    )?;

    let evaluator = Evaluator::new(&spec, &blocks)?;
    let mut iteration_reports = Vec::with_capacity(sim.snapshots.len());
    for snap in &sim.snapshots {
        let alphas: Vec<_> = snap.nodes.iter().map(|n| n.alpha.clone()).collect();
        iteration_reports.push(evaluator.report(&alphas)?);
    }
    let per_iteration_mean: Vec<f64> = iteration_reports.iter().map(|r| r.mean).collect();
    let final_report = iteration_reports
        .last()
        .cloned()
        .expect("at least the initial snapshot exists");

    let (local_baseline, neighborhood_baseline) = if resolved.baselines {
        let local = aggregate_baseline(
            (0..topo.node_count())
                .map(|j| evaluator.local_baseline(j).map(|s| s.absolute))
                .collect::<Result<Vec<_>>>()?,
        );
        let pooled = neighborhood_scores(&resolved, &blocks, &topo, &evaluator)?;
        (Some(local), Some(aggregate_baseline(pooled)))
    } else {
        (None, None)
    };

    let oracle_rows = if resolved.oracle {
        Some(oracle_gaps(&resolved, &blocks, &topo, &schedule, &sim)?)
    } else {
        None
    };

    let wall_seconds = started.elapsed().as_secs_f64();
    let mut artifacts = RunArtifacts {
        config: resolved,
        out_dir: None,
        sim,
        final_report,
        per_iteration_mean,
        local_baseline,
        neighborhood_baseline,
        oracle_rows,
        wall_seconds,
    };

    if let Some(dir) = artifacts.config.out.clone() {
        write_artifacts(&dir, &artifacts, &iteration_reports)?;
        artifacts.out_dir = Some(dir);
    }
    Ok(artifacts)
}

fn aggregate_baseline(scores: Vec<f64>) -> BaselineStats {
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    BaselineStats { mean, min }
}

/// Scores of each node's best component from its own block pooled with the
/// copies it received during the initial exchange (noisy when the channel
/// is noisy — the node can only use what it actually received).
fn neighborhood_scores(
    config: &RunConfig,
    blocks: &[DMatrix<f64>],
    topo: &Topology,
    evaluator: &Evaluator,
) -> Result<Vec<f64>> {
    let (received, _) = engine::init_exchange(
        blocks,
        topo,
        config.noise_std,
        config.seed.expect("resolved config carries a seed"),
    )?;
    let mut scores = Vec::with_capacity(topo.node_count());
    for (j, inbox) in received.iter().enumerate() {
        let mut columns: Vec<_> = blocks[j].column_iter().map(|c| c.into_owned()).collect();
        for (&src, copy) in inbox {
            if src == j {
                continue;
            }
            columns.extend(copy.column_iter().map(|c| c.into_owned()));
        }
        let pooled = DMatrix::from_columns(&columns);
        scores.push(evaluator.dataset_baseline(&pooled)?.absolute);
    }
    Ok(scores)
}

/// Per-iteration maximum absolute coefficient gap between the kernel engine
/// and the explicit-feature reference.
fn oracle_gaps(
    config: &RunConfig,
    blocks: &[DMatrix<f64>],
    topo: &Topology,
    schedule: &RhoSchedule,
    sim: &SimOutput,
) -> Result<Vec<f64>> {
    let map = match kernel_spec(config)? {
        KernelSpec::NormalizedLinear => FeatureMap::UnitNormalized,
        KernelSpec::NormalizedPolynomial { degree, coef } => {
            FeatureMap::Polynomial { degree, coef }
        }
        KernelSpec::Rbf { .. } => {
            return Err(Error::Config(
                "oracle mode needs a kernel with explicit features; \
                 use kernel \"linear\" or \"poly\""
                    .into(),
            ))
        }
    };
    if config.noise_std != 0.0 {
        return Err(Error::Config(
            "oracle mode compares exact trajectories; set noise_std = 0".into(),
        ));
    }
    let reference = run_explicit(
        blocks,
        topo,
        &ExplicitConfig {
            map,
            schedule: schedule.clone(),
            seed: config.seed.expect("resolved config carries a seed"),
            max_iterations: sim.iterations_run,
            jitter_factor: config.jitter_factor,
        },
    )?;
    Ok(sim
        .snapshots
        .iter()
        .zip(&reference.snapshots)
        .map(|(engine_snap, explicit_snap)| {
            engine_snap
                .nodes
                .iter()
                .zip(&explicit_snap.alphas)
                .map(|(n, alpha)| (&n.alpha - alpha).abs().max())
                .fold(0.0, f64::max)
        })
        .collect())
}

/// Full-precision decimal formatting shared by every table.
fn fmt_float(x: f64) -> String {
    format!("{x}")
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_artifacts(
    dir: &Path,
    artifacts: &RunArtifacts,
    iteration_reports: &[SimilarityReport],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let mut run_csv = String::from(
        "iteration,node,similarity,similarity_signed,local_lagrangian,\
         primal_residual,values_sent,values_received\n",
    );
    for (snap, report) in artifacts.sim.snapshots.iter().zip(iteration_reports) {
        for (j, node) in snap.nodes.iter().enumerate() {
            let sim = report.per_node[j];
            writeln!(
                run_csv,
                "{},{},{},{},{},{},{},{}",
                snap.iteration,
                j,
                fmt_float(sim.absolute),
                fmt_float(sim.signed),
                fmt_float(node.local_lagrangian),
                fmt_float(node.primal_residual),
                node.traffic.sent_values,
                node.traffic.received_values,
            )
            .expect("writing to a string cannot fail");
        }
    }
    write_file(dir, "run.csv", &run_csv)?;

    let ledger = &artifacts.sim.ledger;
    let mut summary = String::from("key,value\n");
    let mut kv = |k: &str, v: String| {
        writeln!(summary, "{k},{v}").expect("writing to a string cannot fail");
    };
    kv("mean_similarity", fmt_float(artifacts.final_report.mean));
    kv("min_similarity", fmt_float(artifacts.final_report.min));
    kv("iterations_run", artifacts.sim.iterations_run.to_string());
    kv(
        "reached_tolerance",
        artifacts.sim.reached_tolerance.to_string(),
    );
    kv(
        "init_values_sent",
        ledger.init_values_sent().to_string(),
    );
    kv(
        "iteration_values_sent",
        ledger.iteration_values_sent().to_string(),
    );
    kv("total_bytes", ledger.total_bytes().to_string());
    kv("wall_seconds", fmt_float(artifacts.wall_seconds));
    if let Some(b) = artifacts.local_baseline {
        kv("local_baseline_mean", fmt_float(b.mean));
        kv("local_baseline_min", fmt_float(b.min));
    }
    if let Some(b) = artifacts.neighborhood_baseline {
        kv("neighborhood_baseline_mean", fmt_float(b.mean));
        kv("neighborhood_baseline_min", fmt_float(b.min));
    }
    write_file(dir, "summary.csv", &summary)?;

    let echoed = toml::to_string(&artifacts.config)
        .map_err(|e| Error::Config(format!("cannot serialize resolved config: {e}")))?;
    write_file(dir, "config.echo", &echoed)?;

    if let Some(rows) = &artifacts.oracle_rows {
        let mut oracle_csv = String::from("iteration,max_abs_diff\n");
        for (t, gap) in rows.iter().enumerate() {
            writeln!(oracle_csv, "{t},{}", fmt_float(*gap))
                .expect("writing to a string cannot fail");
        }
        write_file(dir, "oracle_diff.csv", &oracle_csv)?;
    }
    Ok(())
}
