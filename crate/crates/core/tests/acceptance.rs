//! Acceptance suite: one test per release criterion, each printing a
//! `ACCEPTANCE <name>: PASS (tol ...)` line (run with `-- --nocapture` to
//! see them). Tolerances are pinned next to the assertions.
//!
//! The MNIST-based tests read the uncompressed IDX training files from
//! `data/mnist/` at the repository root, or from `$MNIST_DIR` when set.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dkpca::dataset;
use dkpca::engine::{self, EngineConfig};
use dkpca::experiment::{self, RunConfig};
use dkpca::explicit::{run_explicit, verify_descent, ExplicitConfig, FeatureMap};
use dkpca::kernel::{self, KernelSpec};
use dkpca::metrics::Evaluator;
use dkpca::topology::{rho_min, RhoSchedule, Topology, TopologyKind};

/// Serializes the heavyweight tests so timing measurements and peak memory
/// are not distorted by concurrent tests.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_guard() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Runs a criterion body and prints its verdict line.
fn criterion(name: &str, tol: &str, body: impl FnOnce()) {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!("ACCEPTANCE {name}: PASS (tol {tol})"),
        Err(cause) => {
            println!("ACCEPTANCE {name}: FAIL");
            resume_unwind(cause);
        }
    }
}

/// Largest per-node penalty floor over all nodes.
fn uniform_floor(blocks: &[DMatrix<f64>], topo: &Topology, spec: &KernelSpec) -> f64 {
    blocks
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let k = kernel::center(&kernel::gram(spec, j, b, j, b).unwrap());
            rho_min(&k, topo.degree(j)).unwrap()
        })
        .fold(0.0, f64::max)
}

/// Unit vectors evenly spread on the circle, rotated per node: every
/// centered kernel block has a flat positive spectrum.
fn spread_unit_blocks(offsets: &[f64], per_node: usize) -> Vec<DMatrix<f64>> {
    offsets
        .iter()
        .map(|&off| {
            DMatrix::from_fn(2, per_node, |r, c| {
                let angle = off + c as f64 * std::f64::consts::TAU / per_node as f64;
                if r == 0 {
                    angle.cos()
                } else {
                    angle.sin()
                }
            })
        })
        .collect()
}

/// Directory holding the MNIST IDX training files.
fn mnist_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("MNIST_DIR") {
        let p = PathBuf::from(dir);
        if p.join(dataset::MNIST_TRAIN_IMAGES).is_file() {
            return p;
        }
    }
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    assert!(
        p.join(dataset::MNIST_TRAIN_IMAGES).is_file(),
        "MNIST IDX files not found; place train-images-idx3-ubyte and \
         train-labels-idx1-ubyte in data/mnist/ or set MNIST_DIR"
    );
    p
}

/// Loads MNIST digits {0,3,5,8} and partitions them evenly.
fn mnist_blocks(nodes: usize, per_node: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let (data, _) = dataset::load_mnist(&mnist_dir(), &[0, 3, 5, 8]).unwrap();
    dataset::partition(&data, nodes, per_node, seed).unwrap()
}

/// The flagship penalty schedule: self weight 100, neighbor weight stepping
/// 10 -> 50 -> 100 at iterations 0, 5, 10.
fn warmup_schedule() -> RhoSchedule {
    RhoSchedule::new(
        100.0,
        RhoSchedule::parse_neighbor_spec("10@0,50@5,100@10").unwrap(),
    )
    .unwrap()
}

#[test]
fn kernel_trick_equivalence() {
    criterion("kernel_trick_equivalence", "1e-8 per-iteration alpha", || {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0001);
        let mut checked = 0usize;
        while checked < 20 {
            let j_count = rng.random_range(2..=6usize);
            let dim = rng.random_range(2..=4usize);
            let sizes: Vec<usize> = (0..j_count).map(|_| rng.random_range(3..=10)).collect();
            let blocks: Vec<DMatrix<f64>> = sizes
                .iter()
                .map(|&n| DMatrix::from_fn(dim, n, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let kind = if j_count >= 3 && rng.random_bool(0.5) {
                TopologyKind::Ring { k: 2 }
            } else {
                TopologyKind::Complete
            };
            let topo = Topology::build(&kind, j_count, true).unwrap();
            let spec = KernelSpec::NormalizedLinear;
            let rho = uniform_floor(&blocks, &topo, &spec) * rng.random_range(1.05..2.5);
            let seed = 1000 + checked as u64;

            let engine_out = engine::run(
                &blocks,
                &topo,
                &EngineConfig {
                    kernel: spec,
                    schedule: RhoSchedule::uniform(rho).unwrap(),
                    noise_std: 0.0,
                    seed,
                    max_iterations: 30,
                    residual_tol: 0.0,
                    // Small blocks have rank-deficient centered kernels; a
                    // slightly larger ridge keeps the 1/eps amplification of
                    // representation-specific rounding below the tolerance.
                    jitter_factor: 1e-5,
                    parallel: false,
                    capture_internals: false,
                },
            )
            .unwrap();
            let explicit_out = run_explicit(
                &blocks,
                &topo,
                &ExplicitConfig {
                    map: FeatureMap::UnitNormalized,
                    schedule: RhoSchedule::uniform(rho).unwrap(),
                    seed,
                    max_iterations: 30,
                    jitter_factor: 1e-5,
                },
            )
            .unwrap();

            let mut worst = 0.0f64;
            for (es, xs) in engine_out.snapshots.iter().zip(&explicit_out.snapshots) {
                for (en, alpha) in es.nodes.iter().zip(&xs.alphas) {
                    worst = worst.max((&en.alpha - alpha).abs().max());
                }
            }
            assert!(
                worst <= 1e-8,
                "config {checked} (J={j_count}, sizes {sizes:?}): \
                 alpha gap {worst:e} exceeds 1e-8"
            );
            checked += 1;
        }
        let elapsed = started.elapsed().as_secs_f64();
        assert!(elapsed < 60.0, "equivalence sweep took {elapsed:.1}s, budget 60s");
    });
}

#[test]
fn consensus_recovery() {
    criterion("consensus_recovery", "mean sim 0.99, z cosine 0.999", || {
        let _g = heavy_guard();
        // A tight Gaussian cloud keeps the radial-basis spectrum's tail below
        // machine precision, so the reported constraint residual can actually
        // reach the stop threshold instead of flooring at a ridge artifact.
        let data = dataset::gaussian_blob(2, 80, 77).unwrap() * 0.05;
        let blocks = dataset::partition(&data, 4, 20, 77).unwrap();
        let topo = Topology::build(&TopologyKind::Complete, 4, true).unwrap();

        // Kernel path: radial basis function, run to the residual tolerance.
        let spec = KernelSpec::Rbf { gamma: 0.5 };
        let rho = 1.2 * uniform_floor(&blocks, &topo, &spec);
        let out = engine::run(
            &blocks,
            &topo,
            &EngineConfig {
                kernel: spec.clone(),
                schedule: RhoSchedule::uniform(rho).unwrap(),
                noise_std: 0.0,
                seed: 21,
                max_iterations: 6000,
                residual_tol: 1e-8,
                jitter_factor: 1e-10,
                parallel: false,
                capture_internals: false,
            },
        )
        .unwrap();
        assert!(
            out.reached_tolerance,
            "residual 1e-8 not reached in 6000 iterations"
        );
        let evaluator = Evaluator::new(&spec, &blocks).unwrap();
        let report = evaluator.report(&out.final_alphas()).unwrap();
        assert!(
            report.mean >= 0.99,
            "mean similarity {:.6} below 0.99",
            report.mean
        );

        // Explicit-feature variant (unit-normalized linear kernel) for the
        // consensus-direction agreement check.
        let lin = KernelSpec::NormalizedLinear;
        let rho_lin = 1.2 * uniform_floor(&blocks, &topo, &lin);
        let reference = run_explicit(
            &blocks,
            &topo,
            &ExplicitConfig {
                map: FeatureMap::UnitNormalized,
                schedule: RhoSchedule::uniform(rho_lin).unwrap(),
                seed: 21,
                max_iterations: 2000,
                jitter_factor: 1e-8,
            },
        )
        .unwrap();
        let last = reference.snapshots.last().unwrap();
        assert!(
            last.max_primal_residual < 1e-8,
            "explicit variant residual {:.3e} above 1e-8",
            last.max_primal_residual
        );
        for a in 0..4 {
            for b in (a + 1)..4 {
                let za = last.consensus.column(a);
                let zb = last.consensus.column(b);
                let cos = za.dot(&zb).abs() / (za.norm() * zb.norm());
                assert!(
                    cos >= 0.999,
                    "consensus columns {a} and {b}: cosine {cos:.6} below 0.999"
                );
            }
        }
    });
}

#[test]
fn descent_certificate() {
    criterion(
        "descent_certificate",
        "monotone 1e-8, inequality 1e-6",
        || {
            let blocks = spread_unit_blocks(&[0.0, 0.13, 0.29], 5);
            let topo = Topology::build(&TopologyKind::Ring { k: 2 }, 3, true).unwrap();
            let map = FeatureMap::UnitNormalized;
            let rho = 1.1 * uniform_floor(&blocks, &topo, &map.kernel_spec());
            let run = run_explicit(
                &blocks,
                &topo,
                &ExplicitConfig {
                    map,
                    schedule: RhoSchedule::uniform(rho).unwrap(),
                    seed: 9,
                    max_iterations: 50,
                    jitter_factor: 1e-6,
                },
            )
            .unwrap();
            let rows = verify_descent(&run, 1e-6).unwrap();
            assert_eq!(rows.len(), run.snapshots.len() - 3);
            for row in &rows {
                assert!(
                    row.delta <= 1e-8,
                    "objective rose by {:.3e} into state {}",
                    row.delta,
                    row.iteration
                );
                assert!(
                    row.satisfied,
                    "decrease bound violated at state {}: delta {:.6e} > bound {:.6e}",
                    row.iteration, row.delta, row.bound
                );
                assert!(row.bound <= 1e-12, "positive bound at state {}", row.iteration);
            }
        },
    );
}

#[test]
fn mnist_desk_scale() {
    criterion("mnist_desk_scale", "mean sim floor 0.90, 300s", || {
        let _g = heavy_guard();
        let started = Instant::now();
        let cfg: RunConfig = toml::from_str(&format!(
            "dataset = \"mnist\"\n\
             mnist_dir = \"{}\"\n\
             digits = [0, 3, 5, 8]\n\
             nodes = 20\n\
             per_node = 100\n\
             topology = \"ring\"\n\
             neighbors = 4\n\
             kernel = \"rbf\"\n\
             gamma = 0.0\n\
             rho_self = 100.0\n\
             rho_neighbor = \"10@0,50@5,100@10\"\n\
             iters = 15\n\
             seed = 1\n",
            mnist_dir().display()
        ))
        .unwrap();
        let artifacts = experiment::run_experiment(&cfg).unwrap();
        let elapsed = started.elapsed().as_secs_f64();
        let mean = artifacts.final_report.mean;
        assert!(mean >= 0.90, "final mean similarity {mean:.4} below the 0.90 floor");
        if mean < 0.93 {
            println!(
                "note: mean similarity {mean:.4} clears the 0.90 floor but \
                 not the 0.93 target; bandwidth heuristic in play"
            );
        }
        assert!(elapsed < 300.0, "run took {elapsed:.1}s, budget 300s");
    });
}

#[test]
fn block_size_trend() {
    criterion("block_size_trend", "gap(40) > gap(300) > 0", || {
        let _g = heavy_guard();
        let mut gaps = Vec::new();
        for &per_node in &[40usize, 100, 300] {
            let blocks = mnist_blocks(20, per_node, 1);
            let topo = Topology::build(&TopologyKind::Ring { k: 4 }, 20, true).unwrap();
            let gamma = {
                let pooled = DMatrix::from_columns(
                    &blocks
                        .iter()
                        .flat_map(|b| b.column_iter().map(|c| c.into_owned()))
                        .collect::<Vec<_>>(),
                );
                dataset::median_heuristic_gamma(&pooled, 1).unwrap()
            };
            let spec = KernelSpec::Rbf { gamma };
            // Penalty just above the descent bound, run to the similarity
            // plateau (about 150 iterations at these spectra; 250 gives
            // margin): the cooperation effect is judged at convergence.
            let rho = 1.2 * uniform_floor(&blocks, &topo, &spec);
            let out = engine::run(
                &blocks,
                &topo,
                &EngineConfig {
                    kernel: spec.clone(),
                    schedule: RhoSchedule::uniform(rho).unwrap(),
                    noise_std: 0.0,
                    seed: 1,
                    max_iterations: 250,
                    residual_tol: 0.0,
                    jitter_factor: 1e-6,
                    parallel: false,
                    capture_internals: false,
                },
            )
            .unwrap();
            let evaluator = Evaluator::new(&spec, &blocks).unwrap();
            let alg = evaluator.report(&out.final_alphas()).unwrap().mean;
            let local = (0..20)
                .map(|j| evaluator.local_baseline(j).unwrap().absolute)
                .sum::<f64>()
                / 20.0;
            assert!(
                alg > local,
                "per_node {per_node}: algorithm {alg:.4} does not beat local {local:.4}"
            );
            gaps.push((per_node, alg - local));
        }
        let gap_of = |n: usize| gaps.iter().find(|(p, _)| *p == n).unwrap().1;
        assert!(
            gap_of(40) > gap_of(300),
            "gap at 40 ({:.4}) not larger than at 300 ({:.4})",
            gap_of(40),
            gap_of(300)
        );
    });
}

#[test]
fn neighborhood_trend() {
    criterion(
        "neighborhood_trend",
        "baseline -0.02, nondecreasing 0.01",
        || {
            let _g = heavy_guard();
            let blocks = mnist_blocks(20, 100, 1);
            let pooled = DMatrix::from_columns(
                &blocks
                    .iter()
                    .flat_map(|b| b.column_iter().map(|c| c.into_owned()))
                    .collect::<Vec<_>>(),
            );
            let gamma = dataset::median_heuristic_gamma(&pooled, 1).unwrap();
            let spec = KernelSpec::Rbf { gamma };
            let evaluator = Evaluator::new(&spec, &blocks).unwrap();

            for &k in &[4usize, 8, 12] {
                let topo = Topology::build(&TopologyKind::Ring { k }, 20, true).unwrap();
                // Same protocol as the block-size comparison: penalty just
                // above the descent bound, run to the plateau.
                let rho = 1.2 * uniform_floor(&blocks, &topo, &spec);
                let out = engine::run(
                    &blocks,
                    &topo,
                    &EngineConfig {
                        kernel: spec.clone(),
                        schedule: RhoSchedule::uniform(rho).unwrap(),
                        noise_std: 0.0,
                        seed: 1,
                        max_iterations: 250,
                        residual_tol: 0.0,
                        jitter_factor: 1e-6,
                        parallel: false,
                        capture_internals: false,
                    },
                )
                .unwrap();

                // Trajectory checkpoints every 10 iterations from iteration 2
                // (plus the final state). The first two iterations are
                // excluded: they still carry the random start, whose
                // accidental alignment washes out before the consensus
                // coupling rebuilds it.
                let mut ticks: Vec<usize> =
                    (2..out.snapshots.len()).step_by(10).collect();
                if *ticks.last().unwrap() != out.snapshots.len() - 1 {
                    ticks.push(out.snapshots.len() - 1);
                }
                let means: Vec<(usize, f64)> = ticks
                    .iter()
                    .map(|&t| {
                        let alphas: Vec<DVector<f64>> =
                            out.snapshots[t].nodes.iter().map(|n| n.alpha.clone()).collect();
                        (t, evaluator.report(&alphas).unwrap().mean)
                    })
                    .collect();
                for w in means.windows(2) {
                    let ((t0, m0), (t1, m1)) = (w[0], w[1]);
                    assert!(
                        m1 >= m0 - 0.01,
                        "ring({k}): similarity fell from {m0:.4} at iteration {t0} \
                         to {m1:.4} at iteration {t1}"
                    );
                }

                let neighborhood = (0..20)
                    .map(|j| {
                        let pool = DMatrix::from_columns(
                            &topo
                                .omega(j)
                                .iter()
                                .flat_map(|&l| {
                                    blocks[l].column_iter().map(|c| c.into_owned())
                                })
                                .collect::<Vec<_>>(),
                        );
                        evaluator.dataset_baseline(&pool).unwrap().absolute
                    })
                    .sum::<f64>()
                    / 20.0;
                let alg = means.last().unwrap().1;
                assert!(
                    alg >= neighborhood - 0.02,
                    "ring({k}): algorithm {alg:.4} trails pooled baseline \
                     {neighborhood:.4} by more than 0.02"
                );
            }
        },
    );
}

#[test]
fn traffic_accounting() {
    criterion("traffic_accounting", "exact counts", || {
        let _g = heavy_guard();
        let data = dataset::gaussian_blob(3, 2000, 13).unwrap();
        let blocks = dataset::partition(&data, 20, 100, 13).unwrap();
        let topo = Topology::build(&TopologyKind::Ring { k: 4 }, 20, true).unwrap();
        let out = engine::run(
            &blocks,
            &topo,
            &EngineConfig {
                kernel: KernelSpec::NormalizedLinear,
                schedule: RhoSchedule::uniform(150.0).unwrap(),
                noise_std: 0.0,
                seed: 13,
                max_iterations: 3,
                residual_tol: 0.0,
                jitter_factor: 1e-6,
                parallel: false,
                capture_internals: false,
            },
        )
        .unwrap();
        for (t, per_node) in out.ledger.per_iteration.iter().enumerate() {
            for (j, traffic) in per_node.iter().enumerate() {
                assert_eq!(
                    traffic.sent_values_round1, 800,
                    "iteration {t}, node {j}: round-1 values"
                );
                assert_eq!(
                    traffic.sent_values_round2, 400,
                    "iteration {t}, node {j}: round-2 values"
                );
                assert_eq!(
                    traffic.sent_values, 1200,
                    "iteration {t}, node {j}: total values"
                );
                assert_eq!(
                    traffic.received_values, 1200,
                    "iteration {t}, node {j}: received values"
                );
            }
        }

        // A lone node has nobody to talk to.
        let solo_data = dataset::gaussian_blob(3, 12, 13).unwrap();
        let solo_topo = Topology::build(&TopologyKind::Complete, 1, true).unwrap();
        let solo = engine::run(
            &[solo_data],
            &solo_topo,
            &EngineConfig {
                kernel: KernelSpec::NormalizedLinear,
                schedule: RhoSchedule::uniform(60.0).unwrap(),
                noise_std: 0.0,
                seed: 13,
                max_iterations: 3,
                residual_tol: 0.0,
                jitter_factor: 1e-6,
                parallel: false,
                capture_internals: false,
            },
        )
        .unwrap();
        assert_eq!(solo.ledger.init_values_sent(), 0);
        assert_eq!(solo.ledger.iteration_values_sent(), 0);
    });
}

#[test]
fn invariant_suite() {
    criterion("invariant_suite", "per-invariant, see asserts", || {
        let _g = heavy_guard();
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0008);
        let data = DMatrix::from_fn(3, 30, |_, _| rng.random_range(-1.0..1.0));

        // Gram symmetry and positive semidefiniteness for every kernel.
        for spec in [
            KernelSpec::Rbf { gamma: 0.8 },
            KernelSpec::NormalizedLinear,
            KernelSpec::NormalizedPolynomial {
                degree: 3,
                coef: 0.5,
            },
        ] {
            let g = kernel::gram(&spec, 0, &data, 0, &data).unwrap();
            let asym = (&g.values - g.values.transpose()).abs().max();
            assert!(asym <= 1e-12, "{spec:?}: asymmetric Gram ({asym:e})");
            let eig = g.values.clone().symmetric_eigen();
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-10, "{spec:?}: negative eigenvalue {min:e}");

            // Centering: zero row/column means, idempotent.
            let centered = kernel::center(&g);
            for i in 0..centered.nrows() {
                assert!(
                    centered.values.row(i).sum().abs() <= 1e-10,
                    "{spec:?}: row {i} mean nonzero"
                );
                assert!(
                    centered.values.column(i).sum().abs() <= 1e-10,
                    "{spec:?}: column {i} mean nonzero"
                );
            }
            let twice = kernel::center(&centered);
            let drift = (&twice.values - &centered.values).abs().max();
            assert!(drift <= 1e-12, "{spec:?}: centering not idempotent ({drift:e})");
        }

        // Consensus variables stay inside the unit ball.
        let blocks: Vec<DMatrix<f64>> = vec![
            data.columns(0, 10).into_owned(),
            data.columns(10, 10).into_owned(),
            data.columns(20, 10).into_owned(),
        ];
        let topo = Topology::build(&TopologyKind::Ring { k: 2 }, 3, true).unwrap();
        let spec = KernelSpec::NormalizedLinear;
        let rho = 1.3 * uniform_floor(&blocks, &topo, &spec);
        let base_cfg = EngineConfig {
            kernel: spec.clone(),
            schedule: RhoSchedule::uniform(rho).unwrap(),
            noise_std: 0.0,
            seed: 4,
            max_iterations: 20,
            residual_tol: 0.0,
            jitter_factor: 1e-6,
            parallel: false,
            capture_internals: false,
        };
        let sequential = engine::run(&blocks, &topo, &base_cfg).unwrap();
        for s in &sequential.snapshots {
            for n in &s.nodes {
                assert!(n.consensus_norm <= 1.0 + 1e-12, "consensus left the ball");
            }
        }

        // Determinism under parallelism: bitwise identical trajectories.
        let parallel = engine::run(
            &blocks,
            &topo,
            &EngineConfig {
                parallel: true,
                ..base_cfg.clone()
            },
        )
        .unwrap();
        for (s, p) in sequential.snapshots.iter().zip(&parallel.snapshots) {
            for (a, b) in s.nodes.iter().zip(&p.nodes) {
                assert_eq!(a.alpha, b.alpha, "parallel run diverged");
            }
        }

        // Explicit-feature invariants: projector idempotence/symmetry and
        // the gap identity between the two objective conventions.
        let explicit = run_explicit(
            &blocks,
            &topo,
            &ExplicitConfig {
                map: FeatureMap::UnitNormalized,
                schedule: RhoSchedule::uniform(rho).unwrap(),
                seed: 4,
                max_iterations: 20,
                jitter_factor: 1e-10,
            },
        )
        .unwrap();
        let projectors: Vec<DMatrix<f64>> =
            (0..3).map(|j| explicit.span_projector(j)).collect();
        for (j, p) in projectors.iter().enumerate() {
            assert!(
                (p - p.transpose()).abs().max() <= 1e-8,
                "projector {j} asymmetric"
            );
            assert!(
                (p * p - p).abs().max() <= 1e-6,
                "projector {j} not idempotent"
            );
        }
        for s in &explicit.snapshots {
            // The ridge perturbs the identity at order rho * epsilon, so the
            // slack scales with the objective magnitude.
            let slack = 1e-8 * (1.0 + s.lagrangian.abs());
            assert!(
                (s.lagrangian - s.projected_lagrangian - s.gap).abs() <= slack,
                "gap identity broken at snapshot {}",
                s.iteration
            );
            assert!(s.gap >= -1e-12, "negative gap at snapshot {}", s.iteration);
            let mut direct = 0.0;
            for j in 0..3 {
                for &q in topo.omega(j) {
                    let z = s.consensus.column(q);
                    let out_of_span = &z - &projectors[j] * z;
                    direct += 0.5 * rho * out_of_span.norm_squared();
                }
            }
            assert!(
                (direct - s.gap).abs() <= slack,
                "snapshot {}: gap {:.3e} but projector recomputation {direct:.3e}",
                s.iteration,
                s.gap
            );
        }

        // Re-running the same config byte-reproduces run.csv.
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg: RunConfig = toml::from_str(
            "dataset = \"synthetic\"\n\
             nodes = 3\n\
             per_node = 6\n\
             topology = \"ring\"\n\
             neighbors = 2\n\
             kernel = \"linear\"\n\
             rho_self = 50.0\n\
             rho_neighbor = \"50\"\n\
             iters = 6\n\
             seed = 19\n",
        )
        .unwrap();
        cfg.out = Some(dir_a.path().to_path_buf());
        experiment::run_experiment(&cfg).unwrap();
        cfg.out = Some(dir_b.path().to_path_buf());
        experiment::run_experiment(&cfg).unwrap();
        assert_eq!(
            std::fs::read(dir_a.path().join("run.csv")).unwrap(),
            std::fs::read(dir_b.path().join("run.csv")).unwrap(),
            "run.csv not byte-reproducible"
        );
    });
}

#[test]
fn timing_property() {
    criterion("timing_property", "per-node step spread < 20%", || {
        let _g = heavy_guard();
        // Blocks large enough that an iteration takes tens of milliseconds;
        // at the previous 60-sample size the measurement was scheduler noise.
        let per_node = 300;
        let spec = KernelSpec::NormalizedLinear;

        let mut prepared = Vec::new();
        for &j_count in &[20usize, 40, 80] {
            let data = dataset::gaussian_blob(3, j_count * per_node, 5).unwrap();
            let blocks = dataset::partition(&data, j_count, per_node, 5).unwrap();
            let topo = Topology::build(&TopologyKind::Ring { k: 4 }, j_count, true).unwrap();
            prepared.push((j_count, blocks, topo));
        }
        // One penalty weight for all network sizes. Blocks are drawn from the
        // same distribution at every size, so the floor of the smallest
        // network (times a wide margin) covers all of them without paying for
        // 140 eigendecompositions.
        let rho = 3.0 * uniform_floor(&prepared[0].1, &prepared[0].2, &spec);

        let mut per_node_seconds = Vec::new();
        for (j_count, blocks, topo) in &prepared {
            let out = engine::run(
                blocks,
                topo,
                &EngineConfig {
                    kernel: spec.clone(),
                    schedule: RhoSchedule::uniform(rho).unwrap(),
                    noise_std: 0.0,
                    seed: 5,
                    max_iterations: 15,
                    residual_tol: 0.0,
                    jitter_factor: 1e-6,
                    parallel: false,
                    capture_internals: false,
                },
            )
            .unwrap();
            // Skip the first iterations (cache warmup), then take the median.
            let mut steady: Vec<f64> = out.iteration_seconds[2..].to_vec();
            steady.sort_by(|a, b| a.total_cmp(b));
            let median = steady[steady.len() / 2];
            per_node_seconds.push((*j_count, median / *j_count as f64));
        }

        let lo = per_node_seconds
            .iter()
            .map(|&(_, s)| s)
            .fold(f64::INFINITY, f64::min);
        let hi = per_node_seconds
            .iter()
            .map(|&(_, s)| s)
            .fold(0.0f64, f64::max);
        let spread = (hi - lo) / lo;
        assert!(
            spread < 0.20,
            "per-node step time varies {:.1}% across J: {:?}",
            100.0 * spread,
            per_node_seconds
        );
    });
}
