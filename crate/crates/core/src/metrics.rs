//! Scoring of learned components against the pooled-data reference.
//!
//! The evaluator concatenates every node's samples, solves the central
//! kernel-PCA problem on the pooled set once, and then scores arbitrary
//! coefficient vectors by the cosine between the feature-space component they
//! span and the pooled top component. All inner products are evaluated
//! through kernel values, so the feature space never has to be materialized;
//! mixed centerings (each node centers over its own samples, the reference
//! over the pooled set) are handled by double-centering the cross blocks.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::central::{self, CentralSolution};
use crate::error::{Error, Result};
use crate::kernel::{self, GramBlock, KernelSpec};

/// Owner tag used for the pooled sample set in kernel blocks.
const POOLED: usize = usize::MAX;

/// Cosine similarity between a learned component and the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityValue {
    /// Raw cosine; its sign is arbitrary because coefficient vectors are
    /// only determined up to sign.
    pub signed: f64,
    /// Magnitude of the cosine — the score the experiments report.
    pub absolute: f64,
}

impl SimilarityValue {
    fn from_cosine(signed: f64) -> SimilarityValue {
        SimilarityValue {
            signed,
            absolute: signed.abs(),
        }
    }
}

/// Per-node similarity scores with their aggregates.
#[derive(Debug, Clone)]
pub struct SimilarityReport {
    /// One score per node, in node order.
    pub per_node: Vec<SimilarityValue>,
    /// Mean of the absolute scores.
    pub mean: f64,
    /// Smallest absolute score.
    pub min: f64,
}

impl SimilarityReport {
    /// Aggregates per-node scores.
    pub fn new(per_node: Vec<SimilarityValue>) -> Result<SimilarityReport> {
        if per_node.is_empty() {
            return Err(Error::MetricUndefined(
                "similarity report over zero nodes".into(),
            ));
        }
        let mean = per_node.iter().map(|s| s.absolute).sum::<f64>() / per_node.len() as f64;
        let min = per_node
            .iter()
            .map(|s| s.absolute)
            .fold(f64::INFINITY, f64::min);
        Ok(SimilarityReport { per_node, mean, min })
    }
}

/// Pooled-data reference solution and cached per-node slices.
#[derive(Debug, Clone)]
pub struct Evaluator {
    spec: KernelSpec,
    /// All samples, concatenated column-wise in node order.
    global_data: DMatrix<f64>,
    /// Column range of each node inside `global_data`.
    ranges: Vec<Range<usize>>,
    /// Central solution on the pooled, globally centered Gram matrix.
    central: CentralSolution,
    /// Kernel energy of the reference component (1 up to roundoff).
    gt_energy: f64,
    /// Per-node locally centered kernel blocks, bitwise identical to the
    /// blocks the nodes themselves compute.
    node_kernels: Vec<DMatrix<f64>>,
    /// Per-node cross products `C_j·α̂` between node-centered and pooled-
    /// centered features, applied to the reference coefficients.
    node_reference: Vec<DVector<f64>>,
}

impl Evaluator {
    /// Builds the reference solution for the given per-node sample blocks.
    ///
    /// Fails if the pooled centered Gram matrix has a degenerate top
    /// eigenvalue or the blocks disagree on the feature dimension.
    pub fn new(spec: &KernelSpec, blocks: &[DMatrix<f64>]) -> Result<Evaluator> {
        spec.validate()?;
        if blocks.is_empty() {
            return Err(Error::Dataset("no sample blocks to evaluate".into()));
        }
        let dim = blocks[0].nrows();
        let total: usize = blocks.iter().map(|b| b.ncols()).sum();
        if total == 0 {
            return Err(Error::Dataset("no samples to evaluate".into()));
        }
        let mut global_data = DMatrix::zeros(dim, total);
        let mut ranges = Vec::with_capacity(blocks.len());
        let mut start = 0;
        for (j, b) in blocks.iter().enumerate() {
            if b.nrows() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "node {j} has feature dimension {} but node 0 has {dim}",
                    b.nrows()
                )));
            }
            global_data.view_mut((0, start), (dim, b.ncols())).copy_from(b);
            ranges.push(start..start + b.ncols());
            start += b.ncols();
        }

        let raw = kernel::gram(spec, POOLED, &global_data, POOLED, &global_data)?;
        let centered_global = kernel::center(&raw);
        let central = central::solve_central(&centered_global)?;
        let gt_energy = central.alpha.dot(&(&centered_global.values * &central.alpha));
        if !(gt_energy > 0.0) || !gt_energy.is_finite() {
            return Err(Error::MetricUndefined(format!(
                "reference component has non-positive kernel energy {gt_energy}"
            )));
        }

        let mut node_kernels = Vec::with_capacity(blocks.len());
        let mut node_reference = Vec::with_capacity(blocks.len());
        for (j, r) in ranges.iter().enumerate() {
            let n_j = r.len();
            let local_raw = GramBlock::new(j, j, raw.values.view((r.start, r.start), (n_j, n_j)).into_owned());
            node_kernels.push(kernel::center(&local_raw).values);
            let cross_raw = GramBlock::new(j, POOLED, raw.values.view((r.start, 0), (n_j, total)).into_owned());
            let cross = kernel::center(&cross_raw);
            node_reference.push(&cross.values * &central.alpha);
        }

        Ok(Evaluator {
            spec: spec.clone(),
            global_data,
            ranges,
            central,
            gt_energy,
            node_kernels,
            node_reference,
        })
    }

    /// The pooled-data central solution.
    pub fn central(&self) -> &CentralSolution {
        &self.central
    }

    /// Number of nodes the evaluator was built over.
    pub fn node_count(&self) -> usize {
        self.ranges.len()
    }

    /// Column range of node `j` inside the pooled sample set.
    pub fn node_range(&self, j: usize) -> Range<usize> {
        self.ranges[j].clone()
    }

    /// The locally centered kernel block of node `j`.
    pub fn node_kernel(&self, j: usize) -> &DMatrix<f64> {
        &self.node_kernels[j]
    }

    /// Scores node `j`'s coefficients against the reference component.
    pub fn node_similarity(&self, j: usize, alpha: &DVector<f64>) -> Result<SimilarityValue> {
        if j >= self.ranges.len() {
            return Err(Error::MetricUndefined(format!(
                "node {j} outside the evaluated set of {} nodes",
                self.ranges.len()
            )));
        }
        if alpha.len() != self.ranges[j].len() {
            return Err(Error::DimensionMismatch(format!(
                "node {j} holds {} samples but received {} coefficients",
                self.ranges[j].len(),
                alpha.len()
            )));
        }
        let energy = alpha.dot(&(&self.node_kernels[j] * alpha));
        let inner = alpha.dot(&self.node_reference[j]);
        cosine(inner, energy, self.gt_energy)
    }

    /// Scores every node's coefficients and aggregates.
    pub fn report(&self, alphas: &[DVector<f64>]) -> Result<SimilarityReport> {
        if alphas.len() != self.ranges.len() {
            return Err(Error::DimensionMismatch(format!(
                "received {} coefficient vectors for {} nodes",
                alphas.len(),
                self.ranges.len()
            )));
        }
        let per_node = alphas
            .iter()
            .enumerate()
            .map(|(j, a)| self.node_similarity(j, a))
            .collect::<Result<Vec<_>>>()?;
        SimilarityReport::new(per_node)
    }

    /// Scores a component spanned by an arbitrary sample set.
    ///
    /// `data` holds the samples (one per column) whose locally centered
    /// features carry the component, and `alpha` its coefficients. This is
    /// the general path behind the cached per-node scoring and also serves
    /// datasets that never appear verbatim in the pool, such as noisy
    /// neighborhood copies.
    pub fn component_similarity(
        &self,
        data: &DMatrix<f64>,
        alpha: &DVector<f64>,
    ) -> Result<SimilarityValue> {
        if data.nrows() != self.global_data.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "query samples have dimension {} but the pool has {}",
                data.nrows(),
                self.global_data.nrows()
            )));
        }
        if alpha.len() != data.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} samples with {} coefficients",
                data.ncols(),
                alpha.len()
            )));
        }
        let local = kernel::center(&kernel::gram(&self.spec, 0, data, 0, data)?);
        let cross = kernel::center(&kernel::gram(
            &self.spec,
            0,
            data,
            POOLED,
            &self.global_data,
        )?);
        let energy = alpha.dot(&(&local.values * alpha));
        let inner = alpha.dot(&(&cross.values * &self.central.alpha));
        cosine(inner, energy, self.gt_energy)
    }

    /// Best score a node can reach from its own samples alone: the central
    /// solution of its local kernel block, scored against the reference.
    pub fn local_baseline(&self, j: usize) -> Result<SimilarityValue> {
        if j >= self.ranges.len() {
            return Err(Error::MetricUndefined(format!(
                "node {j} outside the evaluated set of {} nodes",
                self.ranges.len()
            )));
        }
        let block = GramBlock::new(j, j, self.node_kernels[j].clone());
        let local = central::solve_central(&block)?;
        self.node_similarity(j, &local.alpha)
    }

    /// Best score reachable from an arbitrary sample set: its own central
    /// solution, scored against the reference.
    pub fn dataset_baseline(&self, data: &DMatrix<f64>) -> Result<SimilarityValue> {
        let local = kernel::center(&kernel::gram(&self.spec, 0, data, 0, data)?);
        let solution = central::solve_central(&GramBlock::new(0, 0, local.values))?;
        self.component_similarity(data, &solution.alpha)
    }
}

/// Cosine from the kernel inner product and the two kernel energies.
fn cosine(inner: f64, energy: f64, reference_energy: f64) -> Result<SimilarityValue> {
    let den = (energy.max(0.0) * reference_energy.max(0.0)).sqrt();
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::MetricUndefined(format!(
            "component kernel energy {energy} admits no cosine"
        )));
    }
    let signed = inner / den;
    if !signed.is_finite() {
        return Err(Error::MetricUndefined(format!(
            "non-finite similarity from inner product {inner}"
        )));
    }
    Ok(SimilarityValue::from_cosine(signed))
}
