//! Core value types shared by every other module: datasets, annotation
//! tensors, fitting configuration, and the fitted consensus model.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::scalar::castu;
use crate::{cast, AmccError, Result, Scalar};

/// Role of a sample in an active-learning experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Labeled,
    Unlabeled,
    Test,
}

/// A multi-label problem instance: sample count, label count, and optional
/// side information (features for kNN credibility, ground truth for
/// evaluation, a labeled/unlabeled/test split for active learning).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Dataset<F: Scalar> {
    pub num_samples: usize,
    pub num_labels: usize,
    /// One row of real-valued features per sample, when available.
    pub features: Option<Array2<F>>,
    /// Ground-truth relevant label sets; every set non-empty when present.
    pub true_labels: Option<Vec<BTreeSet<usize>>>,
    /// Per-sample split tags, when the dataset is used for active learning.
    pub partition: Option<Vec<Partition>>,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(num_samples: usize, num_labels: usize) -> Result<Self> {
        let ds = Dataset {
            num_samples,
            num_labels,
            features: None,
            true_labels: None,
            partition: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_features(mut self, features: Array2<F>) -> Result<Self> {
        self.features = Some(features);
        self.validate()?;
        Ok(self)
    }

    pub fn with_true_labels(mut self, labels: Vec<BTreeSet<usize>>) -> Result<Self> {
        self.true_labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn with_partition(mut self, partition: Vec<Partition>) -> Result<Self> {
        self.partition = Some(partition);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(AmccError::InvalidDimension("dataset needs at least one sample".into()));
        }
        if self.num_labels < 2 {
            return Err(AmccError::InvalidDimension("dataset needs at least two labels".into()));
        }
        if let Some(f) = &self.features {
            if f.nrows() != self.num_samples {
                return Err(AmccError::shape(
                    format!("{} feature rows", self.num_samples),
                    format!("{}", f.nrows()),
                ));
            }
        }
        if let Some(t) = &self.true_labels {
            if t.len() != self.num_samples {
                return Err(AmccError::shape(
                    format!("{} truth rows", self.num_samples),
                    format!("{}", t.len()),
                ));
            }
            for (i, set) in t.iter().enumerate() {
                if set.is_empty() {
                    return Err(AmccError::Domain(format!(
                        "sample {i} has an empty ground-truth label set"
                    )));
                }
                if let Some(&l) = set.iter().next_back() {
                    if l >= self.num_labels {
                        return Err(AmccError::Domain(format!(
                            "sample {i} references label {l} but only {} labels exist",
                            self.num_labels
                        )));
                    }
                }
            }
        }
        if let Some(p) = &self.partition {
            if p.len() != self.num_samples {
                return Err(AmccError::shape(
                    format!("{} partition tags", self.num_samples),
                    format!("{}", p.len()),
                ));
            }
        }
        Ok(())
    }
}

/// Per-worker annotation matrices. Entry semantics: +1 asserted relevant,
/// -1 asserted irrelevant, 0 not annotated. A worker with no annotations at
/// all is rejected at construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTensor {
    num_workers: usize,
    num_samples: usize,
    num_labels: usize,
    matrices: Vec<Array2<i8>>,
}

impl AnnotationTensor {
    pub fn new(matrices: Vec<Array2<i8>>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(AmccError::InvalidDimension("annotation tensor needs at least one worker".into()));
        }
        let (n, l) = matrices[0].dim();
        if n == 0 || l == 0 {
            return Err(AmccError::InvalidDimension("annotation matrices must be non-empty".into()));
        }
        let mut empty_workers = Vec::new();
        for (w, a) in matrices.iter().enumerate() {
            if a.dim() != (n, l) {
                return Err(AmccError::shape(
                    format!("{n}x{l} for every worker"),
                    format!("{}x{} for worker {w}", a.nrows(), a.ncols()),
                ));
            }
            let mut nonzero = false;
            for &v in a.iter() {
                if !matches!(v, -1..=1) {
                    return Err(AmccError::Domain(format!(
                        "worker {w} has annotation value {v}; only -1, 0, +1 are allowed"
                    )));
                }
                nonzero |= v != 0;
            }
            if !nonzero {
                empty_workers.push(w.to_string());
            }
        }
        if !empty_workers.is_empty() {
            return Err(AmccError::UnderAnnotatedWorkers(empty_workers.join(", ")));
        }
        Ok(AnnotationTensor {
            num_workers: matrices.len(),
            num_samples: n,
            num_labels: l,
            matrices,
        })
    }

    pub fn num_workers(&self) -> usize {
        self.num_workers
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn worker(&self, w: usize) -> &Array2<i8> {
        &self.matrices[w]
    }

    pub fn workers(&self) -> &[Array2<i8>] {
        &self.matrices
    }

    /// Record a fresh annotation. Only ±1 may be written; clearing entries is
    /// not supported because it could silently empty a worker.
    pub fn set_entry(&mut self, worker: usize, sample: usize, label: usize, value: i8) -> Result<()> {
        if !matches!(value, -1 | 1) {
            return Err(AmccError::Domain(format!(
                "annotation value must be -1 or +1, got {value}"
            )));
        }
        if worker >= self.num_workers || sample >= self.num_samples || label >= self.num_labels {
            return Err(AmccError::InvalidDimension(format!(
                "entry ({worker}, {sample}, {label}) outside tensor {}x{}x{}",
                self.num_workers, self.num_samples, self.num_labels
            )));
        }
        self.matrices[worker][[sample, label]] = value;
        Ok(())
    }

    /// Number of nonzero annotations of one worker.
    pub fn annotation_count(&self, w: usize) -> usize {
        self.matrices[w].iter().filter(|&&v| v != 0).count()
    }

    pub fn total_annotations(&self) -> usize {
        (0..self.num_workers).map(|w| self.annotation_count(w)).sum()
    }

    /// Worker matrices converted to the working scalar type.
    pub fn to_float<F: Scalar>(&self) -> Vec<Array2<F>> {
        self.matrices
            .iter()
            .map(|a| a.map(|&v| cast::<F>(v as f64)))
            .collect()
    }
}

/// Hyperparameters of the consensus model and the active loop.
///
/// Constructed for a known problem size so defaults that depend on the label
/// and worker counts (the penalty `mu`, the score threshold) resolve eagerly.
/// Setters that change `beta` re-derive the default `mu`; call `with_mu`
/// afterwards to override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AmccConfig<F: Scalar> {
    pub num_labels: usize,
    pub num_workers: usize,
    /// Number of worker groups M.
    pub num_groups: usize,
    /// Weight of the pairwise worker-dependence (HSIC) term.
    pub alpha: F,
    /// Weight of the Laplacian smoothness term in the objective.
    pub beta: F,
    /// Group-weight sharpness exponent; must exceed 1.
    pub r: F,
    /// ADMM penalty; must keep the individuality subproblem convex.
    pub mu: F,
    /// Blend between correlation gain and boundary uncertainty.
    pub eta: F,
    /// Neighbor count for worker credibility.
    pub knn_k: usize,
    pub max_inner_iters: usize,
    pub convergence_tol: F,
    pub batch_size: usize,
    /// Normalized-score threshold for consensus label sets.
    pub consensus_threshold: F,
    /// Floor applied inside log-domain products.
    pub prob_floor: F,
}

/// Smallest penalty that provably keeps the per-worker subproblem convex for
/// a given dependence coefficient: 4·L·(W−1) times the coefficient.
pub fn convexity_penalty_floor<F: Scalar>(num_labels: usize, num_workers: usize, coeff: F) -> F {
    castu::<F>(4 * num_labels * num_workers.saturating_sub(1)) * coeff
}

impl<F: Scalar> AmccConfig<F> {
    /// Configuration with all defaults resolved for an L-label, W-worker
    /// problem. The default group count caps at W so the result always
    /// validates.
    pub fn new(num_labels: usize, num_workers: usize) -> Self {
        let beta = cast::<F>(10.0);
        AmccConfig {
            num_labels,
            num_workers,
            num_groups: 5.min(num_workers.max(1)),
            alpha: cast(0.1),
            beta,
            r: cast(2.0),
            mu: Self::default_mu(num_labels, num_workers, beta),
            eta: cast(0.3),
            knn_k: 5,
            max_inner_iters: 100,
            convergence_tol: cast(1e-5),
            batch_size: 5,
            consensus_threshold: F::one() / castu(num_labels.max(1)),
            prob_floor: cast(1e-12),
        }
    }

    fn default_mu(num_labels: usize, num_workers: usize, beta: F) -> F {
        let floor = convexity_penalty_floor(num_labels, num_workers, beta);
        if beta > F::zero() && floor > F::zero() {
            floor
        } else {
            // No smoothness coefficient (or no worker pairs) to anchor the
            // bound; any positive penalty is admissible.
            F::one()
        }
    }

    pub fn with_groups(mut self, m: usize) -> Self {
        self.num_groups = m;
        self
    }

    pub fn with_alpha(mut self, alpha: F) -> Self {
        self.alpha = alpha;
        self
    }

    /// Sets `beta` and re-derives the default `mu` for it.
    pub fn with_beta(mut self, beta: F) -> Self {
        self.beta = beta;
        self.mu = Self::default_mu(self.num_labels, self.num_workers, beta);
        self
    }

    pub fn with_r(mut self, r: F) -> Self {
        self.r = r;
        self
    }

    pub fn with_mu(mut self, mu: F) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_eta(mut self, eta: F) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_knn_k(mut self, k: usize) -> Self {
        self.knn_k = k;
        self
    }

    pub fn with_max_inner_iters(mut self, iters: usize) -> Self {
        self.max_inner_iters = iters;
        self
    }

    pub fn with_convergence_tol(mut self, tol: F) -> Self {
        self.convergence_tol = tol;
        self
    }

    pub fn with_batch_size(mut self, b: usize) -> Self {
        self.batch_size = b;
        self
    }

    pub fn with_consensus_threshold(mut self, t: F) -> Self {
        self.consensus_threshold = t;
        self
    }

    // The negated comparisons are deliberate: NaN fails `x > 0`, so
    // `!(x > 0)` rejects NaN where `x <= 0` would accept it.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(AmccError::InvalidConfig(msg));
        if self.num_labels < 2 {
            return fail("need at least two labels".into());
        }
        if self.num_workers == 0 {
            return fail("need at least one worker".into());
        }
        if self.num_groups == 0 {
            return fail("num_groups must be at least 1".into());
        }
        if self.num_groups > self.num_workers {
            return fail(format!(
                "num_groups {} exceeds worker count {}",
                self.num_groups, self.num_workers
            ));
        }
        if self.alpha < F::zero() || !self.alpha.is_finite() {
            return fail("alpha must be a non-negative finite real".into());
        }
        if self.beta < F::zero() || !self.beta.is_finite() {
            return fail("beta must be a non-negative finite real".into());
        }
        if !(self.r > F::one()) || !self.r.is_finite() {
            return fail("r must be a finite real greater than 1".into());
        }
        if !(self.mu > F::zero()) || !self.mu.is_finite() {
            return fail("mu must be a positive finite real".into());
        }
        if self.beta > F::zero() {
            let floor = convexity_penalty_floor(self.num_labels, self.num_workers, self.beta);
            // Tiny slack so a mu computed as exactly the floor is accepted
            // even when the quotient rounds unfavourably.
            let slack = floor * F::epsilon() * cast(8.0);
            if self.mu + slack < floor {
                return fail(format!(
                    "mu = {} is below the convexity floor 4*L*(W-1)*beta = {}; \
                     the individuality subproblem would not be provably convex",
                    self.mu, floor
                ));
            }
        }
        if !(self.eta > F::zero() && self.eta < F::one()) {
            return fail("eta must lie strictly between 0 and 1".into());
        }
        if self.knn_k == 0 {
            return fail("knn_k must be at least 1".into());
        }
        if self.max_inner_iters == 0 {
            return fail("max_inner_iters must be at least 1".into());
        }
        if !(self.convergence_tol > F::zero()) {
            return fail("convergence_tol must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.consensus_threshold > F::zero() && self.consensus_threshold < F::one()) {
            return fail("consensus_threshold must lie strictly between 0 and 1".into());
        }
        if !(self.prob_floor > F::zero()) {
            return fail("prob_floor must be positive".into());
        }
        Ok(())
    }

    /// Check the config against the dimensions of an actual tensor.
    pub fn validate_for(&self, tensor: &AnnotationTensor) -> Result<()> {
        self.validate()?;
        if tensor.num_labels() != self.num_labels || tensor.num_workers() != self.num_workers {
            return Err(AmccError::shape(
                format!("config sized for {} labels / {} workers", self.num_labels, self.num_workers),
                format!(
                    "tensor with {} labels / {} workers",
                    tensor.num_labels(),
                    tensor.num_workers()
                ),
            ));
        }
        Ok(())
    }
}

/// Cosine-similarity graph over labels and its Laplacian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LabelCorrelation<F: Scalar> {
    /// Symmetric non-negative similarity matrix.
    pub similarity: Array2<F>,
    /// Diagonal degree matrix (row sums of the similarity).
    pub degree: Array2<F>,
    /// Laplacian: degree minus similarity.
    pub laplacian: Array2<F>,
}

impl<F: Scalar> LabelCorrelation<F> {
    pub fn num_labels(&self) -> usize {
        self.similarity.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.similarity.nrows();
        for m in [&self.similarity, &self.degree, &self.laplacian] {
            if m.dim() != (l, l) {
                return Err(AmccError::shape(format!("{l}x{l}"), format!("{}x{}", m.nrows(), m.ncols())));
            }
        }
        let tol = F::feas_tol();
        for i in 0..l {
            for j in 0..l {
                if (self.similarity[[i, j]] - self.similarity[[j, i]]).abs() > tol {
                    return Err(AmccError::Domain("label similarity matrix is not symmetric".into()));
                }
                if self.similarity[[i, j]] < -tol {
                    return Err(AmccError::Domain("label similarity matrix has negative weights".into()));
                }
                if i != j && self.degree[[i, j]].abs() > tol {
                    return Err(AmccError::Domain("degree matrix is not diagonal".into()));
                }
            }
            let row_sum = self.laplacian.row(i).iter().copied().sum::<F>();
            if row_sum.abs() > tol {
                return Err(AmccError::Domain(format!(
                    "laplacian row {i} sums to {row_sum}, expected 0"
                )));
            }
        }
        Ok(())
    }
}

/// The fitted consensus model: per-worker individuality, per-group
/// commonality, group weights, and the worker-to-group assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ConsensusModel<F: Scalar> {
    /// One row-stochastic L×L matrix per worker.
    pub individuality: Vec<Array2<F>>,
    /// One L×L matrix per group.
    pub commonality: Vec<Array2<F>>,
    /// Non-negative weights over groups, summing to 1.
    pub group_weights: Vec<F>,
    /// Group index (0-based) of each worker.
    pub group_assignment: Vec<usize>,
    pub label_correlation: LabelCorrelation<F>,
}

impl<F: Scalar> ConsensusModel<F> {
    pub fn num_workers(&self) -> usize {
        self.individuality.len()
    }

    pub fn num_groups(&self) -> usize {
        self.commonality.len()
    }

    pub fn num_labels(&self) -> usize {
        self.label_correlation.num_labels()
    }

    /// Workers assigned to group `m`, in worker order.
    pub fn group_members(&self, m: usize) -> Vec<usize> {
        self.group_assignment
            .iter()
            .enumerate()
            .filter_map(|(w, &g)| (g == m).then_some(w))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_labels();
        let m = self.num_groups();
        let w = self.num_workers();
        if w == 0 || m == 0 {
            return Err(AmccError::InvalidDimension("model needs at least one worker and one group".into()));
        }
        let tol = F::feas_tol();
        for (wi, d) in self.individuality.iter().enumerate() {
            if d.dim() != (l, l) {
                return Err(AmccError::shape(format!("{l}x{l} individuality"), format!("{}x{}", d.nrows(), d.ncols())));
            }
            for g in 0..l {
                let mut sum = F::zero();
                for v in d.row(g).iter() {
                    if *v < -tol {
                        return Err(AmccError::Domain(format!(
                            "individuality of worker {wi} has a negative entry in row {g}"
                        )));
                    }
                    sum += *v;
                }
                if (sum - F::one()).abs() > tol {
                    return Err(AmccError::Domain(format!(
                        "individuality row {g} of worker {wi} sums to {sum}, expected 1"
                    )));
                }
            }
        }
        for c in &self.commonality {
            if c.dim() != (l, l) {
                return Err(AmccError::shape(format!("{l}x{l} commonality"), format!("{}x{}", c.nrows(), c.ncols())));
            }
        }
        if self.group_weights.len() != m {
            return Err(AmccError::shape(format!("{m} group weights"), format!("{}", self.group_weights.len())));
        }
        let mut total = F::zero();
        for &lam in &self.group_weights {
            if lam < -tol {
                return Err(AmccError::Domain("negative group weight".into()));
            }
            total += lam;
        }
        if (total - F::one()).abs() > tol {
            return Err(AmccError::Domain(format!("group weights sum to {total}, expected 1")));
        }
        if self.group_assignment.len() != w {
            return Err(AmccError::shape(format!("{w} assignments"), format!("{}", self.group_assignment.len())));
        }
        for (wi, &g) in self.group_assignment.iter().enumerate() {
            if g >= m {
                return Err(AmccError::Domain(format!(
                    "worker {wi} assigned to group {g}, but only {m} groups exist"
                )));
            }
        }
        self.label_correlation.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_tensor() -> AnnotationTensor {
        AnnotationTensor::new(vec![
            array![[1, 0, -1], [0, 1, 0]],
            array![[0, 1, 0], [1, 0, 1]],
        ])
        .unwrap()
    }

    #[test]
    fn tensor_validates_entries_and_shapes() {
        let t = toy_tensor();
        assert_eq!(t.num_workers(), 2);
        assert_eq!(t.num_samples(), 2);
        assert_eq!(t.num_labels(), 3);
        assert_eq!(t.annotation_count(0), 3);

        let bad_value = AnnotationTensor::new(vec![array![[2, 0], [0, 1]]]);
        assert!(matches!(bad_value, Err(AmccError::Domain(_))));

        let empty_worker = AnnotationTensor::new(vec![array![[1, 0]], array![[0, 0]]]);
        assert!(matches!(empty_worker, Err(AmccError::UnderAnnotatedWorkers(ids)) if ids == "1"));

        let mismatched = AnnotationTensor::new(vec![array![[1, 0]], array![[1, 0, 0]]]);
        assert!(matches!(mismatched, Err(AmccError::DimensionMismatch { .. })));
    }

    #[test]
    fn tensor_set_entry_guards() {
        let mut t = toy_tensor();
        t.set_entry(0, 1, 2, 1).unwrap();
        assert_eq!(t.worker(0)[[1, 2]], 1);
        assert!(t.set_entry(0, 0, 0, 0).is_err());
        assert!(t.set_entry(5, 0, 0, 1).is_err());
    }

    #[test]
    fn default_mu_sits_exactly_on_the_convexity_floor() {
        let cfg = AmccConfig::<f64>::new(6, 13);
        assert_eq!(cfg.mu / cfg.beta, (4 * 6 * 12) as f64);
        cfg.validate().unwrap();

        let cfg32 = AmccConfig::<f32>::new(4, 3);
        assert_eq!(cfg32.mu / cfg32.beta, (4 * 4 * 2) as f32);
        cfg32.validate().unwrap();
    }

    #[test]
    fn config_rejects_violations() {
        let base = AmccConfig::<f64>::new(6, 13);
        assert!(base.clone().with_mu(1.0).validate().is_err());
        assert!(base.clone().with_groups(14).validate().is_err());
        assert!(base.clone().with_groups(0).validate().is_err());
        assert!(base.clone().with_r(1.0).validate().is_err());
        assert!(base.clone().with_eta(0.0).validate().is_err());
        assert!(base.clone().with_eta(1.0).validate().is_err());
        assert!(base.clone().with_alpha(-0.5).validate().is_err());
        assert!(base.clone().with_consensus_threshold(1.0).validate().is_err());
        // beta = 0 lifts the mu/beta constraint but mu itself must stay positive.
        let free = base.clone().with_beta(0.0);
        assert!(free.validate().is_ok());
        assert!(free.with_mu(0.0).validate().is_err());
    }

    #[test]
    fn default_group_count_caps_at_worker_count() {
        assert_eq!(AmccConfig::<f64>::new(6, 3).num_groups, 3);
        assert_eq!(AmccConfig::<f64>::new(6, 13).num_groups, 5);
    }

    #[test]
    fn with_beta_rederives_mu() {
        let cfg = AmccConfig::<f64>::new(6, 13).with_beta(0.5);
        assert_eq!(cfg.mu, 4.0 * 6.0 * 12.0 * 0.5);
        cfg.validate().unwrap();
    }

    #[test]
    fn dataset_guards_side_information() {
        let ds = Dataset::<f64>::new(3, 4).unwrap();
        assert!(ds
            .clone()
            .with_true_labels(vec![BTreeSet::new(); 3])
            .is_err());
        let mut good = Vec::new();
        for l in 0..3 {
            good.push(BTreeSet::from([l]));
        }
        let ds = ds.with_true_labels(good).unwrap();
        assert!(ds.clone().with_partition(vec![Partition::Labeled; 2]).is_err());
        assert!(Dataset::<f64>::new(0, 4).is_err());
        assert!(Dataset::<f64>::new(4, 1).is_err());
    }

    #[test]
    fn tensor_roundtrips_through_serde_bit_exactly() {
        let t = toy_tensor();
        let json = serde_json::to_string(&t).unwrap();
        let back: AnnotationTensor = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
    }
}
