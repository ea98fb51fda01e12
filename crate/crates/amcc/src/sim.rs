//! Synthetic crowds: ground-truth generation with controllable label
//! cardinality and co-occurrence, confusion-matrix worker archetypes,
//! annotation sampling, sparsification, and a replayable query oracle.
//!
//! Everything is deterministic given a seed. Sub-generators derive their own
//! seeds from the root seed with `derive_seed`, so adding queries or workers
//! never perturbs unrelated draws.

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{AnnotationTensor, Dataset};
use crate::scalar::castu;
use crate::{cast, AmccError, Result, Scalar};

/// Stable seed derivation: FNV-1a over a tag and index, finalized with a
/// splitmix64 round. Used to give every component its own RNG stream.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    for b in index.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Worker quality classes, from trustworthy annotators down to spammers that
/// carry no signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchetypeKind {
    Reliable,
    Normal,
    Sloppy,
    UniformSpammer,
    RandomSpammer,
}

/// A simulated worker: a row-stochastic confusion matrix (row = true label,
/// column = emitted label) and the probability of annotating any given
/// sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct WorkerArchetype<F: Scalar> {
    pub kind: ArchetypeKind,
    pub confusion: Array2<F>,
    pub annotation_rate: F,
}

impl<F: Scalar> WorkerArchetype<F> {
    fn diagonal_confusion(l: usize, diag: F) -> Array2<F> {
        let off = (F::one() - diag) / castu::<F>(l - 1);
        Array2::from_shape_fn((l, l), |(i, j)| if i == j { diag } else { off })
    }

    /// Graded worker classified by diagonal strength: ≥ 0.9 reliable,
    /// [0.7, 0.9) normal, [0.4, 0.7) sloppy.
    pub fn from_diagonal(l: usize, diag: F) -> Result<Self> {
        let kind = if diag >= cast::<F>(0.9) {
            ArchetypeKind::Reliable
        } else if diag >= cast::<F>(0.7) {
            ArchetypeKind::Normal
        } else if diag >= cast::<F>(0.4) {
            ArchetypeKind::Sloppy
        } else {
            return Err(AmccError::Domain(format!(
                "diagonal {diag} below the sloppy range [0.4, 0.7)"
            )));
        };
        if diag > F::one() {
            return Err(AmccError::Domain(format!("diagonal {diag} exceeds 1")));
        }
        let arch = WorkerArchetype {
            kind,
            confusion: Self::diagonal_confusion(l, diag),
            annotation_rate: F::one(),
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Spammer that answers the same label no matter the truth.
    pub fn uniform_spammer(l: usize, column: usize) -> Result<Self> {
        if column >= l {
            return Err(AmccError::Domain(format!(
                "spam column {column} out of range for {l} labels"
            )));
        }
        let confusion =
            Array2::from_shape_fn((l, l), |(_, j)| if j == column { F::one() } else { F::zero() });
        Ok(WorkerArchetype {
            kind: ArchetypeKind::UniformSpammer,
            confusion,
            annotation_rate: F::one(),
        })
    }

    /// Spammer that answers uniformly at random.
    pub fn random_spammer(l: usize) -> Result<Self> {
        if l < 2 {
            return Err(AmccError::InvalidDimension("need at least two labels".into()));
        }
        Ok(WorkerArchetype {
            kind: ArchetypeKind::RandomSpammer,
            confusion: Array2::from_elem((l, l), F::one() / castu::<F>(l)),
            annotation_rate: F::one(),
        })
    }

    pub fn with_rate(mut self, rate: F) -> Self {
        self.annotation_rate = rate;
        self
    }

    pub fn num_labels(&self) -> usize {
        self.confusion.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.confusion.nrows();
        if l < 2 || self.confusion.ncols() != l {
            return Err(AmccError::shape(
                "square confusion with L >= 2",
                format!("{}x{}", l, self.confusion.ncols()),
            ));
        }
        let tol = cast::<F>(1e-10);
        for (g, row) in self.confusion.outer_iter().enumerate() {
            let mut sum = F::zero();
            for &p in row.iter() {
                if p < F::zero() {
                    return Err(AmccError::Domain(format!(
                        "confusion row {g} has a negative entry"
                    )));
                }
                sum += p;
            }
            if (sum - F::one()).abs() > tol {
                return Err(AmccError::Domain(format!(
                    "confusion row {g} sums to {sum}, expected 1"
                )));
            }
        }
        if self.annotation_rate <= F::zero() || self.annotation_rate > F::one() {
            return Err(AmccError::Domain(format!(
                "annotation rate {} outside (0, 1]",
                self.annotation_rate
            )));
        }
        let kind_ok = match self.kind {
            ArchetypeKind::Reliable => {
                (0..l).all(|g| self.confusion[[g, g]] >= cast::<F>(0.9))
            }
            ArchetypeKind::Normal => (0..l).all(|g| {
                self.confusion[[g, g]] >= cast::<F>(0.7)
                    && self.confusion[[g, g]] < cast::<F>(0.9)
            }),
            ArchetypeKind::Sloppy => (0..l).all(|g| {
                self.confusion[[g, g]] >= cast::<F>(0.4)
                    && self.confusion[[g, g]] < cast::<F>(0.7)
            }),
            ArchetypeKind::UniformSpammer => {
                let col = (0..l).find(|&j| self.confusion[[0, j]] > F::zero());
                col.is_some_and(|j| {
                    (0..l).all(|g| (self.confusion[[g, j]] - F::one()).abs() <= tol)
                })
            }
            ArchetypeKind::RandomSpammer => {
                let u = F::one() / castu::<F>(l);
                self.confusion.iter().all(|&p| (p - u).abs() <= tol)
            }
        };
        if !kind_ok {
            return Err(AmccError::Domain(format!(
                "confusion matrix inconsistent with archetype {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Declarative crowd recipe for config files: graded diagonals plus spammer
/// counts, one global annotation rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrowdSpec {
    pub num_samples: usize,
    pub num_labels: usize,
    pub cardinality: f64,
    pub correlation_strength: f64,
    pub annotation_rate: f64,
    pub negative_rate: f64,
    /// Confusion diagonals of the graded (non-spammer) workers.
    pub diagonals: Vec<f64>,
    pub uniform_spammers: usize,
    pub random_spammers: usize,
}

impl Default for CrowdSpec {
    fn default() -> Self {
        CrowdSpec {
            num_samples: 300,
            num_labels: 6,
            cardinality: 1.87,
            correlation_strength: 0.5,
            annotation_rate: 0.6,
            negative_rate: 0.1,
            diagonals: vec![0.95, 0.90, 0.85, 0.75, 0.65, 0.55, 0.45],
            uniform_spammers: 3,
            random_spammers: 3,
        }
    }
}

impl CrowdSpec {
    pub fn num_workers(&self) -> usize {
        self.diagonals.len() + self.uniform_spammers + self.random_spammers
    }

    /// Materialize the archetype list: graded workers in declared order,
    /// then uniform spammers on round-robin columns, then random spammers.
    pub fn build_archetypes<F: Scalar>(&self) -> Result<Vec<WorkerArchetype<F>>> {
        let l = self.num_labels;
        let rate = cast::<F>(self.annotation_rate);
        let mut out = Vec::with_capacity(self.num_workers());
        for &d in &self.diagonals {
            out.push(WorkerArchetype::from_diagonal(l, cast::<F>(d))?.with_rate(rate));
        }
        for k in 0..self.uniform_spammers {
            out.push(WorkerArchetype::uniform_spammer(l, k % l)?.with_rate(rate));
        }
        for _ in 0..self.random_spammers {
            out.push(WorkerArchetype::random_spammer(l)?.with_rate(rate));
        }
        Ok(out)
    }
}

/// A generated dataset, its annotations, the archetypes that produced them,
/// and a memoized oracle for active-learning queries.
#[derive(Debug)]
pub struct SimulatedCrowd<F: Scalar> {
    pub dataset: Dataset<F>,
    pub tensor: AnnotationTensor,
    pub archetypes: Vec<WorkerArchetype<F>>,
    pub seed: u64,
    oracle_cache: Mutex<HashMap<(usize, usize, usize), i8>>,
}

impl<F: Scalar> Clone for SimulatedCrowd<F> {
    fn clone(&self) -> Self {
        SimulatedCrowd {
            dataset: self.dataset.clone(),
            tensor: self.tensor.clone(),
            archetypes: self.archetypes.clone(),
            seed: self.seed,
            oracle_cache: Mutex::new(self.oracle_cache.lock().expect("cache lock").clone()),
        }
    }
}

impl<F: Scalar> SimulatedCrowd<F> {
    /// Generate truth and annotations from a crowd recipe.
    pub fn from_spec(spec: &CrowdSpec, seed: u64) -> Result<Self> {
        let archetypes = spec.build_archetypes::<F>()?;
        let dataset = generate_ground_truth::<F>(
            spec.num_samples,
            spec.num_labels,
            spec.cardinality,
            spec.correlation_strength,
            derive_seed(seed, "truth", 0),
        )?;
        let tensor = annotate_with(
            &dataset,
            &archetypes,
            spec.negative_rate,
            derive_seed(seed, "annotate", 0),
        )?;
        Ok(SimulatedCrowd {
            dataset,
            tensor,
            archetypes,
            seed,
            oracle_cache: Mutex::new(HashMap::new()),
        })
    }

    /// Assemble a crowd from parts (for loading saved snapshots).
    pub fn from_parts(
        dataset: Dataset<F>,
        tensor: AnnotationTensor,
        archetypes: Vec<WorkerArchetype<F>>,
        seed: u64,
    ) -> Result<Self> {
        if tensor.num_samples() != dataset.num_samples
            || tensor.num_labels() != dataset.num_labels
            || tensor.num_workers() != archetypes.len()
        {
            return Err(AmccError::shape(
                format!(
                    "tensor {}x{}x{}",
                    archetypes.len(),
                    dataset.num_samples,
                    dataset.num_labels
                ),
                format!(
                    "{}x{}x{}",
                    tensor.num_workers(),
                    tensor.num_samples(),
                    tensor.num_labels()
                ),
            ));
        }
        Ok(SimulatedCrowd {
            dataset,
            tensor,
            archetypes,
            seed,
            oracle_cache: Mutex::new(HashMap::new()),
        })
    }

    /// Replace the annotation tensor (e.g. with a sparsified copy).
    pub fn with_tensor(mut self, tensor: AnnotationTensor) -> Self {
        self.tensor = tensor;
        self
    }

    /// Answer a query by sampling the worker's confusion model conditioned
    /// on the sample's truth: +1 with probability
    /// `Σ_{g∈truth} confusion(g, label) / |truth|`, else −1. Memoized, and
    /// the per-query RNG is derived from the query indices, so transcripts
    /// replay identically in any order.
    pub fn oracle_answer(&self, sample: usize, label: usize, worker: usize) -> Result<i8> {
        let n = self.dataset.num_samples;
        let l = self.dataset.num_labels;
        let w = self.archetypes.len();
        if sample >= n || label >= l || worker >= w {
            return Err(AmccError::InvalidDimension(format!(
                "query ({sample}, {label}, {worker}) out of range for {n}x{l}x{w}"
            )));
        }
        if let Some(&v) = self
            .oracle_cache
            .lock()
            .expect("cache lock")
            .get(&(sample, label, worker))
        {
            return Ok(v);
        }
        let truth = self
            .dataset
            .true_labels
            .as_ref()
            .ok_or_else(|| AmccError::Precondition("crowd has no ground truth".into()))?;
        let set = &truth[sample];
        let conf = &self.archetypes[worker].confusion;
        let p = set
            .iter()
            .map(|&g| conf[[g, label]].to_f64().expect("finite probability"))
            .sum::<f64>()
            / set.len() as f64;
        let key = (sample as u64) * (l as u64) * (w as u64)
            + (label as u64) * (w as u64)
            + worker as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "oracle", key));
        let answer = if rng.random::<f64>() < p { 1 } else { -1 };
        self.oracle_cache
            .lock()
            .expect("cache lock")
            .insert((sample, label, worker), answer);
        Ok(answer)
    }
}

/// Probability that a sample comes out empty under the paired-label model.
fn empty_probability(l: usize, q: f64, s: f64) -> f64 {
    let pairs = l / 2;
    let pair_off = s * (1.0 - q) + (1.0 - s) * (1.0 - q) * (1.0 - q);
    let mut p = pair_off.powi(pairs as i32);
    if l % 2 == 1 {
        p *= 1.0 - q;
    }
    p
}

/// Mean cardinality conditioned on at least one label.
fn conditional_cardinality(l: usize, q: f64, s: f64) -> f64 {
    let pe = empty_probability(l, q, s);
    l as f64 * q / (1.0 - pe)
}

/// Sample label sets with a target mean cardinality and tunable pairwise
/// co-occurrence, plus Gaussian features with class-conditional means.
///
/// Labels are grouped into consecutive pairs. Per sample, each pair either
/// shares one Bernoulli(q) draw (with probability `correlation_strength`) or
/// draws its two labels independently; an unpaired trailing label always
/// draws independently. Empty samples are rejected and redrawn, and q is
/// calibrated by bisection so the conditional mean cardinality matches
/// `cardinality` exactly. `cardinality = 1` degenerates to uniform
/// singletons.
pub fn generate_ground_truth<F: Scalar>(
    n: usize,
    l: usize,
    cardinality: f64,
    correlation_strength: f64,
    seed: u64,
) -> Result<Dataset<F>> {
    if l < 2 {
        return Err(AmccError::InvalidDimension("need at least two labels".into()));
    }
    if n == 0 {
        return Err(AmccError::InvalidDimension("need at least one sample".into()));
    }
    if !(1.0..l as f64).contains(&cardinality) {
        return Err(AmccError::Domain(format!(
            "cardinality {cardinality} outside [1, {l})"
        )));
    }
    if !(0.0..=1.0).contains(&correlation_strength) {
        return Err(AmccError::Domain(format!(
            "correlation strength {correlation_strength} outside [0, 1]"
        )));
    }
    let s = correlation_strength;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "labels", 0));
    let mut truth: Vec<BTreeSet<usize>> = Vec::with_capacity(n);
    if cardinality <= 1.0 + 1e-12 {
        for _ in 0..n {
            truth.push(BTreeSet::from([rng.random_range(0..l)]));
        }
    } else {
        // Bisection: the conditional mean runs from 1 (q -> 0) to L (q -> 1)
        // and is increasing in q.
        let mut lo = 1e-12;
        let mut hi = 1.0 - 1e-12;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if conditional_cardinality(l, mid, s) < cardinality {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let q = 0.5 * (lo + hi);
        let pairs = l / 2;
        for _ in 0..n {
            let mut set = BTreeSet::new();
            for _attempt in 0..100_000 {
                set.clear();
                for p in 0..pairs {
                    let (a, b) = (2 * p, 2 * p + 1);
                    if rng.random::<f64>() < s {
                        if rng.random::<f64>() < q {
                            set.insert(a);
                            set.insert(b);
                        }
                    } else {
                        if rng.random::<f64>() < q {
                            set.insert(a);
                        }
                        if rng.random::<f64>() < q {
                            set.insert(b);
                        }
                    }
                }
                if l % 2 == 1 && rng.random::<f64>() < q {
                    set.insert(l - 1);
                }
                if !set.is_empty() {
                    break;
                }
            }
            if set.is_empty() {
                set.insert(rng.random_range(0..l));
            }
            truth.push(set);
        }
    }

    // Features: mean of the member labels' prototype vectors plus unit
    // Gaussian noise; prototypes are 3 * e_g, so kNN distances carry class
    // information.
    let mut feat_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "features", 0));
    let mut features = Array2::<F>::zeros((n, l));
    for (i, set) in truth.iter().enumerate() {
        let share = 3.0 / set.len() as f64;
        for j in 0..l {
            let mean = if set.contains(&j) { share } else { 0.0 };
            let noise: f64 = feat_rng.sample(StandardNormal);
            features[[i, j]] = cast::<F>(mean + noise);
        }
    }
    Dataset::new(n, l)?
        .with_true_labels(truth)?
        .with_features(features)
}

/// Annotate with the default explicit-negative fraction of 0.1.
pub fn annotate<F: Scalar>(
    dataset: &Dataset<F>,
    archetypes: &[WorkerArchetype<F>],
    seed: u64,
) -> Result<AnnotationTensor> {
    annotate_with(dataset, archetypes, 0.1, seed)
}

fn sample_confusion_row<F: Scalar>(rng: &mut ChaCha8Rng, conf: &Array2<F>, g: usize) -> usize {
    let l = conf.ncols();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for j in 0..l {
        acc += conf[[g, j]].to_f64().expect("finite probability");
        if u < acc {
            return j;
        }
    }
    l - 1
}

/// Sample an annotation tensor: each worker annotates each sample with its
/// archetype's rate, emitting one positive label per true label through the
/// confusion matrix, plus explicit −1 marks on clearly-wrong labels for a
/// `negative_rate` fraction of its annotated samples. Workers that end up
/// empty annotate one forced sample so the tensor stays valid.
pub fn annotate_with<F: Scalar>(
    dataset: &Dataset<F>,
    archetypes: &[WorkerArchetype<F>],
    negative_rate: f64,
    seed: u64,
) -> Result<AnnotationTensor> {
    let truth = dataset
        .true_labels
        .as_ref()
        .ok_or_else(|| AmccError::Precondition("dataset has no ground truth".into()))?;
    if archetypes.is_empty() {
        return Err(AmccError::InvalidDimension("need at least one worker".into()));
    }
    if !(0.0..=1.0).contains(&negative_rate) {
        return Err(AmccError::Domain(format!(
            "negative rate {negative_rate} outside [0, 1]"
        )));
    }
    let n = dataset.num_samples;
    let l = dataset.num_labels;
    let mut matrices = Vec::with_capacity(archetypes.len());
    for (w, arch) in archetypes.iter().enumerate() {
        arch.validate()?;
        if arch.num_labels() != l {
            return Err(AmccError::shape(
                format!("{l}x{l} confusion"),
                format!("{0}x{0}", arch.num_labels()),
            ));
        }
        let rate = arch.annotation_rate.to_f64().expect("finite rate");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "worker", w as u64));
        let mut a = Array2::<i8>::zeros((n, l));
        for _pass in 0..2 {
            for i in 0..n {
                if rng.random::<f64>() >= rate {
                    continue;
                }
                for &g in &truth[i] {
                    let lab = sample_confusion_row(&mut rng, &arch.confusion, g);
                    a[[i, lab]] = 1;
                }
                if rng.random::<f64>() < negative_rate {
                    let eligible: Vec<usize> = (0..l)
                        .filter(|lab| !truth[i].contains(lab) && a[[i, *lab]] != 1)
                        .collect();
                    if !eligible.is_empty() {
                        let pick = eligible[rng.random_range(0..eligible.len())];
                        a[[i, pick]] = -1;
                    }
                }
            }
            if a.iter().any(|&v| v != 0) {
                break;
            }
        }
        if a.iter().all(|&v| v == 0) {
            let i = rng.random_range(0..n);
            let members: Vec<usize> = truth[i].iter().copied().collect();
            let g = members[rng.random_range(0..members.len())];
            let lab = sample_confusion_row(&mut rng, &arch.confusion, g);
            a[[i, lab]] = 1;
        }
        matrices.push(a);
    }
    AnnotationTensor::new(matrices)
}

/// Remove exactly `⌊remove_fraction * nnz(A_w)⌋` annotations per worker,
/// uniformly at random without replacement. Every worker keeps at least one
/// annotation because the fraction is below one.
pub fn sparsify(
    tensor: &AnnotationTensor,
    remove_fraction: f64,
    seed: u64,
) -> Result<AnnotationTensor> {
    if !(0.0..1.0).contains(&remove_fraction) {
        return Err(AmccError::Domain(format!(
            "remove fraction {remove_fraction} outside [0, 1)"
        )));
    }
    let mut matrices: Vec<Array2<i8>> = tensor.workers().to_vec();
    for (w, a) in matrices.iter_mut().enumerate() {
        let mut cells: Vec<(usize, usize)> = Vec::new();
        for ((i, j), &v) in a.indexed_iter() {
            if v != 0 {
                cells.push((i, j));
            }
        }
        let remove = (remove_fraction * cells.len() as f64).floor() as usize;
        if remove == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sparsify", w as u64));
        // Partial Fisher-Yates: the first `remove` slots become the removal
        // set.
        for k in 0..remove {
            let pick = rng.random_range(k..cells.len());
            cells.swap(k, pick);
        }
        for &(i, j) in cells.iter().take(remove) {
            a[[i, j]] = 0;
        }
    }
    AnnotationTensor::new(matrices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn archetype_constructors_classify_by_diagonal() {
        let r = WorkerArchetype::<f64>::from_diagonal(6, 0.95).unwrap();
        assert_eq!(r.kind, ArchetypeKind::Reliable);
        let n = WorkerArchetype::<f64>::from_diagonal(6, 0.75).unwrap();
        assert_eq!(n.kind, ArchetypeKind::Normal);
        let s = WorkerArchetype::<f64>::from_diagonal(6, 0.45).unwrap();
        assert_eq!(s.kind, ArchetypeKind::Sloppy);
        assert!(WorkerArchetype::<f64>::from_diagonal(6, 0.3).is_err());
        for arch in [&r, &n, &s] {
            for row in arch.confusion.outer_iter() {
                let sum: f64 = row.iter().sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn spammer_archetypes_validate() {
        let u = WorkerArchetype::<f64>::uniform_spammer(4, 2).unwrap();
        u.validate().unwrap();
        for g in 0..4 {
            assert_abs_diff_eq!(u.confusion[[g, 2]], 1.0, epsilon = 1e-15);
        }
        let r = WorkerArchetype::<f64>::random_spammer(4).unwrap();
        r.validate().unwrap();
        assert!(r.confusion.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(WorkerArchetype::<f64>::uniform_spammer(4, 9).is_err());

        // Kind/matrix mismatch is caught.
        let mut fake = u.clone();
        fake.kind = ArchetypeKind::Reliable;
        assert!(fake.validate().is_err());
        // Bad rate is caught.
        let bad = WorkerArchetype::<f64>::random_spammer(4).unwrap().with_rate(0.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn truth_cardinality_one_gives_singletons() {
        let ds = generate_ground_truth::<f64>(500, 6, 1.0, 0.4, 9).unwrap();
        for set in ds.true_labels.as_ref().unwrap() {
            assert_eq!(set.len(), 1);
        }
    }

    #[test]
    fn truth_mean_cardinality_hits_target() {
        let ds = generate_ground_truth::<f64>(10_000, 6, 1.87, 0.5, 42).unwrap();
        let truth = ds.true_labels.as_ref().unwrap();
        let mean: f64 =
            truth.iter().map(|s| s.len() as f64).sum::<f64>() / truth.len() as f64;
        assert!((mean - 1.87).abs() < 0.1, "mean cardinality {mean}");
        assert!(truth.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn truth_independent_pairs_pass_chi_square() {
        // With zero correlation strength every label is an independent
        // Bernoulli(q) before the non-empty rejection. For a label pair the
        // conditional cell probabilities follow in closed form; compare
        // observed counts with a chi-square statistic (3 dof).
        let n = 10_000usize;
        let l = 6usize;
        let card = 1.87;
        let ds = generate_ground_truth::<f64>(n, l, card, 0.0, 7).unwrap();
        let truth = ds.true_labels.as_ref().unwrap();
        // Recover q by the same bisection the generator uses.
        let mut lo = 1e-12;
        let mut hi = 1.0 - 1e-12;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if conditional_cardinality(l, mid, 0.0) < card {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let q = 0.5 * (lo + hi);
        let p_nonempty = 1.0 - (1.0 - q).powi(l as i32);
        for (a, b) in [(0usize, 2usize), (1, 4), (3, 5)] {
            let mut counts = [0.0f64; 4];
            for set in truth {
                let ia = set.contains(&a) as usize;
                let ib = set.contains(&b) as usize;
                counts[2 * ia + ib] += 1.0;
            }
            let rest_all_off = (1.0 - q).powi(l as i32 - 2);
            let expected = [
                (1.0 - q) * (1.0 - q) * (1.0 - rest_all_off) / p_nonempty,
                (1.0 - q) * q / p_nonempty,
                q * (1.0 - q) / p_nonempty,
                q * q / p_nonempty,
            ];
            let mut stat = 0.0;
            for c in 0..4 {
                let e = expected[c] * n as f64;
                stat += (counts[c] - e).powi(2) / e;
            }
            assert!(stat < 30.0, "pair ({a},{b}) chi-square {stat}");
        }
    }

    #[test]
    fn truth_correlated_pairs_cooccur() {
        let ds = generate_ground_truth::<f64>(10_000, 6, 2.5, 0.9, 13).unwrap();
        let truth = ds.true_labels.as_ref().unwrap();
        let n = truth.len() as f64;
        let p0 = truth.iter().filter(|s| s.contains(&0)).count() as f64 / n;
        let p1 = truth.iter().filter(|s| s.contains(&1)).count() as f64 / n;
        let both = truth
            .iter()
            .filter(|s| s.contains(&0) && s.contains(&1))
            .count() as f64
            / n;
        assert!(
            both > p0 * p1 + 0.05,
            "paired labels not positively associated: {both} vs {}",
            p0 * p1
        );
    }

    #[test]
    fn truth_rejects_bad_parameters_and_is_deterministic() {
        assert!(generate_ground_truth::<f64>(10, 4, 0.5, 0.0, 1).is_err());
        assert!(generate_ground_truth::<f64>(10, 4, 4.0, 0.0, 1).is_err());
        assert!(generate_ground_truth::<f64>(10, 4, 2.0, 1.5, 1).is_err());
        let a = generate_ground_truth::<f64>(50, 4, 2.0, 0.3, 5).unwrap();
        let b = generate_ground_truth::<f64>(50, 4, 2.0, 0.3, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_ground_truth::<f64>(50, 4, 2.0, 0.3, 6).unwrap();
        assert_ne!(a.true_labels, c.true_labels);
    }

    #[test]
    fn truth_features_separate_classes() {
        let ds = generate_ground_truth::<f64>(2_000, 4, 1.5, 0.2, 3).unwrap();
        let truth = ds.true_labels.as_ref().unwrap();
        let feats = ds.features.as_ref().unwrap();
        assert_eq!(feats.dim(), (2_000, 4));
        for j in 0..4 {
            let (mut on_sum, mut on_n, mut off_sum, mut off_n) = (0.0, 0, 0.0, 0);
            for i in 0..2_000 {
                if truth[i].contains(&j) {
                    on_sum += feats[[i, j]];
                    on_n += 1;
                } else {
                    off_sum += feats[[i, j]];
                    off_n += 1;
                }
            }
            let gap = on_sum / on_n as f64 - off_sum / off_n as f64;
            assert!(gap > 1.0, "label {j} feature gap {gap}");
        }
    }

    #[test]
    fn annotate_identity_noiseless_matches_truth() {
        let ds = generate_ground_truth::<f64>(80, 4, 2.0, 0.3, 11).unwrap();
        let truth = ds.true_labels.as_ref().unwrap();
        let identity = WorkerArchetype::<f64> {
            kind: ArchetypeKind::Reliable,
            confusion: Array2::eye(4),
            annotation_rate: 1.0,
        };
        let t = annotate_with(&ds, &[identity], 0.0, 21).unwrap();
        let a = t.worker(0);
        for i in 0..80 {
            for j in 0..4 {
                let want = if truth[i].contains(&j) { 1 } else { 0 };
                assert_eq!(a[[i, j]], want, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn annotate_uniform_spammer_marks_single_column() {
        let ds = generate_ground_truth::<f64>(60, 5, 2.0, 0.0, 2).unwrap();
        let spammer = WorkerArchetype::<f64>::uniform_spammer(5, 3).unwrap();
        let t = annotate_with(&ds, &[spammer], 0.0, 4).unwrap();
        let a = t.worker(0);
        for i in 0..60 {
            for j in 0..5 {
                if j == 3 {
                    assert_eq!(a[[i, j]], 1);
                } else {
                    assert_eq!(a[[i, j]], 0);
                }
            }
        }
    }

    #[test]
    fn annotate_diagonal_agreement_matches_monte_carlo() {
        let ds = generate_ground_truth::<f64>(10_000, 6, 1.0, 0.0, 15).unwrap();
        let truth = ds.true_labels.as_ref().unwrap();
        let arch = WorkerArchetype::<f64>::from_diagonal(6, 0.9).unwrap();
        let t = annotate_with(&ds, &[arch], 0.0, 16).unwrap();
        let a = t.worker(0);
        let mut agree = 0usize;
        for i in 0..10_000 {
            let g = *truth[i].iter().next().unwrap();
            if a[[i, g]] == 1 {
                agree += 1;
            }
        }
        let rate = agree as f64 / 10_000.0;
        assert!((rate - 0.9).abs() < 0.02, "agreement {rate}");
    }

    #[test]
    fn annotate_respects_rate_and_negative_fraction() {
        let ds = generate_ground_truth::<f64>(2_000, 5, 2.0, 0.2, 23).unwrap();
        let truth = ds.true_labels.as_ref().unwrap();
        let arch = WorkerArchetype::<f64>::from_diagonal(5, 0.8)
            .unwrap()
            .with_rate(0.5);
        let t = annotate_with(&ds, &[arch], 1.0, 31).unwrap();
        let a = t.worker(0);
        let touched = (0..2_000)
            .filter(|&i| (0..5).any(|j| a[[i, j]] != 0))
            .count();
        let frac = touched as f64 / 2_000.0;
        assert!((frac - 0.5).abs() < 0.05, "annotated fraction {frac}");
        // negative_rate 1: every annotated sample with an eligible slot has
        // exactly one -1, and it is never on a true label.
        for i in 0..2_000 {
            let negs: Vec<usize> = (0..5).filter(|&j| a[[i, j]] == -1).collect();
            assert!(negs.len() <= 1, "sample {i} has {} negatives", negs.len());
            for &j in &negs {
                assert!(!truth[i].contains(&j), "negative on a true label");
            }
        }
    }

    #[test]
    fn annotate_forces_one_annotation_for_silent_workers() {
        let ds = generate_ground_truth::<f64>(30, 4, 2.0, 0.0, 8).unwrap();
        let lazy = WorkerArchetype::<f64>::from_diagonal(4, 0.9)
            .unwrap()
            .with_rate(1e-12);
        let t = annotate_with(&ds, &[lazy], 0.0, 77).unwrap();
        assert_eq!(t.annotation_count(0), 1);
    }

    #[test]
    fn annotate_is_deterministic() {
        let ds = generate_ground_truth::<f64>(100, 4, 2.0, 0.4, 19).unwrap();
        let spec = CrowdSpec {
            num_samples: 100,
            num_labels: 4,
            diagonals: vec![0.9, 0.7, 0.5],
            uniform_spammers: 1,
            random_spammers: 1,
            ..CrowdSpec::default()
        };
        let arks = spec.build_archetypes::<f64>().unwrap();
        let a = annotate(&ds, &arks, 3).unwrap();
        let b = annotate(&ds, &arks, 3).unwrap();
        assert_eq!(a, b);
        let c = annotate(&ds, &arks, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sparsify_counts_and_bounds() {
        let ds = generate_ground_truth::<f64>(40, 4, 2.0, 0.3, 29).unwrap();
        let arks = vec![
            WorkerArchetype::<f64>::from_diagonal(4, 0.9).unwrap(),
            WorkerArchetype::<f64>::from_diagonal(4, 0.6).unwrap(),
        ];
        let t = annotate_with(&ds, &arks, 0.1, 5).unwrap();
        assert_eq!(sparsify(&t, 0.0, 1).unwrap(), t);
        for frac in [0.1, 0.3, 0.5, 0.9] {
            let sp = sparsify(&t, frac, 1).unwrap();
            for w in 0..2 {
                let before = t.annotation_count(w);
                let after = sp.annotation_count(w);
                assert_eq!(after, before - (frac * before as f64).floor() as usize);
                assert!(after >= 1);
                // Remaining annotations came from the original.
                for ((i, j), &v) in sp.worker(w).indexed_iter() {
                    if v != 0 {
                        assert_eq!(t.worker(w)[[i, j]], v);
                    }
                }
            }
        }
        assert_eq!(sparsify(&t, 0.5, 9).unwrap(), sparsify(&t, 0.5, 9).unwrap());
        assert!(sparsify(&t, 1.0, 1).is_err());
        assert!(sparsify(&t, -0.1, 1).is_err());
    }

    #[test]
    fn sparsify_exact_floor_on_ten_annotations() {
        // One worker with exactly 10 annotations; half must go.
        let mut a = Array2::<i8>::zeros((10, 3));
        for i in 0..10 {
            a[[i, i % 3]] = 1;
        }
        let t = AnnotationTensor::new(vec![a]).unwrap();
        let sp = sparsify(&t, 0.5, 123).unwrap();
        assert_eq!(sp.annotation_count(0), 5);
    }

    #[test]
    fn oracle_identity_is_exact_and_memoized() {
        // Singleton truth sets make the identity-confusion answer exact:
        // the positive probability is 1 on the true label and 0 elsewhere.
        let spec = CrowdSpec {
            num_samples: 50,
            num_labels: 4,
            cardinality: 1.0,
            diagonals: vec![0.95],
            uniform_spammers: 0,
            random_spammers: 0,
            annotation_rate: 1.0,
            ..CrowdSpec::default()
        };
        let mut crowd = SimulatedCrowd::<f64>::from_spec(&spec, 17).unwrap();
        crowd.archetypes[0].confusion = Array2::eye(4);
        let truth = crowd.dataset.true_labels.clone().unwrap();
        for (i, t) in truth.iter().enumerate().take(50) {
            for j in 0..4 {
                let want = if t.contains(&j) { 1 } else { -1 };
                assert_eq!(crowd.oracle_answer(i, j, 0).unwrap(), want);
                // Memoized: asking twice returns the identical answer.
                assert_eq!(crowd.oracle_answer(i, j, 0).unwrap(), want);
            }
        }
        assert!(crowd.oracle_answer(99, 0, 0).is_err());
    }

    #[test]
    fn oracle_rate_matches_confusion_diagonal() {
        let spec = CrowdSpec {
            num_samples: 10_000,
            num_labels: 6,
            cardinality: 1.0,
            diagonals: vec![0.8],
            uniform_spammers: 0,
            random_spammers: 0,
            ..CrowdSpec::default()
        };
        let crowd = SimulatedCrowd::<f64>::from_spec(&spec, 99).unwrap();
        let truth = crowd.dataset.true_labels.clone().unwrap();
        let mut hits = 0usize;
        for (i, t) in truth.iter().enumerate().take(10_000) {
            let g = *t.iter().next().unwrap();
            if crowd.oracle_answer(i, g, 0).unwrap() == 1 {
                hits += 1;
            }
        }
        let rate = hits as f64 / 10_000.0;
        assert!((rate - 0.8).abs() < 0.02, "positive rate {rate}");
    }

    #[test]
    fn crowd_spec_builds_the_graded_archetype_roster() {
        let spec = CrowdSpec::default();
        assert_eq!(spec.num_workers(), 13);
        let arks = spec.build_archetypes::<f64>().unwrap();
        assert_eq!(arks.len(), 13);
        let kinds: Vec<ArchetypeKind> = arks.iter().map(|a| a.kind).collect();
        assert_eq!(
            &kinds[..7],
            &[
                ArchetypeKind::Reliable,
                ArchetypeKind::Reliable,
                ArchetypeKind::Normal,
                ArchetypeKind::Normal,
                ArchetypeKind::Sloppy,
                ArchetypeKind::Sloppy,
                ArchetypeKind::Sloppy,
            ]
        );
        assert!(kinds[7..10]
            .iter()
            .all(|k| *k == ArchetypeKind::UniformSpammer));
        assert!(kinds[10..]
            .iter()
            .all(|k| *k == ArchetypeKind::RandomSpammer));
        let crowd = SimulatedCrowd::<f64>::from_spec(&spec, 1).unwrap();
        let again = SimulatedCrowd::<f64>::from_spec(&spec, 1).unwrap();
        assert_eq!(crowd.tensor, again.tensor);
        assert_eq!(crowd.dataset, again.dataset);
    }

    #[test]
    fn derive_seed_distinguishes_tags_and_indices() {
        let a = derive_seed(1, "x", 0);
        assert_eq!(a, derive_seed(1, "x", 0));
        assert_ne!(a, derive_seed(1, "x", 1));
        assert_ne!(a, derive_seed(1, "y", 0));
        assert_ne!(a, derive_seed(2, "x", 0));
    }
}
