//! Cost-aware active querying: score sample-label pairs by uncertainty,
//! blend in label-correlation gain, pick the worker with the best
//! credibility-per-cost ratio, and iterate query rounds against an
//! annotation oracle.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{consensus_labels, consensus_scores, fit, fit_warm};
use crate::metrics::{majority_vote, one_error, ranking_loss, set_accuracy};
use crate::model::{AmccConfig, AnnotationTensor, ConsensusModel, Dataset, Partition};
use crate::scalar::castu;
use crate::sim::derive_seed;
use crate::{cast, AmccError, Result, Scalar};

/// Batch selection policies. `Amcc` is the full criterion; the others are
/// ablations and baselines used for comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    /// Pairs and workers by the full u * q / c criterion.
    Amcc,
    /// Pairs by uncertainty, workers uniformly at random.
    RandomWorker,
    /// Pairs uniformly at random, workers by q / c.
    RandomPair,
    /// Uncertainty only (no correlation gain), workers by q / c.
    NoLabelCorr,
    /// Random pairs and workers; snapshots score majority vote.
    MvRandom,
    /// Pairs by u * q, workers by credibility alone (cost ignored).
    GreedyReliable,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 6] = [
        SelectionStrategy::Amcc,
        SelectionStrategy::RandomWorker,
        SelectionStrategy::RandomPair,
        SelectionStrategy::NoLabelCorr,
        SelectionStrategy::MvRandom,
        SelectionStrategy::GreedyReliable,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::Amcc => "amcc",
            SelectionStrategy::RandomWorker => "random-worker",
            SelectionStrategy::RandomPair => "random-pair",
            SelectionStrategy::NoLabelCorr => "no-label-corr",
            SelectionStrategy::MvRandom => "mv-random",
            SelectionStrategy::GreedyReliable => "greedy-reliable",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionStrategy {
    type Err = AmccError;

    fn from_str(s: &str) -> Result<Self> {
        SelectionStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                AmccError::InvalidConfig(format!(
                    "unknown strategy {s:?}; expected one of amcc, random-worker, random-pair, \
                     no-label-corr, mv-random, greedy-reliable"
                ))
            })
    }
}

/// A fully scored candidate query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TripletScore<F: Scalar> {
    pub sample: usize,
    pub label: usize,
    pub worker: usize,
    /// Label uncertainty, in [1/2, 1].
    pub u1: F,
    /// Correlation gain over the sample's unqueried labels.
    pub u2: F,
    /// Blended utility `eta * u2 + (1 - eta) * u1`.
    pub u: F,
    /// Worker credibility at this sample.
    pub credibility: F,
    /// Worker cost in [1, W].
    pub cost: F,
    /// Selection criterion `u * credibility / cost`.
    pub combined: F,
}

/// One answered query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReturnedAnnotation {
    pub sample: usize,
    pub label: usize,
    pub worker: usize,
    pub value: i8,
}

/// Accuracy snapshot against ground truth over the evaluation pool. Ranking
/// metrics are `None` when no sample in the pool carries ranking
/// information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AccuracySnapshot<F: Scalar> {
    pub accuracy: F,
    pub one_minus_rl: Option<F>,
    pub one_minus_oe: Option<F>,
    pub evaluated_samples: usize,
}

/// Ledger entry for one round; round 0 records the initial fit with no
/// queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RoundRecord<F: Scalar> {
    pub round: usize,
    pub selected: Vec<TripletScore<F>>,
    pub returned: Vec<ReturnedAnnotation>,
    pub cumulative_cost: F,
    pub snapshot: Option<AccuracySnapshot<F>>,
}

/// Full query history of an active-learning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct QueryLedger<F: Scalar> {
    pub strategy: SelectionStrategy,
    pub rounds: Vec<RoundRecord<F>>,
    /// True when the run stopped early because no candidate queries
    /// remained.
    pub exhausted_pool: bool,
    /// Set when an oracle failure aborted a round; the ledger then holds the
    /// partial history up to and including the aborted round.
    pub aborted: Option<String>,
}

/// Batch returned by triplet selection; `exhausted` flags an empty candidate
/// pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome<F: Scalar> {
    pub triplets: Vec<TripletScore<F>>,
    pub exhausted: bool,
}

/// Source of annotations for the query loop.
pub trait AnnotationOracle {
    fn answer(&self, sample: usize, label: usize, worker: usize) -> Result<i8>;
}

impl<F: Scalar> AnnotationOracle for crate::sim::SimulatedCrowd<F> {
    fn answer(&self, sample: usize, label: usize, worker: usize) -> Result<i8> {
        self.oracle_answer(sample, label, worker)
    }
}

/// Replays a recorded tensor; errors on cells nobody annotated.
#[derive(Debug, Clone)]
pub struct ReplayOracle {
    tensor: AnnotationTensor,
}

impl ReplayOracle {
    pub fn new(tensor: AnnotationTensor) -> Self {
        ReplayOracle { tensor }
    }
}

impl AnnotationOracle for ReplayOracle {
    fn answer(&self, sample: usize, label: usize, worker: usize) -> Result<i8> {
        let v = self.tensor.worker(worker)[[sample, label]];
        if v == 0 {
            return Err(AmccError::Precondition(format!(
                "replay source has no annotation at ({sample}, {label}, {worker})"
            )));
        }
        Ok(v)
    }
}

/// `1 - |1/2 - p|`: peaks at p = 1/2 and bottoms out at 1/2 for confident
/// scores.
pub fn label_uncertainty<F: Scalar>(p: F) -> Result<F> {
    if !(F::zero()..=F::one()).contains(&p) {
        return Err(AmccError::Domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(F::one() - (cast::<F>(0.5) - p).abs())
}

/// Weight-integrated label correlation `(1/M) Σ_m λ_m^r C_m`.
fn integrated_correlation<F: Scalar>(
    model: &ConsensusModel<F>,
    cfg: &AmccConfig<F>,
) -> Array2<F> {
    let l = model.num_labels();
    let m = model.num_groups();
    let mut cbar = Array2::<F>::zeros((l, l));
    for (g, c) in model.commonality.iter().enumerate() {
        let lam = model.group_weights[g].powf(cfg.r);
        cbar = &cbar + &c.mapv(|x| lam * x);
    }
    cbar.mapv(|x| x / castu::<F>(m))
}

/// Expected uncertainty reduction from the label's integrated correlation
/// with the sample's still-unqueried labels (itself included); zero when the
/// label is the only unqueried one.
pub fn correlation_gain<F: Scalar>(
    _sample: usize,
    label: usize,
    model: &ConsensusModel<F>,
    cfg: &AmccConfig<F>,
    unqueried: &BTreeSet<usize>,
) -> Result<F> {
    if !unqueried.contains(&label) {
        return Err(AmccError::Precondition(format!(
            "label {label} has already been queried for this sample"
        )));
    }
    if unqueried.len() == 1 {
        return Ok(F::zero());
    }
    let cbar = integrated_correlation(model, cfg);
    let sum: F = unqueried.iter().map(|&k| cbar[[label, k]].abs()).sum();
    Ok(sum / castu::<F>(unqueried.len()))
}

/// Neighbor list for one sample: `(index, similarity)` pairs, most similar
/// first.
///
/// With features, similarity is inverse Euclidean distance (distance floored
/// at 1e-6) over the labeled pool; without features (or with an empty
/// labeled pool) it is cosine similarity of crowd-averaged annotation rows
/// over all other samples, clamped at zero.
fn neighbor_list<F: Scalar>(
    dataset: &Dataset<F>,
    tensor: &AnnotationTensor,
    sample: usize,
    k: usize,
) -> Result<Vec<(usize, F)>> {
    let n = dataset.num_samples;
    let labeled: Vec<usize> = match &dataset.partition {
        Some(parts) => (0..n)
            .filter(|&j| j != sample && parts[j] == Partition::Labeled)
            .collect(),
        None => (0..n).filter(|&j| j != sample).collect(),
    };
    let pool: Vec<usize> = if labeled.is_empty() {
        (0..n).filter(|&j| j != sample).collect()
    } else {
        labeled
    };
    if pool.is_empty() {
        return Err(AmccError::Precondition(format!(
            "sample {sample} has no candidate neighbors"
        )));
    }
    let mut scored: Vec<(usize, F)> = match &dataset.features {
        Some(feats) => pool
            .into_iter()
            .map(|j| {
                let mut d2 = F::zero();
                for (a, b) in feats.row(sample).iter().zip(feats.row(j).iter()) {
                    let diff = *a - *b;
                    d2 += diff * diff;
                }
                let dist = d2.sqrt().max(cast::<F>(1e-6));
                (j, F::one() / dist)
            })
            .collect(),
        None => {
            let w = castu::<F>(tensor.num_workers());
            let l = tensor.num_labels();
            let avg_row = |i: usize| -> Vec<F> {
                (0..l)
                    .map(|lab| {
                        tensor
                            .workers()
                            .iter()
                            .map(|a| cast::<F>(a[[i, lab]] as f64))
                            .sum::<F>()
                            / w
                    })
                    .collect()
            };
            let base = avg_row(sample);
            let base_norm = base.iter().map(|&x| x * x).sum::<F>().sqrt();
            pool.into_iter()
                .map(|j| {
                    let other = avg_row(j);
                    let norm = other.iter().map(|&x| x * x).sum::<F>().sqrt();
                    let sim = if base_norm > F::zero() && norm > F::zero() {
                        let dot: F =
                            base.iter().zip(other.iter()).map(|(&a, &b)| a * b).sum();
                        (dot / (base_norm * norm)).max(F::zero())
                    } else {
                        F::zero()
                    };
                    (j, sim)
                })
                .collect()
        }
    };
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k.max(1));
    Ok(scored)
}

/// Log-domain probability the worker would reproduce the consensus labels of
/// neighbor `j`: product of `C_m(g, l) + D_w(g, l)` over consensus labels g
/// and positively annotated labels l; an empty product is 1.
fn worker_agreement<F: Scalar>(
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
    cfg: &AmccConfig<F>,
    worker: usize,
    neighbor: usize,
    neighbor_labels: &BTreeSet<usize>,
) -> F {
    let group = model.group_assignment[worker];
    let c = &model.commonality[group];
    let d = &model.individuality[worker];
    let a = tensor.worker(worker);
    let l = tensor.num_labels();
    let mut log_p = F::zero();
    for &g in neighbor_labels {
        for lab in 0..l {
            if a[[neighbor, lab]] == 1 {
                log_p += (c[[g, lab]] + d[[g, lab]]).max(cfg.prob_floor).ln();
            }
        }
    }
    log_p.exp()
}

/// Credibility of a worker at a sample: mean over the k nearest labeled
/// neighbors of similarity times the worker's agreement with each neighbor's
/// consensus labels.
pub fn worker_credibility<F: Scalar>(
    worker: usize,
    sample: usize,
    dataset: &Dataset<F>,
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
    cfg: &AmccConfig<F>,
) -> Result<F> {
    if worker >= tensor.num_workers() {
        return Err(AmccError::InvalidDimension(format!(
            "worker {worker} out of range"
        )));
    }
    let neighbors = neighbor_list(dataset, tensor, sample, cfg.knn_k)?;
    let mut total = F::zero();
    for &(j, sim) in &neighbors {
        let labels = consensus_labels(tensor, model, cfg, j)?;
        total += sim * worker_agreement(tensor, model, cfg, worker, j, &labels);
    }
    Ok(total / castu::<F>(neighbors.len()))
}

/// Mean per-annotated-sample product of the worker's diagonal individuality
/// over its positive annotations, in (0, 1]. Untouched samples contribute
/// nothing; the mean is over the worker's annotation count.
pub fn worker_qualities<F: Scalar>(
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
) -> Result<Vec<F>> {
    if model.num_workers() != tensor.num_workers() || model.num_labels() != tensor.num_labels() {
        return Err(AmccError::shape(
            format!("model for {} workers", tensor.num_workers()),
            format!("{} workers", model.num_workers()),
        ));
    }
    let l = tensor.num_labels();
    let floor = cast::<F>(1e-12);
    let mut out = Vec::with_capacity(tensor.num_workers());
    for (w, a) in tensor.workers().iter().enumerate() {
        let d = &model.individuality[w];
        let nnz = tensor.annotation_count(w);
        let mut sum = F::zero();
        for i in 0..tensor.num_samples() {
            let mut log_prod = F::zero();
            let mut touched = false;
            for lab in 0..l {
                if a[[i, lab]] != 0 {
                    touched = true;
                }
                if a[[i, lab]] == 1 {
                    log_prod += d[[lab, lab]].max(floor).ln();
                }
            }
            if touched {
                sum += log_prod.exp();
            }
        }
        out.push(sum / castu::<F>(nnz.max(1)));
    }
    Ok(out)
}

/// Worker costs: qualities affinely mapped onto [1, W], costliest being the
/// highest-quality worker. A flat-quality pool costs 1 everywhere.
pub fn all_worker_costs<F: Scalar>(
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
) -> Result<Vec<F>> {
    let q = worker_qualities(tensor, model)?;
    let w = q.len();
    let qmin = q.iter().copied().fold(F::infinity(), |a, b| a.min(b));
    let qmax = q.iter().copied().fold(F::neg_infinity(), |a, b| a.max(b));
    if qmax - qmin <= F::feas_tol() {
        return Ok(vec![F::one(); w]);
    }
    let span = castu::<F>(w - 1);
    Ok(q.into_iter()
        .map(|x| F::one() + span * (x - qmin) / (qmax - qmin))
        .collect())
}

/// Cost of one worker; see `all_worker_costs`.
pub fn worker_cost<F: Scalar>(
    worker: usize,
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
) -> Result<F> {
    let costs = all_worker_costs(tensor, model)?;
    costs
        .get(worker)
        .copied()
        .ok_or_else(|| AmccError::InvalidDimension(format!("worker {worker} out of range")))
}

/// Highest q/c among available workers, ties to the lowest index.
fn pick_best_worker<F: Scalar>(
    credibility: &[F],
    costs: &[F],
    available: &[usize],
) -> Option<usize> {
    let mut best: Option<(usize, F)> = None;
    for &w in available {
        let ratio = credibility[w] / costs[w];
        let better = match best {
            None => true,
            Some((_, b)) => ratio > b,
        };
        if better {
            best = Some((w, ratio));
        }
    }
    best.map(|(w, _)| w)
}

/// Everything the per-round selection needs, computed once per call.
struct Candidates<F: Scalar> {
    /// One entry per candidate pair with at least one available worker.
    pairs: Vec<PairScore<F>>,
    credibility: BTreeMap<(usize, usize), F>,
    costs: Vec<F>,
}

struct PairScore<F> {
    sample: usize,
    label: usize,
    u1: F,
    u2: F,
    u: F,
    available: Vec<usize>,
}

fn build_candidates<F: Scalar>(
    dataset: &Dataset<F>,
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
    cfg: &AmccConfig<F>,
    queried: &BTreeSet<(usize, usize)>,
) -> Result<Candidates<F>> {
    let n = tensor.num_samples();
    let l = tensor.num_labels();
    let w_count = tensor.num_workers();
    let pool: Vec<usize> = match &dataset.partition {
        Some(parts) => (0..n).filter(|&i| parts[i] != Partition::Test).collect(),
        None => (0..n).collect(),
    };
    let costs = all_worker_costs(tensor, model)?;
    let cbar = integrated_correlation(model, cfg);

    // Consensus labels of every potential neighbor, filled lazily.
    let mut neighbor_labels: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut credibility: BTreeMap<(usize, usize), F> = BTreeMap::new();
    let mut pairs = Vec::new();
    for &i in &pool {
        let unqueried: BTreeSet<usize> =
            (0..l).filter(|&lab| !queried.contains(&(i, lab))).collect();
        if unqueried.is_empty() {
            continue;
        }
        let scored = consensus_scores(tensor, model, cfg, i)?;
        let mut neighbors: Option<Vec<(usize, F)>> = None;
        for &lab in &unqueried {
            let available: Vec<usize> = (0..w_count)
                .filter(|&w| tensor.worker(w)[[i, lab]] == 0)
                .collect();
            if available.is_empty() {
                continue;
            }
            let u1 = label_uncertainty(scored.scores[lab])?;
            let u2 = if unqueried.len() == 1 {
                F::zero()
            } else {
                let sum: F = unqueried.iter().map(|&k| cbar[[lab, k]].abs()).sum();
                sum / castu::<F>(unqueried.len())
            };
            let u = cfg.eta * u2 + (F::one() - cfg.eta) * u1;
            if neighbors.is_none() {
                neighbors = Some(neighbor_list(dataset, tensor, i, cfg.knn_k)?);
            }
            let nb = neighbors.as_ref().expect("neighbors just built");
            for &w in &available {
                if credibility.contains_key(&(i, w)) {
                    continue;
                }
                let mut total = F::zero();
                for &(j, sim) in nb {
                    if let Entry::Vacant(slot) = neighbor_labels.entry(j) {
                        slot.insert(consensus_labels(tensor, model, cfg, j)?);
                    }
                    let labels = &neighbor_labels[&j];
                    total += sim * worker_agreement(tensor, model, cfg, w, j, labels);
                }
                credibility.insert((i, w), total / castu::<F>(nb.len()));
            }
            pairs.push(PairScore {
                sample: i,
                label: lab,
                u1,
                u2,
                u,
                available,
            });
        }
    }
    Ok(Candidates {
        pairs,
        credibility,
        costs,
    })
}

fn triplet_for<F: Scalar>(
    cand: &Candidates<F>,
    pair: &PairScore<F>,
    worker: usize,
) -> TripletScore<F> {
    let q = cand.credibility[&(pair.sample, worker)];
    let c = cand.costs[worker];
    TripletScore {
        sample: pair.sample,
        label: pair.label,
        worker,
        u1: pair.u1,
        u2: pair.u2,
        u: pair.u,
        credibility: q,
        cost: c,
        combined: pair.u * q / c,
    }
}

fn sort_triplets<F: Scalar>(list: &mut [TripletScore<F>]) {
    list.sort_by(|a, b| {
        b.combined
            .partial_cmp(&a.combined)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.sample.cmp(&b.sample))
            .then(a.label.cmp(&b.label))
            .then(a.worker.cmp(&b.worker))
    });
}

/// Score every unqueried (sample, label) pair over the labeled and unlabeled
/// pools, attach each pair's best worker by q/c, and return the top `batch`
/// triplets by `u * q / c` (distinct pairs, deterministic order).
pub fn select_triplets<F: Scalar>(
    dataset: &Dataset<F>,
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
    cfg: &AmccConfig<F>,
    queried: &BTreeSet<(usize, usize)>,
    batch: usize,
) -> Result<SelectionOutcome<F>> {
    let cand = build_candidates(dataset, tensor, model, cfg, queried)?;
    let mut triplets: Vec<TripletScore<F>> = cand
        .pairs
        .iter()
        .map(|pair| {
            let creds: Vec<F> = (0..cand.costs.len())
                .map(|w| {
                    cand.credibility
                        .get(&(pair.sample, w))
                        .copied()
                        .unwrap_or(F::zero())
                })
                .collect();
            let w = pick_best_worker(&creds, &cand.costs, &pair.available)
                .expect("pair has at least one available worker");
            triplet_for(&cand, pair, w)
        })
        .collect();
    sort_triplets(&mut triplets);
    triplets.truncate(batch);
    Ok(SelectionOutcome {
        exhausted: triplets.is_empty(),
        triplets,
    })
}

/// Strategy-specific batch selection; `rng` drives the random baselines.
#[allow(clippy::too_many_arguments)]
fn select_for_strategy<F: Scalar>(
    strategy: SelectionStrategy,
    dataset: &Dataset<F>,
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
    cfg: &AmccConfig<F>,
    queried: &BTreeSet<(usize, usize)>,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SelectionOutcome<F>> {
    if strategy == SelectionStrategy::Amcc {
        return select_triplets(dataset, tensor, model, cfg, queried, batch);
    }
    let cand = build_candidates(dataset, tensor, model, cfg, queried)?;
    if cand.pairs.is_empty() {
        return Ok(SelectionOutcome {
            triplets: Vec::new(),
            exhausted: true,
        });
    }
    let creds_for = |pair: &PairScore<F>| -> Vec<F> {
        (0..cand.costs.len())
            .map(|w| {
                cand.credibility
                    .get(&(pair.sample, w))
                    .copied()
                    .unwrap_or(F::zero())
            })
            .collect()
    };
    let best_by_q = |pair: &PairScore<F>| -> usize {
        let creds = creds_for(pair);
        let mut best = pair.available[0];
        for &w in &pair.available {
            if creds[w] > creds[best] {
                best = w;
            }
        }
        best
    };
    let mut order: Vec<usize> = (0..cand.pairs.len()).collect();
    match strategy {
        SelectionStrategy::RandomWorker => {
            // Highest-uncertainty pairs, then a uniformly random available
            // worker for each.
            order.sort_by(|&a, &b| {
                let pa = &cand.pairs[a];
                let pb = &cand.pairs[b];
                pb.u.partial_cmp(&pa.u)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(pa.sample.cmp(&pb.sample))
                    .then(pa.label.cmp(&pb.label))
            });
            let mut out = Vec::new();
            for &idx in order.iter().take(batch) {
                let pair = &cand.pairs[idx];
                let w = pair.available[rng.random_range(0..pair.available.len())];
                out.push(triplet_for(&cand, pair, w));
            }
            Ok(SelectionOutcome {
                exhausted: out.is_empty(),
                triplets: out,
            })
        }
        SelectionStrategy::RandomPair | SelectionStrategy::MvRandom => {
            let take = batch.min(order.len());
            for k in 0..take {
                let pick = rng.random_range(k..order.len());
                order.swap(k, pick);
            }
            let mut out = Vec::new();
            for &idx in order.iter().take(take) {
                let pair = &cand.pairs[idx];
                let w = if strategy == SelectionStrategy::MvRandom {
                    pair.available[rng.random_range(0..pair.available.len())]
                } else {
                    pick_best_worker(&creds_for(pair), &cand.costs, &pair.available)
                        .expect("pair has at least one available worker")
                };
                out.push(triplet_for(&cand, pair, w));
            }
            Ok(SelectionOutcome {
                exhausted: out.is_empty(),
                triplets: out,
            })
        }
        SelectionStrategy::NoLabelCorr => {
            // u collapses to u1; worker choice unchanged.
            let mut out: Vec<TripletScore<F>> = cand
                .pairs
                .iter()
                .map(|pair| {
                    let w = pick_best_worker(&creds_for(pair), &cand.costs, &pair.available)
                        .expect("pair has at least one available worker");
                    let q = cand.credibility[&(pair.sample, w)];
                    let c = cand.costs[w];
                    TripletScore {
                        sample: pair.sample,
                        label: pair.label,
                        worker: w,
                        u1: pair.u1,
                        u2: F::zero(),
                        u: pair.u1,
                        credibility: q,
                        cost: c,
                        combined: pair.u1 * q / c,
                    }
                })
                .collect();
            sort_triplets(&mut out);
            out.truncate(batch);
            Ok(SelectionOutcome {
                exhausted: out.is_empty(),
                triplets: out,
            })
        }
        SelectionStrategy::GreedyReliable => {
            // Rank by u * q with the most credible worker; cost plays no
            // part in the choice but is still recorded.
            let mut out: Vec<TripletScore<F>> = cand
                .pairs
                .iter()
                .map(|pair| {
                    let w = best_by_q(pair);
                    triplet_for(&cand, pair, w)
                })
                .collect();
            out.sort_by(|a, b| {
                let ka = a.u * a.credibility;
                let kb = b.u * b.credibility;
                kb.partial_cmp(&ka)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.sample.cmp(&b.sample))
                    .then(a.label.cmp(&b.label))
                    .then(a.worker.cmp(&b.worker))
            });
            out.truncate(batch);
            Ok(SelectionOutcome {
                exhausted: out.is_empty(),
                triplets: out,
            })
        }
        SelectionStrategy::Amcc => unreachable!("handled above"),
    }
}

/// Consensus (or majority-vote, for the MV baseline) predictions evaluated
/// against ground truth over the non-test pool.
fn take_snapshot<F: Scalar>(
    dataset: &Dataset<F>,
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
    cfg: &AmccConfig<F>,
    strategy: SelectionStrategy,
) -> Result<Option<AccuracySnapshot<F>>> {
    let Some(truth) = &dataset.true_labels else {
        return Ok(None);
    };
    let n = dataset.num_samples;
    let eval: Vec<usize> = match &dataset.partition {
        Some(parts) => (0..n).filter(|&i| parts[i] != Partition::Test).collect(),
        None => (0..n).collect(),
    };
    if eval.is_empty() {
        return Ok(None);
    }
    let l = dataset.num_labels;
    let mut predicted = Vec::with_capacity(eval.len());
    let mut scores = Array2::<F>::zeros((eval.len(), l));
    if strategy == SelectionStrategy::MvRandom {
        let (mv_pred, mv_scores) = majority_vote::<F>(tensor);
        for (row, &i) in eval.iter().enumerate() {
            predicted.push(mv_pred[i].clone());
            for lab in 0..l {
                scores[[row, lab]] = mv_scores[[i, lab]];
            }
        }
    } else {
        for (row, &i) in eval.iter().enumerate() {
            predicted.push(consensus_labels(tensor, model, cfg, i)?);
            let s = consensus_scores(tensor, model, cfg, i)?;
            for lab in 0..l {
                scores[[row, lab]] = s.scores[lab];
            }
        }
    }
    let truth_subset: Vec<BTreeSet<usize>> = eval.iter().map(|&i| truth[i].clone()).collect();
    let accuracy = set_accuracy(&predicted, &truth_subset)?;
    let one_minus_rl = match ranking_loss(scores.view(), &truth_subset) {
        Ok(rl) => Some(F::one() - rl),
        Err(AmccError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let one_minus_oe = match one_error(scores.view(), &truth_subset) {
        Ok(oe) => Some(F::one() - oe),
        Err(AmccError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Some(AccuracySnapshot {
        accuracy,
        one_minus_rl,
        one_minus_oe,
        evaluated_samples: eval.len(),
    }))
}

/// Seeded labeled/unlabeled/test split by fractions; guarantees at least one
/// labeled sample so neighborhoods exist.
pub fn seeded_partition(
    n: usize,
    labeled_frac: f64,
    unlabeled_frac: f64,
    seed: u64,
) -> Result<Vec<Partition>> {
    if n == 0 {
        return Err(AmccError::InvalidDimension("cannot partition zero samples".into()));
    }
    if labeled_frac < 0.0 || unlabeled_frac < 0.0 || labeled_frac + unlabeled_frac > 1.0 + 1e-12 {
        return Err(AmccError::Domain(format!(
            "invalid partition fractions {labeled_frac}/{unlabeled_frac}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n.saturating_sub(1) {
        let pick = rng.random_range(k..n);
        order.swap(k, pick);
    }
    let n_labeled = ((labeled_frac * n as f64).floor() as usize).clamp(1, n);
    let n_unlabeled = ((unlabeled_frac * n as f64).floor() as usize).min(n - n_labeled);
    let mut parts = vec![Partition::Test; n];
    for &i in order.iter().take(n_labeled) {
        parts[i] = Partition::Labeled;
    }
    for &i in order.iter().skip(n_labeled).take(n_unlabeled) {
        parts[i] = Partition::Unlabeled;
    }
    Ok(parts)
}

/// Run the query loop: fit once, then per round select a batch with the
/// strategy, query the oracle, fold the answers into the tensor, refit with
/// a warm start, and snapshot accuracy. Round 0 records the initial fit.
/// Stops early when no candidates remain; an oracle failure aborts the
/// round, keeps the partial history, and sets `aborted`.
pub fn run_active_loop<F: Scalar>(
    dataset: &Dataset<F>,
    tensor: &AnnotationTensor,
    oracle: &dyn AnnotationOracle,
    cfg: &AmccConfig<F>,
    strategy: SelectionStrategy,
    rounds: usize,
    seed: u64,
) -> Result<QueryLedger<F>> {
    let mut working = tensor.clone();
    let mut outcome = fit(&working, cfg, derive_seed(seed, "fit", 0))?;
    let mut ledger = QueryLedger {
        strategy,
        rounds: vec![RoundRecord {
            round: 0,
            selected: Vec::new(),
            returned: Vec::new(),
            cumulative_cost: F::zero(),
            snapshot: take_snapshot(dataset, &working, &outcome.model, cfg, strategy)?,
        }],
        exhausted_pool: false,
        aborted: None,
    };
    let mut queried: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut cumulative = F::zero();
    for round in 1..=rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "round", round as u64));
        let selection = select_for_strategy(
            strategy,
            dataset,
            &working,
            &outcome.model,
            cfg,
            &queried,
            cfg.batch_size,
            &mut rng,
        )?;
        if selection.triplets.is_empty() {
            ledger.exhausted_pool = true;
            break;
        }
        let mut returned = Vec::with_capacity(selection.triplets.len());
        let mut failure = None;
        for t in &selection.triplets {
            let value = match oracle.answer(t.sample, t.label, t.worker) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            };
            working.set_entry(t.worker, t.sample, t.label, value)?;
            queried.insert((t.sample, t.label));
            cumulative += t.cost;
            returned.push(ReturnedAnnotation {
                sample: t.sample,
                label: t.label,
                worker: t.worker,
                value,
            });
        }
        if let Some(detail) = failure {
            // Keep what the round managed to collect; no refit on abort.
            ledger.rounds.push(RoundRecord {
                round,
                selected: selection.triplets,
                returned,
                cumulative_cost: cumulative,
                snapshot: None,
            });
            ledger.aborted = Some(detail);
            break;
        }
        outcome = fit_warm(&working, cfg, &outcome.model)?;
        ledger.rounds.push(RoundRecord {
            round,
            selected: selection.triplets,
            returned,
            cumulative_cost: cumulative,
            snapshot: take_snapshot(dataset, &working, &outcome.model, cfg, strategy)?,
        });
    }
    Ok(ledger)
}
