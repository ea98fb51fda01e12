//! Multi-label evaluation metrics and the majority-vote baseline.
//!
//! Conventions: ranking ties count against the ranker, one-error argmax ties
//! resolve to the lowest label index, and set accuracy is the per-sample
//! Jaccard index averaged over samples. Samples that lack either a relevant
//! or an irrelevant label carry no ranking information and are skipped by
//! the ranking metrics.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};

use crate::model::AnnotationTensor;
use crate::scalar::castu;
use crate::{cast, AmccError, Result, Scalar};

/// Per-sample metric breakdown. Ranking fields are `None` for samples the
/// ranking metrics skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval<F> {
    pub jaccard: F,
    pub ranking_loss: Option<F>,
    pub one_error_hit: Option<bool>,
}

/// Summary evaluation: set accuracy plus the complements of ranking loss and
/// one-error, all in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport<F> {
    pub accuracy: F,
    pub one_minus_rl: F,
    pub one_minus_oe: F,
    pub per_sample: Option<Vec<SampleEval<F>>>,
}

fn check_truth(truth: &[BTreeSet<usize>], num_labels: usize) -> Result<()> {
    for (i, t) in truth.iter().enumerate() {
        if t.is_empty() {
            return Err(AmccError::Domain(format!("truth set for sample {i} is empty")));
        }
        if t.iter().any(|&l| l >= num_labels) {
            return Err(AmccError::Domain(format!(
                "truth set for sample {i} references a label >= {num_labels}"
            )));
        }
    }
    Ok(())
}

/// Mean per-sample Jaccard index `|T ∩ T*| / |T ∪ T*|`.
pub fn set_accuracy<F: Scalar>(
    predicted: &[BTreeSet<usize>],
    truth: &[BTreeSet<usize>],
) -> Result<F> {
    if predicted.len() != truth.len() {
        return Err(AmccError::shape(
            format!("{} predictions", truth.len()),
            format!("{}", predicted.len()),
        ));
    }
    if predicted.is_empty() {
        return Err(AmccError::InvalidDimension("no samples to score".into()));
    }
    let mut total = F::zero();
    for (p, t) in predicted.iter().zip(truth.iter()) {
        let inter = p.intersection(t).count();
        let union = p.union(t).count();
        if union > 0 {
            total += castu::<F>(inter) / castu::<F>(union);
        } else {
            // Both sets empty: identical, so full credit.
            total += F::one();
        }
    }
    Ok(total / castu::<F>(predicted.len()))
}

/// Ranking loss: over samples with at least one relevant and one irrelevant
/// label, the fraction of (relevant, irrelevant) pairs where the irrelevant
/// label scores at least as high. Samples without both kinds of labels are
/// skipped; if every sample is skipped the metric is undefined.
pub fn ranking_loss<F: Scalar>(scores: ArrayView2<F>, truth: &[BTreeSet<usize>]) -> Result<F> {
    let (n, l) = scores.dim();
    if truth.len() != n {
        return Err(AmccError::shape(format!("{n} truth sets"), format!("{}", truth.len())));
    }
    check_truth(truth, l)?;
    let mut total = F::zero();
    let mut used = 0usize;
    for (i, t) in truth.iter().enumerate() {
        let relevant: Vec<usize> = t.iter().copied().collect();
        let irrelevant: Vec<usize> = (0..l).filter(|g| !t.contains(g)).collect();
        if relevant.is_empty() || irrelevant.is_empty() {
            continue;
        }
        let mut violations = 0usize;
        for &r in &relevant {
            for &ir in &irrelevant {
                if scores[[i, ir]] >= scores[[i, r]] {
                    violations += 1;
                }
            }
        }
        total += castu::<F>(violations) / castu::<F>(relevant.len() * irrelevant.len());
        used += 1;
    }
    if used == 0 {
        return Err(AmccError::UndefinedMetric(
            "ranking loss: every sample lacks a relevant or an irrelevant label".into(),
        ));
    }
    Ok(total / castu::<F>(used))
}

/// One-error: the fraction of (non-skipped) samples whose top-scoring label
/// is irrelevant, with argmax ties resolved to the lowest index. Skip rule
/// matches `ranking_loss`.
pub fn one_error<F: Scalar>(scores: ArrayView2<F>, truth: &[BTreeSet<usize>]) -> Result<F> {
    let (n, l) = scores.dim();
    if truth.len() != n {
        return Err(AmccError::shape(format!("{n} truth sets"), format!("{}", truth.len())));
    }
    check_truth(truth, l)?;
    let mut misses = 0usize;
    let mut used = 0usize;
    for (i, t) in truth.iter().enumerate() {
        if t.len() == l || t.is_empty() {
            continue;
        }
        let mut best = 0usize;
        for g in 1..l {
            if scores[[i, g]] > scores[[i, best]] {
                best = g;
            }
        }
        if !t.contains(&best) {
            misses += 1;
        }
        used += 1;
    }
    if used == 0 {
        return Err(AmccError::UndefinedMetric(
            "one-error: every sample lacks a relevant or an irrelevant label".into(),
        ));
    }
    Ok(castu::<F>(misses) / castu::<F>(used))
}

/// Majority vote over workers.
///
/// The per-cell score is (+1 votes) / (±1 votes), 0.5 where nobody voted.
/// The predicted set keeps labels with a strict majority (> 0.5) and falls
/// back to the top-scoring label (lowest index on ties) when that set is
/// empty.
pub fn majority_vote<F: Scalar>(
    tensor: &AnnotationTensor,
) -> (Vec<BTreeSet<usize>>, Array2<F>) {
    let n = tensor.num_samples();
    let l = tensor.num_labels();
    let half = cast::<F>(0.5);
    let mut scores = Array2::<F>::from_elem((n, l), half);
    for i in 0..n {
        for g in 0..l {
            let mut pos = 0usize;
            let mut votes = 0usize;
            for a in tensor.workers() {
                match a[[i, g]] {
                    1 => {
                        pos += 1;
                        votes += 1;
                    }
                    -1 => votes += 1,
                    _ => {}
                }
            }
            if votes > 0 {
                scores[[i, g]] = castu::<F>(pos) / castu::<F>(votes);
            }
        }
    }
    let predicted = (0..n)
        .map(|i| {
            let mut set: BTreeSet<usize> =
                (0..l).filter(|&g| scores[[i, g]] > half).collect();
            if set.is_empty() {
                let mut best = 0usize;
                for g in 1..l {
                    if scores[[i, g]] > scores[[i, best]] {
                        best = g;
                    }
                }
                set.insert(best);
            }
            set
        })
        .collect();
    (predicted, scores)
}

/// Bundle the three headline metrics, with an optional per-sample breakdown.
pub fn evaluate<F: Scalar>(
    predicted: &[BTreeSet<usize>],
    scores: ArrayView2<F>,
    truth: &[BTreeSet<usize>],
    with_breakdown: bool,
) -> Result<EvalReport<F>> {
    let accuracy = set_accuracy(predicted, truth)?;
    let rl = ranking_loss(scores, truth)?;
    let oe = one_error(scores, truth)?;
    let per_sample = with_breakdown.then(|| {
        let l = scores.ncols();
        truth
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let p = &predicted[i];
                let inter = p.intersection(t).count();
                let union = p.union(t).count();
                let jaccard = if union > 0 {
                    castu::<F>(inter) / castu::<F>(union)
                } else {
                    F::one()
                };
                let rankable = !t.is_empty() && t.len() < l;
                let ranking_loss = rankable.then(|| {
                    let mut violations = 0usize;
                    let mut pairs = 0usize;
                    for &r in t.iter() {
                        for ir in (0..l).filter(|g| !t.contains(g)) {
                            pairs += 1;
                            if scores[[i, ir]] >= scores[[i, r]] {
                                violations += 1;
                            }
                        }
                    }
                    castu::<F>(violations) / castu::<F>(pairs)
                });
                let one_error_hit = rankable.then(|| {
                    let mut best = 0usize;
                    for g in 1..l {
                        if scores[[i, g]] > scores[[i, best]] {
                            best = g;
                        }
                    }
                    t.contains(&best)
                });
                SampleEval {
                    jaccard,
                    ranking_loss,
                    one_error_hit,
                }
            })
            .collect()
    });
    Ok(EvalReport {
        accuracy,
        one_minus_rl: F::one() - rl,
        one_minus_oe: F::one() - oe,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sets(raw: &[&[usize]]) -> Vec<BTreeSet<usize>> {
        raw.iter().map(|s| s.iter().copied().collect()).collect()
    }

    #[test]
    fn accuracy_hand_cases() {
        let truth = sets(&[&[0, 1], &[2]]);
        assert_abs_diff_eq!(
            set_accuracy::<f64>(&truth, &truth).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        let disjoint = sets(&[&[2], &[0, 1]]);
        assert_abs_diff_eq!(
            set_accuracy::<f64>(&disjoint, &truth).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        // {1,2} vs {2,3}: intersection 1, union 3.
        let p = sets(&[&[1, 2]]);
        let t = sets(&[&[2, 3]]);
        assert_abs_diff_eq!(set_accuracy::<f64>(&p, &t).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn accuracy_is_symmetric_and_checks_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<BTreeSet<usize>> {
                (0..n)
                    .map(|_| {
                        let mut s = BTreeSet::new();
                        s.insert(rng.random_range(0..4));
                        if rng.random_bool(0.5) {
                            s.insert(rng.random_range(0..4));
                        }
                        s
                    })
                    .collect()
            };
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            let ab = set_accuracy::<f64>(&a, &b).unwrap();
            let ba = set_accuracy::<f64>(&b, &a).unwrap();
            assert_abs_diff_eq!(ab, ba, epsilon = 1e-15);
        }
        let short = sets(&[&[0]]);
        let long = sets(&[&[0], &[1]]);
        assert!(set_accuracy::<f64>(&short, &long).is_err());
    }

    #[test]
    fn ranking_loss_hand_cases() {
        // Perfect ranking.
        let scores = array![[0.9, 0.8, 0.1, 0.2]];
        let truth = sets(&[&[0, 1]]);
        assert_abs_diff_eq!(
            ranking_loss(scores.view(), &truth).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        // Fully inverted.
        let scores = array![[0.1, 0.2, 0.9, 0.8]];
        assert_abs_diff_eq!(
            ranking_loss(scores.view(), &truth).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        // Relevant {0}, scores (0.4, 0.6, 0.1): one of two pairs violated.
        let scores = array![[0.4, 0.6, 0.1]];
        let truth = sets(&[&[0]]);
        assert_abs_diff_eq!(
            ranking_loss(scores.view(), &truth).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        // Ties count as violations.
        let scores = array![[0.5, 0.5]];
        assert_abs_diff_eq!(
            ranking_loss(scores.view(), &truth).unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn ranking_metrics_skip_uninformative_samples() {
        // First sample's truth covers every label: skipped by both metrics.
        let scores = array![[0.2, 0.8], [0.9, 0.1]];
        let truth = sets(&[&[0, 1], &[0]]);
        assert_abs_diff_eq!(
            ranking_loss(scores.view(), &truth).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(one_error(scores.view(), &truth).unwrap(), 0.0, epsilon = 1e-15);
        // All samples skipped: undefined.
        let truth = sets(&[&[0, 1], &[0, 1]]);
        assert!(matches!(
            ranking_loss(scores.view(), &truth),
            Err(AmccError::UndefinedMetric(_))
        ));
        assert!(matches!(
            one_error(scores.view(), &truth),
            Err(AmccError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn one_error_hand_cases() {
        let scores = array![[0.9, 0.1], [0.2, 0.8]];
        let hit_both = sets(&[&[0], &[1]]);
        assert_abs_diff_eq!(one_error(scores.view(), &hit_both).unwrap(), 0.0, epsilon = 1e-15);
        let miss_both = sets(&[&[1], &[0]]);
        assert_abs_diff_eq!(one_error(scores.view(), &miss_both).unwrap(), 1.0, epsilon = 1e-15);
        let split = sets(&[&[0], &[0]]);
        assert_abs_diff_eq!(one_error(scores.view(), &split).unwrap(), 0.5, epsilon = 1e-15);
        // Argmax tie goes to the lowest index.
        let tied = array![[0.5, 0.5]];
        let truth = sets(&[&[1]]);
        assert_abs_diff_eq!(one_error(tied.view(), &truth).unwrap(), 1.0, epsilon = 1e-15);
        let truth = sets(&[&[0]]);
        assert_abs_diff_eq!(one_error(tied.view(), &truth).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn ranking_metrics_invariant_to_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let n = rng.random_range(1..5);
            let l = rng.random_range(2..5);
            let scores = Array2::from_shape_fn((n, l), |_| rng.random_range(0.0..1.0));
            let truth: Vec<BTreeSet<usize>> = (0..n)
                .map(|_| {
                    let size = rng.random_range(1..l);
                    let mut s = BTreeSet::new();
                    while s.len() < size {
                        s.insert(rng.random_range(0..l));
                    }
                    s
                })
                .collect();
            let transformed = scores.mapv(|x: f64| (3.0 * x + 1.0).exp());
            let rl_a = ranking_loss(scores.view(), &truth).unwrap();
            let rl_b = ranking_loss(transformed.view(), &truth).unwrap();
            assert_abs_diff_eq!(rl_a, rl_b, epsilon = 1e-12);
            let oe_a = one_error(scores.view(), &truth).unwrap();
            let oe_b = one_error(transformed.view(), &truth).unwrap();
            assert_abs_diff_eq!(oe_a, oe_b, epsilon = 1e-12);
        }
    }

    #[test]
    fn metrics_match_bruteforce_references() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let l = rng.random_range(2..5);
            let scores = Array2::from_shape_fn((n, l), |_| rng.random_range(0.0..1.0));
            let truth: Vec<BTreeSet<usize>> = (0..n)
                .map(|_| {
                    let size = rng.random_range(1..l);
                    let mut s = BTreeSet::new();
                    while s.len() < size {
                        s.insert(rng.random_range(0..l));
                    }
                    s
                })
                .collect();
            let predicted: Vec<BTreeSet<usize>> = (0..n)
                .map(|_| {
                    (0..l)
                        .filter(|_| rng.random_bool(0.4))
                        .collect()
                })
                .collect();

            // Brute-force accuracy.
            let mut acc = 0.0;
            for i in 0..n {
                let mut inter = 0.0;
                let mut union = 0.0;
                for g in 0..l {
                    let in_p = predicted[i].contains(&g);
                    let in_t = truth[i].contains(&g);
                    if in_p && in_t {
                        inter += 1.0;
                    }
                    if in_p || in_t {
                        union += 1.0;
                    }
                }
                acc += if union > 0.0 { inter / union } else { 1.0 };
            }
            acc /= n as f64;
            let got = set_accuracy::<f64>(&predicted, &truth).unwrap();
            assert!((got - acc).abs() < 1e-10);

            // Brute-force RL and OE over non-degenerate samples.
            let mut rl_sum = 0.0;
            let mut oe_sum = 0.0;
            let mut used = 0usize;
            for i in 0..n {
                if truth[i].len() == l {
                    continue;
                }
                used += 1;
                let mut viol = 0.0;
                let mut pairs = 0.0;
                for r in 0..l {
                    if !truth[i].contains(&r) {
                        continue;
                    }
                    for ir in 0..l {
                        if truth[i].contains(&ir) {
                            continue;
                        }
                        pairs += 1.0;
                        if scores[[i, ir]] >= scores[[i, r]] {
                            viol += 1.0;
                        }
                    }
                }
                rl_sum += viol / pairs;
                let mut best = 0;
                for g in 0..l {
                    if scores[[i, g]] > scores[[i, best]] {
                        best = g;
                    }
                }
                if !truth[i].contains(&best) {
                    oe_sum += 1.0;
                }
            }
            if used == 0 {
                assert!(ranking_loss(scores.view(), &truth).is_err());
                continue;
            }
            let got_rl = ranking_loss(scores.view(), &truth).unwrap();
            let got_oe = one_error(scores.view(), &truth).unwrap();
            assert!((got_rl - rl_sum / used as f64).abs() < 1e-10);
            assert!((got_oe - oe_sum / used as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn majority_vote_hand_cases() {
        // Workers: three vote +1 on (0,0); (0,1) splits +1/−1; (1,0) gets
        // two +1 and one −1; (1,1) has no votes.
        let w1 = array![[1, 1], [1, 0]];
        let w2 = array![[1, -1], [1, 0]];
        let w3 = array![[1, 0], [-1, 0]];
        let t = AnnotationTensor::new(vec![w1, w2, w3]).unwrap();
        let (pred, scores) = majority_vote::<f64>(&t);
        assert_abs_diff_eq!(scores[[0, 0]], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(scores[[0, 1]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(scores[[1, 0]], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(scores[[1, 1]], 0.5, epsilon = 1e-15);
        assert_eq!(pred[0], BTreeSet::from([0]));
        assert_eq!(pred[1], BTreeSet::from([0]));
    }

    #[test]
    fn majority_vote_fallback_and_order_invariance() {
        // Every vote negative: strict-majority set is empty, argmax fallback
        // picks the lowest index of the tied 0-scores... all scores tie at 0
        // for voted cells and 0.5 for unvoted, so the unvoted label wins.
        let w1 = array![[-1, 0], [-1, -1]];
        let w2 = array![[-1, 0], [-1, -1]];
        let t = AnnotationTensor::new(vec![w1.clone(), w2.clone()]).unwrap();
        let (pred, scores) = majority_vote::<f64>(&t);
        assert_abs_diff_eq!(scores[[0, 0]], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(scores[[0, 1]], 0.5, epsilon = 1e-15);
        assert_eq!(pred[0], BTreeSet::from([1]));
        assert_eq!(pred[1], BTreeSet::from([0]));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mats: Vec<Array2<i8>> = (0..4)
            .map(|_| {
                Array2::from_shape_fn((5, 3), |_| {
                    [-1i8, 0, 0, 1][rng.random_range(0..4)]
                })
            })
            .collect();
        if let Ok(t) = AnnotationTensor::new(mats.clone()) {
            let (pred_a, scores_a) = majority_vote::<f64>(&t);
            let reversed: Vec<Array2<i8>> = mats.into_iter().rev().collect();
            let t_rev = AnnotationTensor::new(reversed).unwrap();
            let (pred_b, scores_b) = majority_vote::<f64>(&t_rev);
            assert_eq!(pred_a, pred_b);
            assert_eq!(scores_a, scores_b);
        }
    }

    #[test]
    fn evaluate_bundles_metrics_and_breakdown() {
        let scores = array![[0.9, 0.05, 0.05], [0.1, 0.7, 0.2]];
        let predicted = sets(&[&[0], &[1]]);
        let truth = sets(&[&[0], &[1, 2]]);
        let report = evaluate(&predicted, scores.view(), &truth, true).unwrap();
        assert_abs_diff_eq!(report.accuracy, 0.75, epsilon = 1e-15);
        assert!(report.one_minus_rl >= 0.0 && report.one_minus_rl <= 1.0);
        assert!(report.one_minus_oe >= 0.0 && report.one_minus_oe <= 1.0);
        let breakdown = report.per_sample.unwrap();
        assert_eq!(breakdown.len(), 2);
        assert_abs_diff_eq!(breakdown[0].jaccard, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(breakdown[1].jaccard, 0.5, epsilon = 1e-15);
        assert_eq!(breakdown[0].one_error_hit, Some(true));
    }
}
