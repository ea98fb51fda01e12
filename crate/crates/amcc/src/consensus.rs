//! Model fitting and consensus inference.
//!
//! The joint objective couples three terms: weighted reconstruction of every
//! worker's annotation matrix through its individuality plus a group
//! commonality, a dependence reward (HSIC) between individuality matrices of
//! workers sharing a group, and a Laplacian smoothness penalty tying
//! commonality rows of correlated labels together. `fit` alternates four
//! block updates (group assignment, individuality by one ADMM round,
//! commonality by a regularized linear solve, group weights in closed form)
//! until the objective stalls.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math::{
    build_label_correlation, centering_matrix, empirical_hsic, frobenius, project_row_simplex,
    solve_spd_system, verify_convexity_bound,
};
use crate::model::{AmccConfig, AnnotationTensor, ConsensusModel};
use crate::scalar::castu;
use crate::{cast, AmccError, Result, Scalar};

/// Per-fit diagnostics: the objective after each outer iteration, the group
/// assignment in force during that iteration, and the minimum eigenvalue of
/// the subproblem curvature check.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace<F: Scalar> {
    pub objective_history: Vec<F>,
    pub converged: bool,
    pub iterations_run: usize,
    pub group_assignment_history: Vec<Vec<usize>>,
    /// Minimum eigenvalue of `mu*I - beta*Q_w` over workers, one entry per
    /// outer iteration, evaluated on the feasible iterates.
    pub convexity_min_eigenvalues: Vec<F>,
}

/// ADMM working state for the individuality subproblem: the feasible
/// auxiliary iterates `S`, the scaled duals `T`, and the penalty weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState<F: Scalar> {
    pub s: Vec<Array2<F>>,
    pub t: Vec<Array2<F>>,
    pub mu: F,
}

impl<F: Scalar> AdmmState<F> {
    /// Start a round from feasible individuality matrices: `S` mirrors them
    /// and the duals are zero.
    pub fn fresh(individuality: &[Array2<F>], mu: F) -> Self {
        let t = individuality
            .iter()
            .map(|d| Array2::zeros(d.dim()))
            .collect();
        AdmmState {
            s: individuality.to_vec(),
            t,
            mu,
        }
    }
}

/// A fitted model together with its fit diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome<F: Scalar> {
    pub model: ConsensusModel<F>,
    pub trace: FitTrace<F>,
}

/// Normalized per-label consensus scores for one sample. When the sample has
/// no positive annotation from any worker the scores are uniform and the
/// flag is set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusScores<F: Scalar> {
    pub scores: Vec<F>,
    pub no_positive_annotations: bool,
}

fn check_shapes<F: Scalar>(tensor: &AnnotationTensor, model: &ConsensusModel<F>) -> Result<()> {
    if model.num_workers() != tensor.num_workers() || model.num_labels() != tensor.num_labels() {
        return Err(AmccError::shape(
            format!("model for {} workers x {} labels", tensor.num_workers(), tensor.num_labels()),
            format!("{} workers x {} labels", model.num_workers(), model.num_labels()),
        ));
    }
    Ok(())
}

/// Gram matrices `A_wᵀ A_w`, one per worker.
fn gram_matrices<F: Scalar>(tensor: &AnnotationTensor) -> Vec<Array2<F>> {
    tensor
        .to_float::<F>()
        .iter()
        .map(|a| a.t().dot(a))
        .collect()
}

/// `‖A − A·B‖²_F` computed as `tr((I−B)ᵀ G (I−B))` with `G = AᵀA`; clamped at
/// zero against roundoff.
fn reconstruction_residual<F: Scalar>(gram: &Array2<F>, b: &Array2<F>) -> F {
    let l = gram.nrows();
    let mut imb = b.mapv(|x| -x);
    for i in 0..l {
        imb[[i, i]] += F::one();
    }
    let prod = imb.t().dot(gram).dot(&imb);
    (0..l).map(|i| prod[[i, i]]).sum::<F>().max(F::zero())
}

/// Per-group residuals `R_m = Σ_w ‖A_w − A_w(D_w + C_m)‖²_F` over all
/// workers.
fn group_residuals<F: Scalar>(gram: &[Array2<F>], model: &ConsensusModel<F>) -> Vec<F> {
    model
        .commonality
        .iter()
        .map(|c| {
            gram.iter()
                .zip(model.individuality.iter())
                .map(|(g, d)| reconstruction_residual(g, &(d + c)))
                .sum()
        })
        .collect()
}

/// Joint objective: weighted reconstruction minus the within-group HSIC
/// reward plus the Laplacian smoothness penalty on commonality matrices.
pub fn evaluate_objective<F: Scalar>(
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
    cfg: &AmccConfig<F>,
) -> Result<F> {
    check_shapes(tensor, model)?;
    let gram = gram_matrices::<F>(tensor);
    let mut obj = F::zero();
    for (m, c) in model.commonality.iter().enumerate() {
        let lam = model.group_weights[m].powf(cfg.r);
        for (g, d) in gram.iter().zip(model.individuality.iter()) {
            obj += lam * reconstruction_residual(g, &(d + c));
        }
    }
    if cfg.alpha > F::zero() {
        let mut dependence = F::zero();
        for m in 0..model.num_groups() {
            let members = model.group_members(m);
            for &w in &members {
                for &v in &members {
                    if w != v {
                        dependence += empirical_hsic(
                            model.individuality[w].view(),
                            model.individuality[v].view(),
                        )?;
                    }
                }
            }
        }
        obj -= cfg.alpha * dependence;
    }
    if cfg.beta > F::zero() {
        let lap = &model.label_correlation.laplacian;
        for c in &model.commonality {
            let quad = c.t().dot(lap).dot(c);
            obj += cfg.beta * (0..quad.nrows()).map(|i| quad[[i, i]]).sum::<F>();
        }
    }
    Ok(obj)
}

/// Build the D-step stationarity system for one worker: minimize
/// `Σ_m λ_m^r ‖A − A(D + C_m)‖² − α(L−1)⁻² tr(Dᵀ Q D) + (μ/2)‖D − S + T‖²`,
/// whose gradient vanishes at the solution of `lhs · D = rhs`.
fn d_step_system<F: Scalar>(
    gram: &Array2<F>,
    q: &Array2<F>,
    s: &Array2<F>,
    t: &Array2<F>,
    model: &ConsensusModel<F>,
    cfg: &AmccConfig<F>,
) -> (Array2<F>, Array2<F>) {
    let l = gram.nrows();
    let two = cast::<F>(2.0);
    let s_total: F = model
        .group_weights
        .iter()
        .map(|lam| lam.powf(cfg.r))
        .sum();
    // R = Σ_m λ_m^r (I − C_m)
    let mut r_mat = Array2::<F>::zeros((l, l));
    for (m, c) in model.commonality.iter().enumerate() {
        let lam = model.group_weights[m].powf(cfg.r);
        for i in 0..l {
            r_mat[[i, i]] += lam;
        }
        r_mat = &r_mat - &c.mapv(|x| lam * x);
    }
    let hsic_coeff = two * cfg.alpha / castu::<F>((l - 1) * (l - 1));
    let mut lhs = gram.mapv(|x| two * s_total * x) - q.mapv(|x| hsic_coeff * x);
    for i in 0..l {
        lhs[[i, i]] += cfg.mu;
    }
    let rhs = gram.dot(&r_mat).mapv(|x| two * x) + (s - t).mapv(|x| cfg.mu * x);
    (lhs, rhs)
}

/// One ADMM round over every worker's individuality matrix.
///
/// Each worker gets (a) a D-step solving the stationarity system of its
/// quadratic subproblem, (b) an S-step projecting the rows of `D + T` onto
/// the probability simplex, and (c) the dual update `T += D − S`. The HSIC
/// coupling reads from a snapshot of the other workers' matrices taken on
/// entry, so the sweep order does not matter. On exit each worker's
/// individuality is the feasible iterate `S`.
pub fn update_individuality<F: Scalar>(
    tensor: &AnnotationTensor,
    model: &mut ConsensusModel<F>,
    state: &mut AdmmState<F>,
    cfg: &AmccConfig<F>,
) -> Result<()> {
    check_shapes(tensor, model)?;
    let l = model.num_labels();
    let w_count = model.num_workers();
    let check = verify_convexity_bound(&model.individuality, state.mu, cfg.alpha)?;
    if !check.convex {
        return Err(AmccError::InvalidConfig(format!(
            "individuality subproblem is non-convex (min curvature eigenvalue {}); \
             raise mu so that mu/alpha >= 4L(W-1) = {}",
            check.min_eigenvalue,
            4 * l * (w_count - 1)
        )));
    }

    let gram = gram_matrices::<F>(tensor);
    let h = centering_matrix::<F>(l)?;
    // Snapshot of the centered kernel of every worker's current matrix; the
    // sweep below is Jacobi-style and must not see mid-round updates.
    let kernels: Vec<Array2<F>> = model
        .individuality
        .iter()
        .map(|d| h.dot(&d.dot(&d.t())).dot(&h))
        .collect();

    for w in 0..w_count {
        let group = model.group_assignment[w];
        let mut q = Array2::<F>::zeros((l, l));
        for (v, kern) in kernels.iter().enumerate() {
            if v != w && model.group_assignment[v] == group {
                q = &q + kern;
            }
        }
        let (lhs, rhs) = d_step_system(&gram[w], &q, &state.s[w], &state.t[w], model, cfg);
        let d_new = solve_spd_system(lhs.view(), rhs.view(), "individuality D-step")?;
        let shifted = &d_new + &state.t[w];
        let mut s_new = Array2::<F>::zeros((l, l));
        for (i, row) in shifted.outer_iter().enumerate() {
            for (j, v) in project_row_simplex(row)?.into_iter().enumerate() {
                s_new[[i, j]] = v;
            }
        }
        state.t[w] = &state.t[w] + &d_new - &s_new;
        state.s[w] = s_new.clone();
        model.individuality[w] = s_new;
    }
    Ok(())
}

/// Update every group's commonality matrix by solving
/// `(Σ_{w∈W_m} A_wᵀA_w + α·Lap) C_m = Σ_{w∈W_m} A_wᵀA_w` and verifying the
/// stationarity residual of the underlying optimality condition.
pub fn update_commonality<F: Scalar>(
    tensor: &AnnotationTensor,
    model: &mut ConsensusModel<F>,
    cfg: &AmccConfig<F>,
) -> Result<()> {
    check_shapes(tensor, model)?;
    let l = model.num_labels();
    let gram = gram_matrices::<F>(tensor);
    let lap = model.label_correlation.laplacian.clone();
    let resid_tol = F::feas_tol() * cast::<F>(100.0);
    for m in 0..model.num_groups() {
        let mut k = Array2::<F>::zeros((l, l));
        for w in model.group_members(m) {
            k = &k + &gram[w];
        }
        let lhs = &k + &lap.mapv(|x| cfg.alpha * x);
        let c = solve_spd_system(lhs.view(), k.view(), "commonality solve")?;
        let resid = &k.dot(&c) - &k + &lap.dot(&c).mapv(|x| cfg.alpha * x);
        let resid_norm = frobenius(resid.view());
        if resid_norm > resid_tol {
            return Err(AmccError::numerical(
                "commonality stationarity",
                format!("residual {resid_norm} exceeds {resid_tol}"),
            ));
        }
        model.commonality[m] = c;
    }
    Ok(())
}

/// Closed-form weights from per-group residuals: `λ_m ∝ R_m^{1/(1−r)}`,
/// evaluated in the log domain. Zero-residual groups take the limit: all
/// weight splits uniformly among them; if every residual is zero the weights
/// are uniform.
pub(crate) fn weights_from_residuals<F: Scalar>(residuals: &[F], r: F) -> Vec<F> {
    let m = residuals.len();
    let zeros: Vec<usize> = (0..m).filter(|&i| residuals[i] <= F::zero()).collect();
    if zeros.len() == m {
        return vec![F::one() / castu::<F>(m); m];
    }
    if !zeros.is_empty() {
        let share = F::one() / castu::<F>(zeros.len());
        let mut out = vec![F::zero(); m];
        for i in zeros {
            out[i] = share;
        }
        return out;
    }
    let exponent = F::one() / (F::one() - r);
    let logits: Vec<F> = residuals.iter().map(|&x| exponent * x.ln()).collect();
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| a.max(b));
    let expd: Vec<F> = logits.iter().map(|&t| (t - max).exp()).collect();
    let total: F = expd.iter().copied().sum();
    expd.into_iter().map(|e| e / total).collect()
}

/// Recompute the group weights from the current residuals.
pub fn update_group_weights<F: Scalar>(
    tensor: &AnnotationTensor,
    model: &mut ConsensusModel<F>,
    cfg: &AmccConfig<F>,
) -> Result<()> {
    check_shapes(tensor, model)?;
    let gram = gram_matrices::<F>(tensor);
    let residuals = group_residuals(&gram, model);
    model.group_weights = weights_from_residuals(&residuals, cfg.r);
    Ok(())
}

/// Reassign every worker to the group whose commonality reconstructs it
/// best, ties toward the lower group index. Groups that would come out empty
/// are backfilled with their nearest worker (by the same residual) drawn
/// from groups that can spare one, so all groups stay nonempty.
pub fn assign_groups<F: Scalar>(
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
    _cfg: &AmccConfig<F>,
) -> Result<Vec<usize>> {
    check_shapes(tensor, model)?;
    let w_count = model.num_workers();
    let m_count = model.num_groups();
    let gram = gram_matrices::<F>(tensor);
    let resid = |w: usize, m: usize| -> F {
        reconstruction_residual(&gram[w], &(&model.individuality[w] + &model.commonality[m]))
    };
    let mut assignment: Vec<usize> = (0..w_count)
        .map(|w| {
            let mut best = 0;
            let mut best_r = resid(w, 0);
            for m in 1..m_count {
                let r = resid(w, m);
                if r < best_r {
                    best_r = r;
                    best = m;
                }
            }
            best
        })
        .collect();
    let mut counts = vec![0usize; m_count];
    for &g in &assignment {
        counts[g] += 1;
    }
    for m in 0..m_count {
        if counts[m] > 0 {
            continue;
        }
        let mut pick: Option<(usize, F)> = None;
        for w in 0..w_count {
            if counts[assignment[w]] < 2 {
                continue;
            }
            let r = resid(w, m);
            let better = match pick {
                None => true,
                Some((_, best)) => r < best,
            };
            if better {
                pick = Some((w, r));
            }
        }
        let (w, _) = pick.expect("a donor group with at least two workers exists");
        counts[assignment[w]] -= 1;
        assignment[w] = m;
        counts[m] += 1;
    }
    Ok(assignment)
}

/// Shuffle workers with a seeded generator and deal them round-robin into
/// `m` groups, so initial group sizes differ by at most one.
fn seeded_balanced_assignment(w_count: usize, m_count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..w_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; w_count];
    for (pos, &w) in order.iter().enumerate() {
        assignment[w] = pos % m_count;
    }
    assignment
}

/// Fit the model by alternating minimization from a neutral start: uniform
/// individuality rows, zero commonality, uniform weights, and a seeded
/// balanced random group assignment.
///
/// Stops when the objective changes by less than `convergence_tol` between
/// outer iterations or after `max_inner_iters`; running out of iterations
/// sets `converged = false` in the trace rather than failing.
pub fn fit<F: Scalar>(
    tensor: &AnnotationTensor,
    cfg: &AmccConfig<F>,
    seed: u64,
) -> Result<FitOutcome<F>> {
    cfg.validate()?;
    cfg.validate_for(tensor)?;
    let l = cfg.num_labels;
    let uniform = Array2::from_elem((l, l), F::one() / castu::<F>(l));
    let model = ConsensusModel {
        individuality: vec![uniform; cfg.num_workers],
        commonality: vec![Array2::zeros((l, l)); cfg.num_groups],
        group_weights: vec![F::one() / castu::<F>(cfg.num_groups); cfg.num_groups],
        group_assignment: seeded_balanced_assignment(cfg.num_workers, cfg.num_groups, seed),
        label_correlation: build_label_correlation(tensor)?,
    };
    run_fit_loop(tensor, cfg, model)
}

/// Refit after the annotations changed, carrying over groups, individuality,
/// commonality, and weights from a previous model. The label correlation is
/// rebuilt from the current tensor and the ADMM state starts fresh.
pub fn fit_warm<F: Scalar>(
    tensor: &AnnotationTensor,
    cfg: &AmccConfig<F>,
    previous: &ConsensusModel<F>,
) -> Result<FitOutcome<F>> {
    cfg.validate()?;
    cfg.validate_for(tensor)?;
    if previous.num_workers() != cfg.num_workers
        || previous.num_labels() != cfg.num_labels
        || previous.num_groups() != cfg.num_groups
    {
        return Err(AmccError::InvalidConfig(
            "warm-start model dimensions do not match the configuration".into(),
        ));
    }
    let mut model = previous.clone();
    model.label_correlation = build_label_correlation(tensor)?;
    run_fit_loop(tensor, cfg, model)
}

fn run_fit_loop<F: Scalar>(
    tensor: &AnnotationTensor,
    cfg: &AmccConfig<F>,
    mut model: ConsensusModel<F>,
) -> Result<FitOutcome<F>> {
    let mut state = AdmmState::fresh(&model.individuality, cfg.mu);
    let mut trace = FitTrace {
        objective_history: Vec::new(),
        converged: false,
        iterations_run: 0,
        group_assignment_history: Vec::new(),
        convexity_min_eigenvalues: Vec::new(),
    };
    for iter in 1..=cfg.max_inner_iters {
        // The seeded (or warm-start) assignment drives the first iteration;
        // from the second onward membership follows the learned residuals.
        if iter > 1 {
            model.group_assignment = assign_groups(tensor, &model, cfg)?;
        }
        update_individuality(tensor, &mut model, &mut state, cfg)?;
        update_commonality(tensor, &mut model, cfg)?;
        update_group_weights(tensor, &mut model, cfg)?;
        let objective = evaluate_objective(tensor, &model, cfg)?;
        debug_assert!(model.validate().is_ok(), "iterate left the feasible set");
        trace
            .convexity_min_eigenvalues
            .push(verify_convexity_bound(&model.individuality, cfg.mu, cfg.beta)?.min_eigenvalue);
        trace.group_assignment_history.push(model.group_assignment.clone());
        trace.objective_history.push(objective);
        trace.iterations_run = iter;
        let n = trace.objective_history.len();
        if n >= 2 {
            let delta = (trace.objective_history[n - 1] - trace.objective_history[n - 2]).abs();
            if delta < cfg.convergence_tol {
                trace.converged = true;
                break;
            }
        }
    }
    Ok(FitOutcome { model, trace })
}

/// Normalized consensus scores for one sample.
///
/// Per candidate label g the unnormalized score is
/// `Σ_m λ_m^r Π_w Π_{l: A_w(i,l)=1} max(C_m(g,l) + D_w(g,l), prob_floor)`,
/// accumulated in the log domain per group and combined by log-sum-exp, then
/// normalized to sum to one across labels. A sample no worker has positively
/// annotated gets uniform scores and the degenerate flag.
pub fn consensus_scores<F: Scalar>(
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
    cfg: &AmccConfig<F>,
    sample: usize,
) -> Result<ConsensusScores<F>> {
    check_shapes(tensor, model)?;
    let n = tensor.num_samples();
    if sample >= n {
        return Err(AmccError::InvalidDimension(format!(
            "sample index {sample} out of range for {n} samples"
        )));
    }
    let l = model.num_labels();
    let positives: Vec<Vec<usize>> = (0..tensor.num_workers())
        .map(|w| {
            (0..l)
                .filter(|&lab| tensor.worker(w)[[sample, lab]] == 1)
                .collect()
        })
        .collect();
    if positives.iter().all(|p| p.is_empty()) {
        return Ok(ConsensusScores {
            scores: vec![F::one() / castu::<F>(l); l],
            no_positive_annotations: true,
        });
    }
    let mut log_raw = vec![F::neg_infinity(); l];
    for (g, slot) in log_raw.iter_mut().enumerate() {
        let mut group_terms: Vec<F> = Vec::with_capacity(model.num_groups());
        for (m, c) in model.commonality.iter().enumerate() {
            let lam = model.group_weights[m];
            if lam <= F::zero() {
                continue;
            }
            let mut term = cfg.r * lam.ln();
            for (w, pos) in positives.iter().enumerate() {
                let d = &model.individuality[w];
                for &lab in pos {
                    term += (c[[g, lab]] + d[[g, lab]]).max(cfg.prob_floor).ln();
                }
            }
            group_terms.push(term);
        }
        let max = group_terms
            .iter()
            .copied()
            .fold(F::neg_infinity(), |a, b| a.max(b));
        if max.is_finite() {
            let sum: F = group_terms.iter().map(|&t| (t - max).exp()).sum();
            *slot = max + sum.ln();
        }
    }
    let max = log_raw
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| a.max(b));
    let expd: Vec<F> = log_raw.iter().map(|&t| (t - max).exp()).collect();
    let total: F = expd.iter().copied().sum();
    Ok(ConsensusScores {
        scores: expd.into_iter().map(|e| e / total).collect(),
        no_positive_annotations: false,
    })
}

/// Labels whose normalized score clears the threshold (boundary inclusive);
/// never empty thanks to an argmax fallback (lowest index on ties).
pub fn consensus_labels<F: Scalar>(
    tensor: &AnnotationTensor,
    model: &ConsensusModel<F>,
    cfg: &AmccConfig<F>,
    sample: usize,
) -> Result<BTreeSet<usize>> {
    let scored = consensus_scores(tensor, model, cfg, sample)?;
    let mut set: BTreeSet<usize> = scored
        .scores
        .iter()
        .enumerate()
        .filter_map(|(g, &s)| (s >= cfg.consensus_threshold).then_some(g))
        .collect();
    if set.is_empty() {
        let mut best = 0;
        for (g, &s) in scored.scores.iter().enumerate() {
            if s > scored.scores[best] {
                best = g;
            }
        }
        set.insert(best);
    }
    Ok(set)
}
