//! Small dense numerical kernels: centering matrices, empirical HSIC with a
//! linear kernel, Euclidean projection onto the probability simplex, the
//! label-correlation Laplacian, SPD linear solves, and the convexity check
//! for the per-worker subproblem.
//!
//! Matrices here are tiny (label-count sized), so everything is hand-rolled
//! dense code: Cholesky with iterative refinement for solves and cyclic
//! Jacobi rotations for symmetric eigenvalues.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::model::{AnnotationTensor, LabelCorrelation};
use crate::scalar::castu;
use crate::{cast, AmccError, Result, Scalar};

/// Result of the subproblem convexity check: whether `mu*I - beta*Q` stays
/// positive semidefinite for every worker, the worst eigenvalue encountered,
/// and whether the sufficient bound `mu/beta >= 4L(W-1)` holds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityCheck<F> {
    pub convex: bool,
    pub min_eigenvalue: F,
    pub sufficient_bound_holds: bool,
}

/// `H = I - (1/n) * 1 1ᵀ`; multiplying by `H` removes the column mean.
pub fn centering_matrix<F: Scalar>(n: usize) -> Result<Array2<F>> {
    if n == 0 {
        return Err(AmccError::InvalidDimension("centering matrix needs n >= 1".into()));
    }
    let c = F::one() / castu::<F>(n);
    let mut h = Array2::from_elem((n, n), -c);
    for i in 0..n {
        h[[i, i]] = F::one() - c;
    }
    Ok(h)
}

/// Empirical HSIC with linear kernels `K = X Xᵀ` on the rows of the inputs:
/// `(n-1)⁻² tr(K_X H K_Y H)` where n is the row count. The value is
/// non-negative up to roundoff and is clamped at zero.
pub fn empirical_hsic<F: Scalar>(x: ArrayView2<F>, y: ArrayView2<F>) -> Result<F> {
    if x.dim() != y.dim() {
        return Err(AmccError::shape(
            format!("{}x{}", x.nrows(), x.ncols()),
            format!("{}x{}", y.nrows(), y.ncols()),
        ));
    }
    let n = x.nrows();
    if n < 2 {
        return Err(AmccError::InvalidDimension(
            "HSIC needs at least two observation rows".into(),
        ));
    }
    let kx = x.dot(&x.t());
    let ky = y.dot(&y.t());
    let h = centering_matrix::<F>(n)?;
    let prod = kx.dot(&h).dot(&ky).dot(&h);
    let denom = castu::<F>((n - 1) * (n - 1));
    Ok((trace(prod.view()) / denom).max(F::zero()))
}

/// Euclidean projection of `v` onto `{u : u_l >= 0, Σ u_l = 1}` by the
/// sort-and-threshold rule.
pub fn project_row_simplex<F: Scalar>(v: ArrayView1<F>) -> Result<Vec<F>> {
    let n = v.len();
    if n == 0 {
        return Err(AmccError::InvalidDimension("cannot project an empty vector".into()));
    }
    for &x in v.iter() {
        if !x.is_finite() {
            return Err(AmccError::Domain("simplex projection input must be finite".into()));
        }
    }
    let mut sorted: Vec<F> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite entries compare"));
    let mut cumsum = F::zero();
    let mut theta = F::zero();
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - F::one()) / castu::<F>(j + 1);
        if u - candidate > F::zero() {
            theta = candidate;
        }
    }
    Ok(v.iter().map(|&x| (x - theta).max(F::zero())).collect())
}

/// Cosine-similarity graph over the labels of the crowd-averaged annotation
/// matrix, with its degree matrix and Laplacian.
///
/// All-zero columns get similarity 0 everywhere (including the diagonal), and
/// negative cosines are clamped to 0 so the graph weights stay non-negative
/// and the Laplacian stays positive semidefinite.
pub fn build_label_correlation<F: Scalar>(tensor: &AnnotationTensor) -> Result<LabelCorrelation<F>> {
    let n = tensor.num_samples();
    let l = tensor.num_labels();
    let w = tensor.num_workers();
    let mut avg = Array2::<F>::zeros((n, l));
    for a in tensor.workers() {
        for (dst, &src) in avg.iter_mut().zip(a.iter()) {
            *dst += cast::<F>(src as f64);
        }
    }
    let wf = castu::<F>(w);
    avg.mapv_inplace(|x| x / wf);

    let norms: Vec<F> = (0..l)
        .map(|j| avg.column(j).iter().map(|&x| x * x).sum::<F>().sqrt())
        .collect();
    let mut sim = Array2::<F>::zeros((l, l));
    for i in 0..l {
        for j in i..l {
            let s = if norms[i] > F::zero() && norms[j] > F::zero() {
                let dot = avg
                    .column(i)
                    .iter()
                    .zip(avg.column(j).iter())
                    .map(|(&a, &b)| a * b)
                    .sum::<F>();
                (dot / (norms[i] * norms[j])).max(F::zero())
            } else {
                F::zero()
            };
            sim[[i, j]] = s;
            sim[[j, i]] = s;
        }
    }
    let mut degree = Array2::<F>::zeros((l, l));
    for i in 0..l {
        degree[[i, i]] = sim.row(i).iter().copied().sum::<F>();
    }
    let laplacian = &degree - &sim;
    let corr = LabelCorrelation {
        similarity: sim,
        degree,
        laplacian,
    };
    corr.validate()?;
    Ok(corr)
}

/// Solve `A X = RHS` for symmetric positive semidefinite `A`.
///
/// A ridge of 1e-8 on the diagonal guards rank deficiency before the
/// Cholesky factorization; iterative refinement against the un-ridged matrix
/// then drives the true residual down. Fails if the ridged matrix is not
/// positive definite or the relative residual cannot be brought below the
/// scalar type's feasibility tolerance.
pub fn solve_spd_system<F: Scalar>(
    a: ArrayView2<F>,
    rhs: ArrayView2<F>,
    context: &str,
) -> Result<Array2<F>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(AmccError::shape(format!("{n}x{n}"), format!("{n}x{}", a.ncols())));
    }
    if rhs.nrows() != n {
        return Err(AmccError::shape(
            format!("rhs with {n} rows"),
            format!("{} rows", rhs.nrows()),
        ));
    }
    let ridge = cast::<F>(1e-8);
    let mut ridged = a.to_owned();
    for i in 0..n {
        ridged[[i, i]] += ridge;
    }
    let chol = cholesky(&ridged).ok_or_else(|| {
        AmccError::numerical(context, "matrix is not positive definite after ridge")
    })?;

    let mut x = cholesky_solve(&chol, &rhs.to_owned());
    let rhs_scale = F::one().max(frobenius(rhs));
    let contract_tol = F::feas_tol() * rhs_scale;
    // Refine well past the contract so downstream stationarity checks that
    // need absolute residuals also hold.
    let target = contract_tol * cast::<F>(1e-4);
    let mut prev_res = F::infinity();
    for _ in 0..6 {
        let resid = &rhs.to_owned() - &a.dot(&x);
        let res_norm = frobenius(resid.view());
        if res_norm <= target || res_norm >= prev_res * cast::<F>(0.9) {
            break;
        }
        prev_res = res_norm;
        let correction = cholesky_solve(&chol, &resid);
        x = &x + &correction;
    }
    let final_res = frobenius((&rhs.to_owned() - &a.dot(&x)).view());
    if final_res > contract_tol {
        return Err(AmccError::numerical(
            context,
            format!("solve residual {final_res} exceeds tolerance {contract_tol}"),
        ));
    }
    Ok(x)
}

/// Convexity check for the per-worker individuality subproblem: for every
/// worker w, `P_w = mu*I - beta * Σ_{v≠w} H D_v D_vᵀ H` must be positive
/// semidefinite (minimum eigenvalue >= -1e-8). Also reports whether the
/// sufficient bound `mu/beta >= 4L(W-1)` holds.
pub fn verify_convexity_bound<F: Scalar>(
    d_all: &[Array2<F>],
    mu: F,
    beta: F,
) -> Result<ConvexityCheck<F>> {
    if d_all.is_empty() {
        return Err(AmccError::InvalidDimension("convexity check needs at least one matrix".into()));
    }
    let l = d_all[0].nrows();
    for d in d_all {
        if d.dim() != (l, l) {
            return Err(AmccError::shape(format!("{l}x{l}"), format!("{}x{}", d.nrows(), d.ncols())));
        }
    }
    let w = d_all.len();
    let h = centering_matrix::<F>(l)?;
    let centered: Vec<Array2<F>> = d_all
        .iter()
        .map(|d| h.dot(&d.dot(&d.t())).dot(&h))
        .collect();
    let mut total = Array2::<F>::zeros((l, l));
    for c in &centered {
        total = &total + c;
    }

    let mut min_eig = F::infinity();
    for c in centered.iter() {
        let q = &total - c;
        let mut p = q.mapv(|x| -beta * x);
        for i in 0..l {
            p[[i, i]] += mu;
        }
        let eigs = sym_eigenvalues(p.view())?;
        if let Some(&e) = eigs.first() {
            min_eig = min_eig.min(e);
        }
    }

    let sufficient_bound_holds = if beta > F::zero() {
        let floor = castu::<F>(4 * l * (w.saturating_sub(1)));
        mu / beta + floor * F::epsilon() * cast::<F>(8.0) >= floor
    } else {
        true
    };
    Ok(ConvexityCheck {
        convex: min_eig >= -cast::<F>(1e-8),
        min_eigenvalue: min_eig,
        sufficient_bound_holds,
    })
}

/// Eigenvalues of a symmetric matrix, ascending, via cyclic Jacobi rotations.
/// The input is symmetrized defensively; intended for label-count sized
/// matrices.
pub fn sym_eigenvalues<F: Scalar>(a: ArrayView2<F>) -> Result<Vec<F>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(AmccError::shape(format!("{n}x{n}"), format!("{n}x{}", a.ncols())));
    }
    if n == 0 {
        return Err(AmccError::InvalidDimension("eigenvalues of an empty matrix".into()));
    }
    let mut m = Array2::<F>::zeros((n, n));
    let half = cast::<F>(0.5);
    for i in 0..n {
        for j in 0..n {
            m[[i, j]] = (a[[i, j]] + a[[j, i]]) * half;
        }
    }
    let scale = frobenius(m.view()).max(F::one());
    let tol = scale * F::epsilon() * castu::<F>(n);
    for _sweep in 0..100 {
        let mut off = F::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol * cast::<F>(1e-3) {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (apq + apq);
                let t = {
                    let sign = if theta >= F::zero() { F::one() } else { -F::one() };
                    sign / (theta.abs() + (theta * theta + F::one()).sqrt())
                };
                let c = F::one() / (t * t + F::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eigs: Vec<F> = (0..n).map(|i| m[[i, i]]).collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are finite"));
    Ok(eigs)
}

pub(crate) fn trace<F: Scalar>(a: ArrayView2<F>) -> F {
    (0..a.nrows().min(a.ncols())).map(|i| a[[i, i]]).sum()
}

pub(crate) fn frobenius<F: Scalar>(a: ArrayView2<F>) -> F {
    a.iter().map(|&x| x * x).sum::<F>().sqrt()
}

/// Lower-triangular Cholesky factor; `None` if a pivot is not positive.
fn cholesky<F: Scalar>(a: &Array2<F>) -> Option<Array2<F>> {
    let n = a.nrows();
    let mut l = Array2::<F>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= F::zero() {
                    return None;
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solve `(L Lᵀ) X = B` column by column via two triangular substitutions.
fn cholesky_solve<F: Scalar>(l: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let n = l.nrows();
    let cols = b.ncols();
    let mut x = Array2::<F>::zeros((n, cols));
    let mut y = vec![F::zero(); n];
    for c in 0..cols {
        for i in 0..n {
            let mut s = b[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}
