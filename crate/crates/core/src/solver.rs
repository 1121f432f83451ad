//! Dense solver for the per-iteration convex subproblem:
//!
//! ```text
//! minimize   Σ wᵢ εᵢ²   or   Σ wᵢ |εᵢ|,    ε = A_r x − b_r
//! subject to A_eq x = b_eq,   l ≤ x ≤ u
//! ```
//!
//! The absolute objective is rewritten with an epigraph split ε = u − v,
//! u,v ≥ 0, after which both objectives are handled by one primal
//! active-set method: equality-constrained steps through a null-space
//! basis, box bounds pinned and released one at a time with
//! smallest-index tie breaking, so identical inputs give identical
//! output. Subproblems here are small and dense; no external solver.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// KKT/feasibility tolerance a returned `Optimal` status certifies.
pub const SOLVER_TOL: f64 = 1e-8;
/// Pivot tolerance of the rank-revealing equality presolve.
const PIVOT_TOL: f64 = 1e-10;
const STEP_TOL: f64 = 1e-11;
const MULT_TOL: f64 = 1e-9;
const ACTIVE_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("inconsistent dimensions: {0}")]
    Dimensions(String),
    #[error("weights must be strictly positive")]
    NonPositiveWeight,
    #[error("lower bound exceeds upper bound at index {0}")]
    CrossedBounds(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    WeightedLeastSquares,
    WeightedAbsolute,
}

/// One convex subproblem instance. Bounds may be ±∞.
#[derive(Debug, Clone)]
pub struct ConvexProgram {
    pub objective: ObjectiveKind,
    pub residual_matrix: DMatrix<f64>,
    pub residual_offset: DVector<f64>,
    pub weights: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ConvexProgram {
    pub fn variable_count(&self) -> usize {
        self.residual_matrix.ncols()
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        let n = self.variable_count();
        if self.eq_matrix.ncols() != n && self.eq_matrix.nrows() > 0 {
            return Err(ProgramError::Dimensions("equality matrix".into()));
        }
        if self.eq_matrix.nrows() != self.eq_rhs.len() {
            return Err(ProgramError::Dimensions("equality rhs".into()));
        }
        if self.residual_matrix.nrows() != self.residual_offset.len()
            || self.residual_matrix.nrows() != self.weights.len()
        {
            return Err(ProgramError::Dimensions("residual block".into()));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(ProgramError::Dimensions("bounds".into()));
        }
        if self.weights.iter().any(|&w| w <= 0.0 || w.is_nan()) {
            return Err(ProgramError::NonPositiveWeight);
        }
        for i in 0..n {
            if self.lower[i] > self.upper[i] {
                return Err(ProgramError::CrossedBounds(i));
            }
        }
        Ok(())
    }

    /// Objective at `x` in the original variables.
    pub fn objective_value(&self, x: &DVector<f64>) -> f64 {
        let eps = &self.residual_matrix * x - &self.residual_offset;
        let value: f64 = match self.objective {
            ObjectiveKind::WeightedLeastSquares => eps
                .iter()
                .zip(self.weights.iter())
                .map(|(e, w)| w * e * e)
                .sum(),
            ObjectiveKind::WeightedAbsolute => eps
                .iter()
                .zip(self.weights.iter())
                .map(|(e, w)| w * e.abs())
                .sum(),
        };
        // An empty sum is -0.0; the objective is a sum of nonnegative terms.
        value.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub solution: DVector<f64>,
    pub objective_value: f64,
    pub kkt_residual: f64,
    pub status: SolveStatus,
}

/// Quadratic form `½xᵀHx + gᵀx` with equality rows and box bounds — the
/// shape the active-set core consumes after objective rewriting.
struct Internal {
    h: DMatrix<f64>,
    g: DVector<f64>,
    aeq: DMatrix<f64>,
    beq: DVector<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    n_orig: usize,
}

fn internalize(p: &ConvexProgram) -> Internal {
    let n = p.variable_count();
    let ne = p.residual_matrix.nrows();
    match p.objective {
        ObjectiveKind::WeightedLeastSquares => {
            let w = DMatrix::from_diagonal(&p.weights);
            let h = 2.0 * p.residual_matrix.transpose() * &w * &p.residual_matrix;
            let g = -2.0 * p.residual_matrix.transpose() * &w * &p.residual_offset;
            Internal {
                h,
                g,
                aeq: p.eq_matrix.clone(),
                beq: p.eq_rhs.clone(),
                lower: p.lower.clone(),
                upper: p.upper.clone(),
                n_orig: n,
            }
        }
        ObjectiveKind::WeightedAbsolute => {
            // ε = u − v with u,v ≥ 0; objective Σ w (u + v) is linear.
            let nx = n + 2 * ne;
            let m = p.eq_matrix.nrows();
            let mut aeq = DMatrix::zeros(m + ne, nx);
            let mut beq = DVector::zeros(m + ne);
            aeq.view_mut((0, 0), (m, n)).copy_from(&p.eq_matrix);
            beq.rows_mut(0, m).copy_from(&p.eq_rhs);
            aeq.view_mut((m, 0), (ne, n)).copy_from(&p.residual_matrix);
            for i in 0..ne {
                aeq[(m + i, n + i)] = -1.0;
                aeq[(m + i, n + ne + i)] = 1.0;
                beq[m + i] = p.residual_offset[i];
            }
            let mut g = DVector::zeros(nx);
            let mut lower = DVector::from_element(nx, 0.0);
            let mut upper = DVector::from_element(nx, f64::INFINITY);
            lower.rows_mut(0, n).copy_from(&p.lower);
            upper.rows_mut(0, n).copy_from(&p.upper);
            for i in 0..ne {
                g[n + i] = p.weights[i];
                g[n + ne + i] = p.weights[i];
            }
            Internal {
                h: DMatrix::zeros(nx, nx),
                g,
                aeq,
                beq,
                lower,
                upper,
                n_orig: n,
            }
        }
    }
}

/// Row-echelon presolve: returns an equivalent independent equality system,
/// or `None` if the equalities are inconsistent.
fn presolve_equalities(aeq: &DMatrix<f64>, beq: &DVector<f64>) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let (m, n) = (aeq.nrows(), aeq.ncols());
    if m == 0 {
        return Some((aeq.clone(), beq.clone()));
    }
    let mut a = aeq.clone();
    let mut b = beq.clone();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    let tol = PIVOT_TOL * scale;
    let mut rank = 0;
    for col in 0..n {
        if rank == m {
            break;
        }
        let (pivot_row, pivot_val) = (rank..m)
            .map(|r| (r, a[(r, col)].abs()))
            .fold((rank, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_val <= tol {
            continue;
        }
        a.swap_rows(rank, pivot_row);
        b.swap_rows(rank, pivot_row);
        for r in (rank + 1)..m {
            let f = a[(r, col)] / a[(rank, col)];
            if f != 0.0 {
                for c in col..n {
                    a[(r, c)] -= f * a[(rank, c)];
                }
                b[r] -= f * b[rank];
            }
        }
        rank += 1;
    }
    let b_scale = beq.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for r in rank..m {
        if b[r].abs() > 1e-8 * b_scale {
            return None;
        }
    }
    Some((a.rows(0, rank).into_owned(), b.rows(0, rank).into_owned()))
}

/// Null-space basis of `a` (columns span {z : a·z = 0}), via Gaussian
/// elimination. Deterministic; an empty basis is returned as a 0-column
/// matrix.
fn null_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 {
        return DMatrix::identity(n, n);
    }
    let mut r = a.clone();
    let scale = r.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    let tol = PIVOT_TOL * scale;
    let mut pivots: Vec<(usize, usize)> = Vec::new(); // (row, col)
    let mut row = 0;
    for col in 0..n {
        if row == m {
            break;
        }
        let (pr, pv) = (row..m)
            .map(|rr| (rr, r[(rr, col)].abs()))
            .fold((row, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pv <= tol {
            continue;
        }
        r.swap_rows(row, pr);
        let piv = r[(row, col)];
        for rr in 0..m {
            if rr != row {
                let f = r[(rr, col)] / piv;
                if f != 0.0 {
                    for cc in col..n {
                        r[(rr, cc)] -= f * r[(row, cc)];
                    }
                }
            }
        }
        pivots.push((row, col));
        row += 1;
    }
    let pivot_cols: Vec<usize> = pivots.iter().map(|&(_, c)| c).collect();
    let free_cols: Vec<usize> = (0..n).filter(|c| !pivot_cols.contains(c)).collect();
    let mut z = DMatrix::zeros(n, free_cols.len());
    for (k, &fc) in free_cols.iter().enumerate() {
        z[(fc, k)] = 1.0;
        for &(pr, pc) in &pivots {
            z[(pc, k)] = -r[(pr, fc)] / r[(pr, pc)];
        }
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pin {
    Lower,
    Upper,
}

enum CoreOutcome {
    Optimal(DVector<f64>),
    IterationLimit(DVector<f64>),
    Unbounded,
}

/// Primal active-set minimization of `½xᵀHx + gᵀx` over `Ax = b, l ≤ x ≤ u`,
/// starting from a feasible `x0`.
fn active_set_core(int: &Internal, x0: DVector<f64>) -> CoreOutcome {
    let n = x0.len();
    let mut x = x0;
    let mut pins: Vec<Option<Pin>> = vec![None; n];
    for i in 0..n {
        let span = 1.0 + x[i].abs();
        if int.lower[i].is_finite() && x[i] - int.lower[i] <= ACTIVE_TOL * span {
            x[i] = int.lower[i];
            pins[i] = Some(Pin::Lower);
        } else if int.upper[i].is_finite() && int.upper[i] - x[i] <= ACTIVE_TOL * span {
            x[i] = int.upper[i];
            pins[i] = Some(Pin::Upper);
        }
        // Equal bounds pin permanently at the lower side.
        if int.lower[i] == int.upper[i] {
            pins[i] = Some(Pin::Lower);
        }
    }
    let cap = 100 + 20 * n;
    for _ in 0..cap {
        let free: Vec<usize> = (0..n).filter(|&i| pins[i].is_none()).collect();
        let grad = &int.h * &x + &int.g;
        // Direction in the free variables, zero elsewhere.
        let (p, is_ray) = if free.is_empty() {
            (DVector::zeros(n), false)
        } else {
            let a_f = int.aeq.select_columns(free.iter());
            let z = null_basis(&a_f);
            if z.ncols() == 0 {
                (DVector::zeros(n), false)
            } else {
                let h_ff = int.h.select_columns(free.iter()).select_rows(free.iter());
                let g_f = DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
                let hz = z.transpose() * &h_ff * &z;
                let gz = z.transpose() * &g_f;
                let svd = hz.clone().svd(true, true);
                let zsol = svd.solve(&(-&gz), 1e-12).expect("svd solve");
                let rho = &hz * &zsol + &gz;
                let gz_scale = 1.0 + gz.amax();
                let (dir_z, ray) = if rho.amax() > 1e-9 * gz_scale {
                    (-rho, true)
                } else {
                    (zsol, false)
                };
                let p_f = &z * dir_z;
                let mut p = DVector::zeros(n);
                for (k, &i) in free.iter().enumerate() {
                    p[i] = p_f[k];
                }
                (p, ray)
            }
        };

        let x_scale = 1.0 + x.amax();
        if !is_ray && p.amax() <= STEP_TOL * x_scale {
            // Stationary on the current working set: check bound multipliers.
            let pinned: Vec<usize> = (0..n).filter(|&i| pins[i].is_some()).collect();
            let release = {
                let m_eq = int.aeq.nrows();
                let c = if m_eq + pinned.len() == 0 {
                    DVector::zeros(0)
                } else {
                    let mut m = DMatrix::zeros(n, m_eq + pinned.len());
                    m.view_mut((0, 0), (n, m_eq))
                        .copy_from(&int.aeq.transpose());
                    for (k, &i) in pinned.iter().enumerate() {
                        m[(i, m_eq + k)] = 1.0;
                    }
                    let svd = m.svd(true, true);
                    svd.solve(&grad, 1e-12).expect("svd solve")
                };
                let g_scale = 1.0 + grad.amax();
                let mut candidate = None;
                for (k, &i) in pinned.iter().enumerate() {
                    if int.lower[i] == int.upper[i] {
                        continue;
                    }
                    let lam = c[m_eq + k];
                    let viol = match pins[i].unwrap() {
                        Pin::Lower => -lam,
                        Pin::Upper => lam,
                    };
                    if viol > MULT_TOL * g_scale {
                        candidate = Some(i);
                        break; // smallest index first
                    }
                }
                candidate
            };
            match release {
                Some(i) => {
                    pins[i] = None;
                    continue;
                }
                None => return CoreOutcome::Optimal(x),
            }
        }

        // Ratio test toward the nearest bound.
        let mut alpha_max = f64::INFINITY;
        let mut blocking: Option<(usize, Pin)> = None;
        for i in 0..n {
            if p[i] > STEP_TOL && int.upper[i].is_finite() {
                let a = ((int.upper[i] - x[i]) / p[i]).max(0.0);
                if a < alpha_max - 1e-12 * (1.0 + alpha_max.min(1e12)) {
                    alpha_max = a;
                    blocking = Some((i, Pin::Upper));
                }
            } else if p[i] < -STEP_TOL && int.lower[i].is_finite() {
                let a = ((int.lower[i] - x[i]) / p[i]).max(0.0);
                if a < alpha_max - 1e-12 * (1.0 + alpha_max.min(1e12)) {
                    alpha_max = a;
                    blocking = Some((i, Pin::Lower));
                }
            }
        }
        let alpha = if is_ray {
            if !alpha_max.is_finite() {
                return CoreOutcome::Unbounded;
            }
            alpha_max
        } else {
            alpha_max.min(1.0)
        };
        x.axpy(alpha, &p, 1.0);
        if let Some((i, side)) = blocking {
            if alpha == alpha_max {
                x[i] = match side {
                    Pin::Lower => int.lower[i],
                    Pin::Upper => int.upper[i],
                };
                pins[i] = Some(side);
            }
        }
    }
    CoreOutcome::IterationLimit(x)
}

/// Least-norm correction of `center` onto `{x : aeq x = beq}`.
fn project_onto_equalities(
    aeq: &DMatrix<f64>,
    beq: &DVector<f64>,
    center: &DVector<f64>,
) -> DVector<f64> {
    if aeq.nrows() == 0 {
        return center.clone();
    }
    let defect = beq - aeq * center;
    let svd = aeq.clone().svd(true, true);
    let delta = svd.solve(&defect, 1e-12).expect("svd solve");
    center + delta
}

fn within_bounds(x: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>, tol: f64) -> bool {
    x.iter()
        .enumerate()
        .all(|(i, &v)| v >= lower[i] - tol && v <= upper[i] + tol)
}

fn clamp(x: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].max(lower[i]).min(upper[i]);
    }
}

/// Feasible starting point, via an artificial-variable phase when a direct
/// projection lands outside the box. Returns `None` when infeasible.
fn phase_one(int: &Internal) -> Option<DVector<f64>> {
    let n = int.g.len();
    let center = DVector::from_iterator(
        n,
        (0..n).map(|i| match (int.lower[i].is_finite(), int.upper[i].is_finite()) {
            (true, true) => 0.5 * (int.lower[i] + int.upper[i]),
            (true, false) => int.lower[i],
            (false, true) => int.upper[i],
            (false, false) => 0.0,
        }),
    );
    let x0 = project_onto_equalities(&int.aeq, &int.beq, &center);
    let scale = 1.0 + x0.amax();
    if within_bounds(&x0, &int.lower, &int.upper, 1e-9 * scale) {
        let mut x0 = x0;
        clamp(&mut x0, &int.lower, &int.upper);
        return Some(x0);
    }
    // Artificial variable τ with A x + r₀ τ = b; start from the clamped
    // projection at τ = 1 and minimize τ².
    let mut xc = x0;
    clamp(&mut xc, &int.lower, &int.upper);
    let r0 = &int.beq - &int.aeq * &xc;
    let m = int.aeq.nrows();
    let mut aeq = DMatrix::zeros(m, n + 1);
    aeq.view_mut((0, 0), (m, n)).copy_from(&int.aeq);
    for r in 0..m {
        aeq[(r, n)] = r0[r];
    }
    let mut h = DMatrix::zeros(n + 1, n + 1);
    h[(n, n)] = 2.0;
    let mut lower = DVector::zeros(n + 1);
    let mut upper = DVector::zeros(n + 1);
    lower.rows_mut(0, n).copy_from(&int.lower);
    upper.rows_mut(0, n).copy_from(&int.upper);
    lower[n] = 0.0;
    upper[n] = 1.0;
    let aux = Internal {
        h,
        g: DVector::zeros(n + 1),
        aeq,
        beq: int.beq.clone(),
        lower,
        upper,
        n_orig: n,
    };
    let mut start = DVector::zeros(n + 1);
    start.rows_mut(0, n).copy_from(&xc);
    start[n] = 1.0;
    let x = match active_set_core(&aux, start) {
        CoreOutcome::Optimal(x) | CoreOutcome::IterationLimit(x) => x,
        CoreOutcome::Unbounded => return None,
    };
    if x[n].abs() > 1e-7 {
        return None;
    }
    let mut out = x.rows(0, n).into_owned();
    clamp(&mut out, &int.lower, &int.upper);
    Some(project_onto_equalities(&int.aeq, &int.beq, &out))
}

/// Solve the subproblem. `Optimal` certifies primal feasibility and a KKT
/// residual within [`SOLVER_TOL`].
pub fn solve(p: &ConvexProgram) -> Result<SolveResult, ProgramError> {
    p.validate()?;
    let mut int = internalize(p);
    let presolved = presolve_equalities(&int.aeq, &int.beq);
    let (aeq, beq) = match presolved {
        Some(ab) => ab,
        None => {
            return Ok(SolveResult {
                solution: DVector::zeros(p.variable_count()),
                objective_value: f64::INFINITY,
                kkt_residual: f64::INFINITY,
                status: SolveStatus::Infeasible,
            })
        }
    };
    int.aeq = aeq;
    int.beq = beq;
    let x0 = match phase_one(&int) {
        Some(x0) => x0,
        None => {
            return Ok(SolveResult {
                solution: DVector::zeros(p.variable_count()),
                objective_value: f64::INFINITY,
                kkt_residual: f64::INFINITY,
                status: SolveStatus::Infeasible,
            })
        }
    };
    let (x_ext, core_optimal) = match active_set_core(&int, x0) {
        CoreOutcome::Optimal(x) => (x, true),
        CoreOutcome::IterationLimit(x) => (x, false),
        CoreOutcome::Unbounded => {
            // Cannot happen for the weighted objectives (both are bounded
            // below); treated as a numerical failure.
            return Ok(SolveResult {
                solution: DVector::zeros(p.variable_count()),
                objective_value: f64::NEG_INFINITY,
                kkt_residual: f64::INFINITY,
                status: SolveStatus::IterationLimit,
            });
        }
    };
    let solution = x_ext.rows(0, int.n_orig).into_owned();
    let kkt = verify_kkt(p, &solution);
    let status = if core_optimal && kkt <= SOLVER_TOL {
        SolveStatus::Optimal
    } else {
        SolveStatus::IterationLimit
    };
    Ok(SolveResult {
        objective_value: p.objective_value(&solution),
        solution,
        kkt_residual: kkt,
        status,
    })
}

/// Max-norm KKT residual of `x` for program `p`: equality and bound
/// feasibility, stationarity with multipliers fitted by least squares,
/// and sign violations of active-bound multipliers.
pub fn verify_kkt(p: &ConvexProgram, x: &DVector<f64>) -> f64 {
    let int = internalize(p);
    let n_ext = int.g.len();
    // Lift x into the extended variables for the absolute objective.
    let x_ext = if n_ext == x.len() {
        x.clone()
    } else {
        let eps = &p.residual_matrix * x - &p.residual_offset;
        let ne = eps.len();
        let mut xe = DVector::zeros(n_ext);
        xe.rows_mut(0, x.len()).copy_from(x);
        for i in 0..ne {
            xe[x.len() + i] = eps[i].max(0.0);
            xe[x.len() + ne + i] = (-eps[i]).max(0.0);
        }
        xe
    };
    let mut worst: f64 = 0.0;
    if int.aeq.nrows() > 0 {
        let defect = &int.aeq * &x_ext - &int.beq;
        worst = worst.max(defect.amax());
    }
    for i in 0..n_ext {
        worst = worst.max(int.lower[i] - x_ext[i]).max(x_ext[i] - int.upper[i]);
    }
    let grad = &int.h * &x_ext + &int.g;
    let active: Vec<(usize, Pin)> = (0..n_ext)
        .filter_map(|i| {
            let span = 1.0 + x_ext[i].abs();
            if int.lower[i].is_finite() && (x_ext[i] - int.lower[i]).abs() <= ACTIVE_TOL * span {
                Some((i, Pin::Lower))
            } else if int.upper[i].is_finite()
                && (int.upper[i] - x_ext[i]).abs() <= ACTIVE_TOL * span
            {
                Some((i, Pin::Upper))
            } else {
                None
            }
        })
        .collect();
    let m_eq = int.aeq.nrows();
    let c = if m_eq + active.len() == 0 {
        DVector::zeros(0)
    } else {
        let mut m = DMatrix::zeros(n_ext, m_eq + active.len());
        if m_eq > 0 {
            m.view_mut((0, 0), (n_ext, m_eq))
                .copy_from(&int.aeq.transpose());
        }
        for (k, &(i, _)) in active.iter().enumerate() {
            m[(i, m_eq + k)] = 1.0;
        }
        let svd = m.svd(true, true);
        svd.solve(&grad, 1e-12).expect("svd solve")
    };
    let stationarity = &grad - internal_mul(&int, &active, &c, n_ext, m_eq);
    worst = worst.max(stationarity.amax());
    for (k, &(i, side)) in active.iter().enumerate() {
        if int.lower[i] == int.upper[i] {
            continue;
        }
        let lam = c[m_eq + k];
        let viol = match side {
            Pin::Lower => -lam,
            Pin::Upper => lam,
        };
        worst = worst.max(viol);
    }
    worst
}

fn internal_mul(
    int: &Internal,
    active: &[(usize, Pin)],
    c: &DVector<f64>,
    n_ext: usize,
    m_eq: usize,
) -> DVector<f64> {
    let mut out = DVector::zeros(n_ext);
    if m_eq > 0 {
        out += int.aeq.transpose() * c.rows(0, m_eq);
    }
    for (k, &(i, _)) in active.iter().enumerate() {
        out[i] += c[m_eq + k];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unconstrained(kind: ObjectiveKind, rows: Vec<(Vec<f64>, f64, f64)>, n: usize) -> ConvexProgram {
        let ne = rows.len();
        let mut a = DMatrix::zeros(ne, n);
        let mut b = DVector::zeros(ne);
        let mut w = DVector::zeros(ne);
        for (i, (row, off, weight)) in rows.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                a[(i, j)] = v;
            }
            b[i] = off;
            w[i] = weight;
        }
        ConvexProgram {
            objective: kind,
            residual_matrix: a,
            residual_offset: b,
            weights: w,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    #[test]
    fn unconstrained_scalar() {
        // minimize (x - 1)^2
        let p = unconstrained(
            ObjectiveKind::WeightedLeastSquares,
            vec![(vec![1.0], 1.0, 1.0)],
            1,
        );
        let r = solve(&p).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_relative_eq!(r.solution[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn weighted_mean_closed_form() {
        // minimize (x-3)^2 + 0.1 (x-5)^2 -> x = 35/11
        let p = unconstrained(
            ObjectiveKind::WeightedLeastSquares,
            vec![(vec![1.0], 3.0, 1.0), (vec![1.0], 5.0, 0.1)],
            1,
        );
        let r = solve(&p).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_relative_eq!(r.solution[0], 35.0 / 11.0, epsilon = 1e-9);
        assert!(r.kkt_residual <= SOLVER_TOL);
    }

    #[test]
    fn three_node_subproblem_matches_elimination() {
        // min (c23 + q23 + c34 + q34 - dh)^2 s.t. q23 - q34 = 200.
        // Substituting q23 = q34 + 200 gives the scalar optimum
        // q34 = (dh - c23 - c34 - 200) / 2.
        let (c23, c34, dh) = (-57.0, -31.5, 87.77);
        let mut p = unconstrained(
            ObjectiveKind::WeightedLeastSquares,
            vec![(vec![1.0, 1.0], dh - c23 - c34, 1.0)],
            2,
        );
        p.eq_matrix = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        p.eq_rhs = DVector::from_element(1, 200.0);
        let r = solve(&p).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        let q34 = (dh - c23 - c34 - 200.0) / 2.0;
        assert_relative_eq!(r.solution[1], q34, epsilon = 1e-9);
        assert_relative_eq!(r.solution[0], q34 + 200.0, epsilon = 1e-9);
    }

    #[test]
    fn active_bound_pins_solution() {
        // minimize (x - 5)^2 with x <= 2
        let mut p = unconstrained(
            ObjectiveKind::WeightedLeastSquares,
            vec![(vec![1.0], 5.0, 1.0)],
            1,
        );
        p.upper[0] = 2.0;
        let r = solve(&p).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_relative_eq!(r.solution[0], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn absolute_objective_median_like() {
        // minimize |x - 1| + |x - 2| + |x - 10|: any x in [1,10] that hits
        // the median 2.
        let p = unconstrained(
            ObjectiveKind::WeightedAbsolute,
            vec![
                (vec![1.0], 1.0, 1.0),
                (vec![1.0], 2.0, 1.0),
                (vec![1.0], 10.0, 1.0),
            ],
            1,
        );
        let r = solve(&p).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_relative_eq!(r.solution[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(r.objective_value, 9.0, epsilon = 1e-8);
    }

    #[test]
    fn inconsistent_equalities_reported_infeasible() {
        let mut p = unconstrained(
            ObjectiveKind::WeightedLeastSquares,
            vec![(vec![1.0, 0.0], 0.0, 1.0)],
            2,
        );
        p.eq_matrix = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        p.eq_rhs = DVector::from_row_slice(&[1.0, 3.0]);
        let r = solve(&p).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
    }

    #[test]
    fn bound_box_infeasible_with_equalities() {
        // x + y = 10 with x,y in [0,1] has no feasible point.
        let mut p = unconstrained(
            ObjectiveKind::WeightedLeastSquares,
            vec![(vec![1.0, 0.0], 0.0, 1.0)],
            2,
        );
        p.eq_matrix = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.eq_rhs = DVector::from_element(1, 10.0);
        p.lower = DVector::from_element(2, 0.0);
        p.upper = DVector::from_element(2, 1.0);
        let r = solve(&p).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
    }

    #[test]
    fn redundant_rows_are_dropped() {
        let mut p = unconstrained(
            ObjectiveKind::WeightedLeastSquares,
            vec![(vec![1.0, 1.0], 4.0, 1.0)],
            2,
        );
        p.eq_matrix = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 2.0, -2.0]);
        p.eq_rhs = DVector::from_row_slice(&[1.0, 2.0]);
        let r = solve(&p).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_relative_eq!(r.solution[0] - r.solution[1], 1.0, epsilon = 1e-9);
        assert_relative_eq!(r.solution[0] + r.solution[1], 4.0, epsilon = 1e-9);
    }

    #[test]
    fn kkt_detects_perturbation() {
        let p = unconstrained(
            ObjectiveKind::WeightedLeastSquares,
            vec![(vec![1.0], 3.0, 1.0), (vec![1.0], 5.0, 0.1)],
            1,
        );
        let r = solve(&p).unwrap();
        assert!(verify_kkt(&p, &r.solution) <= SOLVER_TOL);
        let mut bad = r.solution.clone();
        bad[0] += 1e-2;
        assert!(verify_kkt(&p, &bad) > 1e-4);
    }

    #[test]
    fn kkt_feasibility_term_dominates() {
        let mut p = unconstrained(
            ObjectiveKind::WeightedLeastSquares,
            vec![(vec![1.0, 1.0], 0.0, 1.0)],
            2,
        );
        p.eq_matrix = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        p.eq_rhs = DVector::from_element(1, 0.0);
        let x = DVector::from_row_slice(&[1.0, 0.0]); // violates equality by 1
        assert!(verify_kkt(&p, &x) >= 1.0 - 1e-12);
    }

    #[test]
    fn weight_scaling_leaves_argmin() {
        let mut p = unconstrained(
            ObjectiveKind::WeightedLeastSquares,
            vec![(vec![1.0, 0.3], 3.0, 1.0), (vec![0.2, 1.0], 5.0, 0.1)],
            2,
        );
        p.eq_matrix = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.eq_rhs = DVector::from_element(1, 4.0);
        let r1 = solve(&p).unwrap();
        p.weights *= 137.0;
        let r2 = solve(&p).unwrap();
        assert!((r1.solution - r2.solution).amax() <= 1e-8);
    }
}
