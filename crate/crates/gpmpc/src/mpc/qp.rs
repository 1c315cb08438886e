//! Condensing of the linearized tracking problem and a dense primal
//! active-set solver for the resulting box-constrained QP.
//!
//! After eliminating the state increments through the dynamics
//! sensitivities, each control step reduces to
//! `min 1/2 du' H du + g' du` over the stacked input increments with
//! elementwise bounds. The active-set solver maintains a feasible
//! iterate, factors the free-variable block of H, and adds or releases
//! one bound per iteration until the projected-gradient residual drops
//! below the requested tolerance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `min 1/2 x' H x + g' x  s.t.  lb <= x <= ub` with H symmetric
/// positive definite.
#[derive(Debug, Clone)]
pub struct BoxQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Infinity norm of the projected gradient at the returned point.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Projected-gradient residual `|x - clamp(x - grad, lb, ub)|_inf`;
/// zero exactly at a KKT point.
pub fn projected_gradient_norm(qp: &BoxQp, x: &DVector<f64>) -> f64 {
    let grad = &qp.h * x + &qp.g;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let stepped = (x[i] - grad[i]).clamp(qp.lb[i], qp.ub[i]);
        worst = worst.max((x[i] - stepped).abs());
    }
    worst
}

#[derive(Clone, Copy, PartialEq)]
enum BoundState {
    Free,
    Lower,
    Upper,
}

/// Solve the box QP starting from `x0` (clamped into the box).
///
/// Returns a feasible point whose projected-gradient residual is at
/// most `kkt_tol`, or the best feasible iterate with `converged =
/// false` if the iteration cap is hit first. An indefinite reduced
/// Hessian is a hard error.
pub fn solve_box_qp(
    qp: &BoxQp,
    x0: &DVector<f64>,
    kkt_tol: f64,
    max_iters: usize,
) -> Result<QpSolution> {
    let n = qp.g.len();
    let mut x = x0.clone();
    let mut state = vec![BoundState::Free; n];
    for i in 0..n {
        if x[i] <= qp.lb[i] {
            x[i] = qp.lb[i];
            state[i] = BoundState::Lower;
        } else if x[i] >= qp.ub[i] {
            x[i] = qp.ub[i];
            state[i] = BoundState::Upper;
        }
    }

    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == BoundState::Free).collect();

        // Minimizer over the free block with bound variables fixed.
        let target = if free.is_empty() {
            DVector::zeros(0)
        } else {
            let nf = free.len();
            let mut hff = DMatrix::zeros(nf, nf);
            let mut rhs = DVector::zeros(nf);
            for (a, &i) in free.iter().enumerate() {
                rhs[a] = -qp.g[i];
                for (b, &j) in free.iter().enumerate() {
                    hff[(a, b)] = qp.h[(i, j)];
                }
                for j in 0..n {
                    if state[j] != BoundState::Free {
                        rhs[a] -= qp.h[(i, j)] * x[j];
                    }
                }
            }
            let chol = nalgebra::linalg::Cholesky::new(hff).ok_or_else(|| {
                Error::Solver("reduced Hessian is not positive definite".into())
            })?;
            chol.solve(&rhs)
        };

        // Longest feasible step toward the free-block minimizer.
        let mut alpha = 1.0;
        let mut blocking: Option<(usize, BoundState)> = None;
        for (a, &i) in free.iter().enumerate() {
            let d = target[a] - x[i];
            if d > 0.0 && x[i] + d > qp.ub[i] {
                let step = (qp.ub[i] - x[i]) / d;
                if step < alpha {
                    alpha = step;
                    blocking = Some((i, BoundState::Upper));
                }
            } else if d < 0.0 && x[i] + d < qp.lb[i] {
                let step = (qp.lb[i] - x[i]) / d;
                if step < alpha {
                    alpha = step;
                    blocking = Some((i, BoundState::Lower));
                }
            }
        }

        match blocking {
            Some((idx, side)) => {
                for (a, &i) in free.iter().enumerate() {
                    x[i] += alpha * (target[a] - x[i]);
                }
                x[idx] = match side {
                    BoundState::Upper => qp.ub[idx],
                    BoundState::Lower => qp.lb[idx],
                    BoundState::Free => unreachable!(),
                };
                state[idx] = side;
            }
            None => {
                for (a, &i) in free.iter().enumerate() {
                    x[i] = target[a];
                }
                // Dual feasibility at the active bounds; release the
                // single worst violator.
                let grad = &qp.h * &x + &qp.g;
                let mut release: Option<(usize, f64)> = None;
                for i in 0..n {
                    let violation = match state[i] {
                        BoundState::Lower => -grad[i],
                        BoundState::Upper => grad[i],
                        BoundState::Free => continue,
                    };
                    if violation > kkt_tol {
                        match release {
                            Some((_, worst)) if violation <= worst => {}
                            _ => release = Some((i, violation)),
                        }
                    }
                }
                match release {
                    Some((idx, _)) => state[idx] = BoundState::Free,
                    None => {
                        let kkt_residual = projected_gradient_norm(qp, &x);
                        return Ok(QpSolution {
                            x,
                            kkt_residual,
                            iterations,
                            converged: kkt_residual <= kkt_tol,
                        });
                    }
                }
            }
        }
    }

    let kkt_residual = projected_gradient_norm(qp, &x);
    Ok(QpSolution {
        x,
        kkt_residual,
        iterations,
        converged: false,
    })
}

/// Linearization of one horizon: dynamics sensitivities per interval,
/// diagonal cost weights, tracking errors at the current iterate, and
/// bounds expressed as increments around the current inputs.
#[derive(Debug, Clone)]
pub struct LinearizedProblem {
    /// State sensitivity per interval, `nx x nx`, length N.
    pub a: Vec<DMatrix<f64>>,
    /// Input sensitivity per interval, `nx x nu`, length N.
    pub b: Vec<DMatrix<f64>>,
    /// Diagonal stage state weights, length nx.
    pub q: DVector<f64>,
    /// Diagonal terminal state weights, length nx.
    pub q_terminal: DVector<f64>,
    /// Diagonal input weights, length nu.
    pub r: DVector<f64>,
    /// Tracking errors `x_k - x*_k` at the iterate, length N+1.
    pub state_error: Vec<DVector<f64>>,
    /// Input errors `u_k - u*_k`, length N.
    pub input_error: Vec<DVector<f64>>,
    /// Increment bounds per interval (absolute bound minus current
    /// input), length N each.
    pub lb: Vec<DVector<f64>>,
    pub ub: Vec<DVector<f64>>,
}

impl LinearizedProblem {
    pub fn nodes(&self) -> usize {
        self.a.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.r.len()
    }
}

/// Eliminate the state increments and assemble the dense box QP over
/// the stacked input increments.
pub fn condense(lp: &LinearizedProblem) -> BoxQp {
    let n = lp.nodes();
    let nx = lp.q.len();
    let nu = lp.num_inputs();
    let nv = n * nu;

    let mut h = DMatrix::<f64>::zeros(nv, nv);
    let mut g = DVector::<f64>::zeros(nv);
    let mut lb = DVector::<f64>::zeros(nv);
    let mut ub = DVector::<f64>::zeros(nv);

    // e maps stacked input increments to the state increment at the
    // current node; starts at zero because the initial state is fixed.
    let mut e = DMatrix::<f64>::zeros(nx, nv);
    for k in 0..=n {
        let w = if k == n { &lp.q_terminal } else { &lp.q };
        if k > 0 {
            // H += E' diag(w) E, g += E' (w .* ex_k)
            let mut we = e.clone();
            for (r, wr) in w.iter().enumerate() {
                if *wr != 0.0 {
                    we.row_mut(r).scale_mut(*wr);
                } else {
                    we.row_mut(r).fill(0.0);
                }
            }
            h += e.transpose() * &we * 2.0;
            g += e.transpose() * w.component_mul(&lp.state_error[k]) * 2.0;
        }
        if k < n {
            let block = k * nu;
            for i in 0..nu {
                h[(block + i, block + i)] += 2.0 * lp.r[i];
                g[block + i] += 2.0 * lp.r[i] * lp.input_error[k][i];
                lb[block + i] = lp.lb[k][i];
                ub[block + i] = lp.ub[k][i];
            }
            // Advance the sensitivity: E_{k+1} = A_k E_k + B_k at block k.
            e = &lp.a[k] * e;
            e.view_mut((0, block), (nx, nu)).add_assign_view(&lp.b[k]);
        }
    }

    BoxQp { h, g, lb, ub }
}

trait AddAssignView {
    fn add_assign_view(&mut self, other: &DMatrix<f64>);
}

impl AddAssignView for nalgebra::DMatrixViewMut<'_, f64> {
    fn add_assign_view(&mut self, other: &DMatrix<f64>) {
        for j in 0..other.ncols() {
            for i in 0..other.nrows() {
                self[(i, j)] += other[(i, j)];
            }
        }
    }
}

/// Condense and solve one linearized horizon. Returns the per-interval
/// input increments and the QP diagnostics.
pub fn condense_and_solve_qp(
    lp: &LinearizedProblem,
    kkt_tol: f64,
    max_iters: usize,
) -> Result<(Vec<DVector<f64>>, QpSolution)> {
    let qp = condense(lp);
    let x0 = DVector::zeros(qp.g.len());
    let sol = solve_box_qp(&qp, &x0, kkt_tol, max_iters)?;
    let nu = lp.num_inputs();
    let increments = (0..lp.nodes())
        .map(|k| sol.x.rows(k * nu, nu).into_owned())
        .collect();
    Ok((increments, sol))
}
