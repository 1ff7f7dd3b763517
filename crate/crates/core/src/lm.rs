//! Levenberg–Marquardt for small dense problems with box projection.
//!
//! Problems are stated in an unconstrained internal parameterization `z`;
//! [`LeastSquares::project`] lets a problem clip `z` back into its feasible set
//! after every trial step. Only steps that strictly lower the cost are
//! accepted, so the returned cost never exceeds the starting cost.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub trait LeastSquares {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;

    /// Residual vector at `z`. Fails on non-finite model output.
    fn residuals(&self, z: &[f64], out: &mut [f64]) -> Result<()>;

    /// Residuals and the `n_residuals × n_params` Jacobian at `z`.
    fn residuals_and_jacobian(&self, z: &[f64], out: &mut [f64], jac: &mut DMatrix<f64>) -> Result<()>;

    fn project(&self, _z: &mut [f64]) {}
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Converged once the largest internal-parameter step falls below this.
    pub step_tol: f64,
    /// Converged once the cost falls to or below this.
    pub cost_floor: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            step_tol: 1e-6,
            cost_floor: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub z: Vec<f64>,
    /// Sum of squared residuals.
    pub cost: f64,
    pub initial_cost: f64,
    /// Number of Jacobian evaluations.
    pub iterations: usize,
    pub converged: bool,
}

const MAX_DAMPING: f64 = 1e16;

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn check_finite(r: &[f64]) -> Result<()> {
    if r.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite residual".into()))
    }
}

pub fn minimize<P: LeastSquares + ?Sized>(problem: &P, z0: &[f64], opts: LmOptions) -> Result<LmReport> {
    let np = problem.n_params();
    let nr = problem.n_residuals();
    let mut z = z0.to_vec();
    problem.project(&mut z);

    let mut r = vec![0.0; nr];
    let mut jac = DMatrix::<f64>::zeros(nr, np);
    problem.residuals_and_jacobian(&z, &mut r, &mut jac)?;
    check_finite(&r)?;
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite Jacobian".into()));
    }
    let mut cost = sum_sq(&r);
    let initial_cost = cost;

    let mut trial_z = vec![0.0; np];
    let mut trial_r = vec![0.0; nr];
    let mut mu: Option<f64> = None;
    let mut iterations = 1;
    let mut converged = false;

    loop {
        if cost <= opts.cost_floor {
            converged = true;
            break;
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let grad = &jt * DVector::from_column_slice(&r);
        let max_diag = (0..np).map(|k| jtj[(k, k)]).fold(0.0f64, f64::max);
        if max_diag == 0.0 || grad.amax() <= 1e-300 {
            converged = true;
            break;
        }
        let damping = mu.get_or_insert(1e-3);

        let mut accepted = false;
        let mut last_step = f64::INFINITY;
        while *damping < MAX_DAMPING {
            let mut a = jtj.clone();
            for k in 0..np {
                a[(k, k)] += *damping * jtj[(k, k)].max(1e-12 * max_diag);
            }
            let Some(chol) = a.cholesky() else {
                *damping *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-&grad));
            for k in 0..np {
                trial_z[k] = z[k] + delta[k];
            }
            problem.project(&mut trial_z);
            last_step = (0..np)
                .map(|k| (trial_z[k] - z[k]).abs())
                .fold(0.0, f64::max);
            if last_step == 0.0 {
                break;
            }
            let trial_cost = match problem.residuals(&trial_z, &mut trial_r).and_then(|_| check_finite(&trial_r)) {
                Ok(()) => sum_sq(&trial_r),
                Err(_) => f64::INFINITY,
            };
            if trial_cost < cost {
                z.copy_from_slice(&trial_z);
                cost = trial_cost;
                *damping = (*damping / 3.0).max(1e-12);
                accepted = true;
                break;
            }
            *damping *= 4.0;
            if last_step < 1e-3 * opts.step_tol {
                break;
            }
        }

        if !accepted {
            // No descent direction left at any damping: a stationary point.
            converged = last_step < opts.step_tol || *damping >= MAX_DAMPING;
            break;
        }
        if last_step < opts.step_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        problem.residuals_and_jacobian(&z, &mut r, &mut jac)?;
        check_finite(&r)?;
        iterations += 1;
    }

    Ok(LmReport {
        z,
        cost,
        initial_cost,
        iterations,
        converged,
    })
}
