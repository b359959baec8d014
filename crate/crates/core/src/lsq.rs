//! Damped Gauss-Newton (Levenberg-Marquardt) least squares.
//!
//! The damping term is scaled by the diagonal of the normal matrix
//! (Marquardt scaling). Damping starts at `1e-3`, is multiplied by ten on a
//! rejected step and divided by ten on an accepted step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A weighted nonlinear least-squares problem. Residuals are expected to be
/// already divided by their uncertainties.
pub trait Problem {
    fn n_params(&self) -> usize;

    fn residuals(&self, params: &[f64]) -> Vec<f64>;

    /// Jacobian of the residual vector (rows = residuals, cols = params).
    /// Defaults to central finite differences.
    fn jacobian(&self, params: &[f64]) -> DMatrix<f64> {
        finite_difference_jacobian(|p| self.residuals(p), params)
    }
}

pub fn finite_difference_jacobian<F>(f: F, params: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = params.len();
    let base = f(params);
    let mut jac = DMatrix::zeros(base.len(), n);
    let mut p = params.to_vec();
    for j in 0..n {
        let h = 1e-6 * params[j].abs().max(1e-3);
        p[j] = params[j] + h;
        let plus = f(&p);
        p[j] = params[j] - h;
        let minus = f(&p);
        p[j] = params[j];
        for i in 0..base.len() {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    jac
}

#[derive(Debug, Clone, Copy)]
pub struct LevenbergMarquardt {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Relative cost decrease below which an accepted step counts as converged.
    pub cost_tolerance: f64,
    /// Relative step size below which the iteration counts as converged.
    pub step_tolerance: f64,
}

impl Default for LevenbergMarquardt {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            initial_damping: 1e-3,
            cost_tolerance: 1e-15,
            step_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub params: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Sum of squared (weighted) residuals.
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    /// J^T J at the optimum.
    pub normal_matrix: DMatrix<f64>,
    pub condition_number: f64,
}

impl Report {
    /// Inverse of the normal matrix, scaled by the reduced chi-square when
    /// `scale_by_chi2` is set. `None` when the normal matrix is singular.
    pub fn covariance(&self, scale_by_chi2: bool) -> Option<DMatrix<f64>> {
        if !all_finite(&self.normal_matrix) {
            return None;
        }
        let n = self.params.len();
        let dof = self.residuals.len().saturating_sub(n).max(1) as f64;
        let svd = self.normal_matrix.clone().svd(true, true);
        let smax = svd.singular_values.max();
        if smax <= 0.0 || svd.singular_values.min() <= smax * 1e-15 {
            return None;
        }
        let inv = svd.pseudo_inverse(0.0).ok()?;
        Some(if scale_by_chi2 { inv * (self.cost / dof) } else { inv })
    }
}

/// nalgebra's SVD does not terminate on non-finite input.
pub(crate) fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

impl LevenbergMarquardt {
    pub fn minimize<P: Problem + ?Sized>(&self, problem: &P, initial: &[f64]) -> Result<Report> {
        let n = problem.n_params();
        if initial.len() != n {
            return Err(Error::InvalidParameter(format!(
                "expected {n} initial parameters, got {}",
                initial.len()
            )));
        }
        let mut x = initial.to_vec();
        let mut r = problem.residuals(&x);
        if r.len() < n {
            return Err(Error::FitDegenerate(format!(
                "{} residuals for {n} parameters",
                r.len()
            )));
        }
        let mut cost = sum_sq(&r);
        if !cost.is_finite() {
            return Err(Error::InvalidParameter("non-finite initial cost".into()));
        }
        let initial_cost = cost;
        let mut mu = self.initial_damping;
        let mut jac = problem.jacobian(&x);
        let mut converged = false;
        let mut iterations = 0;

        while iterations < self.max_iterations {
            iterations += 1;
            let jt = jac.transpose();
            let a = &jt * &jac;
            let g = &jt * DVector::from_column_slice(&r);
            let diag_max = a.diagonal().max();
            if diag_max <= 0.0 || !all_finite(&a) {
                return Err(Error::FitDegenerate("zero or non-finite Jacobian".into()));
            }
            if g.norm() == 0.0 {
                converged = true;
                break;
            }
            let mut accepted = false;
            while mu < 1e16 {
                let mut damped = a.clone();
                for i in 0..n {
                    damped[(i, i)] += mu * a[(i, i)].max(diag_max * 1e-12);
                }
                let Some(chol) = damped.cholesky() else {
                    mu *= 10.0;
                    continue;
                };
                let delta = chol.solve(&(-&g));
                let trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
                let r_trial = problem.residuals(&trial);
                let c_trial = sum_sq(&r_trial);
                if c_trial.is_finite() && c_trial < cost {
                    let rel_cost = (cost - c_trial) / cost.max(f64::MIN_POSITIVE);
                    let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let rel_step = delta.norm() / (x_norm + self.step_tolerance);
                    x = trial;
                    r = r_trial;
                    cost = c_trial;
                    mu = (mu / 10.0).max(1e-15);
                    accepted = true;
                    let exact = cost <= initial_cost * 1e-28;
                    if rel_cost < self.cost_tolerance || rel_step < self.step_tolerance || exact {
                        converged = true;
                    }
                    break;
                }
                mu *= 10.0;
            }
            if !accepted {
                // No descent direction left at any damping: a stationary point.
                converged = true;
                break;
            }
            jac = problem.jacobian(&x);
            if converged || cost == 0.0 {
                converged = true;
                break;
            }
        }

        if !converged {
            return Err(Error::NotConverged {
                iterations,
                cost,
                last: x,
            });
        }
        let normal_matrix = jac.transpose() * &jac;
        if !all_finite(&normal_matrix) {
            return Err(Error::FitDegenerate("non-finite Jacobian at the optimum".into()));
        }
        let sv = normal_matrix.clone().svd(false, false).singular_values;
        let (smax, smin) = (sv.max(), sv.min());
        let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        Ok(Report {
            params: x,
            residuals: r,
            cost,
            initial_cost,
            iterations,
            normal_matrix,
            condition_number,
        })
    }
}

/// Ordinary linear least squares `min ||A x - b||` via SVD.
pub fn linear_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if !all_finite(a) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite design matrix".into()));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Err(Error::Degenerate("zero design matrix".into()));
    }
    svd.solve(b, smax * 1e-14)
        .map_err(|e| Error::Degenerate(e.to_string()))
}
