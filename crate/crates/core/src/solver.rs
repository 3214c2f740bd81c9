//! Group-centered Lasso and OLS fits.
//!
//! Both fits minimise, within one arm of the experiment,
//!
//! ```text
//! 1/(2 n_g) * sum_i (y_i - ybar - (x_i - xbar)' beta)^2 + lambda * ||beta||_1
//! ```
//!
//! with `lambda = 0` (and an optional support restriction) for OLS. The
//! intercept is never penalised; it is carried implicitly through the group
//! means stored on the fit.
//!
//! The Lasso is solved by cyclic coordinate descent with covariance updates.
//! Columns are rescaled to unit within-group standard deviation before
//! optimisation, with the penalty reweighted so the rescaling is a pure change
//! of variables: the objective above is solved exactly on the raw scale. Gram
//! columns are computed lazily, only for coordinates that ever become nonzero.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AteError, Result};
use crate::model::check_finite;

/// `sign(z) * max(|z| - gamma, 0)`.
#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    debug_assert!(gamma >= 0.0);
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Convergence threshold on the largest per-sweep coordinate change,
    /// measured on the standardized scale.
    pub tol: f64,
    /// Required KKT residual (raw gradient units) before a fit is accepted.
    pub kkt_tol: f64,
    /// Maximum number of coordinate sweeps.
    pub max_iter: usize,
    /// Finish with an exact solve of the stationarity equations on the
    /// active set when it is sign consistent.
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            kkt_tol: 1e-5,
            max_iter: 100_000,
            polish: true,
        }
    }
}

/// One arm's fitted adjustment vector together with the group means needed
/// to predict with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentFit {
    pub beta: Vec<f64>,
    pub support: Vec<usize>,
    pub lambda: f64,
    pub group_outcome_mean: f64,
    pub group_covariate_mean: Vec<f64>,
    pub n_group: usize,
}

impl AdjustmentFit {
    /// All-zero adjustment: predictions equal the group outcome mean.
    pub fn zero(group_outcome_mean: f64, group_covariate_mean: Vec<f64>, n_group: usize) -> Self {
        let p = group_covariate_mean.len();
        Self {
            beta: vec![0.0; p],
            support: Vec::new(),
            lambda: 0.0,
            group_outcome_mean,
            group_covariate_mean,
            n_group,
        }
    }

    fn from_beta(beta: Vec<f64>, lambda: f64, design: &CenteredDesign) -> Self {
        let support = beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, _)| j)
            .collect();
        Self {
            beta,
            support,
            lambda,
            group_outcome_mean: design.y_mean,
            group_covariate_mean: design.x_mean.clone(),
            n_group: design.n,
        }
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// Degrees of freedom `|support| + 1`.
    pub fn df(&self) -> usize {
        self.support.len() + 1
    }

    /// `ybar_g + (x - xbar_g)' beta`.
    pub fn predict_row<I: IntoIterator<Item = f64>>(&self, row: I) -> f64 {
        let mut pred = self.group_outcome_mean;
        for (j, x) in row.into_iter().enumerate() {
            let b = self.beta[j];
            if b != 0.0 {
                pred += (x - self.group_covariate_mean[j]) * b;
            }
        }
        pred
    }

    /// Residuals `y_i - ybar_g - (x_i - xbar_g)' beta` on the supplied rows.
    pub fn residuals(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| y[i] - self.predict_row(x.row(i).iter().copied()))
            .collect()
    }
}

/// Strictly decreasing sequence of positive penalty levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    values: Vec<f64>,
}

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(AteError::InvalidInput("lambda grid is empty".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(AteError::InvalidInput(
                "lambda grid values must be finite and positive".into(),
            ));
        }
        if values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(AteError::InvalidInput(
                "lambda grid must be strictly decreasing".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Default smallest-to-largest grid ratio: 1e-3 when `p >= n_g`, else 1e-4.
pub fn default_min_ratio(n_group: usize, p: usize) -> f64 {
    if p >= n_group {
        1e-3
    } else {
        1e-4
    }
}

/// Log-spaced grid from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_grid(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    n_lambda: usize,
    ratio: Option<f64>,
) -> Result<LambdaGrid> {
    let design = CenteredDesign::new(x, y)?;
    grid_for_design(&design, n_lambda, ratio)
}

pub(crate) fn grid_for_design(
    design: &CenteredDesign,
    n_lambda: usize,
    ratio: Option<f64>,
) -> Result<LambdaGrid> {
    if n_lambda < 2 {
        return Err(AteError::InvalidInput(format!(
            "lambda grid needs at least 2 values, got {n_lambda}"
        )));
    }
    let ratio = ratio.unwrap_or_else(|| default_min_ratio(design.n, design.p));
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(AteError::InvalidInput(format!(
            "lambda ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let lambda_max = design.lambda_max();
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(AteError::DegenerateGrid);
    }
    let step = ratio.ln() / (n_lambda - 1) as f64;
    let mut values: Vec<f64> = (0..n_lambda)
        .map(|j| lambda_max * (step * j as f64).exp())
        .collect();
    values[0] = lambda_max;
    values[n_lambda - 1] = ratio * lambda_max;
    LambdaGrid::new(values)
}

/// Smallest penalty at which the zero vector is optimal:
/// `max_j |(1/n_g) sum_i (x_ij - xbar_j)(y_i - ybar)|`.
pub fn lambda_max(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    Ok(CenteredDesign::new(x, y)?.lambda_max())
}

/// Lasso fit at a single penalty, started from zero.
pub fn fit_lasso(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<AdjustmentFit> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(AteError::InvalidInput(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let mut design = CenteredDesign::new(x, y)?;
    let mut state = CdState::new(&design);
    design.solve(&mut state, lambda, opts)?;
    Ok(design.fit_from_state(&state, lambda))
}

/// Cold-start fit that also returns the objective after every coordinate
/// sweep and active-set step, starting with the objective at zero.
pub fn fit_lasso_traced(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<(AdjustmentFit, Vec<f64>)> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(AteError::InvalidInput(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let mut design = CenteredDesign::new(x, y)?;
    let mut state = CdState::new(&design);
    state.snapshots = Some(vec![vec![0.0; design.p]]);
    design.solve(&mut state, lambda, opts)?;
    let trace = state
        .snapshots
        .take()
        .expect("tracing")
        .iter()
        .map(|beta| lasso_objective(x, y, beta, lambda))
        .collect();
    Ok((design.fit_from_state(&state, lambda), trace))
}

/// Warm-started fits along `grid`, in grid order.
pub fn lasso_path(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &LambdaGrid,
    opts: &SolverOptions,
) -> Result<Vec<AdjustmentFit>> {
    let mut design = CenteredDesign::new(x, y)?;
    design.path(grid.values(), opts)
}

/// Unpenalised group-centered least squares, optionally restricted to
/// `support`. Coefficients outside the support are exactly zero.
pub fn fit_ols(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    support: Option<&[usize]>,
) -> Result<AdjustmentFit> {
    let mut design = CenteredDesign::new(x, y)?;
    let all: Vec<usize>;
    let support = match support {
        Some(s) => s,
        None => {
            all = (0..design.p).collect();
            &all
        }
    };
    if let Some(&j) = support.iter().find(|&&j| j >= design.p) {
        return Err(AteError::InvalidInput(format!(
            "support index {j} out of range for p = {}",
            design.p
        )));
    }
    let beta = design.ols_beta(support)?;
    Ok(AdjustmentFit::from_beta(beta, 0.0, &design))
}

/// Largest KKT violation of `fit` for the penalty `lambda`.
///
/// With `g_j = (1/n_g) sum_i (x_ij - xbar_j)(y_i - ybar - (x_i - xbar)' beta)`
/// this is `|g_j - lambda sign(beta_j)|` on the support and
/// `max(|g_j| - lambda, 0)` off it, maximised over `j`.
pub fn kkt_check(fit: &AdjustmentFit, x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> f64 {
    let n = x.nrows();
    let inv_n = 1.0 / n as f64;
    let y_mean = y.mean();
    let means: Vec<f64> = x.column_iter().map(|c| c.sum() * inv_n).collect();
    let resid: Vec<f64> = (0..n)
        .map(|i| {
            let mut r = y[i] - y_mean;
            for &j in &fit.support {
                r -= (x[(i, j)] - means[j]) * fit.beta[j];
            }
            r
        })
        .collect();
    let mut worst: f64 = 0.0;
    for j in 0..x.ncols() {
        let g: f64 = x
            .column(j)
            .iter()
            .zip(&resid)
            .map(|(xi, r)| (xi - means[j]) * r)
            .sum::<f64>()
            * inv_n;
        let b = fit.beta[j];
        let v = if b != 0.0 {
            (g - lambda * b.signum()).abs()
        } else {
            (g.abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Value of the group-centered Lasso objective at `beta`.
pub fn lasso_objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &[f64], lambda: f64) -> f64 {
    let n = x.nrows();
    let y_mean = y.mean();
    let means: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    let rss: f64 = (0..n)
        .map(|i| {
            let mut r = y[i] - y_mean;
            for (j, b) in beta.iter().enumerate() {
                r -= (x[(i, j)] - means[j]) * b;
            }
            r * r
        })
        .sum();
    rss / (2.0 * n as f64) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Centered, standardized copy of one group's data with a lazily filled
/// Gram matrix cache.
#[derive(Debug, Clone)]
pub(crate) struct CenteredDesign {
    pub(crate) n: usize,
    pub(crate) p: usize,
    /// Column-major `n x p`, centered and divided by `x_scale` (zero columns
    /// where the raw column is constant).
    xs: Vec<f64>,
    pub(crate) x_mean: Vec<f64>,
    /// Population SD of each column; 0 marks a constant column.
    x_scale: Vec<f64>,
    pub(crate) y_mean: f64,
    /// `xs_j' (y - ybar) / n`.
    xty: Vec<f64>,
    gram: Vec<Vec<f64>>,
    diag: Vec<f64>,
}

impl CenteredDesign {
    pub(crate) fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(AteError::DimensionMismatch(format!(
                "design has {} rows, outcome has {}",
                x.nrows(),
                y.len()
            )));
        }
        let rows: Vec<usize> = (0..x.nrows()).collect();
        Self::from_rows(x, y.as_slice(), &rows)
    }

    /// Build from a subset of rows of `x` and `y`.
    pub(crate) fn from_rows(x: &DMatrix<f64>, y: &[f64], rows: &[usize]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(AteError::GroupTooSmall {
                group: "fit",
                size: n,
                required: 2,
            });
        }
        let p = x.ncols();
        let inv_n = 1.0 / n as f64;
        let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        check_finite(&ys)?;
        let y_mean = ys.iter().sum::<f64>() * inv_n;
        let yc: Vec<f64> = ys.iter().map(|v| v - y_mean).collect();
        let mut xs = vec![0.0; n * p];
        let mut x_mean = vec![0.0; p];
        let mut x_scale = vec![0.0; p];
        let mut xty = vec![0.0; p];
        let mut diag = vec![0.0; p];
        let src = x.as_slice();
        let nrow_total = x.nrows();
        for j in 0..p {
            let col = &src[j * nrow_total..(j + 1) * nrow_total];
            let dst = &mut xs[j * n..(j + 1) * n];
            for (d, &i) in dst.iter_mut().zip(rows) {
                *d = col[i];
            }
            check_finite(dst)?;
            let mean = dst.iter().sum::<f64>() * inv_n;
            for d in dst.iter_mut() {
                *d -= mean;
            }
            let var = dst.iter().map(|d| d * d).sum::<f64>() * inv_n;
            let sd = var.sqrt();
            x_mean[j] = mean;
            // constant within group (up to rounding of the centering)
            if sd <= 1e-12 * (1.0 + mean.abs()) {
                dst.iter_mut().for_each(|d| *d = 0.0);
                continue;
            }
            x_scale[j] = sd;
            let inv = 1.0 / sd;
            dst.iter_mut().for_each(|d| *d *= inv);
            diag[j] = dst.iter().map(|d| d * d).sum::<f64>() * inv_n;
            xty[j] = dst.iter().zip(&yc).map(|(a, b)| a * b).sum::<f64>() * inv_n;
        }
        Ok(Self {
            n,
            p,
            xs,
            x_mean,
            x_scale,
            y_mean,
            xty,
            gram: vec![Vec::new(); p],
            diag,
        })
    }

    pub(crate) fn lambda_max(&self) -> f64 {
        self.xty
            .iter()
            .zip(&self.x_scale)
            .map(|(c, s)| (c * s).abs())
            .fold(0.0, f64::max)
    }

    fn column(&self, j: usize) -> &[f64] {
        &self.xs[j * self.n..(j + 1) * self.n]
    }

    fn ensure_gram(&mut self, j: usize) {
        if !self.gram[j].is_empty() || self.p == 0 {
            return;
        }
        let inv_n = 1.0 / self.n as f64;
        let cj = self.column(j);
        let col: Vec<f64> = (0..self.p)
            .map(|k| {
                if k == j {
                    self.diag[j]
                } else {
                    self.column(k).iter().zip(cj).map(|(a, b)| a * b).sum::<f64>() * inv_n
                }
            })
            .collect();
        self.gram[j] = col;
    }

    fn penalty(&self, j: usize, lambda: f64) -> f64 {
        lambda / self.x_scale[j]
    }

    /// One pass of coordinate updates over `coords`; returns the largest
    /// change scaled by the coordinate's curvature.
    fn sweep(&mut self, state: &mut CdState, coords: &[usize], lambda: f64) -> f64 {
        let mut max_change: f64 = 0.0;
        for &j in coords {
            if self.x_scale[j] == 0.0 {
                continue;
            }
            let old = state.b[j];
            let d = self.diag[j];
            let z = state.grad[j] + d * old;
            let new = soft_threshold(z, self.penalty(j, lambda)) / d;
            if new != old {
                self.ensure_gram(j);
                let delta = new - old;
                for (g, gk) in state.grad.iter_mut().zip(&self.gram[j]) {
                    *g -= delta * gk;
                }
                state.b[j] = new;
                max_change = max_change.max(delta.abs() * d.sqrt());
            }
        }
        max_change
    }

    /// Recompute the gradient from scratch to remove accumulated drift.
    fn refresh_gradient(&self, state: &mut CdState) {
        state.grad.copy_from_slice(&self.xty);
        for j in 0..self.p {
            let b = state.b[j];
            if b != 0.0 {
                for (g, gk) in state.grad.iter_mut().zip(&self.gram[j]) {
                    *g -= b * gk;
                }
            }
        }
    }

    /// KKT residual on the raw scale for a scaled gradient vector.
    fn kkt_residual(&self, b: &[f64], grad: &[f64], lambda: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.p {
            let s = self.x_scale[j];
            if s == 0.0 {
                continue;
            }
            let g = grad[j] * s;
            let v = if b[j] != 0.0 {
                (g - lambda * b[j].signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    /// Column-major Gram block of `active`.
    fn active_gram(&self, active: &[usize]) -> Vec<f64> {
        let m = active.len();
        let mut g = vec![0.0; m * m];
        for (c, &j) in active.iter().enumerate() {
            let col = &self.gram[j];
            for (r, &k) in active.iter().enumerate() {
                g[r + c * m] = col[k];
            }
        }
        g
    }

    /// Stationary point of the objective restricted to the current active
    /// set and sign pattern, or `None` if the active Gram block is singular.
    fn active_solution(&self, b: &[f64], active: &[usize], lambda: f64) -> Option<Vec<f64>> {
        let m = active.len();
        if m == 0 || m >= self.n {
            return None;
        }
        let mut g = self.active_gram(active);
        let rhs: Vec<f64> = active
            .iter()
            .map(|&j| self.xty[j] - self.penalty(j, lambda) * b[j].signum())
            .collect();
        cholesky_solve(&mut g, m, &rhs).ok()
    }

    fn gradient_of(&self, b: &[f64]) -> Vec<f64> {
        let mut grad = self.xty.clone();
        for (j, &bj) in b.iter().enumerate() {
            if bj != 0.0 {
                for (gk, gj) in grad.iter_mut().zip(&self.gram[j]) {
                    *gk -= bj * gj;
                }
            }
        }
        grad
    }

    /// Solve the stationarity equations exactly on the current active set.
    /// Accepted only if the solution keeps its signs and satisfies KKT.
    fn polish(&mut self, state: &mut CdState, lambda: f64, kkt_tol: f64) -> bool {
        let active: Vec<usize> = (0..self.p).filter(|&j| state.b[j] != 0.0).collect();
        let Some(sol) = self.active_solution(&state.b, &active, lambda) else {
            return false;
        };
        if active
            .iter()
            .zip(&sol)
            .any(|(&j, v)| v.signum() != state.b[j].signum() || *v == 0.0)
        {
            return false;
        }
        let mut b = vec![0.0; self.p];
        for (&j, v) in active.iter().zip(&sol) {
            b[j] = *v;
        }
        let grad = self.gradient_of(&b);
        let kkt = self.kkt_residual(&b, &grad, lambda);
        if kkt <= kkt_tol && kkt <= self.kkt_residual(&state.b, &state.grad, lambda) {
            state.b = b;
            state.grad = grad;
            true
        } else {
            false
        }
    }

    /// Sign-constrained Newton steps on the active set. Each step moves
    /// toward the stationary point of the current orthant and stops at the
    /// first coordinate that reaches zero, which then leaves the active set.
    /// When the active Gram block is singular the step follows a slightly
    /// ridged Newton direction with an exact line search instead. The
    /// objective is a convex quadratic on the orthant, so every step is a
    /// descent step. Returns true once a sign-consistent stationary point is
    /// reached.
    fn active_newton(&mut self, state: &mut CdState, lambda: f64) -> bool {
        let mut active: Vec<usize> = (0..self.p).filter(|&j| state.b[j] != 0.0).collect();
        let max_steps = 2 * active.len() + 2;
        for _ in 0..max_steps {
            if active.is_empty() {
                state.grad = self.gradient_of(&state.b);
                return true;
            }
            let m = active.len();
            let (direction, exact) = match self.active_solution(&state.b, &active, lambda) {
                Some(sol) => (active.iter().zip(&sol).map(|(&j, v)| v - state.b[j]).collect(), true),
                None => match self.ridged_direction(state, &active, lambda) {
                    Some(d) => (d, false),
                    None => return false,
                },
            };
            let d: Vec<f64> = direction;
            let mut step = if exact {
                1.0
            } else {
                // exact minimizer of the quadratic along d
                let g = self.active_gram(&active);
                let r: Vec<f64> = active
                    .iter()
                    .map(|&j| state.grad[j] - self.penalty(j, lambda) * state.b[j].signum())
                    .collect();
                let slope: f64 = r.iter().zip(&d).map(|(a, b)| a * b).sum();
                let mut curv = 0.0;
                for c in 0..m {
                    let gd: f64 = (0..m).map(|r| g[r + c * m] * d[r]).sum();
                    curv += d[c] * gd;
                }
                if !(slope > 0.0) {
                    return false;
                }
                if curv > 0.0 {
                    slope / curv
                } else {
                    f64::INFINITY
                }
            };
            let mut blocking = None;
            for (&j, &dj) in active.iter().zip(&d) {
                let cur = state.b[j];
                if cur * dj < 0.0 {
                    let t = -cur / dj;
                    if t < step {
                        step = t;
                        blocking = Some(j);
                    }
                }
            }
            if !step.is_finite() {
                return false;
            }
            for (&j, &dj) in active.iter().zip(&d) {
                state.b[j] += step * dj;
            }
            if let Some(j) = blocking {
                state.b[j] = 0.0;
            }
            state.grad = self.gradient_of(&state.b);
            match blocking {
                None => return exact,
                Some(_) => active.retain(|&k| state.b[k] != 0.0),
            }
        }
        false
    }

    /// `(G_SS + eps I)^{-1} r` for the orthant residual `r`.
    fn ridged_direction(&self, state: &CdState, active: &[usize], lambda: f64) -> Option<Vec<f64>> {
        let m = active.len();
        let mut g = self.active_gram(active);
        let scale = (0..m).map(|i| g[i + i * m]).fold(0.0, f64::max);
        for i in 0..m {
            g[i + i * m] += RIDGE * scale;
        }
        let r: Vec<f64> = active
            .iter()
            .map(|&j| state.grad[j] - self.penalty(j, lambda) * state.b[j].signum())
            .collect();
        cholesky_solve(&mut g, m, &r).ok()
    }

    /// Run coordinate descent from the current state to the solution at
    /// `lambda`. Returns the number of sweeps used.
    pub(crate) fn solve(
        &mut self,
        state: &mut CdState,
        lambda: f64,
        opts: &SolverOptions,
    ) -> Result<usize> {
        let all: Vec<usize> = (0..self.p).collect();
        let mut tol = opts.tol;
        let mut sweeps = 0usize;
        let mut active_sweeps = 0usize;
        loop {
            let change = self.sweep(state, &all, lambda);
            sweeps += 1;
            self.record(state);
            if change <= tol {
                self.refresh_gradient(state);
                let kkt = self.kkt_residual(&state.b, &state.grad, lambda);
                if kkt <= opts.kkt_tol {
                    break;
                }
                if opts.polish && self.polish(state, lambda, opts.kkt_tol) {
                    self.record(state);
                    break;
                }
                self.record(state);
                tol = (tol * 0.1).max(1e-16);
            }
            if sweeps >= opts.max_iter {
                return Err(self.not_converged(state, lambda, sweeps));
            }
            let active: Vec<usize> = (0..self.p).filter(|&j| state.b[j] != 0.0).collect();
            if active.is_empty() {
                continue;
            }
            loop {
                let change = self.sweep(state, &active, lambda);
                sweeps += 1;
                active_sweeps += 1;
                self.record(state);
                if change <= tol {
                    break;
                }
                if sweeps >= opts.max_iter {
                    return Err(self.not_converged(state, lambda, sweeps));
                }
                // slow linear convergence: jump to the active-set optimum
                if active_sweeps % 8 == 0 {
                    let done = self.active_newton(state, lambda);
                    self.record(state);
                    if done {
                        break;
                    }
                }
            }
        }
        if opts.polish {
            self.polish(state, lambda, opts.kkt_tol);
            self.record(state);
        }
        Ok(sweeps)
    }

    fn record(&self, state: &mut CdState) {
        if state.snapshots.is_some() {
            let beta = self.raw_beta(&state.b);
            state.snapshots.as_mut().expect("tracing").push(beta);
        }
    }

    fn not_converged(&self, state: &mut CdState, lambda: f64, sweeps: usize) -> AteError {
        self.refresh_gradient(state);
        AteError::NotConverged {
            sweeps,
            kkt: self.kkt_residual(&state.b, &state.grad, lambda),
            beta: self.raw_beta(&state.b),
        }
    }

    fn raw_beta(&self, b: &[f64]) -> Vec<f64> {
        b.iter()
            .zip(&self.x_scale)
            .map(|(v, s)| if *v == 0.0 { 0.0 } else { v / s })
            .collect()
    }

    pub(crate) fn fit_from_state(&self, state: &CdState, lambda: f64) -> AdjustmentFit {
        AdjustmentFit::from_beta(self.raw_beta(&state.b), lambda, self)
    }

    /// Warm-started path over `lambdas`.
    pub(crate) fn path(&mut self, lambdas: &[f64], opts: &SolverOptions) -> Result<Vec<AdjustmentFit>> {
        let mut state = CdState::new(self);
        lambdas
            .iter()
            .enumerate()
            .map(|(index, &lambda)| {
                self.solve(&mut state, lambda, opts).map_err(|e| AteError::PathFailure {
                    index,
                    source: Box::new(e),
                })?;
                Ok(self.fit_from_state(&state, lambda))
            })
            .collect()
    }

    /// OLS coefficients (raw scale) restricted to `support`.
    pub(crate) fn ols_beta(&mut self, support: &[usize]) -> Result<Vec<f64>> {
        let m = support.len();
        if m >= self.n {
            return Err(AteError::SupportTooLarge {
                support: m,
                n_group: self.n,
            });
        }
        let mut beta = vec![0.0; self.p];
        if m == 0 {
            return Ok(beta);
        }
        let constant: Vec<usize> = support
            .iter()
            .copied()
            .filter(|&j| self.x_scale[j] == 0.0)
            .collect();
        if !constant.is_empty() {
            return Err(AteError::RankDeficient { columns: constant });
        }
        for &j in support {
            self.ensure_gram(j);
        }
        let mut g = vec![0.0; m * m];
        for (c, &j) in support.iter().enumerate() {
            for (r, &k) in support.iter().enumerate() {
                g[r + c * m] = self.gram[j][k];
            }
        }
        let rhs: Vec<f64> = support.iter().map(|&j| self.xty[j]).collect();
        let sol = cholesky_solve(&mut g, m, &rhs).map_err(|pos| AteError::RankDeficient {
            columns: pos.into_iter().map(|r| support[r]).collect(),
        })?;
        for (&j, v) in support.iter().zip(sol) {
            beta[j] = v / self.x_scale[j];
        }
        Ok(beta)
    }
}

/// Coordinate descent iterate: scaled coefficients and the scaled gradient
/// `xty - G b`.
#[derive(Debug, Clone)]
pub(crate) struct CdState {
    b: Vec<f64>,
    grad: Vec<f64>,
    /// Raw-scale iterates after every update step, when tracing.
    snapshots: Option<Vec<Vec<f64>>>,
}

impl CdState {
    pub(crate) fn new(design: &CenteredDesign) -> Self {
        Self {
            b: vec![0.0; design.p],
            grad: design.xty.clone(),
            snapshots: None,
        }
    }
}

/// Relative pivot below which a Gram column counts as linearly dependent on
/// the preceding ones (`1 - R^2` of that column on the earlier columns).
const RANK_TOL: f64 = 1e-10;

/// Relative ridge for singular active Gram blocks.
const RIDGE: f64 = 1e-8;

/// Cholesky solve of the symmetric `m x m` column-major system `g x = rhs`.
/// On failure returns the positions whose pivots collapsed.
fn cholesky_solve(g: &mut [f64], m: usize, rhs: &[f64]) -> std::result::Result<Vec<f64>, Vec<usize>> {
    let mut dependent = Vec::new();
    // lower triangle overwritten with L
    for j in 0..m {
        let orig = g[j + j * m];
        let mut d = orig;
        for k in 0..j {
            d -= g[j + k * m] * g[j + k * m];
        }
        if !(d > RANK_TOL * orig) || !d.is_finite() {
            dependent.push(j);
            for i in j..m {
                g[i + j * m] = 0.0;
            }
            continue;
        }
        let l = d.sqrt();
        g[j + j * m] = l;
        for i in (j + 1)..m {
            let mut s = g[i + j * m];
            for k in 0..j {
                s -= g[i + k * m] * g[j + k * m];
            }
            g[i + j * m] = s / l;
        }
    }
    if !dependent.is_empty() {
        return Err(dependent);
    }
    let mut z = rhs.to_vec();
    for i in 0..m {
        let mut s = z[i];
        for k in 0..i {
            s -= g[i + k * m] * z[k];
        }
        z[i] = s / g[i + i * m];
    }
    for i in (0..m).rev() {
        let mut s = z[i];
        for k in (i + 1)..m {
            s -= g[k + i * m] * z[k];
        }
        z[i] = s / g[i + i * m];
    }
    Ok(z)
}
