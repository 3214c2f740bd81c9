//! Unadjusted, OLS-adjusted, cv(Lasso)-adjusted and cv(Lasso+OLS)-adjusted
//! ATE estimators with Neyman-type conservative variance estimates.
//!
//! Every adjusted estimator has the form
//!
//! ```text
//! [abar_A - (xbar_A - xbar)' beta_a] - [bbar_B - (xbar_B - xbar)' beta_b]
//! ```
//!
//! where `xbar` is the full-sample covariate mean and each adjustment vector
//! is fitted within its own arm. The variance estimate is
//! `n/n_A * s2_a + n/n_B * s2_b`, with `s2_g` the within-arm residual variance
//! divided by `n_g - df_g` (or by `n_g` when degrees-of-freedom adjustment is
//! switched off). `sigma2_hat` is on the `sqrt(n) (ATE_hat - ATE)` scale.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cv::{cross_validate, full_group_fits, CvKinds, CvOptions, CvResult};
use crate::error::{AteError, Result};
use crate::model::{ExperimentSample, Group};
use crate::random::two_sided_z;
use crate::solver::{fit_ols, lambda_grid, AdjustmentFit, LambdaGrid, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Unadjusted,
    Ols,
    CvLasso,
    CvLassoOls,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Unadjusted, Method::Ols, Method::CvLasso, Method::CvLassoOls];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Unadjusted => "unadjusted",
            Method::Ols => "ols",
            Method::CvLasso => "cv_lasso",
            Method::CvLassoOls => "cv_lasso_ols",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Unadjusted => "Unadjusted",
            Method::Ols => "OLS",
            Method::CvLasso => "cv(Lasso)",
            Method::CvLassoOls => "cv(Lasso+OLS)",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = AteError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| AteError::InvalidInput(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub method: Method,
    pub estimate: f64,
    pub sigma2_hat: f64,
    /// Standard error of the estimate, `sqrt(sigma2_hat / n)`.
    pub std_error: f64,
    pub ci_level: f64,
    pub ci: (f64, f64),
    pub selected_treated: Option<usize>,
    pub selected_control: Option<usize>,
    pub df_adjusted: bool,
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_treated: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_control: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_treated: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_control: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_names_treated: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_names_control: Option<Vec<String>>,
    /// The Lasso+OLS refit was ill-posed in at least one arm and the Lasso
    /// coefficients were used instead.
    #[serde(default)]
    pub refit_fallback: bool,
}

impl AteReport {
    fn build(method: Method, sample: &ExperimentSample, estimate: f64, sigma2_hat: f64, opts: &EstimationOptions) -> Self {
        let n = sample.n();
        Self {
            method,
            estimate,
            sigma2_hat,
            std_error: (sigma2_hat / n as f64).sqrt(),
            ci_level: opts.ci_level,
            ci: confidence_interval(estimate, sigma2_hat, n, opts.ci_level),
            selected_treated: None,
            selected_control: None,
            df_adjusted: opts.df_adjust,
            n,
            n_treated: sample.n_treated(),
            n_control: sample.n_control(),
            lambda_treated: None,
            lambda_control: None,
            support_treated: None,
            support_control: None,
            selected_names_treated: None,
            selected_names_control: None,
            refit_fallback: false,
        }
    }

    fn with_fits(mut self, fit_a: &AdjustmentFit, fit_b: &AdjustmentFit) -> Self {
        self.selected_treated = Some(fit_a.support.len());
        self.selected_control = Some(fit_b.support.len());
        self.support_treated = Some(fit_a.support.clone());
        self.support_control = Some(fit_b.support.clone());
        self
    }

    /// Attach covariate names for the selected supports.
    pub fn with_names(mut self, names: &[String]) -> Self {
        let lookup = |s: &Option<Vec<usize>>| {
            s.as_ref()
                .map(|idx| idx.iter().map(|&j| names.get(j).cloned().unwrap_or_else(|| format!("x{j}"))).collect())
        };
        self.selected_names_treated = lookup(&self.support_treated);
        self.selected_names_control = lookup(&self.support_control);
        self
    }

    pub fn ci_length(&self) -> f64 {
        self.ci.1 - self.ci.0
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci.0 <= value && value <= self.ci.1
    }
}

/// Grid, fold and solver settings for the cross-validated estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    pub n_lambda: usize,
    /// Smallest-to-largest grid ratio; `None` picks 1e-3 when `p >= n_g`,
    /// else 1e-4.
    pub min_ratio: Option<f64>,
    /// Explicit grid used for both arms instead of the data-driven one.
    pub fixed_lambdas: Option<Vec<f64>>,
    pub folds: usize,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for Tuning {
    fn default() -> Self {
        Self {
            n_lambda: 100,
            min_ratio: None,
            fixed_lambdas: None,
            folds: 10,
            seed: 0,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationOptions {
    pub ci_level: f64,
    /// Use `n_g - df_g` denominators (recommended); `false` selects the
    /// `n_g` denominators, which can under-cover in finite samples.
    pub df_adjust: bool,
    pub tuning: Tuning,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self {
            ci_level: 0.95,
            df_adjust: true,
            tuning: Tuning::default(),
        }
    }
}

/// `estimate -/+ z_{(1+level)/2} * sqrt(sigma2_hat / n)`.
pub fn confidence_interval(estimate: f64, sigma2_hat: f64, n: usize, level: f64) -> (f64, f64) {
    let half = two_sided_z(level) * (sigma2_hat / n as f64).sqrt();
    (estimate - half, estimate + half)
}

fn group_outcome_mean(sample: &ExperimentSample, group: Group) -> f64 {
    let idx = sample.group_indices(group);
    idx.iter().map(|&i| sample.observed()[i]).sum::<f64>() / idx.len() as f64
}

fn group_covariate_mean(sample: &ExperimentSample, group: Group) -> Vec<f64> {
    let idx = sample.group_indices(group);
    let x = sample.covariates();
    (0..sample.p())
        .map(|j| idx.iter().map(|&i| x[(i, j)]).sum::<f64>() / idx.len() as f64)
        .collect()
}

/// Sum of squared within-arm residuals `y_i - ybar_g - (x_i - xbar_g)' beta`.
fn residual_sum_of_squares(sample: &ExperimentSample, group: Group, beta: &[f64]) -> f64 {
    let idx = sample.group_indices(group);
    let y_mean = group_outcome_mean(sample, group);
    let active: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
    let x_mean = if active.is_empty() {
        Vec::new()
    } else {
        group_covariate_mean(sample, group)
    };
    let x = sample.covariates();
    idx.iter()
        .map(|&i| {
            let mut r = sample.observed()[i] - y_mean;
            for &j in &active {
                r -= (x[(i, j)] - x_mean[j]) * beta[j];
            }
            r * r
        })
        .sum()
}

fn require_group_sizes(sample: &ExperimentSample, min: usize) -> Result<()> {
    for g in [Group::Treated, Group::Control] {
        let size = sample.group_indices(g).len();
        if size < min {
            return Err(AteError::GroupTooSmall {
                group: g.name(),
                size,
                required: min,
            });
        }
    }
    Ok(())
}

/// Difference in means with the unadjusted Neyman variance estimate.
pub fn ate_unadjusted(sample: &ExperimentSample, opts: &EstimationOptions) -> Result<AteReport> {
    require_group_sizes(sample, 2)?;
    let estimate = group_outcome_mean(sample, Group::Treated) - group_outcome_mean(sample, Group::Control);
    let zero = vec![0.0; sample.p()];
    let sigma2 = variance_with_df(sample, &zero, &zero, 1, 1, true)?;
    Ok(AteReport::build(Method::Unadjusted, sample, estimate, sigma2, opts))
}

/// Regression-adjusted point estimate for given per-arm adjustment vectors.
pub fn ate_adjusted(sample: &ExperimentSample, fit_a: &AdjustmentFit, fit_b: &AdjustmentFit) -> Result<f64> {
    let p = sample.p();
    if fit_a.p() != p || fit_b.p() != p {
        return Err(AteError::DimensionMismatch(format!(
            "adjustment vectors have lengths {} and {}, covariates have {p} columns",
            fit_a.p(),
            fit_b.p()
        )));
    }
    let full_mean = sample.covariate_means();
    let arm = |group: Group, beta: &[f64]| {
        let y_mean = group_outcome_mean(sample, group);
        if beta.iter().all(|b| *b == 0.0) {
            return y_mean;
        }
        let x_mean = group_covariate_mean(sample, group);
        let shift: f64 = (0..p).map(|j| (x_mean[j] - full_mean[j]) * beta[j]).sum();
        y_mean - shift
    };
    Ok(arm(Group::Treated, &fit_a.beta) - arm(Group::Control, &fit_b.beta))
}

/// Neyman-type variance estimate with `df_g = |support_g| + 1`.
pub fn neyman_variance_adjusted(
    sample: &ExperimentSample,
    fit_a: &AdjustmentFit,
    fit_b: &AdjustmentFit,
    df_adjust: bool,
) -> Result<f64> {
    variance_with_df(sample, &fit_a.beta, &fit_b.beta, fit_a.df(), fit_b.df(), df_adjust)
}

fn variance_with_df(
    sample: &ExperimentSample,
    beta_a: &[f64],
    beta_b: &[f64],
    df_a: usize,
    df_b: usize,
    df_adjust: bool,
) -> Result<f64> {
    let n = sample.n() as f64;
    let arm = |group: Group, beta: &[f64], df: usize| -> Result<f64> {
        let n_g = sample.group_indices(group).len();
        let denom = if df_adjust {
            if n_g <= df {
                return Err(AteError::DfExceedsGroupSize {
                    group: group.name(),
                    df,
                    n_group: n_g,
                });
            }
            (n_g - df) as f64
        } else {
            n_g as f64
        };
        let s2 = residual_sum_of_squares(sample, group, beta) / denom;
        Ok(n / n_g as f64 * s2)
    };
    Ok(arm(Group::Treated, beta_a, df_a)? + arm(Group::Control, beta_b, df_b)?)
}

/// Separate OLS regressions in each arm; `df = p + 1` per arm.
pub fn ate_ols(sample: &ExperimentSample, opts: &EstimationOptions) -> Result<AteReport> {
    require_group_sizes(sample, 2)?;
    let p = sample.p();
    let infeasible = |dependent_columns: Vec<usize>| AteError::OlsInfeasible {
        p,
        n_treated: sample.n_treated(),
        n_control: sample.n_control(),
        dependent_columns,
    };
    if p >= sample.n_treated().min(sample.n_control()) {
        return Err(infeasible(Vec::new()));
    }
    let fit = |group: Group| -> Result<AdjustmentFit> {
        let (x, y) = sample.group_data(group);
        fit_ols(&x, &y, None).map_err(|e| match e {
            AteError::RankDeficient { columns } => infeasible(columns),
            AteError::SupportTooLarge { .. } => infeasible(Vec::new()),
            other => other,
        })
    };
    let fit_a = fit(Group::Treated)?;
    let fit_b = fit(Group::Control)?;
    let estimate = ate_adjusted(sample, &fit_a, &fit_b)?;
    let sigma2 = variance_with_df(sample, &fit_a.beta, &fit_b.beta, p + 1, p + 1, opts.df_adjust)?;
    Ok(AteReport::build(Method::Ols, sample, estimate, sigma2, opts).with_fits(&fit_a, &fit_b))
}

/// A cross-validated Lasso-family estimate together with its per-arm fits
/// and CV curves.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoAdjusted {
    pub report: AteReport,
    pub fit_treated: AdjustmentFit,
    pub fit_control: AdjustmentFit,
    pub cv_treated: CvResult,
    pub cv_control: CvResult,
}

/// Cross-validated fits for one arm. The `bool` marks a Lasso+OLS refit
/// that was ill-posed and replaced by the Lasso coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFits {
    pub lasso: Option<(AdjustmentFit, CvResult)>,
    pub lasso_ols: Option<(AdjustmentFit, CvResult, bool)>,
}

fn group_grid(x: &DMatrix<f64>, y: &DVector<f64>, tuning: &Tuning) -> Result<LambdaGrid> {
    match &tuning.fixed_lambdas {
        Some(values) => LambdaGrid::new(values.clone()),
        None => lambda_grid(x, y, tuning.n_lambda, tuning.min_ratio),
    }
}

/// Grid, cross-validation and full-data fits for one arm's `(x, y)`;
/// `seed` drives the fold partition.
pub fn fit_group(x: &DMatrix<f64>, y: &DVector<f64>, tuning: &Tuning, seed: u64, kinds: CvKinds) -> Result<GroupFits> {
    let grid = group_grid(x, y, tuning)?;
    let cv_opts = CvOptions {
        folds: tuning.folds,
        seed,
        solver: tuning.solver,
    };
    let cv = cross_validate(x, y, &grid, &cv_opts, kinds)?;
    let mut indices = Vec::new();
    if let Some(c) = &cv.lasso {
        indices.push(c.optimal_index);
    }
    if let Some(c) = &cv.lasso_ols {
        indices.push(c.optimal_index);
    }
    let mut fits = full_group_fits(x, y, &grid, &indices, &tuning.solver)?.into_iter();
    let lasso = cv.lasso.map(|c| (fits.next().expect("lasso fit"), c));
    let lasso_ols = match cv.lasso_ols {
        Some(c) => {
            let selection = fits.next().expect("lasso+ols selection fit");
            match fit_ols(x, y, Some(&selection.support)) {
                Ok(mut refit) => {
                    refit.lambda = selection.lambda;
                    Some((refit, c, false))
                }
                Err(AteError::RankDeficient { .. }) | Err(AteError::SupportTooLarge { .. }) => {
                    Some((selection, c, true))
                }
                Err(e) => return Err(e),
            }
        }
        None => None,
    };
    Ok(GroupFits { lasso, lasso_ols })
}

fn fit_arm(sample: &ExperimentSample, group: Group, tuning: &Tuning, kinds: CvKinds) -> Result<GroupFits> {
    let (x, y) = sample.group_data(group);
    let seed = match group {
        Group::Treated => tuning.seed,
        Group::Control => tuning.seed.wrapping_add(1),
    };
    fit_group(&x, &y, tuning, seed, kinds)
}

fn assemble(
    method: Method,
    sample: &ExperimentSample,
    opts: &EstimationOptions,
    (fit_a, cv_a): (AdjustmentFit, CvResult),
    (fit_b, cv_b): (AdjustmentFit, CvResult),
    fallback: bool,
) -> Result<LassoAdjusted> {
    let estimate = ate_adjusted(sample, &fit_a, &fit_b)?;
    let sigma2 = neyman_variance_adjusted(sample, &fit_a, &fit_b, opts.df_adjust)?;
    let mut report = AteReport::build(method, sample, estimate, sigma2, opts).with_fits(&fit_a, &fit_b);
    report.lambda_treated = Some(cv_a.optimal_lambda);
    report.lambda_control = Some(cv_b.optimal_lambda);
    report.refit_fallback = fallback;
    Ok(LassoAdjusted {
        report,
        fit_treated: fit_a,
        fit_control: fit_b,
        cv_treated: cv_a,
        cv_control: cv_b,
    })
}

/// cv(Lasso) and cv(Lasso+OLS) outcomes of [`lasso_family`]; each is `None`
/// when not requested and fails independently of the other.
pub type LassoFamily = (Option<Result<LassoAdjusted>>, Option<Result<LassoAdjusted>>);

/// Both cross-validated estimators from shared fold paths. The outer error
/// covers steps shared by both methods.
pub fn lasso_family(sample: &ExperimentSample, opts: &EstimationOptions, kinds: CvKinds) -> Result<LassoFamily> {
    require_group_sizes(sample, opts.tuning.folds.max(2))?;
    let a = fit_arm(sample, Group::Treated, &opts.tuning, kinds)?;
    let b = fit_arm(sample, Group::Control, &opts.tuning, kinds)?;
    let lasso = match (a.lasso, b.lasso) {
        (Some(fa), Some(fb)) => Some(assemble(Method::CvLasso, sample, opts, fa, fb, false)),
        _ => None,
    };
    let lasso_ols = match (a.lasso_ols, b.lasso_ols) {
        (Some((fa, ca, xa)), Some((fb, cb, xb))) => {
            Some(assemble(Method::CvLassoOls, sample, opts, (fa, ca), (fb, cb), xa || xb))
        }
        _ => None,
    };
    Ok((lasso, lasso_ols))
}

/// cv(Lasso)-adjusted estimate: separate 10-fold CV penalties per arm.
pub fn ate_lasso(sample: &ExperimentSample, opts: &EstimationOptions) -> Result<AteReport> {
    let kinds = CvKinds {
        lasso: true,
        lasso_ols: false,
    };
    lasso_family(sample, opts, kinds)?.0.expect("requested").map(|f| f.report)
}

/// cv(Lasso+OLS)-adjusted estimate: OLS refit on the Lasso support, with the
/// penalty chosen by cross-validating the whole select-then-refit pipeline.
pub fn ate_lasso_ols(sample: &ExperimentSample, opts: &EstimationOptions) -> Result<AteReport> {
    let kinds = CvKinds {
        lasso: false,
        lasso_ols: true,
    };
    lasso_family(sample, opts, kinds)?.1.expect("requested").map(|f| f.report)
}

/// Run every requested method; failures are reported per method.
pub fn estimate_all(
    sample: &ExperimentSample,
    methods: &[Method],
    opts: &EstimationOptions,
) -> Vec<(Method, Result<AteReport>)> {
    let kinds = CvKinds {
        lasso: methods.contains(&Method::CvLasso),
        lasso_ols: methods.contains(&Method::CvLassoOls),
    };
    let family = if kinds.lasso || kinds.lasso_ols {
        Some(lasso_family(sample, opts, kinds))
    } else {
        None
    };
    methods
        .iter()
        .map(|&m| {
            let r = match m {
                Method::Unadjusted => ate_unadjusted(sample, opts),
                Method::Ols => ate_ols(sample, opts),
                Method::CvLasso | Method::CvLassoOls => match family.as_ref().expect("family computed") {
                    Ok((l, lo)) => {
                        let pick = if m == Method::CvLasso { l } else { lo };
                        match pick.as_ref().expect("requested") {
                            Ok(f) => Ok(f.report.clone()),
                            Err(e) => Err(e.clone()),
                        }
                    }
                    Err(e) => Err(e.clone()),
                },
            };
            (m, r)
        })
        .collect()
}
