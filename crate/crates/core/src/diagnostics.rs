//! Empirical proxies for the moment, sparsity, decay and eigenvalue
//! conditions behind the Lasso-adjusted estimator.
//!
//! The relevant covariate set is estimated by bootstrap selection
//! frequencies of the cv(Lasso+OLS) fit, the approximation errors by OLS on
//! that set, and the sub-Gram eigenvalues stand in for the cone
//! invertibility factor, which cannot be computed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::CvKinds;
use crate::error::{AteError, Result};
use crate::estimators::{fit_group, Tuning};
use crate::model::{ExperimentSample, Group};
use crate::random::stream;
use crate::sim::concentration_tau;
use crate::solver::fit_ols;

/// Largest tolerated share of failed bootstrap resamples.
pub const MAX_BOOTSTRAP_FAILURE_RATE: f64 = 0.1;

/// Per-column centered fourth moment `(1/n) sum_i (x_ij - xbar_j)^4`.
pub fn fourth_moments(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows().max(1) as f64;
    x.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            c.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n
        })
        .collect()
}

/// `s ln(p) / sqrt(n)`.
pub fn scaling_statistic(s: usize, p: usize, n: usize) -> f64 {
    s as f64 * (p as f64).ln() / (n as f64).sqrt()
}

/// Extreme eigenvalues of `(1/n) X_S' X_S` for column-centered `X`.
/// Singular blocks report a minimum of 0.
pub fn gram_eigenvalues(x: &DMatrix<f64>, support: &[usize]) -> Result<(f64, f64)> {
    if support.is_empty() {
        return Err(AteError::InvalidInput("support must be nonempty".into()));
    }
    if let Some(&j) = support.iter().find(|&&j| j >= x.ncols()) {
        return Err(AteError::DimensionMismatch(format!(
            "support index {j} out of range for {} columns",
            x.ncols()
        )));
    }
    let n = x.nrows();
    let mut xs = x.select_columns(support.iter());
    for mut c in xs.column_iter_mut() {
        let mean = c.sum() / n as f64;
        c.add_scalar_mut(-mean);
    }
    let gram = xs.transpose() * &xs / n as f64;
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let min = eig.min().max(0.0);
    Ok((min, eig.max()))
}

/// Bootstrap selection frequencies for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSelection {
    pub group: Group,
    pub resamples: usize,
    pub failures: usize,
    /// `tau_j`: share of successful resamples with a nonzero coefficient j.
    pub fractions: Vec<f64>,
    pub threshold: f64,
    /// `{ j : tau_j > threshold }`.
    pub support: Vec<usize>,
}

/// Draws `resamples` with-replacement resamples of one arm, fits
/// cv(Lasso+OLS) on each and keeps the covariates selected more often than
/// `threshold`. Resample `d` uses random stream `d` of `seed`.
pub fn bootstrap_support(
    sample: &ExperimentSample,
    group: Group,
    resamples: usize,
    threshold: f64,
    tuning: &Tuning,
    seed: u64,
) -> Result<BootstrapSelection> {
    if resamples < 1 {
        return Err(AteError::InvalidInput("at least one bootstrap resample is required".into()));
    }
    let (x, y) = sample.group_data(group);
    let n_g = y.len();
    let p = x.ncols();
    let kinds = CvKinds {
        lasso: false,
        lasso_ols: true,
    };
    let outcomes: Vec<Option<Vec<usize>>> = (0..resamples)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream(seed, d as u64);
            let rows: Vec<usize> = (0..n_g).map(|_| rng.random_range(0..n_g)).collect();
            let xb = x.select_rows(rows.iter());
            let yb = DVector::from_iterator(n_g, rows.iter().map(|&i| y[i]));
            let cv_seed = rng.next_u64();
            fit_group(&xb, &yb, tuning, cv_seed, kinds)
                .ok()
                .and_then(|f| f.lasso_ols)
                .map(|(fit, _, _)| fit.support)
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    if failures as f64 > MAX_BOOTSTRAP_FAILURE_RATE * resamples as f64 {
        return Err(AteError::BootstrapFailures {
            failed: failures,
            total: resamples,
        });
    }
    let mut counts = vec![0usize; p];
    for support in outcomes.iter().flatten() {
        for &j in support {
            counts[j] += 1;
        }
    }
    let ok = (resamples - failures) as f64;
    let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / ok).collect();
    let support = (0..p).filter(|&j| fractions[j] > threshold).collect();
    Ok(BootstrapSelection {
        group,
        resamples,
        failures,
        fractions,
        threshold,
        support,
    })
}

/// Within-arm OLS residuals on the covariates in `support`.
pub fn estimate_residuals(sample: &ExperimentSample, support: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let limit = sample.n_treated().min(sample.n_control());
    if support.len() >= limit {
        return Err(AteError::SupportTooLarge {
            support: support.len(),
            n_group: limit,
        });
    }
    let arm = |group: Group| -> Result<Vec<f64>> {
        let (x, y) = sample.group_data(group);
        let fit = fit_ols(&x, &y, Some(support))?;
        Ok(fit.residuals(&x, &y))
    };
    Ok((arm(Group::Treated)?, arm(Group::Control)?))
}

/// `max_g max_j |(1/n_g) sum_{i in g} (x_ij - xbar_j)(e_i - ebar_g)|` with
/// `xbar` the full-sample mean.
pub fn estimate_delta_n(sample: &ExperimentSample, residuals: (&[f64], &[f64])) -> Result<f64> {
    let xbar = sample.covariate_means();
    let x = sample.covariates();
    let mut worst: f64 = 0.0;
    for (group, e) in [(Group::Treated, residuals.0), (Group::Control, residuals.1)] {
        let idx = sample.group_indices(group);
        if e.len() != idx.len() {
            return Err(AteError::DimensionMismatch(format!(
                "{} residuals for {} {} units",
                e.len(),
                idx.len(),
                group.name()
            )));
        }
        let ebar = e.iter().sum::<f64>() / e.len() as f64;
        for j in 0..sample.p() {
            let cov = idx
                .iter()
                .zip(e)
                .map(|(&i, ei)| (x[(i, j)] - xbar[j]) * (ei - ebar))
                .sum::<f64>()
                / idx.len() as f64;
            worst = worst.max(cov.abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsOptions {
    pub bootstrap: usize,
    pub threshold: f64,
    pub seed: u64,
    pub tuning: Tuning,
    /// Fourth moments above this value are flagged.
    pub fourth_moment_threshold: f64,
    /// Scaling statistics above this value are flagged.
    pub scaling_threshold: f64,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        Self {
            bootstrap: 1000,
            threshold: 0.5,
            seed: 0,
            tuning: Tuning::default(),
            fourth_moment_threshold: 30.0,
            scaling_threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CheckStatus {
    Pass,
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub condition: String,
    pub quantity: String,
    pub value: f64,
    pub threshold: f64,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotEstimable {
    pub constant: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub n: usize,
    pub p: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub p_treated: f64,
    pub tau: f64,
    pub fourth_moments: Vec<f64>,
    pub max_fourth_moment: f64,
    pub flagged_fourth_moment_columns: Vec<usize>,
    pub selection_treated: BootstrapSelection,
    pub selection_control: BootstrapSelection,
    /// Union of the two arms' bootstrap supports.
    pub estimated_support: Vec<usize>,
    pub support_size: usize,
    pub residual_second_moments: (f64, f64),
    pub delta_n_hat: f64,
    pub scaling_stat: f64,
    /// `None` when the estimated support is empty.
    pub gram_eigs_on_support: Option<(f64, f64)>,
    pub checks: Vec<ConditionCheck>,
    pub not_estimable: Vec<NotEstimable>,
}

impl DiagnosticsReport {
    pub fn flags(&self) -> impl Iterator<Item = &ConditionCheck> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Flag)
    }
}

fn check(condition: &str, quantity: &str, value: f64, threshold: f64) -> ConditionCheck {
    ConditionCheck {
        condition: condition.into(),
        quantity: quantity.into(),
        value,
        threshold,
        status: if value <= threshold {
            CheckStatus::Pass
        } else {
            CheckStatus::Flag
        },
    }
}

fn not_estimable() -> Vec<NotEstimable> {
    [
        ("eta", "lower factor of the admissible penalty range; fixed by theory, not by data"),
        ("M", "upper factor of the admissible penalty range; fixed by theory, not by data"),
        ("C", "cone invertibility constant; needs the unknown active set and an infeasible optimization"),
        ("xi", "cone opening of the invertibility condition; needs the unknown active set"),
    ]
    .into_iter()
    .map(|(c, r)| NotEstimable {
        constant: c.into(),
        reason: r.into(),
    })
    .collect()
}

pub fn diagnose(sample: &ExperimentSample, opts: &DiagnosticsOptions) -> Result<DiagnosticsReport> {
    let (n, p) = (sample.n(), sample.p());
    let moments = fourth_moments(sample.covariates());
    let max_fourth_moment = moments.iter().copied().fold(0.0, f64::max);
    let flagged = (0..p).filter(|&j| moments[j] > opts.fourth_moment_threshold).collect();
    let sel_a = bootstrap_support(sample, Group::Treated, opts.bootstrap, opts.threshold, &opts.tuning, opts.seed)?;
    let sel_b = bootstrap_support(
        sample,
        Group::Control,
        opts.bootstrap,
        opts.threshold,
        &opts.tuning,
        opts.seed.wrapping_add(1),
    )?;
    let mut support: Vec<usize> = sel_a.support.iter().chain(&sel_b.support).copied().collect();
    support.sort_unstable();
    support.dedup();
    let (e_a, e_b) = estimate_residuals(sample, &support)?;
    let second = |e: &[f64]| e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64;
    let residual_second_moments = (second(&e_a), second(&e_b));
    let delta_n_hat = estimate_delta_n(sample, (&e_a, &e_b))?;
    let scaling_stat = if p >= 2 {
        scaling_statistic(support.len(), p, n)
    } else {
        0.0
    };
    let gram = if support.is_empty() {
        None
    } else {
        Some(gram_eigenvalues(sample.covariates(), &support)?)
    };
    let p_treated = sample.n_treated() as f64 / n as f64;
    let checks = vec![
        check("moments", "max fourth moment", max_fourth_moment, opts.fourth_moment_threshold),
        check("decay and scaling", "s log(p) / sqrt(n)", scaling_stat, opts.scaling_threshold),
    ];
    Ok(DiagnosticsReport {
        n,
        p,
        n_treated: sample.n_treated(),
        n_control: sample.n_control(),
        p_treated,
        tau: concentration_tau(p_treated),
        fourth_moments: moments,
        max_fourth_moment,
        flagged_fourth_moment_columns: flagged,
        selection_treated: sel_a,
        selection_control: sel_b,
        support_size: support.len(),
        estimated_support: support,
        residual_second_moments,
        delta_n_hat,
        scaling_stat,
        gram_eigs_on_support: gram,
        checks,
        not_estimable: not_estimable(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::standard_normal;

    fn sparse_sample(n: usize, p: usize, seed: u64, signal: f64) -> ExperimentSample {
        let mut rng = stream(seed, 7);
        let x = DMatrix::from_fn(n, p, |_, _| standard_normal(&mut rng));
        let t: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| signal * (3.0 * x[(i, 0)] - 2.0 * x[(i, 1)]) + 0.1 * standard_normal(&mut rng))
            .collect();
        ExperimentSample::new(x, t, DVector::from_vec(y)).unwrap()
    }

    fn quick_tuning() -> Tuning {
        Tuning {
            n_lambda: 30,
            folds: 5,
            ..Tuning::default()
        }
    }

    #[test]
    fn fourth_moment_values() {
        let x = DMatrix::from_column_slice(4, 2, &[-1.0, 1.0, -1.0, 1.0, 3.0, 3.0, 3.0, 3.0]);
        assert_eq!(fourth_moments(&x), vec![1.0, 0.0]);
    }

    #[test]
    fn scaling_values() {
        assert_eq!(scaling_statistic(0, 10, 100), 0.0);
        assert!((scaling_statistic(16, 1172, 1013) - 3.55).abs() < 0.005);
        let ratio = scaling_statistic(5, 50, 200) / scaling_statistic(5, 50, 400);
        assert!((ratio - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gram_eigenvalues_identity_and_duplicate() {
        // centered orthogonal columns with (1/n) X'X = I
        let x = DMatrix::from_column_slice(4, 2, &[1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
        let (lo, hi) = gram_eigenvalues(&x, &[0, 1]).unwrap();
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        let dup = DMatrix::from_columns(&[x.column(0).into_owned(), x.column(0).into_owned()]);
        let (lo, hi) = gram_eigenvalues(&dup, &[0, 1]).unwrap();
        assert!(lo.abs() < 1e-12 && (hi - 2.0).abs() < 1e-12);
        assert!(gram_eigenvalues(&x, &[]).is_err());
    }

    /// Eigenvalues of a 3x3 symmetric matrix from the trigonometric
    /// solution of its characteristic cubic.
    fn cubic_eigenvalues(a: &DMatrix<f64>) -> [f64; 3] {
        let q = a.trace() / 3.0;
        let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = (a - DMatrix::identity(3, 3) * q) / p;
        let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        [e3, 3.0 * q - e1 - e3, e1]
    }

    #[test]
    fn gram_eigenvalues_match_cubic_roots() {
        let mut rng = stream(11, 0);
        let x = DMatrix::from_fn(9, 3, |i, j| standard_normal(&mut rng) + (i * j) as f64 * 0.1);
        let mut c = x.clone();
        for mut col in c.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        let g = c.transpose() * &c / 9.0;
        let roots = cubic_eigenvalues(&g);
        let (lo, hi) = gram_eigenvalues(&x, &[0, 1, 2]).unwrap();
        assert!((lo - roots[0]).abs() < 1e-8 * roots[2]);
        assert!((hi - roots[2]).abs() < 1e-8 * roots[2]);
    }

    #[test]
    fn residuals_on_empty_and_exact_support() {
        let s = sparse_sample(40, 3, 1, 1.0);
        let (ea, _) = estimate_residuals(&s, &[]).unwrap();
        let (_, ya) = s.group_data(Group::Treated);
        let mean = ya.mean();
        for (e, y) in ea.iter().zip(ya.iter()) {
            assert!((e - (y - mean)).abs() < 1e-14);
        }
        let mut x = s.covariates().clone();
        let y = DVector::from_iterator(40, (0..40).map(|i| 2.0 * x[(i, 0)] + x[(i, 2)] - 5.0));
        x[(0, 1)] += 0.0;
        let exact = ExperimentSample::new(x, s.assignment().to_vec(), y).unwrap();
        let (ea, eb) = estimate_residuals(&exact, &[0, 2]).unwrap();
        assert!(ea.iter().chain(&eb).all(|e| e.abs() < 1e-12));
        assert!(matches!(
            estimate_residuals(&s, &(0..3).chain(0..20).collect::<Vec<_>>()),
            Err(AteError::SupportTooLarge { .. })
        ));
    }

    #[test]
    fn residuals_match_normal_equations() {
        let mut rng = stream(12, 1);
        let n = 100;
        let x = DMatrix::from_fn(n, 4, |_, _| standard_normal(&mut rng));
        let t: Vec<u8> = (0..n).map(|i| u8::from(i < 50)).collect();
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] - x[(i, 3)] + standard_normal(&mut rng));
        let s = ExperimentSample::new(x, t, y).unwrap();
        let (ea, _) = estimate_residuals(&s, &[0, 3]).unwrap();
        let (xa, ya) = s.group_data(Group::Treated);
        let design = DMatrix::from_fn(50, 3, |i, j| match j {
            0 => 1.0,
            1 => xa[(i, 0)],
            _ => xa[(i, 3)],
        });
        let coef = (design.transpose() * &design).lu().solve(&(design.transpose() * &ya)).unwrap();
        let fitted = &design * coef;
        for i in 0..50 {
            assert!((ea[i] - (ya[i] - fitted[i])).abs() < 1e-8);
        }
    }

    #[test]
    fn delta_n_orthogonality_and_shift_invariance() {
        let s = sparse_sample(60, 5, 2, 1.0);
        let (ea, eb) = estimate_residuals(&s, &[0, 1]).unwrap();
        assert_eq!(estimate_delta_n(&s, (&vec![0.0; 30], &vec![0.0; 30])).unwrap(), 0.0);
        // within-arm covariance with the regressed columns vanishes
        let idx = s.treated_indices();
        for j in [0, 1] {
            let col: Vec<f64> = idx.iter().map(|&i| s.covariates()[(i, j)]).collect();
            let m = col.iter().sum::<f64>() / 30.0;
            let cov: f64 = col.iter().zip(&ea).map(|(c, e)| (c - m) * e).sum::<f64>() / 30.0;
            assert!(cov.abs() < 1e-10);
        }
        let d = estimate_delta_n(&s, (&ea, &eb)).unwrap();
        let shifted = ExperimentSample::new(
            s.covariates().clone(),
            s.assignment().to_vec(),
            s.observed().add_scalar(7.5),
        )
        .unwrap();
        let (sa, sb) = estimate_residuals(&shifted, &[0, 1]).unwrap();
        assert!((estimate_delta_n(&shifted, (&sa, &sb)).unwrap() - d).abs() < 1e-10);
    }

    #[test]
    fn single_resample_support_is_that_fit() {
        let s = sparse_sample(80, 6, 3, 1.0);
        let tuning = quick_tuning();
        let sel = bootstrap_support(&s, Group::Treated, 1, 0.5, &tuning, 5).unwrap();
        let mut rng = stream(5, 0);
        let (x, y) = s.group_data(Group::Treated);
        let rows: Vec<usize> = (0..40).map(|_| rng.random_range(0..40)).collect();
        let xb = x.select_rows(rows.iter());
        let yb = DVector::from_iterator(40, rows.iter().map(|&i| y[i]));
        let fit = fit_group(&xb, &yb, &tuning, rng.next_u64(), CvKinds { lasso: false, lasso_ols: true })
            .unwrap()
            .lasso_ols
            .unwrap()
            .0;
        assert_eq!(sel.support, fit.support);
    }

    #[test]
    fn strong_sparse_signal_recovers_support() {
        let mut hits = 0;
        for seed in 0..10 {
            let s = sparse_sample(120, 10, seed, 1.0);
            let sel = bootstrap_support(&s, Group::Treated, 20, 0.5, &quick_tuning(), seed).unwrap();
            assert!(sel.fractions[0] == 1.0 && sel.fractions[1] == 1.0);
            hits += usize::from(sel.support.starts_with(&[0, 1]));
        }
        assert_eq!(hits, 10);
    }

    #[test]
    fn pure_noise_selects_nothing() {
        let mut empty = 0;
        for seed in 0..10 {
            let s = sparse_sample(120, 10, seed, 0.0);
            let tuning = Tuning {
                fixed_lambdas: Some(vec![1.0]),
                ..quick_tuning()
            };
            let sel = bootstrap_support(&s, Group::Treated, 20, 0.5, &tuning, seed).unwrap();
            empty += usize::from(sel.support.is_empty());
        }
        assert!(empty >= 9);
    }

    #[test]
    fn report_is_complete_and_deterministic() {
        let s = sparse_sample(100, 8, 4, 1.0);
        let opts = DiagnosticsOptions {
            bootstrap: 10,
            tuning: quick_tuning(),
            fourth_moment_threshold: 2.0,
            ..DiagnosticsOptions::default()
        };
        let report = diagnose(&s, &opts).unwrap();
        assert_eq!(report, diagnose(&s, &opts).unwrap());
        assert_eq!(report.tau, 1.0 / 70.0);
        assert_eq!(report.fourth_moments.len(), 8);
        assert!(report.estimated_support.starts_with(&[0, 1]));
        let (lo, hi) = report.gram_eigs_on_support.unwrap();
        assert!(lo <= hi && lo > 0.0);
        assert!(!report.flagged_fourth_moment_columns.is_empty());
        assert!(report.flags().any(|c| c.condition == "moments"));
        assert_eq!(report.not_estimable.len(), 4);
        let json = serde_json::to_value(&report).unwrap();
        for key in ["delta_n_hat", "scaling_stat", "residual_second_moments", "p_treated", "tau"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
