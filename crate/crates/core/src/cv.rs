//! K-fold cross-validation for the Lasso and for the select-then-refit
//! Lasso+OLS pipeline.
//!
//! Both procedures share one Lasso path per training split. For cv(Lasso)
//! each grid point is scored by the held-out error of the Lasso fit itself;
//! for cv(Lasso+OLS) it is scored by the held-out error of an OLS refit on
//! the Lasso support, reusing the previous refit whenever the support is
//! unchanged from the preceding grid point.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AteError, Result};
use crate::solver::{AdjustmentFit, CdState, CenteredDesign, LambdaGrid, SolverOptions};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    /// `(training rows, held-out rows)` for fold `fold`.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.fold_of.len()).partition(|&i| self.fold_of[i] != fold)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Uniformly random balanced partition of `0..n` into `k` folds.
pub fn kfold_partition(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(AteError::InvalidInput(format!(
            "need 2 <= K <= n for K-fold CV, got K = {k}, n = {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldAssignment { fold_of, k, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 10,
            seed: 0,
            solver: SolverOptions::default(),
        }
    }
}

/// A (grid index, fold) whose OLS refit was ill-posed and fell back to the
/// Lasso coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefitFallback {
    pub lambda_index: usize,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub grid: LambdaGrid,
    pub cv_error: Vec<f64>,
    pub optimal_lambda: f64,
    pub optimal_index: usize,
    /// `per_fold_error[j][k]`: held-out MSE at grid point `j` on fold `k`.
    pub per_fold_error: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallbacks: Vec<RefitFallback>,
}

impl CvResult {
    fn from_errors(grid: &LambdaGrid, per_fold_error: Vec<Vec<f64>>, fallbacks: Vec<RefitFallback>) -> Self {
        let cv_error: Vec<f64> = per_fold_error
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect();
        let optimal_index = argmin_prefer_first(&cv_error);
        Self {
            grid: grid.clone(),
            optimal_lambda: grid.values()[optimal_index],
            optimal_index,
            cv_error,
            per_fold_error,
            fallbacks,
        }
    }
}

/// Index of the smallest value; ties go to the earliest index, which on a
/// decreasing grid is the larger penalty.
fn argmin_prefer_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = j;
        }
    }
    best
}

/// Which criteria to score on the shared fold paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CvKinds {
    pub lasso: bool,
    pub lasso_ols: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvPair {
    pub lasso: Option<CvResult>,
    pub lasso_ols: Option<CvResult>,
}

pub fn cv_lasso(x: &DMatrix<f64>, y: &DVector<f64>, grid: &LambdaGrid, opts: &CvOptions) -> Result<CvResult> {
    let kinds = CvKinds {
        lasso: true,
        lasso_ols: false,
    };
    Ok(cross_validate(x, y, grid, opts, kinds)?.lasso.expect("requested"))
}

pub fn cv_lasso_ols(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &LambdaGrid,
    opts: &CvOptions,
) -> Result<CvResult> {
    let kinds = CvKinds {
        lasso: false,
        lasso_ols: true,
    };
    Ok(cross_validate(x, y, grid, opts, kinds)?.lasso_ols.expect("requested"))
}

struct FoldScores {
    lasso: Vec<f64>,
    lasso_ols: Vec<f64>,
    fallbacks: Vec<usize>,
}

/// Score both criteria from one Lasso path per training split.
pub fn cross_validate(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &LambdaGrid,
    opts: &CvOptions,
    kinds: CvKinds,
) -> Result<CvPair> {
    if x.nrows() != y.len() {
        return Err(AteError::DimensionMismatch(format!(
            "design has {} rows, outcome has {}",
            x.nrows(),
            y.len()
        )));
    }
    let folds = kfold_partition(y.len(), opts.folds, opts.seed)?;
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds.k).map(|f| folds.split(f)).collect();
    if let Some((train, _)) = splits.iter().find(|(train, _)| train.len() < 2) {
        return Err(AteError::GroupTooSmall {
            group: "cv training split",
            size: train.len(),
            required: 2,
        });
    }
    let scores: Vec<FoldScores> = splits
        .par_iter()
        .map(|(train, test)| score_fold(x, y.as_slice(), train, test, grid, &opts.solver, kinds))
        .collect::<Result<_>>()?;

    let j_count = grid.len();
    let table = |pick: &dyn Fn(&FoldScores) -> &Vec<f64>| -> Vec<Vec<f64>> {
        (0..j_count)
            .map(|j| scores.iter().map(|s| pick(s)[j]).collect())
            .collect()
    };
    let lasso = kinds
        .lasso
        .then(|| CvResult::from_errors(grid, table(&|s| &s.lasso), Vec::new()));
    let lasso_ols = kinds.lasso_ols.then(|| {
        let fallbacks = scores
            .iter()
            .enumerate()
            .flat_map(|(fold, s)| {
                s.fallbacks.iter().map(move |&lambda_index| RefitFallback { lambda_index, fold })
            })
            .collect();
        CvResult::from_errors(grid, table(&|s| &s.lasso_ols), fallbacks)
    });
    Ok(CvPair { lasso, lasso_ols })
}

fn score_fold(
    x: &DMatrix<f64>,
    y: &[f64],
    train: &[usize],
    test: &[usize],
    grid: &LambdaGrid,
    solver: &SolverOptions,
    kinds: CvKinds,
) -> Result<FoldScores> {
    let mut design = CenteredDesign::from_rows(x, y, train)?;
    let mut state = CdState::new(&design);
    let j_count = grid.len();
    let mut out = FoldScores {
        lasso: Vec::with_capacity(j_count),
        lasso_ols: Vec::with_capacity(j_count),
        fallbacks: Vec::new(),
    };
    // refit at the virtual lambda_0: empty support, zero coefficients
    let mut prev_support: Vec<usize> = Vec::new();
    let mut prev_refit = vec![0.0; design.p];
    for (j, &lambda) in grid.values().iter().enumerate() {
        design
            .solve(&mut state, lambda, solver)
            .map_err(|e| AteError::PathFailure {
                index: j,
                source: Box::new(e),
            })?;
        let fit = design.fit_from_state(&state, lambda);
        if kinds.lasso {
            out.lasso.push(held_out_mse(x, y, test, &fit.beta, &fit.support, &design));
        }
        if kinds.lasso_ols {
            if fit.support != prev_support {
                prev_refit = match design.ols_beta(&fit.support) {
                    Ok(beta) => beta,
                    Err(AteError::RankDeficient { .. }) | Err(AteError::SupportTooLarge { .. }) => {
                        out.fallbacks.push(j);
                        fit.beta.clone()
                    }
                    Err(e) => return Err(e),
                };
                prev_support = fit.support.clone();
            }
            out.lasso_ols
                .push(held_out_mse(x, y, test, &prev_refit, &prev_support, &design));
        }
    }
    Ok(out)
}

/// Held-out MSE predicting with training-split means as the intercept.
fn held_out_mse(
    x: &DMatrix<f64>,
    y: &[f64],
    test: &[usize],
    beta: &[f64],
    support: &[usize],
    design: &CenteredDesign,
) -> f64 {
    let sse: f64 = test
        .iter()
        .map(|&i| {
            let mut pred = design.y_mean;
            for &j in support {
                pred += (x[(i, j)] - design.x_mean[j]) * beta[j];
            }
            let r = y[i] - pred;
            r * r
        })
        .sum();
    sse / test.len() as f64
}

/// Full-group Lasso fits at each requested grid index, from one warm-started
/// path down to the smallest requested penalty.
pub fn full_group_fits(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &LambdaGrid,
    indices: &[usize],
    solver: &SolverOptions,
) -> Result<Vec<AdjustmentFit>> {
    let deepest = indices.iter().copied().max().unwrap_or(0);
    if deepest >= grid.len() {
        return Err(AteError::InvalidInput(format!(
            "grid index {deepest} out of range for {} values",
            grid.len()
        )));
    }
    let mut design = CenteredDesign::new(x, y)?;
    let path = design.path(&grid.values()[..=deepest], solver)?;
    Ok(indices.iter().map(|&j| path[j].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{standard_normal, stream};
    use crate::solver::{fit_ols, lambda_grid, lambda_max};

    fn instance(n: usize, p: usize, noise: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = stream(seed, 1);
        let x = DMatrix::from_fn(n, p, |_, _| standard_normal(&mut rng));
        let y = DVector::from_fn(n, |i, _| 2.0 * x[(i, 0)] - x[(i, 1)] + noise * standard_normal(&mut rng));
        (x, y)
    }

    #[test]
    fn partition_balance_and_determinism() {
        let f = kfold_partition(10, 5, 3).unwrap();
        assert_eq!(f.sizes(), vec![2; 5]);
        let mut sizes = kfold_partition(10, 3, 3).unwrap().sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert_eq!(kfold_partition(10, 3, 9).unwrap(), kfold_partition(10, 3, 9).unwrap());
        assert_ne!(kfold_partition(50, 5, 1).unwrap(), kfold_partition(50, 5, 2).unwrap());
        assert!(kfold_partition(4, 5, 0).is_err());
        assert!(kfold_partition(4, 1, 0).is_err());
    }

    #[test]
    fn null_grid_scores_held_out_variance() {
        let (x, y) = instance(30, 3, 1.0, 1);
        // above every training split's lambda_max, so each fold fits the null model
        let grid = LambdaGrid::new(vec![10.0 * lambda_max(&x, &y).unwrap()]).unwrap();
        let opts = CvOptions {
            folds: 5,
            seed: 4,
            ..Default::default()
        };
        let cv = cv_lasso(&x, &y, &grid, &opts).unwrap();
        assert_eq!(cv.optimal_index, 0);
        let folds = kfold_partition(30, 5, 4).unwrap();
        let mut expected = 0.0;
        for k in 0..5 {
            let (train, test) = folds.split(k);
            let m = train.iter().map(|&i| y[i]).sum::<f64>() / train.len() as f64;
            expected += test.iter().map(|&i| (y[i] - m).powi(2)).sum::<f64>() / test.len() as f64;
        }
        assert!((cv.cv_error[0] - expected / 5.0).abs() < 1e-12);
        let cv2 = cv_lasso_ols(&x, &y, &grid, &opts).unwrap();
        assert_eq!(cv.per_fold_error, cv2.per_fold_error);
    }

    #[test]
    fn noiseless_signal_prefers_smallest_lambda() {
        let (x, y) = instance(40, 2, 0.0, 2);
        let grid = lambda_grid(&x, &y, 20, Some(1e-4)).unwrap();
        let cv = cv_lasso(&x, &y, &grid, &CvOptions::default()).unwrap();
        assert_eq!(cv.optimal_index, 19);
        assert!(cv.cv_error[19] < cv.cv_error[0]);
    }

    #[test]
    fn cv_error_is_fold_mean() {
        let (x, y) = instance(60, 8, 1.0, 3);
        let grid = lambda_grid(&x, &y, 15, None).unwrap();
        let cv = cv_lasso_ols(&x, &y, &grid, &CvOptions::default()).unwrap();
        for (j, row) in cv.per_fold_error.iter().enumerate() {
            assert_eq!(row.len(), 10);
            assert_eq!(cv.cv_error[j], row.iter().sum::<f64>() / 10.0);
        }
        let best = cv.cv_error[cv.optimal_index];
        assert!(cv.cv_error.iter().all(|e| *e >= best));
        assert!(cv.cv_error[..cv.optimal_index].iter().all(|e| *e > best));
    }

    #[test]
    fn refit_reused_when_support_unchanged() {
        let (x, y) = instance(50, 6, 0.5, 4);
        let grid = lambda_grid(&x, &y, 40, Some(1e-3)).unwrap();
        let opts = CvOptions::default();
        let folds = kfold_partition(50, 10, opts.seed).unwrap();
        let cv = cv_lasso_ols(&x, &y, &grid, &opts).unwrap();
        let mut reuse_seen = false;
        for k in 0..10 {
            let (train, test) = folds.split(k);
            let xt = x.select_rows(train.iter());
            let yt = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
            let path = crate::solver::lasso_path(&xt, &yt, &grid, &opts.solver).unwrap();
            for j in 1..grid.len() {
                if path[j].support == path[j - 1].support {
                    reuse_seen = true;
                    assert_eq!(cv.per_fold_error[j][k], cv.per_fold_error[j - 1][k]);
                }
            }
            // explicit refit oracle at the last grid point
            let last = grid.len() - 1;
            let refit = fit_ols(&xt, &yt, Some(&path[last].support)).unwrap();
            let mse: f64 = test
                .iter()
                .map(|&i| (y[i] - refit.predict_row(x.row(i).iter().copied())).powi(2))
                .sum::<f64>()
                / test.len() as f64;
            assert!((mse - cv.per_fold_error[last][k]).abs() < 1e-8 * (1.0 + mse));
        }
        assert!(reuse_seen);
    }

    #[test]
    fn leave_one_out_invariant_to_row_order() {
        let (x, y) = instance(15, 3, 1.0, 5);
        let grid = lambda_grid(&x, &y, 10, None).unwrap();
        let opts = CvOptions {
            folds: 15,
            seed: 1,
            ..Default::default()
        };
        let cv = cv_lasso(&x, &y, &grid, &opts).unwrap();
        let perm: Vec<usize> = (0..15).rev().collect();
        let xp = x.select_rows(perm.iter());
        let yp = DVector::from_iterator(15, perm.iter().map(|&i| y[i]));
        let cvp = cv_lasso(&xp, &yp, &grid, &opts).unwrap();
        for j in 0..10 {
            assert!((cv.cv_error[j] - cvp.cv_error[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn ill_posed_refits_fall_back() {
        let (mut x, _) = instance(30, 3, 0.5, 6);
        for i in 0..30 {
            x[(i, 2)] = 0.5 * (x[(i, 0)] + x[(i, 1)]);
        }
        let y = DVector::from_fn(30, |i, _| x[(i, 0)] + x[(i, 1)] + 0.1 * x[(i, 0)].sin());
        let grid = lambda_grid(&x, &y, 30, Some(1e-3)).unwrap();
        let opts = CvOptions {
            folds: 4,
            ..Default::default()
        };
        let cv = cv_lasso_ols(&x, &y, &grid, &opts).unwrap();
        assert!(cv.cv_error.iter().all(|e| e.is_finite()));
        assert!(!cv.fallbacks.is_empty());
    }

    #[test]
    fn deterministic_results() {
        let (x, y) = instance(40, 10, 1.0, 7);
        let grid = lambda_grid(&x, &y, 20, None).unwrap();
        let opts = CvOptions::default();
        let kinds = CvKinds {
            lasso: true,
            lasso_ols: true,
        };
        let a = cross_validate(&x, &y, &grid, &opts, kinds).unwrap();
        let b = cross_validate(&x, &y, &grid, &opts, kinds).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lasso.unwrap(), cv_lasso(&x, &y, &grid, &opts).unwrap());
    }
}
