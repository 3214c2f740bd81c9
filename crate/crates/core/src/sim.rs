//! Finite-population Monte Carlo: complete randomization, the nonlinear
//! potential-outcome generator, the replication harness, exact enumeration
//! over all assignments, and the without-replacement concentration check.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AteError, Result};
use crate::estimators::{confidence_interval, estimate_all, AteReport, EstimationOptions, Method, Tuning};
use crate::model::Population;
use crate::random::{standard_normal, stream, student_t1, student_t3, BOOTSTRAP_STREAM, POPULATION_STREAM};
use crate::solver::SolverOptions;

/// Upper limit on the number of assignments visited by exact enumeration.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFamily {
    #[default]
    Gaussian,
    T1,
    T3,
}

impl ErrorFamily {
    fn draw<R: RngCore + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            ErrorFamily::Gaussian => standard_normal(rng),
            ErrorFamily::T1 => student_t1(rng),
            ErrorFamily::T3 => student_t3(rng),
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_ci_level() -> f64 {
    0.95
}
fn default_noise_scale() -> f64 {
    1.0
}
fn default_folds() -> usize {
    10
}
fn default_n_lambda() -> usize {
    100
}
fn default_bootstrap() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n: usize,
    pub p: usize,
    /// Number of active covariates.
    pub s: usize,
    pub rho: f64,
    #[serde(rename = "n_A", alias = "n_treated")]
    pub n_treated: usize,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub linear_only: bool,
    #[serde(default = "default_true")]
    pub hidden_covariates: bool,
    #[serde(default)]
    pub error_family: ErrorFamily,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    /// Multiplier on the idiosyncratic error draws.
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_n_lambda")]
    pub n_lambda: usize,
    /// Bootstrap resamples for the standard errors of the summary statistics.
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "default_true")]
    pub df_adjust: bool,
}

impl SimulationConfig {
    /// The simulation design with `n = 250`, `s = 10`, `rho = 0`, `n_A = 125`.
    pub fn reference(p: usize, replications: usize, seed: u64) -> Self {
        Self {
            n: 250,
            p,
            s: 10,
            rho: 0.0,
            n_treated: 125,
            replications,
            seed,
            linear_only: false,
            hidden_covariates: true,
            error_family: ErrorFamily::Gaussian,
            methods: default_methods(),
            ci_level: 0.95,
            noise_scale: 1.0,
            folds: 10,
            n_lambda: 100,
            bootstrap: 500,
            df_adjust: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(AteError::InvalidInput(msg));
        if self.n < 2 {
            return fail(format!("n must be at least 2, got {}", self.n));
        }
        if self.s > self.p {
            return fail(format!("s = {} exceeds p = {}", self.s, self.p));
        }
        if self.n_treated < 1 || self.n_treated >= self.n {
            return fail(format!("need 1 <= n_A <= n-1, got n_A = {} with n = {}", self.n_treated, self.n));
        }
        if self.replications < 1 {
            return fail("replications must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            return fail(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return fail(format!("noise_scale must be finite and non-negative, got {}", self.noise_scale));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return fail(format!("ci_level must lie in (0, 1), got {}", self.ci_level));
        }
        if self.methods.is_empty() {
            return fail("at least one method is required".into());
        }
        Ok(())
    }

    /// Estimation options for one replication; `seed` drives the CV folds.
    pub fn estimation_options(&self, seed: u64) -> EstimationOptions {
        EstimationOptions {
            ci_level: self.ci_level,
            df_adjust: self.df_adjust,
            tuning: Tuning {
                n_lambda: self.n_lambda,
                min_ratio: None,
                fixed_lambdas: None,
                folds: self.folds,
                seed,
                solver: SolverOptions::default(),
            },
        }
    }
}

/// `Sigma_ij = rho^|i-j|`.
pub fn toeplitz_covariance(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { rho.powi(i.abs_diff(j) as i32) })
}

/// Uniformly random size-`n_treated` subset drawn from `rng`, as a 0/1 vector.
pub fn random_assignment<R: Rng + ?Sized>(rng: &mut R, n: usize, n_treated: usize) -> Result<Vec<u8>> {
    if n_treated < 1 || n_treated >= n {
        return Err(AteError::InvalidInput(format!(
            "need 1 <= n_A <= n-1, got n_A = {n_treated} with n = {n}"
        )));
    }
    let mut t = vec![0u8; n];
    for i in index::sample(rng, n, n_treated) {
        t[i] = 1;
    }
    Ok(t)
}

pub fn complete_randomization(n: usize, n_treated: usize, seed: u64) -> Result<Vec<u8>> {
    random_assignment(&mut ChaCha8Rng::seed_from_u64(seed), n, n_treated)
}

/// Coefficients drawn for a synthetic population; only the first `s`
/// entries of the `p`-dimensional model are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCoefficients {
    pub beta_a1: Vec<f64>,
    pub beta_a2: Vec<f64>,
    pub beta_b1: Vec<f64>,
    pub beta_b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPopulation {
    pub population: Population,
    pub coefficients: OutcomeCoefficients,
}

pub fn generate_population(config: &SimulationConfig) -> Result<Population> {
    Ok(generate_population_detailed(config)?.population)
}

/// Draws covariates, coefficients, hidden covariates and errors from the
/// population stream of `config.seed`. All draws happen regardless of
/// `linear_only` and `hidden_covariates`, so toggling them changes nothing
/// else about the population.
pub fn generate_population_detailed(config: &SimulationConfig) -> Result<SyntheticPopulation> {
    config.validate()?;
    let (n, p, s) = (config.n, config.p, config.s);
    let mut rng = stream(config.seed, POPULATION_STREAM);
    let sigma = toeplitz_covariance(p, config.rho);
    let chol = sigma
        .cholesky()
        .ok_or_else(|| AteError::InvalidInput("covariance is not positive definite".into()))?;
    let l = chol.l();
    let correlated_rows = |rng: &mut ChaCha8Rng, dim: usize| {
        let l_dim = l.view((0, 0), (dim, dim));
        let mut m = DMatrix::zeros(n, dim);
        let mut z = DVector::zeros(dim);
        for i in 0..n {
            for v in z.iter_mut() {
                *v = standard_normal(rng);
            }
            let row = l_dim * &z;
            for j in 0..dim {
                m[(i, j)] = row[j];
            }
        }
        m
    };
    let x = correlated_rows(&mut rng, p);
    let mut draw = |scale: f64| -> Vec<f64> { (0..s).map(|_| scale * student_t3(&mut rng)).collect() };
    let beta_a1 = draw(1.0);
    let mut beta_a2 = draw(0.1);
    let inc_b1 = draw(1.0);
    let inc_b2 = draw(0.1);
    let beta_b1: Vec<f64> = beta_a1.iter().zip(&inc_b1).map(|(a, d)| a + d).collect();
    let mut beta_b2: Vec<f64> = beta_a2.iter().zip(&inc_b2).map(|(a, d)| a + d).collect();
    // the leading s x s block of a Toeplitz Cholesky factor is the factor of
    // the leading block, so only the s hidden covariates that matter are drawn
    let z = correlated_rows(&mut rng, s);
    let noise_a: Vec<f64> = (0..n).map(|_| config.error_family.draw(&mut rng)).collect();
    let noise_b: Vec<f64> = (0..n).map(|_| config.error_family.draw(&mut rng)).collect();
    if config.linear_only {
        beta_a2.fill(0.0);
        beta_b2.fill(0.0);
    }
    let dot = |m: &DMatrix<f64>, i: usize, beta: &[f64]| -> f64 { (0..s).map(|j| m[(i, j)] * beta[j]).sum() };
    let outcome = |i: usize, b1: &[f64], b2: &[f64], noise: f64| {
        let hidden = if config.hidden_covariates { dot(&z, i, b1) } else { 0.0 };
        dot(&x, i, b1) + dot(&x, i, b2).exp() + hidden + config.noise_scale * noise
    };
    let a = DVector::from_iterator(n, (0..n).map(|i| outcome(i, &beta_a1, &beta_a2, noise_a[i])));
    let b = DVector::from_iterator(n, (0..n).map(|i| outcome(i, &beta_b1, &beta_b2, noise_b[i])));
    Ok(SyntheticPopulation {
        population: Population::new(x, a, b)?,
        coefficients: OutcomeCoefficients {
            beta_a1,
            beta_a2,
            beta_b1,
            beta_b2,
        },
    })
}

/// One method's outcome in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub method: Method,
    pub estimate: Option<f64>,
    pub sigma2_hat: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub covered: Option<bool>,
    pub selected_treated: Option<usize>,
    pub selected_control: Option<usize>,
    pub error: Option<String>,
}

impl ReplicationRecord {
    fn from_result(replication: usize, method: Method, result: Result<AteReport>, truth: f64) -> Self {
        match result {
            Ok(r) => Self {
                replication,
                method,
                estimate: Some(r.estimate),
                sigma2_hat: Some(r.sigma2_hat),
                ci_low: Some(r.ci.0),
                ci_high: Some(r.ci.1),
                covered: Some(r.covers(truth)),
                selected_treated: r.selected_treated,
                selected_control: r.selected_control,
                error: None,
            },
            Err(e) => Self {
                replication,
                method,
                estimate: None,
                sigma2_hat: None,
                ci_low: None,
                ci_high: None,
                covered: None,
                selected_treated: None,
                selected_control: None,
                error: Some(e.to_string()),
            },
        }
    }
}

/// The headline statistics that are also bootstrapped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    /// Mean estimate minus the true ATE (signed).
    pub bias: f64,
    /// Standard deviation of the estimates with divisor R.
    pub sd: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_ci_length: f64,
    /// Mean of the estimated standard deviation `sqrt(sigma2_hat)`.
    pub mean_sd_estimate: f64,
    pub mean_selected_treated: Option<f64>,
    pub mean_selected_control: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub successes: usize,
    pub failures: usize,
    #[serde(flatten)]
    pub stats: SummaryStats,
    pub bootstrap_se: SummaryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub true_ate: f64,
    pub replications: usize,
    pub ci_level: f64,
    pub bootstrap_resamples: usize,
    pub methods: Vec<MethodSummary>,
}

impl MonteCarloSummary {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn total_failures(&self) -> usize {
        self.methods.iter().map(|m| m.failures).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloRun {
    pub summary: MonteCarloSummary,
    pub records: Vec<ReplicationRecord>,
    /// Population size, needed to rebuild intervals from the records.
    pub n: usize,
}

impl MonteCarloRun {
    /// Coverage of `method` recomputed at another confidence level from the
    /// stored estimates and variances.
    pub fn coverage_at(&self, method: Method, level: f64) -> f64 {
        let n = self.n;
        let truth = self.summary.true_ate;
        let (mut hit, mut total) = (0usize, 0usize);
        for r in self.records.iter().filter(|r| r.method == method) {
            if let (Some(e), Some(v)) = (r.estimate, r.sigma2_hat) {
                let (lo, hi) = confidence_interval(e, v, n, level);
                total += 1;
                hit += usize::from(lo <= truth && truth <= hi);
            }
        }
        hit as f64 / total.max(1) as f64
    }
}

fn stats_of(records: &[&ReplicationRecord], truth: f64) -> SummaryStats {
    let m = records.len() as f64;
    let est: Vec<f64> = records.iter().map(|r| r.estimate.expect("successful record")).collect();
    let mean = est.iter().sum::<f64>() / m;
    let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / m).sqrt();
    let rmse = (est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / m).sqrt();
    let coverage = records.iter().filter(|r| r.covered == Some(true)).count() as f64 / m;
    let mean_ci_length = records
        .iter()
        .map(|r| r.ci_high.expect("ci") - r.ci_low.expect("ci"))
        .sum::<f64>()
        / m;
    let mean_sd_estimate = records.iter().map(|r| r.sigma2_hat.expect("variance").sqrt()).sum::<f64>() / m;
    let mean_count = |f: fn(&ReplicationRecord) -> Option<usize>| -> Option<f64> {
        let counts: Option<Vec<usize>> = records.iter().map(|r| f(r)).collect();
        counts.map(|c| c.iter().sum::<usize>() as f64 / m)
    };
    SummaryStats {
        bias: mean - truth,
        sd,
        rmse,
        coverage,
        mean_ci_length,
        mean_sd_estimate,
        mean_selected_treated: mean_count(|r| r.selected_treated),
        mean_selected_control: mean_count(|r| r.selected_control),
    }
}

fn bootstrap_se(records: &[&ReplicationRecord], truth: f64, resamples: usize, rng: &mut ChaCha8Rng) -> SummaryStats {
    let m = records.len();
    let mut draws = Vec::with_capacity(resamples);
    let mut resample = Vec::with_capacity(m);
    for _ in 0..resamples {
        resample.clear();
        resample.extend((0..m).map(|_| records[rng.random_range(0..m)]));
        draws.push(stats_of(&resample, truth));
    }
    let sd = |f: &dyn Fn(&SummaryStats) -> f64| -> f64 {
        if draws.len() < 2 {
            return 0.0;
        }
        let v: Vec<f64> = draws.iter().map(f).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let has_selection = records.first().is_some_and(|r| r.selected_treated.is_some());
    SummaryStats {
        bias: sd(&|s| s.bias),
        sd: sd(&|s| s.sd),
        rmse: sd(&|s| s.rmse),
        coverage: sd(&|s| s.coverage),
        mean_ci_length: sd(&|s| s.mean_ci_length),
        mean_sd_estimate: sd(&|s| s.mean_sd_estimate),
        mean_selected_treated: has_selection.then(|| sd(&|s| s.mean_selected_treated.unwrap_or(0.0))),
        mean_selected_control: has_selection.then(|| sd(&|s| s.mean_selected_control.unwrap_or(0.0))),
    }
}

fn nan_stats() -> SummaryStats {
    SummaryStats {
        bias: f64::NAN,
        sd: f64::NAN,
        rmse: f64::NAN,
        coverage: f64::NAN,
        mean_ci_length: f64::NAN,
        mean_sd_estimate: f64::NAN,
        mean_selected_treated: None,
        mean_selected_control: None,
    }
}

/// Aggregate per-replication records in replication order.
pub fn summarize(records: &[ReplicationRecord], config: &SimulationConfig, truth: f64) -> MonteCarloSummary {
    let methods = config
        .methods
        .iter()
        .map(|&method| {
            let all: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == method).collect();
            let ok: Vec<&ReplicationRecord> = all.iter().copied().filter(|r| r.error.is_none()).collect();
            let (stats, se) = if ok.is_empty() {
                (nan_stats(), nan_stats())
            } else {
                let mut rng = stream(config.seed.wrapping_add(method as u64), BOOTSTRAP_STREAM);
                (stats_of(&ok, truth), bootstrap_se(&ok, truth, config.bootstrap, &mut rng))
            };
            MethodSummary {
                method,
                successes: ok.len(),
                failures: all.len() - ok.len(),
                stats,
                bootstrap_se: se,
            }
        })
        .collect();
    MonteCarloSummary {
        true_ate: truth,
        replications: config.replications,
        ci_level: config.ci_level,
        bootstrap_resamples: config.bootstrap,
        methods,
    }
}

/// Run one replication: draw its assignment from stream `r`, reveal the
/// outcomes and apply every configured method.
pub fn run_replication(pop: &Population, config: &SimulationConfig, r: usize) -> Vec<ReplicationRecord> {
    let mut rng = stream(config.seed, r as u64);
    let truth = pop.true_ate();
    let sample = random_assignment(&mut rng, pop.n(), config.n_treated).and_then(|t| pop.reveal(&t));
    let cv_seed = rng.next_u64();
    match sample {
        Ok(sample) => estimate_all(&sample, &config.methods, &config.estimation_options(cv_seed))
            .into_iter()
            .map(|(m, res)| ReplicationRecord::from_result(r, m, res, truth))
            .collect(),
        Err(e) => config
            .methods
            .iter()
            .map(|&m| ReplicationRecord::from_result(r, m, Err(e.clone()), truth))
            .collect(),
    }
}

/// Replications run on the current rayon pool and are aggregated in
/// replication order, so the result does not depend on the thread count.
pub fn run_monte_carlo(pop: &Population, config: &SimulationConfig) -> Result<MonteCarloRun> {
    config.validate()?;
    if pop.n() != config.n || pop.p() != config.p {
        return Err(AteError::DimensionMismatch(format!(
            "population is {} x {}, config expects {} x {}",
            pop.n(),
            pop.p(),
            config.n,
            config.p
        )));
    }
    let records: Vec<ReplicationRecord> = (0..config.replications)
        .into_par_iter()
        .flat_map_iter(|r| run_replication(pop, config, r))
        .collect();
    let summary = summarize(&records, config, pop.true_ate());
    Ok(MonteCarloRun {
        summary,
        records,
        n: pop.n(),
    })
}

/// [`run_monte_carlo`] on a dedicated pool with `threads` workers.
pub fn run_monte_carlo_with_threads(pop: &Population, config: &SimulationConfig, threads: usize) -> Result<MonteCarloRun> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| AteError::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(|| run_monte_carlo(pop, config))
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Calls `f` with every 0/1 vector of length `n` with `k` ones, in
/// lexicographic order of the treated index sets.
pub fn for_each_assignment<F: FnMut(&[u8]) -> Result<()>>(n: usize, k: usize, mut f: F) -> Result<u128> {
    let count = binomial(n, k);
    if count > ENUMERATION_LIMIT {
        return Err(AteError::TooManyAssignments {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut t = vec![0u8; n];
    loop {
        t.fill(0);
        for &i in &idx {
            t[i] = 1;
        }
        f(&t)?;
        let mut pos = k;
        while pos > 0 && idx[pos - 1] == n - k + pos - 1 {
            pos -= 1;
        }
        if pos == 0 {
            break;
        }
        idx[pos - 1] += 1;
        for q in pos..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
    Ok(count)
}

/// Exact randomization distribution of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactDistribution {
    pub method: Method,
    pub assignments: u128,
    pub true_ate: f64,
    pub mean: f64,
    /// Variance over assignments with divisor equal to their count.
    pub variance: f64,
    /// Mean of `sigma2_hat / n`, the estimated variance of the estimator.
    pub mean_variance_estimate: f64,
    pub coverage: f64,
}

pub fn enumerate_assignments(
    pop: &Population,
    n_treated: usize,
    method: Method,
    opts: &EstimationOptions,
) -> Result<ExactDistribution> {
    if n_treated < 1 || n_treated >= pop.n() {
        return Err(AteError::InvalidInput(format!(
            "need 1 <= n_A <= n-1, got n_A = {n_treated} with n = {}",
            pop.n()
        )));
    }
    let truth = pop.true_ate();
    let mut estimates = Vec::new();
    let mut var_sum = 0.0;
    let mut covered = 0usize;
    let count = for_each_assignment(pop.n(), n_treated, |t| {
        let sample = pop.reveal(t)?;
        let (_, report) = estimate_all(&sample, &[method], opts).pop().expect("one method");
        let report = report?;
        estimates.push(report.estimate);
        var_sum += report.sigma2_hat / pop.n() as f64;
        covered += usize::from(report.covers(truth));
        Ok(())
    })?;
    let m = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / m;
    let variance = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / m;
    Ok(ExactDistribution {
        method,
        assignments: count,
        true_ate: truth,
        mean,
        variance,
        mean_variance_estimate: var_sum / m,
        coverage: covered as f64 / m,
    })
}

/// `min{1/70, (3 p_A)^2 / 70, (3 - 3 p_A)^2 / 70}`.
pub fn concentration_tau(p_treated: f64) -> f64 {
    let a: f64 = 1.0 / 70.0;
    let b = (3.0 * p_treated).powi(2) / 70.0;
    let c = (3.0 - 3.0 * p_treated).powi(2) / 70.0;
    a.min(b).min(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub t: f64,
    pub empirical: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationTable {
    pub exact: bool,
    /// Assignments enumerated, or Monte Carlo draws.
    pub draws: u128,
    pub p_treated: f64,
    pub tau: f64,
    /// Population variance of `z` with divisor `n`.
    pub sigma2: f64,
    pub rows: Vec<TailRow>,
}

impl ConcentrationTable {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.empirical > r.bound).count()
    }
}

/// Tail `P(zbar_A - zbar >= t)` under sampling without replacement next to
/// the bound `exp(-p_A n_A t^2 / ((1 + tau)^2 sigma^2))`. Enumerates every
/// subset when there are at most [`ENUMERATION_LIMIT`], otherwise draws
/// `trials` random subsets.
pub fn concentration_bound_check(
    z: &[f64],
    n_treated: usize,
    t_grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<ConcentrationTable> {
    let n = z.len();
    if n < 2 {
        return Err(AteError::InvalidInput(format!("need at least 2 values, got {n}")));
    }
    if n_treated < 1 || n_treated >= n {
        return Err(AteError::InvalidInput(format!(
            "need 1 <= n_A <= n-1, got n_A = {n_treated} with n = {n}"
        )));
    }
    crate::model::check_finite(z)?;
    if let Some(&t) = t_grid.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(AteError::InvalidInput(format!("t values must be finite and non-negative, got {t}")));
    }
    let zbar = z.iter().sum::<f64>() / n as f64;
    let sigma2 = z.iter().map(|v| (v - zbar).powi(2)).sum::<f64>() / n as f64;
    let p_treated = n_treated as f64 / n as f64;
    let tau = concentration_tau(p_treated);
    let constant = z.iter().all(|v| *v == z[0]);
    let mut hits = vec![0u64; t_grid.len()];
    let mut tally = |dev: f64| {
        for (h, &t) in hits.iter_mut().zip(t_grid) {
            if constant {
                *h += u64::from(t == 0.0);
            } else if dev >= t {
                *h += 1;
            }
        }
    };
    let (exact, draws) = if binomial(n, n_treated) <= ENUMERATION_LIMIT {
        let count = for_each_assignment(n, n_treated, |t| {
            let s: f64 = (0..n).filter(|&i| t[i] == 1).map(|i| z[i]).sum();
            tally(s / n_treated as f64 - zbar);
            Ok(())
        })?;
        (true, count)
    } else {
        if trials == 0 {
            return Err(AteError::InvalidInput("Monte Carlo check needs at least one trial".into()));
        }
        let mut rng = stream(seed, 0);
        for _ in 0..trials {
            let s: f64 = index::sample(&mut rng, n, n_treated).iter().map(|i| z[i]).sum();
            tally(s / n_treated as f64 - zbar);
        }
        (false, trials as u128)
    };
    let rows = t_grid
        .iter()
        .zip(&hits)
        .map(|(&t, &h)| {
            let bound = if t == 0.0 {
                1.0
            } else if sigma2 == 0.0 {
                0.0
            } else {
                (-p_treated * n_treated as f64 * t * t / ((1.0 + tau).powi(2) * sigma2)).exp()
            };
            TailRow {
                t,
                empirical: h as f64 / draws as f64,
                bound,
            }
        })
        .collect();
    Ok(ConcentrationTable {
        exact,
        draws,
        p_treated,
        tau,
        sigma2,
        rows,
    })
}
