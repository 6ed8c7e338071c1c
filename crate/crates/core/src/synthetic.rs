//! Synthetic instances, recovery metrics and the experiment runner.
//!
//! Random streams: every instance seeds one `ChaCha8Rng` from `seed` and
//! switches streams per purpose (0 support, 1 train, 2 validation, 3 test),
//! so splits are independent of each other's sizes.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::covsel::solve_covsel;
use crate::cutplane::{SolveOptions, WarmStart};
use crate::error::{Error, Result};
use crate::linalg::{inverse_spd, SymmetricMatrix};
use crate::model::{self, holdout_nll, Criterion, RegKind, TuneData, TuningGrid};
use crate::support::{pair_count, support_of, PairTable, Support};

const STREAM_SUPPORT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_VALIDATION: u64 = 2;
const STREAM_TEST: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `floor(t p(p-1)/2)`, robust to `t` given as a rounded ratio.
pub fn budget_from_fraction(p: usize, t: f64) -> usize {
    (t * pair_count(p) as f64 + 1e-9).floor() as usize
}

/// `(1/n) sum (x - xbar)(x - xbar)'` over the rows of `x`.
pub fn sample_covariance(x: &DMatrix<f64>) -> Result<SymmetricMatrix> {
    let (n, p) = x.shape();
    if n == 0 || p == 0 {
        return Err(Error::invalid("sample matrix is empty"));
    }
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let s = centered.transpose() * &centered / n as f64;
    Ok(SymmetricMatrix::from_fn(p, |i, j| {
        0.5 * (s[(i, j)] + s[(j, i)])
    }))
}

/// Sample covariance of equal-length rows.
pub fn covariance_from_rows(rows: &[Vec<f64>]) -> Result<SymmetricMatrix> {
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::invalid("rows have different lengths"));
    }
    sample_covariance(&DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]))
}

/// `n` draws from `N(0, cov)` as rows.
pub fn sample_gaussian(
    cov: &SymmetricMatrix,
    n: usize,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    let p = cov.dim();
    let chol = DMatrix::from_row_slice(p, p, cov.as_slice())
        .cholesky()
        .ok_or(Error::NotPositiveDefinite {
            index: 0,
            pivot: f64::NAN,
        })?;
    let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(z * chol.l().transpose())
}

fn random_support(p: usize, k: usize, rng: &mut impl Rng) -> Support {
    let table = PairTable::new(p);
    let mut idx = index::sample(rng, table.len(), k).into_vec();
    idx.sort_unstable();
    Support::from_indices(&table, idx)
}

/// Subproblem benchmark instance: `n = p` samples from `N(0, (I + ee')^-1)`
/// and a uniformly random support with `floor(t p(p-1)/2)` pairs.
pub fn gen_covsel_instance(p: usize, t: f64, seed: u64) -> Result<(SymmetricMatrix, Support)> {
    if p < 2 || !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("need p >= 2 and t in [0, 1]"));
    }
    let k = budget_from_fraction(p, t);
    let z = random_support(p, k, &mut rng_for(seed, STREAM_SUPPORT));
    let cov = SymmetricMatrix::from_fn(
        p,
        |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / (p as f64 + 1.0),
    );
    let x = sample_gaussian(&cov, p, &mut rng_for(seed, STREAM_TRAIN))?;
    Ok((sample_covariance(&x)?, z))
}

#[derive(Clone, Debug, Serialize)]
pub struct SyntheticInstance {
    pub theta_true: SymmetricMatrix,
    pub support_true: Support,
    pub sigma_train: SymmetricMatrix,
    pub sigma_val: SymmetricMatrix,
    pub sigma_test: SymmetricMatrix,
    pub n: usize,
    pub p: usize,
    pub t: f64,
    pub k_true: usize,
    pub seed: u64,
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_extremes(m: &SymmetricMatrix) -> (f64, f64) {
    let p = m.dim();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(p, p, m.as_slice()));
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Recovery instance with `k_true = floor(t p(p-1)/2)`; see
/// [`gen_experiment_instance_k`].
pub fn gen_experiment_instance(p: usize, n: usize, t: f64, seed: u64) -> Result<SyntheticInstance> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid("t must lie in (0, 1)"));
    }
    let mut inst = gen_experiment_instance_k(p, n, budget_from_fraction(p, t), seed)?;
    inst.t = t;
    Ok(inst)
}

/// `Theta0 = delta I + Z0 / 2` with `delta` pinning the condition number to
/// `p`; train/validation/test draw `n`, `n/2` and `5n` samples and all three
/// covariances are standardized with the train standard deviations.
pub fn gen_experiment_instance_k(
    p: usize,
    n: usize,
    k_true: usize,
    seed: u64,
) -> Result<SyntheticInstance> {
    if p < 2 || n < 2 {
        return Err(Error::invalid("need p >= 2 and n >= 2"));
    }
    if k_true > pair_count(p) {
        return Err(Error::invalid("k_true exceeds the number of pairs"));
    }
    let mut rng = rng_for(seed, STREAM_SUPPORT);
    const ATTEMPTS: usize = 100;
    let mut found = None;
    for _ in 0..ATTEMPTS {
        let z0 = random_support(p, k_true, &mut rng);
        let mut half = SymmetricMatrix::zeros(p);
        for &(i, j) in z0.pairs() {
            half.set(i, j, 0.5);
        }
        let (lmin, lmax) = eigen_extremes(&half);
        let delta = (lmax - p as f64 * lmin) / (p as f64 - 1.0);
        if lmin + delta > 0.0 && lmax > lmin {
            for i in 0..p {
                half.set(i, i, delta);
            }
            found = Some((half, z0));
            break;
        }
    }
    let (theta_true, support_true) =
        found.ok_or(Error::DegenerateInstance { attempts: ATTEMPTS })?;
    let cov = inverse_spd(&theta_true)?;
    let raw = |stream: u64, m: usize| -> Result<SymmetricMatrix> {
        sample_covariance(&sample_gaussian(&cov, m, &mut rng_for(seed, stream))?)
    };
    let train = raw(STREAM_TRAIN, n)?;
    let val = raw(STREAM_VALIDATION, (n / 2).max(2))?;
    let test = raw(STREAM_TEST, 5 * n)?;
    let d: Vec<f64> = train.diagonal().iter().map(|v| 1.0 / v.sqrt()).collect();
    Ok(SyntheticInstance {
        theta_true,
        support_true,
        sigma_train: train.diag_congruence(&d),
        sigma_val: val.diag_congruence(&d),
        sigma_test: test.diag_congruence(&d),
        n,
        p,
        t: k_true as f64 / pair_count(p) as f64,
        k_true,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub fdr: f64,
    pub nll_test: f64,
    pub k_selected: usize,
}

/// Accuracy and false detection rate of a support against the truth.
pub fn support_metrics(est: &Support, truth: &Support) -> (f64, f64) {
    let hit = est.intersection_len(truth);
    let accuracy = if truth.is_empty() {
        1.0
    } else {
        hit as f64 / truth.len() as f64
    };
    let fdr = (est.len() - hit) as f64 / est.len().max(1) as f64;
    (accuracy, fdr)
}

/// Scores an estimate; the support is read off `theta`'s off-diagonal.
pub fn score(theta: &SymmetricMatrix, inst: &SyntheticInstance) -> Result<Metrics> {
    if theta.dim() != inst.p {
        return Err(Error::invalid(
            "estimate dimension does not match the instance",
        ));
    }
    let est = support_of(theta);
    let (accuracy, fdr) = support_metrics(&est, &inst.support_true);
    Ok(Metrics {
        accuracy,
        fdr,
        nll_test: holdout_nll(theta, &inst.sigma_test)?,
        k_selected: est.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExactBigM,
    ExactRidge,
    /// Neighborhood-selection support refit with ridge at the base scale.
    NeighborhoodSelection,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ExactBigM => "exact_bigm",
            Method::ExactRidge => "exact_ridge",
            Method::NeighborhoodSelection => "mb",
        }
    }
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Ebic => "ebic",
            Criterion::HoldoutNll => "holdout_nll",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub p: usize,
    pub n: usize,
    pub t: f64,
    pub methods: Vec<Method>,
    pub criteria: Vec<Criterion>,
    /// Budgets and multipliers; defaults to [`TuningGrid::default_for`].
    pub k_values: Option<Vec<usize>>,
    pub multipliers: Option<Vec<f64>>,
    pub solve: SolveOptions,
}

impl ExperimentConfig {
    pub fn new(p: usize, n: usize, t: f64) -> Self {
        Self {
            p,
            n,
            t,
            methods: vec![Method::ExactBigM, Method::NeighborhoodSelection],
            criteria: vec![Criterion::HoldoutNll],
            k_values: None,
            multipliers: None,
            solve: SolveOptions::default(),
        }
    }

    fn grid(&self, criterion: Criterion) -> TuningGrid {
        let mut g = TuningGrid::default_for(self.p, criterion);
        if let Some(k) = &self.k_values {
            g.k_values = k.clone();
        }
        if let Some(m) = &self.multipliers {
            g.multipliers = m.clone();
        }
        g
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentRow {
    pub seed: u64,
    pub method: Method,
    pub criterion: Criterion,
    pub k_selected: usize,
    #[serde(rename = "A")]
    pub accuracy: f64,
    #[serde(rename = "FDR")]
    pub fdr: f64,
    pub nll_test: f64,
    pub objective: f64,
    pub lower_bound: f64,
    pub gap: f64,
    pub time_total_s: f64,
    pub time_cuts_s: f64,
    pub cuts: usize,
    pub nodes: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub criterion: Criterion,
    pub runs: usize,
    pub failures: usize,
    pub k_selected: MeanStd,
    #[serde(rename = "A")]
    pub accuracy: MeanStd,
    #[serde(rename = "FDR")]
    pub fdr: MeanStd,
    pub nll_test: MeanStd,
    pub gap: MeanStd,
    pub time_total_s: MeanStd,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentTable {
    pub rows: Vec<ExperimentRow>,
    pub summary: Vec<SummaryRow>,
}

/// Generates, tunes, solves and scores one instance per seed. Seeds run on
/// the current rayon pool; rows come back in seed order.
pub fn run_experiment(config: &ExperimentConfig, seeds: &[u64]) -> Result<ExperimentTable> {
    if config.methods.is_empty() || config.criteria.is_empty() {
        return Err(Error::invalid(
            "experiment needs at least one method and criterion",
        ));
    }
    let rows: Vec<ExperimentRow> = seeds
        .par_iter()
        .map(|&seed| run_seed(config, seed))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let mut summary = Vec::new();
    for &method in &config.methods {
        for &criterion in &config.criteria {
            let sel: Vec<&ExperimentRow> = rows
                .iter()
                .filter(|r| r.method == method && r.criterion == criterion)
                .collect();
            let ok: Vec<&&ExperimentRow> = sel.iter().filter(|r| r.error.is_none()).collect();
            let col = |f: fn(&ExperimentRow) -> f64| {
                MeanStd::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            summary.push(SummaryRow {
                method,
                criterion,
                runs: sel.len(),
                failures: sel.len() - ok.len(),
                k_selected: col(|r| r.k_selected as f64),
                accuracy: col(|r| r.accuracy),
                fdr: col(|r| r.fdr),
                nll_test: col(|r| r.nll_test),
                gap: col(|r| r.gap),
                time_total_s: col(|r| r.time_total_s),
            });
        }
    }
    Ok(ExperimentTable { rows, summary })
}

fn failed_row(seed: u64, method: Method, criterion: Criterion, msg: String) -> ExperimentRow {
    ExperimentRow {
        seed,
        method,
        criterion,
        k_selected: 0,
        accuracy: f64::NAN,
        fdr: f64::NAN,
        nll_test: f64::NAN,
        objective: f64::NAN,
        lower_bound: f64::NAN,
        gap: f64::NAN,
        time_total_s: 0.0,
        time_cuts_s: 0.0,
        cuts: 0,
        nodes: 0,
        error: Some(msg),
    }
}

fn run_seed(config: &ExperimentConfig, seed: u64) -> Vec<ExperimentRow> {
    let inst = match gen_experiment_instance(config.p, config.n, config.t, seed) {
        Ok(i) => i,
        Err(e) => {
            return config
                .methods
                .iter()
                .flat_map(|&m| config.criteria.iter().map(move |&c| (m, c)))
                .map(|(m, c)| failed_row(seed, m, c, e.to_string()))
                .collect()
        }
    };
    let mut rows = Vec::new();
    for &method in &config.methods {
        for &criterion in &config.criteria {
            let row = run_cell(config, &inst, method, criterion)
                .unwrap_or_else(|e| failed_row(seed, method, criterion, e.to_string()));
            rows.push(row);
        }
    }
    rows
}

fn run_cell(
    config: &ExperimentConfig,
    inst: &SyntheticInstance,
    method: Method,
    criterion: Criterion,
) -> Result<ExperimentRow> {
    let grid = config.grid(criterion);
    let data = TuneData {
        train: &inst.sigma_train,
        n_train: inst.n,
        validation: Some(&inst.sigma_val),
    };
    match method {
        Method::ExactBigM | Method::ExactRidge => {
            let kind = if method == Method::ExactBigM {
                RegKind::BigM
            } else {
                RegKind::Ridge
            };
            let tuned = model::tune(data, &grid, kind, &config.solve)?;
            let m = score(&tuned.result.theta, inst)?;
            let (accuracy, fdr) = support_metrics(&tuned.result.support, &inst.support_true);
            let total: f64 = tuned.table.iter().map(|c| c.time_s).sum();
            Ok(ExperimentRow {
                seed: inst.seed,
                method,
                criterion,
                k_selected: tuned.result.support.len(),
                accuracy,
                fdr,
                nll_test: m.nll_test,
                objective: tuned.result.upper,
                lower_bound: tuned.result.lower,
                gap: tuned.result.relative_gap,
                time_total_s: total,
                time_cuts_s: tuned.result.times.subproblem_s,
                cuts: tuned.result.cuts,
                nodes: tuned.result.nodes_explored,
                error: None,
            })
        }
        Method::NeighborhoodSelection => {
            let start = std::time::Instant::now();
            let reg = RegKind::Ridge.at(&inst.sigma_train, 1.0)?;
            let mut best: Option<(f64, Support, SymmetricMatrix, f64)> = None;
            for &k in &grid.k_values {
                let z = model::warm_start(&inst.sigma_train, k);
                let sol = solve_covsel(&inst.sigma_train, &z, &reg, 1e-6, 1e-12, 1_000_000)
                    .or_else(|e| match e {
                        Error::Unconverged(s) => Ok(*s),
                        e => Err(e),
                    })?;
                let crit = match criterion {
                    Criterion::Ebic => model::ebic(&sol.theta, &inst.sigma_train, inst.n)?,
                    Criterion::HoldoutNll => holdout_nll(&sol.theta, &inst.sigma_val)?,
                };
                if best.as_ref().is_none_or(|b| crit < b.0) {
                    best = Some((crit, z, sol.theta, sol.primal_value));
                }
            }
            let (_, z, theta, objective) =
                best.ok_or_else(|| Error::invalid("empty budget grid"))?;
            let (accuracy, fdr) = support_metrics(&z, &inst.support_true);
            Ok(ExperimentRow {
                seed: inst.seed,
                method,
                criterion,
                k_selected: z.len(),
                accuracy,
                fdr,
                nll_test: holdout_nll(&theta, &inst.sigma_test)?,
                objective,
                lower_bound: f64::NAN,
                gap: f64::NAN,
                time_total_s: start.elapsed().as_secs_f64(),
                time_cuts_s: 0.0,
                cuts: 0,
                nodes: 0,
                error: None,
            })
        }
    }
}

/// Exact-method options tuned for small experiments: warm start from
/// neighborhood selection and a per-solve time cap.
pub fn experiment_solve_options(time_limit_s: f64) -> SolveOptions {
    SolveOptions {
        time_limit: Some(std::time::Duration::from_secs_f64(time_limit_s)),
        warm: WarmStart::NeighborhoodSelection,
        ..SolveOptions::default()
    }
}
