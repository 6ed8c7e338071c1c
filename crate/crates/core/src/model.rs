//! Hyper-parameter selection and warm starts.

use rayon::prelude::*;
use serde::Serialize;

use crate::covsel::Regularizer;
use crate::cutplane::{Session, SolveOptions, SolveResult};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, SymmetricMatrix};
use crate::support::{pair_count, PairTable, Support};
use crate::ZERO_THRESHOLD;

/// Base scales `(M0, gamma0) = (p / ||S||_1, 4p / ||S||_2^2)` with entrywise norms.
pub fn base_scales(sigma: &SymmetricMatrix) -> Result<(f64, f64)> {
    let p = sigma.dim() as f64;
    let l1 = sigma.norm_l1();
    let l2 = sigma.norm_l2();
    if !(l1 > 0.0) {
        return Err(Error::invalid("covariance matrix is zero"));
    }
    Ok((p / l1, 4.0 * p / (l2 * l2)))
}

fn off_diagonal_nonzeros(theta: &SymmetricMatrix) -> usize {
    let p = theta.dim();
    (0..p)
        .flat_map(|i| (i + 1..p).map(move |j| (i, j)))
        .filter(|&(i, j)| theta.get(i, j).abs() > ZERO_THRESHOLD)
        .count()
}

/// `<S, Theta> - log det Theta` on an evaluation covariance.
pub fn holdout_nll(theta: &SymmetricMatrix, sigma_eval: &SymmetricMatrix) -> Result<f64> {
    if theta.dim() != sigma_eval.dim() {
        return Err(Error::invalid("dimension mismatch"));
    }
    Ok(sigma_eval.inner(theta) - cholesky(theta)?.log_det())
}

/// Extended BIC with `gamma = 1/2`:
/// `n [<S, Theta> - log det Theta] + ||Theta||_0 (log n + 2 log p)`,
/// counting nonzeros strictly above the diagonal.
pub fn ebic(theta: &SymmetricMatrix, sigma_train: &SymmetricMatrix, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let nll = holdout_nll(theta, sigma_train)?;
    let nnz = off_diagonal_nonzeros(theta) as f64;
    let (n, p) = (n as f64, theta.dim() as f64);
    Ok(n * nll + nnz * (n.ln() + 2.0 * p.ln()))
}

/// Default lasso path: 60 geometric steps from the largest absolute
/// correlation down to a thousandth of it.
pub fn default_lambda_path(sigma: &SymmetricMatrix) -> Vec<f64> {
    let c = correlation(sigma);
    let p = c.dim();
    let top = (0..p)
        .flat_map(|i| (i + 1..p).map(move |j| (i, j)))
        .map(|(i, j)| c.get(i, j).abs())
        .fold(0.0, f64::max);
    if top <= 0.0 {
        return Vec::new();
    }
    let steps = 60;
    (0..steps)
        .map(|s| top * (1e-3f64).powf(s as f64 / (steps - 1) as f64))
        .collect()
}

fn correlation(sigma: &SymmetricMatrix) -> SymmetricMatrix {
    let d: Vec<f64> = sigma
        .diagonal()
        .iter()
        .map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 0.0 })
        .collect();
    sigma.diag_congruence(&d)
}

/// Neighborhood-selection support of size `min(k, p(p-1)/2)` with the default path.
pub fn warm_start(sigma: &SymmetricMatrix, k: usize) -> Support {
    warm_start_with(sigma, k, &default_lambda_path(sigma))
}

/// Node-wise lasso on the correlation matrix, swept down `lambdas` until the
/// OR-union of selected pairs has at least `k` members; the `k` pairs with
/// largest `|beta_ij| + |beta_ji|` are kept and any shortfall is filled with
/// the largest remaining `|S_ij|`.
pub fn warm_start_with(sigma: &SymmetricMatrix, k: usize, lambdas: &[f64]) -> Support {
    let p = sigma.dim();
    let table = PairTable::new(p);
    let k = k.min(pair_count(p));
    if k == 0 {
        return Support::empty(p);
    }
    let c = correlation(sigma);
    // beta[i * p + j]: coefficient of variable j in the regression of i.
    let mut beta = vec![0.0; p * p];
    let mut fitted = vec![0.0; p * p];
    let mut chosen: Vec<(f64, usize)> = Vec::new();
    for &lambda in lambdas {
        for i in 0..p {
            lasso_cd(
                &c,
                i,
                lambda,
                &mut beta[i * p..(i + 1) * p],
                &mut fitted[i * p..(i + 1) * p],
            );
        }
        chosen = (0..table.len())
            .filter_map(|idx| {
                let (i, j) = table.pair(idx);
                let s = beta[i * p + j].abs() + beta[j * p + i].abs();
                (s > 0.0).then_some((s, idx))
            })
            .collect();
        if chosen.len() >= k {
            break;
        }
    }
    chosen.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    chosen.truncate(k);
    let mut taken = vec![false; table.len()];
    for &(_, idx) in &chosen {
        taken[idx] = true;
    }
    let mut out: Vec<usize> = chosen.iter().map(|x| x.1).collect();
    if out.len() < k {
        let mut rest: Vec<usize> = (0..table.len()).filter(|&idx| !taken[idx]).collect();
        rest.sort_by(|&a, &b| {
            let (ai, aj) = table.pair(a);
            let (bi, bj) = table.pair(b);
            sigma
                .get(bi, bj)
                .abs()
                .total_cmp(&sigma.get(ai, aj).abs())
                .then(a.cmp(&b))
        });
        out.extend(rest.into_iter().take(k - out.len()));
    }
    Support::from_indices(&table, out)
}

/// Cyclic coordinate descent for
/// `min_b 1/2 b' C_{-i,-i} b - C_{-i,i}' b + lambda ||b||_1`,
/// warm-started from `b`; `fitted` tracks `C_{-i,-i} b`.
fn lasso_cd(c: &SymmetricMatrix, i: usize, lambda: f64, b: &mut [f64], fitted: &mut [f64]) {
    let p = c.dim();
    for _sweep in 0..1000 {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if j == i {
                continue;
            }
            let cjj = c.get(j, j);
            if cjj <= 0.0 {
                continue;
            }
            let rho = c.get(i, j) - (fitted[j] - cjj * b[j]);
            let new = soft_threshold(rho, lambda) / cjj;
            let delta = new - b[j];
            if delta != 0.0 {
                let col = c.row(j);
                for l in 0..p {
                    fitted[l] += delta * col[l];
                }
                b[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < 1e-10 {
            break;
        }
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Ebic,
    HoldoutNll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    BigM,
    Ridge,
}

impl RegKind {
    /// Regularizer at `multiplier` times the base scale.
    pub fn at(self, sigma: &SymmetricMatrix, multiplier: f64) -> Result<Regularizer> {
        let (m0, g0) = base_scales(sigma)?;
        Ok(match self {
            RegKind::BigM => Regularizer::big_m(sigma.dim(), multiplier * m0),
            RegKind::Ridge => Regularizer::ridge(multiplier * g0),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TuningGrid {
    /// Strictly decreasing budgets.
    pub k_values: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub criterion: Criterion,
}

impl TuningGrid {
    /// Budgets `floor(t p(p-1)/2)` for `t` in {5, 3, 2, 1, 0.5}% and
    /// multipliers {1, 2, 4, 8, 16}.
    pub fn default_for(p: usize, criterion: Criterion) -> Self {
        let pairs = pair_count(p) as f64;
        let mut k_values: Vec<usize> = [0.05, 0.03, 0.02, 0.01, 0.005]
            .iter()
            .map(|t| (t * pairs).floor() as usize)
            .collect();
        k_values.dedup();
        Self {
            k_values,
            multipliers: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            criterion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.multipliers.is_empty() {
            return Err(Error::invalid("tuning grid is empty"));
        }
        if self.k_values.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid("grid budgets must be strictly decreasing"));
        }
        if self
            .multipliers
            .iter()
            .any(|m| !(*m > 0.0 && m.is_finite()))
        {
            return Err(Error::invalid("grid multipliers must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GridCell {
    pub k: usize,
    pub reg_multiplier: f64,
    pub objective: f64,
    pub lower_bound: f64,
    pub gap: f64,
    pub criterion: f64,
    pub time_s: f64,
    pub cuts: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TunedModel {
    pub k: usize,
    pub reg_multiplier: f64,
    pub criterion: Criterion,
    pub criterion_value: f64,
    pub result: SolveResult,
    pub table: Vec<GridCell>,
}

/// Training data for [`tune`]; `validation` is required for the hold-out criterion.
#[derive(Clone, Copy, Debug)]
pub struct TuneData<'a> {
    pub train: &'a SymmetricMatrix,
    pub n_train: usize,
    pub validation: Option<&'a SymmetricMatrix>,
}

/// Grid search: one budget path per multiplier (cuts reused down the path),
/// every fit scored by the grid's criterion. Failed cells are kept in the
/// table with an error and skipped for selection.
pub fn tune(
    data: TuneData<'_>,
    grid: &TuningGrid,
    kind: RegKind,
    opts: &SolveOptions,
) -> Result<TunedModel> {
    grid.validate()?;
    if grid.criterion == Criterion::HoldoutNll && data.validation.is_none() {
        return Err(Error::invalid(
            "hold-out criterion needs a validation covariance",
        ));
    }
    let paths: Vec<Vec<(GridCell, Option<SolveResult>)>> = grid
        .multipliers
        .par_iter()
        .map(|&mult| run_path(data, grid, kind, mult, opts))
        .collect();

    let mut table = Vec::new();
    let mut best: Option<(f64, usize, f64, SolveResult)> = None;
    for (cell, result) in paths.into_iter().flatten() {
        if let Some(res) = result {
            let better = best.as_ref().is_none_or(|(v, k, m, _)| {
                cell.criterion < *v
                    || (cell.criterion == *v
                        && (cell.k < *k || (cell.k == *k && cell.reg_multiplier < *m)))
            });
            if better {
                best = Some((cell.criterion, cell.k, cell.reg_multiplier, res));
            }
        }
        table.push(cell);
    }
    let (criterion_value, k, reg_multiplier, result) = best.ok_or_else(|| {
        let first = table
            .iter()
            .find_map(|c| c.error.clone())
            .unwrap_or_default();
        Error::invalid(format!("every grid cell failed: {first}"))
    })?;
    Ok(TunedModel {
        k,
        reg_multiplier,
        criterion: grid.criterion,
        criterion_value,
        result,
        table,
    })
}

fn run_path(
    data: TuneData<'_>,
    grid: &TuningGrid,
    kind: RegKind,
    mult: f64,
    opts: &SolveOptions,
) -> Vec<(GridCell, Option<SolveResult>)> {
    let failed = |k: usize, msg: String| GridCell {
        k,
        reg_multiplier: mult,
        objective: f64::NAN,
        lower_bound: f64::NAN,
        gap: f64::NAN,
        criterion: f64::NAN,
        time_s: 0.0,
        cuts: 0,
        error: Some(msg),
    };
    let reg = match kind.at(data.train, mult) {
        Ok(r) => r,
        Err(e) => {
            return grid
                .k_values
                .iter()
                .map(|&k| (failed(k, e.to_string()), None))
                .collect()
        }
    };
    let mut session = match Session::new(data.train, &reg, Vec::new()) {
        Ok(s) => s,
        Err(e) => {
            return grid
                .k_values
                .iter()
                .map(|&k| (failed(k, e.to_string()), None))
                .collect()
        }
    };
    grid.k_values
        .iter()
        .map(|&k| {
            let scored = session.solve(k, opts, None).and_then(|res| {
                let crit = match grid.criterion {
                    Criterion::Ebic => ebic(&res.theta, data.train, data.n_train)?,
                    Criterion::HoldoutNll => {
                        holdout_nll(&res.theta, data.validation.expect("checked"))?
                    }
                };
                Ok((crit, res))
            });
            match scored {
                Ok((crit, res)) => (
                    GridCell {
                        k,
                        reg_multiplier: mult,
                        objective: res.upper,
                        lower_bound: res.lower,
                        gap: res.relative_gap,
                        criterion: crit,
                        time_s: res.times.total_s,
                        cuts: res.cuts,
                        error: None,
                    },
                    Some(res),
                ),
                Err(e) => (failed(k, e.to_string()), None),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cutplane::{solve, WarmStart};
    use crate::linalg::{inverse_spd, testutil::random_spd};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn base_scales_examples() {
        let (m0, g0) = base_scales(&SymmetricMatrix::identity(7)).unwrap();
        assert_relative_eq!(m0, 1.0);
        assert_relative_eq!(g0, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_spd(&mut rng, 5, 0.1);
        let (a, b) = base_scales(&s).unwrap();
        let (c, d) = base_scales(&s.scaled(3.0)).unwrap();
        assert_relative_eq!(c, a / 3.0, epsilon = 1e-12);
        assert_relative_eq!(d, b / 9.0, epsilon = 1e-12);
        let l1: f64 = s.as_slice().iter().map(|v| v.abs()).sum();
        assert_relative_eq!(a, 5.0 / l1, epsilon = 1e-12);
        assert!(base_scales(&SymmetricMatrix::zeros(3)).is_err());
    }

    #[test]
    fn ebic_examples() {
        let i3 = SymmetricMatrix::identity(3);
        assert_relative_eq!(ebic(&i3, &i3, 10).unwrap(), 30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma = random_spd(&mut rng, 4, 0.5);
        let mut theta = SymmetricMatrix::identity(4);
        let base = ebic(&theta, &sigma, 20).unwrap();
        theta.set(0, 2, 1e-3);
        let fit = |t: &SymmetricMatrix| 20.0 * (sigma.inner(t) - cholesky(t).unwrap().log_det());
        let bumped = ebic(&theta, &sigma, 20).unwrap();
        let increment = (20f64).ln() + 2.0 * (4f64).ln();
        assert_relative_eq!(
            bumped - fit(&theta),
            base - fit(&SymmetricMatrix::identity(4)) + increment,
            epsilon = 1e-9
        );
    }

    #[test]
    fn holdout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_spd(&mut rng, 4, 0.5);
        let trace: f64 = s.diagonal().iter().sum();
        assert_relative_eq!(
            holdout_nll(&SymmetricMatrix::identity(4), &s).unwrap(),
            trace,
            epsilon = 1e-12
        );
        let theta = random_spd(&mut rng, 4, 0.5);
        let inv = inverse_spd(&theta).unwrap();
        let ld = cholesky(&theta).unwrap().log_det();
        assert_relative_eq!(holdout_nll(&theta, &inv).unwrap(), 4.0 - ld, epsilon = 1e-9);
        assert!(holdout_nll(&theta.scaled(-1.0), &s).is_err());
    }

    #[test]
    fn warm_start_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_spd(&mut rng, 6, 0.2);
        assert!(warm_start(&s, 0).is_empty());
        for k in [1, 4, 15, 40] {
            assert_eq!(warm_start(&s, k).len(), k.min(15));
        }
        // No coefficient survives: fall back to largest |S_ij|.
        let z = warm_start_with(&s, 2, &[1e6]);
        let mut pairs: Vec<(usize, usize)> = (0..6)
            .flat_map(|i| (i + 1..6).map(move |j| (i, j)))
            .collect();
        pairs.sort_by(|a, b| {
            s.get(b.0, b.1)
                .abs()
                .total_cmp(&s.get(a.0, a.1).abs())
                .then(a.cmp(b))
        });
        let mut expect = pairs[..2].to_vec();
        expect.sort();
        assert_eq!(z.pairs(), &expect[..]);
    }

    #[test]
    fn lasso_matches_subgradient_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = correlation(&random_spd(&mut rng, 6, 0.3));
        let lambda = 0.05;
        let mut b = vec![0.0; 6];
        let mut f = vec![0.0; 6];
        lasso_cd(&c, 2, lambda, &mut b, &mut f);
        for j in (0..6).filter(|&j| j != 2) {
            let grad: f64 = (0..6)
                .filter(|&l| l != 2)
                .map(|l| c.get(j, l) * b[l])
                .sum::<f64>()
                - c.get(2, j);
            if b[j] != 0.0 {
                assert_relative_eq!(grad, -lambda * b[j].signum(), epsilon = 1e-8);
            } else {
                assert!(grad.abs() <= lambda + 1e-8);
            }
        }
    }

    #[test]
    fn chain_recovery() {
        let p = 10;
        let mut hits = 0;
        for seed in 0..10 {
            let sigma = chain_sample_covariance(p, 1000, seed);
            let z = warm_start(&sigma, 9);
            let chain: Vec<(usize, usize)> = (0..p - 1).map(|i| (i, i + 1)).collect();
            hits += usize::from(z.pairs() == &chain[..]);
        }
        assert!(hits >= 9, "{hits}/10");
    }

    fn chain_sample_covariance(p: usize, n: usize, seed: u64) -> SymmetricMatrix {
        use nalgebra::DMatrix;
        use rand_distr::StandardNormal;
        let theta = SymmetricMatrix::from_fn(p, |i, j| match i.abs_diff(j) {
            0 => 1.0,
            1 => 0.45,
            _ => 0.0,
        });
        let cov = inverse_spd(&theta).unwrap();
        let l = DMatrix::from_row_slice(p, p, cov.as_slice())
            .cholesky()
            .unwrap()
            .l();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal)) * l.transpose();
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(n, p, |r, c| x[(r, c)] - mean[c]);
        let s = centered.transpose() * &centered / n as f64;
        SymmetricMatrix::from_fn(p, |i, j| s[(i, j)])
    }

    fn quick() -> SolveOptions {
        SolveOptions {
            eps: 1e-6,
            time_limit: None,
            warm: WarmStart::None,
            ..SolveOptions::default()
        }
    }

    #[test]
    fn single_cell_tune_equals_direct_solve() {
        let train = chain_sample_covariance(5, 40, 1);
        let val = chain_sample_covariance(5, 20, 2);
        let grid = TuningGrid {
            k_values: vec![3],
            multipliers: vec![2.0],
            criterion: Criterion::HoldoutNll,
        };
        let data = TuneData {
            train: &train,
            n_train: 40,
            validation: Some(&val),
        };
        let tuned = tune(data, &grid, RegKind::Ridge, &quick()).unwrap();
        let direct = solve(
            &train,
            3,
            &RegKind::Ridge.at(&train, 2.0).unwrap(),
            &[],
            &quick(),
        )
        .unwrap();
        assert_eq!(tuned.result.support, direct.support);
        assert_relative_eq!(
            tuned.criterion_value,
            holdout_nll(&direct.theta, &val).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn tune_selects_table_minimum() {
        let train = chain_sample_covariance(6, 60, 3);
        let val = chain_sample_covariance(6, 30, 4);
        let grid = TuningGrid {
            k_values: vec![8, 5, 3, 1],
            multipliers: vec![1.0, 1.0, 4.0],
            criterion: Criterion::HoldoutNll,
        };
        let data = TuneData {
            train: &train,
            n_train: 60,
            validation: Some(&val),
        };
        for kind in [RegKind::Ridge, RegKind::BigM] {
            let tuned = tune(data, &grid, kind, &quick()).unwrap();
            let min = tuned
                .table
                .iter()
                .map(|c| c.criterion)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(tuned.criterion_value, min);
            // duplicated multiplier gives identical cells
            for (a, b) in tuned.table[..4].iter().zip(&tuned.table[4..8]) {
                assert_eq!(a.criterion.to_bits(), b.criterion.to_bits());
            }
        }
        let ebic_grid = TuningGrid {
            criterion: Criterion::Ebic,
            ..grid
        };
        let tuned = tune(data, &ebic_grid, RegKind::Ridge, &quick()).unwrap();
        assert!(tuned
            .table
            .iter()
            .all(|c| c.criterion >= tuned.criterion_value));
    }

    #[test]
    fn default_grid() {
        let g = TuningGrid::default_for(50, Criterion::Ebic);
        assert_eq!(g.k_values, vec![61, 36, 24, 12, 6]);
        g.validate().unwrap();
        let bad = TuningGrid {
            k_values: vec![1, 2],
            ..g.clone()
        };
        assert!(bad.validate().is_err());
    }
}
