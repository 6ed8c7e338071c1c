//! Entrywise bounds on optimal precision matrices, for choosing big-M constants.
//!
//! With `Theta = S^-1`, `c = p - u + log det S`, `a = Theta_ij` and
//! `b = (Theta_ij^2 - Theta_ii Theta_jj) / 4`, every `Theta'` in the level set
//! `{<S, Theta'> - log det Theta' <= u}` satisfies `Theta'_ij >= g(lambda)` for
//! all `lambda > 0`, where
//!
//! `g(lambda) = lambda [c + log(1 + a/lambda + b/lambda^2)]`.
//!
//! `g` is concave; we maximize it by safeguarded Newton. Upper bounds come
//! from the same problem with `a` negated.

use rayon::prelude::*;
use serde::Serialize;

use crate::covsel::{solve_covsel, BigMBounds, Regularizer};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, SymmetricMatrix};
use crate::model;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EntryBounds {
    pub i: usize,
    pub j: usize,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// `<S, Theta_hat> - log det Theta_hat`.
pub fn level_from_feasible(sigma: &SymmetricMatrix, theta_hat: &SymmetricMatrix) -> Result<f64> {
    model::holdout_nll(theta_hat, sigma)
}

/// Level from a cheap feasible point at budget `k`: the neighborhood-selection
/// support fitted with a light ridge penalty.
pub fn greedy_level(sigma: &SymmetricMatrix, k: usize) -> Result<f64> {
    let z = model::warm_start(sigma, k);
    let (_, gamma0) = model::base_scales(sigma)?;
    let reg = Regularizer::ridge(100.0 * gamma0);
    let theta = match solve_covsel(sigma, &z, &reg, 1e-8, 1e-14, 1_000_000) {
        Ok(s) => s.theta,
        Err(Error::Unconverged(s)) => s.theta,
        Err(e) => return Err(e),
    };
    level_from_feasible(sigma, &theta)
}

/// Scalar dual for one entry.
#[derive(Clone, Copy, Debug)]
pub struct EntryDual {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl EntryDual {
    /// Quadratic `1 + a s + b s^2` at `s = 1/lambda`.
    fn q(&self, s: f64) -> f64 {
        1.0 + s * (self.a + self.b * s)
    }

    /// Largest `s` keeping the log argument positive.
    fn s_max(&self) -> f64 {
        if self.b < 0.0 {
            let disc = self.a * self.a - 4.0 * self.b;
            // positive root of b s^2 + a s + 1, written to avoid cancellation
            2.0 / (-self.a + disc.sqrt())
        } else {
            f64::INFINITY
        }
    }

    pub fn value(&self, lambda: f64) -> f64 {
        let q = self.q(1.0 / lambda);
        if q <= 0.0 {
            return f64::NEG_INFINITY;
        }
        lambda * (self.c + q.ln())
    }

    /// `(g'(lambda), g''(lambda))`.
    pub fn derivatives(&self, lambda: f64) -> (f64, f64) {
        let s = 1.0 / lambda;
        let q = self.q(s);
        let dq = self.a + 2.0 * self.b * s;
        let l1 = dq / q;
        let l2 = (2.0 * self.b * q - dq * dq) / (q * q);
        (self.c + q.ln() - s * l1, s * s * s * l2)
    }

    /// `sup_{lambda > 0} g(lambda)`, returning the best value seen.
    pub fn maximize(&self, tol: f64) -> f64 {
        if self.c >= 0.0 {
            // The level set is the single unconstrained optimum.
            return self.a;
        }
        let mut lo = 1.0 / self.s_max();
        let mut hi = 1.0f64.max(2.0 * lo);
        while self.derivatives(hi).0 > 0.0 {
            lo = hi;
            hi *= 2.0;
        }
        let mut lambda = if 1.0 > lo && 1.0 < hi {
            1.0
        } else {
            0.5 * (lo + hi)
        };
        let mut best = f64::NEG_INFINITY;
        for _ in 0..200 {
            best = best.max(self.value(lambda));
            let (d1, d2) = self.derivatives(lambda);
            if d1 > 0.0 {
                lo = lambda;
            } else {
                hi = lambda;
            }
            if d1 == 0.0 || (d2 < 0.0 && d1 * d1 / -d2 <= tol) || hi - lo <= 1e-15 * hi {
                break;
            }
            let newton = lambda - d1 / d2;
            lambda = if d2 < 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        best.max(self.value(lambda))
    }
}

/// How a singular covariance is handled.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Singular {
    #[default]
    Refuse,
    /// Replace `S` by `S + shift I`; `None` uses `1e-3` times the mean diagonal.
    Shift(Option<f64>),
}

/// Inverse and log-determinant of the covariance, shared across entries.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sigma: SymmetricMatrix,
    pub inverse: SymmetricMatrix,
    pub log_det: f64,
    /// Set when a shift was applied; the bounds are then heuristic.
    pub shifted: bool,
}

pub fn prepare(sigma: &SymmetricMatrix, singular: Singular) -> Result<Prepared> {
    let (sigma, shifted) = match singular {
        Singular::Refuse => (sigma.clone(), false),
        Singular::Shift(amount) => {
            let p = sigma.dim();
            let mean = sigma.diagonal().iter().sum::<f64>() / p as f64;
            let shift = amount.unwrap_or(1e-3 * mean);
            let mut s = sigma.clone();
            for i in 0..p {
                s.add_to(i, i, shift);
            }
            (s, true)
        }
    };
    let f = cholesky(&sigma)?;
    Ok(Prepared {
        inverse: f.inverse(),
        log_det: f.log_det(),
        sigma,
        shifted,
    })
}

impl Prepared {
    pub fn dual(&self, u: f64, i: usize, j: usize) -> EntryDual {
        let t = &self.inverse;
        let p = t.dim() as f64;
        let a = t.get(i, j);
        EntryDual {
            a,
            b: (a * a - t.get(i, i) * t.get(j, j)) / 4.0,
            c: p - u + self.log_det,
        }
    }

    pub fn entry_bounds(&self, u: f64, i: usize, j: usize, newton_tol: f64) -> Result<EntryBounds> {
        let p = self.inverse.dim();
        if i >= p || j >= p || i == j {
            return Err(Error::invalid(format!(
                "({i},{j}) is not an off-diagonal entry"
            )));
        }
        let optimum = p as f64 + self.log_det;
        if u < optimum - 1e-9 * optimum.abs().max(1.0) {
            return Err(Error::invalid(format!(
                "level {u} is below the unconstrained optimum {optimum}"
            )));
        }
        let d = self.dual(u, i, j);
        let mut d = EntryDual {
            c: d.c.min(0.0),
            ..d
        };
        let lower = d.maximize(newton_tol);
        d.a = -d.a;
        let upper = -d.maximize(newton_tol);
        Ok(EntryBounds {
            i: i.min(j),
            j: i.max(j),
            lower: lower.min(upper),
            upper: upper.max(lower),
            level: u,
        })
    }

    /// Bounds for every pair `i < j`, row-major.
    pub fn all_bounds(&self, u: f64, newton_tol: f64) -> Result<Vec<EntryBounds>> {
        let p = self.inverse.dim();
        let pairs: Vec<(usize, usize)> = (0..p)
            .flat_map(|i| (i + 1..p).map(move |j| (i, j)))
            .collect();
        pairs
            .par_iter()
            .map(|&(i, j)| self.entry_bounds(u, i, j, newton_tol))
            .collect()
    }
}

/// Bounds on one entry of any `Theta` with objective at most `u`.
pub fn entry_bounds(
    sigma: &SymmetricMatrix,
    u: f64,
    i: usize,
    j: usize,
    newton_tol: f64,
) -> Result<EntryBounds> {
    prepare(sigma, Singular::Refuse)?.entry_bounds(u, i, j, newton_tol)
}

/// `M = max(inflation * max(|lower|, |upper|), floor)`.
pub fn bound_to_m(b: &EntryBounds, inflation: f64) -> f64 {
    (inflation * b.lower.abs().max(b.upper.abs())).max(M_FLOOR)
}

pub const M_FLOOR: f64 = 1e-8;

/// Big-M matrix from bounds covering every pair; the diagonal is left unbounded.
pub fn bounds_to_big_m(p: usize, bounds: &[EntryBounds], inflation: f64) -> Result<BigMBounds> {
    if !(inflation >= 1.0) {
        return Err(Error::invalid("inflation must be at least 1"));
    }
    let mut values = vec![f64::NAN; p * p];
    for b in bounds {
        if b.i >= p || b.j >= p || b.i == b.j {
            return Err(Error::invalid(format!(
                "({},{}) is not an off-diagonal entry",
                b.i, b.j
            )));
        }
        let v = bound_to_m(b, inflation);
        values[b.i * p + b.j] = v;
        values[b.j * p + b.i] = v;
    }
    if (0..p).any(|i| (i + 1..p).any(|j| values[i * p + j].is_nan())) {
        return Err(Error::invalid("bounds do not cover every pair"));
    }
    Ok(BigMBounds::from_fn(p, |i, j| {
        if i == j {
            f64::INFINITY
        } else {
            values[i * p + j]
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::testutil::{random_spd, to_nalgebra};
    use crate::support::{pair_count, PairTable, Support};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_level_gives_zero_bounds() {
        let s = SymmetricMatrix::identity(4);
        let u = level_from_feasible(&s, &SymmetricMatrix::identity(4)).unwrap();
        assert_relative_eq!(u, 4.0);
        let prep = prepare(&s, Singular::Refuse).unwrap();
        for b in prep.all_bounds(u, 1e-12).unwrap() {
            assert_eq!((b.lower, b.upper), (0.0, 0.0));
        }
        let m = bounds_to_big_m(4, &prep.all_bounds(u, 1e-12).unwrap(), 1.1).unwrap();
        assert_eq!(m.get(0, 1), M_FLOOR);
        assert!(m.get(2, 2).is_infinite());
    }

    #[test]
    fn level_at_inverse_is_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_spd(&mut rng, 5, 0.2);
        let inv = crate::linalg::inverse_spd(&s).unwrap();
        let ld = cholesky(&s).unwrap().log_det();
        assert_relative_eq!(
            level_from_feasible(&s, &inv).unwrap(),
            5.0 + ld,
            epsilon = 1e-10
        );
    }

    #[test]
    fn m_rule() {
        let b = EntryBounds {
            i: 0,
            j: 1,
            lower: -0.3,
            upper: 0.5,
            level: 0.0,
        };
        assert_eq!(bound_to_m(&b, 1.0), 0.5);
        let b = EntryBounds {
            i: 0,
            j: 1,
            lower: -0.2,
            upper: 0.2,
            level: 0.0,
        };
        assert_relative_eq!(bound_to_m(&b, 1.5), 0.3);
    }

    #[test]
    fn closed_form_matches_dense_log_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let s = random_spd(&mut rng, 5, 0.3);
            let prep = prepare(&s, Singular::Refuse).unwrap();
            let i = rng.random_range(0..5);
            let j = (i + rng.random_range(1..5)) % 5;
            let lambda: f64 = rng.random_range(0.5..20.0);
            let u = prep.log_det + 5.0 + rng.random_range(0.0..2.0);
            let d = prep.dual(u, i, j);
            let mut pert = to_nalgebra(&s);
            pert[(i, j)] += 0.5 / lambda;
            pert[(j, i)] += 0.5 / lambda;
            let Some(ch) = pert.clone().cholesky() else {
                continue;
            };
            let dense = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let direct = lambda * (5.0 - u + dense);
            assert!((d.value(lambda) - direct).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = random_spd(&mut rng, 4, 0.3);
            let prep = prepare(&s, Singular::Refuse).unwrap();
            let d = prep.dual(prep.log_det + 4.0 + 0.7, 0, 2);
            let lambda = 1.0 / d.s_max() * rng.random_range(1.5..10.0);
            let h = 1e-4 * lambda;
            let (d1, d2) = d.derivatives(lambda);
            let fd1 = (d.value(lambda + h) - d.value(lambda - h)) / (2.0 * h);
            let fd2 = (d.derivatives(lambda + h).0 - d.derivatives(lambda - h).0) / (2.0 * h);
            assert_relative_eq!(d1, fd1, max_relative = 1e-6, epsilon = 1e-9);
            assert_relative_eq!(d2, fd2, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn newton_matches_fine_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let s = random_spd(&mut rng, 5, 0.2);
            let prep = prepare(&s, Singular::Refuse).unwrap();
            let d = prep.dual(prep.log_det + 5.0 + rng.random_range(0.01..3.0), 1, 3);
            let best = d.maximize(1e-14);
            let lo = 1.0 / d.s_max();
            let grid = (1..20000)
                .map(|t| d.value(lo * (1.0 + t as f64 * 1e-3).powi(2)))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(best >= grid - 1e-9);
            // any lambda gives a valid bound, the maximum is not above the optimum
            assert!(best <= d.a + 1e-12);
            // concavity along a bracket
            let (x, y) = (lo * 1.5, lo * 8.0);
            assert!(d.value(0.5 * (x + y)) >= d.value(x).min(d.value(y)));
        }
    }

    #[test]
    fn bounds_contain_enumerated_optima() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = 5;
        let table = PairTable::new(p);
        for _ in 0..3 {
            let s = random_spd(&mut rng, p, 0.3);
            let u = greedy_level(&s, 3).unwrap();
            let prep = prepare(&s, Singular::Refuse).unwrap();
            let bounds = prep.all_bounds(u, 1e-12).unwrap();
            let loose = Regularizer::ridge(1e7);
            let mut best = (f64::INFINITY, SymmetricMatrix::zeros(p));
            for mask in 0u32..1 << pair_count(p) {
                if mask.count_ones() > 3 {
                    continue;
                }
                let z = Support::from_indices(
                    &table,
                    (0..pair_count(p)).filter(|b| mask >> b & 1 == 1),
                );
                let sol = match solve_covsel(&s, &z, &loose, 1e-10, 1e-15, 1_000_000) {
                    Ok(x) => x,
                    Err(Error::Unconverged(x)) => *x,
                    Err(e) => panic!("{e}"),
                };
                if sol.primal_value < best.0 {
                    best = (sol.primal_value, sol.theta);
                }
            }
            assert!(best.0 <= u + 1e-9);
            for b in &bounds {
                let v = best.1.get(b.i, b.j);
                assert!(b.lower - 1e-6 <= v && v <= b.upper + 1e-6, "{b:?} {v}");
            }
            // a smaller level never widens the bounds
            let tighter = prep
                .all_bounds(0.5 * (u + prep.log_det + p as f64), 1e-12)
                .unwrap();
            for (t, b) in tighter.iter().zip(&bounds) {
                assert!(t.lower >= b.lower - 1e-12 && t.upper <= b.upper + 1e-12);
            }
        }
    }

    #[test]
    fn singular_covariance() {
        let s = SymmetricMatrix::from_fn(3, |_, _| 1.0);
        assert!(matches!(
            prepare(&s, Singular::Refuse),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let prep = prepare(&s, Singular::Shift(None)).unwrap();
        assert!(prep.shifted);
        assert_relative_eq!(prep.sigma.get(0, 0), 1.001);
    }
}
