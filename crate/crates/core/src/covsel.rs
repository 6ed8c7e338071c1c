//! Covariance selection on a fixed support: greedy coordinate descent on
//! `<S, Theta> - log det Theta + Omega(Theta)` with exact one-dimensional
//! steps, plus the dual bound used for cut generation.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, InverseTracker, SymmetricMatrix};
use crate::support::Support;

/// Per-entry magnitude bounds for the big-M regularizer. Entries may be
/// `+inf`; the diagonal defaults to `+inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct BigMBounds {
    dim: usize,
    values: Vec<f64>,
}

impl BigMBounds {
    /// Same bound `m` on every off-diagonal entry, unbounded diagonal.
    pub fn uniform(dim: usize, m: f64) -> Self {
        Self::from_fn(dim, |i, j| if i == j { f64::INFINITY } else { m })
    }

    /// Builds bounds from `f(i, j)` evaluated on `i <= j`.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                values[i * dim + j] = v;
                values[j * dim + i] = v;
            }
        }
        Self { dim, values }
    }

    pub fn with_diagonal(mut self, m: f64) -> Self {
        for i in 0..self.dim {
            self.values[i * self.dim + i] = m;
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Regularizer {
    BigM(BigMBounds),
    Ridge { gamma: f64 },
}

/// The regularizer restricted to one entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EntryPenalty {
    /// `|Theta_ij| <= m`.
    Box(f64),
    /// `(1 / 2 gamma) Theta_ij^2` per matrix entry.
    Ridge(f64),
}

impl Regularizer {
    pub fn ridge(gamma: f64) -> Self {
        Regularizer::Ridge { gamma }
    }

    pub fn big_m(dim: usize, m: f64) -> Self {
        Regularizer::BigM(BigMBounds::uniform(dim, m))
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> EntryPenalty {
        match self {
            Regularizer::BigM(b) => EntryPenalty::Box(b.get(i, j)),
            Regularizer::Ridge { gamma } => EntryPenalty::Ridge(*gamma),
        }
    }

    /// Conjugate `Omega*_ij(r)`. An infinite bound gives `0` at `r = 0` and
    /// `+inf` elsewhere.
    #[inline]
    pub fn conjugate(&self, i: usize, j: usize, r: f64) -> f64 {
        match self.entry(i, j) {
            EntryPenalty::Box(m) => {
                if r == 0.0 {
                    0.0
                } else {
                    m * r.abs()
                }
            }
            EntryPenalty::Ridge(g) => 0.5 * g * r * r,
        }
    }

    /// `Omega(Theta)`; big-M contributes zero (feasibility is maintained by the solver).
    pub fn penalty(&self, theta: &SymmetricMatrix) -> f64 {
        match self {
            Regularizer::BigM(_) => 0.0,
            Regularizer::Ridge { gamma } => {
                theta.as_slice().iter().map(|x| x * x).sum::<f64>() / (2.0 * gamma)
            }
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Regularizer::BigM(b) => Some(b.dim()),
            Regularizer::Ridge { .. } => None,
        }
    }

    fn validate(&self, p: usize, z: &Support) -> Result<()> {
        match self {
            Regularizer::Ridge { gamma } => {
                if !(*gamma > 0.0 && gamma.is_finite()) {
                    return Err(Error::invalid(format!(
                        "ridge gamma must be positive, got {gamma}"
                    )));
                }
            }
            Regularizer::BigM(b) => {
                if b.dim() != p {
                    return Err(Error::invalid(format!(
                        "big-M bounds have dimension {}, expected {p}",
                        b.dim()
                    )));
                }
                for i in 0..p {
                    let m = b.get(i, i);
                    if !(m > 0.0) {
                        return Err(Error::invalid(format!(
                            "diagonal bound M[{i}] must be positive"
                        )));
                    }
                }
                for &(i, j) in z.pairs() {
                    let m = b.get(i, j);
                    if !(m > 0.0) {
                        return Err(Error::invalid(format!(
                            "bound M[{i},{j}] must be positive on support pairs"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A one-dimensional step and the exact objective decrease it achieves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub t: f64,
    pub decrease: f64,
}

impl Step {
    const NONE: Step = Step {
        t: 0.0,
        decrease: 0.0,
    };
}

/// Objective change of `Theta <- Theta + t (e_i e_j^T + e_j e_i^T)`.
fn off_diagonal_phi(sigma: f64, a: f64, c: f64, theta: f64, pen: EntryPenalty, t: f64) -> f64 {
    let arg = t * (2.0 * a + c * t);
    if arg <= -1.0 {
        return f64::INFINITY;
    }
    let mut v = 2.0 * sigma * t - arg.ln_1p();
    if let EntryPenalty::Ridge(g) = pen {
        v += t * (2.0 * theta + t) / g;
    }
    v
}

fn off_diagonal_dphi(
    sigma: f64,
    a: f64,
    c: f64,
    theta: f64,
    pen: EntryPenalty,
    t: f64,
) -> (f64, f64) {
    let q = 1.0 + t * (2.0 * a + c * t);
    let num = 2.0 * (a + c * t);
    let mut d1 = 2.0 * sigma - num / q;
    let mut d2 = (num * num / q - 2.0 * c) / q;
    if let EntryPenalty::Ridge(g) = pen {
        d1 += 2.0 * (theta + t) / g;
        d2 += 2.0 / g;
    }
    (d1, d2)
}

/// Interval `(lo, hi)` on which `1 + 2at + ct^2 > 0`, for `c < 0`.
fn positivity_interval(a: f64, c: f64) -> (f64, f64) {
    let s = (a * a - c).sqrt();
    let hi = if a <= 0.0 {
        1.0 / (s - a)
    } else {
        (s + a) / -c
    };
    let lo = if a >= 0.0 {
        -1.0 / (a + s)
    } else {
        (a - s) / -c
    };
    (lo, hi)
}

/// Closed-form minimizer of the off-diagonal coordinate objective.
///
/// Minimizes `2 s t - log(1 + 2 w_ij t + (w_ij^2 - w_ii w_jj) t^2)` plus the
/// ridge term `((theta + t)^2 - theta^2) / gamma` or subject to
/// `|theta + t| <= m`.
pub fn off_diagonal_step(
    sigma_ij: f64,
    w_ii: f64,
    w_jj: f64,
    w_ij: f64,
    theta_ij: f64,
    pen: EntryPenalty,
) -> Step {
    let a = w_ij;
    let c = w_ij * w_ij - w_ii * w_jj;
    if !(c < 0.0) || !c.is_finite() {
        return Step::NONE;
    }
    let (lo, hi) = positivity_interval(a, c);
    let phi = |t: f64| off_diagonal_phi(sigma_ij, a, c, theta_ij, pen, t);
    let inside = |t: f64| t > lo && t < hi && t.is_finite();

    let roots = match pen {
        EntryPenalty::Box(_) => quadratic_roots(sigma_ij * c, 2.0 * sigma_ij * a - c, sigma_ij - a),
        EntryPenalty::Ridge(g) => cubic_roots(
            c,
            c * theta_ij + 2.0 * a + sigma_ij * g * c,
            2.0 * a * theta_ij + 1.0 + 2.0 * sigma_ij * g * a - g * c,
            theta_ij + sigma_ij * g - g * a,
        ),
    };
    let mut t =
        pick_root(roots.as_slice(), inside, phi).unwrap_or_else(|| golden_section(phi, lo, hi));
    t = newton_polish(t, lo, hi, |x| {
        off_diagonal_dphi(sigma_ij, a, c, theta_ij, pen, x)
    });
    if let EntryPenalty::Box(m) = pen {
        t = t.clamp(-m - theta_ij, m - theta_ij);
    }
    let v = phi(t);
    if !(v < 0.0) {
        return Step::NONE;
    }
    Step { t, decrease: -v }
}

/// Closed-form minimizer of the diagonal coordinate objective for
/// `Theta_ii <- Theta_ii + 2t`.
pub fn diagonal_step(sigma_ii: f64, w_ii: f64, theta_ii: f64, pen: EntryPenalty) -> Step {
    let w = w_ii;
    let t = match pen {
        EntryPenalty::Box(m) => {
            let t = 0.5 * (1.0 / sigma_ii - 1.0 / w);
            t.min(0.5 * (m - theta_ii))
        }
        EntryPenalty::Ridge(g) => {
            // Stationarity in u = 1 + 2wt: u^2/(g w) + (s + (theta - 1/w)/g) u - w = 0.
            let qa = 1.0 / (g * w);
            let qb = sigma_ii + (theta_ii - 1.0 / w) / g;
            let disc = (qb * qb + 4.0 * qa * w).sqrt();
            let u = if qb >= 0.0 {
                2.0 * w / (qb + disc)
            } else {
                (disc - qb) / (2.0 * qa)
            };
            (u - 1.0) / (2.0 * w)
        }
    };
    let arg = 2.0 * w * t;
    if !(arg > -1.0) || !t.is_finite() {
        return Step::NONE;
    }
    let mut v = 2.0 * sigma_ii * t - arg.ln_1p();
    if let EntryPenalty::Ridge(g) = pen {
        v += 2.0 * t * (theta_ii + t) / g;
    }
    if !(v < 0.0) {
        return Step::NONE;
    }
    Step { t, decrease: -v }
}

fn pick_root(roots: &[f64], inside: impl Fn(f64) -> bool, phi: impl Fn(f64) -> f64) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &r in roots {
        if inside(r) {
            let v = phi(r);
            if best.is_none_or(|(_, bv)| v < bv) {
                best = Some((r, v));
            }
        }
    }
    best.map(|(r, _)| r)
}

/// Newton refinement of a stationary point of a strictly convex function on
/// `(lo, hi)`, keeping a sign bracket.
fn newton_polish(t0: f64, lo: f64, hi: f64, d: impl Fn(f64) -> (f64, f64)) -> f64 {
    let (mut l, mut h) = (lo, hi);
    let mut t = t0;
    for _ in 0..4 {
        let (d1, d2) = d(t);
        if d1 == 0.0 || !d1.is_finite() {
            break;
        }
        if d1 > 0.0 {
            h = t;
        } else {
            l = t;
        }
        let next = t - d1 / d2;
        let next = if next > l && next < h && next.is_finite() {
            next
        } else {
            break;
        };
        if (next - t).abs() <= 1e-15 * (1.0 + t.abs()) {
            t = next;
            break;
        }
        t = next;
    }
    t
}

fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let shrink = 1e-12 * (hi - lo);
    let (mut a, mut b) = (lo + shrink, hi - shrink);
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        }
        if b - a <= 1e-15 * (1.0 + a.abs()) {
            break;
        }
    }
    0.5 * (a + b)
}

/// Up to three real roots, stored inline to keep the greedy scan allocation-free.
#[derive(Clone, Copy, Debug, Default)]
struct Roots {
    vals: [f64; 3],
    len: usize,
}

impl Roots {
    fn push(&mut self, x: f64) {
        self.vals[self.len] = x;
        self.len += 1;
    }

    fn as_slice(&self) -> &[f64] {
        &self.vals[..self.len]
    }

    fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.vals[..self.len]
    }
}

/// Real roots of `a t^2 + b t + c`.
fn quadratic_roots(a: f64, b: f64, c: f64) -> Roots {
    let mut out = Roots::default();
    if a == 0.0 {
        if b != 0.0 {
            out.push(-c / b);
        }
        return out;
    }
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    if q == 0.0 {
        out.push(0.0);
    } else {
        out.push(q / a);
        out.push(c / q);
    }
    out
}

/// Real roots of `a t^3 + b t^2 + c t + d`, polished by Newton steps on the polynomial.
fn cubic_roots(a: f64, b: f64, c: f64, d: f64) -> Roots {
    if a == 0.0 {
        return quadratic_roots(b, c, d);
    }
    let (b, c, d) = (b / a, c / a, d / a);
    let shift = b / 3.0;
    let p = c - b * shift;
    let q = 2.0 * shift * shift * shift - c * shift + d;
    let mut roots = Roots::default();
    let disc = (q * q) / 4.0 + (p * p * p) / 27.0;
    if p < 0.0 && disc < 0.0 {
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let phi = arg.acos() / 3.0;
        for k in 0..3 {
            let x = m * (phi - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos();
            roots.push(x - shift);
        }
    } else {
        let s = disc.max(0.0).sqrt();
        let u = (-q / 2.0 + s).cbrt();
        let v = (-q / 2.0 - s).cbrt();
        roots.push(u + v - shift);
    }
    for r in roots.as_mut_slice() {
        for _ in 0..3 {
            let f = ((*r + b) * *r + c) * *r + d;
            let df = (3.0 * *r + 2.0 * b) * *r + c;
            if df == 0.0 || !f.is_finite() {
                break;
            }
            let next = *r - f / df;
            if !next.is_finite() {
                break;
            }
            *r = next;
        }
    }
    roots
}

#[derive(Clone, Debug)]
pub struct CovSelOptions {
    pub gap_tol: f64,
    pub improve_tol: f64,
    pub max_iter: usize,
    /// Applied updates between fresh inversions; `None` uses `max(500, p)`.
    pub refresh_every: Option<usize>,
}

impl Default for CovSelOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-4,
            improve_tol: 1e-12,
            max_iter: 1_000_000,
            refresh_every: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CovSelSolution {
    pub theta: SymmetricMatrix,
    pub w_inv: SymmetricMatrix,
    pub primal_value: f64,
    /// Dual-feasible `R` with `Sigma + R` positive definite.
    pub dual_point: SymmetricMatrix,
    pub dual_value: f64,
    /// `log det(Sigma + R)`.
    pub dual_log_det: f64,
    pub gap: f64,
    pub iterations: usize,
}

/// Solves covariance selection on `z` with default options apart from the
/// given tolerances.
pub fn solve_covsel(
    sigma: &SymmetricMatrix,
    z: &Support,
    reg: &Regularizer,
    gap_tol: f64,
    improve_tol: f64,
    max_iter: usize,
) -> Result<CovSelSolution> {
    let opts = CovSelOptions {
        gap_tol,
        improve_tol,
        max_iter,
        refresh_every: None,
    };
    solve_covsel_with(sigma, z, reg, &opts)
}

enum Stop {
    Gap,
    Stalled,
    MaxIter,
}

pub fn solve_covsel_with(
    sigma: &SymmetricMatrix,
    z: &Support,
    reg: &Regularizer,
    opts: &CovSelOptions,
) -> Result<CovSelSolution> {
    let p = sigma.dim();
    if z.dim() != p {
        return Err(Error::invalid(format!(
            "support dimension {} does not match covariance dimension {p}",
            z.dim()
        )));
    }
    for i in 0..p {
        let s = sigma.get(i, i);
        if !(s > 0.0) {
            return Err(Error::invalid(format!(
                "covariance diagonal entry {i} is {s}, must be positive"
            )));
        }
    }
    if !(opts.gap_tol > 0.0) {
        return Err(Error::invalid("gap tolerance must be positive"));
    }
    reg.validate(p, z)?;

    let init: Vec<f64> = (0..p)
        .map(|i| match reg.entry(i, i) {
            EntryPenalty::Box(m) => (1.0 / sigma.get(i, i)).min(m),
            EntryPenalty::Ridge(_) => 1.0 / sigma.get(i, i),
        })
        .collect();
    let refresh = opts.refresh_every.unwrap_or(p.max(500));
    let mut tracker = InverseTracker::new(SymmetricMatrix::from_diagonal(&init), refresh)?;
    let gamma = match reg {
        Regularizer::Ridge { gamma } => Some(*gamma),
        Regularizer::BigM(_) => None,
    };
    let pairs = z.pairs();

    let mut lin = sigma.inner(tracker.theta());
    let mut sq = tracker
        .theta()
        .as_slice()
        .iter()
        .map(|x| x * x)
        .sum::<f64>();
    let mut iterations = 0;
    let mut retried = false;
    let project_every = match reg {
        Regularizer::BigM(_) => (2 * p).max(20),
        Regularizer::Ridge { .. } => 0,
    };

    let stop = loop {
        let pen = gamma.map_or(0.0, |g| sq / (2.0 * g));
        let primal = lin - tracker.log_det() + pen;
        let (dual, _) = dual_from_inverse(sigma, tracker.w(), tracker.log_det(), pairs, reg);
        if primal - dual <= opts.gap_tol {
            if retried || tracker_fresh_gap(&mut tracker, sigma, pairs, reg, opts.gap_tol)? {
                break Stop::Gap;
            }
            retried = true;
            lin = sigma.inner(tracker.theta());
            sq = tracker.theta().as_slice().iter().map(|x| x * x).sum();
            continue;
        }
        if project_every > 0 && iterations > 0 && iterations % project_every == 0 {
            let projected = projected_dual(sigma, tracker.theta(), tracker.w(), pairs, reg);
            if projected.is_some_and(|(d, _, _)| primal - d <= opts.gap_tol)
                && projected_fresh_gap(&mut tracker, sigma, pairs, reg, opts.gap_tol)?
            {
                break Stop::Gap;
            }
        }
        if iterations >= opts.max_iter {
            break Stop::MaxIter;
        }

        let w = tracker.w();
        let theta = tracker.theta();
        let mut best = (0usize, 0usize, Step::NONE);
        for i in 0..p {
            let s = diagonal_step(
                sigma.get(i, i),
                w.get(i, i),
                theta.get(i, i),
                reg.entry(i, i),
            );
            if s.decrease > best.2.decrease {
                best = (i, i, s);
            }
        }
        for &(i, j) in pairs {
            let s = off_diagonal_step(
                sigma.get(i, j),
                w.get(i, i),
                w.get(j, j),
                w.get(i, j),
                theta.get(i, j),
                reg.entry(i, j),
            );
            if s.decrease > best.2.decrease {
                best = (i, j, s);
            }
        }
        let scale = scaling_step(p, lin, sq, gamma, scale_limit(tracker.theta(), pairs, reg));
        if scale.decrease > best.2.decrease {
            if scale.decrease < opts.improve_tol {
                break Stop::Stalled;
            }
            tracker.scale(scale.t);
            lin *= scale.t;
            sq *= scale.t * scale.t;
            iterations += 1;
            retried = false;
            continue;
        }
        let (i, j, step) = best;
        if step.decrease < opts.improve_tol {
            break Stop::Stalled;
        }

        let t = step.t;
        let old = tracker.theta().get(i, j);
        if i == j {
            lin += 2.0 * sigma.get(i, i) * t;
            sq += (old + 2.0 * t).powi(2) - old * old;
        } else {
            lin += 2.0 * sigma.get(i, j) * t;
            sq += 2.0 * ((old + t).powi(2) - old * old);
        }
        tracker.apply(i, j, t)?;
        iterations += 1;
        retried = false;
    };

    let scale = scaling_step(p, lin, sq, gamma, scale_limit(tracker.theta(), pairs, reg));
    if scale.decrease > 0.0 {
        tracker.scale(scale.t);
    }
    tracker.refresh()?;
    let sol = finalize(sigma, tracker, pairs, reg, iterations);
    match stop {
        Stop::MaxIter if !(sol.gap <= opts.gap_tol) => Err(Error::Unconverged(Box::new(sol))),
        _ => Ok(sol),
    }
}

/// Best rescaling `Theta <- alpha Theta` given `lin = <S, Theta>` and
/// `sq = ||Theta||^2`; `Step::t` holds `alpha`.
fn scaling_step(p: usize, lin: f64, sq: f64, gamma: Option<f64>, alpha_max: f64) -> Step {
    let pf = p as f64;
    let alpha = match gamma {
        Some(g) => 2.0 * pf / (lin + (lin * lin + 4.0 * pf * sq / g).sqrt()),
        None if lin > 0.0 => pf / lin,
        None => alpha_max,
    }
    .min(alpha_max);
    if !(alpha > 0.0) || !alpha.is_finite() || alpha == 1.0 {
        return Step {
            t: 1.0,
            decrease: 0.0,
        };
    }
    let mut v = (alpha - 1.0) * lin - pf * alpha.ln();
    if let Some(g) = gamma {
        v += (alpha * alpha - 1.0) * sq / (2.0 * g);
    }
    if !(v < 0.0) {
        return Step {
            t: 1.0,
            decrease: 0.0,
        };
    }
    Step {
        t: alpha,
        decrease: -v,
    }
}

/// Largest `alpha` keeping `alpha Theta` inside the big-M box.
fn scale_limit(theta: &SymmetricMatrix, pairs: &[(usize, usize)], reg: &Regularizer) -> f64 {
    let Regularizer::BigM(b) = reg else {
        return f64::INFINITY;
    };
    let mut lim = f64::INFINITY;
    let mut visit = |i: usize, j: usize| {
        let x = theta.get(i, j).abs();
        if x > 0.0 {
            lim = lim.min(b.get(i, j) / x);
        }
    };
    for i in 0..theta.dim() {
        visit(i, i);
    }
    for &(i, j) in pairs {
        visit(i, j);
    }
    lim
}

/// Refreshes the tracker and reports whether the gap is still within tolerance.
fn tracker_fresh_gap(
    tracker: &mut InverseTracker,
    sigma: &SymmetricMatrix,
    pairs: &[(usize, usize)],
    reg: &Regularizer,
    gap_tol: f64,
) -> Result<bool> {
    tracker.refresh()?;
    let primal = sigma.inner(tracker.theta()) - tracker.log_det() + reg.penalty(tracker.theta());
    let (dual, _) = dual_from_inverse(sigma, tracker.w(), tracker.log_det(), pairs, reg);
    Ok(primal - dual <= gap_tol)
}

fn projected_fresh_gap(
    tracker: &mut InverseTracker,
    sigma: &SymmetricMatrix,
    pairs: &[(usize, usize)],
    reg: &Regularizer,
    gap_tol: f64,
) -> Result<bool> {
    tracker.refresh()?;
    let primal = sigma.inner(tracker.theta()) - tracker.log_det();
    Ok(
        projected_dual(sigma, tracker.theta(), tracker.w(), pairs, reg)
            .is_some_and(|(d, _, _)| primal - d <= gap_tol),
    )
}

/// Which dual candidate attains the reported bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DualChoice {
    /// `Sigma + R = W`.
    Plain,
    /// `Sigma + R = D W D` with `D = diag(sqrt(Sigma_ii / W_ii))`, so `R_ii = 0`.
    Scaled,
}

/// Best dual value among the candidates built from `W`, in `O(p + |pairs|)`.
fn dual_from_inverse(
    sigma: &SymmetricMatrix,
    w: &SymmetricMatrix,
    log_det_theta: f64,
    pairs: &[(usize, usize)],
    reg: &Regularizer,
) -> (f64, DualChoice) {
    let p = sigma.dim();
    let mut plain = p as f64 - log_det_theta;
    let mut scaled = plain;
    let d: Vec<f64> = (0..p)
        .map(|i| (sigma.get(i, i) / w.get(i, i)).sqrt())
        .collect();
    for (i, di) in d.iter().enumerate() {
        plain -= reg.conjugate(i, i, w.get(i, i) - sigma.get(i, i));
        scaled += 2.0 * di.ln();
    }
    for &(i, j) in pairs {
        plain -= 2.0 * reg.conjugate(i, j, w.get(i, j) - sigma.get(i, j));
        scaled -= 2.0 * reg.conjugate(i, j, d[i] * d[j] * w.get(i, j) - sigma.get(i, j));
    }
    if scaled > plain || (plain.is_nan() && !scaled.is_nan()) {
        (scaled, DualChoice::Scaled)
    } else {
        (plain, DualChoice::Plain)
    }
}

/// Big-M dual candidate that also zeroes `R_ij` on support pairs whose box
/// is inactive, as stationarity requires at the optimum. Starts from the
/// scaled point and needs a fresh factorization, so it costs `O(p^3)`.
fn projected_dual(
    sigma: &SymmetricMatrix,
    theta: &SymmetricMatrix,
    w: &SymmetricMatrix,
    pairs: &[(usize, usize)],
    reg: &Regularizer,
) -> Option<(f64, SymmetricMatrix, f64)> {
    let Regularizer::BigM(b) = reg else {
        return None;
    };
    let p = sigma.dim();
    let d: Vec<f64> = (0..p)
        .map(|i| (sigma.get(i, i) / w.get(i, i)).sqrt())
        .collect();
    let mut r = SymmetricMatrix::from_fn(p, |i, j| {
        if i == j {
            0.0
        } else {
            d[i] * d[j] * w.get(i, j) - sigma.get(i, j)
        }
    });
    let mut value = p as f64;
    for &(i, j) in pairs {
        let m = b.get(i, j);
        let x = theta.get(i, j);
        let rij = r.get(i, j);
        if x.abs() < m * (1.0 - 1e-9) || rij * x < 0.0 {
            r.set(i, j, 0.0);
        } else {
            value -= 2.0 * m * rij.abs();
        }
    }
    let log_det = cholesky(&sigma.add(&r)).ok()?.log_det();
    value += log_det;
    value.is_finite().then_some((value, r, log_det))
}

fn finalize(
    sigma: &SymmetricMatrix,
    tracker: InverseTracker,
    pairs: &[(usize, usize)],
    reg: &Regularizer,
    iterations: usize,
) -> CovSelSolution {
    let log_det_theta = tracker.log_det();
    let (theta, w) = tracker.into_parts();
    let p = sigma.dim();
    let primal_value = sigma.inner(&theta) - log_det_theta + reg.penalty(&theta);
    let (mut dual_value, choice) = dual_from_inverse(sigma, &w, log_det_theta, pairs, reg);
    let (mut dual_point, mut dual_log_det) = match choice {
        DualChoice::Plain => (w.sub(sigma), -log_det_theta),
        DualChoice::Scaled => {
            let d: Vec<f64> = (0..p)
                .map(|i| (sigma.get(i, i) / w.get(i, i)).sqrt())
                .collect();
            let shift: f64 = d.iter().map(|x| 2.0 * x.ln()).sum();
            let r = SymmetricMatrix::from_fn(p, |i, j| {
                if i == j {
                    0.0
                } else {
                    d[i] * d[j] * w.get(i, j) - sigma.get(i, j)
                }
            });
            (r, -log_det_theta + shift)
        }
    };
    if let Some((v, r, ld)) = projected_dual(sigma, &theta, &w, pairs, reg) {
        if v > dual_value || dual_value.is_nan() {
            (dual_value, dual_point, dual_log_det) = (v, r, ld);
        }
    }
    CovSelSolution {
        gap: primal_value - dual_value,
        theta,
        w_inv: w,
        primal_value,
        dual_point,
        dual_value,
        dual_log_det,
        iterations,
    }
}

/// Dual point `R = Theta^{-1} - Sigma`.
pub fn dual_point(sigma: &SymmetricMatrix, theta: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    Ok(cholesky(theta)?.inverse().sub(sigma))
}

/// Dual objective `p + log det(Sigma + R) - <Z, Omega*(R)>`, a lower bound on
/// the covariance-selection value of `z` for any `R` with `Sigma + R` positive
/// definite.
pub fn dual_value(
    sigma: &SymmetricMatrix,
    r: &SymmetricMatrix,
    z: &Support,
    reg: &Regularizer,
) -> Result<f64> {
    let p = sigma.dim();
    let log_det = cholesky(&sigma.add(r))?.log_det();
    let mut v = p as f64 + log_det;
    for i in 0..p {
        v -= reg.conjugate(i, i, r.get(i, i));
    }
    for &(i, j) in z.pairs() {
        v -= 2.0 * reg.conjugate(i, j, r.get(i, j));
    }
    Ok(v)
}

/// Entrywise conjugate weights `Omega*_ij(R_ij)`. Fails if an infinite
/// big-M bound meets a nonzero `R_ij`.
pub fn conjugate_weights(r: &SymmetricMatrix, reg: &Regularizer) -> Result<SymmetricMatrix> {
    let p = r.dim();
    let mut out = SymmetricMatrix::zeros(p);
    for i in 0..p {
        for j in i..p {
            let v = reg.conjugate(i, j, r.get(i, j));
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "conjugate weight at ({i},{j}) is infinite"
                )));
            }
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Objective `<S, Theta> - log det Theta + Omega(Theta)`; `+inf` outside the
/// domain or outside the big-M box.
pub fn objective(sigma: &SymmetricMatrix, theta: &SymmetricMatrix, reg: &Regularizer) -> f64 {
    let Ok(f) = cholesky(theta) else {
        return f64::INFINITY;
    };
    if let Regularizer::BigM(b) = reg {
        let p = theta.dim();
        for i in 0..p {
            for j in i..p {
                if theta.get(i, j).abs() > b.get(i, j) * (1.0 + 1e-12) {
                    return f64::INFINITY;
                }
            }
        }
    }
    sigma.inner(theta) - f.log_det() + reg.penalty(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::testutil::random_spd;
    use crate::linalg::{inverse_spd, rank_two_update_inverse};
    use crate::support::PairTable;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
        // Plain golden-section with a fine scan to seed the bracket.
        let n = 2000;
        let mut best = (lo, f64::INFINITY);
        for k in 1..n {
            let x = lo + (hi - lo) * k as f64 / n as f64;
            let v = f(x);
            if v < best.1 {
                best = (x, v);
            }
        }
        let h = (hi - lo) / n as f64;
        golden_section(f, (best.0 - h).max(lo), (best.0 + h).min(hi))
    }

    #[test]
    fn off_diagonal_identity_is_stationary() {
        let s = off_diagonal_step(0.0, 1.0, 1.0, 0.0, 0.0, EntryPenalty::Ridge(1.0));
        assert_eq!(s.t, 0.0);
        assert_eq!(s.decrease, 0.0);
    }

    #[test]
    fn big_m_clamps_to_box() {
        // Unconstrained minimizer of -2*0.5 t... : sigma strongly negative pushes t up.
        let free = off_diagonal_step(-0.4, 1.0, 1.0, 0.0, 0.0, EntryPenalty::Box(f64::INFINITY));
        assert!(free.t > 0.1);
        let s = off_diagonal_step(-0.4, 1.0, 1.0, 0.0, 0.0, EntryPenalty::Box(0.1));
        assert_relative_eq!(s.t, 0.1, epsilon = 1e-15);
        let s = off_diagonal_step(-0.4, 1.0, 1.0, 0.05, 0.05, EntryPenalty::Box(0.1));
        assert_relative_eq!(s.t, 0.05, epsilon = 1e-15);
    }

    #[test]
    fn diagonal_step_examples() {
        let inf = EntryPenalty::Box(f64::INFINITY);
        assert_eq!(diagonal_step(1.0, 1.0, 1.0, inf).t, 0.0);
        let s = diagonal_step(2.0, 1.0, 1.0, inf);
        assert_relative_eq!(s.t, -0.25, epsilon = 1e-15);
        assert_relative_eq!(1.0 + 2.0 * s.t, 0.5, epsilon = 1e-15);
        let s = diagonal_step(0.5, 1.0, 1.0, EntryPenalty::Box(1.5));
        assert_relative_eq!(s.t, 0.25, epsilon = 1e-15);
    }

    fn random_state(rng: &mut ChaCha8Rng) -> (f64, f64, f64, f64, f64) {
        let p = 4;
        let theta = random_spd(rng, p, 0.3);
        let w = inverse_spd(&theta).unwrap();
        let sigma = rng.random_range(-2.0..2.0);
        (
            sigma,
            w.get(0, 0),
            w.get(1, 1),
            w.get(0, 1),
            theta.get(0, 1),
        )
    }

    #[test]
    fn off_diagonal_matches_golden_section() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 0..200 {
            let (s, wii, wjj, wij, th) = random_state(&mut rng);
            let pen = if n % 2 == 0 {
                EntryPenalty::Ridge(rng.random_range(0.1..10.0))
            } else {
                EntryPenalty::Box(th.abs() + rng.random_range(0.05..2.0))
            };
            let step = off_diagonal_step(s, wii, wjj, wij, th, pen);
            let a = wij;
            let c = wij * wij - wii * wjj;
            let (mut lo, mut hi) = positivity_interval(a, c);
            if let EntryPenalty::Box(m) = pen {
                lo = lo.max(-m - th);
                hi = hi.min(m - th);
            }
            let f = |t: f64| off_diagonal_phi(s, a, c, th, pen, t);
            let oracle = oracle_min(f, lo, hi);
            assert!(
                (step.t - oracle).abs() <= 1e-6,
                "case {n}: {} vs {oracle}",
                step.t
            );
            assert_relative_eq!(step.decrease, -f(step.t), epsilon = 1e-14);
        }
    }

    #[test]
    fn diagonal_matches_golden_section() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let w = rng.random_range(0.1..3.0);
            let s = rng.random_range(0.1..3.0);
            let th = rng.random_range(0.2..3.0);
            let g = rng.random_range(0.1..10.0);
            let pen = EntryPenalty::Ridge(g);
            let step = diagonal_step(s, w, th, pen);
            let f = |t: f64| {
                let arg = 2.0 * w * t;
                if arg <= -1.0 {
                    f64::INFINITY
                } else {
                    2.0 * s * t - arg.ln_1p() + 2.0 * t * (th + t) / g
                }
            };
            let oracle = oracle_min(f, -0.5 / w, 50.0);
            assert!((step.t - oracle).abs() <= 1e-6);
        }
    }

    #[test]
    fn step_decrease_matches_objective_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = 5;
        let sigma = random_spd(&mut rng, p, 0.2);
        let reg = Regularizer::ridge(2.0);
        let mut theta = SymmetricMatrix::identity(p);
        theta.set(0, 2, 0.2);
        let w = inverse_spd(&theta).unwrap();
        let step = off_diagonal_step(
            sigma.get(0, 2),
            w.get(0, 0),
            w.get(2, 2),
            w.get(0, 2),
            theta.get(0, 2),
            reg.entry(0, 2),
        );
        let before = objective(&sigma, &theta, &reg);
        let mut after = theta.clone();
        after.add_to(0, 2, step.t);
        let after_v = objective(&sigma, &after, &reg);
        assert_relative_eq!(before - after_v, step.decrease, epsilon = 1e-9);
        let updated = rank_two_update_inverse(&w, 0, 2, step.t).unwrap();
        assert!(updated.identity_residual(&after) < 1e-10);
    }

    #[test]
    fn cubic_and_quadratic_roots() {
        let mut r = cubic_roots(1.0, -6.0, 11.0, -6.0).as_slice().to_vec();
        r.sort_by(f64::total_cmp);
        for (x, e) in r.iter().zip([1.0, 2.0, 3.0]) {
            assert_relative_eq!(*x, e, epsilon = 1e-12);
        }
        let r = cubic_roots(2.0, 0.0, 2.0, -4.0);
        let r = r.as_slice();
        assert_eq!(r.len(), 1);
        assert_relative_eq!(r[0], 1.0, epsilon = 1e-12);
        let mut q = quadratic_roots(1.0, -3.0, 2.0).as_slice().to_vec();
        q.sort_by(f64::total_cmp);
        assert_eq!(q, vec![1.0, 2.0]);
    }

    #[test]
    fn identity_diagonal_support() {
        let p = 4;
        let sigma = SymmetricMatrix::identity(p);
        let sol = solve_covsel(
            &sigma,
            &Support::empty(p),
            &Regularizer::big_m(p, f64::INFINITY),
            1e-8,
            1e-12,
            1000,
        )
        .unwrap();
        assert_eq!(sol.theta, SymmetricMatrix::identity(p));
        assert_relative_eq!(sol.primal_value, p as f64, epsilon = 1e-12);
        assert!(sol.gap.abs() < 1e-12);
    }

    #[test]
    fn diagonal_only_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = 6;
        let sigma = random_spd(&mut rng, p, 0.5);
        let sol = solve_covsel(
            &sigma,
            &Support::empty(p),
            &Regularizer::big_m(p, f64::INFINITY),
            1e-10,
            1e-14,
            1000,
        )
        .unwrap();
        let expected = p as f64 + (0..p).map(|i| sigma.get(i, i).ln()).sum::<f64>();
        assert_relative_eq!(sol.primal_value, expected, epsilon = 1e-10);
        for i in 0..p {
            assert_relative_eq!(sol.theta.get(i, i), 1.0 / sigma.get(i, i), epsilon = 1e-12);
        }
        assert!(sol.gap.abs() < 1e-10);
    }

    /// Projected-free gradient descent with backtracking on the full-support ridge objective.
    fn gradient_oracle(sigma: &SymmetricMatrix, gamma: f64) -> f64 {
        let p = sigma.dim();
        let reg = Regularizer::ridge(gamma);
        let mut theta = SymmetricMatrix::identity(p);
        let mut f = objective(sigma, &theta, &reg);
        for _ in 0..20000 {
            let w = inverse_spd(&theta).unwrap();
            let grad = sigma.sub(&w).add(&theta.scaled(1.0 / gamma));
            let gn = grad.inner(&grad);
            if gn < 1e-26 {
                break;
            }
            let mut step = 1.0;
            loop {
                let cand = theta.sub(&grad.scaled(step));
                let fc = objective(sigma, &cand, &reg);
                if fc <= f - 0.3 * step * gn {
                    theta = cand;
                    f = fc;
                    break;
                }
                step *= 0.5;
                if step < 1e-20 {
                    return f;
                }
            }
        }
        f
    }

    #[test]
    fn full_support_ridge_matches_gradient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = 3;
        let sigma = random_spd(&mut rng, p, 0.2);
        let sol = solve_covsel(
            &sigma,
            &Support::full(p),
            &Regularizer::ridge(10.0),
            1e-10,
            1e-15,
            100_000,
        )
        .unwrap();
        let oracle = gradient_oracle(&sigma, 10.0);
        assert_relative_eq!(sol.primal_value, oracle, epsilon = 1e-6);
    }

    fn brute_value(sigma: &SymmetricMatrix, z: &Support, reg: &Regularizer) -> f64 {
        solve_covsel(sigma, z, reg, 1e-10, 1e-15, 1_000_000)
            .unwrap()
            .primal_value
    }

    #[test]
    fn partial_iterates_give_valid_dual_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = 4;
        let table = PairTable::new(p);
        let sigma = random_spd(&mut rng, p, 0.1);
        for reg in [Regularizer::ridge(1.5), Regularizer::big_m(p, 0.8)] {
            for a in 0..table.len() {
                for b in a + 1..table.len() {
                    let z = Support::from_indices(&table, [a, b]);
                    let exact = brute_value(&sigma, &z, &reg);
                    for iters in [0, 1, 3, 7] {
                        let partial = match solve_covsel(&sigma, &z, &reg, 1e-12, 0.0, iters) {
                            Ok(s) => s,
                            Err(Error::Unconverged(s)) => *s,
                            Err(e) => panic!("{e}"),
                        };
                        assert!(partial.dual_value <= exact + 1e-9);
                        let check = dual_value(&sigma, &partial.dual_point, &z, &reg).unwrap();
                        assert_relative_eq!(check, partial.dual_value, epsilon = 1e-9);
                        assert!(partial.dual_value <= partial.primal_value + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn converged_solution_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = 8;
        let table = PairTable::new(p);
        let sigma = random_spd(&mut rng, p, 0.1);
        let z = Support::from_indices(&table, (0..table.len()).filter(|k| k % 3 == 0));
        let gamma = 0.7;
        let sol = solve_covsel(
            &sigma,
            &z,
            &Regularizer::ridge(gamma),
            1e-6,
            1e-14,
            1_000_000,
        )
        .unwrap();
        for i in 0..p {
            for j in i + 1..p {
                if !z.contains(i, j) {
                    assert_eq!(sol.theta.get(i, j), 0.0);
                }
            }
        }
        assert!(cholesky(&sol.theta).is_ok());
        assert!(sol.gap <= 1e-6 && sol.gap >= -1e-9);
        let kkt = sigma.inner(&sol.theta) + sol.theta.inner(&sol.theta) / gamma - p as f64;
        assert!(kkt.abs() <= 1e-9, "kkt residual {kkt}");
        assert!(sol.w_inv.identity_residual(&sol.theta) <= p as f64 * 1e-7);
        let n2 = sol.theta.norm_l2();
        assert!(n2 <= (p as f64 * gamma).sqrt() + 1e-6);
        let s2 = sigma.norm_l2();
        let lower = 0.5 * gamma * s2 * ((1.0 + 4.0 * p as f64 / (gamma * s2 * s2)).sqrt() - 1.0);
        assert!(n2 >= lower - 1e-6);

        let bm = Regularizer::big_m(p, 0.3);
        let sol = solve_covsel(&sigma, &z, &bm, 1e-6, 1e-14, 1_000_000).unwrap();
        for &(i, j) in z.pairs() {
            assert!(sol.theta.get(i, j).abs() <= 0.3 + 1e-15);
        }
        assert!(sol.gap <= 1e-6);
    }

    #[test]
    fn full_support_dual_at_unconstrained_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = 5;
        let sigma = random_spd(&mut rng, p, 0.3);
        let r = SymmetricMatrix::zeros(p);
        let v = dual_value(&sigma, &r, &Support::full(p), &Regularizer::big_m(p, 1.0)).unwrap();
        let ld = cholesky(&sigma).unwrap().log_det();
        assert_relative_eq!(v, p as f64 + ld, epsilon = 1e-12);
        let theta = inverse_spd(&sigma).unwrap();
        assert_relative_eq!(
            objective(&sigma, &theta, &Regularizer::big_m(p, f64::INFINITY)),
            v,
            epsilon = 1e-10
        );
        assert!(dual_point(&sigma, &theta).unwrap().norm_max() < 1e-10);
    }

    #[test]
    fn conjugate_weight_examples() {
        let mut r = SymmetricMatrix::zeros(3);
        assert_eq!(
            conjugate_weights(&r, &Regularizer::ridge(1.0)).unwrap(),
            SymmetricMatrix::zeros(3)
        );
        r.set(0, 1, 2.0);
        assert_eq!(
            conjugate_weights(&r, &Regularizer::ridge(1.0))
                .unwrap()
                .get(0, 1),
            2.0
        );
        r.set(0, 1, -3.0);
        assert_eq!(
            conjugate_weights(&r, &Regularizer::big_m(3, 0.5))
                .unwrap()
                .get(1, 0),
            1.5
        );
        r.set(0, 0, 1.0);
        assert!(conjugate_weights(&r, &Regularizer::big_m(3, 0.5)).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = SymmetricMatrix::identity(3);
        s.set(1, 1, 0.0);
        assert!(matches!(
            solve_covsel(
                &s,
                &Support::empty(3),
                &Regularizer::ridge(1.0),
                1e-4,
                1e-12,
                10
            ),
            Err(Error::InvalidInput(_))
        ));
        let s = SymmetricMatrix::identity(3);
        let z = Support::new(3, [(0, 1)]).unwrap();
        assert!(solve_covsel(&s, &z, &Regularizer::big_m(3, 0.0), 1e-4, 1e-12, 10).is_err());
    }
}
