//! Dense symmetric positive-definite linear algebra.
//!
//! Everything here works on full row-major storage. Symmetric matrices mirror
//! every write, so `get(i, j) == get(j, i)` holds bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense symmetric `p x p` matrix with finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetricMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymmetricMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    /// Builds a matrix from `f(i, j)` evaluated on the upper triangle.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Builds a matrix from row-major data, requiring exact symmetry.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_row_major_symmetrized(dim, data, 0.0)
    }

    /// Builds a matrix from row-major data whose mirrored entries may differ
    /// by at most `tol` (relative to the largest magnitude); the stored value
    /// is the average of the pair.
    pub fn from_row_major_symmetrized(dim: usize, data: Vec<f64>, tol: f64) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::invalid(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at ({}, {})",
                pos / dim,
                pos % dim
            )));
        }
        let scale = data.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let a = data[i * dim + j];
                let b = data[j * dim + i];
                if (a - b).abs() > tol * scale {
                    return Err(Error::invalid(format!(
                        "matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
                m.set(i, j, if a == b { a } else { 0.5 * (a + b) });
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(v.is_finite(), "non-finite value at ({i}, {j})");
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        let cur = self.get(i, j);
        self.set(i, j, cur + v);
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        Self {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        Self {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// Frobenius inner product `<A, B> = sum_ij A_ij B_ij`.
    pub fn inner(&self, other: &Self) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Entrywise l1 norm.
    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    /// Entrywise l2 norm (Frobenius).
    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Entrywise max-abs norm.
    pub fn norm_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Dense product `self * other` in row-major order. The result is not
    /// symmetric in general.
    pub fn matmul(&self, other: &Self) -> Vec<f64> {
        let p = self.dim;
        assert_eq!(p, other.dim);
        let mut out = vec![0.0; p * p];
        for i in 0..p {
            let out_row = &mut out[i * p..(i + 1) * p];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                        *o += a * b;
                    }
                }
            }
        }
        out
    }

    /// `max_ij |(self * other - I)_ij|`.
    pub fn identity_residual(&self, other: &Self) -> f64 {
        let p = self.dim;
        self.matmul(other)
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                let target = if idx / p == idx % p { 1.0 } else { 0.0 };
                (v - target).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Congruence with a diagonal matrix: `D A D` where `D = diag(d)`.
    pub fn diag_congruence(&self, d: &[f64]) -> Self {
        let p = self.dim;
        assert_eq!(d.len(), p);
        let mut out = self.clone();
        for i in 0..p {
            for j in 0..p {
                out.data[i * p + j] *= d[i] * d[j];
            }
        }
        out
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Lower-triangular Cholesky factor `L` with `L L^T = A`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Vec<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn l(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.l(i, i).ln()).sum::<f64>()
    }

    /// Reconstructs `L L^T`.
    pub fn reconstruct(&self) -> SymmetricMatrix {
        let p = self.dim;
        SymmetricMatrix::from_fn(p, |i, j| {
            let (ri, rj) = (
                &self.lower[i * p..i * p + i + 1],
                &self.lower[j * p..j * p + i + 1],
            );
            ri.iter().zip(rj).map(|(a, b)| a * b).sum()
        })
    }

    /// `A^{-1} = L^{-T} L^{-1}`.
    pub fn inverse(&self) -> SymmetricMatrix {
        let p = self.dim;
        // X = L^{-1}, built row by row: x_i = (e_i - sum_{k<i} L_ik x_k) / L_ii.
        let mut x = vec![0.0; p * p];
        for i in 0..p {
            let (done, rest) = x.split_at_mut(i * p);
            let row_i = &mut rest[..p];
            row_i[i] = 1.0;
            for k in 0..i {
                let lik = self.lower[i * p + k];
                if lik != 0.0 {
                    let row_k = &done[k * p..k * p + k + 1];
                    for (r, xk) in row_i[..=k].iter_mut().zip(row_k) {
                        *r -= lik * xk;
                    }
                }
            }
            let inv = 1.0 / self.lower[i * p + i];
            for r in row_i[..=i].iter_mut() {
                *r *= inv;
            }
        }
        // B = X^T X accumulated as a sum of outer products of the rows of X.
        let mut b = SymmetricMatrix::zeros(p);
        {
            let data = b.data_mut();
            for k in 0..p {
                let row_k = &x[k * p..k * p + k + 1];
                for i in 0..=k {
                    let xi = row_k[i];
                    if xi == 0.0 {
                        continue;
                    }
                    let out = &mut data[i * p + i..i * p + k + 1];
                    for (o, xj) in out.iter_mut().zip(&row_k[i..]) {
                        *o += xi * xj;
                    }
                }
            }
            for i in 0..p {
                for j in 0..i {
                    data[i * p + j] = data[j * p + i];
                }
            }
        }
        b
    }
}

/// Cholesky factorization. Pivots at or below `p * 1e-14 * max_diag` are
/// rejected as not positive definite.
pub fn cholesky(a: &SymmetricMatrix) -> Result<CholeskyFactor> {
    let p = a.dim();
    let max_diag = (0..p).map(|i| a.get(i, i)).fold(0.0_f64, f64::max);
    let threshold = (p as f64) * 1e-14 * max_diag;
    let mut lower = vec![0.0; p * p];
    for j in 0..p {
        let row_j = &lower[j * p..j * p + j];
        let d = a.get(j, j) - row_j.iter().map(|v| v * v).sum::<f64>();
        if !(d > threshold) || max_diag <= 0.0 {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let ljj = d.sqrt();
        lower[j * p + j] = ljj;
        for i in j + 1..p {
            let (head, tail) = lower.split_at(i * p);
            let row_j = &head[j * p..j * p + j];
            let row_i = &tail[..j];
            let s: f64 = row_i.iter().zip(row_j).map(|(x, y)| x * y).sum();
            lower[i * p + j] = (a.get(i, j) - s) / ljj;
        }
    }
    Ok(CholeskyFactor { dim: p, lower })
}

pub fn log_det(f: &CholeskyFactor) -> f64 {
    f.log_det()
}

pub fn inverse_spd(a: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    Ok(cholesky(a)?.inverse())
}

/// `det(Theta + Delta) / det(Theta)` for `Delta = t (e_i e_j^T + e_j e_i^T)`,
/// given `W = Theta^{-1}`.
#[inline]
pub fn det_ratio(w: &SymmetricMatrix, i: usize, j: usize, t: f64) -> f64 {
    if i == j {
        1.0 + 2.0 * w.get(i, i) * t
    } else {
        let wij = w.get(i, j);
        1.0 + 2.0 * wij * t + (wij * wij - w.get(i, i) * w.get(j, j)) * t * t
    }
}

/// Returns `(Theta + t (e_i e_j^T + e_j e_i^T))^{-1}` from `W = Theta^{-1}`.
pub fn rank_two_update_inverse(
    w: &SymmetricMatrix,
    i: usize,
    j: usize,
    t: f64,
) -> Result<SymmetricMatrix> {
    let mut out = w.clone();
    rank_two_update_in_place(&mut out, i, j, t)?;
    Ok(out)
}

/// In-place variant of [`rank_two_update_inverse`]; returns the determinant
/// ratio of the update.
///
/// Uses the 2x2 block Woodbury identity, which for `i != j` reads
/// `W' = W + (t^2 W_jj a a^T - (t^2 W_ij + t)(a b^T + b a^T) + t^2 W_ii b b^T) / D`
/// with `a = W e_i`, `b = W e_j` and `D` the determinant ratio.
pub fn rank_two_update_in_place(
    w: &mut SymmetricMatrix,
    i: usize,
    j: usize,
    t: f64,
) -> Result<f64> {
    let ratio = det_ratio(w, i, j, t);
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::SingularUpdate { ratio });
    }
    if t == 0.0 {
        return Ok(ratio);
    }
    let p = w.dim();
    let a = w.row(i).to_vec();
    if i == j {
        let coef = -2.0 * t / ratio;
        let data = w.data_mut();
        for r in 0..p {
            let ca = coef * a[r];
            if ca != 0.0 {
                for (x, ak) in data[r * p + r..(r + 1) * p].iter_mut().zip(&a[r..]) {
                    *x += ca * ak;
                }
            }
        }
        mirror_upper(data, p);
        return Ok(ratio);
    }
    let b = w.row(j).to_vec();
    let (wii, wjj, wij) = (a[i], b[j], a[j]);
    let alpha = t * t * wjj / ratio;
    let beta = -(t * t * wij + t) / ratio;
    let gamma = t * t * wii / ratio;
    let data = w.data_mut();
    for r in 0..p {
        let ca = alpha * a[r] + beta * b[r];
        let cb = beta * a[r] + gamma * b[r];
        let row = &mut data[r * p + r..(r + 1) * p];
        for ((x, ak), bk) in row.iter_mut().zip(&a[r..]).zip(&b[r..]) {
            *x += ca * ak + cb * bk;
        }
    }
    mirror_upper(data, p);
    Ok(ratio)
}

/// Copies the upper triangle onto the lower one.
fn mirror_upper(data: &mut [f64], p: usize) {
    for r in 1..p {
        for c in 0..r {
            data[r * p + c] = data[c * p + r];
        }
    }
}

/// Maintains a positive definite `Theta` together with `W = Theta^{-1}` and
/// `log det Theta` under symmetric coordinate updates, recomputing `W` from
/// scratch every `refresh_every` updates.
#[derive(Clone, Debug)]
pub struct InverseTracker {
    theta: SymmetricMatrix,
    w: SymmetricMatrix,
    log_det: f64,
    since_refresh: usize,
    refresh_every: usize,
}

impl InverseTracker {
    pub fn new(theta: SymmetricMatrix, refresh_every: usize) -> Result<Self> {
        let factor = cholesky(&theta)?;
        Ok(Self {
            w: factor.inverse(),
            log_det: factor.log_det(),
            theta,
            since_refresh: 0,
            refresh_every: refresh_every.max(1),
        })
    }

    pub fn theta(&self) -> &SymmetricMatrix {
        &self.theta
    }

    pub fn w(&self) -> &SymmetricMatrix {
        &self.w
    }

    /// `log det Theta`, tracked through determinant ratios between refreshes.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Applies `Theta <- Theta + t (e_i e_j^T + e_j e_i^T)` and returns the
    /// determinant ratio.
    pub fn apply(&mut self, i: usize, j: usize, t: f64) -> Result<f64> {
        let ratio = rank_two_update_in_place(&mut self.w, i, j, t)?;
        let delta = if i == j { 2.0 * t } else { t };
        self.theta.add_to(i, j, delta);
        self.log_det += ratio.ln();
        self.since_refresh += 1;
        if self.since_refresh >= self.refresh_every {
            self.refresh()?;
        }
        Ok(ratio)
    }

    /// Applies `Theta <- alpha Theta` for `alpha > 0`.
    pub fn scale(&mut self, alpha: f64) {
        debug_assert!(alpha > 0.0 && alpha.is_finite());
        for x in self.theta.data_mut() {
            *x *= alpha;
        }
        let inv = 1.0 / alpha;
        for x in self.w.data_mut() {
            *x *= inv;
        }
        self.log_det += self.theta.dim() as f64 * alpha.ln();
    }

    /// Recomputes `W` and `log det Theta` by a fresh factorization.
    pub fn refresh(&mut self) -> Result<()> {
        let factor = cholesky(&self.theta)?;
        self.w = factor.inverse();
        self.log_det = factor.log_det();
        self.since_refresh = 0;
        Ok(())
    }

    pub fn into_parts(self) -> (SymmetricMatrix, SymmetricMatrix) {
        (self.theta, self.w)
    }
}
