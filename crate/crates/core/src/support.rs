use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of strictly-upper-triangular pairs of a `p x p` matrix.
#[inline]
pub fn pair_count(p: usize) -> usize {
    p * p.saturating_sub(1) / 2
}

/// Row-major index of the pair `(i, j)`, `i < j`, among all upper pairs.
#[inline]
pub fn pair_index(p: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < p);
    i * (2 * p - i - 1) / 2 + (j - i - 1)
}

/// Lookup table from pair index back to `(i, j)`.
#[derive(Clone, Debug)]
pub struct PairTable {
    dim: usize,
    pairs: Vec<(u32, u32)>,
}

impl PairTable {
    pub fn new(p: usize) -> Self {
        let mut pairs = Vec::with_capacity(pair_count(p));
        for i in 0..p {
            for j in i + 1..p {
                pairs.push((i as u32, j as u32));
            }
        }
        Self { dim: p, pairs }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    #[inline]
    pub fn pair(&self, idx: usize) -> (usize, usize) {
        let (i, j) = self.pairs[idx];
        (i as usize, j as usize)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        pair_index(self.dim, i.min(j), i.max(j))
    }
}

/// Symmetric binary support: a set of upper-triangular pairs `(i, j)`,
/// `i < j`, with an implicit unit diagonal. Pairs are kept sorted.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Support {
    dim: usize,
    pairs: Vec<(usize, usize)>,
}

impl Support {
    /// Builds a support from pairs given in either orientation.
    pub fn new(dim: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut out = Vec::new();
        for (a, b) in pairs {
            if a == b {
                return Err(Error::invalid(format!(
                    "pair ({a}, {b}) is on the diagonal"
                )));
            }
            if a.max(b) >= dim {
                return Err(Error::invalid(format!(
                    "pair ({a}, {b}) out of range for dimension {dim}"
                )));
            }
            out.push((a.min(b), a.max(b)));
        }
        out.sort_unstable();
        out.dedup();
        Ok(Self { dim, pairs: out })
    }

    /// Diagonal-only support.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            pairs: Vec::new(),
        }
    }

    pub fn full(dim: usize) -> Self {
        let table = PairTable::new(dim);
        Self {
            dim,
            pairs: (0..table.len()).map(|idx| table.pair(idx)).collect(),
        }
    }

    /// Builds a support from pair indices (see [`pair_index`]).
    pub fn from_indices(table: &PairTable, idx: impl IntoIterator<Item = usize>) -> Self {
        let mut pairs: Vec<_> = idx.into_iter().map(|k| table.pair(k)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        Self {
            dim: table.dim(),
            pairs,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of off-diagonal pairs.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        if i == j {
            return true;
        }
        self.pairs.binary_search(&(i.min(j), i.max(j))).is_ok()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.pairs
            .iter()
            .map(|&(i, j)| pair_index(self.dim, i, j))
            .collect()
    }

    /// Graph degree of every node.
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.dim];
        for &(i, j) in &self.pairs {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    pub fn check_budget(&self, k: usize) -> Result<()> {
        if self.len() > k {
            return Err(Error::invalid(format!(
                "support has {} pairs, budget is {k}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn intersection_len(&self, other: &Support) -> usize {
        self.pairs
            .iter()
            .filter(|&&(i, j)| other.contains(i, j))
            .count()
    }
}

impl fmt::Display for Support {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (n, (i, j)) in self.pairs.iter().enumerate() {
            if n > 0 {
                write!(f, ", ")?;
            }
            write!(f, "({i},{j})")?;
        }
        write!(f, "}}")
    }
}

/// Reads the off-diagonal support of a matrix, treating `|x| <= 1e-10` as zero.
pub fn support_of(m: &crate::linalg::SymmetricMatrix) -> Support {
    let p = m.dim();
    let mut pairs = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            if m.get(i, j).abs() > crate::ZERO_THRESHOLD {
                pairs.push((i, j));
            }
        }
    }
    Support { dim: p, pairs }
}
