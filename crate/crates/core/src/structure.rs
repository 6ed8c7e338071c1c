//! Structural side constraints on supports and sound pruning of partial
//! assignments. Degrees are graph degrees `d_i = #{j != i : Z_ij = 1}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::support::{PairTable, Support};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StructuralConstraint {
    KnownZero {
        pairs: Vec<(usize, usize)>,
    },
    KnownOne {
        pairs: Vec<(usize, usize)>,
    },
    DegreeBounds {
        lower: Vec<usize>,
        upper: Vec<usize>,
    },
    AverageDegree {
        target: f64,
        slack: f64,
    },
    /// At most `max_hubs` nodes may have degree above `d_low`; none above `d_high`.
    Hubs {
        d_low: usize,
        d_high: usize,
        max_hubs: usize,
    },
}

/// State of one pair variable inside the branch-and-bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fix {
    Free,
    One,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feasibility {
    Feasible,
    Infeasible,
}

/// Pair-count interval implied by an average-degree constraint.
fn count_range(p: usize, target: f64, slack: f64) -> (usize, usize) {
    let lo = (p as f64 * (target - slack) / 2.0 - 1e-9).ceil().max(0.0) as usize;
    let hi = (p as f64 * (target + slack) / 2.0 + 1e-9).floor().max(0.0) as usize;
    (lo, hi)
}

/// Checks index ranges and internal consistency of a constraint list.
pub fn validate(p: usize, cs: &[StructuralConstraint]) -> Result<()> {
    let check_pairs = |pairs: &[(usize, usize)]| -> Result<()> {
        for &(i, j) in pairs {
            if i == j || i >= p || j >= p {
                return Err(Error::invalid(format!(
                    "constraint pair ({i}, {j}) is invalid for p = {p}"
                )));
            }
        }
        Ok(())
    };
    let mut zeros = Vec::new();
    let mut ones = Vec::new();
    for c in cs {
        match c {
            StructuralConstraint::KnownZero { pairs } => {
                check_pairs(pairs)?;
                zeros.extend(pairs.iter().map(|&(i, j)| (i.min(j), i.max(j))));
            }
            StructuralConstraint::KnownOne { pairs } => {
                check_pairs(pairs)?;
                ones.extend(pairs.iter().map(|&(i, j)| (i.min(j), i.max(j))));
            }
            StructuralConstraint::DegreeBounds { lower, upper } => {
                if lower.len() != p || upper.len() != p {
                    return Err(Error::invalid(format!(
                        "degree bounds must have length {p}"
                    )));
                }
                for i in 0..p {
                    if lower[i] > upper[i] || upper[i] > p.saturating_sub(1) {
                        return Err(Error::invalid(format!(
                            "degree bounds for node {i} must satisfy lower <= upper <= p - 1"
                        )));
                    }
                }
            }
            StructuralConstraint::AverageDegree { target, slack } => {
                if !(target.is_finite() && *slack >= 0.0 && slack.is_finite()) {
                    return Err(Error::invalid(
                        "average degree needs finite target and nonnegative slack",
                    ));
                }
            }
            StructuralConstraint::Hubs { d_low, d_high, .. } => {
                if d_low > d_high || *d_high > p.saturating_sub(1) {
                    return Err(Error::invalid(
                        "hub degrees must satisfy d_low <= d_high <= p - 1",
                    ));
                }
            }
        }
    }
    zeros.sort_unstable();
    if ones.iter().any(|x| zeros.binary_search(x).is_ok()) {
        return Err(Error::invalid("a pair is both known zero and known one"));
    }
    Ok(())
}

/// Whether a complete support satisfies every constraint.
pub fn check_complete(z: &Support, cs: &[StructuralConstraint]) -> bool {
    let p = z.dim();
    let deg = z.degrees();
    cs.iter().all(|c| match c {
        StructuralConstraint::KnownZero { pairs } => pairs.iter().all(|&(i, j)| !z.contains(i, j)),
        StructuralConstraint::KnownOne { pairs } => pairs.iter().all(|&(i, j)| z.contains(i, j)),
        StructuralConstraint::DegreeBounds { lower, upper } => {
            (0..p).all(|i| lower[i] <= deg[i] && deg[i] <= upper[i])
        }
        StructuralConstraint::AverageDegree { target, slack } => {
            let (lo, hi) = count_range(p, *target, *slack);
            lo <= z.len() && z.len() <= hi
        }
        StructuralConstraint::Hubs {
            d_low,
            d_high,
            max_hubs,
        } => {
            deg.iter().all(|&d| d <= *d_high)
                && deg.iter().filter(|&&d| d > *d_low).count() <= *max_hubs
        }
    })
}

/// Nodes whose degree violates a degree or hub constraint in `z`.
pub fn violating_nodes(z: &Support, cs: &[StructuralConstraint]) -> Vec<usize> {
    let deg = z.degrees();
    let mut bad = vec![false; z.dim()];
    for c in cs {
        match c {
            StructuralConstraint::DegreeBounds { lower, upper } => {
                for (i, &d) in deg.iter().enumerate() {
                    bad[i] |= d < lower[i] || d > upper[i];
                }
            }
            StructuralConstraint::Hubs {
                d_low,
                d_high,
                max_hubs,
            } => {
                let hubs = deg.iter().filter(|&&d| d > *d_low).count();
                for (i, &d) in deg.iter().enumerate() {
                    bad[i] |= d > *d_high || (hubs > *max_hubs && d > *d_low);
                }
            }
            _ => {}
        }
    }
    (0..z.dim()).filter(|&i| bad[i]).collect()
}

/// Sound (not tight) infeasibility test for a partial assignment: returns
/// `Infeasible` only if no completion adding at most `budget_left` free pairs
/// satisfies the constraints.
pub fn prune_partial(
    table: &PairTable,
    fix: &[Fix],
    budget_left: usize,
    cs: &[StructuralConstraint],
) -> Feasibility {
    if cs.is_empty() {
        return Feasibility::Feasible;
    }
    let p = table.dim();
    let mut deg_one = vec![0usize; p];
    let mut free_inc = vec![0usize; p];
    let (mut n_one, mut n_free) = (0, 0);
    for (idx, f) in fix.iter().enumerate() {
        let (i, j) = table.pair(idx);
        match f {
            Fix::One => {
                deg_one[i] += 1;
                deg_one[j] += 1;
                n_one += 1;
            }
            Fix::Free => {
                free_inc[i] += 1;
                free_inc[j] += 1;
                n_free += 1;
            }
            Fix::Zero => {}
        }
    }
    let reach = budget_left.min(n_free);
    let mut needed = 0usize;
    for c in cs {
        match c {
            StructuralConstraint::KnownZero { pairs } => {
                if pairs
                    .iter()
                    .any(|&(i, j)| fix[table.index(i, j)] == Fix::One)
                {
                    return Feasibility::Infeasible;
                }
            }
            StructuralConstraint::KnownOne { pairs } => {
                let mut missing = 0;
                for &(i, j) in pairs {
                    match fix[table.index(i, j)] {
                        Fix::Zero => return Feasibility::Infeasible,
                        Fix::Free => missing += 1,
                        Fix::One => {}
                    }
                }
                needed = needed.max(missing);
            }
            StructuralConstraint::DegreeBounds { lower, upper } => {
                let mut deficit = 0;
                for i in 0..p {
                    if deg_one[i] > upper[i] || deg_one[i] + free_inc[i].min(reach) < lower[i] {
                        return Feasibility::Infeasible;
                    }
                    deficit += lower[i].saturating_sub(deg_one[i]);
                }
                needed = needed.max(deficit.div_ceil(2));
            }
            StructuralConstraint::AverageDegree { target, slack } => {
                let (lo, hi) = count_range(p, *target, *slack);
                if n_one > hi || n_one + reach < lo {
                    return Feasibility::Infeasible;
                }
                needed = needed.max(lo.saturating_sub(n_one));
            }
            StructuralConstraint::Hubs {
                d_low,
                d_high,
                max_hubs,
            } => {
                if deg_one.iter().any(|d| d > d_high)
                    || deg_one.iter().filter(|&d| d > d_low).count() > *max_hubs
                {
                    return Feasibility::Infeasible;
                }
            }
        }
    }
    if needed > reach {
        Feasibility::Infeasible
    } else {
        Feasibility::Feasible
    }
}

/// Constraint file layout: every field optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    #[serde(default)]
    pub known_zero: Vec<(usize, usize)>,
    #[serde(default)]
    pub known_one: Vec<(usize, usize)>,
    pub degree_lower: Option<Vec<usize>>,
    pub degree_upper: Option<Vec<usize>>,
    pub average_degree: Option<AverageDegreeSpec>,
    pub hubs: Option<HubSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageDegreeSpec {
    pub target: f64,
    pub slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HubSpec {
    pub d_low: usize,
    pub d_high: usize,
    pub max_hubs: usize,
}

impl StructureSpec {
    /// Converts to a validated constraint list for dimension `p`.
    pub fn into_constraints(self, p: usize) -> Result<Vec<StructuralConstraint>> {
        let mut cs = Vec::new();
        if !self.known_zero.is_empty() {
            cs.push(StructuralConstraint::KnownZero {
                pairs: self.known_zero,
            });
        }
        if !self.known_one.is_empty() {
            cs.push(StructuralConstraint::KnownOne {
                pairs: self.known_one,
            });
        }
        if self.degree_lower.is_some() || self.degree_upper.is_some() {
            let top = p.saturating_sub(1);
            cs.push(StructuralConstraint::DegreeBounds {
                lower: self.degree_lower.unwrap_or_else(|| vec![0; p]),
                upper: self.degree_upper.unwrap_or_else(|| vec![top; p]),
            });
        }
        if let Some(a) = self.average_degree {
            cs.push(StructuralConstraint::AverageDegree {
                target: a.target,
                slack: a.slack,
            });
        }
        if let Some(h) = self.hubs {
            cs.push(StructuralConstraint::Hubs {
                d_low: h.d_low,
                d_high: h.d_high,
                max_hubs: h.max_hubs,
            });
        }
        validate(p, &cs)?;
        Ok(cs)
    }
}
