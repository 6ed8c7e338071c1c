//! Outer-approximation solver over supports.
//!
//! A single best-first branch-and-bound runs over the pair variables. Node
//! bounds come from the accumulated cuts; whenever a node's greedy candidate
//! has not been evaluated yet, the covariance-selection subproblem is solved,
//! its dual certificate becomes a new cut for every open node, and the node
//! is revisited.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::covsel::{solve_covsel_with, CovSelOptions, CovSelSolution, Regularizer};
use crate::error::{Error, Result};
use crate::linalg::SymmetricMatrix;
use crate::model;
use crate::structure::{
    self, check_complete, prune_partial, Feasibility, Fix, StructuralConstraint,
};
use crate::support::{PairTable, Support};

/// Affine lower bound `h(Z) >= c0 - sum_{(i,j) in Z, i<j} w_ij`.
#[derive(Clone, Debug)]
pub struct Cut {
    pub c0: f64,
    weights: Vec<f64>,
    /// Pair indices by decreasing weight, ties by increasing index.
    order: Vec<u32>,
    pub source: Support,
}

impl Cut {
    /// Builds a cut from per-pair weights (indexed as in [`PairTable`]).
    pub fn new(c0: f64, weights: Vec<f64>, source: Support) -> Self {
        debug_assert!(weights.iter().all(|w| *w >= 0.0));
        let mut order: Vec<u32> = (0..weights.len() as u32).collect();
        order.sort_by(|&a, &b| {
            weights[b as usize]
                .total_cmp(&weights[a as usize])
                .then(a.cmp(&b))
        });
        Self {
            c0,
            weights,
            order,
            source,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn value_at(&self, z: &Support) -> f64 {
        self.c0
            - z.indices()
                .into_iter()
                .map(|idx| self.weights[idx])
                .sum::<f64>()
    }

    fn value_at_indices(&self, idx: &[u32]) -> f64 {
        self.c0 - idx.iter().map(|&i| self.weights[i as usize]).sum::<f64>()
    }

    /// Minimum of the cut over completions of a partial assignment: the `r`
    /// heaviest free pairs are switched on.
    fn node_min(&self, fix: &[Fix], ones: &[u32], r: usize) -> f64 {
        let fixed: f64 = ones.iter().map(|&i| self.weights[i as usize]).sum();
        let mut top = 0.0;
        let mut taken = 0;
        if r > 0 {
            for &idx in &self.order {
                if fix[idx as usize] == Fix::Free {
                    top += self.weights[idx as usize];
                    taken += 1;
                    if taken == r {
                        break;
                    }
                }
            }
        }
        self.c0 - fixed - top
    }

    /// The `r` heaviest free pairs.
    fn greedy_free(&self, fix: &[Fix], r: usize) -> Vec<u32> {
        self.order
            .iter()
            .copied()
            .filter(|&idx| fix[idx as usize] == Fix::Free)
            .take(r)
            .collect()
    }
}

/// Cut from a covariance-selection solution of support `z`:
/// `c0 = p + log det(S + R) - sum_i Omega*_ii(R_ii)` and `w_ij = 2 Omega*_ij(R_ij)`.
pub fn make_cut(
    sigma: &SymmetricMatrix,
    sol: &CovSelSolution,
    z: &Support,
    reg: &Regularizer,
) -> Cut {
    let p = sigma.dim();
    let r = &sol.dual_point;
    let mut c0 = p as f64 + sol.dual_log_det;
    for i in 0..p {
        c0 -= reg.conjugate(i, i, r.get(i, i));
    }
    let mut weights = Vec::with_capacity(p * p.saturating_sub(1) / 2);
    for i in 0..p {
        for j in i + 1..p {
            weights.push(2.0 * reg.conjugate(i, j, r.get(i, j)));
        }
    }
    Cut::new(c0, weights, z.clone())
}

/// Cut pool plus the problem shape the master works on.
#[derive(Clone, Debug)]
pub struct MasterState {
    pub p: usize,
    pub k: usize,
    pub table: PairTable,
    pub cuts: Vec<Cut>,
    pub structural: Vec<StructuralConstraint>,
}

impl MasterState {
    pub fn new(p: usize, k: usize, structural: Vec<StructuralConstraint>) -> Result<Self> {
        structure::validate(p, &structural)?;
        Ok(Self {
            p,
            k,
            table: PairTable::new(p),
            cuts: Vec::new(),
            structural,
        })
    }

    /// `max_c c(Z)` over the pool.
    pub fn master_value(&self, z: &Support) -> f64 {
        let idx: Vec<u32> = z.indices().into_iter().map(|i| i as u32).collect();
        self.value_at_indices(&idx)
    }

    fn value_at_indices(&self, idx: &[u32]) -> f64 {
        self.cuts
            .iter()
            .map(|c| c.value_at_indices(idx))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn root_fix(&self) -> (Vec<u32>, Vec<u32>) {
        let mut ones = Vec::new();
        let mut zeros = Vec::new();
        for c in &self.structural {
            match c {
                StructuralConstraint::KnownOne { pairs } => {
                    ones.extend(pairs.iter().map(|&(i, j)| self.table.index(i, j) as u32))
                }
                StructuralConstraint::KnownZero { pairs } => {
                    zeros.extend(pairs.iter().map(|&(i, j)| self.table.index(i, j) as u32))
                }
                _ => {}
            }
        }
        for v in [&mut ones, &mut zeros] {
            v.sort_unstable();
            v.dedup();
        }
        (ones, zeros)
    }

    fn fix_vector(&self, ones: &[u32], zeros: &[u32]) -> Vec<Fix> {
        let mut fix = vec![Fix::Free; self.table.len()];
        for &i in ones {
            fix[i as usize] = Fix::One;
        }
        for &i in zeros {
            fix[i as usize] = Fix::Zero;
        }
        fix
    }

    /// Max over cuts of the cut's minimum over completions, or `None` when
    /// the structural test proves the node empty.
    fn evaluate_node(&self, fix: &[Fix], ones: &[u32]) -> Option<NodeEval> {
        if ones.len() > self.k {
            return None;
        }
        let r = self.k - ones.len();
        if prune_partial(&self.table, fix, r, &self.structural) == Feasibility::Infeasible {
            return None;
        }
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (c, cut) in self.cuts.iter().enumerate() {
            let v = cut.node_min(fix, ones, r);
            if v > best.0 || best.1 == usize::MAX {
                best = (v, c);
            }
        }
        let (bound, argmax) = best;
        let mut cand = ones.to_vec();
        if argmax != usize::MAX {
            cand.extend(self.cuts[argmax].greedy_free(fix, r));
        } else {
            cand.extend(
                (0..fix.len() as u32)
                    .filter(|&i| fix[i as usize] == Fix::Free)
                    .take(r),
            );
        }
        cand.sort_unstable();
        Some(NodeEval {
            bound,
            argmax,
            cand,
        })
    }

    fn support_of(&self, idx: &[u32]) -> Support {
        Support::from_indices(&self.table, idx.iter().map(|&i| i as usize))
    }
}

struct NodeEval {
    bound: f64,
    argmax: usize,
    cand: Vec<u32>,
}

/// Lower bound over all completions of a partial assignment (pairs given as
/// `(i, j)`), valid for every cut in the pool.
pub fn node_bound(
    state: &MasterState,
    fixed_one: &[(usize, usize)],
    fixed_zero: &[(usize, usize)],
) -> Result<f64> {
    let to_idx = |v: &[(usize, usize)]| -> Vec<u32> {
        let mut out: Vec<u32> = v
            .iter()
            .map(|&(i, j)| state.table.index(i, j) as u32)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    };
    let (mut ones, mut zeros) = state.root_fix();
    ones.extend(to_idx(fixed_one));
    zeros.extend(to_idx(fixed_zero));
    ones.sort_unstable();
    ones.dedup();
    if ones.iter().any(|i| zeros.contains(i)) {
        return Err(Error::invalid("fixed pair sets overlap"));
    }
    let fix = state.fix_vector(&ones, &zeros);
    state
        .evaluate_node(&fix, &ones)
        .map(|e| e.bound)
        .ok_or(Error::Infeasible)
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Node {
    bound: OrdF64,
    id: u64,
    depth: u32,
    ones: Vec<u32>,
    zeros: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap: smallest bound first, then oldest node.
        other
            .bound
            .0
            .total_cmp(&self.bound.0)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Events reported through the optional trace callback.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    NodeOpened {
        node: u64,
        depth: u32,
        bound: f64,
    },
    CutAdded {
        cut: usize,
        support_size: usize,
        value: f64,
        dual: f64,
    },
    IncumbentUpdated {
        value: f64,
        support: Vec<(usize, usize)>,
    },
    LowerBound {
        value: f64,
    },
}

pub type TraceFn<'a> = &'a mut dyn FnMut(&TraceEvent);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    TimeLimit,
    NodeLimit,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings {
    pub total_s: f64,
    pub master_s: f64,
    pub subproblem_s: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveResult {
    pub k: usize,
    pub support: Support,
    pub theta: SymmetricMatrix,
    pub upper: f64,
    pub lower: f64,
    pub relative_gap: f64,
    /// Cuts in the pool when the solve ended.
    pub cuts: usize,
    /// Cuts added by this solve.
    pub cuts_added: usize,
    pub nodes_explored: usize,
    pub status: SolveStatus,
    pub times: Timings,
}

#[derive(Clone, Debug, PartialEq)]
pub enum WarmStart {
    /// Node-wise lasso support from [`model::warm_start`].
    NeighborhoodSelection,
    None,
    Support(Support),
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Relative optimality tolerance.
    pub eps: f64,
    pub time_limit: Option<Duration>,
    pub node_limit: Option<usize>,
    pub warm: WarmStart,
    /// Re-solve the master from scratch after every cut instead of adding
    /// cuts lazily inside one tree.
    pub multi_tree: bool,
    /// Subproblem gap tolerance relative to the objective scale; defaults to `eps / 10`.
    pub covsel_gap: Option<f64>,
    pub covsel_max_iter: usize,
    /// Run a swap local search around each new incumbent.
    pub local_search: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            time_limit: Some(Duration::from_secs(300)),
            node_limit: None,
            warm: WarmStart::NeighborhoodSelection,
            multi_tree: false,
            covsel_gap: None,
            covsel_max_iter: 1_000_000,
            local_search: true,
        }
    }
}

#[derive(Clone, Debug)]
struct Evaluation {
    seq: usize,
    cut: usize,
    value: f64,
    dual: f64,
    diag: Vec<f64>,
    entries: Vec<f64>,
}

/// A covariance/regularizer pair with its cut pool and evaluated supports,
/// reusable across budgets.
pub struct Session<'a> {
    sigma: &'a SymmetricMatrix,
    reg: &'a Regularizer,
    master: MasterState,
    evaluated: BTreeMap<Vec<u32>, Evaluation>,
    value_scale: f64,
}

struct Limits {
    start: Instant,
    time_limit: Option<Duration>,
    node_limit: Option<usize>,
}

impl Limits {
    fn hit(&self, nodes: usize) -> Option<SolveStatus> {
        if self.time_limit.is_some_and(|t| self.start.elapsed() >= t) {
            return Some(SolveStatus::TimeLimit);
        }
        if self.node_limit.is_some_and(|n| nodes >= n) {
            return Some(SolveStatus::NodeLimit);
        }
        None
    }
}

struct SearchOutcome {
    incumbent: Option<(Vec<u32>, f64)>,
    lower: f64,
    nodes: usize,
    status: SolveStatus,
}

/// How a structurally feasible candidate is valued inside the search.
enum Valuation<'s, 'a> {
    /// Pure master: the value is the max over cuts.
    Master,
    /// Lazy cuts: candidates are evaluated exactly and yield new cuts.
    Lazy(&'s mut Evaluator<'a>),
}

struct Evaluator<'a> {
    sigma: &'a SymmetricMatrix,
    reg: &'a Regularizer,
    evaluated: &'a mut BTreeMap<Vec<u32>, Evaluation>,
    covsel: CovSelOptions,
    subproblem_time: Duration,
    added: usize,
    local_search: bool,
}

impl Evaluator<'_> {
    /// Swap neighborhood around an evaluated support: add pairs with the
    /// heaviest cut weight, drop pairs with the weakest partial correlation,
    /// first improvement wins. Returns the best support found if it beats `start`.
    fn improve(
        &mut self,
        master: &mut MasterState,
        start: &[u32],
        limits: &Limits,
        trace: &mut Option<TraceFn<'_>>,
    ) -> Result<Option<(Vec<u32>, f64)>> {
        const WIDTH: usize = 5;
        const ROUNDS: usize = 100;
        if !self.local_search {
            return Ok(None);
        }
        let Some(e) = self.evaluated.get(start) else {
            return Ok(None);
        };
        let mut cur = start.to_vec();
        let mut val = e.value;
        let mut improved = false;
        'rounds: for _ in 0..ROUNDS {
            let e = &self.evaluated[&cur];
            let cut = &master.cuts[e.cut];
            let adds: Vec<u32> = cut
                .order
                .iter()
                .copied()
                .filter(|i| cut.weights[*i as usize] > 0.0 && cur.binary_search(i).is_err())
                .take(WIDTH)
                .collect();
            let mut drops: Vec<(f64, u32)> = cur
                .iter()
                .zip(&e.entries)
                .map(|(&idx, &v)| {
                    let (i, j) = master.table.pair(idx as usize);
                    (v.abs() / (e.diag[i] * e.diag[j]).sqrt(), idx)
                })
                .collect();
            drops.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            drops.truncate(WIDTH);

            let mut moves: Vec<Vec<u32>> = Vec::new();
            if cur.len() < master.k {
                moves.extend(adds.iter().map(|&a| {
                    let mut c = cur.clone();
                    c.push(a);
                    c
                }));
            }
            for &a in &adds {
                for &(_, d) in &drops {
                    let mut c: Vec<u32> = cur.iter().copied().filter(|&x| x != d).collect();
                    c.push(a);
                    moves.push(c);
                }
            }
            for mut c in moves {
                if limits.hit(0).is_some() {
                    break 'rounds;
                }
                c.sort_unstable();
                if self.evaluated.contains_key(&c)
                    || !check_complete(&master.support_of(&c), &master.structural)
                {
                    continue;
                }
                let v = self.evaluate(master, &c, trace)?;
                if v < val - 1e-12 * val.abs().max(1.0) {
                    cur = c;
                    val = v;
                    improved = true;
                    continue 'rounds;
                }
            }
            break;
        }
        Ok(improved.then_some((cur, val)))
    }

    fn evaluate(
        &mut self,
        master: &mut MasterState,
        idx: &[u32],
        trace: &mut Option<TraceFn<'_>>,
    ) -> Result<f64> {
        if let Some(e) = self.evaluated.get(idx) {
            return Ok(e.value);
        }
        let z = master.support_of(idx);
        let t0 = Instant::now();
        let sol = match solve_covsel_with(self.sigma, &z, self.reg, &self.covsel) {
            Ok(s) => s,
            Err(Error::Unconverged(s)) => *s,
            Err(e) => return Err(e),
        };
        self.subproblem_time += t0.elapsed();
        let cut = make_cut(self.sigma, &sol, &z, self.reg);
        master.cuts.push(cut);
        self.added += 1;
        if let Some(f) = trace.as_mut() {
            f(&TraceEvent::CutAdded {
                cut: master.cuts.len() - 1,
                support_size: z.len(),
                value: sol.primal_value,
                dual: sol.dual_value,
            });
        }
        let seq = self.evaluated.len();
        self.evaluated.insert(
            idx.to_vec(),
            Evaluation {
                seq,
                cut: master.cuts.len() - 1,
                value: sol.primal_value,
                dual: sol.dual_value,
                diag: sol.theta.diagonal(),
                entries: z
                    .pairs()
                    .iter()
                    .map(|&(i, j)| sol.theta.get(i, j))
                    .collect(),
            },
        );
        Ok(sol.primal_value)
    }
}

fn eps_abs(eps: f64, incumbent: f64) -> f64 {
    if incumbent.is_finite() {
        eps * incumbent.abs().max(1.0)
    } else {
        0.0
    }
}

/// Best-first branch-and-bound over the pair variables.
fn search(
    master: &mut MasterState,
    mut valuation: Valuation<'_, '_>,
    start_incumbent: Option<(Vec<u32>, f64)>,
    eps: f64,
    limits: &Limits,
    trace: &mut Option<TraceFn<'_>>,
) -> Result<SearchOutcome> {
    let mut incumbent = start_incumbent;
    let inc_value = |inc: &Option<(Vec<u32>, f64)>| inc.as_ref().map_or(f64::INFINITY, |x| x.1);
    // The incumbent's primal is only an upper bound on its h; cap the lower
    // bound with its certified dual instead.
    let inc_floor = |inc: &Option<(Vec<u32>, f64)>, val: &Valuation<'_, '_>| match (inc, val) {
        (None, _) => f64::INFINITY,
        (Some((_, v)), Valuation::Master) => *v,
        (Some((z, v)), Valuation::Lazy(e)) => e.evaluated.get(z).map_or(*v, |x| x.dual.min(*v)),
    };

    let (ones, zeros) = master.root_fix();
    let fix = master.fix_vector(&ones, &zeros);
    let mut heap = BinaryHeap::new();
    let mut next_id = 0u64;
    if let Some(ev) = master.evaluate_node(&fix, &ones) {
        heap.push(Node {
            bound: OrdF64(ev.bound),
            id: 0,
            depth: 0,
            ones,
            zeros,
        });
        next_id = 1;
    }

    let mut pruned_min = f64::INFINITY;
    let mut lower = f64::NEG_INFINITY;
    let mut nodes = 0usize;
    let mut status = SolveStatus::Optimal;
    let mut counts = vec![0u32; master.table.len()];

    loop {
        let inc = inc_value(&incumbent);
        let heap_min = heap.peek().map_or(f64::INFINITY, |n| n.bound.0);
        let lb = heap_min
            .min(pruned_min)
            .min(inc_floor(&incumbent, &valuation));
        if lb > lower {
            lower = lb;
            if let Some(f) = trace.as_mut() {
                f(&TraceEvent::LowerBound { value: lower });
            }
        }
        if heap.is_empty() || lower >= inc - eps_abs(eps, inc) {
            break;
        }
        if let Some(s) = limits.hit(nodes) {
            status = s;
            break;
        }
        let mut node = heap.pop().expect("nonempty heap");
        nodes += 1;
        let tol = eps_abs(eps, inc);
        if node.bound.0 >= inc - tol {
            pruned_min = pruned_min.min(node.bound.0);
            continue;
        }
        let fix = master.fix_vector(&node.ones, &node.zeros);
        let Some(ev) = master.evaluate_node(&fix, &node.ones) else {
            continue;
        };
        if ev.bound > node.bound.0 {
            node.bound = OrdF64(ev.bound);
            heap.push(node);
            continue;
        }
        if let Some(f) = trace.as_mut() {
            f(&TraceEvent::NodeOpened {
                node: node.id,
                depth: node.depth,
                bound: ev.bound,
            });
        }
        if ev.bound >= inc - tol {
            pruned_min = pruned_min.min(ev.bound);
            continue;
        }

        let cand_support = master.support_of(&ev.cand);
        let feasible = check_complete(&cand_support, &master.structural);
        if feasible {
            let (value, fresh) = match &mut valuation {
                Valuation::Master => (master.value_at_indices(&ev.cand), false),
                Valuation::Lazy(evaluator) => {
                    let known = evaluator.evaluated.contains_key(&ev.cand);
                    (evaluator.evaluate(master, &ev.cand, trace)?, !known)
                }
            };
            if value < inc_value(&incumbent) {
                let mut best = (ev.cand.clone(), value);
                if let Valuation::Lazy(evaluator) = &mut valuation {
                    if let Some(better) = evaluator.improve(master, &ev.cand, limits, trace)? {
                        best = better;
                    }
                }
                if let Some(f) = trace.as_mut() {
                    f(&TraceEvent::IncumbentUpdated {
                        value: best.1,
                        support: master.support_of(&best.0).pairs().to_vec(),
                    });
                }
                incumbent = Some(best);
            }
            if fresh {
                heap.push(node);
                continue;
            }
        }

        let r = master.k - node.ones.len();
        let n_free = fix.iter().filter(|f| **f == Fix::Free).count();
        let dominant = master.structural.is_empty() && n_free <= r;
        if r == 0 || n_free == 0 || dominant {
            // The candidate is the best completion of this node.
            if feasible {
                let leaf_bound = match &valuation {
                    Valuation::Master => ev.bound,
                    Valuation::Lazy(e) => ev.bound.max(e.evaluated[&ev.cand].dual),
                };
                pruned_min = pruned_min.min(leaf_bound);
            } else if dominant && r > 0 && n_free > 0 {
                unreachable!("unconstrained candidates are always feasible");
            }
            continue;
        }

        let pair = choose_branch(master, &fix, &ev, &cand_support, feasible, r, &mut counts);
        let depth = node.depth + 1;
        let mut children = Vec::with_capacity(2);
        if node.ones.len() < master.k {
            let mut ones = node.ones.clone();
            ones.push(pair);
            ones.sort_unstable();
            children.push((ones, node.zeros.clone()));
        }
        let mut zeros = node.zeros;
        zeros.push(pair);
        zeros.sort_unstable();
        children.push((node.ones, zeros));
        for (ones, zeros) in children {
            let fix = master.fix_vector(&ones, &zeros);
            if let Some(cev) = master.evaluate_node(&fix, &ones) {
                heap.push(Node {
                    bound: OrdF64(cev.bound.max(ev.bound)),
                    id: next_id,
                    depth,
                    ones,
                    zeros,
                });
                next_id += 1;
            }
        }
    }

    if status == SolveStatus::Optimal {
        lower = lower.max(pruned_min.min(inc_floor(&incumbent, &valuation)));
    }
    Ok(SearchOutcome {
        incumbent,
        lower,
        nodes,
        status,
    })
}

/// Picks the free pair on which the cuts that matter at this node disagree
/// most; see the module docs for the fallbacks.
fn choose_branch(
    master: &MasterState,
    fix: &[Fix],
    ev: &NodeEval,
    cand: &Support,
    feasible: bool,
    r: usize,
    counts: &mut [u32],
) -> u32 {
    if !feasible {
        let bad = structure::violating_nodes(cand, &master.structural);
        if !bad.is_empty() {
            for (idx, f) in fix.iter().enumerate() {
                let (i, j) = master.table.pair(idx);
                if *f == Fix::Free && (bad.contains(&i) || bad.contains(&j)) {
                    return idx as u32;
                }
            }
        }
    }

    let mut active = vec![ev.argmax];
    let slack = 1e-12 * ev.bound.abs().max(1.0);
    for (c, cut) in master.cuts.iter().enumerate() {
        if c != ev.argmax && cut.value_at_indices(&ev.cand) > ev.bound + slack {
            active.push(c);
        }
    }
    let mut touched = Vec::new();
    for &c in &active {
        for idx in master.cuts[c].greedy_free(fix, r) {
            if counts[idx as usize] == 0 {
                touched.push(idx);
            }
            counts[idx as usize] += 1;
        }
    }
    let n = active.len() as u32;
    let mut best: Option<(u32, u32)> = None;
    for &idx in &touched {
        let inc = counts[idx as usize];
        let score = inc.min(n - inc);
        if score > 0 && best.is_none_or(|(s, b)| score > s || (score == s && idx < b)) {
            best = Some((score, idx));
        }
    }
    for &idx in &touched {
        counts[idx as usize] = 0;
    }
    if let Some((_, idx)) = best {
        return idx;
    }
    if let Some(&idx) = master.cuts[ev.argmax].greedy_free(fix, r).first() {
        return idx;
    }
    fix.iter()
        .position(|f| *f == Fix::Free)
        .expect("branching requires a free pair") as u32
}

/// Solves the master problem `min_Z max_c c(Z)` over feasible supports with
/// at most `k` pairs, to absolute tolerance `gap_tol`.
pub fn solve_master(state: &MasterState, gap_tol: f64) -> Result<(Support, f64)> {
    if state.cuts.is_empty() {
        return Err(Error::invalid("the master problem needs at least one cut"));
    }
    let mut master = state.clone();
    let limits = Limits {
        start: Instant::now(),
        time_limit: None,
        node_limit: None,
    };
    let out = search_master(&mut master, gap_tol, &limits, &mut None)?;
    let (idx, eta) = out.incumbent.ok_or(Error::Infeasible)?;
    Ok((master.support_of(&idx), eta))
}

fn search_master(
    master: &mut MasterState,
    gap_tol: f64,
    limits: &Limits,
    trace: &mut Option<TraceFn<'_>>,
) -> Result<SearchOutcome> {
    // An absolute tolerance is folded into the relative one by using a unit scale.
    let scale = master.cuts.iter().map(|c| c.c0.abs()).fold(1.0, f64::max);
    search(
        master,
        Valuation::Master,
        None,
        gap_tol / scale,
        limits,
        trace,
    )
}

impl<'a> Session<'a> {
    pub fn new(
        sigma: &'a SymmetricMatrix,
        reg: &'a Regularizer,
        structural: Vec<StructuralConstraint>,
    ) -> Result<Self> {
        let p = sigma.dim();
        if p == 0 {
            return Err(Error::invalid("empty covariance matrix"));
        }
        for i in 0..p {
            if !(sigma.get(i, i) > 0.0) {
                return Err(Error::invalid(format!(
                    "covariance diagonal entry {i} must be positive"
                )));
            }
        }
        match reg {
            Regularizer::BigM(b) => {
                if b.dim() != p {
                    return Err(Error::invalid("big-M bounds dimension mismatch"));
                }
                for i in 0..p {
                    for j in i + 1..p {
                        let m = b.get(i, j);
                        if !(m > 0.0 && m.is_finite()) {
                            return Err(Error::invalid(format!(
                                "big-M bound for ({i},{j}) must be finite and positive"
                            )));
                        }
                    }
                }
            }
            Regularizer::Ridge { gamma } => {
                if !(*gamma > 0.0 && gamma.is_finite()) {
                    return Err(Error::invalid("ridge gamma must be positive"));
                }
            }
        }
        let value_scale = (p as f64 + (0..p).map(|i| sigma.get(i, i).ln()).sum::<f64>())
            .abs()
            .max(1.0);
        Ok(Self {
            sigma,
            reg,
            master: MasterState::new(p, 0, structural)?,
            evaluated: BTreeMap::new(),
            value_scale,
        })
    }

    pub fn cuts(&self) -> &[Cut] {
        &self.master.cuts
    }

    pub fn evaluated_supports(&self) -> usize {
        self.evaluated.len()
    }

    /// Solves at budget `k`, reusing the cuts and evaluations gathered so far.
    pub fn solve(
        &mut self,
        k: usize,
        opts: &SolveOptions,
        mut trace: Option<TraceFn<'_>>,
    ) -> Result<SolveResult> {
        if !(opts.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        let start = Instant::now();
        let p = self.master.p;
        self.master.k = k.min(self.master.table.len());
        let k = self.master.k;
        let cuts_before = self.master.cuts.len();

        let covsel = CovSelOptions {
            gap_tol: opts.covsel_gap.unwrap_or(0.1 * opts.eps) * self.value_scale,
            improve_tol: 1e-12,
            max_iter: opts.covsel_max_iter,
            refresh_every: None,
        };
        let mut evaluator = Evaluator {
            sigma: self.sigma,
            reg: self.reg,
            evaluated: &mut self.evaluated,
            covsel,
            subproblem_time: Duration::ZERO,
            added: 0,
            local_search: opts.local_search,
        };

        let warm = match &opts.warm {
            WarmStart::NeighborhoodSelection => Some(model::warm_start(self.sigma, k)),
            WarmStart::None => None,
            WarmStart::Support(s) => {
                if s.dim() != p {
                    return Err(Error::invalid("warm-start support dimension mismatch"));
                }
                Some(s.clone())
            }
        };
        let mut seeds = Vec::new();
        if let Some(w) = warm {
            seeds.push(w);
        }
        if self.master.cuts.is_empty() || seeds.is_empty() {
            seeds.push(Support::empty(p));
        }
        for s in &seeds {
            let idx: Vec<u32> = s.indices().into_iter().map(|i| i as u32).collect();
            evaluator.evaluate(&mut self.master, &idx, &mut trace)?;
        }

        // Best known feasible support within budget; earliest evaluation wins ties.
        let mut incumbent: Option<(Vec<u32>, f64, usize)> = None;
        for (idx, e) in evaluator.evaluated.iter() {
            if idx.len() <= k
                && check_complete(&self.master.support_of(idx), &self.master.structural)
            {
                let better = incumbent
                    .as_ref()
                    .is_none_or(|(_, v, s)| e.value < *v || (e.value == *v && e.seq < *s));
                if better {
                    incumbent = Some((idx.clone(), e.value, e.seq));
                }
            }
        }
        let limits = Limits {
            start,
            time_limit: opts.time_limit,
            node_limit: opts.node_limit,
        };
        let mut incumbent = incumbent.map(|(i, v, _)| (i, v));
        if let Some((idx, _)) = &incumbent {
            if let Some(better) =
                evaluator.improve(&mut self.master, &idx.clone(), &limits, &mut trace)?
            {
                incumbent = Some(better);
            }
        }
        if let (Some((idx, v)), Some(f)) = (&incumbent, trace.as_mut()) {
            f(&TraceEvent::IncumbentUpdated {
                value: *v,
                support: self.master.support_of(idx).pairs().to_vec(),
            });
        }

        let outcome = if opts.multi_tree {
            multi_tree(
                &mut self.master,
                &mut evaluator,
                incumbent,
                opts.eps,
                &limits,
                &mut trace,
            )?
        } else {
            search(
                &mut self.master,
                Valuation::Lazy(&mut evaluator),
                incumbent,
                opts.eps,
                &limits,
                &mut trace,
            )?
        };
        let subproblem_s = evaluator.subproblem_time.as_secs_f64();

        let Some((idx, upper)) = outcome.incumbent else {
            return match outcome.status {
                SolveStatus::Optimal => Err(Error::Infeasible),
                _ => Err(Error::invalid(
                    "stopped before any feasible support was found",
                )),
            };
        };
        let support = self.master.support_of(&idx);
        let e = &self.evaluated[&idx];
        let mut theta = SymmetricMatrix::from_diagonal(&e.diag);
        for (&(i, j), &v) in support.pairs().iter().zip(&e.entries) {
            theta.set(i, j, v);
        }
        let lower = outcome.lower.min(upper);
        let total_s = start.elapsed().as_secs_f64();
        Ok(SolveResult {
            k,
            support,
            theta,
            upper,
            lower,
            relative_gap: (upper - lower) / upper.abs().max(1.0),
            cuts: self.master.cuts.len(),
            cuts_added: self.master.cuts.len() - cuts_before,
            nodes_explored: outcome.nodes,
            status: outcome.status,
            times: Timings {
                total_s,
                master_s: (total_s - subproblem_s).max(0.0),
                subproblem_s,
            },
        })
    }
}

/// Literal outer approximation: solve the master, evaluate its minimizer,
/// add the cut, repeat.
fn multi_tree(
    master: &mut MasterState,
    evaluator: &mut Evaluator<'_>,
    mut incumbent: Option<(Vec<u32>, f64)>,
    eps: f64,
    limits: &Limits,
    trace: &mut Option<TraceFn<'_>>,
) -> Result<SearchOutcome> {
    let mut lower = f64::NEG_INFINITY;
    let mut nodes = 0;
    loop {
        let inc = incumbent.as_ref().map_or(f64::INFINITY, |x| x.1);
        let inc_floor = incumbent
            .as_ref()
            .and_then(|(z, _)| evaluator.evaluated.get(z))
            .map_or(inc, |e| e.dual.min(inc));
        let tol = eps_abs(eps, inc);
        let out = search_master(master, 0.1 * tol, limits, trace)?;
        nodes += out.nodes;
        if out.status != SolveStatus::Optimal {
            return Ok(SearchOutcome {
                incumbent,
                lower,
                nodes,
                status: out.status,
            });
        }
        let Some((z, eta)) = out.incumbent else {
            return Ok(SearchOutcome {
                incumbent,
                lower,
                nodes,
                status: SolveStatus::Optimal,
            });
        };
        // The master tolerance can leave eta slightly above the true minimum.
        lower = lower.max(eta - 0.1 * tol).min(inc_floor);
        if let Some(f) = trace.as_mut() {
            f(&TraceEvent::LowerBound { value: lower });
        }
        if lower >= inc - tol || evaluator.evaluated.contains_key(&z) {
            return Ok(SearchOutcome {
                incumbent,
                lower,
                nodes,
                status: SolveStatus::Optimal,
            });
        }
        let value = evaluator.evaluate(master, &z, trace)?;
        if value < inc {
            if let Some(f) = trace.as_mut() {
                f(&TraceEvent::IncumbentUpdated {
                    value,
                    support: master.support_of(&z).pairs().to_vec(),
                });
            }
            incumbent = Some((z, value));
        }
        if let Some(s) = limits.hit(0) {
            return Ok(SearchOutcome {
                incumbent,
                lower,
                nodes,
                status: s,
            });
        }
    }
}

/// Solves the cardinality-constrained problem at budget `k`.
pub fn solve(
    sigma: &SymmetricMatrix,
    k: usize,
    reg: &Regularizer,
    structural: &[StructuralConstraint],
    opts: &SolveOptions,
) -> Result<SolveResult> {
    Session::new(sigma, reg, structural.to_vec())?.solve(k, opts, None)
}

/// Solves a strictly decreasing sequence of budgets, carrying the cut pool forward.
pub fn solve_path(
    sigma: &SymmetricMatrix,
    k_list: &[usize],
    reg: &Regularizer,
    structural: &[StructuralConstraint],
    opts: &SolveOptions,
) -> Result<Vec<SolveResult>> {
    if k_list.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::invalid("budgets must be strictly decreasing"));
    }
    let mut session = Session::new(sigma, reg, structural.to_vec())?;
    k_list
        .iter()
        .map(|&k| session.solve(k, opts, None))
        .collect()
}
