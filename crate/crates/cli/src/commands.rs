use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use cardprec::bigm::{self, Singular};
use cardprec::covsel::{solve_covsel_with, CovSelOptions, Regularizer};
use cardprec::cutplane::{Session, TraceEvent, WarmStart};
use cardprec::model::{self, Criterion, RegKind, TuneData, TuningGrid};
use cardprec::synthetic::{covariance_from_rows, run_experiment, ExperimentConfig, Method};
use cardprec::{SolveOptions, SolveResult, Support, SymmetricMatrix};
use serde::Serialize;
use serde_json::json;

use crate::io::{self, input_error, num, InputKind};
use crate::{
    BenchArgs, BoundsArgs, CovselArgs, CriterionArg, EstimateArgs, MethodArg, RegArg, RegArgs,
    SolveArgs, TuneArgs,
};

const EXIT_OK: u8 = 0;
const EXIT_GAP: u8 = 4;

fn reg_kind(r: RegArg) -> RegKind {
    match r {
        RegArg::Bigm => RegKind::BigM,
        RegArg::Ridge => RegKind::Ridge,
    }
}

fn kind_name(k: RegKind) -> &'static str {
    match k {
        RegKind::BigM => "bigm",
        RegKind::Ridge => "ridge",
    }
}

/// Regularizer and its absolute value.
fn build_reg(args: &RegArgs, sigma: &SymmetricMatrix) -> Result<(Regularizer, f64)> {
    let kind = reg_kind(args.reg);
    let value = match (args.reg_value, args.reg_mult) {
        (Some(v), _) => v,
        (None, m) => {
            let (m0, g0) = model::base_scales(sigma).map_err(|e| input_error(e.to_string()))?;
            let base = if kind == RegKind::BigM { m0 } else { g0 };
            base * m.unwrap_or(1.0)
        }
    };
    if !(value > 0.0 && value.is_finite()) {
        return Err(input_error(
            "regularization value must be positive and finite",
        ));
    }
    let reg = match kind {
        RegKind::BigM => Regularizer::big_m(sigma.dim(), value),
        RegKind::Ridge => Regularizer::ridge(value),
    };
    Ok((reg, value))
}

fn solve_options(args: &SolveArgs, p: usize) -> Result<SolveOptions> {
    if !(args.eps > 0.0) {
        return Err(input_error("--eps must be positive"));
    }
    if !(args.time_limit_s > 0.0) {
        return Err(input_error("--time-limit-s must be positive"));
    }
    let warm = match args.warm.as_str() {
        "mb" => WarmStart::NeighborhoodSelection,
        "none" => WarmStart::None,
        other => match other.strip_prefix("file:") {
            Some(path) => WarmStart::Support(io::read_support(Path::new(path), p)?),
            None => return Err(input_error(format!("unknown warm start `{other}`"))),
        },
    };
    Ok(SolveOptions {
        eps: args.eps,
        time_limit: Some(Duration::from_secs_f64(args.time_limit_s)),
        node_limit: args.node_limit,
        warm,
        multi_tree: args.multi_tree,
        local_search: !args.no_local_search,
        ..SolveOptions::default()
    })
}

#[derive(Serialize)]
struct ThetaJson {
    diagonal: Vec<f64>,
    entries: Vec<(usize, usize, f64)>,
}

fn theta_json(theta: &SymmetricMatrix, support: &Support) -> ThetaJson {
    ThetaJson {
        diagonal: theta.diagonal(),
        entries: support
            .pairs()
            .iter()
            .map(|&(i, j)| (i, j, theta.get(i, j)))
            .collect(),
    }
}

fn result_json(res: &SolveResult, kind: RegKind, value: f64) -> serde_json::Value {
    json!({
        "p": res.theta.dim(),
        "k": res.k,
        "regularizer": {"kind": kind_name(kind), "value": value},
        "objective_upper": res.upper,
        "objective_lower": res.lower,
        "relative_gap": res.relative_gap,
        "status": res.status,
        "support": res.support.pairs(),
        "theta": theta_json(&res.theta, &res.support),
        "cuts": res.cuts,
        "nodes": res.nodes_explored,
        "time_s": res.times.total_s,
    })
}

fn gap_open(res: &SolveResult, eps: f64) -> bool {
    res.status != cardprec::cutplane::SolveStatus::Optimal && res.relative_gap > eps
}

pub fn estimate(args: EstimateArgs) -> Result<u8> {
    let (sigma, _) = io::read_input(&args.input.input, args.input.input_kind)?;
    let p = sigma.dim();
    let (reg, value) = build_reg(&args.reg, &sigma)?;
    let opts = solve_options(&args.solve, p)?;
    let structural = match &args.structure {
        Some(path) => io::read_structure(path, p)?,
        None => Vec::new(),
    };
    let ks = match (&args.k, &args.k_list) {
        (Some(k), _) => vec![*k],
        (None, Some(list)) => {
            if list.is_empty() || list.windows(2).any(|w| w[0] <= w[1]) {
                return Err(input_error("--k-list must be strictly decreasing"));
            }
            list.clone()
        }
        (None, None) => return Err(input_error("one of --k or --k-list is required")),
    };

    let mut session =
        Session::new(&sigma, &reg, structural).map_err(|e| input_error(e.to_string()))?;
    let stderr = std::io::stderr();
    let mut tracer = |e: &TraceEvent| {
        if let Ok(line) = serde_json::to_string(e) {
            let _ = writeln!(stderr.lock(), "{line}");
        }
    };
    let mut results = Vec::new();
    for &k in &ks {
        let trace: Option<&mut dyn FnMut(&TraceEvent)> =
            if args.trace { Some(&mut tracer) } else { None };
        results.push(session.solve(k, &opts, trace)?);
    }
    let kind = reg_kind(args.reg.reg);
    let docs: Vec<serde_json::Value> = results
        .iter()
        .map(|r| result_json(r, kind, value))
        .collect();
    if args.k.is_some() {
        io::write_json(args.out.as_deref(), &docs[0])?;
    } else {
        io::write_json(args.out.as_deref(), &docs)?;
    }
    Ok(if results.iter().any(|r| gap_open(r, opts.eps)) {
        EXIT_GAP
    } else {
        EXIT_OK
    })
}

fn criterion(c: CriterionArg) -> Criterion {
    match c {
        CriterionArg::Ebic => Criterion::Ebic,
        CriterionArg::Holdout => Criterion::HoldoutNll,
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn tune(args: TuneArgs) -> Result<u8> {
    let crit = criterion(args.criterion);
    let (train, val, n_train) = match args.input.input_kind {
        InputKind::Samples => {
            if args.validation.is_some() {
                return Err(input_error("--validation applies to covariance input only"));
            }
            let rows = io::read_numeric_csv(&args.input.input)?;
            // Every third sample goes to validation (2:1 split).
            let (val_rows, train_rows): (Vec<_>, Vec<_>) =
                rows.into_iter().enumerate().partition(|(i, _)| i % 3 == 2);
            let strip = |v: Vec<(usize, Vec<f64>)>| v.into_iter().map(|x| x.1).collect::<Vec<_>>();
            let (train_rows, val_rows) = (strip(train_rows), strip(val_rows));
            if val_rows.len() < 2 {
                return Err(input_error("need at least six samples to split 2:1"));
            }
            let n = train_rows.len();
            let t = covariance_from_rows(&train_rows).map_err(|e| input_error(e.to_string()))?;
            let v = covariance_from_rows(&val_rows).map_err(|e| input_error(e.to_string()))?;
            (t, Some(v), Some(n))
        }
        InputKind::Covariance => {
            let t = io::read_covariance(&args.input.input)?;
            let v = args
                .validation
                .as_deref()
                .map(io::read_covariance)
                .transpose()?;
            if let Some(v) = &v {
                if v.dim() != t.dim() {
                    return Err(input_error(
                        "validation covariance has a different dimension",
                    ));
                }
            }
            (t, v, args.n)
        }
    };
    if crit == Criterion::HoldoutNll && val.is_none() {
        return Err(input_error(
            "the holdout criterion needs --validation or sample input",
        ));
    }
    let n_train = match (crit, n_train) {
        (Criterion::Ebic, None) => return Err(input_error("EBIC with covariance input needs --n")),
        (_, n) => n.unwrap_or(1),
    };
    let p = train.dim();
    let mut grid = TuningGrid::default_for(p, crit);
    if let Some(k) = &args.k_list {
        grid.k_values = k.clone();
    }
    if let Some(m) = &args.reg_mults {
        grid.multipliers = m.clone();
    }
    grid.validate().map_err(|e| input_error(e.to_string()))?;
    let opts = solve_options(&args.solve, p)?;
    let kind = reg_kind(args.reg);
    let data = TuneData {
        train: &train,
        n_train,
        validation: val.as_ref(),
    };
    let tuned = model::tune(data, &grid, kind, &opts)?;

    let header = [
        "k",
        "reg_multiplier",
        "objective",
        "lower_bound",
        "gap",
        "criterion",
        "time_s",
        "cuts",
    ];
    let rows: Vec<Vec<String>> = tuned
        .table
        .iter()
        .map(|c| {
            vec![
                c.k.to_string(),
                num(c.reg_multiplier),
                num(c.objective),
                num(c.lower_bound),
                num(c.gap),
                num(c.criterion),
                num(c.time_s),
                c.cuts.to_string(),
            ]
        })
        .collect();
    for c in tuned.table.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "warning: cell k={} mult={} failed: {}",
            c.k,
            c.reg_multiplier,
            c.error.as_deref().unwrap_or("")
        );
    }
    let grid_path = args
        .grid
        .clone()
        .or_else(|| args.out.as_deref().map(|o| with_suffix(o, ".grid.csv")));
    io::write_csv(grid_path.as_deref(), &header, &rows)?;

    let (m0, g0) = model::base_scales(&train)?;
    let base = if kind == RegKind::BigM { m0 } else { g0 };
    let doc = json!({
        "k": tuned.k,
        "reg_multiplier": tuned.reg_multiplier,
        "criterion": tuned.criterion,
        "criterion_value": tuned.criterion_value,
        "result": result_json(&tuned.result, kind, base * tuned.reg_multiplier),
    });
    io::write_json(args.out.as_deref(), &doc)?;
    Ok(if gap_open(&tuned.result, opts.eps) {
        EXIT_GAP
    } else {
        EXIT_OK
    })
}

pub fn bench(args: BenchArgs) -> Result<u8> {
    if args.p < 2 || !(args.t > 0.0 && args.t < 1.0) {
        return Err(input_error("need --p >= 2 and --t in (0, 1)"));
    }
    if !(args.time_limit_s > 0.0) || !(args.eps > 0.0) {
        return Err(input_error("--eps and --time-limit-s must be positive"));
    }
    let mut cfg = ExperimentConfig::new(args.p, args.n.unwrap_or(args.p), args.t);
    cfg.methods = args
        .methods
        .iter()
        .map(|m| match m {
            MethodArg::Bigm => Method::ExactBigM,
            MethodArg::Ridge => Method::ExactRidge,
            MethodArg::Mb => Method::NeighborhoodSelection,
        })
        .collect();
    cfg.criteria = args.criteria.iter().map(|c| criterion(*c)).collect();
    cfg.k_values = args.k_list.clone();
    cfg.multipliers = args.reg_mults.clone();
    cfg.solve = SolveOptions {
        eps: args.eps,
        time_limit: Some(Duration::from_secs_f64(args.time_limit_s)),
        node_limit: args.node_limit,
        ..SolveOptions::default()
    };
    if let Some(k) = &cfg.k_values {
        if k.is_empty() || k.windows(2).any(|w| w[0] <= w[1]) {
            return Err(input_error("--k-list must be strictly decreasing"));
        }
    }
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let table = run_experiment(&cfg, &seeds)?;

    let header = [
        "seed",
        "method",
        "criterion",
        "k_selected",
        "A",
        "FDR",
        "nll_test",
        "objective",
        "lower_bound",
        "gap",
        "time_total_s",
        "time_cuts_s",
        "cuts",
        "nodes",
    ];
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                r.method.name().to_string(),
                r.criterion.name().to_string(),
                r.k_selected.to_string(),
                num(r.accuracy),
                num(r.fdr),
                num(r.nll_test),
                num(r.objective),
                num(r.lower_bound),
                num(r.gap),
                num(r.time_total_s),
                num(r.time_cuts_s),
                r.cuts.to_string(),
                r.nodes.to_string(),
            ]
        })
        .collect();
    for r in table.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: seed {} {} failed: {}",
            r.seed,
            r.method.name(),
            r.error.as_deref().unwrap_or("")
        );
    }
    io::write_csv(args.out.as_deref(), &header, &rows)?;
    let summary_path = args
        .summary
        .clone()
        .or_else(|| args.out.as_deref().map(|o| with_suffix(o, ".summary.json")));
    io::write_json(summary_path.as_deref(), &table.summary)?;
    Ok(EXIT_OK)
}

pub fn covsel(args: CovselArgs) -> Result<u8> {
    let (sigma, _) = io::read_input(&args.input.input, args.input.input_kind)?;
    let p = sigma.dim();
    let z = match &args.support {
        Some(path) => io::read_support(path, p)?,
        None => Support::empty(p),
    };
    let (reg, value) = build_reg(&args.reg, &sigma)?;
    let opts = CovSelOptions {
        gap_tol: args.gap_tol,
        max_iter: args.max_iter,
        ..CovSelOptions::default()
    };
    let (sol, converged) = match solve_covsel_with(&sigma, &z, &reg, &opts) {
        Ok(s) => (s, true),
        Err(cardprec::Error::Unconverged(s)) => (*s, false),
        Err(e) => return Err(e.into()),
    };
    let doc = json!({
        "p": p,
        "support": z.pairs(),
        "regularizer": {"kind": kind_name(reg_kind(args.reg.reg)), "value": value},
        "value": sol.primal_value,
        "dual": sol.dual_value,
        "gap": sol.gap,
        "iterations": sol.iterations,
        "converged": converged,
        "theta": theta_json(&sol.theta, &z),
    });
    io::write_json(args.out.as_deref(), &doc)?;
    Ok(if converged { EXIT_OK } else { EXIT_GAP })
}

pub fn bounds(args: BoundsArgs) -> Result<u8> {
    let (sigma, _) = io::read_input(&args.input.input, args.input.input_kind)?;
    let singular = match args.shift.as_deref() {
        None => Singular::Refuse,
        Some("auto") => Singular::Shift(None),
        Some(v) => Singular::Shift(Some(
            v.parse::<f64>()
                .ok()
                .filter(|x| *x > 0.0)
                .ok_or_else(|| input_error(format!("invalid --shift value `{v}`")))?,
        )),
    };
    let prep = bigm::prepare(&sigma, singular).map_err(|e| match e {
        cardprec::Error::NotPositiveDefinite { .. } => input_error(
            "covariance is singular; bounds need a positive definite matrix (see --shift)",
        ),
        e => e.into(),
    })?;
    if prep.shifted {
        eprintln!("warning: covariance shifted; the resulting M values are heuristic");
    }
    let u = match (args.u, args.k) {
        (Some(u), _) => u,
        (None, Some(k)) => {
            bigm::greedy_level(&prep.sigma, k).context("computing a feasible level")?
        }
        (None, None) => return Err(input_error("one of --u or --k is required")),
    };
    if !(args.inflation >= 1.0) {
        return Err(input_error("--inflation must be at least 1"));
    }
    let all = prep.all_bounds(u, args.newton_tol)?;
    let rows: Vec<Vec<String>> = all
        .iter()
        .map(|b| {
            vec![
                b.i.to_string(),
                b.j.to_string(),
                num(b.lower),
                num(b.upper),
                num(bigm::bound_to_m(b, args.inflation)),
            ]
        })
        .collect();
    io::write_csv(
        args.out.as_deref(),
        &["i", "j", "lower", "upper", "M"],
        &rows,
    )?;
    Ok(EXIT_OK)
}
