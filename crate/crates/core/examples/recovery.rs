//! Support recovery at p = 50, n = 50, t = 2% with the exact big-M method,
//! compared against the MB support truncated to the same k.
//!
//! Usage: `cargo run --release -p cardprec --example recovery -- [time_limit_s] [seeds]`

use cardprec::model::warm_start;
use cardprec::synthetic::{
    experiment_solve_options, gen_experiment_instance, run_experiment, support_metrics,
    ExperimentConfig, Method,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let time_limit: f64 = args.get(1).map_or(2.0, |s| s.parse().expect("time limit"));
    let n_seeds: u64 = args.get(2).map_or(10, |s| s.parse().expect("seed count"));
    let seeds: Vec<u64> = (0..n_seeds).collect();

    let mut cfg = ExperimentConfig::new(50, 50, 0.02);
    cfg.methods = vec![Method::ExactBigM];
    cfg.solve = experiment_solve_options(time_limit);
    let table = run_experiment(&cfg, &seeds).expect("experiment");

    for r in &table.rows {
        let inst = gen_experiment_instance(50, 50, 0.02, r.seed).expect("instance");
        let mb = warm_start(&inst.sigma_train, r.k_selected);
        let (_, mb_fdr) = support_metrics(&mb, &inst.support_true);
        println!(
            "seed {} k {} A {:.3} FDR {:.3} mb_FDR {:.3} gap {:.3}",
            r.seed, r.k_selected, r.accuracy, r.fdr, mb_fdr, r.gap
        );
    }
    let s = &table.summary[0];
    println!("mean A {:.3} FDR {:.3}", s.accuracy.mean, s.fdr.mean);
}
