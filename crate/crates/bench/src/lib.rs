//! Fixed benchmark fixtures shared by the criterion benches.

use cardprec::covsel::Regularizer;
use cardprec::model::base_scales;
use cardprec::synthetic::{gen_covsel_instance, gen_experiment_instance_k, SyntheticInstance};
use cardprec::{Support, SymmetricMatrix};

/// Subproblem fixture: covariance, random support and the base-scale ridge.
pub fn covsel_fixture(p: usize, t: f64) -> (SymmetricMatrix, Support, Regularizer) {
    let (sigma, z) = gen_covsel_instance(p, t, 7).expect("valid fixture parameters");
    let (_, gamma0) = base_scales(&sigma).expect("nonzero covariance");
    (sigma, z, Regularizer::ridge(gamma0))
}

/// Recovery fixture with a planted graph of `k` edges.
pub fn recovery_fixture(p: usize, n: usize, k: usize) -> SyntheticInstance {
    gen_experiment_instance_k(p, n, k, 11).expect("valid fixture parameters")
}

/// Deterministic step inputs spread over a realistic range.
pub fn step_inputs(count: usize) -> Vec<[f64; 5]> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    (0..count)
        .map(|_| {
            let w_ii: f64 = rng.random_range(0.5..2.0);
            let w_jj: f64 = rng.random_range(0.5..2.0);
            let w_ij = rng.random_range(-0.9..0.9) * (w_ii * w_jj).sqrt();
            [
                rng.random_range(-0.5..0.5),
                w_ii,
                w_jj,
                w_ij,
                rng.random_range(-0.3..0.3),
            ]
        })
        .collect()
}
