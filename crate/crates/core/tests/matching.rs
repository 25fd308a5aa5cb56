mod checks;
mod oracle;

use patchmerge_core::supervision::hungarian;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn hungarian_equals_exhaustive_minimum() {
    checks::matching::hungarian_vs_exhaustive(1000);
}

#[test]
fn assignment_is_invariant_to_positive_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..300 {
        let (rows, cols) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
        let k = [0.25, 2.0, 1024.0][rng.random_range(0..3)];
        let scaled: Vec<f64> = cost.iter().map(|c| c * k).collect();
        assert_eq!(hungarian(&cost, rows, cols), hungarian(&scaled, rows, cols));
    }
}

#[test]
fn matching_cost_equals_scalar_recomputation() {
    checks::matching::matching_cost_vs_scalar(40);
}
