mod common;

use common::{rel_error, GradProblem};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sampled_parameters_match_central_differences() {
    let problem = GradProblem::new(32, 3, 9);
    let analytic = problem.analytic();
    let total = analytic[0].len();
    let mut indices: Vec<usize> = sample(&mut ChaCha8Rng::seed_from_u64(1), total, 600).into_vec();
    // always include the head and the transform output layer
    indices.extend(total - 387..total - 380);
    indices.sort_unstable();
    let numeric = problem.numeric(&indices, 1e-3);
    for term in 0..3 {
        let bad: Vec<(usize, f64, f64)> = indices
            .iter()
            .zip(&numeric[term])
            .map(|(&i, &n)| (i, analytic[term][i], n))
            .filter(|&(_, a, n)| rel_error(a, n) >= 1e-3)
            .collect();
        assert!(
            bad.len() * 100 <= indices.len(),
            "term {term}: {} mismatches, first {:?}",
            bad.len(),
            &bad[..bad.len().min(5)]
        );
    }
}

#[test]
fn transform_gradient_is_confined_to_tnet() {
    let problem = GradProblem::new(16, 3, 4);
    let [_, transform, _] = problem.analytic();
    let tnet: usize = problem.params.tnet.iter().map(|l| l.w.len() + l.b.len()).sum();
    assert!(transform[tnet..].iter().all(|&g| g == 0.0));
    assert!(transform[..tnet].iter().any(|&g| g != 0.0));
}
