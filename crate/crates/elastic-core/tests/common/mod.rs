//! Shared oracles for the integration suites. Everything here recomputes
//! expectations from first principles (finite differences, brute force) and
//! never calls into the code paths it is checking.

#![allow(dead_code)] // not every suite uses every oracle

use elastic_core::rng;
use elastic_core::tape::{Tape, Var};

/// Central finite-difference gradient check, f64, step 1e-5.
///
/// `inputs` are the differentiable leaves as `(rows, cols, data)`. `build`
/// reconstructs the scalar loss from leaves on a fresh tape; it runs once
/// for the analytic gradients and twice per input element for the
/// numerical ones. Tolerance: `|a − fd| ≤ 1e-7 + 1e-4·max(|a|,|fd|)`.
pub fn finite_diff_check(
    label: &str,
    inputs: &[(usize, usize, Vec<f64>)],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) {
    finite_diff_check_tol(label, inputs, build, 1e-4, 1e-7)
}

pub fn finite_diff_check_tol(
    label: &str,
    inputs: &[(usize, usize, Vec<f64>)],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    rel: f64,
    abs: f64,
) {
    const H: f64 = 1e-5;

    let eval = |datasets: &[Vec<f64>]| -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let leaves: Vec<Var> = inputs
            .iter()
            .zip(datasets)
            .map(|(&(r, c, _), d)| tape.leaf(r, c, d.clone()).unwrap())
            .collect();
        let loss = build(&mut tape, &leaves);
        let t = tape.value(loss);
        assert_eq!((t.rows, t.cols), (1, 1), "{label}: loss must be scalar");
        t.data[0]
    };

    // Analytic pass.
    let mut tape: Tape<f64> = Tape::new();
    let leaves: Vec<Var> = inputs
        .iter()
        .map(|&(r, c, ref d)| tape.leaf(r, c, d.clone()).unwrap())
        .collect();
    let loss = build(&mut tape, &leaves);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&v| tape.grad(v).expect("leaf has grad").to_vec())
        .collect();

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, _, d)| d.clone()).collect();
    for (li, (_, _, data)) in inputs.iter().enumerate() {
        for ei in 0..data.len() {
            let mut plus = base.clone();
            plus[li][ei] += H;
            let mut minus = base.clone();
            minus[li][ei] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic[li][ei];
            let tol = abs + rel * a.abs().max(fd.abs());
            assert!(
                (a - fd).abs() <= tol,
                "{label}: leaf {li} element {ei}: analytic {a} vs fd {fd} (tol {tol})"
            );
        }
    }
}

/// Random matrix with standard-normal entries.
pub fn randn(rows: usize, cols: usize, seed: u64) -> (usize, usize, Vec<f64>) {
    let mut r = rng::seeded(seed);
    (
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng::standard_normal(&mut r))
            .collect(),
    )
}

/// Three assorted random shapes per op, as the op contract demands.
pub fn shape_set(seed: u64) -> Vec<(usize, usize)> {
    let mut r = rng::seeded(seed);
    (0..3)
        .map(|_| (rng::pick(&mut r, 1, 7), rng::pick(&mut r, 1, 7)))
        .collect()
}
