//! Finite-difference verification of analytic gradients.
//!
//! Runs entirely at f64: the function under test is rebuilt on a fresh
//! `Tape<f64>` for every perturbed evaluation, so the analytic and numeric
//! sides share one code path and precision.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{AdError, Tape, TensorId};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over the checked coordinates.
    pub max_rel_error: f64,
    /// Largest absolute error over the checked coordinates.
    pub max_abs_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Input index and flat coordinate of the worst offender.
    pub worst: (usize, usize),
    /// `max_rel_error < tolerance`.
    pub pass: bool,
}

/// Compares analytic gradients of `build` against central finite
/// differences `(f(x+eps e) - f(x-eps e)) / (2 eps)`.
///
/// `build` must construct the scalar loss from leaf tensors created with the
/// given shapes and values; it is re-invoked on a fresh tape per evaluation.
/// When the total coordinate count exceeds `max_coords`, a random subset
/// (seeded by `seed`) is checked. Relative error uses denominator
/// `max(|analytic|, |numeric|, 0.01)` so near-zero gradients are compared
/// absolutely at that scale.
pub fn grad_check<B>(
    build: B,
    shapes: &[Vec<usize>],
    inits: &[Vec<f64>],
    epsilon: f64,
    tolerance: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, AdError>
where
    B: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, AdError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let eval = |values: &[Vec<f64>]| -> Result<(Tape<f64>, Vec<TensorId>, TensorId), AdError> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = shapes
            .iter()
            .zip(values)
            .map(|(shape, vals)| tape.param(shape, vals.clone()))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(inits)?;
    let grads = tape.backward(loss)?;

    // Enumerate all coordinates, then subsample if over budget.
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (i, init) in inits.iter().enumerate() {
        for c in 0..init.len() {
            coords.push((i, c));
        }
    }
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = Vec::with_capacity(max_coords);
        for _ in 0..max_coords {
            picked.push(coords.swap_remove(rng.gen_range(0..coords.len())));
        }
        coords = picked;
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: coords.len(),
        worst: (0, 0),
        pass: true,
    };
    let mut values = inits.to_vec();
    for (i, c) in coords {
        let orig = values[i][c];
        values[i][c] = orig + epsilon;
        let (tape_p, _, loss_p) = eval(&values)?;
        let fp = tape_p.scalar_value(loss_p);
        values[i][c] = orig - epsilon;
        let (tape_m, _, loss_m) = eval(&values)?;
        let fm = tape_m.scalar_value(loss_m);
        values[i][c] = orig;

        let numeric = (fp - fm) / (2.0 * epsilon);
        let analytic = grads.get(ids[i]).map_or(0.0, |g| g[c]);
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1e-2);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (i, c);
        }
        report.max_abs_error = report.max_abs_error.max(abs);
    }
    report.pass = report.max_rel_error < tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_correct_gradient() {
        let report = grad_check(
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                Ok(tape.sum(sq))
            },
            &[vec![3]],
            &[vec![1.0, -2.0, 0.5]],
            1e-5,
            1e-8,
            10,
            1,
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn detects_wrong_gradient() {
        // scale() forward is correct, but comparing sum(2x) FD against the
        // analytic gradient of sum(3x) must fail: build a deliberately
        // inconsistent pair by checking sum(x*x) against epsilon too coarse
        // to matter, then corrupt by computing loss differently per call.
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let report = grad_check(
            |tape, ids| {
                // First call (analytic pass) scales by 3, later FD calls by 2.
                let n = calls.fetch_add(1, Ordering::SeqCst);
                let c = if n == 0 { 3.0 } else { 2.0 };
                let y = tape.scale(ids[0], c);
                Ok(tape.sum(y))
            },
            &[vec![2]],
            &[vec![0.4, -0.7]],
            1e-4,
            1e-3,
            10,
            2,
        )
        .unwrap();
        assert!(!report.pass);
        assert!(report.max_rel_error > 0.3);
    }
}
