//! Finite-difference gradient oracles. These evaluate a forward-only closure
//! at perturbed inputs, so they are independent of the tape's backward pass
//! and can be used to verify it.

/// Central differences: `(f(x + h e_i) - f(x - h e_i)) / 2h` for every i.
pub fn numerical_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "numerical_grad: step must be positive");
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let x0 = xs[i];
        xs[i] = x0 + h;
        let fp = f(&xs);
        xs[i] = x0 - h;
        let fm = f(&xs);
        xs[i] = x0;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Worst relative error between analytic and numeric gradients.
///
/// Components where both magnitudes are at or below `abs_floor` are treated
/// as matching zeros (central differences lose all relative accuracy there);
/// everything else must satisfy `|a - n| / max(|a|, |n|) <= rel_tol`.
/// Returns the worst relative error seen, or a message naming the worst
/// offending component.
pub fn compare_grads(
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    abs_floor: f64,
) -> Result<f64, String> {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "compare_grads: length mismatch {} vs {}",
        analytic.len(),
        numeric.len()
    );
    let mut worst = 0.0f64;
    let mut worst_at = usize::MAX;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let mag = a.abs().max(n.abs());
        if mag <= abs_floor {
            continue;
        }
        let rel = (a - n).abs() / mag;
        if rel > worst {
            worst = rel;
            worst_at = i;
        }
    }
    if worst > rel_tol {
        Err(format!(
            "gradient mismatch at component {}: analytic {:e}, numeric {:e}, rel err {:e} > {:e}",
            worst_at, analytic[worst_at], numeric[worst_at], worst, rel_tol
        ))
    } else {
        Ok(worst)
    }
}
