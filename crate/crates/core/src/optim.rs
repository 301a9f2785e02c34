//! Derivative-free minimization over a box.

/// Result of a bounded search.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Nelder-Mead simplex with every trial point projected into
/// `[lower, upper]`. Non-finite objective values are treated as `+inf`.
/// Stops after `max_evals` evaluations or when the simplex values agree to
/// within `ftol`.
pub fn nelder_mead_box(
    mut f: impl FnMut(&[f64]) -> f64,
    init: &[f64],
    lower: &[f64],
    upper: &[f64],
    max_evals: usize,
    ftol: f64,
) -> Minimum {
    let n = init.len();
    assert!(lower.len() == n && upper.len() == n, "bound dimension mismatch");
    let mut evals = 0;
    // Every evaluation goes through here; `None` once the budget is spent.
    let mut eval = |x: &[f64], evals: &mut usize| -> Option<f64> {
        if *evals >= max_evals.max(1) {
            return None;
        }
        *evals += 1;
        let v = f(x);
        Some(if v.is_finite() { v } else { f64::INFINITY })
    };

    let mut start = init.to_vec();
    project(&mut start, lower, upper);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(&start, &mut evals).unwrap_or(f64::INFINITY);
    simplex.push((start.clone(), v0));
    for i in 0..n {
        let mut x = start.clone();
        let width = upper[i] - lower[i];
        let step = if x[i].abs() > 1e-8 {
            0.25 * x[i].abs()
        } else {
            0.05 * width
        };
        x[i] = if x[i] + step <= upper[i] {
            x[i] + step
        } else {
            x[i] - step
        };
        project(&mut x, lower, upper);
        let Some(v) = eval(&x, &mut evals) else { break };
        simplex.push((x, v));
    }

    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        let mut x: Vec<f64> = a.iter().zip(b).map(|(ai, bi)| ai + t * (bi - ai)).collect();
        project(&mut x, lower, upper);
        x
    };

    'search: while simplex.len() == n + 1 {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        if (worst - best).abs() <= ftol * (1.0 + best.abs()) && best.is_finite() {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|d| simplex[..n].iter().map(|(x, _)| x[d]).sum::<f64>() / n as f64)
            .collect();
        let worst_x = simplex[n].0.clone();

        let xr = combine(&centroid, &worst_x, -1.0);
        let Some(fr) = eval(&xr, &mut evals) else { break };
        if fr < simplex[0].1 {
            let xe = combine(&centroid, &worst_x, -2.0);
            simplex[n] = match eval(&xe, &mut evals) {
                Some(fe) if fe < fr => (xe, fe),
                _ => (xr, fr),
            };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let xc = if fr < simplex[n].1 {
            combine(&centroid, &xr, 0.5)
        } else {
            combine(&centroid, &worst_x, 0.5)
        };
        let Some(fc) = eval(&xc, &mut evals) else { break };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best_x = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            let x = combine(&best_x, &entry.0, 0.5);
            let Some(v) = eval(&x, &mut evals) else { break 'search };
            *entry = (x, v);
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        evaluations: evals,
    }
}
