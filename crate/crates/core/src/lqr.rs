//! Gauss-Newton LQR controllers for platoon speeds.
//!
//! [`gn_lqr`] linearizes the traffic dynamics along an equilibrium
//! trajectory, solves a finite-horizon time-varying Riccati recursion and
//! updates the input sequence. [`gn_lqrp`] runs the same loop on the system
//! augmented with the previous input, so the decision variable becomes the
//! speed change and can be penalised by `R'`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ctm::{ControlInput, Model, TrafficState};
use crate::error::{invalid, Error, Result};
use crate::linearization::{linearize, EquilibriumPoint, LinearizedDynamics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqrWeights {
    /// Weight on density states; position states carry zero weight.
    pub q_weight: f64,
    pub r_weight: f64,
    /// Penalty on speed changes (GN-LQRP only).
    pub rprime_weight: f64,
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self {
            q_weight: 100.0,
            r_weight: 1.0,
            rprime_weight: 30.0,
        }
    }
}

impl LqrWeights {
    /// `Q = diag(w_Q I_NL, 0)`.
    pub fn q_matrix(&self, n_segments: usize, n_platoons: usize) -> DMatrix<f64> {
        let n = n_segments + n_platoons;
        DMatrix::from_fn(n, n, |r, c| if r == c && r < n_segments { self.q_weight } else { 0.0 })
    }

    pub fn r_matrix(&self, n_platoons: usize) -> DMatrix<f64> {
        DMatrix::identity(n_platoons, n_platoons) * self.r_weight
    }

    pub fn rprime_matrix(&self, n_platoons: usize) -> DMatrix<f64> {
        DMatrix::identity(n_platoons, n_platoons) * self.rprime_weight
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqrConfig {
    pub horizon: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub eq_density: f64,
    pub eq_speed: f64,
    pub weights: LqrWeights,
}

impl Default for LqrConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            max_iters: 1,
            tol: 1e-3,
            eq_density: 59.0,
            eq_speed: 99.0,
            weights: LqrWeights::default(),
        }
    }
}

impl LqrConfig {
    pub fn validate(&self, rho_c: f64, v_f: f64) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tol", "must be positive"));
        }
        if !(self.eq_density > 0.0 && self.eq_density < rho_c) {
            return Err(invalid("eq_density", format!("must lie in (0, {rho_c})")));
        }
        if !(self.eq_speed > 0.0 && self.eq_speed < v_f) {
            return Err(invalid("eq_speed", format!("must lie in (0, {v_f})")));
        }
        if !(self.weights.q_weight >= 0.0) {
            return Err(invalid("q_weight", "must be non-negative"));
        }
        if !(self.weights.r_weight > 0.0) {
            return Err(invalid("r_weight", "must be positive"));
        }
        if !(self.weights.rprime_weight >= 0.0) {
            return Err(invalid("rprime_weight", "must be non-negative"));
        }
        Ok(())
    }
}

/// Time-varying gains `K[0..N]` and cost-to-go matrices `P[0..=N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub k_mats: Vec<DMatrix<f64>>,
    pub p_mats: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    /// Smallest eigenvalue over all `P[l]`.
    pub fn min_p_eigenvalue(&self) -> f64 {
        self.p_mats
            .iter()
            .filter(|p| p.nrows() > 0)
            .map(|p| p.clone().symmetric_eigenvalues().min())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Stacked augmented state `[x; u_prev]` and input change.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPoint {
    pub x_prime: DVector<f64>,
    pub u_prime: DVector<f64>,
}

impl AugmentedPoint {
    pub fn new(x: &DVector<f64>, u_prev: &DVector<f64>, u: &DVector<f64>) -> Self {
        let mut x_prime = DVector::zeros(x.len() + u_prev.len());
        x_prime.rows_mut(0, x.len()).copy_from(x);
        x_prime.rows_mut(x.len(), u_prev.len()).copy_from(u_prev);
        Self {
            x_prime,
            u_prime: u - u_prev,
        }
    }
}

fn solve_spd(lhs: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = lhs.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    lhs.clone().lu().solve(rhs).ok_or(Error::Singular("Riccati gain"))
}

/// Backward Riccati recursion with `P[N] = 0`:
///
/// `P[l-1] = Q + ÂᵀPÂ − ÂᵀPB̂ (R + B̂ᵀPB̂)⁻¹ B̂ᵀPÂ`,
/// `K[k] = (R + B̂ᵀP[k+1]B̂)⁻¹ B̂ᵀP[k+1]Â`.
pub fn riccati_backward(lin: &[LinearizedDynamics], q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<GainSchedule> {
    let horizon = lin.len();
    if horizon == 0 {
        return Err(invalid("horizon", "must be at least 1"));
    }
    let n = q.nrows();
    let nu = r.nrows();
    for l in lin {
        if l.n_states() != n || l.a_hat.ncols() != n {
            return Err(Error::Dimension {
                context: "Riccati state",
                expected: n,
                got: l.n_states(),
            });
        }
        if l.n_inputs() != nu || l.b_hat.nrows() != n {
            return Err(Error::Dimension {
                context: "Riccati input",
                expected: nu,
                got: l.n_inputs(),
            });
        }
    }
    let mut p_mats = vec![DMatrix::zeros(n, n); horizon + 1];
    let mut k_mats = vec![DMatrix::zeros(nu, n); horizon];
    for l in (1..=horizon).rev() {
        let LinearizedDynamics { a_hat: a, b_hat: b } = &lin[l - 1];
        let p = &p_mats[l];
        let pa = p * a;
        let pb = p * b;
        let gram = r + b.transpose() * &pb;
        let gain = solve_spd(&gram, &(b.transpose() * &pa))?;
        let next = q + a.transpose() * &pa - (a.transpose() * &pb) * &gain;
        p_mats[l - 1] = (&next + next.transpose()) * 0.5;
        k_mats[l - 1] = gain;
    }
    Ok(GainSchedule { k_mats, p_mats })
}

/// `u = −K (x − x*) + u*`, clamped to `[0, v_max]`.
pub fn feedback(
    k0: &DMatrix<f64>,
    x: &DVector<f64>,
    x_star: &DVector<f64>,
    u_star: &DVector<f64>,
    v_max: f64,
) -> Result<ControlInput> {
    if k0.ncols() != x.len() || x.len() != x_star.len() {
        return Err(Error::Dimension {
            context: "feedback state",
            expected: k0.ncols(),
            got: x.len(),
        });
    }
    if k0.nrows() != u_star.len() {
        return Err(Error::Dimension {
            context: "feedback input",
            expected: k0.nrows(),
            got: u_star.len(),
        });
    }
    let raw = u_star - k0 * (x - x_star);
    Ok(ControlInput::new(raw.iter().map(|v| v.clamp(0.0, v_max)).collect()))
}

/// Augmented matrices `A' = [[Â, B̂], [0, I]]`, `B' = [[B̂], [I]]` and
/// `Q' = diag(Q, R)`.
pub fn augment(
    lin: &LinearizedDynamics,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = lin.n_states();
    let nu = lin.n_inputs();
    if q.nrows() != n || r.nrows() != nu {
        return Err(Error::Dimension {
            context: "augment weights",
            expected: n + nu,
            got: q.nrows() + r.nrows(),
        });
    }
    let mut a = DMatrix::zeros(n + nu, n + nu);
    a.view_mut((0, 0), (n, n)).copy_from(&lin.a_hat);
    a.view_mut((0, n), (n, nu)).copy_from(&lin.b_hat);
    a.view_mut((n, n), (nu, nu)).fill_with_identity();
    let mut b = DMatrix::zeros(n + nu, nu);
    b.view_mut((0, 0), (n, nu)).copy_from(&lin.b_hat);
    b.view_mut((n, 0), (nu, nu)).fill_with_identity();
    let mut qa = DMatrix::zeros(n + nu, n + nu);
    qa.view_mut((0, 0), (n, n)).copy_from(q);
    qa.view_mut((n, n), (nu, nu)).copy_from(r);
    Ok((a, b, qa))
}

/// Result of one controller invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrOutcome {
    pub input: ControlInput,
    /// Gains of the last iteration.
    pub gains: GainSchedule,
    pub iterations: usize,
    /// Clamped input sequence after the last iteration, one column per step.
    pub sequence: DMatrix<f64>,
}

impl LqrOutcome {
    fn empty() -> Self {
        Self {
            input: ControlInput::default(),
            gains: GainSchedule {
                k_mats: Vec::new(),
                p_mats: Vec::new(),
            },
            iterations: 0,
            sequence: DMatrix::zeros(0, 0),
        }
    }
}

fn equilibrium_start(state: &TrafficState, eq_density: f64) -> TrafficState {
    let mut eq = state.clone();
    eq.densities.iter_mut().for_each(|r| *r = eq_density);
    eq
}

/// Linearizations along the equilibrium trajectory rolled forward with the
/// nonlinear dynamics under `u_seq`.
fn roll_and_linearize(
    model: &Model,
    start: &TrafficState,
    u_seq: &DMatrix<f64>,
    k0: usize,
) -> Result<Vec<LinearizedDynamics>> {
    let horizon = u_seq.ncols();
    let mut lin = Vec::with_capacity(horizon);
    let mut current = start.clone();
    for h in 0..horizon {
        let u: DVector<f64> = u_seq.column(h).into_owned();
        let eq = EquilibriumPoint {
            x_star: current.to_vector(),
            u_star: u.clone(),
        };
        lin.push(linearize(model, &current, &eq, k0 + h)?);
        let input = ControlInput::new(u.iter().copied().collect());
        current = model.step(&current, &input, k0 + h)?;
    }
    Ok(lin)
}

fn clamp_all(m: &mut DMatrix<f64>, v_max: f64) {
    m.iter_mut().for_each(|v| *v = v.clamp(0.0, v_max));
}

/// GN-LQR: returns the speeds to apply at time index `k` for every platoon in
/// `state` (the caller passes only active platoons).
pub fn gn_lqr(model: &Model, state: &TrafficState, cfg: &LqrConfig, k: usize) -> Result<LqrOutcome> {
    cfg.validate(model.fd.rho_c, model.fd.v_f)?;
    let nu = state.platoons.len();
    if nu == 0 || state.active_count() == 0 {
        return Ok(LqrOutcome::empty());
    }
    let v_f = model.fd.v_f;
    let ns = model.grid.n_segments;
    let horizon = cfg.horizon;
    let q = cfg.weights.q_matrix(ns, nu);
    let r = cfg.weights.r_matrix(nu);

    let start = equilibrium_start(state, cfg.eq_density);
    let x0 = state.to_vector();
    let x_star0 = start.to_vector();
    let mut u_star = DMatrix::from_element(nu, horizon, cfg.eq_speed);
    let mut delta_u = DMatrix::zeros(nu, horizon);

    let mut iterations = 0;
    loop {
        let lin = roll_and_linearize(model, &start, &u_star, k)?;
        let mut dx = Vec::with_capacity(horizon + 1);
        dx.push(&x0 - &x_star0);
        for h in 0..horizon {
            let next = &lin[h].a_hat * &dx[h] + &lin[h].b_hat * delta_u.column(h);
            dx.push(next);
        }
        let gains = riccati_backward(&lin, &q, &r)?;
        for (h, (k_h, dx_h)) in gains.k_mats.iter().zip(&dx).enumerate() {
            delta_u.set_column(h, &-(k_h * dx_h));
        }
        let linearized_at = u_star.clone();
        let mut u_new = &u_star + &delta_u;
        clamp_all(&mut u_new, v_f);
        u_star = u_new;
        iterations += 1;

        let done = delta_u.norm() < cfg.tol || iterations >= cfg.max_iters;
        if done {
            let u0_star: DVector<f64> = linearized_at.column(0).into_owned();
            let input = feedback(&gains.k_mats[0], &x0, &x_star0, &u0_star, v_f)?;
            return Ok(LqrOutcome {
                input,
                gains,
                iterations,
                sequence: u_star,
            });
        }
    }
}

/// GN-LQRP: `u_prev` holds the speeds applied at the previous step for the
/// platoons in `state`.
pub fn gn_lqrp(
    model: &Model,
    state: &TrafficState,
    cfg: &LqrConfig,
    u_prev: &ControlInput,
    k: usize,
) -> Result<LqrOutcome> {
    cfg.validate(model.fd.rho_c, model.fd.v_f)?;
    let nu = state.platoons.len();
    if nu == 0 || state.active_count() == 0 {
        return Ok(LqrOutcome::empty());
    }
    if u_prev.len() != nu {
        return Err(Error::Dimension {
            context: "previous input",
            expected: nu,
            got: u_prev.len(),
        });
    }
    let v_f = model.fd.v_f;
    let ns = model.grid.n_segments;
    let n = ns + nu;
    let horizon = cfg.horizon;
    let q = cfg.weights.q_matrix(ns, nu);
    let r = cfg.weights.r_matrix(nu);
    let r_prime = cfg.weights.rprime_matrix(nu);

    let start = equilibrium_start(state, cfg.eq_density);
    let x0 = state.to_vector();
    let x_star0 = start.to_vector();
    let u_o = DVector::from_vec(u_prev.speeds.clone());
    let mut u_star = DMatrix::from_element(nu, horizon, cfg.eq_speed);
    let mut delta_u_prime = DMatrix::zeros(nu, horizon);

    let mut iterations = 0;
    loop {
        let lin = roll_and_linearize(model, &start, &u_star, k)?;
        let mut aug_a = Vec::with_capacity(horizon);
        let mut aug_b = Vec::with_capacity(horizon);
        let mut q_prime = DMatrix::zeros(0, 0);
        for lin in &lin {
            let (a, b, qa) = augment(lin, &q, &r)?;
            aug_a.push(a);
            aug_b.push(b);
            q_prime = qa;
        }

        // The equilibrium input preceding the horizon is taken as u*[0], so
        // the equilibrium speed change at k = 0 is zero.
        let mut dx = Vec::with_capacity(horizon + 1);
        let mut dx0 = DVector::zeros(n + nu);
        dx0.rows_mut(0, n).copy_from(&(&x0 - &x_star0));
        dx0.rows_mut(n, nu).copy_from(&(&u_o - u_star.column(0)));
        dx.push(dx0);
        for h in 0..horizon {
            let next = &aug_a[h] * &dx[h] + &aug_b[h] * delta_u_prime.column(h);
            dx.push(next);
        }

        let aug_lin: Vec<LinearizedDynamics> = aug_a
            .into_iter()
            .zip(aug_b)
            .map(|(a_hat, b_hat)| LinearizedDynamics { a_hat, b_hat })
            .collect();
        let gains = riccati_backward(&aug_lin, &q_prime, &r_prime).map_err(|e| match e {
            Error::Singular(_) if cfg.weights.rprime_weight <= 0.0 => Error::SingularRatePenalty,
            other => other,
        })?;
        for (h, (k_h, dx_h)) in gains.k_mats.iter().zip(&dx).enumerate() {
            delta_u_prime.set_column(h, &-(k_h * dx_h));
        }

        let mut u_prime_star = DMatrix::zeros(nu, horizon);
        for h in 1..horizon {
            let diff = u_star.column(h) - u_star.column(h - 1);
            u_prime_star.set_column(h, &diff);
        }
        let u_prime = &u_prime_star + &delta_u_prime;

        let mut u_new = DMatrix::zeros(nu, horizon);
        let mut running = u_o.clone();
        for h in 0..horizon {
            running += u_prime.column(h);
            u_new.set_column(h, &running);
        }
        clamp_all(&mut u_new, v_f);
        let delta_u = &u_new - &u_star;
        u_star = u_new;
        iterations += 1;

        if delta_u.norm() < cfg.tol || iterations >= cfg.max_iters {
            let input = ControlInput::new(u_star.column(0).iter().copied().collect());
            return Ok(LqrOutcome {
                input,
                gains,
                iterations,
                sequence: u_star,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(a: f64, b: f64) -> LinearizedDynamics {
        LinearizedDynamics {
            a_hat: DMatrix::from_element(1, 1, a),
            b_hat: DMatrix::from_element(1, 1, b),
        }
    }

    #[test]
    fn scalar_riccati_examples() {
        let q = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        let g = riccati_backward(&[scalar(1.0, 1.0)], &q, &r).unwrap();
        assert_eq!(g.k_mats[0][(0, 0)], 0.0);

        let g = riccati_backward(&[scalar(1.0, 1.0), scalar(1.0, 1.0)], &q, &r).unwrap();
        assert_relative_eq!(g.p_mats[1][(0, 0)], 1.0);
        assert_relative_eq!(g.k_mats[0][(0, 0)], 0.5);
        assert_relative_eq!(g.p_mats[0][(0, 0)], 1.5);
    }

    #[test]
    fn zero_input_matrix_gives_zero_gains() {
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let lin = LinearizedDynamics {
            a_hat: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.9]),
            b_hat: DMatrix::zeros(2, 1),
        };
        let g = riccati_backward(&vec![lin; 4], &q, &r).unwrap();
        assert!(g.k_mats.iter().all(|k| k.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn feedback_examples() {
        let k = DMatrix::from_element(1, 1, 2.0);
        let x = DVector::from_element(1, 61.0);
        let xs = DVector::from_element(1, 59.0);
        let us = DVector::from_element(1, 99.0);
        assert_eq!(feedback(&k, &x, &xs, &us, 100.0).unwrap().speeds, vec![95.0]);
        assert_eq!(feedback(&k, &xs, &xs, &us, 100.0).unwrap().speeds, vec![99.0]);
        let zero = DMatrix::zeros(1, 1);
        assert_eq!(feedback(&zero, &x, &xs, &us, 100.0).unwrap().speeds, vec![99.0]);
        let big = DMatrix::from_element(1, 1, -50.0);
        assert_eq!(feedback(&big, &x, &xs, &us, 100.0).unwrap().speeds, vec![100.0]);
    }

    #[test]
    fn augment_examples() {
        let q = DMatrix::from_element(1, 1, 3.0);
        let r = DMatrix::from_element(1, 1, 2.0);
        let (a, b, qa) = augment(&scalar(1.0, 1.0), &q, &r).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
        assert_eq!(b, DMatrix::from_row_slice(2, 1, &[1.0, 1.0]));
        assert_eq!(qa, DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 2.0]));

        let (a, _, _) = augment(&scalar(0.7, 0.0), &q, &r).unwrap();
        assert_eq!(a[(0, 1)], 0.0);
        assert_eq!(a[(1, 0)], 0.0);
    }

    #[test]
    fn riccati_dimension_mismatch() {
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        assert!(matches!(
            riccati_backward(&[scalar(1.0, 1.0)], &q, &r),
            Err(Error::Dimension { .. })
        ));
        assert!(riccati_backward(&[], &q, &r).is_err());
    }

    #[test]
    fn zero_rate_penalty_is_singular() {
        let q = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        let (a, b, qa) = augment(&scalar(1.0, 1.0), &q, &r).unwrap();
        let lin = LinearizedDynamics { a_hat: a, b_hat: b };
        let err = riccati_backward(&[lin], &qa, &DMatrix::zeros(1, 1)).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = LqrConfig::default();
        assert!(cfg.validate(60.0, 100.0).is_ok());
        cfg.eq_density = 60.0;
        assert!(cfg.validate(60.0, 100.0).is_err());
        let mut cfg = LqrConfig::default();
        cfg.weights.r_weight = 0.0;
        assert!(cfg.validate(60.0, 100.0).is_err());
    }
}
