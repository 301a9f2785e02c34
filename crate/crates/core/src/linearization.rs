//! Central finite-difference Jacobians of the traffic vector field and the
//! linearized time-varying matrices `Â = I + G A_f`, `B̂ = G B_f`.

use nalgebra::{DMatrix, DVector};

use crate::ctm::{ControlInput, Grid, Model, TrafficState};
use crate::error::{Error, Result};

/// Linearization point of the nonlinear dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumPoint {
    pub x_star: DVector<f64>,
    pub u_star: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedDynamics {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
}

impl LinearizedDynamics {
    pub fn n_states(&self) -> usize {
        self.a_hat.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b_hat.ncols()
    }
}

/// Perturbation sizes for each kind of coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    /// veh/km
    pub density: f64,
    /// km
    pub position: f64,
    /// km/hr
    pub speed: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self {
            density: 0.5,
            position: 0.0005,
            speed: 0.5,
        }
    }
}

/// A vector field `f(x, u)` with per-coordinate step sizes and admissible
/// intervals, as needed by the finite-difference routines.
pub trait VectorField {
    fn n_states(&self) -> usize;
    fn n_inputs(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    fn state_step(&self, m: usize) -> f64;
    fn input_step(&self, m: usize) -> f64;
    fn state_bounds(&self, m: usize) -> (f64, f64);
    fn input_bounds(&self, m: usize) -> (f64, f64);
}

/// The traffic vector field at time index `k`, with the platoon set (and
/// activity flags) taken from `template`.
pub struct TrafficField<'a> {
    pub model: &'a Model,
    pub template: &'a TrafficState,
    pub k: usize,
    pub steps: StepSizes,
}

impl<'a> TrafficField<'a> {
    pub fn new(model: &'a Model, template: &'a TrafficState, k: usize) -> Self {
        Self {
            model,
            template,
            k,
            steps: StepSizes::default(),
        }
    }
}

impl VectorField for TrafficField<'_> {
    fn n_states(&self) -> usize {
        self.template.densities.len() + self.template.platoons.len()
    }

    fn n_inputs(&self) -> usize {
        self.template.platoons.len()
    }

    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let state = self.template.with_vector(x)?;
        let input = ControlInput::new(u.iter().copied().collect());
        self.model.eval_f(&state, &input, self.k)
    }

    fn state_step(&self, m: usize) -> f64 {
        if m < self.template.densities.len() {
            self.steps.density
        } else {
            self.steps.position
        }
    }

    fn input_step(&self, _m: usize) -> f64 {
        self.steps.speed
    }

    fn state_bounds(&self, m: usize) -> (f64, f64) {
        if m < self.template.densities.len() {
            (0.0, self.model.fd.rho_m)
        } else {
            // Occupancy clamps positions outside the stretch, so positions
            // carry no domain restriction.
            (f64::NEG_INFINITY, f64::INFINITY)
        }
    }

    fn input_bounds(&self, _m: usize) -> (f64, f64) {
        (0.0, self.model.fd.v_f)
    }
}

enum Stencil {
    Central(f64),
    Forward(f64),
    Backward(f64),
}

/// Central stencil if `x ± h` fits in `bounds`; else once more with `h / 10`;
/// else a one-sided stencil with the original `h`.
fn stencil(x: f64, h: f64, (lo, hi): (f64, f64), index: usize) -> Result<Stencil> {
    for step in [h, h / 10.0] {
        if x - step >= lo && x + step <= hi {
            return Ok(Stencil::Central(step));
        }
    }
    if x + h <= hi && x >= lo {
        Ok(Stencil::Forward(h))
    } else if x - h >= lo && x <= hi {
        Ok(Stencil::Backward(h))
    } else {
        Err(Error::PerturbationDomain { index })
    }
}

fn difference_column(
    base: &DVector<f64>,
    step: Stencil,
    m: usize,
    f0: Option<&DVector<f64>>,
    eval: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
) -> Result<DVector<f64>> {
    let shifted = |delta: f64| {
        let mut v = base.clone();
        v[m] += delta;
        eval(&v)
    };
    let centre = || match f0 {
        Some(f) => Ok(f.clone()),
        None => eval(base),
    };
    Ok(match step {
        Stencil::Central(h) => (shifted(h)? - shifted(-h)?) / (2.0 * h),
        Stencil::Forward(h) => (shifted(h)? - centre()?) / h,
        Stencil::Backward(h) => (centre()? - shifted(-h)?) / h,
    })
}

/// `A_f = ∂f/∂x` at the equilibrium point, column by column.
pub fn jacobian_state<F: VectorField + ?Sized>(field: &F, eq: &EquilibriumPoint) -> Result<DMatrix<f64>> {
    let n = field.n_states();
    check_point(field, eq)?;
    let mut jac = DMatrix::zeros(n, n);
    let mut f0 = None;
    for m in 0..n {
        let st = stencil(eq.x_star[m], field.state_step(m), field.state_bounds(m), m)?;
        if !matches!(st, Stencil::Central(_)) && f0.is_none() {
            f0 = Some(field.eval(&eq.x_star, &eq.u_star)?);
        }
        let col = difference_column(&eq.x_star, st, m, f0.as_ref(), |x| field.eval(x, &eq.u_star))?;
        jac.set_column(m, &col);
    }
    Ok(jac)
}

/// `B_f = ∂f/∂u` at the equilibrium point.
pub fn jacobian_input<F: VectorField + ?Sized>(field: &F, eq: &EquilibriumPoint) -> Result<DMatrix<f64>> {
    let n = field.n_states();
    let nu = field.n_inputs();
    check_point(field, eq)?;
    let mut jac = DMatrix::zeros(n, nu);
    let mut f0 = None;
    for m in 0..nu {
        let st = stencil(eq.u_star[m], field.input_step(m), field.input_bounds(m), n + m)?;
        if !matches!(st, Stencil::Central(_)) && f0.is_none() {
            f0 = Some(field.eval(&eq.x_star, &eq.u_star)?);
        }
        let col = difference_column(&eq.u_star, st, m, f0.as_ref(), |u| field.eval(&eq.x_star, u))?;
        jac.set_column(m, &col);
    }
    Ok(jac)
}

fn check_point<F: VectorField + ?Sized>(field: &F, eq: &EquilibriumPoint) -> Result<()> {
    if eq.x_star.len() != field.n_states() {
        return Err(Error::Dimension {
            context: "equilibrium state",
            expected: field.n_states(),
            got: eq.x_star.len(),
        });
    }
    if eq.u_star.len() != field.n_inputs() {
        return Err(Error::Dimension {
            context: "equilibrium input",
            expected: field.n_inputs(),
            got: eq.u_star.len(),
        });
    }
    Ok(())
}

/// `Â = I + G A_f`, `B̂ = G B_f` with `G = T diag(I_NL / L, I)`.
pub fn assemble(a_f: &DMatrix<f64>, b_f: &DMatrix<f64>, grid: &Grid) -> Result<LinearizedDynamics> {
    let n = a_f.nrows();
    if a_f.ncols() != n {
        return Err(Error::Dimension {
            context: "A_f columns",
            expected: n,
            got: a_f.ncols(),
        });
    }
    if b_f.nrows() != n {
        return Err(Error::Dimension {
            context: "B_f rows",
            expected: n,
            got: b_f.nrows(),
        });
    }
    if n < grid.n_segments {
        return Err(Error::Dimension {
            context: "state size",
            expected: grid.n_segments,
            got: n,
        });
    }
    let g = DVector::from_fn(n, |r, _| {
        if r < grid.n_segments {
            grid.dt / grid.seg_length
        } else {
            grid.dt
        }
    });
    let mut a_hat = a_f.clone();
    let mut b_hat = b_f.clone();
    for (r, gr) in g.iter().enumerate() {
        a_hat.row_mut(r).scale_mut(*gr);
        b_hat.row_mut(r).scale_mut(*gr);
    }
    for d in 0..n {
        a_hat[(d, d)] += 1.0;
    }
    Ok(LinearizedDynamics { a_hat, b_hat })
}

/// Linearizes the traffic dynamics at `eq` for time index `k`.
pub fn linearize(
    model: &Model,
    template: &TrafficState,
    eq: &EquilibriumPoint,
    k: usize,
) -> Result<LinearizedDynamics> {
    let field = TrafficField::new(model, template, k);
    let a_f = jacobian_state(&field, eq)?;
    let b_f = jacobian_input(&field, eq)?;
    assemble(&a_f, &b_f, &model.grid)
}
