//! Independent oracles shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use platoon_core::ctm::{
    BoundaryConditions, ControlInput, FundamentalDiagram, Grid, Model, Platoon, Profile, TrafficState,
};
use platoon_core::linearization::{jacobian_input, jacobian_state, EquilibriumPoint, LinearizedDynamics, TrafficField};
use platoon_core::lqr::{augment, riccati_backward, AugmentedPoint};
use rand::{Rng, SeedableRng};

const N: usize = 16;
const DEMAND: f64 = 3000.0;
const DOWNSTREAM: f64 = 6000.0;
/// Minimum distance from every kink, in veh/hr, for points to count as
/// smooth. The density step is 0.5 veh/km and slopes are at most 100.
const MARGIN: f64 = 200.0;

pub fn jacobian_model() -> Model {
    let grid = Grid::new(N, 0.5, 10.0, 720).unwrap();
    let bc = BoundaryConditions {
        upstream_demand: Profile::Constant { value: DEMAND },
        downstream_supply: Profile::Constant { value: DOWNSTREAM },
        capacity_overrides: vec![],
    };
    Model::new(FundamentalDiagram::default(), grid, bc, 10.0).unwrap()
}

/// Value and derivatives of one branch of `min(a, b)`.
struct Branch {
    value: f64,
    d_rho: f64,
    d_u: f64,
}

fn pick(a: Branch, b: Branch) -> Option<Branch> {
    if (a.value - b.value).abs() < MARGIN {
        None
    } else if a.value < b.value {
        Some(a)
    } else {
        Some(b)
    }
}

/// Sending function of segment `i` and its derivatives in `rho_i` and in the
/// platoon speed `u` (when the platoon sits in `i`).
fn sending(fd: &FundamentalDiagram, rho: f64, speed: Option<f64>) -> Option<Branch> {
    if (rho - fd.rho_c).abs() < 2.0 {
        return None;
    }
    let (cap, cap_slope) = if rho < fd.rho_c {
        (fd.q_cap, 0.0)
    } else {
        let slope = fd.q_cap * (fd.alpha - 1.0) / (fd.rho_m - fd.rho_c);
        (fd.q_cap + slope * (rho - fd.rho_c), slope)
    };
    let v = speed.unwrap_or(fd.v_f);
    let free = Branch {
        value: v * rho,
        d_rho: v,
        d_u: if speed.is_some() { rho } else { 0.0 },
    };
    pick(
        free,
        Branch {
            value: cap,
            d_rho: cap_slope,
            d_u: 0.0,
        },
    )
}

/// Analytic `A_f` and `B_f` for a single platoon sitting well inside
/// `seg`, or `None` if the point lies near a kink.
pub fn analytic(fd: &FundamentalDiagram, rho: &[f64], seg: usize, speed: f64) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let n = rho.len();
    // Interface fluxes as (d/d rho_upstream, d/d rho_downstream, d/du).
    let mut flux = Vec::with_capacity(n + 1);
    let s1 = fd.w_c * (fd.rho_m - rho[0]);
    let upstream = pick(
        Branch {
            value: DEMAND,
            d_rho: 0.0,
            d_u: 0.0,
        },
        Branch {
            value: s1,
            d_rho: -fd.w_c,
            d_u: 0.0,
        },
    )?;
    flux.push((0.0, upstream.d_rho, 0.0));
    for i in 0..n {
        let d = sending(fd, rho[i], (i == seg).then_some(speed))?;
        let (receiving, slope) = if i + 1 < n {
            (fd.w_c * (fd.rho_m - rho[i + 1]), -fd.w_c)
        } else {
            (DOWNSTREAM, 0.0)
        };
        if (d.value - receiving).abs() < MARGIN {
            return None;
        }
        if d.value < receiving {
            flux.push((d.d_rho, 0.0, d.d_u));
        } else {
            flux.push((0.0, slope, 0.0));
        }
    }
    let mut a = DMatrix::zeros(n + 1, n + 1);
    let mut b = DMatrix::zeros(n + 1, 1);
    // Interface i sits between segment i-1 and segment i.
    for (iface, &(d_up, d_down, d_u)) in flux.iter().enumerate() {
        for (row, sign) in [(iface, 1.0), (iface.wrapping_sub(1), -1.0)] {
            if row >= n {
                continue;
            }
            if iface > 0 {
                a[(row, iface - 1)] += sign * d_up;
            }
            if iface < n {
                a[(row, iface)] += sign * d_down;
            }
            b[(row, 0)] += sign * d_u;
        }
    }
    // Platoon row: realized speed equals the command away from boundaries.
    b[(n, 0)] = 1.0;
    Some((a, b))
}

pub fn test_system() -> (Vec<LinearizedDynamics>, DMatrix<f64>, DMatrix<f64>) {
    let lin = vec![
        LinearizedDynamics {
            a_hat: DMatrix::from_row_slice(2, 2, &[1.1, 0.2, -0.3, 0.9]),
            b_hat: DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
        },
        LinearizedDynamics {
            a_hat: DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.4, 1.2]),
            b_hat: DMatrix::from_row_slice(2, 1, &[-0.2, 0.7]),
        },
        LinearizedDynamics {
            a_hat: DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.3, 0.6]),
            b_hat: DMatrix::from_row_slice(2, 1, &[1.3, 0.1]),
        },
    ];
    let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let r = DMatrix::from_element(1, 1, 0.7);
    (lin, q, r)
}

/// Minimizes `sum_{h<N} x_hᵀQx_h + u_hᵀRu_h` over the stacked inputs by
/// forming the batch quadratic and solving its normal equations. Returns the
/// optimal inputs and the optimal cost.
pub fn batch_optimum(
    lin: &[LinearizedDynamics],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    x0: &DVector<f64>,
) -> (DVector<f64>, f64) {
    let n = x0.len();
    let horizon = lin.len();
    // x_h = Phi_h x0 + Gamma_h U
    let mut phi = DMatrix::identity(n, n);
    let mut gamma = DMatrix::zeros(n, horizon);
    let mut hess = DMatrix::from_diagonal_element(horizon, horizon, r[(0, 0)]);
    let mut grad = DVector::zeros(horizon);
    let mut constant = 0.0;
    for (h, l) in lin.iter().enumerate() {
        hess += gamma.transpose() * q * &gamma;
        grad += gamma.transpose() * q * (&phi * x0);
        constant += (x0.transpose() * phi.transpose() * q * &phi * x0)[(0, 0)];
        let mut next_gamma = &l.a_hat * &gamma;
        next_gamma.set_column(h, &(next_gamma.column(h) + l.b_hat.column(0)));
        gamma = next_gamma;
        phi = &l.a_hat * phi;
    }
    let u = hess.clone().lu().solve(&(-&grad)).unwrap();
    let cost = (u.transpose() * &hess * &u)[(0, 0)] + 2.0 * grad.dot(&u) + constant;
    (u, cost)
}

/// Largest entry-wise error of the numerical `A_f`, `B_f` against
/// [`analytic`] over `count` random smooth-branch points.
pub fn jacobian_max_error(count: usize, seed: u64) -> f64 {
    let model = jacobian_model();
    let fd = model.fd;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut checked = 0;
    let mut worst = 0.0_f64;
    for _ in 0..100_000 {
        if checked == count {
            return worst;
        }
        let rho: Vec<f64> = (0..N)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    rng.gen_range(2.0..55.0)
                } else {
                    rng.gen_range(65.0..318.0)
                }
            })
            .collect();
        let seg = rng.gen_range(0..N);
        let speed = rng.gen_range(20.0..90.0);
        let Some((a_exact, b_exact)) = analytic(&fd, &rho, seg, speed) else {
            continue;
        };
        let mut state = TrafficState::uniform(N, 0.0);
        state.densities.copy_from_slice(&rho);
        state.platoons.push(Platoon {
            id: 0,
            position: seg as f64 * 0.5 + 0.1,
            length: 0.0045,
            active: true,
            entry_step: 0,
        });
        let eq = EquilibriumPoint {
            x_star: state.to_vector(),
            u_star: DVector::from_element(1, speed),
        };
        let field = TrafficField::new(&model, &state, 0);
        let a_num = jacobian_state(&field, &eq).unwrap();
        let b_num = jacobian_input(&field, &eq).unwrap();
        worst = worst
            .max((&a_num - &a_exact).abs().max())
            .max((&b_num - &b_exact).abs().max());
        checked += 1;
    }
    panic!("could not construct {count} smooth points");
}

/// Largest gap between Riccati feedback inputs and the batch optimum, and
/// between `x0ᵀP[0]x0` and the optimal cost (relative).
pub fn riccati_max_error() -> f64 {
    let (lin, q, r) = test_system();
    let gains = riccati_backward(&lin, &q, &r).unwrap();
    let mut worst = 0.0_f64;
    for x0 in [
        DVector::from_vec(vec![1.0, 0.0]),
        DVector::from_vec(vec![0.0, 1.0]),
        DVector::from_vec(vec![-0.7, 2.3]),
    ] {
        let (u, cost) = batch_optimum(&lin, &q, &r, &x0);
        let value = (x0.transpose() * &gains.p_mats[0] * &x0)[(0, 0)];
        worst = worst.max((value - cost).abs() / cost.abs().max(1.0));
        let mut x = x0.clone();
        for h in 0..lin.len() {
            let uh = -(&gains.k_mats[h] * &x)[0];
            worst = worst.max((uh - u[h]).abs());
            x = &lin[h].a_hat * &x + &lin[h].b_hat * uh;
        }
    }
    worst
}

/// Relative error of the augmented cost and dynamics identities.
pub fn augmented_identity_max_error() -> f64 {
    let (lin, q, r) = test_system();
    let (a, b, qa) = augment(&lin[0], &q, &r).unwrap();
    let r_prime = DMatrix::from_element(1, 1, 30.0);
    let mut worst = 0.0_f64;
    for (x, u_prev, u) in [
        (vec![0.3, -1.2], 0.4, 1.7),
        (vec![12.0, 5.0], -3.0, 2.5),
        (vec![0.0, 0.0], 8.0, -8.0),
    ] {
        let x = DVector::from_vec(x);
        let u_prev = DVector::from_element(1, u_prev);
        let u = DVector::from_element(1, u);
        let point = AugmentedPoint::new(&x, &u_prev, &u);
        let lhs = (point.x_prime.transpose() * &qa * &point.x_prime)[(0, 0)]
            + (point.u_prime.transpose() * &r_prime * &point.u_prime)[(0, 0)];
        let du = &u - &u_prev;
        let rhs = (x.transpose() * &q * &x)[(0, 0)]
            + (u_prev.transpose() * &r * &u_prev)[(0, 0)]
            + (du.transpose() * &r_prime * &du)[(0, 0)];
        worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1.0));

        let next = &a * &point.x_prime + &b * &point.u_prime;
        let x_next = &lin[0].a_hat * &x + &lin[0].b_hat * &u;
        worst = worst.max((next.rows(0, 2) - x_next).norm() / next.norm().max(1.0));
        worst = worst.max((next[2] - u[0]).abs() / u[0].abs().max(1.0));
    }
    worst
}

/// Outcome of stepping random scenarios with random platoon speeds.
pub struct ConservationReport {
    /// Largest relative mismatch between the change in vehicles and the net
    /// boundary inflow over one step.
    pub max_relative_error: f64,
    pub bounds_violations: usize,
}

pub fn conservation(scenarios: usize, seed: u64) -> ConservationReport {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut report = ConservationReport {
        max_relative_error: 0.0,
        bounds_violations: 0,
    };
    let fd = FundamentalDiagram::default();
    for _ in 0..scenarios {
        let n = rng.gen_range(2..20);
        let len = rng.gen_range(0.3..1.0);
        // Any step up to the free-flow traversal time of one segment.
        let dt_seconds = rng.gen_range(1.0..=3600.0 * len / fd.v_f);
        let grid = Grid::new(n, len, dt_seconds, 80).unwrap();
        let bc = BoundaryConditions {
            upstream_demand: Profile::Constant {
                value: rng.gen_range(0.0..7000.0),
            },
            downstream_supply: Profile::Constant {
                value: rng.gen_range(0.0..7000.0),
            },
            capacity_overrides: Vec::new(),
        };
        let model = Model::new(fd, grid, bc, 10.0).unwrap();
        let mut state = TrafficState::uniform(n, 0.0);
        for rho in state.densities.iter_mut() {
            *rho = rng.gen_range(0.0..=fd.rho_m);
        }
        for k in 0..grid.n_steps {
            if rng.gen_bool(0.1) {
                state.platoons.push(Platoon {
                    id: k,
                    position: 0.0,
                    length: 0.0045,
                    active: true,
                    entry_step: k,
                });
            }
            let u = ControlInput::new((0..state.platoons.len()).map(|_| rng.gen_range(0.0..=fd.v_f)).collect());
            let tr = model.transition(&state, &u, k).unwrap();
            let next = model.apply(&state, &tr, k);
            let expected = state.vehicles(grid.seg_length) + grid.dt * (tr.fluxes[0] - tr.fluxes[n]);
            let err = (next.vehicles(grid.seg_length) - expected).abs() / expected.abs().max(1.0);
            report.max_relative_error = report.max_relative_error.max(err);
            report.bounds_violations += next.densities.iter().filter(|r| !(0.0..=fd.rho_m).contains(*r)).count();
            state = next;
        }
    }
    report
}
