//! PI and MPC reference controllers.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ctm::{ControlInput, Grid, Model, TrafficState};
use crate::error::{invalid, Result};
use crate::optim::nelder_mead_box;
use crate::sim::{run, ControllerSpec, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiConfig {
    pub kp: f64,
    pub ki: f64,
    /// Density set-point (veh/km).
    pub set_point: f64,
    /// Only segments denser than this enter the average (veh/km).
    pub threshold: f64,
    pub lower_bound: Option<f64>,
    pub bottleneck_segment: usize,
}

impl Default for PiConfig {
    fn default() -> Self {
        Self {
            kp: 0.7944,
            ki: 0.1091,
            set_point: 60.0,
            threshold: 60.0,
            lower_bound: Some(60.0),
            bottleneck_segment: 12,
        }
    }
}

impl PiConfig {
    pub fn validate(&self, rho_m: f64, v_f: f64, n_segments: usize) -> Result<()> {
        if !(self.kp.is_finite() && self.ki.is_finite()) {
            return Err(invalid("pi gains", "must be finite"));
        }
        if !(self.set_point > 0.0 && self.set_point <= rho_m) {
            return Err(invalid("set_point", format!("must lie in (0, {rho_m}]")));
        }
        if !(self.threshold >= 0.0) {
            return Err(invalid("threshold", "must be non-negative"));
        }
        if let Some(lb) = self.lower_bound {
            if !(0.0..=v_f).contains(&lb) {
                return Err(invalid("lower_bound", format!("must lie in [0, {v_f}]")));
            }
        }
        if self.bottleneck_segment >= n_segments {
            return Err(invalid("bottleneck_segment", format!("must be below {n_segments}")));
        }
        Ok(())
    }
}

/// Controller memory of one platoon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiMemory {
    pub e_prev: f64,
    pub v_prev: f64,
}

/// Per-platoon PI memory keyed by platoon id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PiState {
    memory: HashMap<usize, PiMemory>,
}

impl PiState {
    /// Memory of platoon `id`, created at entry with `e = 0`, `v̄ = v_f`.
    pub fn get(&mut self, id: usize, v_f: f64) -> PiMemory {
        *self.memory.entry(id).or_insert(PiMemory {
            e_prev: 0.0,
            v_prev: v_f,
        })
    }

    pub fn set(&mut self, id: usize, memory: PiMemory) {
        self.memory.insert(id, memory);
    }

    /// Drops entries of platoons that are no longer active.
    pub fn retain_active(&mut self, state: &TrafficState) {
        self.memory
            .retain(|id, _| state.platoons.iter().any(|p| p.active && p.id == *id));
    }

    pub fn len(&self) -> usize {
        self.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.is_empty()
    }
}

/// `ρ̂ − ρ̄_j` over the congested segments strictly downstream of platoon `j`
/// up to and including the bottleneck; `None` when no segment qualifies.
pub fn pi_error(j: usize, state: &TrafficState, cfg: &PiConfig, grid: &Grid) -> Option<f64> {
    let p = state.platoons.get(j).filter(|p| p.active)?;
    let seg = grid.segment_of(p.position);
    let last = cfg.bottleneck_segment.min(state.densities.len().saturating_sub(1));
    if seg >= last {
        return None;
    }
    let congested: Vec<f64> = state.densities[seg + 1..=last]
        .iter()
        .copied()
        .filter(|r| *r > cfg.threshold)
        .collect();
    if congested.is_empty() {
        return None;
    }
    let mean = congested.iter().sum::<f64>() / congested.len() as f64;
    Some(cfg.set_point - mean)
}

/// PI update `u = v̄_prev + K_P (e − e_prev) + K_I e`, projected into
/// `[lower_bound or 0, v_f]`. Holds `v̄_prev` when the error is undefined.
pub fn pi_control(error: Option<f64>, memory: &PiMemory, cfg: &PiConfig, v_f: f64) -> f64 {
    let raw = match error {
        Some(e) => memory.v_prev + cfg.kp * (e - memory.e_prev) + cfg.ki * e,
        None => memory.v_prev,
    };
    raw.clamp(cfg.lower_bound.unwrap_or(0.0), v_f)
}

/// Fitted gains and the MS they achieve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiFit {
    pub kp: f64,
    pub ki: f64,
    pub ms: f64,
    pub ms_at_init: f64,
    pub evaluations: usize,
}

/// Maximizes the simulated MS over the gain box with a bounded simplex search
/// started at `init`. Runs that fail or produce no MS score as `−∞`.
pub fn pi_gain_fit(scenario: &Scenario, bounds: (f64, f64), init: (f64, f64), max_evals: usize) -> Result<PiFit> {
    let base = match &scenario.controller {
        ControllerSpec::Pi(cfg) => *cfg,
        _ => return Err(invalid("controller", "gain fitting needs a PI scenario")),
    };
    if !(bounds.0 < bounds.1) {
        return Err(invalid("bounds", "lower bound must be below upper bound"));
    }
    let ms_of = |kp: f64, ki: f64| -> f64 {
        let mut sc = scenario.clone();
        sc.controller = ControllerSpec::Pi(PiConfig { kp, ki, ..base });
        run(&sc).ok().and_then(|r| r.metrics.ms).unwrap_or(f64::NEG_INFINITY)
    };
    let ms_at_init = ms_of(init.0, init.1);
    let best = nelder_mead_box(
        |x| -ms_of(x[0], x[1]),
        &[init.0, init.1],
        &[bounds.0, bounds.0],
        &[bounds.1, bounds.1],
        max_evals,
        1e-9,
    );
    let (kp, ki, ms) = if -best.value > ms_at_init {
        (best.x[0], best.x[1], -best.value)
    } else {
        (init.0, init.1, ms_at_init)
    };
    Ok(PiFit {
        kp,
        ki,
        ms,
        ms_at_init,
        evaluations: best.evaluations + 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Prediction horizon `N_P` (steps).
    pub horizon: usize,
    pub betas: (f64, f64, f64),
    pub u_min: f64,
    pub u_max: f64,
    pub bottleneck_segment: usize,
    /// Maximum objective evaluations (rollouts) per control step.
    pub eval_budget: usize,
    /// Use the subtracted bottleneck-deviation term instead of the penalty.
    pub literal_sign: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            betas: (0.1, 0.1, 0.8),
            u_min: 60.0,
            u_max: 100.0,
            bottleneck_segment: 12,
            eval_budget: 200,
            literal_sign: false,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self, v_f: f64, n_segments: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        let (b1, b2, b3) = self.betas;
        if !(b1 >= 0.0 && b2 >= 0.0 && b3 >= 0.0) {
            return Err(invalid("betas", "must be non-negative"));
        }
        if !(0.0 <= self.u_min && self.u_min <= self.u_max && self.u_max <= v_f) {
            return Err(invalid("speed bounds", format!("need 0 <= u_min <= u_max <= {v_f}")));
        }
        if self.bottleneck_segment >= n_segments {
            return Err(invalid("bottleneck_segment", format!("must be below {n_segments}")));
        }
        if self.eval_budget == 0 {
            return Err(invalid("eval_budget", "must be at least 1"));
        }
        Ok(())
    }

    fn beta3_sign(&self) -> f64 {
        if self.literal_sign {
            -1.0
        } else {
            1.0
        }
    }
}

/// Rolls the dynamics forward under `speeds` (one column per step) and scores
/// the states `h = 0..=N_P`. The flux at the last state uses the last column.
pub fn mpc_objective(
    model: &Model,
    state: &TrafficState,
    speeds: &DMatrix<f64>,
    cfg: &MpcConfig,
    k: usize,
) -> Result<f64> {
    let (b1, b2, b3) = cfg.betas;
    let sign = cfg.beta3_sign();
    let ib = cfg.bottleneck_segment;
    let dt = model.grid.dt;
    let len = model.grid.seg_length;
    let rho_c = model.fd.rho_c;
    let n_u = state.platoons.len();
    if speeds.nrows() != n_u || speeds.ncols() != cfg.horizon {
        return Err(crate::Error::Dimension {
            context: "MPC speed sequence",
            expected: n_u * cfg.horizon,
            got: speeds.len(),
        });
    }

    let mut current = state.clone();
    let mut total = 0.0;
    for h in 0..=cfg.horizon {
        let col = h.min(cfg.horizon - 1);
        let input = ControlInput::new(speeds.column(col).iter().copied().collect());
        let tr = model.transition(&current, &input, k + h)?;
        let vehicles: f64 = current.densities.iter().sum::<f64>() * len;
        total += b1 * dt * vehicles - b2 * tr.fluxes[ib + 1] + sign * b3 * (current.densities[ib] - rho_c).abs();
        if h < cfg.horizon {
            current = model.apply(&current, &tr, k + h);
        }
    }
    Ok(total)
}

/// Optimized speed sequence and the first-step input.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcOutcome {
    pub input: ControlInput,
    pub sequence: DMatrix<f64>,
    pub objective: f64,
    pub baseline_objective: f64,
    pub evaluations: usize,
}

/// Box-constrained minimization of [`mpc_objective`] by projected coordinate
/// descent. `warm` is the previous solution already aligned to the current
/// platoons; it is shifted by one step before use.
pub fn mpc_control(
    model: &Model,
    state: &TrafficState,
    cfg: &MpcConfig,
    warm: Option<&DMatrix<f64>>,
    k: usize,
) -> Result<MpcOutcome> {
    cfg.validate(model.fd.v_f, model.grid.n_segments)?;
    let n_u = state.platoons.len();
    let np = cfg.horizon;
    if n_u == 0 || state.active_count() == 0 {
        return Ok(MpcOutcome {
            input: ControlInput::default(),
            sequence: DMatrix::zeros(n_u, np),
            objective: 0.0,
            baseline_objective: 0.0,
            evaluations: 0,
        });
    }
    let (lo, hi) = (cfg.u_min, cfg.u_max);
    let mut evals = 0usize;
    let score = |u: &DMatrix<f64>, evals: &mut usize| -> Result<f64> {
        *evals += 1;
        mpc_objective(model, state, u, cfg, k)
    };

    let baseline = DMatrix::from_element(n_u, np, hi);
    let baseline_objective = score(&baseline, &mut evals)?;
    let mut best = baseline.clone();
    let mut best_val = baseline_objective;

    if let Some(prev) = warm.filter(|w| w.nrows() == n_u && w.ncols() == np) {
        let shifted = DMatrix::from_fn(n_u, np, |r, c| prev[(r, (c + 1).min(np - 1))].clamp(lo, hi));
        if shifted != best && evals < cfg.eval_budget {
            let v = score(&shifted, &mut evals)?;
            if v < best_val {
                best = shifted;
                best_val = v;
            }
        }
    }

    // Coordinates: whole-row offsets per platoon first, then single entries.
    let mut step = 0.5 * (hi - lo);
    let min_step = 1e-3 * (hi - lo).max(1e-9);
    let active: Vec<usize> = (0..n_u).filter(|&j| state.platoons[j].active).collect();
    'outer: while step > min_step && evals < cfg.eval_budget {
        let mut improved = false;
        for &j in &active {
            for dir in [-1.0, 1.0] {
                if evals >= cfg.eval_budget {
                    break 'outer;
                }
                let mut cand = best.clone();
                cand.row_mut(j)
                    .iter_mut()
                    .for_each(|v| *v = (*v + dir * step).clamp(lo, hi));
                if cand == best {
                    continue;
                }
                let v = score(&cand, &mut evals)?;
                if v < best_val {
                    best = cand;
                    best_val = v;
                    improved = true;
                    break;
                }
            }
        }
        for &j in &active {
            for h in 0..np {
                for dir in [-1.0, 1.0] {
                    if evals >= cfg.eval_budget {
                        break 'outer;
                    }
                    let mut cand = best.clone();
                    cand[(j, h)] = (cand[(j, h)] + dir * step).clamp(lo, hi);
                    if cand == best {
                        continue;
                    }
                    let v = score(&cand, &mut evals)?;
                    if v < best_val {
                        best = cand;
                        best_val = v;
                        improved = true;
                        break;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }

    Ok(MpcOutcome {
        input: ControlInput::new(best.column(0).iter().copied().collect()),
        sequence: best,
        objective: best_val,
        baseline_objective,
        evaluations: evals,
    })
}
