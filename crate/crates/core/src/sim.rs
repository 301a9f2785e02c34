//! Closed-loop scenario runs and evaluation metrics.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baseline::{mpc_control, pi_control, pi_error, MpcConfig, PiConfig, PiMemory, PiState};
use crate::ctm::{
    BoundaryConditions, CapacityOverride, ControlInput, FundamentalDiagram, Grid, Model, OverrideKind, Platoon,
    Profile, TrafficState, Transition,
};
use crate::error::{invalid, Error, Result};
use crate::lqr::{gn_lqr, gn_lqrp, LqrConfig, LqrOutcome};

/// Controller choice with its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerSpec {
    /// Every platoon commanded at `v_f`.
    None,
    GnLqr(LqrConfig),
    GnLqrp(LqrConfig),
    Pi(PiConfig),
    Mpc(MpcConfig),
}

impl ControllerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerSpec::None => "none",
            ControllerSpec::GnLqr(_) => "gn_lqr",
            ControllerSpec::GnLqrp(_) => "gn_lqrp",
            ControllerSpec::Pi(_) => "pi",
            ControllerSpec::Mpc(_) => "mpc",
        }
    }

    /// Default settings for a controller name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "none" => ControllerSpec::None,
            "gn_lqr" => ControllerSpec::GnLqr(LqrConfig::default()),
            "gn_lqrp" => ControllerSpec::GnLqrp(LqrConfig::default()),
            "pi" => ControllerSpec::Pi(PiConfig::default()),
            "mpc" => ControllerSpec::Mpc(MpcConfig::default()),
            other => {
                return Err(invalid(
                    "controller",
                    format!("unknown controller `{other}`; expected one of none, gn_lqr, gn_lqrp, pi, mpc"),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoBottleneck,
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub grid: Grid,
    pub fd: FundamentalDiagram,
    pub bc: BoundaryConditions,
    pub initial_density: f64,
    /// Entry steps, strictly increasing.
    pub platoon_schedule: Vec<usize>,
    /// Platoon length (km).
    pub platoon_length: f64,
    pub s_min: f64,
    pub controller: ControllerSpec,
}

/// Inflow profile: 1900 veh/hr, ramp to 5490 veh/hr over 0.355 hr, plateau,
/// ramp back to 1900 veh/hr over the final 0.26 hr of the 2 hr horizon.
pub fn reference_demand() -> Profile {
    Profile::Trapezoid {
        base: 1900.0,
        peak: 5490.0,
        ramp_up_hours: 0.355,
        ramp_down_hours: 0.26,
        total_hours: 2.0,
    }
}

/// Eight-kilometre stretch, 16 segments, 720 steps of 10 s, platoons every
/// 15 steps from step 60 to 600. The bottleneck variant lowers the capacity
/// of segment index 12 to 5400 veh/hr during the first hour.
pub fn reference_scenario(variant: Variant) -> Scenario {
    let grid = Grid::new(16, 0.5, 10.0, 720).expect("reference grid is valid");
    let capacity_overrides = match variant {
        Variant::NoBottleneck => Vec::new(),
        Variant::Bottleneck => vec![CapacityOverride {
            segment: 12,
            capacity: 5400.0,
            from_step: 0,
            until_step: 360,
            kind: OverrideKind::Capacity,
        }],
    };
    Scenario {
        grid,
        fd: FundamentalDiagram::default(),
        bc: BoundaryConditions {
            upstream_demand: reference_demand(),
            downstream_supply: Profile::Constant { value: 6000.0 },
            capacity_overrides,
        },
        initial_density: 20.0,
        platoon_schedule: (60..=600).step_by(15).collect(),
        platoon_length: 0.0045,
        s_min: 10.0,
        controller: ControllerSpec::None,
    }
}

impl Scenario {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.fd, self.grid, self.bc.clone(), self.s_min)
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        if !(0.0..=self.fd.rho_m).contains(&self.initial_density) {
            return Err(Error::DensityOutOfDomain {
                value: self.initial_density,
                max: self.fd.rho_m,
            });
        }
        if self.platoon_schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("platoon_schedule", "entry steps must be strictly increasing"));
        }
        if self.platoon_schedule.iter().any(|&k| k >= self.grid.n_steps) {
            return Err(invalid(
                "platoon_schedule",
                format!("entry steps must be below {}", self.grid.n_steps),
            ));
        }
        if !(self.platoon_length >= 0.0) {
            return Err(invalid("platoon_length", "must be non-negative"));
        }
        let (v_f, n) = (self.fd.v_f, self.grid.n_segments);
        match &self.controller {
            ControllerSpec::None => Ok(()),
            ControllerSpec::GnLqr(c) | ControllerSpec::GnLqrp(c) => c.validate(self.fd.rho_c, v_f),
            ControllerSpec::Pi(c) => c.validate(self.fd.rho_m, v_f, n),
            ControllerSpec::Mpc(c) => c.validate(v_f, n),
        }
    }

    pub fn with_controller(mut self, controller: ControllerSpec) -> Self {
        self.controller = controller;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub platoon_id: usize,
    /// Position at the start of the step (km).
    pub position: f64,
    pub commanded: f64,
    pub realized: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Total travel time (veh·hr).
    pub ttt: f64,
    /// Total travel distance (veh·km).
    pub ttd: f64,
    /// Mean speed (km/hr); absent when TTT is zero.
    pub ms: Option<f64>,
    /// Mean controller wall time per invocation (s); absent without invocations.
    pub act: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Densities at the start of each step, `N_T × N_L`.
    pub density_history: DMatrix<f64>,
    /// Interface fluxes of each step, `N_T × (N_L + 1)`.
    pub flux_history: DMatrix<f64>,
    pub trajectories: Vec<TrajectoryPoint>,
    pub metrics: Metrics,
    pub controller_timings: Vec<f64>,
    /// Smallest eigenvalue over every Riccati matrix computed during the run.
    pub min_p_eigenvalue: Option<f64>,
}

impl RunResult {
    /// Largest change in commanded speed between consecutive steps of any
    /// platoon.
    pub fn max_speed_change(&self) -> f64 {
        let mut last: HashMap<usize, f64> = HashMap::new();
        let mut worst = 0.0_f64;
        for p in &self.trajectories {
            if let Some(prev) = last.insert(p.platoon_id, p.commanded) {
                worst = worst.max((p.commanded - prev).abs());
            }
        }
        worst
    }

    /// Trajectory points of one platoon in step order.
    pub fn platoon(&self, id: usize) -> Vec<TrajectoryPoint> {
        self.trajectories
            .iter()
            .filter(|p| p.platoon_id == id)
            .copied()
            .collect()
    }
}

/// TTT and TTD from the recorded histories. Row `k` of both matrices belongs
/// to step `k`; TTD counts the outflow of every segment.
pub fn metrics(density_history: &DMatrix<f64>, flux_history: &DMatrix<f64>, grid: &Grid, timings: &[f64]) -> Metrics {
    let scale = grid.dt * grid.seg_length;
    let ttt = scale * density_history.sum();
    let ttd = if flux_history.ncols() > 1 {
        scale * flux_history.columns(1, flux_history.ncols() - 1).sum()
    } else {
        0.0
    };
    let ms = (ttt > 0.0).then(|| ttd / ttt);
    let act = (!timings.is_empty()).then(|| timings.iter().sum::<f64>() / timings.len() as f64);
    Metrics { ttt, ttd, ms, act }
}

/// Controller with the memory it carries between steps.
struct Runtime {
    spec: ControllerSpec,
    applied: HashMap<usize, f64>,
    pi: PiState,
    mpc_warm: HashMap<usize, Vec<f64>>,
    min_eig: Option<f64>,
}

impl Runtime {
    fn new(spec: ControllerSpec) -> Self {
        Self {
            spec,
            applied: HashMap::new(),
            pi: PiState::default(),
            mpc_warm: HashMap::new(),
            min_eig: None,
        }
    }

    fn track_eigen(&mut self, out: &LqrOutcome) {
        if out.gains.p_mats.is_empty() {
            return;
        }
        let e = out.gains.min_p_eigenvalue();
        self.min_eig = Some(self.min_eig.map_or(e, |m: f64| m.min(e)));
    }

    /// Commanded speeds; `None` when no controller runs this step.
    fn command(&mut self, model: &Model, state: &TrafficState, k: usize) -> Result<(ControlInput, Option<f64>)> {
        let v_f = model.fd.v_f;
        let n = state.platoons.len();
        if n == 0 {
            return Ok((ControlInput::default(), None));
        }
        let started = Instant::now();
        let (input, extra) = match &self.spec {
            ControllerSpec::None => return Ok((ControlInput::uniform(n, v_f), None)),
            ControllerSpec::GnLqr(cfg) => {
                let out = gn_lqr(model, state, cfg, k)?;
                (out.input.clone(), Some(out))
            }
            ControllerSpec::GnLqrp(cfg) => {
                let prev = ControlInput::new(
                    state
                        .platoons
                        .iter()
                        .map(|p| self.applied.get(&p.id).copied().unwrap_or(v_f))
                        .collect(),
                );
                let out = gn_lqrp(model, state, cfg, &prev, k)?;
                (out.input.clone(), Some(out))
            }
            ControllerSpec::Pi(cfg) => {
                let cfg = *cfg;
                let speeds = (0..n)
                    .map(|j| {
                        let mem = self.pi.get(state.platoons[j].id, v_f);
                        pi_control(pi_error(j, state, &cfg, &model.grid), &mem, &cfg, v_f)
                    })
                    .collect();
                (ControlInput::new(speeds), None)
            }
            ControllerSpec::Mpc(cfg) => {
                let warm = self.mpc_warm_matrix(state, cfg.horizon);
                let out = mpc_control(model, state, cfg, warm.as_ref(), k)?;
                for (j, p) in state.platoons.iter().enumerate() {
                    self.mpc_warm
                        .insert(p.id, out.sequence.row(j).iter().copied().collect());
                }
                (out.input, None)
            }
        };
        let elapsed = started.elapsed().as_secs_f64();
        if let Some(out) = extra {
            self.track_eigen(&out);
        }
        Ok((input, Some(elapsed)))
    }

    fn mpc_warm_matrix(&self, state: &TrafficState, horizon: usize) -> Option<DMatrix<f64>> {
        if self.mpc_warm.is_empty() {
            return None;
        }
        let n = state.platoons.len();
        let mut m = DMatrix::zeros(n, horizon);
        for (j, p) in state.platoons.iter().enumerate() {
            let row = self.mpc_warm.get(&p.id)?;
            for h in 0..horizon {
                m[(j, h)] = row[h.min(row.len() - 1)];
            }
        }
        Some(m)
    }

    fn observe(&mut self, model: &Model, state: &TrafficState, input: &ControlInput, tr: &Transition) {
        for (j, p) in state.platoons.iter().enumerate() {
            self.applied.insert(p.id, input.speeds[j]);
        }
        if let ControllerSpec::Pi(cfg) = &self.spec {
            for (j, p) in state.platoons.iter().enumerate() {
                // An undefined error restarts the proportional term from zero.
                let e = pi_error(j, state, cfg, &model.grid).unwrap_or(0.0);
                self.pi.set(
                    p.id,
                    PiMemory {
                        e_prev: e,
                        v_prev: tr.speeds[j],
                    },
                );
            }
        }
    }

    fn forget_inactive(&mut self, state: &TrafficState) {
        let live = |id: &usize| state.platoons.iter().any(|p| p.id == *id);
        self.applied.retain(|id, _| live(id));
        self.mpc_warm.retain(|id, _| live(id));
        self.pi.retain_active(state);
    }
}

/// Runs the closed loop for `N_T` steps.
pub fn run(scenario: &Scenario) -> Result<RunResult> {
    scenario.validate()?;
    let model = scenario.model()?;
    let grid = model.grid;
    let (n_t, n_l) = (grid.n_steps, grid.n_segments);
    let mut state = TrafficState::uniform(n_l, scenario.initial_density);
    let mut runtime = Runtime::new(scenario.controller.clone());

    let mut density_history = DMatrix::zeros(n_t, n_l);
    let mut flux_history = DMatrix::zeros(n_t, n_l + 1);
    let mut trajectories = Vec::new();
    let mut timings = Vec::new();
    let mut schedule = scenario.platoon_schedule.iter().peekable();

    for k in 0..n_t {
        if schedule.next_if(|&&e| e == k).is_some() {
            state.platoons.push(Platoon {
                id: k,
                position: 0.0,
                length: scenario.platoon_length,
                active: true,
                entry_step: k,
            });
        }
        let (input, elapsed) = runtime.command(&model, &state, k).map_err(|e| Error::Controller {
            step: k,
            source: Box::new(e),
        })?;
        timings.extend(elapsed);
        let tr = model.transition(&state, &input, k)?;
        for (j, p) in state.platoons.iter().enumerate() {
            trajectories.push(TrajectoryPoint {
                step: k,
                platoon_id: p.id,
                position: p.position,
                commanded: input.speeds[j],
                realized: tr.speeds[j],
            });
        }
        density_history.row_mut(k).copy_from_slice(&state.densities);
        flux_history.row_mut(k).copy_from_slice(&tr.fluxes);
        runtime.observe(&model, &state, &input, &tr);
        state = model.apply(&state, &tr, k);
        state.platoons.retain(|p| p.active);
        runtime.forget_inactive(&state);
    }

    let metrics = metrics(&density_history, &flux_history, &grid, &timings);
    Ok(RunResult {
        density_history,
        flux_history,
        trajectories,
        metrics,
        controller_timings: timings,
        min_p_eigenvalue: runtime.min_eig,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Horizon,
    Iterations,
    WQ,
    WR,
    WRprime,
}

impl SweepParameter {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "horizon" => SweepParameter::Horizon,
            "iterations" => SweepParameter::Iterations,
            "w_q" => SweepParameter::WQ,
            "w_r" => SweepParameter::WR,
            "w_rprime" => SweepParameter::WRprime,
            other => {
                return Err(invalid(
                    "sweep parameter",
                    format!("unknown `{other}`; expected horizon, iterations, w_q, w_r or w_rprime"),
                ))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::Horizon => "horizon",
            SweepParameter::Iterations => "iterations",
            SweepParameter::WQ => "w_q",
            SweepParameter::WR => "w_r",
            SweepParameter::WRprime => "w_rprime",
        }
    }

    fn apply(&self, cfg: &mut LqrConfig, value: f64) -> Result<()> {
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(invalid(
                    "sweep value",
                    format!("{} needs a positive integer, got {value}", self.name()),
                ))
            }
        };
        match self {
            SweepParameter::Horizon => cfg.horizon = count()?,
            SweepParameter::Iterations => cfg.max_iters = count()?,
            SweepParameter::WQ => cfg.weights.q_weight = value,
            SweepParameter::WR => cfg.weights.r_weight = value,
            SweepParameter::WRprime => cfg.weights.rprime_weight = value,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: Metrics,
}

/// One full run per value of an LQR parameter, in input order.
pub fn sweep(scenario: &Scenario, parameter: SweepParameter, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(invalid("sweep values", "must not be empty"));
    }
    values
        .iter()
        .map(|&value| {
            let mut sc = scenario.clone();
            match &mut sc.controller {
                ControllerSpec::GnLqr(cfg) | ControllerSpec::GnLqrp(cfg) => parameter.apply(cfg, value)?,
                _ => return Err(invalid("controller", "sweeps need gn_lqr or gn_lqrp")),
            }
            let r = run(&sc)?;
            Ok(SweepRow {
                value,
                metrics: r.metrics,
            })
        })
        .collect()
}
