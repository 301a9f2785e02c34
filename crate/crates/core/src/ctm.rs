//! First-order (LWR) highway dynamics discretised with a Godunov / cell
//! transmission scheme, extended with capacity drop and platoons acting as
//! moving bottlenecks.
//!
//! Units: densities veh/km, speeds km/hr, flows veh/hr, lengths km and time
//! in hours internally.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const SECONDS_PER_HOUR: f64 = 3600.0;

/// Triangular fundamental diagram with a linear capacity drop above the
/// critical density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FundamentalDiagram {
    /// Critical density (veh/km).
    pub rho_c: f64,
    /// Jam density (veh/km).
    pub rho_m: f64,
    /// Free-flow speed (km/hr).
    pub v_f: f64,
    /// Congestion wave speed (km/hr).
    pub w_c: f64,
    /// Base segment capacity (veh/hr).
    pub q_cap: f64,
    /// Capacity-drop coefficient; 1 means no drop.
    pub alpha: f64,
}

impl Default for FundamentalDiagram {
    fn default() -> Self {
        Self {
            rho_c: 60.0,
            rho_m: 320.0,
            v_f: 100.0,
            w_c: 38.0,
            q_cap: 6000.0,
            alpha: 0.83,
        }
    }
}

impl FundamentalDiagram {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_c > 0.0 && self.rho_c < self.rho_m) {
            return Err(invalid("rho_c", "require 0 < rho_c < rho_m"));
        }
        if !(self.v_f > 0.0) {
            return Err(invalid("v_f", "must be positive"));
        }
        if !(self.w_c > 0.0) {
            return Err(invalid("w_c", "must be positive"));
        }
        if !(self.q_cap > 0.0) {
            return Err(invalid("q_cap", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn check_density(&self, rho: f64) -> Result<()> {
        if (0.0..=self.rho_m).contains(&rho) {
            Ok(())
        } else {
            Err(Error::DensityOutOfDomain {
                value: rho,
                max: self.rho_m,
            })
        }
    }

    /// Maximum discharge flow of a segment at density `rho`, including the
    /// capacity drop. `cap_override` replaces `q_cap` when present.
    pub fn q_max(&self, rho: f64, cap_override: Option<f64>) -> Result<f64> {
        self.check_density(rho)?;
        let cap = cap_override.unwrap_or(self.q_cap);
        let drop = 1.0 + (self.alpha - 1.0) * (rho - self.rho_c) / (self.rho_m - self.rho_c);
        Ok(cap * drop.min(1.0))
    }

    /// Sending function `min{v_max * rho, q_max(rho)}`.
    pub fn demand(&self, rho: f64, v_max: f64, cap_override: Option<f64>) -> Result<f64> {
        let q = self.q_max(rho, cap_override)?;
        Ok((v_max * rho).min(q))
    }

    /// Receiving function `w_c (rho_m - rho)`.
    pub fn supply(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.w_c * (self.rho_m - rho))
    }
}

/// Space-time discretisation of the stretch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub n_segments: usize,
    /// Segment length (km).
    pub seg_length: f64,
    /// Time step (hr).
    pub dt: f64,
    pub n_steps: usize,
}

impl Grid {
    pub fn new(n_segments: usize, seg_length: f64, dt_seconds: f64, n_steps: usize) -> Result<Self> {
        if n_segments == 0 {
            return Err(invalid("n_segments", "need at least one segment"));
        }
        if n_steps == 0 {
            return Err(invalid("n_steps", "need at least one step"));
        }
        if !(seg_length > 0.0) {
            return Err(invalid("seg_length", "must be positive"));
        }
        if !(dt_seconds > 0.0) {
            return Err(invalid("dt", "must be positive"));
        }
        Ok(Self {
            n_segments,
            seg_length,
            dt: dt_seconds / SECONDS_PER_HOUR,
            n_steps,
        })
    }

    pub fn dt_seconds(&self) -> f64 {
        self.dt * SECONDS_PER_HOUR
    }

    pub fn stretch_length(&self) -> f64 {
        self.n_segments as f64 * self.seg_length
    }

    /// `T <= L / v_f`.
    pub fn check_cfl(&self, fd: &FundamentalDiagram) -> Result<()> {
        let limit = self.seg_length / fd.v_f;
        if self.dt > limit * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                dt_s: self.dt_seconds(),
                limit_s: limit * SECONDS_PER_HOUR,
            });
        }
        Ok(())
    }

    /// Segment holding `position`. Segment `i` spans `(i L, (i+1) L]`, with
    /// the entry point 0 assigned to the first segment; positions past the
    /// end map to the last segment.
    pub fn segment_of(&self, position: f64) -> usize {
        if position <= 0.0 {
            return 0;
        }
        let idx = (position / self.seg_length).ceil() as usize;
        idx.saturating_sub(1).min(self.n_segments - 1)
    }

    /// Downstream boundary of segment `i` (km).
    pub fn boundary(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.seg_length
    }
}

/// A time-indexed scalar boundary value (veh/hr).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Constant {
        value: f64,
    },
    /// Trapezoid: `base` at t = 0, linear ramp to `peak` over
    /// `ramp_up_hours`, plateau, linear ramp back to `base` over the final
    /// `ramp_down_hours` before `total_hours`.
    Trapezoid {
        base: f64,
        peak: f64,
        ramp_up_hours: f64,
        ramp_down_hours: f64,
        total_hours: f64,
    },
    /// Explicit per-step values; the last value is held past the end.
    Series {
        values: Vec<f64>,
    },
}

impl Profile {
    /// Value in effect during step `k` (evaluated at `t = k dt`).
    pub fn at(&self, k: usize, dt: f64) -> f64 {
        match self {
            Profile::Constant { value } => *value,
            Profile::Trapezoid {
                base,
                peak,
                ramp_up_hours,
                ramp_down_hours,
                total_hours,
            } => {
                let t = k as f64 * dt;
                let frac = if t < *ramp_up_hours {
                    t / ramp_up_hours
                } else if t <= total_hours - ramp_down_hours {
                    1.0
                } else {
                    ((total_hours - t) / ramp_down_hours).max(0.0)
                };
                base + (peak - base) * frac
            }
            Profile::Series { values } => values.get(k).or_else(|| values.last()).copied().unwrap_or(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Profile::Constant { value } => *value >= 0.0,
            Profile::Trapezoid {
                base,
                peak,
                ramp_up_hours,
                ramp_down_hours,
                total_hours,
            } => {
                *base >= 0.0
                    && *peak >= 0.0
                    && *ramp_up_hours >= 0.0
                    && *ramp_down_hours >= 0.0
                    && ramp_up_hours + ramp_down_hours <= *total_hours
            }
            Profile::Series { values } => values.iter().all(|v| *v >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(invalid("profile", format!("non-physical profile {self:?}")))
        }
    }
}

/// How a [`CapacityOverride`] acts on the segment's sending function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideKind {
    /// Replaces `q_cap`, so the capacity drop scales the reduced value.
    #[default]
    Capacity,
    /// Caps the segment outflow at `capacity` on top of the regular `q_max`.
    OutflowCap,
}

/// Capacity override on one segment for steps in `[from_step, until_step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityOverride {
    pub segment: usize,
    pub capacity: f64,
    pub from_step: usize,
    pub until_step: usize,
    #[serde(default)]
    pub kind: OverrideKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub upstream_demand: Profile,
    pub downstream_supply: Profile,
    #[serde(default)]
    pub capacity_overrides: Vec<CapacityOverride>,
}

impl BoundaryConditions {
    fn active_override(&self, segment: usize, k: usize, kind: OverrideKind) -> Option<f64> {
        self.capacity_overrides
            .iter()
            .filter(|o| o.kind == kind && o.segment == segment && (o.from_step..o.until_step).contains(&k))
            .map(|o| o.capacity)
            .reduce(f64::min)
    }

    /// Replacement for `q_cap` on `segment` at step `k`.
    pub fn cap_override(&self, segment: usize, k: usize) -> Option<f64> {
        self.active_override(segment, k, OverrideKind::Capacity)
    }

    /// Hard cap on the outflow of `segment` at step `k`.
    pub fn outflow_cap(&self, segment: usize, k: usize) -> Option<f64> {
        self.active_override(segment, k, OverrideKind::OutflowCap)
    }

    /// Effective maximum discharge of `segment` at density `rho`.
    pub fn discharge(&self, fd: &FundamentalDiagram, segment: usize, rho: f64, k: usize) -> Result<f64> {
        let q = fd.q_max(rho, self.cap_override(segment, k))?;
        Ok(self.outflow_cap(segment, k).map_or(q, |c| q.min(c)))
    }

    pub fn validate(&self, n_segments: usize) -> Result<()> {
        self.upstream_demand.validate()?;
        self.downstream_supply.validate()?;
        for o in &self.capacity_overrides {
            if o.segment >= n_segments {
                return Err(invalid(
                    "capacity_overrides",
                    format!("segment {} outside stretch of {n_segments}", o.segment),
                ));
            }
            if !(o.capacity >= 0.0) {
                return Err(invalid("capacity_overrides", "capacity must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Platoon {
    pub id: usize,
    /// Front position measured from the upstream end (km).
    pub position: f64,
    /// Physical length (km); occupancy uses the front position only.
    pub length: f64,
    pub active: bool,
    pub entry_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficState {
    pub densities: Vec<f64>,
    pub platoons: Vec<Platoon>,
    /// Vehicles waiting upstream of the first segment.
    pub upstream_queue: f64,
}

impl TrafficState {
    pub fn uniform(n_segments: usize, density: f64) -> Self {
        Self {
            densities: vec![density; n_segments],
            platoons: Vec::new(),
            upstream_queue: 0.0,
        }
    }

    pub fn active_count(&self) -> usize {
        self.platoons.iter().filter(|p| p.active).count()
    }

    /// Stacked state `[rho_1 .. rho_NL, p_1 .. p_n]`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.densities.len() + self.platoons.len(),
            self.densities
                .iter()
                .copied()
                .chain(self.platoons.iter().map(|p| p.position)),
        )
    }

    /// Copy of `self` with densities and positions read from `x`.
    pub fn with_vector(&self, x: &DVector<f64>) -> Result<Self> {
        let n = self.densities.len() + self.platoons.len();
        if x.len() != n {
            return Err(Error::Dimension {
                context: "state vector",
                expected: n,
                got: x.len(),
            });
        }
        let mut out = self.clone();
        let nl = out.densities.len();
        out.densities.copy_from_slice(&x.as_slice()[..nl]);
        for (p, v) in out.platoons.iter_mut().zip(&x.as_slice()[nl..]) {
            p.position = *v;
        }
        Ok(out)
    }

    /// Vehicles inside the stretch.
    pub fn vehicles(&self, seg_length: f64) -> f64 {
        self.densities.iter().sum::<f64>() * seg_length
    }
}

/// Commanded platoon speeds, one per platoon in the state (km/hr).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlInput {
    pub speeds: Vec<f64>,
}

impl ControlInput {
    pub fn new(speeds: Vec<f64>) -> Self {
        Self { speeds }
    }

    pub fn uniform(n: usize, speed: f64) -> Self {
        Self { speeds: vec![speed; n] }
    }

    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }
}

/// Everything computed during one transition at time index `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Interface fluxes `phi_0 .. phi_NL` (veh/hr).
    pub fluxes: Vec<f64>,
    /// Realized platoon speeds; zero for inactive platoons.
    pub speeds: Vec<f64>,
    /// Platoon positions at `k + 1` (halted platoons snapped to the boundary).
    pub positions: Vec<f64>,
}

/// Deterministic one-step traffic model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub fd: FundamentalDiagram,
    pub grid: Grid,
    pub bc: BoundaryConditions,
    /// Minimum downstream supply for a platoon to cross into a restricted
    /// segment (veh/hr).
    pub s_min: f64,
}

impl Model {
    pub fn new(fd: FundamentalDiagram, grid: Grid, bc: BoundaryConditions, s_min: f64) -> Result<Self> {
        fd.validate()?;
        grid.check_cfl(&fd)?;
        bc.validate(grid.n_segments)?;
        if !(s_min >= 0.0) {
            return Err(invalid("s_min", "must be non-negative"));
        }
        Ok(Self { fd, grid, bc, s_min })
    }

    fn check_input(&self, state: &TrafficState, u: &ControlInput) -> Result<()> {
        if state.densities.len() != self.grid.n_segments {
            return Err(Error::Dimension {
                context: "densities",
                expected: self.grid.n_segments,
                got: state.densities.len(),
            });
        }
        if u.len() != state.platoons.len() {
            return Err(Error::Dimension {
                context: "control input",
                expected: state.platoons.len(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// Maximum traffic speed in segment `i`: the slowest commanded speed of
    /// the active platoons inside it, else `v_f`.
    pub fn segment_max_speed(&self, i: usize, state: &TrafficState, u: &ControlInput) -> f64 {
        state
            .platoons
            .iter()
            .zip(&u.speeds)
            .filter(|(p, _)| p.active && self.grid.segment_of(p.position) == i)
            .map(|(_, s)| *s)
            .fold(self.fd.v_f, f64::min)
    }

    fn demands_supplies(&self, state: &TrafficState, u: &ControlInput, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.grid.n_segments;
        let mut v_max = vec![self.fd.v_f; n];
        for (p, s) in state.platoons.iter().zip(&u.speeds) {
            if p.active {
                let i = self.grid.segment_of(p.position);
                v_max[i] = v_max[i].min(*s);
            }
        }
        let mut demand = Vec::with_capacity(n);
        let mut supply = Vec::with_capacity(n);
        for (i, (&rho, &v)) in state.densities.iter().zip(&v_max).enumerate() {
            demand.push((v * rho).min(self.bc.discharge(&self.fd, i, rho, k)?));
            supply.push(self.fd.supply(rho)?);
        }
        Ok((demand, supply))
    }

    fn fluxes_from(&self, state: &TrafficState, demand: &[f64], supply: &[f64], k: usize) -> Vec<f64> {
        let n = self.grid.n_segments;
        let dt = self.grid.dt;
        let mut phi = Vec::with_capacity(n + 1);
        let released = self.bc.upstream_demand.at(k, dt) + state.upstream_queue / dt;
        phi.push(released.min(supply[0]));
        for i in 0..n - 1 {
            phi.push(demand[i].min(supply[i + 1]));
        }
        phi.push(demand[n - 1].min(self.bc.downstream_supply.at(k, dt)));
        phi
    }

    /// Flux across interface `i` (0 = upstream boundary, `N_L` = downstream
    /// boundary).
    pub fn flux(&self, i: usize, state: &TrafficState, u: &ControlInput, k: usize) -> Result<f64> {
        self.check_input(state, u)?;
        if i > self.grid.n_segments {
            return Err(invalid("interface", format!("{i} > {}", self.grid.n_segments)));
        }
        let (d, s) = self.demands_supplies(state, u, k)?;
        Ok(self.fluxes_from(state, &d, &s, k)[i])
    }

    /// Realized speed and next position of one platoon given the demand and
    /// supply of its segment and the next one.
    fn platoon_motion(
        &self,
        position: f64,
        speed: f64,
        demand: &[f64],
        supply: &[f64],
        densities: &[f64],
        k: usize,
    ) -> Result<(f64, f64, bool)> {
        let dt = self.grid.dt;
        let i = self.grid.segment_of(position);
        let boundary = self.grid.boundary(i);
        let target = position + dt * speed;
        if target <= boundary {
            return Ok((target, speed, false));
        }
        let last = i + 1 == self.grid.n_segments;
        let downstream_supply = if last {
            self.bc.downstream_supply.at(k, dt)
        } else {
            supply[i + 1]
        };
        if demand[i] <= downstream_supply {
            return Ok((target, speed, false));
        }
        if downstream_supply >= self.s_min {
            let downstream_cap = if last {
                self.fd.q_cap
            } else {
                self.bc.discharge(&self.fd, i + 1, densities[i + 1], k)?
            };
            let limited = if downstream_cap > 0.0 {
                self.fd.v_f * downstream_supply / downstream_cap
            } else {
                0.0
            };
            let v = speed.min(limited);
            Ok((position + dt * v, v, false))
        } else {
            Ok((boundary, (boundary - position) / dt, true))
        }
    }

    /// Next position and realized speed of platoon `j`.
    pub fn advance_platoon(&self, j: usize, state: &TrafficState, u: &ControlInput, k: usize) -> Result<(f64, f64)> {
        self.check_input(state, u)?;
        let p = state
            .platoons
            .get(j)
            .ok_or_else(|| invalid("platoon", format!("no platoon at index {j}")))?;
        if !p.active {
            return Ok((p.position, 0.0));
        }
        let (d, s) = self.demands_supplies(state, u, k)?;
        let (pos, v, _) = self.platoon_motion(p.position, u.speeds[j], &d, &s, &state.densities, k)?;
        Ok((pos, v))
    }

    /// Fluxes, realized speeds and next positions at time index `k`.
    pub fn transition(&self, state: &TrafficState, u: &ControlInput, k: usize) -> Result<Transition> {
        self.check_input(state, u)?;
        let (d, s) = self.demands_supplies(state, u, k)?;
        let fluxes = self.fluxes_from(state, &d, &s, k);
        let mut speeds = Vec::with_capacity(state.platoons.len());
        let mut positions = Vec::with_capacity(state.platoons.len());
        for (p, &cmd) in state.platoons.iter().zip(&u.speeds) {
            if p.active {
                let (pos, v, _) = self.platoon_motion(p.position, cmd, &d, &s, &state.densities, k)?;
                speeds.push(v);
                positions.push(pos);
            } else {
                speeds.push(0.0);
                positions.push(p.position);
            }
        }
        Ok(Transition {
            fluxes,
            speeds,
            positions,
        })
    }

    /// Applies a computed transition to `state`.
    pub fn apply(&self, state: &TrafficState, tr: &Transition, k: usize) -> TrafficState {
        let ratio = self.grid.dt / self.grid.seg_length;
        let densities = state
            .densities
            .iter()
            .enumerate()
            .map(|(i, rho)| rho + ratio * (tr.fluxes[i] - tr.fluxes[i + 1]))
            .collect();
        let end = self.grid.stretch_length();
        let platoons = state
            .platoons
            .iter()
            .zip(&tr.positions)
            .map(|(p, &pos)| {
                let mut p = p.clone();
                if p.active {
                    p.position = pos;
                    if pos >= end {
                        p.active = false;
                    }
                }
                p
            })
            .collect();
        let dt = self.grid.dt;
        let released = self.bc.upstream_demand.at(k, dt) + state.upstream_queue / dt;
        let upstream_queue = (dt * (released - tr.fluxes[0])).max(0.0);
        TrafficState {
            densities,
            platoons,
            upstream_queue,
        }
    }

    /// One step of the nonlinear dynamics. Platoons reaching the downstream
    /// end are marked inactive.
    pub fn step(&self, state: &TrafficState, u: &ControlInput, k: usize) -> Result<TrafficState> {
        let tr = self.transition(state, u, k)?;
        Ok(self.apply(state, &tr, k))
    }

    /// Nonlinear vector `f(x, u)`: flux differences per segment followed by
    /// realized platoon speeds.
    pub fn eval_f(&self, state: &TrafficState, u: &ControlInput, k: usize) -> Result<DVector<f64>> {
        let tr = self.transition(state, u, k)?;
        Ok(f_from_transition(&tr))
    }

    /// Diagonal of `G = T diag(I / L, I)` for `n_platoons` position states.
    pub fn g_diagonal(&self, n_platoons: usize) -> DVector<f64> {
        let n = self.grid.n_segments;
        let dt = self.grid.dt;
        DVector::from_fn(
            n + n_platoons,
            |r, _| {
                if r < n {
                    dt / self.grid.seg_length
                } else {
                    dt
                }
            },
        )
    }
}

pub(crate) fn f_from_transition(tr: &Transition) -> DVector<f64> {
    let n = tr.fluxes.len() - 1;
    DVector::from_iterator(
        n + tr.speeds.len(),
        tr.fluxes
            .windows(2)
            .map(|w| w[0] - w[1])
            .chain(tr.speeds.iter().copied()),
    )
}
