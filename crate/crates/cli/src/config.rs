//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use platoon_core::baseline::PiConfig;
use platoon_core::ctm::{BoundaryConditions, CapacityOverride, FundamentalDiagram, Grid, Profile};
use platoon_core::lqr::LqrConfig;
use platoon_core::sim::{reference_demand, reference_scenario, ControllerSpec, Scenario, SweepParameter, Variant};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Base layout; `bottleneck` adds the reduced-capacity schedule.
    pub variant: Variant,
    pub n_segments: usize,
    pub seg_length_km: f64,
    pub dt_seconds: f64,
    pub n_steps: usize,
    pub initial_density: f64,
    pub platoon_length_km: f64,
    pub s_min: f64,
    /// Explicit entry steps; when absent, `first..=last` every `every` steps.
    pub platoon_schedule: Option<Vec<usize>>,
    pub platoon_first: usize,
    pub platoon_every: usize,
    pub platoon_last: usize,
    pub fd: FundamentalDiagram,
    pub demand: Profile,
    pub downstream_supply: Profile,
    /// Replaces the variant's capacity schedule when present.
    pub capacity_overrides: Option<Vec<CapacityOverride>>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Bottleneck,
            n_segments: 16,
            seg_length_km: 0.5,
            dt_seconds: 10.0,
            n_steps: 720,
            initial_density: 20.0,
            platoon_length_km: 0.0045,
            s_min: 10.0,
            platoon_schedule: None,
            platoon_first: 60,
            platoon_every: 15,
            platoon_last: 600,
            fd: FundamentalDiagram::default(),
            demand: reference_demand(),
            downstream_supply: Profile::Constant { value: 6000.0 },
            capacity_overrides: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub parameter: String,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            parameter: "iterations".into(),
            values: (1..=10).map(f64::from).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiFitConfig {
    pub bounds: (f64, f64),
    pub init: (f64, f64),
    pub max_evals: usize,
}

impl Default for PiFitConfig {
    fn default() -> Self {
        Self {
            bounds: (-10.0, 10.0),
            init: (0.8, 1.6),
            max_evals: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub scenario: ScenarioConfig,
    pub controller: ControllerSpec,
    pub sweep: SweepConfig,
    pub pi_fit: PiFitConfig,
    /// Write the density heatmap alongside the CSV files.
    pub heatmap: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("results"),
            scenario: ScenarioConfig::default(),
            controller: ControllerSpec::GnLqr(LqrConfig::default()),
            sweep: SweepConfig::default(),
            pi_fit: PiFitConfig::default(),
            heatmap: true,
        }
    }
}

impl ExperimentConfig {
    /// Scenario described by the configuration, fully validated.
    pub fn scenario(&self) -> Result<Scenario, CliError> {
        let sc = &self.scenario;
        let grid = Grid::new(sc.n_segments, sc.seg_length_km, sc.dt_seconds, sc.n_steps)?;
        let capacity_overrides = match &sc.capacity_overrides {
            Some(list) => list.clone(),
            None => reference_scenario(sc.variant).bc.capacity_overrides,
        };
        let platoon_schedule = match &sc.platoon_schedule {
            Some(list) => list.clone(),
            None if sc.platoon_every == 0 => {
                return Err(CliError::Config("scenario.platoon_every must be at least 1".into()))
            }
            None => (sc.platoon_first..=sc.platoon_last).step_by(sc.platoon_every).collect(),
        };
        let scenario = Scenario {
            grid,
            fd: sc.fd,
            bc: BoundaryConditions {
                upstream_demand: sc.demand.clone(),
                downstream_supply: sc.downstream_supply.clone(),
                capacity_overrides,
            },
            initial_density: sc.initial_density,
            platoon_schedule,
            platoon_length: sc.platoon_length_km,
            s_min: sc.s_min,
            controller: self.controller.clone(),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn sweep_parameter(&self) -> Result<SweepParameter, CliError> {
        Ok(SweepParameter::parse(&self.sweep.parameter)?)
    }

    /// PI settings of the configured controller, or the defaults.
    pub fn pi_config(&self) -> PiConfig {
        match &self.controller {
            ControllerSpec::Pi(cfg) => *cfg,
            _ => PiConfig::default(),
        }
    }
}

/// Parses the right-hand side of a `--set` override as a TOML value, falling
/// back to a bare string.
fn parse_override_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(root: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

/// Builds a configuration from TOML text, an optional controller name and
/// `key=value` overrides (applied in that order), then validates it.
pub fn parse_config(text: &str, controller: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut root: Table = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
    if let Some(name) = controller {
        ControllerSpec::from_name(name)?;
        let same_kind = root
            .get("controller")
            .and_then(|c| c.get("kind"))
            .and_then(Value::as_str)
            == Some(name);
        if !same_kind {
            let mut t = Table::new();
            t.insert("kind".into(), Value::String(name.into()));
            root.insert("controller".into(), Value::Table(t));
        }
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: ExperimentConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Parse(e.to_string()))?;
    cfg.scenario()?;
    Ok(cfg)
}

pub fn load_config(
    path: Option<&Path>,
    controller: Option<&str>,
    overrides: &[String],
) -> Result<ExperimentConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| CliError::Io {
            path: p.to_path_buf(),
            source,
        })?,
        None => String::new(),
    };
    parse_config(&text, controller, overrides).map_err(|e| match (e, path) {
        (CliError::Parse(msg), Some(p)) => CliError::Parse(format!("{}: {msg}", p.display())),
        (e, _) => e,
    })
}
