//! The `run`, `sweep`, `compare` and `fit-pi` commands.

use std::time::Instant;

use platoon_core::baseline::{pi_gain_fit, MpcConfig, PiConfig, PiFit};
use platoon_core::lqr::LqrConfig;
use platoon_core::sim::{run, sweep, ControllerSpec, Metrics, Scenario, SweepRow};

use crate::config::ExperimentConfig;
use crate::export::{export_run, sig6, write_compare_csv, write_sweep_csv, ExportBundle};
use crate::CliError;

pub fn summary_line(label: &str, m: &Metrics) -> String {
    let show = |v: Option<f64>| v.map(sig6).unwrap_or_else(|| "-".into());
    format!(
        "{label}: TTT={} TTD={} MS={} ACT={}",
        sig6(m.ttt),
        sig6(m.ttd),
        show(m.ms),
        show(m.act)
    )
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<(Metrics, ExportBundle), CliError> {
    let scenario = cfg.scenario()?;
    let result = run(&scenario)?;
    let label = scenario.controller.name();
    let bundle = export_run(&cfg.out_dir, label, &result, scenario.fd.rho_m, cfg.heatmap)?;
    println!("{}", summary_line(label, &result.metrics));
    Ok((result.metrics, bundle))
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    let scenario = cfg.scenario()?;
    let parameter = cfg.sweep_parameter()?;
    let rows = sweep(&scenario, parameter, &cfg.sweep.values)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| CliError::Io {
        path: cfg.out_dir.clone(),
        source,
    })?;
    let path = cfg.out_dir.join(format!("sweep_{}.csv", parameter.name()));
    write_sweep_csv(&path, parameter.name(), &rows)?;
    for r in &rows {
        println!(
            "{}",
            summary_line(&format!("{}={}", parameter.name(), r.value), &r.metrics)
        );
    }
    Ok(rows)
}

fn fit(cfg: &ExperimentConfig, scenario: &Scenario, pi: PiConfig) -> Result<(PiFit, f64), CliError> {
    let fit_scenario = scenario.clone().with_controller(ControllerSpec::Pi(pi));
    let started = Instant::now();
    let p = &cfg.pi_fit;
    let fitted = pi_gain_fit(&fit_scenario, p.bounds, p.init, p.max_evals)?;
    Ok((fitted, started.elapsed().as_secs_f64()))
}

pub fn cmd_fit_pi(cfg: &ExperimentConfig) -> Result<PiFit, CliError> {
    let scenario = cfg.scenario()?;
    let (fitted, secs) = fit(cfg, &scenario, cfg.pi_config())?;
    println!(
        "K_P={} K_I={} MS={} (MS at init {}, {} evaluations, {:.3} s)",
        sig6(fitted.kp),
        sig6(fitted.ki),
        sig6(fitted.ms),
        sig6(fitted.ms_at_init),
        fitted.evaluations,
        secs
    );
    Ok(fitted)
}

/// One row per controller of the comparison table. PI rows report the
/// offline gain-fit time as CT; the others report ACT.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<Vec<(String, Metrics, Option<f64>)>, CliError> {
    let scenario = cfg.scenario()?;
    let mut rows = Vec::new();
    let mut add = |label: &str, spec: ControllerSpec, ct: Option<Option<f64>>| -> Result<(), CliError> {
        let r = run(&scenario.clone().with_controller(spec))?;
        let time = ct.unwrap_or(r.metrics.act);
        println!("{}", summary_line(label, &r.metrics));
        rows.push((label.to_string(), r.metrics, time));
        Ok(())
    };

    add("No control", ControllerSpec::None, None)?;
    for (label, bound) in [("PI (lower bound 60 km/hr)", Some(60.0)), ("PI (no lower bound)", None)] {
        let base = PiConfig {
            lower_bound: bound,
            ..PiConfig::default()
        };
        let (fitted, secs) = fit(cfg, &scenario, base)?;
        let pi = PiConfig {
            kp: fitted.kp,
            ki: fitted.ki,
            ..base
        };
        add(label, ControllerSpec::Pi(pi), Some(Some(secs)))?;
    }
    for (label, u_min) in [("MPC (lower bound 60 km/hr)", 60.0), ("MPC (no lower bound)", 0.0)] {
        add(
            label,
            ControllerSpec::Mpc(MpcConfig {
                u_min,
                ..MpcConfig::default()
            }),
            None,
        )?;
    }
    add("GN-LQR (N=3)", ControllerSpec::GnLqr(LqrConfig::default()), None)?;
    add(
        "GN-LQRP (R'=30I, N=50)",
        ControllerSpec::GnLqrp(LqrConfig {
            horizon: 50,
            ..LqrConfig::default()
        }),
        None,
    )?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| CliError::Io {
        path: cfg.out_dir.clone(),
        source,
    })?;
    write_compare_csv(&cfg.out_dir.join("compare.csv"), &rows)?;
    Ok(rows)
}
