//! CSV tables and PGM heatmaps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use platoon_core::sim::{Metrics, RunResult, SweepRow};

use crate::CliError;

/// Formats `v` with six significant digits in plain decimal notation.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let rounded = format!("{v:.decimals$}");
    // Rounding can carry into a new leading digit (9.999995 -> 10.00000).
    let reparsed: f64 = rounded.parse().unwrap_or(v);
    if reparsed != 0.0 && reparsed.abs().log10().floor() as i32 > magnitude && decimals > 0 {
        format!("{v:.prec$}", prec = decimals - 1)
    } else {
        rounded
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(sig6).unwrap_or_default()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |e| CliError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Density matrix: one row per time step, one column per segment.
pub fn write_density_csv(path: &Path, densities: &DMatrix<f64>) -> Result<(), CliError> {
    let header: Vec<String> = std::iter::once("step".to_string())
        .chain((1..=densities.ncols()).map(|i| format!("segment_{i} [veh/km]")))
        .collect();
    let rows = densities.row_iter().enumerate().map(|(k, row)| {
        std::iter::once(k.to_string())
            .chain(row.iter().map(|v| sig6(*v)))
            .collect()
    });
    write_rows(path, &header, rows)
}

/// Reads a density CSV written by [`write_density_csv`].
pub fn read_density_csv(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut values = Vec::new();
    let mut n_rows = 0;
    let n_cols = r.headers().map_err(csv_err(path))?.len().saturating_sub(1);
    for record in r.records() {
        let record = record.map_err(csv_err(path))?;
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| CliError::Csv {
                path: path.to_path_buf(),
                message: format!("row {n_rows}: `{field}` is not a number"),
            })?;
            values.push(v);
        }
        n_rows += 1;
    }
    if values.len() != n_rows * n_cols {
        return Err(CliError::Csv {
            path: path.to_path_buf(),
            message: "ragged density matrix".into(),
        });
    }
    Ok(DMatrix::from_row_slice(n_rows, n_cols, &values))
}

pub fn write_trajectories_csv(path: &Path, result: &RunResult) -> Result<(), CliError> {
    let header = [
        "step",
        "platoon_id",
        "position [km]",
        "commanded [km/hr]",
        "realized [km/hr]",
    ]
    .map(String::from);
    let rows = result.trajectories.iter().map(|p| {
        vec![
            p.step.to_string(),
            p.platoon_id.to_string(),
            sig6(p.position),
            sig6(p.commanded),
            sig6(p.realized),
        ]
    });
    write_rows(path, &header, rows)
}

fn metrics_header(first: &str, last: &str) -> Vec<String> {
    vec![
        first.to_string(),
        "TTT [veh*hr]".into(),
        "TTD [veh*km]".into(),
        "MS [km/hr]".into(),
        last.to_string(),
    ]
}

fn metrics_row(label: String, m: &Metrics, time: Option<f64>) -> Vec<String> {
    vec![label, sig6(m.ttt), sig6(m.ttd), opt(m.ms), opt(time)]
}

pub fn write_metrics_csv(path: &Path, rows: &[(String, Metrics)]) -> Result<(), CliError> {
    let header = metrics_header("scenario", "ACT [s]");
    write_rows(
        path,
        &header,
        rows.iter().map(|(l, m)| metrics_row(l.clone(), m, m.act)),
    )
}

/// Table with a computation-time column that may differ from ACT.
pub fn write_compare_csv(path: &Path, rows: &[(String, Metrics, Option<f64>)]) -> Result<(), CliError> {
    let header = metrics_header("controller", "CT [s]");
    write_rows(
        path,
        &header,
        rows.iter().map(|(l, m, ct)| metrics_row(l.clone(), m, *ct)),
    )
}

pub fn write_sweep_csv(path: &Path, parameter: &str, rows: &[SweepRow]) -> Result<(), CliError> {
    let header = metrics_header(parameter, "ACT [s]");
    write_rows(
        path,
        &header,
        rows.iter()
            .map(|r| metrics_row(sig6(r.value), &r.metrics, r.metrics.act)),
    )
}

/// Binary PGM, `x` = time step, `y` = segment (top row is the first
/// segment), dark = dense on a fixed `[0, rho_max]` scale. Each cell becomes a
/// `scale × scale` block.
pub fn write_heatmap_pgm(path: &Path, densities: &DMatrix<f64>, rho_max: f64, scale: usize) -> Result<(), CliError> {
    if densities.is_empty() {
        return Err(CliError::Config("heatmap needs a non-empty density matrix".into()));
    }
    let scale = scale.max(1);
    let (n_t, n_l) = densities.shape();
    let (width, height) = (n_t * scale, n_l * scale);
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n255\n").map_err(io_err(path))?;
    let mut line = Vec::with_capacity(width);
    for seg in 0..n_l {
        line.clear();
        for k in 0..n_t {
            let level = (densities[(k, seg)] / rho_max).clamp(0.0, 1.0);
            let gray = (255.0 * (1.0 - level)).round() as u8;
            line.extend(std::iter::repeat_n(gray, scale));
        }
        for _ in 0..scale {
            w.write_all(&line).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Files written for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportBundle {
    pub density: PathBuf,
    pub trajectories: PathBuf,
    pub metrics: PathBuf,
    pub heatmap: Option<PathBuf>,
}

pub fn export_run(
    dir: &Path,
    label: &str,
    result: &RunResult,
    rho_max: f64,
    heatmap: bool,
) -> Result<ExportBundle, CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let bundle = ExportBundle {
        density: dir.join(format!("{label}_density.csv")),
        trajectories: dir.join(format!("{label}_trajectories.csv")),
        metrics: dir.join(format!("{label}_metrics.csv")),
        heatmap: heatmap.then(|| dir.join(format!("{label}_density.pgm"))),
    };
    write_density_csv(&bundle.density, &result.density_history)?;
    write_trajectories_csv(&bundle.trajectories, result)?;
    write_metrics_csv(&bundle.metrics, &[(label.to_string(), result.metrics)])?;
    if let Some(p) = &bundle.heatmap {
        write_heatmap_pgm(p, &result.density_history, rho_max, 1)?;
    }
    Ok(bundle)
}
