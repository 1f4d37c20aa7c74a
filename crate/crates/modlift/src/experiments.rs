//! Phase-transition and error-scaling experiment grids.
//!
//! Each runner sweeps a parameter grid, solving seeded random instances at
//! every point and recording the exact-support-recovery rate plus error
//! statistics conditioned on exact recovery (trials that miss the support
//! contribute to the rate only). Trials run in a rayon pool; per-trial seeds
//! come from [`crate::synth::trial_seed`], and results are merged in grid
//! order, so tables are byte-identical for any worker count.
//!
//! All experiments use the Gaussian-dictionary / first-K-DFT-columns setup
//! (coherence 1) with `lambda = k * gamma_0`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::solver::{solve_group_lasso, SolverOptions};
use crate::synth::{
    gen_instance, support_metrics, trial_seed, BasisKind, InstanceParams,
    DEFAULT_SUPPORT_REL_THRESHOLD,
};
use crate::theory::{gamma_zero, BoundInputs};

/// A named sweep axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Axis {
            name: name.into(),
            values,
        }
    }
}

/// A grid specification: one or two sweep axes, fixed parameters, the trial
/// count per point, and the base seed.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub x: Axis,
    pub y: Option<Axis>,
    pub fixed: BTreeMap<String, f64>,
    pub trials: usize,
    pub base_seed: u64,
}

impl GridSpec {
    fn validate(&self, allowed_fixed: &[&str]) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::param("trials must be at least 1"));
        }
        if self.x.values.is_empty() {
            return Err(Error::param("x axis must have at least one value"));
        }
        if let Some(y) = &self.y {
            if y.values.is_empty() {
                return Err(Error::param("y axis must have at least one value"));
            }
            if y.name == self.x.name {
                return Err(Error::param("axes must have distinct names"));
            }
            if self.fixed.contains_key(&y.name) {
                return Err(Error::param(format!(
                    "axis '{}' also appears in fixed parameters",
                    y.name
                )));
            }
        }
        if self.fixed.contains_key(&self.x.name) {
            return Err(Error::param(format!(
                "axis '{}' also appears in fixed parameters",
                self.x.name
            )));
        }
        for key in self.fixed.keys() {
            if !allowed_fixed.contains(&key.as_str()) {
                return Err(Error::param(format!(
                    "unknown fixed parameter '{key}' (allowed: {allowed_fixed:?})"
                )));
            }
        }
        Ok(())
    }

    fn expect_axes(&self, x_name: &str, y_name: Option<&str>) -> Result<()> {
        if self.x.name != x_name {
            return Err(Error::param(format!(
                "this experiment sweeps '{x_name}' on the x axis, got '{}'",
                self.x.name
            )));
        }
        match (y_name, &self.y) {
            (Some(expected), Some(y)) if y.name == expected => Ok(()),
            (Some(expected), _) => Err(Error::param(format!(
                "this experiment sweeps '{expected}' on the y axis"
            ))),
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::param("this experiment has no y axis")),
        }
    }

    fn fixed_or(&self, key: &str, default: f64) -> f64 {
        self.fixed.get(key).copied().unwrap_or(default)
    }
}

/// Aggregate outcome at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub x: f64,
    pub y: Option<f64>,
    pub success_count: usize,
    pub trial_count: usize,
    /// Mean of the error metric over exactly-recovered trials.
    pub mean_error: Option<f64>,
    /// Sample standard deviation of the metric (0 when one success).
    pub std_error: Option<f64>,
    /// Summed per-trial wall time; reported in progress output, never in CSV.
    pub runtime_ms: u128,
}

impl ExperimentRecord {
    pub fn rate(&self) -> f64 {
        self.success_count as f64 / self.trial_count as f64
    }
}

/// A full experiment table plus its column naming.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTable {
    pub experiment: String,
    pub x_name: String,
    pub y_name: Option<String>,
    /// Label of the error metric column (`l2inf_error` or `sq_l2inf_error`).
    pub error_label: String,
    pub records: Vec<ExperimentRecord>,
}

/// Execution knobs shared by all runners.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub solver: SolverOptions,
    /// Relative column-norm threshold for support extraction.
    pub support_threshold: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            solver: SolverOptions {
                max_iters: 3000,
                ..Default::default()
            },
            support_threshold: DEFAULT_SUPPORT_REL_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum ErrorMetric {
    L2Inf,
    SquaredL2Inf,
}

impl ErrorMetric {
    fn label(self) -> &'static str {
        match self {
            ErrorMetric::L2Inf => "l2inf_error",
            ErrorMetric::SquaredL2Inf => "sq_l2inf_error",
        }
    }
}

struct GridPoint {
    x: f64,
    y: Option<f64>,
}

fn grid_points(spec: &GridSpec) -> Vec<GridPoint> {
    match &spec.y {
        Some(y) => {
            let mut pts = Vec::with_capacity(spec.x.values.len() * y.values.len());
            for &yv in &y.values {
                for &xv in &spec.x.values {
                    pts.push(GridPoint {
                        x: xv,
                        y: Some(yv),
                    });
                }
            }
            pts
        }
        None => spec
            .x
            .values
            .iter()
            .map(|&xv| GridPoint { x: xv, y: None })
            .collect(),
    }
}

fn as_dim(value: f64, name: &str) -> Result<usize> {
    if value < 1.0 || value.fract() != 0.0 || value > u32::MAX as f64 {
        return Err(Error::param(format!(
            "{name} must be a positive integer, got {value}"
        )));
    }
    Ok(value as usize)
}

/// gamma_0 for the DFT-basis protocol (coherence exactly 1).
fn protocol_gamma_zero(n: usize, m: usize, k: usize, j: usize, sigma: f64) -> Result<f64> {
    let b = BoundInputs::new(n as f64, m as f64, k as f64, j as f64, sigma, 1.0)?;
    gamma_zero(&b)
}

fn run_grid(
    experiment: &str,
    spec: &GridSpec,
    opts: &RunOptions,
    metric: ErrorMetric,
    point_setup: impl Fn(&GridPoint) -> Result<(InstanceParams, f64)> + Sync,
) -> Result<ExperimentTable> {
    let points = grid_points(spec);
    let mut tasks = Vec::with_capacity(points.len() * spec.trials);
    for (pi, _) in points.iter().enumerate() {
        for t in 0..spec.trials {
            tasks.push((pi, t));
        }
    }

    struct Trial {
        point: usize,
        exact: bool,
        metric: f64,
        ms: u128,
    }

    let outcomes: Vec<Result<Trial>> = tasks
        .par_iter()
        .map(|&(pi, t)| {
            let start = Instant::now();
            let (mut params, lambda) = point_setup(&points[pi])?;
            params.seed = trial_seed(spec.base_seed, pi as u64, t as u64);
            let instance = gen_instance(&params)?;
            let sol = solve_group_lasso(&instance.op, &instance.y, lambda, &opts.solver)?;
            let metrics = support_metrics(&sol.estimate, &instance, opts.support_threshold)?;
            let value = match metric {
                ErrorMetric::L2Inf => metrics.l2inf_error,
                ErrorMetric::SquaredL2Inf => metrics.l2inf_error * metrics.l2inf_error,
            };
            Ok(Trial {
                point: pi,
                exact: metrics.exact,
                metric: value,
                ms: start.elapsed().as_millis(),
            })
        })
        .collect();

    let mut per_point: Vec<Vec<(bool, f64, u128)>> = (0..points.len()).map(|_| Vec::new()).collect();
    for outcome in outcomes {
        let trial = outcome?;
        per_point[trial.point].push((trial.exact, trial.metric, trial.ms));
    }

    let records = points
        .iter()
        .zip(per_point.iter())
        .map(|(pt, trials)| {
            let success: Vec<f64> = trials
                .iter()
                .filter(|(exact, _, _)| *exact)
                .map(|(_, v, _)| *v)
                .collect();
            let runtime_ms = trials.iter().map(|(_, _, ms)| ms).sum();
            let (mean, std) = if success.is_empty() {
                (None, None)
            } else {
                let n = success.len() as f64;
                let mean = success.iter().sum::<f64>() / n;
                let std = if success.len() > 1 {
                    (success.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                (Some(mean), Some(std))
            };
            ExperimentRecord {
                x: pt.x,
                y: pt.y,
                success_count: success.len(),
                trial_count: trials.len(),
                mean_error: mean,
                std_error: std,
                runtime_ms,
            }
        })
        .collect();

    Ok(ExperimentTable {
        experiment: experiment.to_string(),
        x_name: spec.x.name.clone(),
        y_name: spec.y.as_ref().map(|a| a.name.clone()),
        error_label: metric.label().to_string(),
        records,
    })
}

/// Exact-support-recovery rate over a `(k, gamma)` grid with
/// `lambda = k * gamma_0` and the ground truth rescaled to hit each gamma.
pub fn run_lambda_gamma_phase(spec: &GridSpec, opts: &RunOptions) -> Result<ExperimentTable> {
    spec.expect_axes("k", Some("gamma"))?;
    spec.validate(&["N", "M", "K", "J", "sigma"])?;
    let n = as_dim(spec.fixed_or("N", 100.0), "N")?;
    let m = as_dim(spec.fixed_or("M", 150.0), "M")?;
    let k_dim = as_dim(spec.fixed_or("K", 3.0), "K")?;
    let j = as_dim(spec.fixed_or("J", 3.0), "J")?;
    let sigma = spec.fixed_or("sigma", 0.1);
    let g0 = protocol_gamma_zero(n, m, k_dim, j, sigma)?;
    run_grid("phase-lambda", spec, opts, ErrorMetric::L2Inf, |pt| {
        let params = InstanceParams {
            n,
            m,
            k: k_dim,
            j,
            sigma,
            basis_kind: BasisKind::DftFirstK,
            gamma_target: Some(pt.y.expect("gamma axis")),
            seed: 0,
        };
        Ok((params, pt.x * g0))
    })
}

/// Recovery rate over an `(N, K)` grid at fixed sparsity.
pub fn run_n_vs_k_phase(spec: &GridSpec, opts: &RunOptions) -> Result<ExperimentTable> {
    spec.expect_axes("N", Some("K"))?;
    spec.validate(&["M", "J", "sigma", "k", "gamma"])?;
    let m = as_dim(spec.fixed_or("M", 150.0), "M")?;
    let j = as_dim(spec.fixed_or("J", 3.0), "J")?;
    let sigma = spec.fixed_or("sigma", 0.1);
    let k_mult = spec.fixed_or("k", 3.0);
    let gamma = spec.fixed_or("gamma", 0.02);
    run_grid("phase-nk", spec, opts, ErrorMetric::L2Inf, |pt| {
        let n = as_dim(pt.x, "N")?;
        let k_dim = as_dim(pt.y.expect("K axis"), "K")?;
        let g0 = protocol_gamma_zero(n, m, k_dim, j, sigma)?;
        let params = InstanceParams {
            n,
            m,
            k: k_dim,
            j,
            sigma,
            basis_kind: BasisKind::DftFirstK,
            gamma_target: Some(gamma),
            seed: 0,
        };
        Ok((params, k_mult * g0))
    })
}

/// Recovery rate over an `(N, J)` grid at fixed subspace dimension.
pub fn run_n_vs_j_phase(spec: &GridSpec, opts: &RunOptions) -> Result<ExperimentTable> {
    spec.expect_axes("N", Some("J"))?;
    spec.validate(&["M", "K", "sigma", "k", "gamma"])?;
    let m = as_dim(spec.fixed_or("M", 150.0), "M")?;
    let k_dim = as_dim(spec.fixed_or("K", 3.0), "K")?;
    let sigma = spec.fixed_or("sigma", 0.1);
    let k_mult = spec.fixed_or("k", 3.0);
    let gamma = spec.fixed_or("gamma", 0.02);
    run_grid("phase-nj", spec, opts, ErrorMetric::L2Inf, |pt| {
        let n = as_dim(pt.x, "N")?;
        let j = as_dim(pt.y.expect("J axis"), "J")?;
        let g0 = protocol_gamma_zero(n, m, k_dim, j, sigma)?;
        let params = InstanceParams {
            n,
            m,
            k: k_dim,
            j,
            sigma,
            basis_kind: BasisKind::DftFirstK,
            gamma_target: Some(gamma),
            seed: 0,
        };
        Ok((params, k_mult * g0))
    })
}

/// Conditional recovery error versus the regularization multiplier `k`.
pub fn run_error_vs_lambda(spec: &GridSpec, opts: &RunOptions) -> Result<ExperimentTable> {
    spec.expect_axes("k", None)?;
    spec.validate(&["N", "M", "K", "J", "sigma", "gamma"])?;
    let n = as_dim(spec.fixed_or("N", 100.0), "N")?;
    let m = as_dim(spec.fixed_or("M", 150.0), "M")?;
    let k_dim = as_dim(spec.fixed_or("K", 3.0), "K")?;
    let j = as_dim(spec.fixed_or("J", 3.0), "J")?;
    let sigma = spec.fixed_or("sigma", 0.1);
    let gamma = spec.fixed_or("gamma", 0.02);
    let g0 = protocol_gamma_zero(n, m, k_dim, j, sigma)?;
    run_grid("error-lambda", spec, opts, ErrorMetric::L2Inf, |pt| {
        let params = InstanceParams {
            n,
            m,
            k: k_dim,
            j,
            sigma,
            basis_kind: BasisKind::DftFirstK,
            gamma_target: Some(gamma),
            seed: 0,
        };
        Ok((params, pt.x * g0))
    })
}

/// Conditional squared recovery error versus sparsity `J` at `lambda = k * gamma_0(J)`.
pub fn run_error_vs_j(spec: &GridSpec, opts: &RunOptions) -> Result<ExperimentTable> {
    spec.expect_axes("J", None)?;
    spec.validate(&["N", "M", "K", "sigma", "gamma", "k"])?;
    let n = as_dim(spec.fixed_or("N", 100.0), "N")?;
    let m = as_dim(spec.fixed_or("M", 150.0), "M")?;
    let k_dim = as_dim(spec.fixed_or("K", 3.0), "K")?;
    let sigma = spec.fixed_or("sigma", 0.1);
    let gamma = spec.fixed_or("gamma", 0.02);
    let k_mult = spec.fixed_or("k", 3.0);
    run_grid("error-j", spec, opts, ErrorMetric::SquaredL2Inf, |pt| {
        let j = as_dim(pt.x, "J")?;
        let g0 = protocol_gamma_zero(n, m, k_dim, j, sigma)?;
        let params = InstanceParams {
            n,
            m,
            k: k_dim,
            j,
            sigma,
            basis_kind: BasisKind::DftFirstK,
            gamma_target: Some(gamma),
            seed: 0,
        };
        Ok((params, k_mult * g0))
    })
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// Output format for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Plot,
    Both,
}

impl ReportFormat {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "plot" => Ok(ReportFormat::Plot),
            "both" => Ok(ReportFormat::Both),
            other => Err(Error::param(format!("unknown format '{other}'"))),
        }
    }
}

fn fmt_f64(v: f64) -> String {
    // Rust's shortest round-trip Display; '.' decimal separator by construction.
    format!("{v}")
}

/// Writes the table as RFC-4180 CSV (UTF-8, header row, '.' decimals).
/// Columns: `experiment, <x>, [<y>,] success_count, trial_count, rate,
/// mean_<label>, std_<label>`; error cells are empty when no trial achieved
/// exact recovery. Runtime is intentionally not included so equal-seed runs
/// are byte-identical regardless of worker count.
pub fn write_csv<W: Write>(table: &ExperimentTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["experiment".to_string(), table.x_name.clone()];
    if let Some(y) = &table.y_name {
        header.push(y.clone());
    }
    header.push("success_count".into());
    header.push("trial_count".into());
    header.push("rate".into());
    header.push(format!("mean_{}", table.error_label));
    header.push(format!("std_{}", table.error_label));
    w.write_record(&header).map_err(csv_err)?;
    for rec in &table.records {
        let mut row = vec![table.experiment.clone(), fmt_f64(rec.x)];
        if table.y_name.is_some() {
            row.push(fmt_f64(rec.y.unwrap_or(f64::NAN)));
        }
        row.push(rec.success_count.to_string());
        row.push(rec.trial_count.to_string());
        row.push(fmt_f64(rec.rate()));
        row.push(rec.mean_error.map(fmt_f64).unwrap_or_default());
        row.push(rec.std_error.map(fmt_f64).unwrap_or_default());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::parse(line, 1, format!("invalid {what}: '{field}'")))
}

/// Parses a CSV produced by [`write_csv`] back into a table (runtime fields
/// come back as 0).
pub fn read_csv<R: Read>(reader: R) -> Result<ExperimentTable> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(csv_err)?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 7 || cols[0] != "experiment" {
        return Err(Error::parse(1, 1, "not an experiment CSV"));
    }
    let has_y = cols.len() == 8;
    let x_name = cols[1].to_string();
    let y_name = if has_y { Some(cols[2].to_string()) } else { None };
    let mean_col = if has_y { 6 } else { 5 };
    let error_label = cols[mean_col]
        .strip_prefix("mean_")
        .ok_or_else(|| Error::parse(1, 1, "missing mean_<label> column"))?
        .to_string();

    let mut experiment = String::new();
    let mut records = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(csv_err)?;
        if rec.len() != cols.len() {
            return Err(Error::parse(line, 1, "wrong field count"));
        }
        experiment = rec[0].to_string();
        let x = parse_field(&rec[1], line, "x value")?;
        let (y, off) = if has_y {
            (Some(parse_field(&rec[2], line, "y value")?), 1)
        } else {
            (None, 0)
        };
        let success_count = parse_field(&rec[2 + off], line, "success count")?;
        let trial_count = parse_field(&rec[3 + off], line, "trial count")?;
        let mean_error = if rec[5 + off].is_empty() {
            None
        } else {
            Some(parse_field(&rec[5 + off], line, "mean error")?)
        };
        let std_error = if rec[6 + off].is_empty() {
            None
        } else {
            Some(parse_field(&rec[6 + off], line, "std error")?)
        };
        records.push(ExperimentRecord {
            x,
            y,
            success_count,
            trial_count,
            mean_error,
            std_error,
            runtime_ms: 0,
        });
    }
    Ok(ExperimentTable {
        experiment,
        x_name,
        y_name,
        error_label,
        records,
    })
}

/// Writes the requested artifacts into `out_dir` and returns their paths.
/// Two-axis tables plot as heatmaps (one pixel per grid cell), single-axis
/// tables as mean +/- std line charts.
pub fn emit_report(
    table: &ExperimentTable,
    format: ReportFormat,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if table.records.is_empty() {
        return Err(Error::param("cannot report an empty table"));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    if matches!(format, ReportFormat::Csv | ReportFormat::Both) {
        let path = out_dir.join(format!("{}.csv", table.experiment));
        let file = std::fs::File::create(&path)?;
        write_csv(table, file)?;
        paths.push(path);
    }
    if matches!(format, ReportFormat::Plot | ReportFormat::Both) {
        let path = out_dir.join(format!("{}.png", table.experiment));
        let img = if table.y_name.is_some() {
            heatmap_image(table)?
        } else {
            line_chart_image(table)?
        };
        img.save(&path)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        paths.push(path);
    }
    Ok(paths)
}

fn unique_sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v
}

fn rate_color(rate: f64) -> image::Rgb<u8> {
    // Dark blue -> teal -> yellow ramp over [0, 1].
    let anchors = [(68u8, 1u8, 84u8), (33, 145, 140), (253, 231, 37)];
    let t = rate.clamp(0.0, 1.0) * 2.0;
    let (lo, hi, f) = if t <= 1.0 {
        (anchors[0], anchors[1], t)
    } else {
        (anchors[1], anchors[2], t - 1.0)
    };
    let lerp = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * f).round() as u8;
    image::Rgb([lerp(lo.0, hi.0), lerp(lo.1, hi.1), lerp(lo.2, hi.2)])
}

/// One pixel per grid cell: width = number of x values, height = number of
/// y values (first y value on the top row).
pub fn heatmap_image(table: &ExperimentTable) -> Result<image::RgbImage> {
    if table.y_name.is_none() {
        return Err(Error::param("heatmap needs a two-axis table"));
    }
    let xs = unique_sorted(table.records.iter().map(|r| r.x));
    let ys = unique_sorted(table.records.iter().filter_map(|r| r.y));
    let mut img = image::RgbImage::new(xs.len() as u32, ys.len() as u32);
    for rec in &table.records {
        let xi = xs.iter().position(|&v| v == rec.x).unwrap() as u32;
        let yi = ys.iter().position(|&v| Some(v) == rec.y).unwrap() as u32;
        img.put_pixel(xi, yi, rate_color(rec.rate()));
    }
    Ok(img)
}

fn draw_line(img: &mut image::RgbImage, a: (i64, i64), b: (i64, i64), color: image::Rgb<u8>) {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Mean +/- std line chart for single-axis tables (points without error
/// statistics are skipped).
pub fn line_chart_image(table: &ExperimentTable) -> Result<image::RgbImage> {
    const W: u32 = 800;
    const H: u32 = 500;
    const MARGIN: i64 = 50;
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    let axis = image::Rgb([0, 0, 0]);
    let series = image::Rgb([197, 48, 48]);
    let bars = image::Rgb([49, 84, 158]);

    let pts: Vec<(f64, f64, f64)> = table
        .records
        .iter()
        .filter_map(|r| Some((r.x, r.mean_error?, r.std_error.unwrap_or(0.0))))
        .collect();
    if pts.is_empty() {
        return Err(Error::param("no error statistics to plot"));
    }
    let xmin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let ymin = pts.iter().map(|p| p.1 - p.2).fold(f64::INFINITY, f64::min);
    let ymax = pts
        .iter()
        .map(|p| p.1 + p.2)
        .fold(f64::NEG_INFINITY, f64::max);
    let xspan = (xmax - xmin).max(1e-12);
    let yspan = (ymax - ymin).max(1e-12);
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = MARGIN as f64 + (x - xmin) / xspan * (W as i64 - 2 * MARGIN) as f64;
        let py = (H as i64 - MARGIN) as f64 - (y - ymin) / yspan * (H as i64 - 2 * MARGIN) as f64;
        (px.round() as i64, py.round() as i64)
    };

    draw_line(&mut img, (MARGIN, MARGIN), (MARGIN, H as i64 - MARGIN), axis);
    draw_line(
        &mut img,
        (MARGIN, H as i64 - MARGIN),
        (W as i64 - MARGIN, H as i64 - MARGIN),
        axis,
    );

    let mut last: Option<(i64, i64)> = None;
    for &(x, mean, std) in &pts {
        let center = to_px(x, mean);
        let lo = to_px(x, mean - std);
        let hi = to_px(x, mean + std);
        draw_line(&mut img, lo, hi, bars);
        draw_line(&mut img, (lo.0 - 3, lo.1), (lo.0 + 3, lo.1), bars);
        draw_line(&mut img, (hi.0 - 3, hi.1), (hi.0 + 3, hi.1), bars);
        for dx in -2..=2i64 {
            for dy in -2..=2i64 {
                let (px, py) = (center.0 + dx, center.1 + dy);
                if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                    img.put_pixel(px as u32, py as u32, series);
                }
            }
        }
        if let Some(prev) = last {
            draw_line(&mut img, prev, center, series);
        }
        last = Some(center);
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Analysis helpers
// ---------------------------------------------------------------------------

/// Ordinary least-squares line fit.
#[derive(Debug, Clone, Copy)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::param("need at least two points to fit a line"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::param("degenerate fit: all x values equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(LinearFit {
        slope,
        intercept,
        r2,
    })
}

/// For each y level, the x value where the recovery rate first crosses 1/2
/// (linear interpolation between bracketing grid points). Levels whose rate
/// never reaches 1/2 are omitted; a level already above 1/2 at the smallest
/// x reports that x.
pub fn phase_boundary_50(table: &ExperimentTable) -> Vec<(f64, f64)> {
    let ys = unique_sorted(table.records.iter().filter_map(|r| r.y));
    let mut boundary = Vec::new();
    for y in ys {
        let mut row: Vec<(f64, f64)> = table
            .records
            .iter()
            .filter(|r| r.y == Some(y))
            .map(|r| (r.x, r.rate()))
            .collect();
        row.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if row.is_empty() {
            continue;
        }
        if row[0].1 >= 0.5 {
            boundary.push((y, row[0].0));
            continue;
        }
        for w in row.windows(2) {
            let (x0, r0) = w[0];
            let (x1, r1) = w[1];
            if r0 < 0.5 && r1 >= 0.5 {
                let fraction = (0.5 - r0) / (r1 - r0);
                boundary.push((y, x0 + fraction * (x1 - x0)));
                break;
            }
        }
    }
    boundary
}

/// Counts rate decreases along ascending x (per y level) exceeding
/// `tolerance` — one trial's worth of noise is the natural tolerance.
pub fn monotonicity_violations(table: &ExperimentTable, tolerance: f64) -> usize {
    let levels: Vec<Option<f64>> = if table.y_name.is_some() {
        unique_sorted(table.records.iter().filter_map(|r| r.y))
            .into_iter()
            .map(Some)
            .collect()
    } else {
        vec![None]
    };
    let mut violations = 0;
    for level in levels {
        let mut row: Vec<(f64, f64)> = table
            .records
            .iter()
            .filter(|r| r.y == level)
            .map(|r| (r.x, r.rate()))
            .collect();
        row.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in row.windows(2) {
            if w[1].1 < w[0].1 - tolerance - 1e-12 {
                violations += 1;
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> GridSpec {
        GridSpec {
            x: Axis::new("k", vec![3.0]),
            y: Some(Axis::new("gamma", vec![0.02])),
            fixed: BTreeMap::new(),
            trials: 1,
            base_seed: 7,
        }
    }

    fn small_fixed() -> BTreeMap<String, f64> {
        let mut fixed = BTreeMap::new();
        fixed.insert("N".into(), 40.0);
        fixed.insert("M".into(), 30.0);
        fixed.insert("K".into(), 2.0);
        fixed.insert("J".into(), 2.0);
        fixed
    }

    #[test]
    fn grid_validation_catches_mistakes() {
        let mut spec = tiny_spec();
        spec.trials = 0;
        assert!(run_lambda_gamma_phase(&spec, &RunOptions::default()).is_err());

        let mut spec = tiny_spec();
        spec.fixed.insert("k".into(), 1.0);
        assert!(run_lambda_gamma_phase(&spec, &RunOptions::default()).is_err());

        let mut spec = tiny_spec();
        spec.fixed.insert("bogus".into(), 1.0);
        assert!(run_lambda_gamma_phase(&spec, &RunOptions::default()).is_err());

        let mut spec = tiny_spec();
        spec.x.name = "lambda".into();
        assert!(run_lambda_gamma_phase(&spec, &RunOptions::default()).is_err());
    }

    #[test]
    fn single_point_deterministic_table() {
        let mut spec = tiny_spec();
        spec.fixed = small_fixed();
        let a = run_lambda_gamma_phase(&spec, &RunOptions::default()).unwrap();
        let b = run_lambda_gamma_phase(&spec, &RunOptions::default()).unwrap();
        assert_eq!(a.records.len(), 1);
        assert_eq!(a.records[0].x, b.records[0].x);
        assert_eq!(a.records[0].success_count, b.records[0].success_count);
        assert_eq!(a.records[0].mean_error, b.records[0].mean_error);
    }

    #[test]
    fn csv_round_trip() {
        let table = ExperimentTable {
            experiment: "phase-nk".into(),
            x_name: "N".into(),
            y_name: Some("K".into()),
            error_label: "l2inf_error".into(),
            records: vec![
                ExperimentRecord {
                    x: 20.0,
                    y: Some(1.0),
                    success_count: 13,
                    trial_count: 20,
                    mean_error: Some(0.1234567890123),
                    std_error: Some(0.01),
                    runtime_ms: 0,
                },
                ExperimentRecord {
                    x: 40.0,
                    y: Some(1.0),
                    success_count: 0,
                    trial_count: 20,
                    mean_error: None,
                    std_error: None,
                    runtime_ms: 0,
                },
            ],
        };
        let mut buf = Vec::new();
        write_csv(&table, &mut buf).unwrap();
        let parsed = read_csv(buf.as_slice()).unwrap();
        assert_eq!(parsed, table);
    }

    #[test]
    fn csv_round_trip_single_axis() {
        let table = ExperimentTable {
            experiment: "error-j".into(),
            x_name: "J".into(),
            y_name: None,
            error_label: "sq_l2inf_error".into(),
            records: vec![ExperimentRecord {
                x: 3.0,
                y: None,
                success_count: 30,
                trial_count: 30,
                mean_error: Some(2.5e-3),
                std_error: Some(0.0),
                runtime_ms: 0,
            }],
        };
        let mut buf = Vec::new();
        write_csv(&table, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), table);
    }

    #[test]
    fn heatmap_dims_equal_axis_lengths() {
        let mut records = Vec::new();
        for y in 0..3 {
            for x in 0..5 {
                records.push(ExperimentRecord {
                    x: x as f64,
                    y: Some(y as f64),
                    success_count: x,
                    trial_count: 5,
                    mean_error: None,
                    std_error: None,
                    runtime_ms: 0,
                });
            }
        }
        let table = ExperimentTable {
            experiment: "phase-nk".into(),
            x_name: "N".into(),
            y_name: Some("K".into()),
            error_label: "l2inf_error".into(),
            records,
        };
        let img = heatmap_image(&table).unwrap();
        assert_eq!(img.width(), 5);
        assert_eq!(img.height(), 3);
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        let fit = linear_fit(&xs, &ys).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 1.0).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_interpolates_half_crossing() {
        let mk = |x: f64, rate_num: usize| ExperimentRecord {
            x,
            y: Some(2.0),
            success_count: rate_num,
            trial_count: 10,
            mean_error: None,
            std_error: None,
            runtime_ms: 0,
        };
        let table = ExperimentTable {
            experiment: "phase-nk".into(),
            x_name: "N".into(),
            y_name: Some("K".into()),
            error_label: "l2inf_error".into(),
            records: vec![mk(10.0, 1), mk(20.0, 4), mk(30.0, 8), mk(40.0, 10)],
        };
        let boundary = phase_boundary_50(&table);
        assert_eq!(boundary.len(), 1);
        let (y, x) = boundary[0];
        assert_eq!(y, 2.0);
        // Crossing between 20 (0.4) and 30 (0.8): 20 + 10 * 0.1/0.4 = 22.5.
        assert!((x - 22.5).abs() < 1e-12);
    }

    #[test]
    fn monotonicity_counter() {
        let mk = |x: f64, rate_num: usize| ExperimentRecord {
            x,
            y: None,
            success_count: rate_num,
            trial_count: 10,
            mean_error: None,
            std_error: None,
            runtime_ms: 0,
        };
        let table = ExperimentTable {
            experiment: "phase-nj".into(),
            x_name: "N".into(),
            y_name: None,
            error_label: "l2inf_error".into(),
            records: vec![mk(1.0, 5), mk(2.0, 4), mk(3.0, 1), mk(4.0, 9)],
        };
        // One-step tolerance forgives 5 -> 4 but not 4 -> 1.
        assert_eq!(monotonicity_violations(&table, 0.1), 1);
    }
}
