//! Coefficient equations of the O operator.
//!
//! At zero temperature `O(t, s) = sum_i f_i(t, s) a_i` with
//!
//! ```text
//! d/dt f_i = i Omega_i f_i + i (lambda_i f_{i+1} + lambda_{i-1} f_{i-1}) + (sum_j l_j f_j) F_i,
//! f_i(s, s) = l_i,        F_i(t) = int_0^t K(t, s) f_i(t, s) ds.
//! ```
//!
//! With unit weights this is the familiar form with `f_i(s, s) = 1` and a plain
//! `sum_j f_j`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::env::{EnvKernel, LorentzSpec, ThermalKernelPair};
use crate::error::{CradleError, Result};
use crate::fock::SystemSpec;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Magnitude above which a coefficient is treated as diverged.
pub const BLOW_UP_GUARD: f64 = 1e12;

/// Schema tag written as the first line of coefficient CSV files.
pub const COEFF_SCHEMA: &str = "# schema: cradle-coefficients v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableSource {
    HistoryGrid,
    OuFast,
    MarkovAnalytic,
    Thermal,
    Imported,
}

impl TableSource {
    fn as_str(self) -> &'static str {
        match self {
            Self::HistoryGrid => "history-grid",
            Self::OuFast => "ou-fast",
            Self::MarkovAnalytic => "markov-analytic",
            Self::Thermal => "thermal",
            Self::Imported => "imported",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "history-grid" => Self::HistoryGrid,
            "ou-fast" => Self::OuFast,
            "markov-analytic" => Self::MarkovAnalytic,
            "thermal" => Self::Thermal,
            "imported" => Self::Imported,
            _ => return None,
        })
    }
}

/// `F_i(t_n)` on a uniform grid `t_n = n dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    dt: f64,
    num_modes: usize,
    values: Vec<C64>,
    source: TableSource,
}

impl CoefficientTable {
    pub fn new(dt: f64, num_modes: usize, values: Vec<C64>, source: TableSource) -> Result<Self> {
        if !(dt > 0.0) || num_modes == 0 || values.is_empty() || values.len() % num_modes != 0 {
            return Err(CradleError::DimensionMismatch(format!(
                "coefficient table with dt={dt}, {num_modes} modes and {} values",
                values.len()
            )));
        }
        if values
            .iter()
            .any(|v| !(v.re.is_finite() && v.im.is_finite()))
        {
            return Err(CradleError::NonFinite {
                step: values
                    .iter()
                    .position(|v| !(v.re.is_finite() && v.im.is_finite()))
                    .unwrap()
                    / num_modes,
            });
        }
        Ok(Self {
            dt,
            num_modes,
            values,
            source,
        })
    }

    /// A table with `F_i = 0` everywhere (closed system).
    pub fn zeros(num_modes: usize, dt: f64, steps: usize) -> Self {
        Self {
            dt,
            num_modes,
            values: vec![ZERO; num_modes * (steps + 1)],
            source: TableSource::MarkovAnalytic,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    pub fn steps(&self) -> usize {
        self.values.len() / self.num_modes - 1
    }

    pub fn t_max(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    pub fn source(&self) -> TableSource {
        self.source
    }

    pub fn at_step(&self, n: usize) -> &[C64] {
        &self.values[n * self.num_modes..(n + 1) * self.num_modes]
    }

    /// Series of `F_mode(t_n)`.
    pub fn mode_series(&self, mode: usize) -> Vec<C64> {
        self.values
            .iter()
            .skip(mode)
            .step_by(self.num_modes)
            .copied()
            .collect()
    }

    /// Linear interpolation in `t`; times past the end use the last row.
    pub fn interpolate_into(&self, t: f64, out: &mut [C64]) {
        let x = (t / self.dt).max(0.0);
        let n = x.floor() as usize;
        if n >= self.steps() {
            out.copy_from_slice(self.at_step(self.steps()));
            return;
        }
        let w = x - n as f64;
        // exact node hits stay bitwise equal to the table
        if w < 1e-9 {
            out.copy_from_slice(self.at_step(n));
            return;
        }
        if w > 1.0 - 1e-9 {
            out.copy_from_slice(self.at_step(n + 1));
            return;
        }
        let (a, b) = (self.at_step(n), self.at_step(n + 1));
        for i in 0..self.num_modes {
            out[i] = a[i] * (1.0 - w) + b[i] * w;
        }
    }

    pub fn interpolate(&self, t: f64) -> Vec<C64> {
        let mut out = vec![ZERO; self.num_modes];
        self.interpolate_into(t, &mut out);
        out
    }

    /// Sup-norm of `self - other` relative to the larger sup-norm of the two,
    /// on the common time grid (the finer table is subsampled).
    pub fn relative_sup_diff(&self, other: &CoefficientTable) -> Result<f64> {
        if self.num_modes != other.num_modes {
            return Err(CradleError::DimensionMismatch(
                "tables have different mode counts".into(),
            ));
        }
        let (coarse, fine) = if self.dt >= other.dt {
            (self, other)
        } else {
            (other, self)
        };
        let ratio = (coarse.dt / fine.dt).round() as usize;
        if ratio == 0 || ((coarse.dt / fine.dt) - ratio as f64).abs() > 1e-9 {
            return Err(CradleError::DimensionMismatch(
                "table steps are not commensurate".into(),
            ));
        }
        let steps = coarse.steps().min(fine.steps() / ratio);
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for n in 0..=steps {
            for (a, b) in coarse.at_step(n).iter().zip(fine.at_step(n * ratio)) {
                diff = diff.max((a - b).norm());
                scale = scale.max(a.norm().max(b.norm()));
            }
        }
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "{COEFF_SCHEMA}")?;
        writeln!(out, "# source: {}", self.source.as_str())?;
        let mut header = vec!["t".to_string()];
        for i in 1..=self.num_modes {
            header.push(format!("re_F{i}"));
            header.push(format!("im_F{i}"));
        }
        writeln!(out, "{}", header.join(","))?;
        for n in 0..=self.steps() {
            let mut row = vec![format_float(n as f64 * self.dt)];
            for v in self.at_step(n) {
                row.push(format_float(v.re));
                row.push(format_float(v.im));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut source = TableSource::Imported;
        let mut schema_seen = false;
        let mut header: Option<usize> = None;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if line == COEFF_SCHEMA {
                    schema_seen = true;
                } else if let Some(tag) = comment.trim().strip_prefix("source:") {
                    source = TableSource::parse(tag.trim()).unwrap_or(TableSource::Imported);
                }
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let Some(width) = header else {
                if cols.len() < 3 || cols.len() % 2 == 0 || cols[0] != "t" {
                    return Err(CradleError::Format(format!(
                        "{}: expected header t,re_F1,im_F1,...",
                        path.display()
                    )));
                }
                header = Some(cols.len());
                continue;
            };
            if cols.len() != width {
                return Err(CradleError::Format(format!(
                    "{}:{}: expected {width} columns, found {}",
                    path.display(),
                    lineno + 1,
                    cols.len()
                )));
            }
            let nums: Vec<f64> = cols
                .iter()
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| {
                    CradleError::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
                })?;
            times.push(nums[0]);
            values.extend(nums[1..].chunks(2).map(|p| C64::new(p[0], p[1])));
        }
        if !schema_seen {
            return Err(CradleError::Format(format!(
                "{}: missing schema line",
                path.display()
            )));
        }
        let width =
            header.ok_or_else(|| CradleError::Format(format!("{}: no header", path.display())))?;
        if times.len() < 2 {
            return Err(CradleError::Format(format!(
                "{}: need at least two rows",
                path.display()
            )));
        }
        let dt = times[1] - times[0];
        for (n, t) in times.iter().enumerate() {
            if (t - n as f64 * dt).abs() > 1e-9 * (1.0 + t.abs()) {
                return Err(CradleError::Format(format!(
                    "{}: time grid is not uniform",
                    path.display()
                )));
            }
        }
        Self::new(dt, (width - 1) / 2, values, source)
    }
}

/// Shortest decimal form that round-trips exactly.
pub fn format_float(x: f64) -> String {
    format!("{x:?}")
}

/// `sum_j l_j v_j`
fn weighted_sum(weights: &[f64], v: &[C64]) -> C64 {
    weights.iter().zip(v).map(|(l, x)| x * *l).sum()
}

/// Linear part `i Omega_i v_i + i (lambda_i v_{i+1} + lambda_{i-1} v_{i-1})`, scaled by `sign`.
#[inline]
fn linear_part(spec: &SystemSpec, v: &[C64], i: usize, sign: f64) -> C64 {
    let n = v.len();
    let mut acc = v[i] * spec.omegas[i];
    if i + 1 < n {
        acc += v[i + 1] * spec.lambdas[i];
    }
    if i > 0 {
        acc += v[i - 1] * spec.lambdas[i - 1];
    }
    I * sign * acc
}

/// Right-hand side of the `f` equation for one column.
#[inline]
fn f_rhs(spec: &SystemSpec, f: &[C64], big_f: &[C64], out: &mut [C64]) {
    let s = weighted_sum(&spec.weights, f);
    for i in 0..f.len() {
        out[i] = linear_part(spec, f, i, 1.0) + s * big_f[i];
    }
}

fn check_grid(dt: f64, t_max: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(CradleError::InvalidParameter(format!(
            "dt must be > 0, got {dt}"
        )));
    }
    if !(t_max >= 0.0) || !t_max.is_finite() {
        return Err(CradleError::InvalidParameter(format!(
            "t_max must be >= 0, got {t_max}"
        )));
    }
    Ok((t_max / dt - 1e-9).ceil().max(0.0) as usize)
}

fn guard(values: &[C64], step: usize) -> Result<()> {
    let mut worst = 0.0f64;
    for v in values {
        if !(v.re.is_finite() && v.im.is_finite()) {
            return Err(CradleError::NonFinite { step });
        }
        worst = worst.max(v.norm());
    }
    if worst > BLOW_UP_GUARD {
        return Err(CradleError::BlowUp {
            step,
            magnitude: worst,
        });
    }
    Ok(())
}

/// Trapezoidal convolution `sum_m w_m K((n - m) dt) v_m` over columns `0..=n`
/// of a flat column-major record with `stride` entries per column.
fn convolve(kvals: &[C64], cols: &[C64], n: usize, stride: usize, dt: f64, out: &mut [C64]) {
    out.iter_mut().for_each(|o| *o = ZERO);
    if n == 0 {
        return;
    }
    for m in 0..=n {
        let w = if m == 0 || m == n { 0.5 * dt } else { dt };
        let k = kvals[n - m] * w;
        let col = &cols[m * stride..(m + 1) * stride];
        for (o, c) in out.iter_mut().zip(col) {
            *o += k * c;
        }
    }
}

/// `f_i(t_n, s_m)` for all columns `m <= n` at the final step.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryGrid {
    pub dt: f64,
    pub step: usize,
    pub num_modes: usize,
    /// Column-major: column `m` holds `(f_1, .., f_N)(t_n, s_m)`.
    pub columns: Vec<C64>,
}

impl HistoryGrid {
    pub fn column(&self, m: usize) -> &[C64] {
        &self.columns[m * self.num_modes..(m + 1) * self.num_modes]
    }
}

#[derive(Debug, Clone)]
pub struct HistorySolution {
    pub table: CoefficientTable,
    pub grid: HistoryGrid,
}

/// Heun predictor-corrector for every column `f(., s_m)` with trapezoidal
/// quadrature for `F`, recomputed at the corrector stage.
pub fn solve_f_history(
    spec: &SystemSpec,
    kernel: &EnvKernel,
    dt: f64,
    t_max: f64,
) -> Result<HistorySolution> {
    spec.validate()?;
    let steps = check_grid(dt, t_max)?;
    let nm = spec.num_modes();
    if let EnvKernel::MarkovianDelta { gamma_big } = kernel {
        let table = markov_coefficients(spec, *gamma_big, dt, t_max)?;
        return Ok(HistorySolution {
            table,
            grid: HistoryGrid {
                dt,
                step: steps,
                num_modes: nm,
                columns: Vec::new(),
            },
        });
    }
    let kvals = kernel.tabulate(dt, steps)?;
    let mut cols: Vec<C64> = Vec::with_capacity((steps + 1) * nm);
    cols.extend(spec.weights.iter().map(|&l| C64::new(l, 0.0)));
    let mut pred = Vec::with_capacity((steps + 1) * nm);
    let mut k1 = vec![ZERO; (steps + 1) * nm];
    let mut values = vec![ZERO; (steps + 1) * nm];
    let mut big_f = vec![ZERO; nm];
    let mut big_f_pred = vec![ZERO; nm];
    let mut k2 = vec![ZERO; nm];
    for n in 0..steps {
        // predictor
        pred.clear();
        for m in 0..=n {
            let col = &cols[m * nm..(m + 1) * nm];
            let slope = &mut k1[m * nm..(m + 1) * nm];
            f_rhs(spec, col, &big_f, slope);
            pred.extend(col.iter().zip(slope.iter()).map(|(c, s)| c + s * dt));
        }
        pred.extend(spec.weights.iter().map(|&l| C64::new(l, 0.0)));
        convolve(&kvals, &pred, n + 1, nm, dt, &mut big_f_pred);
        // corrector
        for m in 0..=n {
            let p = &pred[m * nm..(m + 1) * nm];
            f_rhs(spec, p, &big_f_pred, &mut k2);
            let col = &mut cols[m * nm..(m + 1) * nm];
            for i in 0..nm {
                col[i] += (k1[m * nm + i] + k2[i]) * (0.5 * dt);
            }
        }
        cols.extend(spec.weights.iter().map(|&l| C64::new(l, 0.0)));
        convolve(&kvals, &cols, n + 1, nm, dt, &mut big_f);
        guard(&cols[..(n + 1) * nm], n + 1)?;
        values[(n + 1) * nm..(n + 2) * nm].copy_from_slice(&big_f);
    }
    Ok(HistorySolution {
        table: CoefficientTable::new(dt, nm, values, TableSource::HistoryGrid)?,
        grid: HistoryGrid {
            dt,
            step: steps,
            num_modes: nm,
            columns: cols,
        },
    })
}

/// Runs [`solve_f_history`] at `dt` and `dt / 2` and fails if the tables differ
/// by more than `tol` (relative sup-norm). Returns the finer solution.
pub fn solve_f_history_checked(
    spec: &SystemSpec,
    kernel: &EnvKernel,
    dt: f64,
    t_max: f64,
    tol: f64,
) -> Result<HistorySolution> {
    let coarse = solve_f_history(spec, kernel, dt, t_max)?;
    let fine = solve_f_history(spec, kernel, 0.5 * dt, t_max)?;
    let diff = coarse.table.relative_sup_diff(&fine.table)?;
    if diff > tol {
        return Err(CradleError::Convergence(format!(
            "F table changed by {diff:.3e} (relative) under dt-halving from {dt} (tolerance {tol:.1e})"
        )));
    }
    Ok(fine)
}

/// Right-hand side of the closed OU system for `F`.
fn ou_rhs(spec: &SystemSpec, lorentz: &LorentzSpec, f: &[C64], out: &mut [C64]) {
    let s = weighted_sum(&spec.weights, f);
    let k0 = lorentz.k0();
    let rate = lorentz.rate();
    for i in 0..f.len() {
        out[i] = k0 * spec.weights[i] - rate * f[i] + linear_part(spec, f, i, 1.0) + f[i] * s;
    }
}

/// Closed ODE for the OU kernel, obtained by differentiating the convolution:
/// `dF_i/dt = K(0) l_i - (gamma + i Delta) F_i + i Omega_i F_i + i (lambda_i F_{i+1} + lambda_{i-1} F_{i-1}) + F_i sum_j l_j F_j`,
/// integrated with classical RK4 from `F(0) = 0`.
pub fn solve_f_ou_fast(
    spec: &SystemSpec,
    lorentz: &LorentzSpec,
    dt: f64,
    t_max: f64,
) -> Result<CoefficientTable> {
    spec.validate()?;
    lorentz.validate()?;
    let steps = check_grid(dt, t_max)?;
    let nm = spec.num_modes();
    let mut values = Vec::with_capacity((steps + 1) * nm);
    let mut f = vec![ZERO; nm];
    values.extend_from_slice(&f);
    let (mut k1, mut k2, mut k3, mut k4) = (
        vec![ZERO; nm],
        vec![ZERO; nm],
        vec![ZERO; nm],
        vec![ZERO; nm],
    );
    let mut tmp = vec![ZERO; nm];
    for n in 0..steps {
        ou_rhs(spec, lorentz, &f, &mut k1);
        for i in 0..nm {
            tmp[i] = f[i] + k1[i] * (0.5 * dt);
        }
        ou_rhs(spec, lorentz, &tmp, &mut k2);
        for i in 0..nm {
            tmp[i] = f[i] + k2[i] * (0.5 * dt);
        }
        ou_rhs(spec, lorentz, &tmp, &mut k3);
        for i in 0..nm {
            tmp[i] = f[i] + k3[i] * dt;
        }
        ou_rhs(spec, lorentz, &tmp, &mut k4);
        for i in 0..nm {
            f[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0);
        }
        guard(&f, n + 1)?;
        values.extend_from_slice(&f);
    }
    CoefficientTable::new(dt, nm, values, TableSource::OuFast)
}

/// Markov limit `K = Gamma delta(t - s)`: `F_i = Gamma l_i / 2`, constant.
pub fn markov_coefficients(
    spec: &SystemSpec,
    gamma_big: f64,
    dt: f64,
    t_max: f64,
) -> Result<CoefficientTable> {
    spec.validate()?;
    let steps = check_grid(dt, t_max)?;
    let row: Vec<C64> = spec
        .weights
        .iter()
        .map(|&l| C64::new(0.5 * gamma_big * l, 0.0))
        .collect();
    let values = row
        .iter()
        .copied()
        .cycle()
        .take(row.len() * (steps + 1))
        .collect();
    CoefficientTable::new(dt, spec.num_modes(), values, TableSource::MarkovAnalytic)
}

/// Stationary root of the single-cavity OU Riccati equation
/// `F^2 + (i Omega - gamma - i Delta) F + Gamma gamma / 2 = 0` reached from `F(0) = 0`.
pub fn riccati_steady_state(omega: f64, lorentz: &LorentzSpec) -> C64 {
    let b = I * omega - lorentz.rate();
    let c = C64::new(lorentz.k0(), 0.0);
    let disc = (b * b - c * 4.0).sqrt();
    let r1 = (-b + disc) * 0.5;
    let r2 = (-b - disc) * 0.5;
    // the attracting root: linearisation 2F + b has negative real part
    if (r1 * 2.0 + b).re < (r2 * 2.0 + b).re {
        r1
    } else {
        r2
    }
}

/// Long-time coefficient values for one cavity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingSummary {
    pub re: f64,
    pub im: f64,
    /// `Im F / Re F`
    pub ratio: f64,
    /// `|Im F| / Re F`: strength of the induced coupling relative to the damping.
    pub dominance: f64,
    /// Relative change between the two halves of the tail window.
    pub drift: f64,
    /// `drift < 1%`
    pub stationary: bool,
}

/// Arithmetic mean of `F_i` over the final `window` fraction of the table.
pub fn effective_coupling_ratio(
    table: &CoefficientTable,
    window: f64,
) -> Result<Vec<CouplingSummary>> {
    if !(window > 0.0 && window <= 1.0) {
        return Err(CradleError::InvalidParameter(format!(
            "tail window must be in (0, 1], got {window}"
        )));
    }
    let steps = table.steps();
    let len = ((steps + 1) as f64 * window).round().max(2.0) as usize;
    if len > steps + 1 {
        return Err(CradleError::InvalidParameter(
            "table too short for the tail window".into(),
        ));
    }
    let start = steps + 1 - len;
    let half = start + len / 2;
    let mean = |a: usize, b: usize, i: usize| -> C64 {
        (a..b).map(|n| table.at_step(n)[i]).sum::<C64>() / (b - a) as f64
    };
    let out = (0..table.num_modes())
        .map(|i| {
            let all = mean(start, steps + 1, i);
            let first = mean(start, half, i);
            let second = mean(half, steps + 1, i);
            let drift = if all.norm() > 0.0 {
                (second - first).norm() / all.norm()
            } else {
                (second - first).norm()
            };
            let ratio = if all.im == 0.0 { 0.0 } else { all.im / all.re };
            let dominance = ratio.abs();
            if drift >= 0.01 {
                log::warn!(
                    "cavity {}: tail of F drifts by {:.2}%",
                    i + 1,
                    100.0 * drift
                );
            }
            CouplingSummary {
                re: all.re,
                im: all.im,
                ratio,
                dominance,
                drift,
                stationary: drift < 0.01,
            }
        })
        .collect();
    Ok(out)
}

/// Default step cap for the thermal solver.
pub const DEFAULT_THERMAL_STEP_CAP: usize = 160;

/// Coefficients of the two O operators of the finite-temperature problem:
///
/// ```text
/// O1(t, s) = sum_i x_i(t, s) a_i     + int_0^t x'(t, s, s') w*_{s'} ds'
/// O2(t, s) = sum_i y_i(t, s) a_i^dag + int_0^t y'(t, s, s') z*_{s'} ds'
/// ```
///
/// Only the slices at the final time are retained for the two- and
/// three-time functions; the convolutions are kept for every step.
#[derive(Debug, Clone)]
pub struct ThermalCoeffGrids {
    pub dt: f64,
    pub steps: usize,
    pub num_modes: usize,
    /// `x_i(T, s_m)`, column-major by `m`.
    pub x: Vec<C64>,
    pub y: Vec<C64>,
    /// `x'(T, s_m, s'_k)` at flat index `m * (steps + 1) + k`.
    pub xp: Vec<C64>,
    pub yp: Vec<C64>,
    /// `X_i(t_n)` row-major by `n`.
    pub big_x: Vec<C64>,
    pub big_y: Vec<C64>,
    /// `X'(t_n, s'_k)` at flat index `n * (steps + 1) + k` (zero for `k > n`).
    pub big_xp: Vec<C64>,
    pub big_yp: Vec<C64>,
    /// Largest `|Y_i|` and `|Y'|` seen during the run: the only terms through
    /// which the second environment feeds back into `x`.
    pub sup_y_conv: f64,
    pub sup_yp_conv: f64,
}

impl ThermalCoeffGrids {
    /// `X_i(t_n)` as a coefficient table.
    pub fn x_table(&self) -> Result<CoefficientTable> {
        CoefficientTable::new(
            self.dt,
            self.num_modes,
            self.big_x.clone(),
            TableSource::Thermal,
        )
    }

    pub fn x_column(&self, m: usize) -> &[C64] {
        &self.x[m * self.num_modes..(m + 1) * self.num_modes]
    }
}

/// Bytes held by the thermal solver for `steps` steps and `n` cavities.
pub fn thermal_memory_bytes(steps: usize, n: usize) -> u64 {
    let s = steps as u64 + 1;
    // xp, yp, their predictors and slopes, plus the X', Y' histories
    let three = 8 * s * s;
    let two = 8 * s * n as u64;
    (three + two) * 16
}

struct ThermalState {
    x: Vec<C64>,
    y: Vec<C64>,
    xp: Vec<C64>,
    yp: Vec<C64>,
}

struct ThermalConv {
    x: Vec<C64>,
    y: Vec<C64>,
    xp: Vec<C64>,
    yp: Vec<C64>,
}

/// Integrates the finite-temperature coefficient system with the same Heun and
/// trapezoid scheme as [`solve_f_history`].
///
/// Boundary values imposed on every new column and row:
/// `x_i(t, t) = y_i(t, t) = l_i`, `x'(t, t, s') = y'(t, t, s') = 0`,
/// `x'(t, s, t) = -sum_j l_j x_j(t, s)`, `y'(t, s, t) = sum_j l_j y_j(t, s)`.
/// At the corner `s = s' = t` the first pair wins, so `x'(t, t, t) = 0`.
pub fn solve_thermal_coeffs(
    spec: &SystemSpec,
    kernels: &ThermalKernelPair,
    dt: f64,
    t_max: f64,
    step_cap: usize,
) -> Result<ThermalCoeffGrids> {
    spec.validate()?;
    let steps = check_grid(dt, t_max)?;
    let nm = spec.num_modes();
    if steps > step_cap {
        return Err(CradleError::MemoryCap {
            steps,
            cap_steps: step_cap,
            required_bytes: thermal_memory_bytes(steps, nm),
        });
    }
    if (kernels.du - dt).abs() > 1e-12 * dt || kernels.steps() < steps {
        return Err(CradleError::DimensionMismatch(format!(
            "thermal kernels tabulated with du={} over {} steps; solver needs du={dt} over {steps}",
            kernels.du,
            kernels.steps()
        )));
    }
    let k1 = &kernels.k1[..=steps];
    let k2 = &kernels.k2[..=steps];
    let s1 = steps + 1;
    let l: Vec<C64> = spec.weights.iter().map(|&w| C64::new(w, 0.0)).collect();

    let mut st = ThermalState {
        x: vec![ZERO; s1 * nm],
        y: vec![ZERO; s1 * nm],
        xp: vec![ZERO; s1 * s1],
        yp: vec![ZERO; s1 * s1],
    };
    st.x[..nm].copy_from_slice(&l);
    st.y[..nm].copy_from_slice(&l);
    let mut out = ThermalCoeffGrids {
        dt,
        steps,
        num_modes: nm,
        x: Vec::new(),
        y: Vec::new(),
        xp: Vec::new(),
        yp: Vec::new(),
        big_x: vec![ZERO; s1 * nm],
        big_y: vec![ZERO; s1 * nm],
        big_xp: vec![ZERO; s1 * s1],
        big_yp: vec![ZERO; s1 * s1],
        sup_y_conv: 0.0,
        sup_yp_conv: 0.0,
    };
    let mut conv = ThermalConv {
        x: vec![ZERO; nm],
        y: vec![ZERO; nm],
        xp: vec![ZERO; s1],
        yp: vec![ZERO; s1],
    };
    let mut slope = ThermalState {
        x: vec![ZERO; s1 * nm],
        y: vec![ZERO; s1 * nm],
        xp: vec![ZERO; s1 * s1],
        yp: vec![ZERO; s1 * s1],
    };
    let mut slope2 = ThermalState {
        x: vec![ZERO; s1 * nm],
        y: vec![ZERO; s1 * nm],
        xp: vec![ZERO; s1 * s1],
        yp: vec![ZERO; s1 * s1],
    };
    let mut pred = ThermalState {
        x: vec![ZERO; s1 * nm],
        y: vec![ZERO; s1 * nm],
        xp: vec![ZERO; s1 * s1],
        yp: vec![ZERO; s1 * s1],
    };

    let thermal_rhs = |st: &ThermalState, conv: &ThermalConv, n: usize, d: &mut ThermalState| {
        for m in 0..=n {
            let x = &st.x[m * nm..(m + 1) * nm];
            let y = &st.y[m * nm..(m + 1) * nm];
            let sx = weighted_sum(&spec.weights, x);
            let sy = weighted_sum(&spec.weights, y);
            let xy: C64 = x.iter().zip(&conv.y).map(|(a, b)| a * b).sum();
            let yx: C64 = y.iter().zip(&conv.x).map(|(a, b)| a * b).sum();
            for i in 0..nm {
                d.x[m * nm + i] =
                    linear_part(spec, x, i, 1.0) + sx * conv.x[i] + l[i] * xy - l[i] * conv.yp[m];
                d.y[m * nm + i] =
                    linear_part(spec, y, i, -1.0) - l[i] * yx - sy * conv.y[i] - l[i] * conv.xp[m];
            }
            for k in 0..=n {
                d.xp[m * s1 + k] = sx * conv.xp[k];
                d.yp[m * s1 + k] = -sy * conv.yp[k];
            }
        }
    };

    let convolve_all = |st: &ThermalState, n: usize, conv: &mut ThermalConv| {
        convolve(k1, &st.x, n, nm, dt, &mut conv.x);
        convolve(k2, &st.y, n, nm, dt, &mut conv.y);
        conv.xp.iter_mut().for_each(|v| *v = ZERO);
        conv.yp.iter_mut().for_each(|v| *v = ZERO);
        if n == 0 {
            return;
        }
        for m in 0..=n {
            let w = if m == 0 || m == n { 0.5 * dt } else { dt };
            let (a, b) = (k1[n - m] * w, k2[n - m] * w);
            for k in 0..=n {
                conv.xp[k] += a * st.xp[m * s1 + k];
                conv.yp[k] += b * st.yp[m * s1 + k];
            }
        }
    };

    // boundary column s = t_n and row s' = t_n
    let impose_boundary = |st: &mut ThermalState, n: usize| {
        st.x[n * nm..(n + 1) * nm].copy_from_slice(&l);
        st.y[n * nm..(n + 1) * nm].copy_from_slice(&l);
        for m in 0..n {
            let sx = weighted_sum(&spec.weights, &st.x[m * nm..(m + 1) * nm]);
            let sy = weighted_sum(&spec.weights, &st.y[m * nm..(m + 1) * nm]);
            st.xp[m * s1 + n] = -sx;
            st.yp[m * s1 + n] = sy;
        }
        for k in 0..=n {
            st.xp[n * s1 + k] = ZERO;
            st.yp[n * s1 + k] = ZERO;
        }
    };

    impose_boundary(&mut st, 0);
    for n in 0..steps {
        thermal_rhs(&st, &conv, n, &mut slope);
        for m in 0..=n {
            for i in 0..nm {
                let j = m * nm + i;
                pred.x[j] = st.x[j] + slope.x[j] * dt;
                pred.y[j] = st.y[j] + slope.y[j] * dt;
            }
            for k in 0..=n {
                let j = m * s1 + k;
                pred.xp[j] = st.xp[j] + slope.xp[j] * dt;
                pred.yp[j] = st.yp[j] + slope.yp[j] * dt;
            }
        }
        impose_boundary(&mut pred, n + 1);
        let mut conv_pred = ThermalConv {
            x: vec![ZERO; nm],
            y: vec![ZERO; nm],
            xp: vec![ZERO; s1],
            yp: vec![ZERO; s1],
        };
        convolve_all(&pred, n + 1, &mut conv_pred);
        thermal_rhs(&pred, &conv_pred, n, &mut slope2);
        for m in 0..=n {
            for i in 0..nm {
                let j = m * nm + i;
                st.x[j] += (slope.x[j] + slope2.x[j]) * (0.5 * dt);
                st.y[j] += (slope.y[j] + slope2.y[j]) * (0.5 * dt);
            }
            for k in 0..=n {
                let j = m * s1 + k;
                st.xp[j] += (slope.xp[j] + slope2.xp[j]) * (0.5 * dt);
                st.yp[j] += (slope.yp[j] + slope2.yp[j]) * (0.5 * dt);
            }
        }
        impose_boundary(&mut st, n + 1);
        convolve_all(&st, n + 1, &mut conv);
        guard(&st.x[..(n + 2) * nm], n + 1)?;
        guard(&st.y[..(n + 2) * nm], n + 1)?;
        guard(&conv.xp, n + 1)?;
        guard(&conv.yp, n + 1)?;
        let row = n + 1;
        out.big_x[row * nm..(row + 1) * nm].copy_from_slice(&conv.x);
        out.big_y[row * nm..(row + 1) * nm].copy_from_slice(&conv.y);
        out.big_xp[row * s1..(row + 1) * s1].copy_from_slice(&conv.xp);
        out.big_yp[row * s1..(row + 1) * s1].copy_from_slice(&conv.yp);
        out.sup_y_conv = conv
            .y
            .iter()
            .map(|v| v.norm())
            .fold(out.sup_y_conv, f64::max);
        out.sup_yp_conv = conv
            .yp
            .iter()
            .map(|v| v.norm())
            .fold(out.sup_yp_conv, f64::max);
    }
    out.x = st.x;
    out.y = st.y;
    out.xp = st.xp;
    out.yp = st.yp;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ou_kernel, thermal_kernels, QuadConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_cavity() -> SystemSpec {
        SystemSpec::uniform(2, 1.0)
    }

    #[test]
    fn initial_value_is_zero() {
        let lorentz = LorentzSpec::new(1.0, 0.5, 2.0).unwrap();
        let k = ou_kernel(lorentz).unwrap();
        let h = solve_f_history(&two_cavity(), &k, 0.01, 0.5).unwrap();
        assert!(h.table.at_step(0).iter().all(|v| *v == ZERO));
        let f = solve_f_ou_fast(&two_cavity(), &lorentz, 0.01, 0.5).unwrap();
        assert!(f.at_step(0).iter().all(|v| *v == ZERO));
        assert_eq!(h.table.steps(), 50);
    }

    #[test]
    fn symmetric_pair_gives_identical_columns() {
        let lorentz = LorentzSpec::new(1.0, 0.1, 10.0).unwrap();
        let k = ou_kernel(lorentz).unwrap();
        let h = solve_f_history(&two_cavity(), &k, 0.01, 5.0).unwrap();
        for n in 0..=h.table.steps() {
            let row = h.table.at_step(n);
            assert!((row[0] - row[1]).norm() <= 1e-10);
        }
    }

    #[test]
    fn history_and_fast_path_agree() {
        let spec = SystemSpec::new(vec![1.0, 1.3], vec![0.4, 0.0], vec![1.0, 0.7]).unwrap();
        let lorentz = LorentzSpec::new(1.0, 0.8, 2.0).unwrap();
        let k = ou_kernel(lorentz).unwrap();
        let fast = solve_f_ou_fast(&spec, &lorentz, 0.001, 4.0).unwrap();
        let a = solve_f_history(&spec, &k, 0.01, 4.0).unwrap().table;
        let b = solve_f_history(&spec, &k, 0.005, 4.0).unwrap().table;
        let ea = a.relative_sup_diff(&fast).unwrap();
        let eb = b.relative_sup_diff(&fast).unwrap();
        // second-order history stepping
        assert!(ea / eb > 3.5 && ea / eb < 4.5, "ratio {}", ea / eb);
        assert!(eb < 1e-4);
    }

    #[test]
    fn markov_table_is_constant() {
        let spec = SystemSpec::new(vec![1.0, 2.0], vec![0.3, 0.0], vec![1.0, 1.0]).unwrap();
        let t = markov_coefficients(&spec, 1.0, 0.1, 2.0).unwrap();
        for n in 0..=t.steps() {
            assert!(t.at_step(n).iter().all(|v| *v == C64::new(0.5, 0.0)));
        }
        let r = effective_coupling_ratio(&t, 0.2).unwrap();
        assert!(r.iter().all(|s| s.ratio == 0.0 && s.stationary));
        let via =
            solve_f_history(&spec, &crate::env::markovian_kernel(1.0).unwrap(), 0.1, 2.0).unwrap();
        assert_eq!(via.table, t);
    }

    #[test]
    fn fast_path_reaches_riccati_root() {
        let spec = SystemSpec::uniform(1, 1.0);
        let lorentz = LorentzSpec::new(1.0, 0.5, 3.0).unwrap();
        let table = solve_f_ou_fast(&spec, &lorentz, 0.01, 200.0).unwrap();
        let f = table.at_step(table.steps())[0];
        let residual = f * f + (I * 1.0 - lorentz.rate()) * f + lorentz.k0();
        assert!(residual.norm() <= 1e-8, "residual {residual}");
        let root = riccati_steady_state(1.0, &lorentz);
        assert!((root - f).norm() <= 1e-8);
        let tail = effective_coupling_ratio(&table, 0.2).unwrap()[0];
        assert!(tail.stationary);
        assert!((C64::new(tail.re, tail.im) - root).norm() <= 1e-8);
    }

    #[test]
    fn broad_kernel_approaches_markov_value() {
        let spec = two_cavity();
        let lorentz = LorentzSpec::new(1.0, 100.0, 0.0).unwrap();
        let t = solve_f_ou_fast(&spec, &lorentz, 1e-4, 1.0).unwrap();
        let last = t.at_step(t.steps());
        for v in last {
            assert!((v - 0.5).norm() < 0.02);
        }
    }

    fn long_time(delta: f64, tau: f64) -> CouplingSummary {
        let lorentz = LorentzSpec::from_tau(1.0, tau, delta).unwrap();
        let t = solve_f_ou_fast(&two_cavity(), &lorentz, 0.01, 400.0).unwrap();
        effective_coupling_ratio(&t, 0.2).unwrap()[0]
    }

    #[test]
    fn dominance_grows_with_detuning_and_memory() {
        let mut last = f64::NEG_INFINITY;
        for delta in [2.0, 4.0, 6.0, 8.0, 10.0] {
            let r = long_time(delta, 2.0);
            assert!(r.stationary);
            assert!(
                r.dominance > last,
                "delta {delta}: {} <= {last}",
                r.dominance
            );
            // above the cavity frequency the induced coupling is negative
            assert!(r.ratio < 0.0);
            last = r.dominance;
        }
        let mut last = f64::NEG_INFINITY;
        for tau in [0.5, 1.0, 2.0, 3.0] {
            let r = long_time(5.0, tau);
            assert!(r.dominance > last, "tau {tau}: {} <= {last}", r.dominance);
            last = r.dominance;
        }
    }

    #[test]
    fn blow_up_is_reported() {
        // a non-decaying kernel drives the Riccati term to a finite-time singularity
        let spec = SystemSpec::uniform(1, 0.0);
        let tab = crate::env::TabulatedKernel::uniform(0.01, 2000, |_| C64::new(50.0, 0.0));
        let err = solve_f_history(&spec, &EnvKernel::Tabulated(tab), 0.01, 20.0).unwrap_err();
        assert!(
            matches!(
                err,
                CradleError::BlowUp { .. } | CradleError::NonFinite { .. }
            ),
            "{err}"
        );
    }

    #[test]
    fn dt_halving_check_flags_coarse_steps() {
        let lorentz = LorentzSpec::new(1.0, 0.5, 10.0).unwrap();
        let k = ou_kernel(lorentz).unwrap();
        assert!(matches!(
            solve_f_history_checked(&two_cavity(), &k, 0.2, 4.0, 1e-6),
            Err(CradleError::Convergence(_))
        ));
        assert!(solve_f_history_checked(&two_cavity(), &k, 0.005, 2.0, 1e-2).is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let lorentz = LorentzSpec::new(1.0, 0.5, 2.0).unwrap();
        let t = solve_f_ou_fast(&two_cavity(), &lorentz, 0.1, 3.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        t.write_csv(&path).unwrap();
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.starts_with(COEFF_SCHEMA));
        let back = CoefficientTable::read_csv(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn interpolation_is_linear_and_exact_at_nodes() {
        let t = CoefficientTable::new(
            0.5,
            1,
            vec![C64::new(0.0, 0.0), C64::new(1.0, 2.0), C64::new(3.0, 0.0)],
            TableSource::Imported,
        )
        .unwrap();
        assert_eq!(t.interpolate(0.5)[0], C64::new(1.0, 2.0));
        assert_eq!(t.interpolate(0.25)[0], C64::new(0.5, 1.0));
        assert_eq!(t.interpolate(9.0)[0], C64::new(3.0, 0.0));
    }

    #[test]
    fn thermal_solver_reduces_to_zero_temperature() {
        let spec = SystemSpec::new(vec![1.0, 1.0], vec![0.5, 0.0], vec![1.0, 1.0]).unwrap();
        let lorentz = LorentzSpec::new(1.0, 1.0, 2.0).unwrap();
        let dt = 0.05;
        let kernels = thermal_kernels(&lorentz, 1e9, dt, 60, &QuadConfig::default()).unwrap();
        let th = solve_thermal_coeffs(&spec, &kernels, dt, 3.0, 160).unwrap();
        let zero_t = solve_f_history(&spec, &ou_kernel(lorentz).unwrap(), dt, 3.0).unwrap();
        let diff = th
            .x_table()
            .unwrap()
            .relative_sup_diff(&zero_t.table)
            .unwrap();
        assert!(diff <= 1e-10, "X vs F: {diff}");
        for m in 0..=th.steps {
            for (a, b) in th.x_column(m).iter().zip(zero_t.grid.column(m)) {
                assert!((a - b).norm() <= 1e-10);
            }
        }
        assert!(th.sup_y_conv <= 1e-10 && th.sup_yp_conv <= 1e-10);
    }

    #[test]
    fn thermal_boundaries_hold() {
        let spec = SystemSpec::uniform(2, 1.0);
        let lorentz = LorentzSpec::new(1.0, 1.0, 1.0).unwrap();
        let dt = 0.05;
        let kernels = thermal_kernels(&lorentz, 1.0, dt, 20, &QuadConfig::default()).unwrap();
        let th = solve_thermal_coeffs(&spec, &kernels, dt, 1.0, 160).unwrap();
        let s1 = th.steps + 1;
        let last = th.steps;
        assert_eq!(th.x_column(last), &[C64::new(1.0, 0.0); 2]);
        assert_eq!(&th.y[last * 2..], &[C64::new(1.0, 0.0); 2]);
        for k in 0..s1 {
            assert_eq!(th.xp[last * s1 + k], ZERO);
            assert_eq!(th.yp[last * s1 + k], ZERO);
        }
        for m in 0..last {
            let sy: C64 = th.y[m * 2..m * 2 + 2].iter().sum();
            let sx: C64 = th.x[m * 2..m * 2 + 2].iter().sum();
            assert_eq!(th.yp[m * s1 + last], sy);
            assert_eq!(th.xp[m * s1 + last], -sx);
        }
        // finite temperature feeds back into x
        assert!(th.sup_y_conv > 1e-3);
    }

    #[test]
    fn thermal_memory_cap_is_explicit() {
        let spec = SystemSpec::uniform(2, 1.0);
        let lorentz = LorentzSpec::new(1.0, 1.0, 1.0).unwrap();
        let kernels = thermal_kernels(&lorentz, 1.0, 0.1, 10, &QuadConfig::default()).unwrap();
        match solve_thermal_coeffs(&spec, &kernels, 0.1, 20.0, 160) {
            Err(CradleError::MemoryCap {
                steps,
                required_bytes,
                ..
            }) => {
                assert_eq!(steps, 200);
                assert_eq!(required_bytes, thermal_memory_bytes(200, 2));
            }
            other => panic!("expected memory cap error, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn permutation_symmetric_specs_give_symmetric_tables(
            omega in 0.5f64..2.0, gamma in 0.2f64..2.0, delta in -3.0f64..3.0, lam in 0.0f64..1.0
        ) {
            // the chain 1-2-3 with equal end frequencies is symmetric under 1 <-> 3
            let spec = SystemSpec::new(vec![omega, 1.0, omega], vec![lam, lam, 0.0], vec![1.0; 3]).unwrap();
            let lorentz = LorentzSpec::new(1.0, gamma, delta).unwrap();
            let t = solve_f_ou_fast(&spec, &lorentz, 0.01, 3.0).unwrap();
            for n in 0..=t.steps() {
                let row = t.at_step(n);
                prop_assert!((row[0] - row[2]).norm() <= 1e-10);
            }
        }
    }

    #[test]
    fn tail_mean_uses_final_fifth() {
        let vals: Vec<C64> = (0..=99)
            .map(|n| C64::new(if n >= 80 { 1.0 } else { 0.0 }, 0.5))
            .collect();
        let t = CoefficientTable::new(1.0, 1, vals, TableSource::Imported).unwrap();
        let s = effective_coupling_ratio(&t, 0.2).unwrap()[0];
        assert_abs_diff_eq!(s.re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.ratio, 0.5, epsilon = 1e-12);
    }
}
