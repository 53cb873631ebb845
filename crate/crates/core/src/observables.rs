//! Read-outs on single-cavity states: cat-transfer fidelity, Wigner functions,
//! negativity volume and photon numbers.

use std::f64::consts::{FRAC_2_PI, PI};
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::coeff::format_float;
use crate::error::{CradleError, Result};
use crate::fock::{cat_amplitudes, number_operator, DensOp, QuantumState};

pub const FIDELITY_SCHEMA: &str = "# schema: cradle-fidelity v1";
pub const WIGNER_SCHEMA: &str = "# schema: cradle-wigner v1";
pub const DEFAULT_THETA_POINTS: usize = 256;
pub const DEFAULT_WIGNER_POINTS: usize = 121;

fn single_mode(rho: &DensOp) -> Result<usize> {
    if rho.space().num_modes() != 1 {
        return Err(CradleError::DimensionMismatch(format!(
            "expected a single-mode state, got {} modes",
            rho.space().num_modes()
        )));
    }
    Ok(rho.space().cutoff())
}

/// Overlap with the rotated cat as a trigonometric polynomial in `theta`:
/// `F(theta) = Re sum_k g_k e^{i k theta}`, `k = n - m`.
struct RotatedOverlap {
    /// `g_k` for `k >= 0`, with the conjugate `-k` term folded into `k`.
    g: Vec<C64>,
}

impl RotatedOverlap {
    fn new(rho: &DMatrix<C64>, c: &[C64]) -> Self {
        let nc = c.len();
        let mut g = vec![C64::new(0.0, 0.0); nc];
        for n in 0..nc {
            for m in 0..=n {
                let w = if n == m { 1.0 } else { 2.0 };
                g[n - m] += c[n].conj() * rho[(n, m)] * c[m] * w;
            }
        }
        Self { g }
    }

    fn eval(&self, theta: f64) -> f64 {
        let mut acc = self.g[0].re;
        for (k, gk) in self.g.iter().enumerate().skip(1) {
            acc += (gk * C64::from_polar(1.0, k as f64 * theta)).re;
        }
        acc
    }
}

/// Maximises `<psi_cat(theta)| rho |psi_cat(theta)>` over the rotation `theta`
/// of the target cat `(|alpha e^{-i theta}> + |-alpha e^{-i theta}>)/sqrt(N)`.
///
/// Returns `(fidelity, theta*)` with `theta*` in `[0, 2 pi)`.
pub fn transfer_fidelity(rho: &DensOp, alpha: C64, theta_points: usize) -> Result<(f64, f64)> {
    let nc = single_mode(rho)?;
    if theta_points < 3 {
        return Err(CradleError::InvalidParameter(
            "need at least 3 theta points".into(),
        ));
    }
    let c = cat_amplitudes(alpha, 0.0, nc)?;
    let poly = RotatedOverlap::new(rho.matrix(), &c);
    let h = 2.0 * PI / theta_points as f64;
    let (mut best_k, mut best) = (0usize, f64::NEG_INFINITY);
    for k in 0..theta_points {
        let v = poly.eval(k as f64 * h);
        if v > best {
            best = v;
            best_k = k;
        }
    }
    let (mut theta, mut value) = (best_k as f64 * h, best);
    let mut step = h;
    while step > 1e-5 {
        let (fl, fr) = (poly.eval(theta - step), poly.eval(theta + step));
        let denom = fl - 2.0 * value + fr;
        let mut moved = false;
        if denom < 0.0 {
            let shift = 0.5 * step * (fl - fr) / denom;
            if shift.abs() <= step {
                let cand = theta + shift;
                let v = poly.eval(cand);
                if v > value {
                    theta = cand;
                    value = v;
                    moved = true;
                }
            }
        }
        if !moved {
            if fl > value {
                theta -= step;
                value = fl;
            } else if fr > value {
                theta += step;
                value = fr;
            }
        }
        step *= 0.25;
    }
    let theta = theta.rem_euclid(2.0 * PI);
    let trace = rho.trace().re.max(1.0);
    if value > trace + 1e-9 || value < -1e-9 {
        log::warn!("fidelity {value} outside [0, 1] by more than the clipping tolerance");
    }
    Ok((value.clamp(0.0, 1.0), theta))
}

/// Per-cavity fidelity traces at probe times.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityCurve {
    pub times: Vec<f64>,
    /// `values[mode][probe]`
    pub values: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
}

impl FidelityCurve {
    /// Fidelities of every cavity from reduced states `reduced[probe][mode]`.
    pub fn from_reduced(
        times: &[f64],
        reduced: &[Vec<DensOp>],
        alpha: C64,
        theta_points: usize,
    ) -> Result<Self> {
        let modes = reduced.first().map_or(0, |r| r.len());
        let mut values = vec![Vec::with_capacity(times.len()); modes];
        let mut theta = vec![Vec::with_capacity(times.len()); modes];
        for row in reduced {
            for (i, rho) in row.iter().enumerate() {
                let (f, th) = transfer_fidelity(rho, alpha, theta_points)?;
                values[i].push(f);
                theta[i].push(th);
            }
        }
        Ok(Self {
            times: times.to_vec(),
            values,
            theta,
        })
    }

    pub fn num_modes(&self) -> usize {
        self.values.len()
    }

    /// `(max value, time of max)` for a cavity.
    pub fn max_of(&self, mode: usize) -> (f64, f64) {
        self.values[mode]
            .iter()
            .zip(&self.times)
            .fold((f64::NEG_INFINITY, 0.0), |acc, (&v, &t)| {
                if v > acc.0 {
                    (v, t)
                } else {
                    acc
                }
            })
    }

    pub fn argmax(&self, mode: usize) -> usize {
        let mut best = 0;
        for (k, v) in self.values[mode].iter().enumerate() {
            if *v > self.values[mode][best] {
                best = k;
            }
        }
        best
    }

    /// Largest pointwise difference to another curve sampled at the same times.
    pub fn sup_diff(&self, other: &FidelityCurve, mode: usize) -> f64 {
        self.values[mode]
            .iter()
            .zip(&other.values[mode])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{FIDELITY_SCHEMA}")?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.num_modes()).map(|i| format!("F{i}")));
        header.extend((1..=self.num_modes()).map(|i| format!("theta{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = vec![format_float(*t)];
            row.extend(self.values.iter().map(|v| format_float(v[k])));
            row.extend(self.theta.iter().map(|v| format_float(v[k])));
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next() != Some(FIDELITY_SCHEMA) {
            return Err(CradleError::Format(format!(
                "{}: missing fidelity schema line",
                path.display()
            )));
        }
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| CradleError::Format(format!("{}: missing header", path.display())))?
            .split(',')
            .collect();
        if header.len() < 3 || header.len() % 2 == 0 {
            return Err(CradleError::Format(format!(
                "{}: malformed header",
                path.display()
            )));
        }
        let modes = (header.len() - 1) / 2;
        let mut curve = Self {
            times: Vec::new(),
            values: vec![Vec::new(); modes],
            theta: vec![Vec::new(); modes],
        };
        for line in lines {
            let nums: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CradleError::Format(format!("{}: {e}", path.display())))?;
            if nums.len() != header.len() {
                return Err(CradleError::Format(format!(
                    "{}: ragged row",
                    path.display()
                )));
            }
            curve.times.push(nums[0]);
            for i in 0..modes {
                curve.values[i].push(nums[1 + i]);
                curve.theta[i].push(nums[1 + modes + i]);
            }
        }
        Ok(curve)
    }
}

/// Indices of interior local maxima of `v` (plateaus count once, at their first point).
pub fn local_maxima(v: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut k = 1;
    while k + 1 < v.len() {
        if v[k] > v[k - 1] {
            let mut j = k;
            while j + 1 < v.len() && v[j + 1] == v[k] {
                j += 1;
            }
            if j + 1 < v.len() && v[j + 1] < v[k] {
                out.push(k);
            }
            k = j + 1;
        } else {
            k += 1;
        }
    }
    out
}

/// `<n| D(gamma) |m>` for all `n, m < nc`.
pub fn displacement_matrix(gamma: C64, nc: usize) -> DMatrix<C64> {
    let x = gamma.norm_sqr();
    let pref = (-0.5 * x).exp();
    let mut d = DMatrix::zeros(nc, nc);
    // log(n!) table
    let mut lf = vec![0.0f64; nc + 1];
    for n in 1..=nc {
        lf[n] = lf[n - 1] + (n as f64).ln();
    }
    let mut lag = vec![0.0f64; nc];
    for k in 0..nc {
        // generalised Laguerre L_j^{(k)}(x), j = 0..nc-k
        let len = nc - k;
        lag[0] = 1.0;
        if len > 1 {
            lag[1] = 1.0 + k as f64 - x;
        }
        for j in 1..len.saturating_sub(1) {
            lag[j + 1] = ((2 * j + 1 + k) as f64 - x) * lag[j] - (j + k) as f64 * lag[j - 1];
            lag[j + 1] /= (j + 1) as f64;
        }
        let gk = gamma.powu(k as u32);
        let gk_neg = (-gamma.conj()).powu(k as u32);
        for m in 0..len {
            let n = m + k;
            let s = (0.5 * (lf[m] - lf[n])).exp() * pref * lag[m];
            d[(n, m)] = gk * s;
            if k > 0 {
                d[(m, n)] = gk_neg * s;
            }
        }
    }
    d
}

/// Wigner function of one cavity on a rectangular grid of `beta = x + i p`.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerGrid {
    pub mode: usize,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    /// `values[ip * x.len() + ix]`
    pub values: Vec<f64>,
    /// Largest `|W|` on the window edge relative to the largest `|W|`.
    pub boundary_ratio: f64,
    pub boundary_warning: bool,
}

/// Edge-to-peak ratio above which the window is flagged as too small.
pub const BOUNDARY_WARNING_RATIO: f64 = 1e-3;

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
        .collect()
}

/// `W(beta) = (2/pi) Tr[rho D(beta) P D(-beta)]` with `P` the photon-number parity.
pub fn wigner_grid(rho: &DensOp, mode: usize, x: &[f64], p: &[f64]) -> Result<WignerGrid> {
    let nc = single_mode(rho)?;
    if x.len() < 2 || p.len() < 2 {
        return Err(CradleError::InvalidParameter(
            "Wigner grid needs at least 2x2 points".into(),
        ));
    }
    let r = rho.matrix();
    let values: Vec<f64> = p
        .par_iter()
        .flat_map_iter(|&pp| {
            x.iter().map(move |&xx| {
                let d = displacement_matrix(C64::new(2.0 * xx, 2.0 * pp), nc);
                let mut acc = C64::new(0.0, 0.0);
                for m in 0..nc {
                    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                    for n in 0..nc {
                        acc += r[(m, n)] * d[(n, m)] * sign;
                    }
                }
                FRAC_2_PI * acc.re
            })
        })
        .collect();
    let (nx, np) = (x.len(), p.len());
    let peak = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut edge = 0.0f64;
    for ip in 0..np {
        for ix in 0..nx {
            if ip == 0 || ix == 0 || ip == np - 1 || ix == nx - 1 {
                edge = edge.max(values[ip * nx + ix].abs());
            }
        }
    }
    let boundary_ratio = if peak > 0.0 { edge / peak } else { 0.0 };
    Ok(WignerGrid {
        mode,
        x: x.to_vec(),
        p: p.to_vec(),
        values,
        boundary_ratio,
        boundary_warning: boundary_ratio > BOUNDARY_WARNING_RATIO,
    })
}

/// Square window `|x|, |p| <= |alpha| + 4` at `points x points` resolution.
pub fn default_wigner_grid(
    rho: &DensOp,
    mode: usize,
    alpha: C64,
    points: usize,
) -> Result<WignerGrid> {
    let half = alpha.norm() + 4.0;
    let axis = linspace(-half, half, points);
    wigner_grid(rho, mode, &axis, &axis)
}

impl WignerGrid {
    pub fn at(&self, ix: usize, ip: usize) -> f64 {
        self.values[ip * self.x.len() + ix]
    }

    fn weights(axis: &[f64]) -> Vec<f64> {
        let n = axis.len();
        (0..n)
            .map(|k| {
                let left = if k > 0 { axis[k] - axis[k - 1] } else { 0.0 };
                let right = if k + 1 < n {
                    axis[k + 1] - axis[k]
                } else {
                    0.0
                };
                0.5 * (left + right)
            })
            .collect()
    }

    /// Trapezoidal quadrature of `g(W)` over the window.
    pub fn integrate(&self, g: impl Fn(f64) -> f64) -> f64 {
        let (wx, wp) = (Self::weights(&self.x), Self::weights(&self.p));
        let mut acc = 0.0;
        for (ip, a) in wp.iter().enumerate() {
            for (ix, b) in wx.iter().enumerate() {
                acc += a * b * g(self.at(ix, ip));
            }
        }
        acc
    }

    pub fn total(&self) -> f64 {
        self.integrate(|w| w)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{WIGNER_SCHEMA}")?;
        writeln!(
            out,
            "# mode={} x=[{},{}] p=[{},{}] nx={} np={} boundary_ratio={:.3e}",
            self.mode + 1,
            self.x[0],
            self.x[self.x.len() - 1],
            self.p[0],
            self.p[self.p.len() - 1],
            self.x.len(),
            self.p.len(),
            self.boundary_ratio
        )?;
        writeln!(out, "x,p,W")?;
        for (ip, p) in self.p.iter().enumerate() {
            for (ix, x) in self.x.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{}",
                    format_float(*x),
                    format_float(*p),
                    format_float(self.at(ix, ip))
                )?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(WIGNER_SCHEMA) {
            return Err(CradleError::Format(format!(
                "{}: missing Wigner schema line",
                path.display()
            )));
        }
        let meta = lines.next().unwrap_or_default();
        let field = |key: &str| -> Option<&str> {
            meta.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            field(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CradleError::Format(format!("{}: missing {key}", path.display())))
        };
        let (nx, np) = (parse_usize("nx")?, parse_usize("np")?);
        let mode = parse_usize("mode")?.saturating_sub(1);
        let boundary_ratio: f64 = field("boundary_ratio")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0.0);
        if lines.next() != Some("x,p,W") {
            return Err(CradleError::Format(format!(
                "{}: malformed header",
                path.display()
            )));
        }
        let mut x = Vec::with_capacity(nx);
        let mut p = Vec::with_capacity(np);
        let mut values = Vec::with_capacity(nx * np);
        for (k, line) in lines.enumerate() {
            let nums: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CradleError::Format(format!("{}: {e}", path.display())))?;
            if nums.len() != 3 {
                return Err(CradleError::Format(format!(
                    "{}: ragged row",
                    path.display()
                )));
            }
            if k < nx {
                x.push(nums[0]);
            }
            if k % nx == 0 {
                p.push(nums[1]);
            }
            values.push(nums[2]);
        }
        if values.len() != nx * np {
            return Err(CradleError::Format(format!(
                "{}: expected {} rows",
                path.display(),
                nx * np
            )));
        }
        Ok(Self {
            mode,
            x,
            p,
            values,
            boundary_ratio,
            boundary_warning: boundary_ratio > BOUNDARY_WARNING_RATIO,
        })
    }
}

/// Quadrature of the negative part of `W` over the window.
pub fn negativity_volume(w: &WignerGrid) -> f64 {
    if w.boundary_warning {
        log::warn!(
            "Wigner window for cavity {} is too small (edge/peak = {:.2e})",
            w.mode + 1,
            w.boundary_ratio
        );
    }
    w.integrate(|v| (-v).max(0.0))
}

/// `<a_i^dag a_i>` of a ket or density operator.
pub fn mean_photon(state: &QuantumState, mode: usize) -> Result<f64> {
    let n = number_operator(state.space(), mode)?;
    Ok(crate::fock::expectation(state, &n)?.re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{cat_normalization, coherent_amplitudes, FockSpace, Ket};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn single(nc: usize) -> FockSpace {
        FockSpace::single_mode(nc).unwrap()
    }

    fn cat_rho(alpha: f64, theta: f64, nc: usize) -> DensOp {
        Ket::embed_single_mode(
            single(nc),
            0,
            cat_amplitudes(C64::new(alpha, 0.0), theta, nc).unwrap(),
        )
        .unwrap()
        .projector()
    }

    fn coherent_rho(alpha: C64, nc: usize) -> DensOp {
        Ket::embed_single_mode(single(nc), 0, coherent_amplitudes(alpha, nc).unwrap())
            .unwrap()
            .projector()
    }

    #[test]
    fn fidelity_of_rotated_cat_is_one() {
        for theta0 in [0.0, 0.3, 1.7, 2.9, 5.5] {
            let (f, th) =
                transfer_fidelity(&cat_rho(2.0, theta0, 24), C64::new(2.0, 0.0), 256).unwrap();
            assert_abs_diff_eq!(f, 1.0, epsilon = 1e-8);
            // even cats are pi-periodic in theta
            let d = (th - theta0).rem_euclid(PI);
            assert!(d.min(PI - d) < 1e-4, "theta* {th} vs {theta0}");
        }
    }

    #[test]
    fn fidelity_of_vacuum_and_coherent_branch() {
        let vac = Ket::vacuum(single(24)).projector();
        let (f, _) = transfer_fidelity(&vac, C64::new(2.0, 0.0), 256).unwrap();
        let oracle = 4.0 * (-4.0f64).exp() / cat_normalization(2.0);
        assert_abs_diff_eq!(f, oracle, epsilon = 1e-8);

        let (f, _) = transfer_fidelity(
            &coherent_rho(C64::new(2.0, 0.0), 24),
            C64::new(2.0, 0.0),
            256,
        )
        .unwrap();
        let e = (-8.0f64).exp();
        let oracle = (1.0 + e) * (1.0 + e) / cat_normalization(2.0);
        assert_abs_diff_eq!(f, oracle, epsilon = 1e-8);
        assert_abs_diff_eq!(f, 0.5, epsilon = 1e-3);
    }

    #[test]
    fn wigner_of_vacuum() {
        let vac = Ket::vacuum(single(10)).projector();
        let axis = linspace(-3.0, 3.0, 61);
        let w = wigner_grid(&vac, 0, &axis, &axis).unwrap();
        assert_abs_diff_eq!(w.at(30, 30), FRAC_2_PI, epsilon = 1e-12);
        for ip in (0..61).step_by(7) {
            for ix in (0..61).step_by(5) {
                let b2 = axis[ix] * axis[ix] + axis[ip] * axis[ip];
                assert_abs_diff_eq!(w.at(ix, ip), FRAC_2_PI * (-2.0 * b2).exp(), epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(w.total(), 1.0, epsilon = 1e-6);
        assert_eq!(negativity_volume(&w), 0.0);
        assert!(!w.boundary_warning);
    }

    #[test]
    fn wigner_of_even_cat() {
        let cat = cat_rho(2.0, 0.0, 24);
        let w = default_wigner_grid(&cat, 0, C64::new(2.0, 0.0), 121).unwrap();
        assert_abs_diff_eq!(w.at(60, 60), FRAC_2_PI, epsilon = 1e-9);
        assert!((w.total() - 1.0).abs() < 0.02);
        // fringes along the imaginary axis
        let column: Vec<f64> = (0..121).map(|ip| w.at(60, ip)).collect();
        assert!(column.iter().any(|&v| v < -0.1));
        let neg = negativity_volume(&w);
        assert!(neg > 0.0);
        // refined-grid oracle, frozen
        let fine = default_wigner_grid(&cat, 0, C64::new(2.0, 0.0), 241).unwrap();
        let neg_fine = negativity_volume(&fine);
        assert!((neg - neg_fine).abs() < 1e-2, "{neg} vs {neg_fine}");
        assert_abs_diff_eq!(neg, CAT_NEGATIVITY_ALPHA2_121, epsilon = 1e-5);
        assert_abs_diff_eq!(neg_fine, CAT_NEGATIVITY_ALPHA2_241, epsilon = 1e-5);
    }

    /// Negativity volume of the even cat with alpha = 2 on the default window.
    const CAT_NEGATIVITY_ALPHA2_121: f64 = 0.284999;
    const CAT_NEGATIVITY_ALPHA2_241: f64 = 0.292646;

    #[test]
    fn wigner_of_mixture_is_nonnegative() {
        let a = coherent_rho(C64::new(2.0, 0.0), 40);
        let b = coherent_rho(C64::new(-2.0, 0.0), 40);
        let mix = DensOp::new(single(40), (a.matrix() + b.matrix()) * C64::new(0.5, 0.0)).unwrap();
        let w = default_wigner_grid(&mix, 0, C64::new(2.0, 0.0), 81).unwrap();
        assert!(w.min_value() >= -1e-10);
    }

    #[test]
    fn wigner_rotation_covariance() {
        let cat = cat_rho(2.0, 0.0, 24);
        let rotated = cat.rotated(PI / 2.0).unwrap();
        let axis = linspace(-6.0, 6.0, 49);
        let w = wigner_grid(&cat, 0, &axis, &axis).unwrap();
        let wr = wigner_grid(&rotated, 0, &axis, &axis).unwrap();
        let n = axis.len();
        // W'(x, p) = W(beta e^{i pi/2}) = W(-p, x)
        for ip in 0..n {
            for ix in 0..n {
                assert!((wr.at(ix, ip) - w.at(n - 1 - ip, ix)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mean_photon_values() {
        let s = FockSpace::new(2, 24).unwrap();
        assert_eq!(
            mean_photon(&QuantumState::Ket(Ket::vacuum(s)), 0).unwrap(),
            0.0
        );
        let coh =
            Ket::embed_single_mode(s, 1, coherent_amplitudes(C64::new(2.0, 0.0), 24).unwrap())
                .unwrap();
        assert_abs_diff_eq!(
            mean_photon(&QuantumState::Ket(coh), 1).unwrap(),
            4.0,
            epsilon = 1e-3
        );
        let cat =
            Ket::embed_single_mode(s, 0, cat_amplitudes(C64::new(2.0, 0.0), 0.0, 24).unwrap())
                .unwrap();
        let e = (-8.0f64).exp();
        assert_abs_diff_eq!(
            mean_photon(&QuantumState::Ket(cat), 0).unwrap(),
            4.0 * (1.0 - e) / (1.0 + e),
            epsilon = 1e-6
        );
    }

    #[test]
    fn local_maxima_detection() {
        assert_eq!(
            local_maxima(&[0.0, 1.0, 0.5, 0.7, 0.7, 0.2, 0.3]),
            vec![1, 3]
        );
        assert!(local_maxima(&[0.0, 1.0, 2.0]).is_empty());
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let curve = FidelityCurve {
            times: vec![0.0, 0.5],
            values: vec![vec![1.0, 0.2], vec![0.03, 0.9]],
            theta: vec![vec![0.0, 0.1], vec![1.0, 2.0]],
        };
        let path = dir.path().join("f.csv");
        curve.write_csv(&path).unwrap();
        assert_eq!(FidelityCurve::read_csv(&path).unwrap(), curve);

        let vac = Ket::vacuum(single(6)).projector();
        let axis = linspace(-2.0, 2.0, 5);
        let w = wigner_grid(&vac, 0, &axis, &linspace(-1.0, 1.0, 3)).unwrap();
        let wpath = dir.path().join("w.csv");
        w.write_csv(&wpath).unwrap();
        let back = WignerGrid::read_csv(&wpath).unwrap();
        assert_eq!(back.values, w.values);
        assert_eq!(back.x, w.x);
        assert_eq!(back.p, w.p);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fidelity_bounds_and_refinement(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let nc = 16;
            // random mixed state of rank 3
            let mut m = DMatrix::<C64>::zeros(nc, nc);
            for _ in 0..3 {
                let v = nalgebra::DVector::from_fn(nc, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
                m += &v * v.adjoint();
            }
            let tr = m.trace();
            m /= tr;
            let rho = DensOp::new(single(nc), m).unwrap();
            let (f, th) = transfer_fidelity(&rho, C64::new(1.5, 0.0), 256).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!((0.0..2.0 * PI).contains(&th));
            let c = cat_amplitudes(C64::new(1.5, 0.0), 0.0, nc).unwrap();
            let poly = RotatedOverlap::new(rho.matrix(), &c);
            let coarse = (0..256).map(|k| poly.eval(k as f64 * 2.0 * PI / 256.0)).fold(f64::MIN, f64::max);
            prop_assert!(f >= coarse - 1e-15);
        }
    }
}
