//! Environment correlation kernels and colored-noise sampling.
//!
//! Kernels are stationary: `K(t, s) = K(t - s)` with `K(-u) = conj K(u)`.
//! Noise paths store `z_t` with `E[z_t conj(z_s)] = K(t - s)`; the trajectory
//! equation is driven by `conj(z_t)`.

use std::path::Path;

use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{CradleError, Result};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Lorentzian spectral density `g(w) = (Gamma gamma^2 / 2pi) / ((w - Delta)^2 + gamma^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzSpec {
    pub gamma_big: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl LorentzSpec {
    pub fn new(gamma_big: f64, gamma: f64, delta: f64) -> Result<Self> {
        let spec = Self {
            gamma_big,
            gamma,
            delta,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_tau(gamma_big: f64, tau: f64, delta: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(CradleError::InvalidParameter(format!(
                "memory time tau must be > 0, got {tau}"
            )));
        }
        Self::new(gamma_big, 1.0 / tau, delta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_big >= 0.0) || !self.gamma_big.is_finite() {
            return Err(CradleError::InvalidParameter(format!(
                "Gamma must be >= 0, got {}",
                self.gamma_big
            )));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(CradleError::InvalidParameter(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if !self.delta.is_finite() {
            return Err(CradleError::InvalidParameter("Delta must be finite".into()));
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.gamma
    }

    /// `K(0) = Gamma gamma / 2`.
    pub fn k0(&self) -> f64 {
        0.5 * self.gamma_big * self.gamma
    }

    /// Decay rate of the kernel, `gamma + i Delta`.
    pub fn rate(&self) -> C64 {
        C64::new(self.gamma, self.delta)
    }

    pub fn spectral_density(&self, omega: f64) -> f64 {
        let d = omega - self.delta;
        self.gamma_big * self.gamma * self.gamma
            / (2.0 * std::f64::consts::PI)
            / (d * d + self.gamma * self.gamma)
    }

    /// `K(u) = (Gamma gamma / 2) exp(-(gamma + i Delta) u)` for `u >= 0`.
    pub fn kernel(&self, u: f64) -> C64 {
        if u < 0.0 {
            return self.kernel(-u).conj();
        }
        (-self.rate() * u).exp() * self.k0()
    }

    /// `int_0^inf K(u) du = Gamma gamma / (2 (gamma + i Delta))`.
    pub fn kernel_integral(&self) -> C64 {
        C64::new(self.k0(), 0.0) / self.rate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Ou,
    MarkovianDelta,
    Tabulated,
    ThermalPair,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ou => "ou",
            Self::MarkovianDelta => "markovian-delta",
            Self::Tabulated => "tabulated",
            Self::ThermalPair => "thermal-pair",
        })
    }
}

/// A complex function sampled at increasing abscissae, linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedKernel {
    u: Vec<f64>,
    values: Vec<C64>,
}

impl TabulatedKernel {
    pub fn new(u: Vec<f64>, values: Vec<C64>) -> Result<Self> {
        if u.is_empty() || u.len() != values.len() {
            return Err(CradleError::DimensionMismatch(format!(
                "kernel table has {} abscissae and {} values",
                u.len(),
                values.len()
            )));
        }
        if u[0] != 0.0 {
            return Err(CradleError::Format(
                "kernel table must start at u = 0".into(),
            ));
        }
        if u.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CradleError::Format(
                "kernel abscissae must be strictly increasing".into(),
            ));
        }
        Ok(Self { u, values })
    }

    /// Samples `k(u)` at `u = 0, du, .., steps * du`.
    pub fn uniform(du: f64, steps: usize, k: impl Fn(f64) -> C64) -> Self {
        let u: Vec<f64> = (0..=steps).map(|i| i as f64 * du).collect();
        let values = u.iter().map(|&x| k(x)).collect();
        Self { u, values }
    }

    pub fn abscissae(&self) -> &[f64] {
        &self.u
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn max_u(&self) -> f64 {
        *self.u.last().unwrap()
    }

    /// Linear interpolation; zero beyond the last abscissa, conjugate for `u < 0`.
    pub fn eval(&self, u: f64) -> C64 {
        if u < 0.0 {
            return self.eval(-u).conj();
        }
        if u > self.max_u() {
            return ZERO;
        }
        let k = self.u.partition_point(|&x| x <= u);
        if k >= self.u.len() {
            return *self.values.last().unwrap();
        }
        let (u0, u1) = (self.u[k - 1], self.u[k]);
        let w = (u - u0) / (u1 - u0);
        self.values[k - 1] * (1.0 - w) + self.values[k] * w
    }

    /// Reads a CSV with a header and columns `u, Re K, Im K`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| CradleError::Format(format!("{}: {e}", path.display())))?;
        let (mut u, mut values) = (Vec::new(), Vec::new());
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| CradleError::Format(format!("{}: {e}", path.display())))?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| {
                        CradleError::Format(format!("row {}: missing column {}", line + 1, i + 1))
                    })?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| CradleError::Format(format!("row {}: {e}", line + 1)))
            };
            u.push(field(0)?);
            values.push(C64::new(field(1)?, field(2)?));
        }
        Self::new(u, values)
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CradleError::Format(e.to_string()))?;
        w.write_record(["u", "re_k", "im_k"])
            .map_err(|e| CradleError::Format(e.to_string()))?;
        for (u, v) in self.u.iter().zip(&self.values) {
            w.write_record([u.to_string(), v.re.to_string(), v.im.to_string()])
                .map_err(|e| CradleError::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Quadrature settings for the thermal kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadConfig {
    /// Lower integration limit floor; the effective limit is `max(1e-6, omega_floor)`.
    pub omega_floor: f64,
    /// Upper limit; `None` means `Delta + 20 gamma` (at least `50 / beta` above the floor).
    pub omega_max: Option<f64>,
    pub rel_tol: f64,
    pub max_depth: u32,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            omega_floor: 1e-6,
            omega_max: None,
            rel_tol: 1e-8,
            max_depth: 48,
        }
    }
}

/// Bose-Einstein occupation `1 / (exp(beta w) - 1)`.
///
/// The source formula reads `1 / (exp(-beta w) - 1)`, which is negative for
/// `w > 0`; the standard form is used here.
pub fn bose_einstein(omega: f64, beta: f64) -> f64 {
    1.0 / (beta * omega).exp_m1()
}

/// Kernels of the two effective zero-temperature environments that replace a thermal bath.
///
/// `K1(u) = int g (n + 1) e^{-i w u}` and `K2(u) = int g n e^{+i w u}`, tabulated
/// on `u = k du`. The vacuum part of `K1` is the closed-form Lorentzian kernel;
/// the occupation-weighted parts are integrated numerically over
/// `[omega_min, omega_max]`, excluding the pole of `n` at `w = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalKernelPair {
    pub lorentz: LorentzSpec,
    pub beta: f64,
    pub du: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub k1: Vec<C64>,
    pub k2: Vec<C64>,
}

impl ThermalKernelPair {
    fn interp(table: &[C64], du: f64, u: f64) -> C64 {
        if u < 0.0 {
            return Self::interp(table, du, -u).conj();
        }
        let x = u / du;
        let k = x.floor() as usize;
        if k + 1 >= table.len() {
            return if k + 1 == table.len() { table[k] } else { ZERO };
        }
        let w = x - k as f64;
        table[k] * (1.0 - w) + table[k + 1] * w
    }

    pub fn k1_at(&self, u: f64) -> C64 {
        Self::interp(&self.k1, self.du, u)
    }

    pub fn k2_at(&self, u: f64) -> C64 {
        Self::interp(&self.k2, self.du, u)
    }

    pub fn steps(&self) -> usize {
        self.k1.len() - 1
    }
}

fn simpson_adaptive(
    f: &dyn Fn(f64) -> C64,
    a: f64,
    b: f64,
    fa: C64,
    fm: C64,
    fb: C64,
    whole: C64,
    tol: f64,
    depth: u32,
    failed: &mut bool,
) -> C64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (fa + flm * 4.0 + fm) * ((m - a) / 6.0);
    let right = (fm + frm * 4.0 + fb) * ((b - m) / 6.0);
    let diff = left + right - whole;
    if diff.norm() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    if depth == 0 {
        *failed = true;
        return left + right + diff / 15.0;
    }
    simpson_adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, failed)
        + simpson_adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, failed)
}

/// Adaptive Simpson integration of a complex integrand with absolute tolerance `tol`.
pub fn integrate_adaptive(
    f: &dyn Fn(f64) -> C64,
    a: f64,
    b: f64,
    tol: f64,
    max_depth: u32,
) -> Result<C64> {
    // split into panels so that narrow features are not missed by the first estimate
    const PANELS: usize = 64;
    let mut total = ZERO;
    let mut failed = false;
    // geometric panels resolve the 1/w growth of the occupation near the floor
    let ratio = (b / a).powf(1.0 / PANELS as f64);
    let mut lo = a;
    for p in 0..PANELS {
        let hi = if p + 1 == PANELS { b } else { lo * ratio };
        let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
        let whole = (fa + fm * 4.0 + fb) * ((hi - lo) / 6.0);
        total += simpson_adaptive(
            f,
            lo,
            hi,
            fa,
            fm,
            fb,
            whole,
            tol / PANELS as f64,
            max_depth,
            &mut failed,
        );
        lo = hi;
    }
    if failed || !(total.re.is_finite() && total.im.is_finite()) {
        return Err(CradleError::Quadrature(format!(
            "adaptive Simpson on [{a:.3e}, {b:.3e}] did not reach tolerance {tol:.1e}"
        )));
    }
    Ok(total)
}

pub fn thermal_kernels(
    lorentz: &LorentzSpec,
    beta: f64,
    du: f64,
    steps: usize,
    quad: &QuadConfig,
) -> Result<ThermalKernelPair> {
    lorentz.validate()?;
    if !(beta > 0.0) {
        return Err(CradleError::InvalidParameter(format!(
            "beta must be > 0, got {beta}"
        )));
    }
    if !(du > 0.0) {
        return Err(CradleError::InvalidParameter("du must be > 0".into()));
    }
    let omega_min = quad.omega_floor.max(1e-6);
    let support = lorentz.delta + 20.0 * lorentz.gamma;
    let omega_max = quad
        .omega_max
        .unwrap_or_else(|| support.max(omega_min + 50.0 / beta));
    if omega_max < support {
        return Err(CradleError::InvalidParameter(format!(
            "quadrature upper limit {omega_max} does not cover Delta + 20 gamma = {support}"
        )));
    }
    // occupation-weighted density; its integral sets the tolerance scale
    let weight = |w: f64| lorentz.spectral_density(w) * bose_einstein(w, beta);
    let mass = integrate_adaptive(
        &|w| C64::new(weight(w), 0.0),
        omega_min,
        omega_max,
        1e-14,
        quad.max_depth,
    )?
    .re;
    let tol = (quad.rel_tol * mass).max(1e-300);
    let mut k1 = Vec::with_capacity(steps + 1);
    let mut k2 = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let u = k as f64 * du;
        let thermal = if mass > 0.0 {
            integrate_adaptive(
                &|w| C64::from_polar(weight(w), -w * u),
                omega_min,
                omega_max,
                tol,
                quad.max_depth,
            )?
        } else {
            ZERO
        };
        k1.push(lorentz.kernel(u) + thermal);
        k2.push(thermal.conj());
    }
    Ok(ThermalKernelPair {
        lorentz: *lorentz,
        beta,
        du,
        omega_min,
        omega_max,
        k1,
        k2,
    })
}

/// Environment correlation function.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvKernel {
    Ou(LorentzSpec),
    /// `K(t, s) = Gamma delta(t - s)`; only usable analytically.
    MarkovianDelta {
        gamma_big: f64,
    },
    Tabulated(TabulatedKernel),
    /// Evaluates as `K1`, the kernel of the noise that enters with `A`.
    ThermalPair(Box<ThermalKernelPair>),
}

pub fn ou_kernel(spec: LorentzSpec) -> Result<EnvKernel> {
    spec.validate()?;
    Ok(EnvKernel::Ou(spec))
}

pub fn markovian_kernel(gamma_big: f64) -> Result<EnvKernel> {
    if !(gamma_big >= 0.0) || !gamma_big.is_finite() {
        return Err(CradleError::InvalidParameter(format!(
            "Gamma must be >= 0, got {gamma_big}"
        )));
    }
    Ok(EnvKernel::MarkovianDelta { gamma_big })
}

impl EnvKernel {
    pub fn kind(&self) -> KernelKind {
        match self {
            Self::Ou(_) => KernelKind::Ou,
            Self::MarkovianDelta { .. } => KernelKind::MarkovianDelta,
            Self::Tabulated(_) => KernelKind::Tabulated,
            Self::ThermalPair(_) => KernelKind::ThermalPair,
        }
    }

    /// `K(t, s)`; fails for the delta kernel, which has no pointwise values.
    pub fn eval(&self, t: f64, s: f64) -> Result<C64> {
        let u = t - s;
        Ok(match self {
            Self::Ou(l) => l.kernel(u),
            Self::Tabulated(tab) => tab.eval(u),
            Self::ThermalPair(p) => p.k1_at(u),
            Self::MarkovianDelta { .. } => {
                return Err(CradleError::InvalidParameter(
                    "the delta kernel is singular; use the analytic Markov coefficients".into(),
                ))
            }
        })
    }

    /// `K(k dt)` for `k = 0..=steps`.
    pub fn tabulate(&self, dt: f64, steps: usize) -> Result<Vec<C64>> {
        (0..=steps).map(|k| self.eval(k as f64 * dt, 0.0)).collect()
    }

    pub fn lorentz(&self) -> Option<&LorentzSpec> {
        match self {
            Self::Ou(l) => Some(l),
            Self::ThermalPair(p) => Some(&p.lorentz),
            _ => None,
        }
    }
}

/// A sampled complex Gaussian path `z_k = z(k dt)`, `k = 0..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub dt: f64,
    pub seed: u64,
    pub samples: Vec<C64>,
}

impl NoisePath {
    pub fn zeros(dt: f64, steps: usize) -> Self {
        Self {
            dt,
            seed: 0,
            samples: vec![ZERO; steps + 1],
        }
    }

    pub fn steps(&self) -> usize {
        self.samples.len() - 1
    }
}

/// Per-path seed derived from a master seed and a path index (SplitMix64 finaliser).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard complex normal: `E|xi|^2 = 1`, `E[xi^2] = 0`.
pub fn complex_normal<R: rand::Rng>(rng: &mut R) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Stationary Ornstein-Uhlenbeck path by the exact autoregressive recursion
/// `z_{k+1} = e^{-(gamma + i Delta) dt} z_k + sqrt(K0 (1 - e^{-2 gamma dt})) xi_k`,
/// with `z_0 ~ CN(0, K0)`, `K0 = Gamma gamma / 2`.
pub fn sample_ou_noise(spec: &LorentzSpec, dt: f64, steps: usize, seed: u64) -> Result<NoisePath> {
    spec.validate()?;
    if !(dt > 0.0) {
        return Err(CradleError::InvalidParameter(format!(
            "dt must be > 0, got {dt}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(steps + 1);
    fill_ou(spec, dt, steps, &mut rng, &mut samples);
    Ok(NoisePath { dt, seed, samples })
}

/// Overwrites `out` with an OU path of `steps + 1` samples drawn from `rng`.
pub fn fill_ou<R: rand::Rng>(
    spec: &LorentzSpec,
    dt: f64,
    steps: usize,
    rng: &mut R,
    out: &mut Vec<C64>,
) {
    let decay = (-spec.rate() * dt).exp();
    let k0 = spec.k0();
    let innovation = (k0 * -(-2.0 * spec.gamma * dt).exp_m1()).sqrt();
    out.clear();
    let mut z = complex_normal(rng) * k0.sqrt();
    out.push(z);
    for _ in 0..steps {
        z = decay * z + complex_normal(rng) * innovation;
        out.push(z);
    }
}

/// Fraction of negative circulant eigenvalue mass tolerated (and clipped) before
/// [`sample_noise_from_kernel`] refuses a covariance.
pub const DEFAULT_EMBEDDING_TOL: f64 = 1e-4;

/// Square roots of the circulant-embedding spectrum of a stationary covariance
/// `c_k = K(k dt)`, `k = 0..=n`, scaled for sampling.
#[derive(Clone)]
pub struct CirculantSampler {
    n: usize,
    sqrt_eigs: Vec<f64>,
    negative_fraction: f64,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl std::fmt::Debug for CirculantSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CirculantSampler")
            .field("n", &self.n)
            .field("negative_fraction", &self.negative_fraction)
            .finish()
    }
}

impl CirculantSampler {
    pub fn new(cov: &[C64], tol: f64) -> Result<Self> {
        if cov.is_empty() {
            return Err(CradleError::InvalidParameter(
                "empty covariance table".into(),
            ));
        }
        let n = cov.len() - 1;
        let m = (2 * n).max(1);
        let mut col = vec![ZERO; m];
        col[0] = C64::new(cov[0].re, 0.0);
        for k in 1..=n {
            col[k] = cov[k];
            if k < n {
                col[m - k] = cov[k].conj();
            }
        }
        if n >= 1 {
            // the midpoint entry must be self-conjugate for a Hermitian circulant
            col[n] = C64::new(cov[n].re, 0.0);
        }
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(m).process(&mut col);
        let total: f64 = col.iter().map(|c| c.re.abs()).sum();
        let negative: f64 = col.iter().map(|c| (-c.re).max(0.0)).sum();
        let negative_fraction = if total > 0.0 { negative / total } else { 0.0 };
        if negative_fraction > tol {
            return Err(CradleError::NotEmbeddable {
                fraction: negative_fraction,
            });
        }
        let sqrt_eigs = col
            .iter()
            .map(|c| (c.re.max(0.0) / m as f64).sqrt())
            .collect();
        Ok(Self {
            n,
            sqrt_eigs,
            negative_fraction,
            fft: planner.plan_fft_inverse(m),
        })
    }

    pub fn negative_fraction(&self) -> f64 {
        self.negative_fraction
    }

    /// Draws `n + 1` correlated samples.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Vec<C64> {
        let mut buf: Vec<C64> = self
            .sqrt_eigs
            .iter()
            .map(|&s| complex_normal(rng) * s)
            .collect();
        self.fft.process(&mut buf);
        buf.truncate(self.n + 1);
        buf
    }
}

/// Gaussian path with `E[z_j conj(z_k)] = K((j - k) dt)` via circulant embedding.
pub fn sample_noise_from_kernel(
    kernel: &EnvKernel,
    dt: f64,
    steps: usize,
    seed: u64,
) -> Result<NoisePath> {
    if !(dt > 0.0) {
        return Err(CradleError::InvalidParameter(format!(
            "dt must be > 0, got {dt}"
        )));
    }
    let cov = kernel.tabulate(dt, steps)?;
    let sampler = CirculantSampler::new(&cov, DEFAULT_EMBEDDING_TOL)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(NoisePath {
        dt,
        seed,
        samples: sampler.sample(&mut rng),
    })
}
