//! Truncated multi-mode Fock-space algebra.
//!
//! Basis ordering: a basis state with occupations `(n_0, .., n_{N-1})` has
//! index `sum_i n_i * cutoff^(N-1-i)`, so mode 0 is the slowest-varying
//! index. Every module in the crate relies on this ordering. Mode indices
//! are zero-based in the Rust API; file formats and CLI output label modes
//! from 1.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{CradleError, Result};
use crate::sparse::CsrMatrix;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Largest truncated Poisson tail accepted when building coherent or cat
/// states. Above this the truncated state is no longer a useful stand-in.
pub const MAX_TAIL_MASS: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FockSpace {
    num_modes: usize,
    cutoff: usize,
}

impl FockSpace {
    pub fn new(num_modes: usize, cutoff: usize) -> Result<Self> {
        if num_modes == 0 || cutoff == 0 {
            return Err(CradleError::InvalidParameter(format!(
                "Fock space needs at least one mode and cutoff >= 1 (got N={num_modes}, N_c={cutoff})"
            )));
        }
        let dim = (cutoff as u128).checked_pow(num_modes as u32);
        if dim.map_or(true, |d| d > u32::MAX as u128) {
            return Err(CradleError::InvalidParameter(format!(
                "Fock space N={num_modes}, N_c={cutoff} is too large"
            )));
        }
        Ok(Self { num_modes, cutoff })
    }

    pub fn single_mode(cutoff: usize) -> Result<Self> {
        Self::new(1, cutoff)
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    /// Number of Fock levels per mode; photon numbers run `0..cutoff`.
    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn dim(&self) -> usize {
        self.cutoff.pow(self.num_modes as u32)
    }

    pub fn stride(&self, mode: usize) -> usize {
        self.cutoff.pow((self.num_modes - 1 - mode) as u32)
    }

    pub fn check_mode(&self, mode: usize) -> Result<()> {
        if mode < self.num_modes {
            Ok(())
        } else {
            Err(CradleError::InvalidMode {
                index: mode,
                num_modes: self.num_modes,
            })
        }
    }

    pub fn occupation(&self, index: usize, mode: usize) -> usize {
        (index / self.stride(mode)) % self.cutoff
    }

    pub fn occupations(&self, index: usize) -> Vec<usize> {
        (0..self.num_modes)
            .map(|m| self.occupation(index, m))
            .collect()
    }

    pub fn total_occupation(&self, index: usize) -> usize {
        (0..self.num_modes).map(|m| self.occupation(index, m)).sum()
    }

    pub fn index_of(&self, occupations: &[usize]) -> Result<usize> {
        if occupations.len() != self.num_modes {
            return Err(CradleError::DimensionMismatch(format!(
                "{} occupations for {} modes",
                occupations.len(),
                self.num_modes
            )));
        }
        occupations
            .iter()
            .enumerate()
            .try_fold(0usize, |acc, (m, &n)| {
                if n >= self.cutoff {
                    Err(CradleError::InvalidParameter(format!(
                        "occupation {n} of mode {m} exceeds cutoff {}",
                        self.cutoff
                    )))
                } else {
                    Ok(acc + n * self.stride(m))
                }
            })
    }

    fn ensure_same(&self, other: &FockSpace) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(CradleError::DimensionMismatch(format!(
                "spaces differ: (N={}, N_c={}) vs (N={}, N_c={})",
                self.num_modes, self.cutoff, other.num_modes, other.cutoff
            )))
        }
    }
}

/// Cavity-array parameters: frequencies, nearest-neighbour couplings and
/// environment weights of the collective operator `A = sum_i l_i a_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub omegas: Vec<f64>,
    /// `lambdas[i]` couples cavity `i` to `i + 1`; the last entry is 0.
    pub lambdas: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SystemSpec {
    pub fn new(omegas: Vec<f64>, lambdas: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let spec = Self {
            omegas,
            lambdas,
            weights,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `n` identical cavities at frequency `omega`, no direct couplings, unit weights.
    pub fn uniform(n: usize, omega: f64) -> Self {
        Self {
            omegas: vec![omega; n],
            lambdas: vec![0.0; n],
            weights: vec![1.0; n],
        }
    }

    pub fn num_modes(&self) -> usize {
        self.omegas.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.omegas.len();
        if n == 0 {
            return Err(CradleError::InvalidParameter(
                "system needs at least one cavity".into(),
            ));
        }
        if self.lambdas.len() != n || self.weights.len() != n {
            return Err(CradleError::DimensionMismatch(format!(
                "omegas/lambdas/weights lengths {}/{}/{} differ",
                n,
                self.lambdas.len(),
                self.weights.len()
            )));
        }
        if self.lambdas[n - 1] != 0.0 {
            return Err(CradleError::InvalidParameter(
                "open boundary requires the last coupling lambda_N = 0".into(),
            ));
        }
        let all = self.omegas.iter().chain(&self.lambdas).chain(&self.weights);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(CradleError::InvalidParameter(
                "non-finite system parameter".into(),
            ));
        }
        Ok(())
    }

    fn check_space(&self, space: &FockSpace) -> Result<()> {
        self.validate()?;
        if space.num_modes() != self.num_modes() {
            return Err(CradleError::DimensionMismatch(format!(
                "system has {} cavities but the Fock space has {} modes",
                self.num_modes(),
                space.num_modes()
            )));
        }
        Ok(())
    }

    /// Weights `(1, 1 - dl, 1 + dl)` for a three-cavity array with asymmetry `eta = dl`.
    pub fn weights_for_eta(eta: f64) -> Vec<f64> {
        vec![1.0, 1.0 - eta, 1.0 + eta]
    }

    /// Coupling asymmetry `(l_j - l_i) / (l_i + l_j)` between cavities `i` and `j`.
    pub fn asymmetry(&self, i: usize, j: usize) -> Result<f64> {
        let (li, lj) = match (self.weights.get(i), self.weights.get(j)) {
            (Some(a), Some(b)) => (*a, *b),
            _ => {
                return Err(CradleError::InvalidMode {
                    index: i.max(j),
                    num_modes: self.num_modes(),
                })
            }
        };
        if li + lj == 0.0 {
            return Err(CradleError::InvalidParameter("l_i + l_j = 0".into()));
        }
        Ok((lj - li) / (li + lj))
    }

    /// Asymmetry between the second and third cavity.
    pub fn eta(&self) -> Result<f64> {
        self.asymmetry(1, 2)
    }
}

/// A sparse operator on a [`FockSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModeOp {
    space: FockSpace,
    matrix: CsrMatrix,
}

impl ModeOp {
    pub fn from_csr(space: FockSpace, matrix: CsrMatrix) -> Result<Self> {
        if matrix.nrows() != space.dim() || matrix.ncols() != space.dim() {
            return Err(CradleError::DimensionMismatch(format!(
                "{}x{} matrix on a space of dimension {}",
                matrix.nrows(),
                matrix.ncols(),
                space.dim()
            )));
        }
        Ok(Self { space, matrix })
    }

    pub fn identity(space: FockSpace) -> Self {
        Self {
            space,
            matrix: CsrMatrix::identity(space.dim()),
        }
    }

    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn csr(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn dagger(&self) -> Self {
        Self {
            space: self.space,
            matrix: self.matrix.adjoint(),
        }
    }

    pub fn scaled(&self, s: C64) -> Self {
        Self {
            space: self.space,
            matrix: self.matrix.scaled(s),
        }
    }

    pub fn plus(&self, other: &Self) -> Result<Self> {
        self.space.ensure_same(&other.space)?;
        Ok(Self {
            space: self.space,
            matrix: self.matrix.add(&other.matrix),
        })
    }

    pub fn minus(&self, other: &Self) -> Result<Self> {
        self.plus(&other.scaled(C64::new(-1.0, 0.0)))
    }

    /// Operator product `self * other`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        self.space.ensure_same(&other.space)?;
        Ok(Self {
            space: self.space,
            matrix: self.matrix.matmul(&other.matrix),
        })
    }

    pub fn commutator(&self, other: &Self) -> Result<Self> {
        self.compose(other)?.minus(&other.compose(self)?)
    }

    /// Largest entry of `|M - M^dagger|`.
    pub fn hermiticity_residual(&self) -> f64 {
        self.matrix.max_abs_diff(&self.matrix.adjoint())
    }

    pub fn max_abs(&self) -> f64 {
        self.matrix
            .values()
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        self.matrix.to_dense()
    }

    pub fn apply(&self, ket: &Ket) -> Result<Ket> {
        self.space.ensure_same(&ket.space)?;
        let mut out = vec![ZERO; self.space.dim()];
        self.matrix.apply(ket.amplitudes.as_slice(), &mut out);
        Ok(Ket {
            space: self.space,
            amplitudes: DVector::from_vec(out),
        })
    }
}

/// Truncated annihilator of `mode`, embedded in the full tensor space.
pub fn mode_annihilator(space: FockSpace, mode: usize) -> Result<ModeOp> {
    space.check_mode(mode)?;
    let stride = space.stride(mode);
    let trip = (0..space.dim())
        .filter_map(|idx| {
            let n = space.occupation(idx, mode);
            (n > 0).then(|| (idx - stride, idx, C64::new((n as f64).sqrt(), 0.0)))
        })
        .collect();
    ModeOp::from_csr(
        space,
        CsrMatrix::from_triplets(space.dim(), space.dim(), trip),
    )
}

pub fn mode_creator(space: FockSpace, mode: usize) -> Result<ModeOp> {
    Ok(mode_annihilator(space, mode)?.dagger())
}

pub fn number_operator(space: FockSpace, mode: usize) -> Result<ModeOp> {
    space.check_mode(mode)?;
    let trip = (0..space.dim())
        .map(|idx| (idx, idx, C64::new(space.occupation(idx, mode) as f64, 0.0)))
        .collect();
    ModeOp::from_csr(
        space,
        CsrMatrix::from_triplets(space.dim(), space.dim(), trip),
    )
}

pub fn total_number_operator(space: FockSpace) -> ModeOp {
    let trip = (0..space.dim())
        .map(|idx| (idx, idx, C64::new(space.total_occupation(idx) as f64, 0.0)))
        .collect();
    ModeOp {
        space,
        matrix: CsrMatrix::from_triplets(space.dim(), space.dim(), trip),
    }
}

/// `H_S = sum_i omega_i n_i + sum_i lambda_i (a_i^dag a_{i+1} + a_i a_{i+1}^dag)`.
///
/// The hopping part is assembled as `T + T^dagger` so the result is exactly Hermitian.
pub fn build_system_hamiltonian(spec: &SystemSpec, space: FockSpace) -> Result<ModeOp> {
    spec.check_space(&space)?;
    let dim = space.dim();
    let mut diag = Vec::with_capacity(dim);
    for idx in 0..dim {
        let e: f64 = (0..space.num_modes())
            .map(|m| spec.omegas[m] * space.occupation(idx, m) as f64)
            .sum();
        diag.push((idx, idx, C64::new(e, 0.0)));
    }
    let mut h = CsrMatrix::from_triplets(dim, dim, diag);
    for i in 0..space.num_modes().saturating_sub(1) {
        let lam = spec.lambdas[i];
        if lam == 0.0 {
            continue;
        }
        let hop = mode_creator(space, i)?
            .compose(&mode_annihilator(space, i + 1)?)?
            .scaled(C64::new(lam, 0.0));
        h = h.add(&hop.matrix).add(&hop.matrix.adjoint());
    }
    ModeOp::from_csr(space, h)
}

/// Collective environment coupling `A = sum_i l_i a_i`.
pub fn collective_operator(spec: &SystemSpec, space: FockSpace) -> Result<ModeOp> {
    spec.check_space(&space)?;
    let mut a = CsrMatrix::zeros(space.dim(), space.dim());
    for (m, &l) in spec.weights.iter().enumerate() {
        if l != 0.0 {
            a = a.add(&mode_annihilator(space, m)?.matrix.scaled(C64::new(l, 0.0)));
        }
    }
    ModeOp::from_csr(space, a)
}

/// Probability mass of a Poisson(|alpha|^2) distribution at or above `cutoff`.
pub fn poisson_tail(alpha_abs: f64, cutoff: usize) -> f64 {
    let mean = alpha_abs * alpha_abs;
    let mut term = (-mean).exp();
    let mut inside = 0.0;
    for n in 0..cutoff {
        inside += term;
        term *= mean / (n + 1) as f64;
    }
    (1.0 - inside).max(0.0)
}

/// Rule of thumb for a comfortable cutoff: `N_c >= |alpha|^2 + 6|alpha| + 4`.
pub fn recommended_cutoff(alpha_abs: f64) -> usize {
    (alpha_abs * alpha_abs + 6.0 * alpha_abs + 4.0).ceil() as usize
}

fn check_cutoff(alpha: C64, cutoff: usize) -> Result<()> {
    let tail = poisson_tail(alpha.norm(), cutoff);
    if tail > MAX_TAIL_MASS {
        return Err(CradleError::CutoffTooSmall {
            cutoff,
            alpha: alpha.norm(),
            tail,
        });
    }
    if cutoff < recommended_cutoff(alpha.norm()) {
        log::warn!(
            "cutoff {cutoff} below the recommended {} for |alpha| = {:.3}; truncated tail {tail:.2e}",
            recommended_cutoff(alpha.norm()),
            alpha.norm()
        );
    }
    Ok(())
}

/// Unnormalised coherent amplitudes `alpha^n / sqrt(n!)`, `n < cutoff`.
fn coherent_series(alpha: C64, cutoff: usize) -> Vec<C64> {
    let mut out = Vec::with_capacity(cutoff);
    let mut c = C64::new(1.0, 0.0);
    for n in 0..cutoff {
        if n > 0 {
            c = c * alpha / (n as f64).sqrt();
        }
        out.push(c);
    }
    out
}

fn normalized(mut v: Vec<C64>) -> Vec<C64> {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    v.iter_mut().for_each(|c| *c /= norm);
    v
}

/// Single-mode coherent state `|alpha>`, renormalised after truncation.
pub fn coherent_amplitudes(alpha: C64, cutoff: usize) -> Result<Vec<C64>> {
    check_cutoff(alpha, cutoff)?;
    Ok(normalized(coherent_series(alpha, cutoff)))
}

/// Single-mode rotated even cat `(|alpha e^{-i theta}> + |-alpha e^{-i theta}>)/sqrt(N)`,
/// renormalised after truncation.
pub fn cat_amplitudes(alpha: C64, theta: f64, cutoff: usize) -> Result<Vec<C64>> {
    check_cutoff(alpha, cutoff)?;
    let rotated = alpha * C64::from_polar(1.0, -theta);
    let series = coherent_series(rotated, cutoff)
        .into_iter()
        .enumerate()
        .map(|(n, c)| if n % 2 == 0 { c } else { ZERO })
        .collect();
    Ok(normalized(series))
}

/// Normalisation `2 (1 + exp(-2|alpha|^2))` of the untruncated even cat.
pub fn cat_normalization(alpha_abs: f64) -> f64 {
    2.0 * (1.0 + (-2.0 * alpha_abs * alpha_abs).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ket {
    space: FockSpace,
    amplitudes: DVector<C64>,
}

impl Ket {
    pub fn new(space: FockSpace, amplitudes: DVector<C64>) -> Result<Self> {
        if amplitudes.len() != space.dim() {
            return Err(CradleError::DimensionMismatch(format!(
                "ket of length {} for dimension {}",
                amplitudes.len(),
                space.dim()
            )));
        }
        Ok(Self { space, amplitudes })
    }

    pub fn vacuum(space: FockSpace) -> Self {
        let mut amps = DVector::zeros(space.dim());
        amps[0] = C64::new(1.0, 0.0);
        Self {
            space,
            amplitudes: amps,
        }
    }

    pub fn basis(space: FockSpace, occupations: &[usize]) -> Result<Self> {
        let mut amps = DVector::zeros(space.dim());
        amps[space.index_of(occupations)?] = C64::new(1.0, 0.0);
        Ok(Self {
            space,
            amplitudes: amps,
        })
    }

    /// Tensor product of one single-mode vector per mode (mode 0 first).
    pub fn product(space: FockSpace, factors: &[Vec<C64>]) -> Result<Self> {
        if factors.len() != space.num_modes() || factors.iter().any(|f| f.len() != space.cutoff()) {
            return Err(CradleError::DimensionMismatch(
                "product factors must match the mode count and cutoff".into(),
            ));
        }
        let amps = DVector::from_fn(space.dim(), |idx, _| {
            factors
                .iter()
                .enumerate()
                .map(|(m, f)| f[space.occupation(idx, m)])
                .product()
        });
        Ok(Self {
            space,
            amplitudes: amps,
        })
    }

    /// `single` in mode `mode`, vacuum in every other mode.
    pub fn embed_single_mode(space: FockSpace, mode: usize, single: Vec<C64>) -> Result<Self> {
        space.check_mode(mode)?;
        let mut vac = vec![ZERO; space.cutoff()];
        vac[0] = C64::new(1.0, 0.0);
        let factors: Vec<Vec<C64>> = (0..space.num_modes())
            .map(|m| {
                if m == mode {
                    single.clone()
                } else {
                    vac.clone()
                }
            })
            .collect();
        Self::product(space, &factors)
    }

    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> DVector<C64> {
        self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn inner(&self, other: &Ket) -> Result<C64> {
        self.space.ensure_same(&other.space)?;
        Ok(self.amplitudes.dotc(&other.amplitudes))
    }

    pub fn is_finite(&self) -> bool {
        self.amplitudes
            .iter()
            .all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn projector(&self) -> DensOp {
        DensOp {
            space: self.space,
            matrix: &self.amplitudes * self.amplitudes.adjoint(),
        }
    }

    /// `<psi| op |psi>` (not divided by the norm).
    pub fn expectation(&self, op: &ModeOp) -> Result<C64> {
        let applied = op.apply(self)?;
        Ok(self.amplitudes.dotc(&applied.amplitudes))
    }

    /// Reduced state of one mode, `Tr_rest |psi><psi|`, without normalisation.
    pub fn reduced(&self, keep: usize) -> Result<DensOp> {
        self.space.check_mode(keep)?;
        let nc = self.space.cutoff();
        let mut red = DMatrix::zeros(nc, nc);
        reduced_dyad_accumulate(self.space, keep, self.amplitudes.as_slice(), &mut red);
        Ok(DensOp {
            space: FockSpace::single_mode(nc)?,
            matrix: red,
        })
    }
}

/// Adds `Tr_rest |psi><psi|` for mode `keep` into `out` (cutoff x cutoff).
pub(crate) fn reduced_dyad_accumulate(
    space: FockSpace,
    keep: usize,
    psi: &[C64],
    out: &mut DMatrix<C64>,
) {
    let nc = space.cutoff();
    let s = space.stride(keep);
    let outer = space.dim() / (s * nc);
    for hi in 0..outer {
        let base = hi * s * nc;
        for lo in 0..s {
            for n in 0..nc {
                let pn = psi[base + n * s + lo];
                if pn.norm_sqr() == 0.0 {
                    continue;
                }
                for m in 0..nc {
                    out[(n, m)] += pn * psi[base + m * s + lo].conj();
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensOp {
    space: FockSpace,
    matrix: DMatrix<C64>,
}

impl DensOp {
    pub fn new(space: FockSpace, matrix: DMatrix<C64>) -> Result<Self> {
        if matrix.nrows() != space.dim() || matrix.ncols() != space.dim() {
            return Err(CradleError::DimensionMismatch(format!(
                "{}x{} density matrix for dimension {}",
                matrix.nrows(),
                matrix.ncols(),
                space.dim()
            )));
        }
        Ok(Self { space, matrix })
    }

    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn purity(&self) -> f64 {
        // Tr(rho^2) = sum_ij |rho_ij|^2 for Hermitian rho
        self.matrix.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Largest entry of `|rho - rho^dagger|`.
    pub fn hermiticity_residual(&self) -> f64 {
        let n = self.matrix.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((self.matrix[(i, j)] - self.matrix[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let herm = (&self.matrix + self.matrix.adjoint()) * C64::new(0.5, 0.0);
        hermitian_eigenvalues(&herm)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    pub fn expectation(&self, op: &ModeOp) -> Result<C64> {
        self.space.ensure_same(&op.space)?;
        // Tr(rho O) = sum_{r,c} rho[c, r] O[r, c]
        Ok(op
            .matrix
            .triplets()
            .map(|(r, c, v)| self.matrix[(c, r)] * v)
            .sum())
    }

    pub fn partial_trace(&self, keep: usize) -> Result<DensOp> {
        self.space.check_mode(keep)?;
        let nc = self.space.cutoff();
        let s = self.space.stride(keep);
        let outer = self.space.dim() / (s * nc);
        let mut red = DMatrix::zeros(nc, nc);
        for hi in 0..outer {
            let base = hi * s * nc;
            for lo in 0..s {
                for n in 0..nc {
                    for m in 0..nc {
                        red[(n, m)] += self.matrix[(base + n * s + lo, base + m * s + lo)];
                    }
                }
            }
        }
        Ok(DensOp {
            space: FockSpace::single_mode(nc)?,
            matrix: red,
        })
    }

    /// Trace distance `||rho - sigma||_1 / 2`.
    pub fn trace_distance(&self, other: &DensOp) -> Result<f64> {
        self.space.ensure_same(&other.space)?;
        Ok(trace_norm(&(&self.matrix - &other.matrix)) / 2.0)
    }

    /// `<psi| rho |psi>`
    pub fn fidelity_with_pure(&self, psi: &[C64]) -> Result<f64> {
        if psi.len() != self.space.dim() {
            return Err(CradleError::DimensionMismatch(
                "state length differs from rho".into(),
            ));
        }
        let v = DVector::from_column_slice(psi);
        Ok((v.adjoint() * &self.matrix * &v)[(0, 0)].re)
    }

    /// Single-mode state rotated by `exp(-i phase n)`: `rho_nm -> rho_nm e^{-i phase (n - m)}`.
    pub fn rotated(&self, phase: f64) -> Result<DensOp> {
        if self.space.num_modes() != 1 {
            return Err(CradleError::DimensionMismatch(
                "rotation applies to single-mode states".into(),
            ));
        }
        let mut m = self.matrix.clone();
        for ((n, k), v) in m.iter_mut().enumerate().map(|(flat, v)| {
            let nr = self.matrix.nrows();
            ((flat % nr, flat / nr), v)
        }) {
            *v *= C64::from_polar(1.0, -phase * (n as f64 - k as f64));
        }
        Ok(DensOp {
            space: self.space,
            matrix: m,
        })
    }
}

/// Sum of absolute eigenvalues of a Hermitian matrix.
pub fn trace_norm(m: &DMatrix<C64>) -> f64 {
    let herm = (m + m.adjoint()) * C64::new(0.5, 0.0);
    hermitian_eigenvalues(&herm).iter().map(|e| e.abs()).sum()
}

/// Ascending eigenvalues of a Hermitian matrix.
///
/// The eigenvalue-only QR iteration can return infinities on highly
/// degenerate inputs such as pure-state projectors; those are retried on the
/// matrix shifted by a multiple of the identity. All-NaN if every shift fails.
pub fn hermitian_eigenvalues(m: &DMatrix<C64>) -> Vec<f64> {
    let n = m.nrows();
    let scale = m.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt().max(1.0);
    for shift in [0.0, 1.0, -1.7, 3.1] {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += shift * scale;
        }
        let mut ev: Vec<f64> = shifted
            .symmetric_eigenvalues()
            .iter()
            .map(|e| e - shift * scale)
            .collect();
        if ev.iter().all(|e| e.is_finite()) {
            ev.sort_by(|a, b| a.total_cmp(b));
            return ev;
        }
    }
    vec![f64::NAN; n]
}

/// A state on the truncated space: a (possibly unnormalised) ket or a density operator.
#[derive(Debug, Clone)]
pub enum QuantumState {
    Ket(Ket),
    Dens(DensOp),
}

impl QuantumState {
    pub fn space(&self) -> FockSpace {
        match self {
            Self::Ket(k) => k.space(),
            Self::Dens(d) => d.space(),
        }
    }
}

/// `Tr(rho O)` or `<psi|O|psi>`.
pub fn expectation(state: &QuantumState, op: &ModeOp) -> Result<C64> {
    match state {
        QuantumState::Ket(k) => k.expectation(op),
        QuantumState::Dens(d) => d.expectation(op),
    }
}

/// The basis states with at most `cap` photons in total.
///
/// `H_S` and `A^dagger A`-type terms conserve the total photon number and `A`
/// lowers it, so a state that starts inside this set never leaves it; the
/// propagators work on this compressed basis and embed results back into the
/// full space.
#[derive(Debug, Clone)]
pub struct ExcitationSector {
    space: FockSpace,
    cap: usize,
    states: Vec<usize>,
    lookup: Vec<Option<usize>>,
}

impl ExcitationSector {
    pub fn new(space: FockSpace, cap: usize) -> Self {
        let mut lookup = vec![None; space.dim()];
        let mut states = Vec::new();
        for (idx, slot) in lookup.iter_mut().enumerate() {
            if space.total_occupation(idx) <= cap {
                *slot = Some(states.len());
                states.push(idx);
            }
        }
        Self {
            space,
            cap,
            states,
            lookup,
        }
    }

    /// Smallest sector containing every nonzero amplitude of `ket`.
    pub fn covering(ket: &Ket) -> Self {
        let space = ket.space();
        let cap = ket
            .amplitudes()
            .iter()
            .enumerate()
            .filter(|(_, c)| c.norm_sqr() > 0.0)
            .map(|(i, _)| space.total_occupation(i))
            .max()
            .unwrap_or(0);
        Self::new(space, cap)
    }

    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    /// Full-space index of each compressed basis state.
    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn restrict(&self, op: &ModeOp) -> Result<CsrMatrix> {
        self.space.ensure_same(&op.space)?;
        Ok(op.matrix.restrict(&self.lookup, self.dim()))
    }

    pub fn compress(&self, ket: &Ket) -> Result<Vec<C64>> {
        self.space.ensure_same(&ket.space)?;
        let outside: f64 = ket
            .amplitudes
            .iter()
            .enumerate()
            .filter(|(i, _)| self.lookup[*i].is_none())
            .map(|(_, c)| c.norm_sqr())
            .sum();
        if outside > 0.0 {
            return Err(CradleError::DimensionMismatch(format!(
                "state has weight {outside:.3e} outside the {}-photon sector",
                self.cap
            )));
        }
        Ok(self.states.iter().map(|&i| ket.amplitudes[i]).collect())
    }

    pub fn expand_ket(&self, compressed: &[C64]) -> Ket {
        let mut amps = DVector::zeros(self.space.dim());
        for (&full, &c) in self.states.iter().zip(compressed) {
            amps[full] = c;
        }
        Ket {
            space: self.space,
            amplitudes: amps,
        }
    }

    pub fn expand_dens(&self, compressed: &DMatrix<C64>) -> DensOp {
        let mut m = DMatrix::zeros(self.space.dim(), self.space.dim());
        for (j, &fj) in self.states.iter().enumerate() {
            for (i, &fi) in self.states.iter().enumerate() {
                m[(fi, fj)] = compressed[(i, j)];
            }
        }
        DensOp {
            space: self.space,
            matrix: m,
        }
    }

    /// Reduced single-mode state of a compressed density matrix.
    pub fn reduced_dens(&self, compressed: &DMatrix<C64>, keep: usize) -> Result<DensOp> {
        self.space.check_mode(keep)?;
        let nc = self.space.cutoff();
        let s = self.space.stride(keep);
        let mut red = DMatrix::zeros(nc, nc);
        // pair up compressed states that agree on every mode except `keep`
        for (i, &fi) in self.states.iter().enumerate() {
            let n = self.space.occupation(fi, keep);
            let rest = fi - n * s;
            for m in 0..nc {
                if let Some(j) = self.lookup[rest + m * s] {
                    red[(n, m)] += compressed[(i, j)];
                }
            }
        }
        Ok(DensOp {
            space: FockSpace::single_mode(nc)?,
            matrix: red,
        })
    }

    /// Adds the reduced dyad of a compressed ket for mode `keep` into `out`.
    pub fn reduced_dyad_accumulate(&self, psi: &[C64], keep: usize, out: &mut DMatrix<C64>) {
        let nc = self.space.cutoff();
        let s = self.space.stride(keep);
        for (i, &fi) in self.states.iter().enumerate() {
            let pi = psi[i];
            if pi.norm_sqr() == 0.0 {
                continue;
            }
            let n = self.space.occupation(fi, keep);
            let rest = fi - n * s;
            for m in 0..nc {
                if let Some(j) = self.lookup[rest + m * s] {
                    out[(n, m)] += pi * psi[j].conj();
                }
            }
        }
    }
}
