//! Propagation of the cavity array: the time-local master equation for `rho`
//! and linear stochastic trajectories whose dyad average reproduces it.
//!
//! Both paths work on the excitation sector `n_1 + ... + n_N <= N_c - 1`, which
//! contains the default initial state and is closed under every operator in
//! the equations, and in the interaction picture of the quadratic `H_S`. There
//! every annihilator turns into `a_k(t) = sum_j u_kj(t) a_j` with
//! `u(t) = exp(-i h t)` and `h` the single-particle matrix of `H_S`, so the
//! integrator only resolves the environment-induced terms. States are brought
//! back to the laboratory frame at probe times by `exp(-i H_S t)`, which is
//! block diagonal in the total photon number.
//!
//! With `K = -sum_k F_k A(t)^dag a_k(t)` and `Obar = sum_k F_k a_k(t)`:
//!
//! ```text
//! d rho / dt = K rho + rho K^dag + A(t) rho Obar^dag + Obar rho A(t)^dag
//! d psi / dt = K psi + conj(z_t) A(t) psi
//! ```

use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coeff::{format_float, CoefficientTable};
use crate::env::{
    derive_seed, fill_ou, CirculantSampler, EnvKernel, LorentzSpec, DEFAULT_EMBEDDING_TOL,
};
use crate::error::{CradleError, Result};
use crate::fock::{
    build_system_hamiltonian, cat_amplitudes, hermitian_eigenvalues, mode_annihilator,
    mode_creator, trace_norm, DensOp, ExcitationSector, FockSpace, Ket, SystemSpec,
};
use crate::observables::{transfer_fidelity, FidelityCurve, DEFAULT_THETA_POINTS};
use crate::sparse::{CsrMatrix, OperatorCombination};
use crate::table::CsvTable;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

pub const PROBE_SCHEMA: &str = "# schema: cradle-probes v1";
pub const RHO_DUMP_FORMAT: &str = "cradle-rho v1";
/// Default sup-norm tolerance of the dt-halving check on a fidelity curve.
pub const HALVING_TOL: f64 = 5e-3;
/// Default number of jackknife blocks.
pub const DEFAULT_BLOCKS: usize = 20;
/// Trajectories propagated together as one dense block.
pub const BATCH_WIDTH: usize = 16;
/// Upper bound on the full eigenvalue checks of a master run.
pub const MAX_SPECTRUM_CHECKS: usize = 60;

/// Eigen-decomposition of `H_S` restricted to a fixed total photon number.
#[derive(Debug, Clone)]
struct FrameBlock {
    indices: Vec<usize>,
    vectors: DMatrix<C64>,
    energies: Vec<f64>,
}

impl FrameBlock {
    /// `exp(-i H_S t)` on this block.
    fn unitary(&self, t: f64) -> DMatrix<C64> {
        let mut scaled = self.vectors.clone();
        for (j, e) in self.energies.iter().enumerate() {
            let p = C64::from_polar(1.0, -e * t);
            for v in scaled.column_mut(j).iter_mut() {
                *v *= p;
            }
        }
        scaled * self.vectors.adjoint()
    }
}

/// Sector operators of one system in the interaction picture of `H_S`.
#[derive(Debug, Clone)]
pub struct Propagator {
    spec: SystemSpec,
    sector: ExcitationSector,
    /// `h = W diag(eps) W^T`
    eps: Vec<f64>,
    w: DMatrix<f64>,
    /// `a_i^dag a_j`, index `i * N + j`
    k_comb: OperatorCombination,
    /// `a_j`
    o_comb: OperatorCombination,
    blocks: Vec<FrameBlock>,
}

impl Propagator {
    pub fn new(spec: &SystemSpec, cutoff: usize) -> Result<Self> {
        spec.validate()?;
        let n = spec.num_modes();
        let space = FockSpace::new(n, cutoff)?;
        let sector = ExcitationSector::new(space, cutoff - 1);
        let mut lowering = Vec::with_capacity(n);
        let mut raising = Vec::with_capacity(n);
        for k in 0..n {
            lowering.push(mode_annihilator(space, k)?);
            raising.push(mode_creator(space, k)?);
        }
        let mut k_terms = Vec::with_capacity(n * n);
        for ai in &raising {
            for aj in &lowering {
                k_terms.push(sector.restrict(&ai.compose(aj)?)?);
            }
        }
        let o_terms = lowering
            .iter()
            .map(|a| sector.restrict(a))
            .collect::<Result<Vec<_>>>()?;

        let h = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                spec.omegas[i]
            } else if j == i + 1 {
                spec.lambdas[i]
            } else if i == j + 1 {
                spec.lambdas[j]
            } else {
                0.0
            }
        });
        let eig = h.symmetric_eigen();

        let h_sector = sector
            .restrict(&build_system_hamiltonian(spec, space)?)?
            .to_dense();
        let mut by_count: Vec<Vec<usize>> = vec![Vec::new(); cutoff];
        for (c, &full) in sector.states().iter().enumerate() {
            by_count[space.total_occupation(full)].push(c);
        }
        let blocks = by_count
            .into_iter()
            .filter(|idx| !idx.is_empty())
            .map(|indices| {
                let m = indices.len();
                let sub = DMatrix::from_fn(m, m, |r, c| h_sector[(indices[r], indices[c])]);
                let e = sub.symmetric_eigen();
                FrameBlock {
                    indices,
                    vectors: e.eigenvectors,
                    energies: e.eigenvalues.iter().copied().collect(),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            sector,
            eps: eig.eigenvalues.iter().copied().collect(),
            w: eig.eigenvectors,
            k_comb: OperatorCombination::new(&k_terms),
            o_comb: OperatorCombination::new(&o_terms),
            blocks,
        })
    }

    pub fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    pub fn sector(&self) -> &ExcitationSector {
        &self.sector
    }

    pub fn space(&self) -> FockSpace {
        self.sector.space()
    }

    pub fn dim(&self) -> usize {
        self.sector.dim()
    }

    pub fn num_modes(&self) -> usize {
        self.spec.num_modes()
    }

    /// Single-particle propagator `u(t) = exp(-i h t)`.
    pub fn single_particle(&self, t: f64) -> DMatrix<C64> {
        let n = self.num_modes();
        DMatrix::from_fn(n, n, |k, j| {
            (0..n)
                .map(|m| C64::from_polar(self.w[(k, m)] * self.w[(j, m)], -self.eps[m] * t))
                .sum()
        })
    }

    /// Cat of amplitude `alpha` in `cavity`, vacuum elsewhere, as a sector vector.
    pub fn cat_initial(&self, alpha: C64, cavity: usize) -> Result<Vec<C64>> {
        let space = self.space();
        space.check_mode(cavity)?;
        let cat = cat_amplitudes(alpha, 0.0, space.cutoff())?;
        self.sector
            .compress(&Ket::embed_single_mode(space, cavity, cat)?)
    }

    /// Operator scratch; `dense` is the side of the dense buffers (zero for trajectories).
    fn workspace(&self, dense: usize) -> Workspace {
        let d = dense;
        let n = self.num_modes();
        Workspace {
            k: self.k_comb.zeroed(),
            o: self.o_comb.zeroed(),
            a: self.o_comb.zeroed(),
            abar: self.o_comb.zeroed(),
            k_coeffs: vec![ZERO; n * n],
            o_coeffs: vec![ZERO; n],
            a_coeffs: vec![ZERO; n],
            abar_coeffs: vec![ZERO; n],
            m: DMatrix::zeros(d, d),
            x: DMatrix::zeros(d, d),
        }
    }

    /// Assembles `K`, `Obar` and `A(t)` for coefficients `f` at time `t`.
    fn assemble(&self, t: f64, f: &[C64], ws: &mut Workspace) {
        let n = self.num_modes();
        let u = self.single_particle(t);
        for j in 0..n {
            ws.a_coeffs[j] = (0..n).map(|k| u[(k, j)] * self.spec.weights[k]).sum();
            ws.o_coeffs[j] = (0..n).map(|k| u[(k, j)] * f[k]).sum();
        }
        for i in 0..n {
            for j in 0..n {
                ws.k_coeffs[i * n + j] = -ws.a_coeffs[i].conj() * ws.o_coeffs[j];
            }
        }
        self.k_comb.assemble_into(&ws.k_coeffs, &mut ws.k);
        self.o_comb.assemble_into(&ws.o_coeffs, &mut ws.o);
        self.o_comb.assemble_into(&ws.a_coeffs, &mut ws.a);
    }

    /// Master-equation right-hand side at time `t`, evaluated as `M + M^dag`
    /// with `M = K rho + Obar rho A^dag` so that the result is exactly Hermitian.
    fn master_rhs(
        &self,
        t: f64,
        f: &[C64],
        rho: &DMatrix<C64>,
        out: &mut DMatrix<C64>,
        ws: &mut Workspace,
    ) {
        let d = self.dim();
        self.assemble(t, f, ws);
        for (b, a) in ws.abar_coeffs.iter_mut().zip(&ws.a_coeffs) {
            *b = a.conj();
        }
        self.o_comb.assemble_into(&ws.abar_coeffs, &mut ws.abar);
        // rho is Hermitian, so row c of rho is conj(column c): row-wise products
        // become column axpys on conj(rho), producing transposed results.
        // m = (K rho)^T + conj(A) (Obar rho)^T = M^T
        ws.k.apply_rows_conj(rho.as_slice(), ws.m.as_mut_slice(), d);
        ws.o.apply_rows_conj(rho.as_slice(), ws.x.as_mut_slice(), d);
        ws.abar
            .apply_block_add(ws.x.as_slice(), ws.m.as_mut_slice(), d);
        // out = M + M^dag, Hermitian by construction
        const TILE: usize = 32;
        let m = &ws.m;
        for j0 in (0..d).step_by(TILE) {
            for i0 in (0..d).step_by(TILE) {
                for j in j0..(j0 + TILE).min(d) {
                    for i in i0..(i0 + TILE).min(d) {
                        out[(i, j)] = m[(j, i)] + m[(i, j)].conj();
                    }
                }
            }
        }
    }

    /// One classical fourth-order step of the interaction-picture master
    /// equation from `t`. `f` holds the coefficients at `t`, `t + dt/2` and `t + dt`.
    pub fn step_master(
        &self,
        rho: &mut DMatrix<C64>,
        t: f64,
        dt: f64,
        f: [&[C64]; 3],
        ws: &mut MasterWorkspace,
    ) -> Result<()> {
        let d = self.dim();
        if rho.nrows() != d || rho.ncols() != d {
            return Err(CradleError::DimensionMismatch(format!(
                "rho is {}x{}, sector dimension is {d}",
                rho.nrows(),
                rho.ncols()
            )));
        }
        let tm = t + 0.5 * dt;
        let MasterWorkspace { ops, k, stage, acc } = ws;
        self.master_rhs(t, f[0], rho, k, ops);
        acc.copy_from(k);
        combine(stage, rho, 0.5 * dt, k);
        self.master_rhs(tm, f[1], stage, k, ops);
        axpy(acc, 2.0, k);
        combine(stage, rho, 0.5 * dt, k);
        self.master_rhs(tm, f[1], stage, k, ops);
        axpy(acc, 2.0, k);
        combine(stage, rho, dt, k);
        self.master_rhs(t + dt, f[2], stage, k, ops);
        axpy(acc, 1.0, k);
        axpy(rho, dt / 6.0, acc);
        if rho.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(CradleError::NonFinite { step: 0 });
        }
        Ok(())
    }

    pub fn master_workspace(&self) -> MasterWorkspace {
        let d = self.dim();
        MasterWorkspace {
            ops: self.workspace(d),
            k: DMatrix::zeros(d, d),
            stage: DMatrix::zeros(d, d),
            acc: DMatrix::zeros(d, d),
        }
    }

    /// Trajectory right-hand side for a row-major block of kets (amplitude `i`
    /// of ket `j` at `i * width + j`), `noise[j]` being `conj(z)` of ket `j`.
    #[allow(clippy::too_many_arguments)]
    fn trajectory_rhs(
        &self,
        t: f64,
        f: &[C64],
        noise: &[C64],
        psi: &[C64],
        out: &mut [C64],
        tmp: &mut [C64],
        ws: &mut Workspace,
    ) {
        let width = noise.len();
        self.assemble(t, f, ws);
        ws.k.apply_rows(psi, out, width);
        ws.a.apply_rows(psi, tmp, width);
        for (o, v) in out.chunks_exact_mut(width).zip(tmp.chunks_exact(width)) {
            for ((o, v), z) in o.iter_mut().zip(v).zip(noise) {
                *o += z * v;
            }
        }
    }

    /// One fourth-order step of the kets stored row-major in `psi`.
    /// `noise[s][j]` is the sample `z` of ket `j` at stage time `s`
    /// (`t`, `t + dt/2`, `t + dt`).
    pub fn step_trajectories(
        &self,
        psi: &mut [C64],
        t: f64,
        dt: f64,
        f: [&[C64]; 3],
        noise: [&[C64]; 3],
        ws: &mut TrajectoryWorkspace,
    ) -> Result<()> {
        let d = self.dim();
        let width = noise[0].len();
        if psi.len() != d * width {
            return Err(CradleError::DimensionMismatch(format!(
                "block has {} amplitudes, expected {d} x {width}",
                psi.len()
            )));
        }
        ws.resize(d, width);
        let TrajectoryWorkspace {
            ops,
            k,
            stage,
            acc,
            tmp,
            z,
        } = ws;
        let conj = |s: usize, z: &mut Vec<C64>| {
            z.clear();
            z.extend(noise[s].iter().map(|v| v.conj()));
        };
        let tm = t + 0.5 * dt;
        conj(0, z);
        self.trajectory_rhs(t, f[0], z, psi, k, tmp, ops);
        acc.copy_from_slice(k);
        conj(1, z);
        for (st, (p, kv)) in stage.iter_mut().zip(psi.iter().zip(k.iter())) {
            *st = p + kv * (0.5 * dt);
        }
        self.trajectory_rhs(tm, f[1], z, stage, k, tmp, ops);
        for (a, kv) in acc.iter_mut().zip(k.iter()) {
            *a += kv * 2.0;
        }
        for (st, (p, kv)) in stage.iter_mut().zip(psi.iter().zip(k.iter())) {
            *st = p + kv * (0.5 * dt);
        }
        self.trajectory_rhs(tm, f[1], z, stage, k, tmp, ops);
        for (a, kv) in acc.iter_mut().zip(k.iter()) {
            *a += kv * 2.0;
        }
        conj(2, z);
        for (st, (p, kv)) in stage.iter_mut().zip(psi.iter().zip(k.iter())) {
            *st = p + kv * dt;
        }
        self.trajectory_rhs(t + dt, f[2], z, stage, k, tmp, ops);
        for ((p, a), kv) in psi.iter_mut().zip(acc.iter()).zip(k.iter()) {
            *p += (a + kv) * (dt / 6.0);
        }
        if psi.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(CradleError::NonFinite { step: 0 });
        }
        Ok(())
    }

    /// Single-ket form of [`Propagator::step_trajectories`]; `z` holds the noise
    /// samples at the three stage times.
    pub fn step_trajectory(
        &self,
        psi: &mut [C64],
        t: f64,
        dt: f64,
        f: [&[C64]; 3],
        z: [C64; 3],
        ws: &mut TrajectoryWorkspace,
    ) -> Result<()> {
        self.step_trajectories(psi, t, dt, f, [&z[0..1], &z[1..2], &z[2..3]], ws)
    }

    pub fn trajectory_workspace(&self) -> TrajectoryWorkspace {
        TrajectoryWorkspace {
            ops: self.workspace(0),
            k: Vec::new(),
            stage: Vec::new(),
            acc: Vec::new(),
            tmp: Vec::new(),
            z: Vec::new(),
        }
    }

    /// `exp(-i H_S t)` on every photon-number block.
    pub fn frame(&self, t: f64) -> Vec<DMatrix<C64>> {
        self.blocks.iter().map(|b| b.unitary(t)).collect()
    }

    /// Interaction-picture sector matrix to the laboratory frame at time `t`.
    pub fn to_lab(&self, rho: &DMatrix<C64>, t: f64) -> DMatrix<C64> {
        self.to_lab_with(&self.frame(t), rho)
    }

    /// Block-wise `U rho U^dag` for Hermitian `rho`; the lower triangle is
    /// mirrored from the upper one so the result stays exactly Hermitian.
    fn to_lab_with(&self, frame: &[DMatrix<C64>], rho: &DMatrix<C64>) -> DMatrix<C64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (a, (bi, ui)) in self.blocks.iter().zip(frame).enumerate() {
            for (bj, uj) in self.blocks.iter().zip(frame).skip(a) {
                let sub = DMatrix::from_fn(bi.indices.len(), bj.indices.len(), |r, c| {
                    rho[(bi.indices[r], bj.indices[c])]
                });
                let lab = ui * sub * uj.adjoint();
                for (c, &jc) in bj.indices.iter().enumerate() {
                    for (r, &ir) in bi.indices.iter().enumerate() {
                        out[(ir, jc)] = lab[(r, c)];
                        out[(jc, ir)] = lab[(r, c)].conj();
                    }
                }
            }
            for (r, &ir) in bi.indices.iter().enumerate() {
                for &jc in &bi.indices[r..] {
                    if ir == jc {
                        out[(ir, ir)].im = 0.0;
                    } else {
                        out[(jc, ir)] = out[(ir, jc)].conj();
                    }
                }
            }
        }
        out
    }

    /// Interaction-picture sector ket to the laboratory frame at time `t`.
    pub fn ket_to_lab(&self, psi: &[C64], t: f64) -> Vec<C64> {
        let mut out = vec![ZERO; psi.len()];
        self.ket_to_lab_with(&self.frame(t), psi, &mut out);
        out
    }

    fn ket_to_lab_with(&self, frame: &[DMatrix<C64>], psi: &[C64], out: &mut [C64]) {
        for (b, u) in self.blocks.iter().zip(frame) {
            for (r, &ir) in b.indices.iter().enumerate() {
                out[ir] = b
                    .indices
                    .iter()
                    .enumerate()
                    .map(|(c, &ic)| u[(r, c)] * psi[ic])
                    .sum();
            }
        }
    }

    fn reduced(&self, rho: &DMatrix<C64>) -> Result<Vec<DensOp>> {
        (0..self.num_modes())
            .map(|k| self.sector.reduced_dens(rho, k))
            .collect()
    }

    /// Population of the highest Fock level of any cavity.
    fn top_occupancy(reduced: &[DensOp]) -> f64 {
        reduced
            .iter()
            .map(|r| {
                let n = r.matrix().nrows();
                r.matrix()[(n - 1, n - 1)].re
            })
            .fold(0.0, f64::max)
    }

    fn photons(reduced: &[DensOp]) -> Vec<f64> {
        reduced
            .iter()
            .map(|r| {
                (0..r.matrix().nrows())
                    .map(|n| n as f64 * r.matrix()[(n, n)].re)
                    .sum()
            })
            .collect()
    }
}

/// `out = base + a x`
fn combine(out: &mut DMatrix<C64>, base: &DMatrix<C64>, a: f64, x: &DMatrix<C64>) {
    for ((o, b), v) in out.iter_mut().zip(base.iter()).zip(x.iter()) {
        *o = b + v * a;
    }
}

/// `y += a x`
fn axpy(y: &mut DMatrix<C64>, a: f64, x: &DMatrix<C64>) {
    for (o, v) in y.iter_mut().zip(x.iter()) {
        *o += v * a;
    }
}

/// Scratch matrices reused across right-hand-side evaluations.
#[derive(Debug, Clone)]
struct Workspace {
    k: CsrMatrix,
    o: CsrMatrix,
    a: CsrMatrix,
    abar: CsrMatrix,
    k_coeffs: Vec<C64>,
    o_coeffs: Vec<C64>,
    a_coeffs: Vec<C64>,
    abar_coeffs: Vec<C64>,
    m: DMatrix<C64>,
    x: DMatrix<C64>,
}

#[derive(Debug, Clone)]
pub struct MasterWorkspace {
    ops: Workspace,
    k: DMatrix<C64>,
    stage: DMatrix<C64>,
    acc: DMatrix<C64>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryWorkspace {
    ops: Workspace,
    k: Vec<C64>,
    stage: Vec<C64>,
    acc: Vec<C64>,
    tmp: Vec<C64>,
    z: Vec<C64>,
}

impl TrajectoryWorkspace {
    fn resize(&mut self, d: usize, width: usize) {
        for v in [&mut self.k, &mut self.stage, &mut self.acc, &mut self.tmp] {
            v.resize(d * width, ZERO);
        }
    }
}

/// Integration grid and probe layout shared by both propagation paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    pub dt: f64,
    pub t_max: f64,
    pub probe_interval: f64,
    /// Times at which the full sector state is kept (snapped to probes).
    pub full_state_times: Vec<f64>,
}

impl Schedule {
    pub fn new(dt: f64, t_max: f64, probe_interval: f64) -> Self {
        Self {
            dt,
            t_max,
            probe_interval,
            full_state_times: Vec::new(),
        }
    }

    pub fn with_full_states(mut self, times: Vec<f64>) -> Self {
        self.full_state_times = times;
        self
    }

    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.t_max > 0.0 && self.t_max.is_finite())
        {
            return Err(CradleError::InvalidParameter(format!(
                "need dt > 0 and t_max > 0, got dt = {}, t_max = {}",
                self.dt, self.t_max
            )));
        }
        let n = (self.t_max / self.dt).round();
        if (n * self.dt - self.t_max).abs() > 1e-9 * self.t_max.max(1.0) {
            return Err(CradleError::InvalidParameter(format!(
                "t_max = {} is not a multiple of dt = {}",
                self.t_max, self.dt
            )));
        }
        Ok(n as usize)
    }

    pub fn probe_stride(&self) -> Result<usize> {
        let k = (self.probe_interval / self.dt).round();
        if k < 1.0
            || (k * self.dt - self.probe_interval).abs() > 1e-9 * self.probe_interval.max(1.0)
        {
            return Err(CradleError::InvalidParameter(format!(
                "probe interval {} is not a positive multiple of dt = {}",
                self.probe_interval, self.dt
            )));
        }
        Ok(k as usize)
    }

    /// Step indices of the probes, always including `0` and the last step.
    pub fn probe_steps(&self) -> Result<Vec<usize>> {
        let (n, k) = (self.steps()?, self.probe_stride()?);
        let mut v: Vec<usize> = (0..=n).step_by(k).collect();
        if *v.last().unwrap() != n {
            v.push(n);
        }
        Ok(v)
    }

    pub fn probe_times(&self) -> Result<Vec<f64>> {
        Ok(self
            .probe_steps()?
            .iter()
            .map(|&s| s as f64 * self.dt)
            .collect())
    }

    /// Probe indices nearest to the requested full-state times, deduplicated.
    pub fn full_state_probes(&self) -> Result<Vec<usize>> {
        let times = self.probe_times()?;
        let mut out: Vec<usize> = self
            .full_state_times
            .iter()
            .map(|&t| {
                let mut best = 0;
                for (k, pt) in times.iter().enumerate() {
                    if (pt - t).abs() < (times[best] - t).abs() {
                        best = k;
                    }
                }
                best
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    pub fn halved(&self) -> Self {
        Self {
            dt: 0.5 * self.dt,
            ..self.clone()
        }
    }

    fn check_table(&self, table: &CoefficientTable, num_modes: usize) -> Result<()> {
        if table.num_modes() != num_modes {
            return Err(CradleError::DimensionMismatch(format!(
                "coefficient table has {} modes, system has {num_modes}",
                table.num_modes()
            )));
        }
        if table.t_max() + 1e-9 * self.t_max.max(1.0) < self.t_max {
            return Err(CradleError::InvalidParameter(format!(
                "coefficient table ends at t = {}, run needs {}",
                table.t_max(),
                self.t_max
            )));
        }
        Ok(())
    }
}

/// Coefficients at the three stage times of step `n`.
struct StageCoeffs {
    f: [Vec<C64>; 3],
}

impl StageCoeffs {
    fn new(modes: usize) -> Self {
        Self {
            f: [vec![ZERO; modes], vec![ZERO; modes], vec![ZERO; modes]],
        }
    }

    fn load(&mut self, table: &CoefficientTable, t: f64, dt: f64) {
        table.interpolate_into(t, &mut self.f[0]);
        table.interpolate_into(t + 0.5 * dt, &mut self.f[1]);
        table.interpolate_into(t + dt, &mut self.f[2]);
    }

    fn refs(&self) -> [&[C64]; 3] {
        [&self.f[0], &self.f[1], &self.f[2]]
    }
}

/// Health indicators of a density operator at one probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Monitor {
    pub t: f64,
    pub trace_drift: f64,
    pub hermiticity: f64,
    /// Only evaluated at every few probes, see [`MAX_SPECTRUM_CHECKS`].
    pub min_eigenvalue: Option<f64>,
    pub top_occupancy: f64,
    pub purity: f64,
    pub photons: Vec<f64>,
}

impl Monitor {
    fn of(rho: &DMatrix<C64>, reduced: &[DensOp], t: f64, spectrum: bool) -> Self {
        let d = rho.nrows();
        let mut herm: f64 = 0.0;
        for j in 0..d {
            for i in 0..=j {
                herm = herm.max((rho[(i, j)] - rho[(j, i)].conj()).norm());
            }
        }
        let min_eigenvalue =
            spectrum.then(|| hermitian_eigenvalues(rho).first().copied().unwrap_or(0.0));
        Self {
            t,
            trace_drift: (rho.trace() - 1.0).norm(),
            hermiticity: herm,
            min_eigenvalue,
            top_occupancy: Propagator::top_occupancy(reduced),
            purity: rho.iter().map(|c| c.norm_sqr()).sum(),
            photons: Propagator::photons(reduced),
        }
    }
}

/// Worst values of the monitors over a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitorSummary {
    pub max_trace_drift: f64,
    pub max_hermiticity: f64,
    pub min_eigenvalue: f64,
    pub max_top_occupancy: f64,
    pub purity_range: (f64, f64),
}

impl MonitorSummary {
    pub fn of(monitors: &[Monitor]) -> Self {
        let mut s = Self {
            max_trace_drift: 0.0,
            max_hermiticity: 0.0,
            min_eigenvalue: f64::INFINITY,
            max_top_occupancy: 0.0,
            purity_range: (f64::INFINITY, f64::NEG_INFINITY),
        };
        for m in monitors {
            s.max_trace_drift = s.max_trace_drift.max(m.trace_drift);
            s.max_hermiticity = s.max_hermiticity.max(m.hermiticity);
            if let Some(e) = m.min_eigenvalue {
                // NaN marks a failed decomposition and must survive the fold.
                if e.is_nan() || e < s.min_eigenvalue {
                    s.min_eigenvalue = e;
                }
            }
            s.max_top_occupancy = s.max_top_occupancy.max(m.top_occupancy);
            s.purity_range = (
                s.purity_range.0.min(m.purity),
                s.purity_range.1.max(m.purity),
            );
        }
        s
    }
}

/// Outcome of the dt-halving check on one cavity's fidelity curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceCheck {
    pub cavity: usize,
    pub sup_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub times: Vec<f64>,
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
}

impl ConvergenceCheck {
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            return Ok(self);
        }
        let worst = self
            .coarse
            .iter()
            .zip(&self.fine)
            .enumerate()
            .max_by(|a, b| (a.1 .0 - a.1 .1).abs().total_cmp(&(b.1 .0 - b.1 .1).abs()))
            .map_or(0, |(k, _)| k);
        let curve = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.6}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        Err(CradleError::Convergence(format!(
            "fidelity of cavity {} changes by {:.3e} (> {:.1e}) under dt halving, worst at t = {}\n  dt:   {}\n  dt/2: {}",
            self.cavity + 1,
            self.sup_diff,
            self.tolerance,
            self.times[worst],
            curve(&self.coarse),
            curve(&self.fine)
        )))
    }
}

/// Master-equation run sampled at the probe times.
#[derive(Debug, Clone)]
pub struct MasterRun {
    pub schedule: Schedule,
    pub times: Vec<f64>,
    /// Laboratory-frame reduced states, `reduced[probe][cavity]`.
    pub reduced: Vec<Vec<DensOp>>,
    /// Laboratory-frame sector states at the full-state probes.
    pub full: Vec<(f64, DMatrix<C64>)>,
    pub monitors: Vec<Monitor>,
    pub fidelity: FidelityCurve,
    pub convergence: Option<ConvergenceCheck>,
}

impl MasterRun {
    pub fn summary(&self) -> MonitorSummary {
        MonitorSummary::of(&self.monitors)
    }
}

/// Integrates the master equation from the sector state `rho0`.
pub fn run_master(
    prop: &Propagator,
    rho0: &DMatrix<C64>,
    table: &CoefficientTable,
    schedule: &Schedule,
    alpha: C64,
) -> Result<MasterRun> {
    schedule.check_table(table, prop.num_modes())?;
    let (steps, dt) = (schedule.steps()?, schedule.dt);
    let probe_steps = schedule.probe_steps()?;
    let full_probes = schedule.full_state_probes()?;
    let mut rho = rho0.clone();
    let mut ws = prop.master_workspace();
    let mut coeffs = StageCoeffs::new(prop.num_modes());
    let mut run = MasterRun {
        schedule: schedule.clone(),
        times: Vec::with_capacity(probe_steps.len()),
        reduced: Vec::with_capacity(probe_steps.len()),
        full: Vec::new(),
        monitors: Vec::with_capacity(probe_steps.len()),
        fidelity: FidelityCurve {
            times: Vec::new(),
            values: Vec::new(),
            theta: Vec::new(),
        },
        convergence: None,
    };
    let spectral_stride = probe_steps.len().div_ceil(MAX_SPECTRUM_CHECKS).max(1);
    let mut next = 0;
    for n in 0..=steps {
        if next < probe_steps.len() && probe_steps[next] == n {
            let t = n as f64 * dt;
            let lab = prop.to_lab(&rho, t);
            let reduced = prop.reduced(&lab)?;
            let spectrum = next % spectral_stride == 0 || next + 1 == probe_steps.len();
            run.monitors.push(Monitor::of(&lab, &reduced, t, spectrum));
            if full_probes.binary_search(&next).is_ok() {
                run.full.push((t, lab));
            }
            run.times.push(t);
            run.reduced.push(reduced);
            next += 1;
        }
        if n == steps {
            break;
        }
        let t = n as f64 * dt;
        coeffs.load(table, t, dt);
        prop.step_master(&mut rho, t, dt, coeffs.refs(), &mut ws)
            .map_err(|e| match e {
                CradleError::NonFinite { .. } => CradleError::NonFinite { step: n },
                other => other,
            })?;
    }
    run.fidelity =
        FidelityCurve::from_reduced(&run.times, &run.reduced, alpha, DEFAULT_THETA_POINTS)?;
    Ok(run)
}

/// Runs at `dt` and `dt/2` and compares the fidelity curves of `cavity`.
/// `make_table(dt)` must return coefficients on a grid of spacing `dt/2`
/// (or any grid covering the run).
pub fn run_master_checked(
    prop: &Propagator,
    rho0: &DMatrix<C64>,
    make_table: &dyn Fn(f64) -> Result<CoefficientTable>,
    schedule: &Schedule,
    alpha: C64,
    cavity: usize,
    tolerance: f64,
) -> Result<MasterRun> {
    prop.space().check_mode(cavity)?;
    let mut coarse = run_master(prop, rho0, &make_table(schedule.dt)?, schedule, alpha)?;
    let halved = schedule.halved();
    let fine = run_master(prop, rho0, &make_table(halved.dt)?, &halved, alpha)?;
    let (a, b) = (
        &coarse.fidelity.values[cavity],
        &fine.fidelity.values[cavity],
    );
    let sup_diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    coarse.convergence = Some(ConvergenceCheck {
        cavity,
        sup_diff,
        tolerance,
        passed: sup_diff < tolerance,
        times: coarse.times.clone(),
        coarse: a.clone(),
        fine: b.clone(),
    });
    Ok(coarse)
}

/// Sector density matrix of a pure sector ket.
pub fn projector(psi: &[C64]) -> DMatrix<C64> {
    let v = nalgebra::DVector::from_column_slice(psi);
    &v * v.adjoint()
}

/// Source of the complex Gaussian driving each trajectory.
#[derive(Debug, Clone)]
pub enum NoiseSource {
    Zero,
    Ou(LorentzSpec),
    /// Arbitrary stationary kernel, sampled by circulant embedding on the half-step grid.
    Kernel(EnvKernel),
}

enum PreparedNoise {
    Zero,
    Ou(LorentzSpec),
    Circulant(CirculantSampler),
}

impl PreparedNoise {
    fn new(source: &NoiseSource, half_dt: f64, samples: usize) -> Result<Self> {
        Ok(match source {
            NoiseSource::Zero => Self::Zero,
            NoiseSource::Ou(l) => Self::Ou(*l),
            NoiseSource::Kernel(k) => {
                let cov = k.tabulate(half_dt, samples - 1)?;
                Self::Circulant(CirculantSampler::new(&cov, DEFAULT_EMBEDDING_TOL)?)
            }
        })
    }

    fn fill(&self, rng: &mut ChaCha8Rng, half_dt: f64, samples: usize, out: &mut Vec<C64>) {
        match self {
            Self::Zero => {
                out.clear();
                out.resize(samples, ZERO);
            }
            Self::Ou(l) => fill_ou(l, half_dt, samples - 1, rng, out),
            Self::Circulant(s) => {
                *out = s.sample(rng);
                out.truncate(samples);
            }
        }
    }
}

/// Single stochastic trajectory sampled at the probe times.
#[derive(Debug, Clone)]
pub struct TrajectoryRun {
    pub seed: u64,
    pub times: Vec<f64>,
    /// Laboratory-frame, unnormalised sector kets.
    pub kets: Vec<Vec<C64>>,
}

/// Propagates one trajectory driven by `noise`, a path on the half-step grid
/// (`2 * steps + 1` samples of spacing `dt/2`).
pub fn run_trajectory(
    prop: &Propagator,
    psi0: &[C64],
    table: &CoefficientTable,
    noise: &[C64],
    schedule: &Schedule,
) -> Result<TrajectoryRun> {
    schedule.check_table(table, prop.num_modes())?;
    let (steps, dt) = (schedule.steps()?, schedule.dt);
    if noise.len() < 2 * steps + 1 {
        return Err(CradleError::DimensionMismatch(format!(
            "noise path has {} samples, {} steps need {}",
            noise.len(),
            steps,
            2 * steps + 1
        )));
    }
    let probe_steps = schedule.probe_steps()?;
    let mut psi = psi0.to_vec();
    let mut ws = prop.trajectory_workspace();
    let mut coeffs = StageCoeffs::new(prop.num_modes());
    let mut run = TrajectoryRun {
        seed: 0,
        times: Vec::new(),
        kets: Vec::new(),
    };
    let mut next = 0;
    for n in 0..=steps {
        let t = n as f64 * dt;
        if next < probe_steps.len() && probe_steps[next] == n {
            run.times.push(t);
            run.kets.push(prop.ket_to_lab(&psi, t));
            next += 1;
        }
        if n == steps {
            break;
        }
        coeffs.load(table, t, dt);
        let z = [noise[2 * n], noise[2 * n + 1], noise[2 * n + 2]];
        prop.step_trajectory(&mut psi, t, dt, coeffs.refs(), z, &mut ws)
            .map_err(|_| CradleError::NonFinite { step: n })?;
    }
    Ok(run)
}

/// Sample path on the half-step grid for trajectory `index` of an ensemble.
pub fn trajectory_noise(
    source: &NoiseSource,
    schedule: &Schedule,
    seed: u64,
    index: u64,
) -> Result<Vec<C64>> {
    let samples = 2 * schedule.steps()? + 1;
    let half = 0.5 * schedule.dt;
    let prepared = PreparedNoise::new(source, half, samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
    let mut out = Vec::new();
    prepared.fill(&mut rng, half, samples, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSettings {
    pub trajectories: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl EnsembleSettings {
    pub fn new(trajectories: usize, seed: u64) -> Self {
        Self {
            trajectories,
            blocks: DEFAULT_BLOCKS,
            seed,
        }
    }

    /// Half-open trajectory ranges of the jackknife blocks.
    pub fn block_ranges(&self) -> Vec<(usize, usize)> {
        let b = self.blocks.clamp(1, self.trajectories.max(1));
        let (base, extra) = (self.trajectories / b, self.trajectories % b);
        let mut out = Vec::with_capacity(b);
        let mut start = 0;
        for k in 0..b {
            let len = base + usize::from(k < extra);
            out.push((start, start + len));
            start += len;
        }
        out
    }
}

/// Sums over the trajectories of one jackknife block.
#[derive(Debug, Clone)]
struct BlockSums {
    count: usize,
    /// `reduced[probe][cavity]`, laboratory frame.
    reduced: Vec<Vec<DMatrix<C64>>>,
    full: Vec<DMatrix<C64>>,
    norms: Vec<f64>,
}

/// Dyad averages of an ensemble with delete-one-block jackknife errors.
#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub settings: EnsembleSettings,
    pub schedule: Schedule,
    pub times: Vec<f64>,
    /// Laboratory-frame averaged reduced states, `reduced[probe][cavity]`.
    pub reduced: Vec<Vec<DensOp>>,
    /// Laboratory-frame averaged sector states at the full-state probes.
    pub full: Vec<(f64, DMatrix<C64>)>,
    /// Jackknife error of each full state in trace-distance units.
    pub full_error: Vec<f64>,
    pub trace: Vec<f64>,
    pub trace_error: Vec<f64>,
    pub fidelity: FidelityCurve,
    pub fidelity_error: Vec<Vec<f64>>,
    block_counts: Vec<usize>,
    /// Laboratory-frame block means, `block_reduced[block][probe][cavity]`.
    block_reduced: Vec<Vec<Vec<DMatrix<C64>>>>,
}

/// Propagates `settings.trajectories` trajectories in jackknife blocks
/// distributed over the current rayon pool. Results do not depend on the
/// number of workers.
pub fn run_ensemble(
    prop: &Propagator,
    psi0: &[C64],
    table: &CoefficientTable,
    noise: &NoiseSource,
    schedule: &Schedule,
    settings: &EnsembleSettings,
    alpha: C64,
) -> Result<EnsembleResult> {
    if settings.trajectories == 0 {
        return Err(CradleError::InvalidParameter(
            "ensemble needs at least one trajectory".into(),
        ));
    }
    if psi0.len() != prop.dim() {
        return Err(CradleError::DimensionMismatch(
            "initial ket is not a sector vector".into(),
        ));
    }
    schedule.check_table(table, prop.num_modes())?;
    let steps = schedule.steps()?;
    let probe_steps = schedule.probe_steps()?;
    let full_probes = schedule.full_state_probes()?;
    let half = 0.5 * schedule.dt;
    let prepared = PreparedNoise::new(noise, half, 2 * steps + 1)?;
    let ranges = settings.block_ranges();
    let sums: Vec<BlockSums> = ranges
        .par_iter()
        .map(|&(a, b)| {
            run_block(
                prop,
                psi0,
                table,
                &prepared,
                schedule,
                settings.seed,
                a,
                b,
                &probe_steps,
                &full_probes,
            )
        })
        .collect::<Result<_>>()?;
    finish_ensemble(
        prop,
        schedule,
        settings,
        &probe_steps,
        &full_probes,
        sums,
        alpha,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_block(
    prop: &Propagator,
    psi0: &[C64],
    table: &CoefficientTable,
    noise: &PreparedNoise,
    schedule: &Schedule,
    seed: u64,
    first: usize,
    end: usize,
    probe_steps: &[usize],
    full_probes: &[usize],
) -> Result<BlockSums> {
    let (d, nc, modes) = (prop.dim(), prop.space().cutoff(), prop.num_modes());
    let (steps, dt) = (schedule.steps()?, schedule.dt);
    let half = 0.5 * dt;
    let samples = 2 * steps + 1;
    let mut sums = BlockSums {
        count: end - first,
        reduced: vec![vec![DMatrix::zeros(nc, nc); modes]; probe_steps.len()],
        full: vec![DMatrix::zeros(d, d); full_probes.len()],
        norms: vec![0.0; probe_steps.len()],
    };
    let mut ws = prop.trajectory_workspace();
    let mut coeffs = StageCoeffs::new(modes);
    let mut paths: Vec<Vec<C64>> = Vec::new();
    let mut stage_noise = [Vec::new(), Vec::new(), Vec::new()];
    let mut lab = vec![ZERO; d];
    let mut ket = vec![ZERO; d];
    let mut start = first;
    while start < end {
        let width = BATCH_WIDTH.min(end - start);
        paths.resize_with(width, Vec::new);
        for (j, path) in paths.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (start + j) as u64));
            noise.fill(&mut rng, half, samples, path);
        }
        let mut psi: Vec<C64> = psi0
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(width))
            .collect();
        let mut next = 0;
        for n in 0..=steps {
            if next < probe_steps.len() && probe_steps[next] == n {
                let full_slot = full_probes.binary_search(&next).ok();
                let frame = prop.frame(n as f64 * dt);
                for j in 0..width {
                    for (c, row) in ket.iter_mut().zip(psi.chunks_exact(width)) {
                        *c = row[j];
                    }
                    prop.ket_to_lab_with(&frame, &ket, &mut lab);
                    let col = &lab[..];
                    sums.norms[next] += col.iter().map(|c| c.norm_sqr()).sum::<f64>();
                    for (k, acc) in sums.reduced[next].iter_mut().enumerate() {
                        prop.sector.reduced_dyad_accumulate(col, k, acc);
                    }
                    if let Some(slot) = full_slot {
                        let acc = &mut sums.full[slot];
                        for (c, pc) in col.iter().enumerate() {
                            let pc = pc.conj();
                            if pc.norm_sqr() == 0.0 {
                                continue;
                            }
                            for (r, pr) in col.iter().enumerate() {
                                acc[(r, c)] += pr * pc;
                            }
                        }
                    }
                }
                next += 1;
            }
            if n == steps {
                break;
            }
            let t = n as f64 * dt;
            coeffs.load(table, t, dt);
            for (s, zs) in stage_noise.iter_mut().enumerate() {
                zs.clear();
                zs.extend(paths.iter().map(|p| p[2 * n + s]));
            }
            prop.step_trajectories(
                &mut psi,
                t,
                dt,
                coeffs.refs(),
                [&stage_noise[0], &stage_noise[1], &stage_noise[2]],
                &mut ws,
            )
            .map_err(|_| CradleError::NonFinite { step: n })?;
        }
        start += width;
    }
    Ok(sums)
}

fn finish_ensemble(
    prop: &Propagator,
    schedule: &Schedule,
    settings: &EnsembleSettings,
    probe_steps: &[usize],
    full_probes: &[usize],
    sums: Vec<BlockSums>,
    alpha: C64,
) -> Result<EnsembleResult> {
    let times: Vec<f64> = probe_steps
        .iter()
        .map(|&s| s as f64 * schedule.dt)
        .collect();
    let total = settings.trajectories as f64;
    let blocks = sums.len();
    let nc = prop.space().cutoff();
    let single = FockSpace::single_mode(nc)?;

    let block_counts: Vec<usize> = sums.iter().map(|s| s.count).collect();
    let block_reduced: Vec<Vec<Vec<DMatrix<C64>>>> = sums
        .iter()
        .map(|s| {
            let inv = C64::from(1.0 / s.count as f64);
            s.reduced
                .iter()
                .map(|row| row.iter().map(|m| m * inv).collect())
                .collect()
        })
        .collect();

    let mut reduced = Vec::with_capacity(times.len());
    let mut trace = Vec::with_capacity(times.len());
    let mut trace_error = Vec::with_capacity(times.len());
    for p in 0..times.len() {
        let mut row = Vec::with_capacity(prop.num_modes());
        for k in 0..prop.num_modes() {
            let mut acc = DMatrix::zeros(nc, nc);
            for s in &sums {
                acc += &s.reduced[p][k];
            }
            row.push(DensOp::new(single, acc / C64::from(total))?);
        }
        reduced.push(row);
        let norms: Vec<f64> = sums.iter().map(|s| s.norms[p]).collect();
        let tot: f64 = norms.iter().sum();
        trace.push(tot / total);
        let (_, err) = jackknife_ratio(&norms, &block_counts, |v| v);
        trace_error.push(err);
    }

    let mut full = Vec::with_capacity(full_probes.len());
    let mut full_error = Vec::with_capacity(full_probes.len());
    for (slot, &p) in full_probes.iter().enumerate() {
        let t = times[p];
        let mut acc = DMatrix::zeros(prop.dim(), prop.dim());
        for s in &sums {
            acc += &s.full[slot];
        }
        let mean = acc / C64::from(total);
        let err = if blocks > 1 {
            let var: f64 = sums
                .iter()
                .map(|s| trace_norm(&(&s.full[slot] / C64::from(s.count as f64) - &mean)).powi(2))
                .sum::<f64>()
                / (blocks * (blocks - 1)) as f64;
            0.5 * var.sqrt()
        } else {
            f64::NAN
        };
        full.push((t, mean));
        full_error.push(err);
    }

    let fidelity = FidelityCurve::from_reduced(&times, &reduced, alpha, DEFAULT_THETA_POINTS)?;
    let mut result = EnsembleResult {
        settings: settings.clone(),
        schedule: schedule.clone(),
        times,
        reduced,
        full,
        full_error,
        trace,
        trace_error,
        fidelity,
        fidelity_error: Vec::new(),
        block_counts,
        block_reduced,
    };
    let mut fidelity_error = vec![Vec::with_capacity(result.times.len()); prop.num_modes()];
    for p in 0..result.times.len() {
        for (k, errs) in fidelity_error.iter_mut().enumerate() {
            let (_, e) = result.jackknife(p, |states| {
                transfer_fidelity(&states[k], alpha, DEFAULT_THETA_POINTS).map_or(f64::NAN, |v| v.0)
            })?;
            errs.push(e);
        }
    }
    result.fidelity_error = fidelity_error;
    Ok(result)
}

/// Delete-one-block jackknife of `g(mean)` where the blocks carry `sums[b]`
/// over `counts[b]` samples.
fn jackknife_ratio(sums: &[f64], counts: &[usize], g: impl Fn(f64) -> f64) -> (f64, f64) {
    let total: f64 = sums.iter().sum();
    let n: usize = counts.iter().sum();
    let est = g(total / n as f64);
    let b = sums.len();
    if b < 2 {
        return (est, f64::NAN);
    }
    let loo: Vec<f64> = sums
        .iter()
        .zip(counts)
        .map(|(s, &c)| g((total - s) / (n - c) as f64))
        .collect();
    (est, jackknife_spread(&loo))
}

fn jackknife_spread(loo: &[f64]) -> f64 {
    let b = loo.len() as f64;
    let mean = loo.iter().sum::<f64>() / b;
    ((b - 1.0) / b * loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt()
}

impl EnsembleResult {
    pub fn num_blocks(&self) -> usize {
        self.block_counts.len()
    }

    /// Estimate and delete-one-block jackknife error of a statistic of the
    /// averaged reduced states at `probe`.
    pub fn jackknife(&self, probe: usize, stat: impl Fn(&[DensOp]) -> f64) -> Result<(f64, f64)> {
        let est = stat(&self.reduced[probe]);
        let b = self.num_blocks();
        if b < 2 {
            return Ok((est, f64::NAN));
        }
        let n: usize = self.block_counts.iter().sum();
        let nc = self.reduced[probe][0].matrix().nrows();
        let single = FockSpace::single_mode(nc)?;
        let modes = self.reduced[probe].len();
        let mut loo = Vec::with_capacity(b);
        for drop in 0..b {
            let rest = (n - self.block_counts[drop]) as f64;
            let states = (0..modes)
                .map(|k| {
                    let mut acc = DMatrix::zeros(nc, nc);
                    for (b_idx, (blk, cnt)) in self
                        .block_reduced
                        .iter()
                        .zip(&self.block_counts)
                        .enumerate()
                    {
                        if b_idx != drop {
                            acc += &blk[probe][k] * C64::from(*cnt as f64);
                        }
                    }
                    DensOp::new(single, acc / C64::from(rest))
                })
                .collect::<Result<Vec<_>>>()?;
            loo.push(stat(&states));
        }
        Ok((est, jackknife_spread(&loo)))
    }

    /// Trace distance of each stored full state to `reference` (same probe
    /// order), with the jackknife error.
    pub fn distances_to(&self, reference: &[(f64, DMatrix<C64>)]) -> Result<Vec<(f64, f64, f64)>> {
        if reference.len() != self.full.len() {
            return Err(CradleError::DimensionMismatch(format!(
                "{} reference states for {} ensemble states",
                reference.len(),
                self.full.len()
            )));
        }
        self.full
            .iter()
            .zip(reference)
            .zip(&self.full_error)
            .map(|(((t, a), (tr, b)), err)| {
                if (t - tr).abs() > 1e-9 {
                    return Err(CradleError::DimensionMismatch(format!(
                        "probe times {t} and {tr} differ"
                    )));
                }
                Ok((*t, 0.5 * trace_norm(&(a - b)), *err))
            })
            .collect()
    }
}

/// Optional columns of a probe CSV.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProbeExtras<'a> {
    /// Jackknife errors of the fidelities, `[mode][probe]`.
    pub fidelity_error: Option<&'a [Vec<f64>]>,
    /// Master-run health monitors, one per probe.
    pub monitors: Option<&'a [Monitor]>,
    /// Ensemble trace and its error.
    pub trace: Option<(&'a [f64], &'a [f64])>,
}

/// Probe-time observables as CSV: fidelities and phases, then the optional columns.
pub fn write_probe_csv(
    path: &Path,
    fidelity: &FidelityCurve,
    extras: ProbeExtras<'_>,
) -> Result<()> {
    let n = fidelity.num_modes();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("F{i}")));
    header.extend((1..=n).map(|i| format!("theta{i}")));
    if extras.fidelity_error.is_some() {
        header.extend((1..=n).map(|i| format!("F{i}_err")));
    }
    if extras.monitors.is_some() {
        header.extend((1..=n).map(|i| format!("n{i}")));
        header.extend(
            [
                "trace_drift",
                "hermiticity",
                "min_eigenvalue",
                "top_occupancy",
                "purity",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
    }
    if extras.trace.is_some() {
        header.push("trace".into());
        header.push("trace_err".into());
    }
    let mut table = CsvTable::new(PROBE_SCHEMA, header);
    for (k, t) in fidelity.times.iter().enumerate() {
        let mut row = vec![format_float(*t)];
        row.extend(fidelity.values.iter().map(|v| format_float(v[k])));
        row.extend(fidelity.theta.iter().map(|v| format_float(v[k])));
        if let Some(err) = extras.fidelity_error {
            row.extend(err.iter().map(|v| format_float(v[k])));
        }
        if let Some(m) = extras.monitors {
            let m = &m[k];
            row.extend(m.photons.iter().map(|v| format_float(*v)));
            row.push(format_float(m.trace_drift));
            row.push(format_float(m.hermiticity));
            row.push(m.min_eigenvalue.map(format_float).unwrap_or_default());
            row.push(format_float(m.top_occupancy));
            row.push(format_float(m.purity));
        }
        if let Some((tr, err)) = extras.trace {
            row.push(format_float(tr[k]));
            row.push(format_float(err[k]));
        }
        table.push(row)?;
    }
    table.write(path)
}

pub fn read_probe_csv(path: &Path) -> Result<CsvTable> {
    CsvTable::read(path, PROBE_SCHEMA)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RhoDumpMeta {
    pub format: String,
    pub dim: usize,
    pub layout: String,
    pub element: String,
    pub t: f64,
    pub frame: String,
    pub num_modes: usize,
    pub cutoff: usize,
    /// Occupation numbers of each basis state, in storage order.
    pub basis: Vec<Vec<usize>>,
}

/// Binary dump of a sector density matrix (row-major `(re, im)` little-endian
/// `f64` pairs) with a JSON sidecar `<path>.json`.
pub fn write_rho_dump(
    path: &Path,
    prop: &Propagator,
    rho: &DMatrix<C64>,
    t: f64,
) -> Result<std::path::PathBuf> {
    let d = prop.dim();
    let mut bytes = Vec::with_capacity(16 * d * d);
    for r in 0..d {
        for c in 0..d {
            let v = rho[(r, c)];
            bytes.extend_from_slice(&v.re.to_le_bytes());
            bytes.extend_from_slice(&v.im.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    let space = prop.space();
    let meta = RhoDumpMeta {
        format: RHO_DUMP_FORMAT.into(),
        dim: d,
        layout: "row-major".into(),
        element: "complex f64 as (re, im), little-endian".into(),
        t,
        frame: "laboratory".into(),
        num_modes: space.num_modes(),
        cutoff: space.cutoff(),
        basis: prop
            .sector
            .states()
            .iter()
            .map(|&s| space.occupations(s))
            .collect(),
    };
    let sidecar = path.with_extension("json");
    std::fs::write(
        &sidecar,
        serde_json::to_string_pretty(&meta).map_err(|e| CradleError::Format(e.to_string()))?,
    )?;
    Ok(sidecar)
}

pub fn read_rho_dump(path: &Path) -> Result<(RhoDumpMeta, DMatrix<C64>)> {
    let meta: RhoDumpMeta =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)
            .map_err(|e| CradleError::Format(e.to_string()))?;
    let bytes = std::fs::read(path)?;
    let d = meta.dim;
    if bytes.len() != 16 * d * d {
        return Err(CradleError::Format(format!(
            "{}: expected {} bytes",
            path.display(),
            16 * d * d
        )));
    }
    let f = |k: usize| f64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
    Ok((
        meta,
        DMatrix::from_fn(d, d, |r, c| {
            C64::new(f(2 * (r * d + c)), f(2 * (r * d + c) + 1))
        }),
    ))
}
