//! Minimal compressed-sparse-row matrices over `Complex64`.
//!
//! Only what the propagators need: assembly from triplets, products with
//! dense vectors and column-major dense blocks, adjoints, sparse products and
//! fixed-pattern linear combinations whose coefficients change every stage.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<C64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![C64::new(1.0, 0.0); n],
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed,
    /// explicit zeros are kept so that patterns stay predictable.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut triplets: Vec<(usize, usize, C64)>,
    ) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(
                r < nrows && c < ncols,
                "triplet ({r}, {c}) outside {nrows}x{ncols}"
            );
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.nrows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    /// Drops entries whose magnitude is exactly zero.
    pub fn pruned(&self) -> Self {
        let trip = self.triplets().filter(|t| t.2.norm_sqr() > 0.0).collect();
        Self::from_triplets(self.nrows, self.ncols, trip)
    }

    pub fn scaled(&self, s: C64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn adjoint(&self) -> Self {
        let trip = self.triplets().map(|(r, c, v)| (c, r, v.conj())).collect();
        Self::from_triplets(self.ncols, self.nrows, trip)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let trip = self.triplets().chain(other.triplets()).collect();
        Self::from_triplets(self.nrows, self.ncols, trip)
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.ncols, other.nrows);
        let mut trip = Vec::new();
        for r in 0..self.nrows {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    trip.push((r, c, a * b));
                }
            }
        }
        Self::from_triplets(self.nrows, other.ncols, trip)
    }

    /// `y = M x`
    pub fn apply(&self, x: &[C64], y: &mut [C64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            *yr = acc;
        }
    }

    /// `y += s M x`
    pub fn apply_add(&self, s: C64, x: &[C64], y: &mut [C64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            *yr += s * acc;
        }
    }

    /// `Y = M X` for a column-major dense block `X` with `ncols_x` columns.
    pub fn apply_block(&self, x: &[C64], y: &mut [C64], ncols_x: usize) {
        for j in 0..ncols_x {
            let xs = &x[j * self.ncols..(j + 1) * self.ncols];
            let ys = &mut y[j * self.nrows..(j + 1) * self.nrows];
            self.apply(xs, ys);
        }
    }

    /// `Y += M X` for column-major dense blocks.
    pub fn apply_block_add(&self, x: &[C64], y: &mut [C64], ncols_x: usize) {
        let one = C64::new(1.0, 0.0);
        for j in 0..ncols_x {
            let xs = &x[j * self.ncols..(j + 1) * self.ncols];
            let ys = &mut y[j * self.nrows..(j + 1) * self.nrows];
            self.apply_add(one, xs, ys);
        }
    }

    /// `Y = M X` for row-major blocks: row `r` of `X` is `x[r * width..(r + 1) * width]`.
    /// Each nonzero becomes one contiguous axpy over `width` entries.
    pub fn apply_rows(&self, x: &[C64], y: &mut [C64], width: usize) {
        self.rows_kernel(x, y, width, |v| v);
    }

    /// As [`CsrMatrix::apply_rows`] with `X` replaced by its elementwise conjugate.
    pub fn apply_rows_conj(&self, x: &[C64], y: &mut [C64], width: usize) {
        self.rows_kernel(x, y, width, |v| v.conj());
    }

    #[inline(always)]
    fn rows_kernel(&self, x: &[C64], y: &mut [C64], width: usize, op: impl Fn(C64) -> C64) {
        debug_assert_eq!(x.len(), self.ncols * width);
        debug_assert_eq!(y.len(), self.nrows * width);
        for (r, yr) in y.chunks_exact_mut(width).enumerate() {
            let span = self.indptr[r]..self.indptr[r + 1];
            if span.is_empty() {
                yr.fill(C64::new(0.0, 0.0));
                continue;
            }
            let first = span.start;
            let v = self.values[first];
            let c = self.indices[first];
            for (a, &b) in yr.iter_mut().zip(&x[c * width..(c + 1) * width]) {
                *a = v * op(b);
            }
            for k in first + 1..span.end {
                let (vr, vi) = (self.values[k].re, self.values[k].im);
                let c = self.indices[k];
                let xr = &x[c * width..(c + 1) * width];
                for i in 0..width {
                    let b = op(xr[i]);
                    let a = &mut yr[i];
                    a.re += vr * b.re - vi * b.im;
                    a.im += vr * b.im + vi * b.re;
                }
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    /// Largest entry magnitude of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.add(&other.scaled(C64::new(-1.0, 0.0)))
            .values
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    /// Restricts rows and columns to the index subset described by `lookup`
    /// (`lookup[full] = Some(compressed)`).
    pub fn restrict(&self, lookup: &[Option<usize>], dim: usize) -> Self {
        let trip = self
            .triplets()
            .filter_map(|(r, c, v)| Some((lookup[r]?, lookup[c]?, v)))
            .collect();
        Self::from_triplets(dim, dim, trip)
    }
}

/// A fixed sparsity pattern shared by several operators, so that
/// `sum_k c_k M_k` can be re-assembled in O(nnz) when the `c_k` change.
#[derive(Debug, Clone)]
pub struct OperatorCombination {
    pattern: CsrMatrix,
    /// Positions in the pattern's value array and the values there, per term.
    terms: Vec<(Vec<usize>, Vec<C64>)>,
}

impl OperatorCombination {
    pub fn new(ops: &[CsrMatrix]) -> Self {
        assert!(!ops.is_empty());
        let (nrows, ncols) = (ops[0].nrows, ops[0].ncols);
        let trip = ops
            .iter()
            .flat_map(|m| m.triplets().map(|(r, c, _)| (r, c, C64::new(0.0, 0.0))))
            .collect();
        let pattern = CsrMatrix::from_triplets(nrows, ncols, trip);
        let terms = ops
            .iter()
            .map(|m| {
                let mut pos = Vec::with_capacity(m.nnz());
                let mut vals = Vec::with_capacity(m.nnz());
                for r in 0..nrows {
                    let span = pattern.indptr[r]..pattern.indptr[r + 1];
                    for (c, v) in m.row(r) {
                        let k = pattern.indices[span.clone()].binary_search(&c).unwrap();
                        pos.push(span.start + k);
                        vals.push(v);
                    }
                }
                (pos, vals)
            })
            .collect();
        Self { pattern, terms }
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Writes `sum_k coeffs[k] * M_k` into `out`, which must come from
    /// [`OperatorCombination::zeroed`].
    pub fn assemble_into(&self, coeffs: &[C64], out: &mut CsrMatrix) {
        debug_assert_eq!(coeffs.len(), self.terms.len());
        let vals = out.values_mut();
        vals.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        for (c, (pos, term)) in coeffs.iter().zip(&self.terms) {
            if c.norm_sqr() == 0.0 {
                continue;
            }
            for (&k, t) in pos.iter().zip(term) {
                vals[k] += c * t;
            }
        }
    }

    pub fn zeroed(&self) -> CsrMatrix {
        self.pattern.clone()
    }

    pub fn assemble(&self, coeffs: &[C64]) -> CsrMatrix {
        let mut out = self.zeroed();
        self.assemble_into(coeffs, &mut out);
        out
    }
}
