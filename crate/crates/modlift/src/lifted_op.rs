//! Lifted linear operators.
//!
//! The observation model multiplies each dictionary atom by its own diagonal
//! modulation `diag(B h_j)` drawn from a `K`-dimensional subspace, and the
//! lifting trick turns the bilinear unknowns `(c_j, h_j)` into the columns
//! `x_j = c_j h_j` of a `K x M` matrix `X`. This module provides that linear
//! map `X -> y` in two flavors:
//!
//! * [`LiftedOperator::Direct`] — a dense dictionary `A` with an orthonormal
//!   subspace basis `B`; entry `n` of the output is `sum_{k,j} B[n,k] X[k,j] A[n,j]`.
//! * [`LiftedOperator::Smi`] — the FFT-based imaging form: each coefficient
//!   row is spread over a high-resolution pixel grid, circularly convolved
//!   with a point-spread basis image, and sub-sampled down to the sensor grid.
//!
//! The full `N x KM` system matrix is never materialized for large problems;
//! forward and adjoint run in factored form, and [`MatrixFreeOp::phi_block`]
//! exposes only `N x K` column blocks for the dense certificate machinery.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Complex matrix alias used throughout the crate (column-major storage, so
/// `as_slice()` is exactly the stacked-columns vectorization `vec(X)`).
pub type CMat = DMatrix<Complex64>;
/// Complex vector alias.
pub type CVec = DVector<Complex64>;

/// Max-entry deviation tolerated before a basis is re-orthonormalized.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;
/// Per-entry tolerance for dense-vs-factored consistency checks.
pub const BLOCK_CONSISTENCY_TOL: f64 = 1e-12;

/// How a dictionary was generated. The entries are stored as complex either
/// way; a Gaussian dictionary simply has zero imaginary parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DictionaryKind {
    Gaussian,
    FourierSpikes,
}

/// A dense `N x M` dictionary whose columns are the atoms `a_j`.
#[derive(Debug, Clone)]
pub struct Dictionary {
    entries: CMat,
    kind: DictionaryKind,
}

impl Dictionary {
    /// Wraps an arbitrary real matrix as a Gaussian-kind dictionary.
    pub fn from_real(entries: DMatrix<f64>) -> Result<Self> {
        Self::from_complex(entries.map(|v| Complex64::new(v, 0.0)), DictionaryKind::Gaussian)
    }

    /// Wraps a complex matrix with an explicit kind tag.
    pub fn from_complex(entries: CMat, kind: DictionaryKind) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::shape("dictionary must be at least 1 x 1"));
        }
        Ok(Dictionary { entries, kind })
    }

    /// The `N x N` dictionary whose column `j` is the unnormalized DFT of the
    /// `j`-th standard basis vector, i.e. `a_j(n) = exp(-2 pi i n j / N)`.
    pub fn fourier_spikes(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::shape("dictionary must be at least 1 x 1"));
        }
        let entries = CMat::from_fn(n, n, |row, col| {
            let theta = -2.0 * std::f64::consts::PI * (row as f64) * (col as f64) / (n as f64);
            Complex64::new(theta.cos(), theta.sin())
        });
        Self::from_complex(entries, DictionaryKind::FourierSpikes)
    }

    pub fn entries(&self) -> &CMat {
        &self.entries
    }

    pub fn kind(&self) -> DictionaryKind {
        self.kind
    }

    /// Number of observations `N`.
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// Number of atoms `M`.
    pub fn m(&self) -> usize {
        self.entries.ncols()
    }
}

/// An `N x K` basis with orthonormal columns spanning the modulation subspace.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    columns: CMat,
}

impl SubspaceBasis {
    /// Validates `K < N` and orthonormality; re-orthonormalizes via QR when
    /// the input deviates from `B^H B = I` by more than [`ORTHONORMALITY_TOL`].
    pub fn from_matrix(columns: CMat) -> Result<Self> {
        let (n, k) = (columns.nrows(), columns.ncols());
        if k == 0 || n == 0 {
            return Err(Error::shape("basis must be at least 1 x 1"));
        }
        if k >= n {
            return Err(Error::shape(format!(
                "basis needs K < N, got K={k}, N={n}"
            )));
        }
        let columns = if orthonormality_deviation(&columns) > ORTHONORMALITY_TOL {
            let q = columns.qr().q();
            if orthonormality_deviation(&q) > ORTHONORMALITY_TOL {
                return Err(Error::param(
                    "basis could not be orthonormalized (rank deficient?)",
                ));
            }
            q
        } else {
            columns
        };
        let basis = SubspaceBasis { columns };
        let mu = coherence(&basis);
        debug_assert!(
            mu >= 1.0 - 1e-9 && mu <= (n as f64).sqrt() + 1e-9,
            "coherence {mu} outside [1, sqrt(N)]"
        );
        Ok(basis)
    }

    /// First `K` columns of the normalized `N x N` DFT matrix.
    pub fn dft_first_k(n: usize, k: usize) -> Result<Self> {
        let scale = 1.0 / (n as f64).sqrt();
        let columns = CMat::from_fn(n, k, |row, col| {
            let theta = -2.0 * std::f64::consts::PI * (row as f64) * (col as f64) / (n as f64);
            Complex64::new(theta.cos() * scale, theta.sin() * scale)
        });
        Self::from_matrix(columns)
    }

    /// First `K` columns of the `N x N` identity.
    pub fn identity_first_k(n: usize, k: usize) -> Result<Self> {
        let mut columns = CMat::zeros(n, k);
        for i in 0..k.min(n) {
            columns[(i, i)] = Complex64::new(1.0, 0.0);
        }
        Self::from_matrix(columns)
    }

    pub fn columns(&self) -> &CMat {
        &self.columns
    }

    /// Subspace dimension `K`.
    pub fn k(&self) -> usize {
        self.columns.ncols()
    }

    /// Ambient dimension `N`.
    pub fn n(&self) -> usize {
        self.columns.nrows()
    }
}

fn orthonormality_deviation(columns: &CMat) -> f64 {
    let gram = columns.adjoint() * columns;
    let k = gram.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            };
            dev = dev.max((gram[(i, j)] - target).norm());
        }
    }
    dev
}

/// Coherence `mu_max = sqrt(N) * max_{i,j} |B_{ij}|`; lies in `[1, sqrt(N)]`
/// for any basis with orthonormal columns.
pub fn coherence(basis: &SubspaceBasis) -> f64 {
    let n = basis.n() as f64;
    let max_abs = basis
        .columns
        .iter()
        .map(|z| z.norm())
        .fold(0.0f64, f64::max);
    n.sqrt() * max_abs
}

/// How the high-resolution grid is reduced to the sensor grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Keep the top-left pixel of each `factor x factor` cell.
    Decimate,
    /// Average each `factor x factor` cell (divides total mass by `factor^2`).
    BlockAverage,
}

/// A linear map from `K x M` coefficient matrices to observation vectors,
/// available matrix-free. Implementors must satisfy the adjoint identity
/// `<forward(X), y> = <X, adjoint(y)>` in the complex inner product.
pub trait MatrixFreeOp: Sync {
    /// Coefficient dimensions `(K, M)`.
    fn coeff_dims(&self) -> (usize, usize);

    /// Length of the observation vector.
    fn obs_len(&self) -> usize;

    /// Applies the operator: `y = L(X)`.
    fn forward(&self, x: &CMat) -> Result<CVec>;

    /// Applies the adjoint: `L*(y) = sum_l y_l b'_l a'_l^H` in the direct form.
    fn adjoint(&self, y: &CVec) -> Result<CMat>;

    /// The `N x K` column block of the system matrix for atom `j`
    /// (`[diag(b_1) a_j, ..., diag(b_K) a_j]` in the direct form). The default
    /// applies `forward` to unit coefficient matrices.
    fn phi_block(&self, j: usize) -> Result<CMat> {
        let (k_dim, m) = self.coeff_dims();
        if j >= m {
            return Err(Error::shape(format!("block index {j} out of range (M={m})")));
        }
        let mut block = CMat::zeros(self.obs_len(), k_dim);
        let mut unit = CMat::zeros(k_dim, m);
        for k in 0..k_dim {
            unit[(k, j)] = Complex64::new(1.0, 0.0);
            let col = self.forward(&unit)?;
            block.set_column(k, &col);
            unit[(k, j)] = Complex64::new(0.0, 0.0);
        }
        Ok(block)
    }
}

fn check_coeff_shape(op: &(impl MatrixFreeOp + ?Sized), x: &CMat) -> Result<()> {
    let (k, m) = op.coeff_dims();
    if x.nrows() != k || x.ncols() != m {
        return Err(Error::shape(format!(
            "coefficient matrix must be {k} x {m}, got {} x {}",
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

fn check_obs_len(op: &(impl MatrixFreeOp + ?Sized), y: &CVec) -> Result<()> {
    let n = op.obs_len();
    if y.len() != n {
        return Err(Error::shape(format!(
            "observation vector must have length {n}, got {}",
            y.len()
        )));
    }
    Ok(())
}

/// The direct lifted form: `y(n) = sum_{k,j} B[n,k] X[k,j] A[n,j]`.
#[derive(Debug, Clone)]
pub struct DirectOp {
    dict: Dictionary,
    basis: SubspaceBasis,
}

impl DirectOp {
    pub fn new(dict: Dictionary, basis: SubspaceBasis) -> Result<Self> {
        if dict.n() != basis.n() {
            return Err(Error::shape(format!(
                "dictionary rows ({}) must match basis rows ({})",
                dict.n(),
                basis.n()
            )));
        }
        Ok(DirectOp { dict, basis })
    }

    pub fn dict(&self) -> &Dictionary {
        &self.dict
    }

    pub fn basis(&self) -> &SubspaceBasis {
        &self.basis
    }
}

impl MatrixFreeOp for DirectOp {
    fn coeff_dims(&self) -> (usize, usize) {
        (self.basis.k(), self.dict.m())
    }

    fn obs_len(&self) -> usize {
        self.dict.n()
    }

    fn forward(&self, x: &CMat) -> Result<CVec> {
        check_coeff_shape(self, x)?;
        let modulated = self.basis.columns() * x; // N x M
        let a = self.dict.entries();
        let n = self.dict.n();
        let mut y = CVec::zeros(n);
        for j in 0..self.dict.m() {
            let g = modulated.column(j);
            let aj = a.column(j);
            for i in 0..n {
                y[i] += g[i] * aj[i];
            }
        }
        Ok(y)
    }

    fn adjoint(&self, y: &CVec) -> Result<CMat> {
        check_obs_len(self, y)?;
        let a = self.dict.entries();
        let n = self.dict.n();
        let m = self.dict.m();
        let mut weighted = CMat::zeros(n, m);
        for j in 0..m {
            let aj = a.column(j);
            let mut col = weighted.column_mut(j);
            for i in 0..n {
                col[i] = y[i] * aj[i].conj();
            }
        }
        Ok(self.basis.columns().adjoint() * weighted)
    }

    fn phi_block(&self, j: usize) -> Result<CMat> {
        let m = self.dict.m();
        if j >= m {
            return Err(Error::shape(format!("block index {j} out of range (M={m})")));
        }
        let aj = self.dict.entries().column(j);
        let b = self.basis.columns();
        Ok(CMat::from_fn(self.dict.n(), self.basis.k(), |row, k| {
            b[(row, k)] * aj[row]
        }))
    }
}

/// The imaging form: coefficient rows live on an `n_hi x n_hi` grid, are
/// circularly convolved with the point-spread basis images, and sub-sampled
/// by `factor` down to an `n_low x n_low` sensor frame.
pub struct SmiOp {
    /// 2-D FFTs of the basis patches embedded (wrap-around centered) on the
    /// high-resolution grid; one per subspace dimension.
    basis_freq: Vec<CMat>,
    n_low: usize,
    factor: usize,
    n_hi: usize,
    mode: SampleMode,
    patch_size: usize,
    mu_max: f64,
    fft_fwd: Arc<dyn Fft<f64>>,
    fft_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SmiOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SmiOp")
            .field("n_low", &self.n_low)
            .field("factor", &self.factor)
            .field("mode", &self.mode)
            .field("k", &self.basis_freq.len())
            .field("patch_size", &self.patch_size)
            .finish()
    }
}

impl SmiOp {
    /// Builds the operator from vectorized spatial basis patches (`P x K`,
    /// `P = patch_size^2`, orthonormal columns).
    pub fn new(
        basis_spatial: &DMatrix<f64>,
        patch_size: usize,
        n_low: usize,
        factor: usize,
        mode: SampleMode,
    ) -> Result<Self> {
        if patch_size % 2 == 0 {
            return Err(Error::param("patch size must be odd"));
        }
        if n_low == 0 || factor == 0 {
            return Err(Error::param("frame size and factor must be positive"));
        }
        let n_hi = n_low * factor;
        if patch_size > n_hi {
            return Err(Error::shape(format!(
                "patch size {patch_size} exceeds high-res grid {n_hi}"
            )));
        }
        if basis_spatial.nrows() != patch_size * patch_size {
            return Err(Error::shape(format!(
                "basis rows ({}) must equal patch_size^2 ({})",
                basis_spatial.nrows(),
                patch_size * patch_size
            )));
        }
        let k_dim = basis_spatial.ncols();
        if k_dim == 0 {
            return Err(Error::shape("basis must have at least one column"));
        }

        let mut planner = FftPlanner::new();
        let fft_fwd = planner.plan_fft_forward(n_hi);
        let fft_inv = planner.plan_fft_inverse(n_hi);

        let half = (patch_size as isize - 1) / 2;
        let mut basis_freq = Vec::with_capacity(k_dim);
        let mut mu_max = 0.0f64;
        for k in 0..k_dim {
            // Embed the patch wrap-around centered at pixel (0, 0) so that
            // circular convolution with a delta at p centers the patch at p.
            let mut img = CMat::zeros(n_hi, n_hi);
            for dy in -half..=half {
                for dx in -half..=half {
                    let pr = (dy + half) as usize;
                    let pc = (dx + half) as usize;
                    let r = (dy.rem_euclid(n_hi as isize)) as usize;
                    let c = (dx.rem_euclid(n_hi as isize)) as usize;
                    img[(r, c)] =
                        Complex64::new(basis_spatial[(pc * patch_size + pr, k)], 0.0);
                }
            }
            fft2(&mut img, &fft_fwd);
            // The unitary-DFT basis entry is F_k / sqrt(P), so the coherence
            // sqrt(P) * max |entry| reduces to max |F_k|.
            mu_max = mu_max.max(img.iter().map(|z| z.norm()).fold(0.0f64, f64::max));
            basis_freq.push(img);
        }

        Ok(SmiOp {
            basis_freq,
            n_low,
            factor,
            n_hi,
            mode,
            patch_size,
            mu_max,
            fft_fwd,
            fft_inv,
        })
    }

    pub fn n_low(&self) -> usize {
        self.n_low
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// High-resolution grid side length (`n_low * factor`).
    pub fn n_hi(&self) -> usize {
        self.n_hi
    }

    pub fn mode(&self) -> SampleMode {
        self.mode
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Coherence of the Fourier-domain modulation basis.
    pub fn mu_max(&self) -> f64 {
        self.mu_max
    }
}

impl MatrixFreeOp for SmiOp {
    fn coeff_dims(&self) -> (usize, usize) {
        (self.basis_freq.len(), self.n_hi * self.n_hi)
    }

    fn obs_len(&self) -> usize {
        self.n_low * self.n_low
    }

    fn forward(&self, x: &CMat) -> Result<CVec> {
        check_coeff_shape(self, x)?;
        let n_hi = self.n_hi;
        let p = (n_hi * n_hi) as f64;
        let mut acc = CMat::zeros(n_hi, n_hi);
        for (k, freq) in self.basis_freq.iter().enumerate() {
            // Row k of X laid out as an image (column-major pixel index).
            let mut img = CMat::from_fn(n_hi, n_hi, |r, c| x[(k, c * n_hi + r)]);
            fft2(&mut img, &self.fft_fwd);
            for (a, (f, g)) in acc.iter_mut().zip(freq.iter().zip(img.iter())) {
                *a += f * g;
            }
        }
        ifft2(&mut acc, &self.fft_inv);
        acc /= Complex64::new(p, 0.0);
        let low = subsample(&acc, self.factor, self.mode);
        Ok(CVec::from_column_slice(low.as_slice()))
    }

    fn adjoint(&self, y: &CVec) -> Result<CMat> {
        check_obs_len(self, y)?;
        let n_hi = self.n_hi;
        let n_low = self.n_low;
        let p = (n_hi * n_hi) as f64;
        let low = CMat::from_column_slice(n_low, n_low, y.as_slice());
        let mut z = upsample_adjoint(&low, self.factor, self.mode);
        fft2(&mut z, &self.fft_fwd);
        let (k_dim, m) = self.coeff_dims();
        let mut out = CMat::zeros(k_dim, m);
        for (k, freq) in self.basis_freq.iter().enumerate() {
            let mut img = CMat::from_fn(n_hi, n_hi, |r, c| freq[(r, c)].conj() * z[(r, c)]);
            ifft2(&mut img, &self.fft_inv);
            for c in 0..n_hi {
                for r in 0..n_hi {
                    out[(k, c * n_hi + r)] = img[(r, c)] / Complex64::new(p, 0.0);
                }
            }
        }
        Ok(out)
    }
}

/// In-place 2-D FFT on a square complex matrix (unnormalized).
fn fft2(m: &mut CMat, fft: &Arc<dyn Fft<f64>>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    // Columns are contiguous in column-major storage.
    for chunk in m.as_mut_slice().chunks_exact_mut(n) {
        fft.process_with_scratch(chunk, &mut scratch);
    }
    let mut row = vec![Complex64::new(0.0, 0.0); n];
    for r in 0..n {
        for c in 0..n {
            row[c] = m[(r, c)];
        }
        fft.process_with_scratch(&mut row, &mut scratch);
        for c in 0..n {
            m[(r, c)] = row[c];
        }
    }
}

/// In-place 2-D inverse FFT (unnormalized; `ifft2(fft2(x)) = N^2 x`).
fn ifft2(m: &mut CMat, fft_inv: &Arc<dyn Fft<f64>>) {
    fft2(m, fft_inv);
}

/// Reduces an `n_hi x n_hi` grid to `n_hi/factor` per side.
pub fn subsample<T: nalgebra::ComplexField>(
    img: &DMatrix<T>,
    factor: usize,
    mode: SampleMode,
) -> DMatrix<T> {
    let n_low = img.nrows() / factor;
    match mode {
        SampleMode::Decimate => {
            DMatrix::from_fn(n_low, n_low, |r, c| img[(r * factor, c * factor)].clone())
        }
        SampleMode::BlockAverage => {
            let inv = T::from_real(nalgebra::convert(1.0 / ((factor * factor) as f64)));
            DMatrix::from_fn(n_low, n_low, |r, c| {
                let mut acc = T::zero();
                for dr in 0..factor {
                    for dc in 0..factor {
                        acc += img[(r * factor + dr, c * factor + dc)].clone();
                    }
                }
                acc * inv.clone()
            })
        }
    }
}

/// Adjoint of [`subsample`]: scatters a low-resolution grid back to the
/// high-resolution grid.
pub fn upsample_adjoint<T: nalgebra::ComplexField>(
    low: &DMatrix<T>,
    factor: usize,
    mode: SampleMode,
) -> DMatrix<T> {
    let n_low = low.nrows();
    let n_hi = n_low * factor;
    match mode {
        SampleMode::Decimate => DMatrix::from_fn(n_hi, n_hi, |r, c| {
            if r % factor == 0 && c % factor == 0 {
                low[(r / factor, c / factor)].clone()
            } else {
                T::zero()
            }
        }),
        SampleMode::BlockAverage => {
            let inv = T::from_real(nalgebra::convert(1.0 / ((factor * factor) as f64)));
            DMatrix::from_fn(n_hi, n_hi, |r, c| {
                low[(r / factor, c / factor)].clone() * inv.clone()
            })
        }
    }
}

/// The lifted operator, either in the direct dense-dictionary form or the
/// FFT-based sub-sampled imaging form.
#[derive(Debug)]
pub enum LiftedOperator {
    Direct(DirectOp),
    Smi(SmiOp),
}

impl LiftedOperator {
    pub fn direct(dict: Dictionary, basis: SubspaceBasis) -> Result<Self> {
        Ok(LiftedOperator::Direct(DirectOp::new(dict, basis)?))
    }

    pub fn smi(
        basis_spatial: &DMatrix<f64>,
        patch_size: usize,
        n_low: usize,
        factor: usize,
        mode: SampleMode,
    ) -> Result<Self> {
        Ok(LiftedOperator::Smi(SmiOp::new(
            basis_spatial,
            patch_size,
            n_low,
            factor,
            mode,
        )?))
    }

    /// Coherence of the modulation basis in effect.
    pub fn coherence(&self) -> f64 {
        match self {
            LiftedOperator::Direct(op) => coherence(op.basis()),
            LiftedOperator::Smi(op) => op.mu_max(),
        }
    }
}

impl MatrixFreeOp for LiftedOperator {
    fn coeff_dims(&self) -> (usize, usize) {
        match self {
            LiftedOperator::Direct(op) => op.coeff_dims(),
            LiftedOperator::Smi(op) => op.coeff_dims(),
        }
    }

    fn obs_len(&self) -> usize {
        match self {
            LiftedOperator::Direct(op) => op.obs_len(),
            LiftedOperator::Smi(op) => op.obs_len(),
        }
    }

    fn forward(&self, x: &CMat) -> Result<CVec> {
        match self {
            LiftedOperator::Direct(op) => op.forward(x),
            LiftedOperator::Smi(op) => op.forward(x),
        }
    }

    fn adjoint(&self, y: &CVec) -> Result<CMat> {
        match self {
            LiftedOperator::Direct(op) => op.adjoint(y),
            LiftedOperator::Smi(op) => op.adjoint(y),
        }
    }

    fn phi_block(&self, j: usize) -> Result<CMat> {
        match self {
            LiftedOperator::Direct(op) => op.phi_block(j),
            LiftedOperator::Smi(op) => op.phi_block(j),
        }
    }
}

/// Restriction of an operator to a subset of atom columns; reuses the inner
/// forward/adjoint by zero-padding and column extraction.
pub struct SupportRestricted<'a, O: MatrixFreeOp + ?Sized> {
    inner: &'a O,
    support: Vec<usize>,
}

impl<'a, O: MatrixFreeOp + ?Sized> SupportRestricted<'a, O> {
    pub fn new(inner: &'a O, support: &[usize]) -> Result<Self> {
        let (_, m) = inner.coeff_dims();
        let mut sorted = support.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != support.len() {
            return Err(Error::param("support indices must be distinct"));
        }
        if sorted.iter().any(|&j| j >= m) {
            return Err(Error::shape(format!("support index out of range (M={m})")));
        }
        Ok(SupportRestricted {
            inner,
            support: sorted,
        })
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Zero-pads a `K x |T|` matrix to the full `K x M` layout.
    pub fn embed(&self, x_t: &CMat) -> CMat {
        let (k, m) = self.inner.coeff_dims();
        let mut full = CMat::zeros(k, m);
        for (local, &j) in self.support.iter().enumerate() {
            full.set_column(j, &x_t.column(local));
        }
        full
    }
}

impl<O: MatrixFreeOp + ?Sized> MatrixFreeOp for SupportRestricted<'_, O> {
    fn coeff_dims(&self) -> (usize, usize) {
        (self.inner.coeff_dims().0, self.support.len())
    }

    fn obs_len(&self) -> usize {
        self.inner.obs_len()
    }

    fn forward(&self, x: &CMat) -> Result<CVec> {
        check_coeff_shape(self, x)?;
        self.inner.forward(&self.embed(x))
    }

    fn adjoint(&self, y: &CVec) -> Result<CMat> {
        let full = self.inner.adjoint(y)?;
        let k = full.nrows();
        let mut out = CMat::zeros(k, self.support.len());
        for (local, &j) in self.support.iter().enumerate() {
            out.set_column(local, &full.column(j));
        }
        Ok(out)
    }

    fn phi_block(&self, j: usize) -> Result<CMat> {
        let idx = *self
            .support
            .get(j)
            .ok_or_else(|| Error::shape(format!("block index {j} out of range")))?;
        self.inner.phi_block(idx)
    }
}

/// Stacks the column blocks for the given atoms into a dense `N x K|T|`
/// matrix. Intended for the certificate machinery and small-scale oracles.
pub fn assemble_blocks(op: &(impl MatrixFreeOp + ?Sized), atoms: &[usize]) -> Result<CMat> {
    let (k_dim, _) = op.coeff_dims();
    let mut out = CMat::zeros(op.obs_len(), k_dim * atoms.len());
    for (slot, &j) in atoms.iter().enumerate() {
        let block = op.phi_block(j)?;
        for k in 0..k_dim {
            out.set_column(slot * k_dim + k, &block.column(k));
        }
    }
    Ok(out)
}

/// Dense assembly of the full system matrix (test/diagnostic use only).
pub fn assemble_full(op: &(impl MatrixFreeOp + ?Sized)) -> Result<CMat> {
    let (_, m) = op.coeff_dims();
    let atoms: Vec<usize> = (0..m).collect();
    assemble_blocks(op, &atoms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_cvec(rng: &mut ChaCha8Rng, n: usize) -> CVec {
        CVec::from_fn(n, |_, _| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        })
    }

    fn random_cmat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> CMat {
        CMat::from_fn(r, c, |_, _| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        })
    }

    fn random_direct(rng: &mut ChaCha8Rng, n: usize, k: usize, m: usize) -> LiftedOperator {
        let a = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = random_cmat(rng, n, k);
        LiftedOperator::direct(
            Dictionary::from_real(a).unwrap(),
            SubspaceBasis::from_matrix(b).unwrap(),
        )
        .unwrap()
    }

    /// Brute-force evaluation of the pre-lifting sum `sum_j diag(B h_j) a_j c_j`.
    fn eq1_oracle(a: &CMat, b: &CMat, coeffs: &[(Complex64, CVec)]) -> CVec {
        let n = a.nrows();
        let mut y = CVec::zeros(n);
        for (j, (c, h)) in coeffs.iter().enumerate() {
            let modulation = b * h; // B h_j
            for i in 0..n {
                y[i] += *c * modulation[i] * a[(i, j)];
            }
        }
        y
    }

    #[test]
    fn forward_zero_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let op = random_direct(&mut rng, 6, 2, 4);
        let y = op.forward(&CMat::zeros(2, 4)).unwrap();
        assert!(y.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn stationary_modulation_collapses_to_scaled_matvec() {
        // K=1 with B = (1/sqrt(N)) * ones: every modulation is the same
        // scaled identity, so L(X) = (1/sqrt(N)) A x.
        let n = 8;
        let m = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let scale = 1.0 / (n as f64).sqrt();
        let b = CMat::from_element(n, 1, Complex64::new(scale, 0.0));
        let op = LiftedOperator::direct(
            Dictionary::from_real(a.clone()).unwrap(),
            SubspaceBasis::from_matrix(b).unwrap(),
        )
        .unwrap();
        let x = random_cmat(&mut rng, 1, m);
        let y = op.forward(&x).unwrap();
        let expected = a.map(|v| Complex64::new(v * scale, 0.0)) * x.transpose();
        for i in 0..n {
            assert!((y[i] - expected[(i, 0)]).norm() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_eq1_brute_force() {
        // Small integer-valued dictionary against the entry-by-entry sum.
        let n = 3;
        let a_real = DMatrix::from_row_slice(n, 2, &[1.0, 2.0, -1.0, 0.0, 3.0, 1.0]);
        let raw_b = CMat::from_row_slice(
            n,
            2,
            &[
                Complex64::new(1.0, 0.0),
                Complex64::new(1.0, 0.0),
                Complex64::new(1.0, 0.0),
                Complex64::new(-1.0, 0.0),
                Complex64::new(1.0, 0.0),
                Complex64::new(0.0, 0.0),
            ],
        );
        let basis = SubspaceBasis::from_matrix(raw_b).unwrap();
        let b = basis.columns().clone();
        let op = LiftedOperator::direct(Dictionary::from_real(a_real.clone()).unwrap(), basis)
            .unwrap();

        let coeffs = vec![
            (
                Complex64::new(2.0, 1.0),
                CVec::from_column_slice(&[Complex64::new(1.0, 0.0), Complex64::new(0.0, -1.0)]),
            ),
            (
                Complex64::new(-1.0, 0.5),
                CVec::from_column_slice(&[Complex64::new(0.5, 0.0), Complex64::new(2.0, 0.0)]),
            ),
        ];
        let mut x = CMat::zeros(2, 2);
        for (j, (c, h)) in coeffs.iter().enumerate() {
            x.set_column(j, &(h * *c));
        }
        let a_cplx = a_real.map(|v| Complex64::new(v, 0.0));
        let expected = eq1_oracle(&a_cplx, &b, &coeffs);
        let y = op.forward(&x).unwrap();
        for i in 0..n {
            assert!((y[i] - expected[i]).norm() < 1e-12, "entry {i}");
        }
    }

    #[test]
    fn adjoint_of_basis_vector_is_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = random_direct(&mut rng, 5, 2, 3);
        let l = 2;
        let mut e = CVec::zeros(5);
        e[l] = Complex64::new(1.0, 0.0);
        let adj = op.adjoint(&e).unwrap();
        let (a, b) = match &op {
            LiftedOperator::Direct(d) => (d.dict().entries(), d.basis().columns()),
            _ => unreachable!(),
        };
        // b'_l a'_l^H with b'_l = conj(row l of B), a'_l = row l of A.
        for k in 0..2 {
            for j in 0..3 {
                let expected = b[(l, k)].conj() * a[(l, j)].conj();
                assert!((adj[(k, j)] - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identity_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = random_direct(&mut rng, 5, 2, 3);
        for _ in 0..100 {
            let x = random_cmat(&mut rng, 2, 3);
            let y = random_cvec(&mut rng, 5);
            let lx = op.forward(&x).unwrap();
            let ady = op.adjoint(&y).unwrap();
            let lhs = lx.dotc(&y);
            let rhs: Complex64 = x
                .iter()
                .zip(ady.iter())
                .map(|(xi, ai)| xi.conj() * ai)
                .sum();
            let bound = 1e-10 * (x.norm() * y.norm() + 1.0);
            assert!((lhs - rhs).norm() <= bound, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn phi_block_matches_forward_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let op = random_direct(&mut rng, 7, 3, 4);
        let x = random_cmat(&mut rng, 3, 4);
        let mut y = CVec::zeros(7);
        for j in 0..4 {
            let block = op.phi_block(j).unwrap();
            y += block * x.column(j);
        }
        let direct = op.forward(&x).unwrap();
        for i in 0..7 {
            assert!((y[i] - direct[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn phi_block_identity_basis_structure() {
        // B = first K identity columns: block (i, i) holds a_j(i), zeros elsewhere.
        let n = 5;
        let k = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let op = LiftedOperator::direct(
            Dictionary::from_real(a.clone()).unwrap(),
            SubspaceBasis::identity_first_k(n, k).unwrap(),
        )
        .unwrap();
        let block = op.phi_block(1).unwrap();
        for i in 0..n {
            for kk in 0..k {
                let expected = if i == kk {
                    Complex64::new(a[(i, 1)], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                assert!((block[(i, kk)] - expected).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn phi_block_k1_is_elementwise_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let op = random_direct(&mut rng, 6, 1, 3);
        let block = op.phi_block(2).unwrap();
        let (a, b) = match &op {
            LiftedOperator::Direct(d) => (d.dict().entries(), d.basis().columns()),
            _ => unreachable!(),
        };
        for i in 0..6 {
            assert!((block[(i, 0)] - b[(i, 0)] * a[(i, 2)]).norm() < 1e-14);
        }
    }

    #[test]
    fn phi_block_rejects_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let op = random_direct(&mut rng, 4, 2, 3);
        assert!(matches!(op.phi_block(3), Err(Error::Shape(_))));
    }

    #[test]
    fn coherence_identity_and_dft() {
        let n = 16;
        let ident = SubspaceBasis::identity_first_k(n, 3).unwrap();
        assert!((coherence(&ident) - (n as f64).sqrt()).abs() < 1e-12);
        let dft = SubspaceBasis::dft_first_k(n, 3).unwrap();
        assert!((coherence(&dft) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coherence_random_basis_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 64;
        let raw = random_cmat(&mut rng, n, 4);
        let basis = SubspaceBasis::from_matrix(raw).unwrap();
        let mu = coherence(&basis);
        assert!(mu >= 1.0 && mu <= 8.0, "mu = {mu}");
        // Brute-force max scan agrees with the implementation.
        let brute = basis
            .columns()
            .iter()
            .map(|z| z.norm())
            .fold(0.0f64, f64::max)
            * (n as f64).sqrt();
        assert!((mu - brute).abs() < 1e-14);
    }

    #[test]
    fn basis_reorthonormalizes_noisy_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let raw = random_cmat(&mut rng, 10, 3) * Complex64::new(3.7, 0.0);
        let basis = SubspaceBasis::from_matrix(raw).unwrap();
        assert!(orthonormality_deviation(basis.columns()) <= ORTHONORMALITY_TOL);
    }

    #[test]
    fn basis_rejects_k_not_less_than_n() {
        let raw = CMat::identity(3, 3);
        assert!(SubspaceBasis::from_matrix(raw).is_err());
    }

    #[test]
    fn forward_rejects_bad_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let op = random_direct(&mut rng, 4, 2, 3);
        assert!(matches!(
            op.forward(&CMat::zeros(3, 3)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(op.adjoint(&CVec::zeros(5)), Err(Error::Shape(_))));
    }

    #[test]
    fn restricted_operator_consistent_with_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let op = random_direct(&mut rng, 8, 2, 6);
        let restricted = SupportRestricted::new(&op, &[1, 4]).unwrap();
        let x_t = random_cmat(&mut rng, 2, 2);
        let via_restricted = restricted.forward(&x_t).unwrap();
        let via_full = op.forward(&restricted.embed(&x_t)).unwrap();
        assert!((via_restricted - via_full).norm() < 1e-13);

        let y = random_cvec(&mut rng, 8);
        let adj = restricted.adjoint(&y).unwrap();
        let full_adj = op.adjoint(&y).unwrap();
        assert!((adj.column(0) - full_adj.column(1)).norm() < 1e-13);
        assert!((adj.column(1) - full_adj.column(4)).norm() < 1e-13);
    }

    #[test]
    fn dense_assembly_matches_factored_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let op = random_direct(&mut rng, 6, 2, 4);
        let phi = assemble_full(&op).unwrap();
        let x = random_cmat(&mut rng, 2, 4);
        let vec_x = CVec::from_column_slice(x.as_slice());
        let dense = &phi * &vec_x;
        let factored = op.forward(&x).unwrap();
        for i in 0..6 {
            assert!((dense[i] - factored[i]).norm() < BLOCK_CONSISTENCY_TOL);
        }
    }

    #[test]
    fn fourier_spikes_columns_are_dfts_of_unit_vectors() {
        let n = 8;
        let dict = Dictionary::fourier_spikes(n).unwrap();
        // Column j at row n: exp(-2 pi i n j / N); check unit modulus and a
        // couple of exact values.
        for z in dict.entries().iter() {
            assert!((z.norm() - 1.0).abs() < 1e-12);
        }
        assert!((dict.entries()[(0, 3)] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        let quarter = dict.entries()[(2, 1)];
        assert!((quarter - Complex64::new(0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn smi_adjoint_identity_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for mode in [SampleMode::Decimate, SampleMode::BlockAverage] {
            let patch = 5;
            let raw = DMatrix::from_fn(patch * patch, 2, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let q = raw.qr().q();
            let op = LiftedOperator::smi(&q, patch, 4, 3, mode).unwrap();
            let (k, m) = op.coeff_dims();
            for _ in 0..20 {
                let x = random_cmat(&mut rng, k, m);
                let y = random_cvec(&mut rng, op.obs_len());
                let lhs = op.forward(&x).unwrap().dotc(&y);
                let ady = op.adjoint(&y).unwrap();
                let rhs: Complex64 = x
                    .iter()
                    .zip(ady.iter())
                    .map(|(xi, ai)| xi.conj() * ai)
                    .sum();
                let bound = 1e-8 * (x.norm() * y.norm() + 1.0);
                assert!((lhs - rhs).norm() <= bound, "mode {mode:?}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn subsample_mass_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let img = DMatrix::from_fn(12, 12, |_, _| rng.sample::<f64, _>(StandardNormal));
        let avg = subsample(&img, 3, SampleMode::BlockAverage);
        let total: f64 = img.iter().sum();
        let avg_total: f64 = avg.iter().sum();
        assert!((avg_total - total / 9.0).abs() < 1e-12);

        let dec = subsample(&img, 3, SampleMode::Decimate);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(dec[(r, c)], img[(r * 3, c * 3)]);
            }
        }
    }
}
