//! Dense matrix kernels and the nuclear-norm-ball linear minimization oracle.
//!
//! The LMO is computed with a power-iteration 1-SVD on the gradient; a
//! one-sided-Jacobi full SVD serves as the reference oracle for tests and
//! for exact nuclear norms.
//!
//! Indexed loops are used deliberately in the kernels below; they mirror the
//! row-major layout arithmetic and keep bounds reasoning local.
#![allow(clippy::needless_range_loop)]

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_POWER_TOL: f64 = 1e-9;
pub const MATRIX_MAGIC: &[u8; 4] = b"AFW1";

/// Row-major dense real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Parameter(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "expected {} entries for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::Parameter("matrix contains non-finite entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(rows: usize, cols: usize, diag: &[f64]) -> Self {
        let mut m = Self::zeros(rows, cols);
        for (i, &d) in diag.iter().enumerate().take(rows.min(cols)) {
            m.data[i * cols + i] = d;
        }
        m
    }

    /// Outer product `scale * u * v^T`.
    pub fn outer(u: &[f64], v: &[f64], scale: f64) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for (i, &ui) in u.iter().enumerate() {
            let row = &mut m.data[i * v.len()..(i + 1) * v.len()];
            for (j, &vj) in v.iter().enumerate() {
                row[j] = scale * ui * vj;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, val: f64) {
        self.data[i * self.cols + j] = val;
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &DenseMatrix) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// `self = (1 - eta) * self + eta * scale * u * v^T`, the rank-one convex step.
    pub fn convex_rank_one(&mut self, eta: f64, u: &[f64], v: &[f64], scale: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        let keep = 1.0 - eta;
        for (i, &ui) in u.iter().enumerate() {
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            let c = eta * scale * ui;
            for (j, &vj) in v.iter().enumerate() {
                row[j] = keep * row[j] + c * vj;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `y = M * x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `y = M^T * x`.
    pub fn matvec_transposed(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let xi = x[i];
            for (j, &a) in row.iter().enumerate() {
                y[j] += a * xi;
            }
        }
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    fn check_shape(&self, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "shapes {}x{} and {}x{} do not match",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MATRIX_MAGIC {
            return Err(Error::Parameter("bad matrix file magic".into()));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let rows = u32::from_le_bytes(buf4) as usize;
        r.read_exact(&mut buf4)?;
        let cols = u32::from_le_bytes(buf4) as usize;
        let mut data = vec![0.0; rows * cols];
        let mut buf8 = [0u8; 8];
        for x in &mut data {
            r.read_exact(&mut buf8)?;
            *x = f64::from_le_bytes(buf8);
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_binary(&mut f)
    }

    /// Text loader for tests: one row per line, comma-separated entries.
    pub fn from_csv_text(text: &str) -> Result<Self> {
        let mut data = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parameter(format!("bad csv entry {s:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            match cols {
                None => cols = Some(vals.len()),
                Some(c) if c != vals.len() => {
                    return Err(Error::Dimension("ragged csv rows".into()))
                }
                _ => {}
            }
            data.extend(vals);
            rows += 1;
        }
        Self::from_vec(rows, cols.unwrap_or(0), data)
    }
}

/// Unit singular pair with a nonnegative scale; `scale * u * v^T` has
/// nuclear norm exactly `scale`.
#[derive(Debug, Clone)]
pub struct RankOnePair {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub scale: f64,
}

impl RankOnePair {
    /// Materializes `sign * scale * u * v^T`.
    pub fn to_matrix(&self, sign: f64) -> DenseMatrix {
        DenseMatrix::outer(&self.u, &self.v, sign * self.scale)
    }
}

pub fn frobenius_inner(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "inner product shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.entries().iter().zip(b.entries()).map(|(x, y)| x * y).sum())
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm2(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

#[derive(Debug, Clone)]
pub struct PowerIterationResult {
    pub u: Vec<f64>,
    pub sigma: f64,
    pub v: Vec<f64>,
    pub converged: bool,
}

/// Iteration cap for power iteration. The 10x-dimension floor alone is far
/// too small when the top two singular values nearly coincide (vector error
/// decays like (sigma2/sigma1)^(2n)); the flat floor keeps the LMO's
/// optimality-gap guarantee while the tolerance test still exits early on
/// well-separated spectra.
pub fn default_power_max_iters(rows: usize, cols: usize) -> usize {
    (10 * rows.max(cols)).max(20_000)
}

/// Leading singular triple by power iteration on `M^T M`.
///
/// Sign convention: the first nonzero component of `u` is nonnegative, so the
/// result is deterministic given `(M, seed)`.
pub fn power_iteration_1svd(
    m: &DenseMatrix,
    tol: f64,
    max_iters: usize,
    seed: u64,
) -> Result<PowerIterationResult> {
    if tol <= 0.0 {
        return Err(Error::Parameter("power iteration tol must be positive".into()));
    }
    if max_iters == 0 {
        return Err(Error::Parameter("max_iters must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    power_iteration_1svd_with_rng(m, tol, max_iters, &mut rng)
}

/// Same as [`power_iteration_1svd`] but draws the start vector from a caller
/// supplied generator.
pub fn power_iteration_1svd_with_rng<R: Rng>(
    m: &DenseMatrix,
    tol: f64,
    max_iters: usize,
    rng: &mut R,
) -> Result<PowerIterationResult> {
    if m.frobenius_norm() == 0.0 {
        return Err(Error::Degenerate("power iteration on zero matrix".into()));
    }
    let (rows, cols) = m.shape();
    let mut v: Vec<f64> = (0..cols).map(|_| rng.gen::<f64>() - 0.5).collect();
    if normalize(&mut v) == 0.0 {
        v[0] = 1.0;
    }
    let mut mv = vec![0.0; rows];
    let mut w = vec![0.0; cols];
    let mut sigma_prev = f64::NAN;
    let mut converged = false;
    for _ in 0..max_iters {
        m.matvec(&v, &mut mv);
        let sigma = norm2(&mv);
        m.matvec_transposed(&mv, &mut w);
        let n = normalize(&mut w);
        if n == 0.0 {
            // v fell into the null space; restart from a fresh direction.
            for x in v.iter_mut() {
                *x = rng.gen::<f64>() - 0.5;
            }
            normalize(&mut v);
            sigma_prev = f64::NAN;
            continue;
        }
        std::mem::swap(&mut v, &mut w);
        if sigma_prev.is_finite() && (sigma - sigma_prev).abs() < tol {
            converged = true;
            break;
        }
        sigma_prev = sigma;
    }
    m.matvec(&v, &mut mv);
    let sigma = normalize(&mut mv);
    let mut u = mv;
    if sigma == 0.0 {
        return Err(Error::Degenerate("power iteration collapsed to zero".into()));
    }
    // Sign convention: first nonzero component of u is nonnegative.
    if let Some(&lead) = u.iter().find(|x| **x != 0.0) {
        if lead < 0.0 {
            for x in u.iter_mut() {
                *x = -*x;
            }
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
    Ok(PowerIterationResult { u, sigma, v, converged })
}

#[derive(Debug, Clone)]
pub struct LmoResult {
    /// Unit pair with `scale = theta`; the minimizing direction is
    /// `-theta * u * v^T` (see [`RankOnePair::to_matrix`] with sign -1).
    pub pair: RankOnePair,
    pub converged: bool,
    /// Set when the gradient was zero and the direction is arbitrary.
    pub degenerate: bool,
}

/// Linear minimization oracle over the nuclear-norm ball of radius `theta`.
pub fn lmo_nuclear(grad: &DenseMatrix, theta: f64, tol: f64, seed: u64) -> Result<LmoResult> {
    if theta <= 0.0 {
        return Err(Error::Parameter("theta must be positive".into()));
    }
    let (rows, cols) = grad.shape();
    if grad.frobenius_norm() == 0.0 {
        // A zero minibatch gradient is reachable on noiseless problems at the
        // optimum; any feasible direction attains the (zero) minimum.
        let mut u = vec![0.0; rows];
        let mut v = vec![0.0; cols];
        u[0] = 1.0;
        v[0] = 1.0;
        return Ok(LmoResult {
            pair: RankOnePair { u, v, scale: theta },
            converged: true,
            degenerate: true,
        });
    }
    let res = power_iteration_1svd(grad, tol, default_power_max_iters(rows, cols), seed)?;
    Ok(LmoResult {
        pair: RankOnePair { u: res.u, v: res.v, scale: theta },
        converged: res.converged,
        degenerate: false,
    })
}

/// Thin SVD `M = U diag(s) V^T` with nonincreasing singular values.
#[derive(Debug, Clone)]
pub struct SvdReference {
    pub singular_values: Vec<f64>,
    pub u: DenseMatrix,
    pub v: DenseMatrix,
}

impl SvdReference {
    pub fn reconstruct(&self) -> DenseMatrix {
        let (rows, r) = self.u.shape();
        let cols = self.v.rows();
        let mut m = DenseMatrix::zeros(rows, cols);
        for k in 0..r {
            let s = self.singular_values[k];
            for i in 0..rows {
                let c = s * self.u.get(i, k);
                for j in 0..cols {
                    let val = m.get(i, j) + c * self.v.get(j, k);
                    m.set(i, j, val);
                }
            }
        }
        m
    }
}

/// Reference full SVD by one-sided Jacobi, for test oracles and nuclear norms.
pub fn full_svd_reference(m: &DenseMatrix) -> Result<SvdReference> {
    let (rows, cols) = m.shape();
    if rows < cols {
        // Work on the transpose so columns are the short dimension.
        let t = full_svd_reference(&m.transpose())?;
        return Ok(SvdReference { singular_values: t.singular_values, u: t.v, v: t.u });
    }
    // Columns of `a` are rotated until pairwise orthogonal; `v` accumulates
    // the same rotations.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| m.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut col = vec![0.0; cols];
            col[j] = 1.0;
            col
        })
        .collect();
    let eps = 1e-15;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if alpha * beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(rel);
                if rel <= eps {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let ap = a[p][i];
                    let aq = a[q][i];
                    a[p][i] = c * ap - s * aq;
                    a[q][i] = s * ap + c * aq;
                }
                for i in 0..cols {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if off <= eps {
            break;
        }
    }
    let mut triples: Vec<(f64, Vec<f64>, Vec<f64>)> = a
        .into_iter()
        .zip(v)
        .map(|(col, vcol)| {
            let sigma = norm2(&col);
            let u = if sigma > 0.0 {
                col.iter().map(|x| x / sigma).collect()
            } else {
                vec![0.0; rows]
            };
            (sigma, u, vcol)
        })
        .collect();
    triples.sort_by(|x, y| y.0.total_cmp(&x.0));
    let mut u = DenseMatrix::zeros(rows, cols);
    let mut vmat = DenseMatrix::zeros(cols, cols);
    let mut singular_values = Vec::with_capacity(cols);
    for (k, (sigma, ucol, vcol)) in triples.into_iter().enumerate() {
        singular_values.push(sigma);
        for i in 0..rows {
            u.set(i, k, ucol[i]);
        }
        for i in 0..cols {
            vmat.set(i, k, vcol[i]);
        }
    }
    Ok(SvdReference { singular_values, u, v: vmat })
}

/// Sum of singular values, from the reference SVD.
pub fn nuclear_norm(m: &DenseMatrix) -> Result<f64> {
    Ok(full_svd_reference(m)?.singular_values.iter().sum())
}
