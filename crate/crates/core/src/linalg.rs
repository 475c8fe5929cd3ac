//! Dense row-major matrices and the handful of kernels the detector needs:
//! centering, covariance, the dominant eigenvalue, norms and robust
//! statistics. Everything is computed in `f64`.

use crate::error::{Error, Result};

/// Regularizer added to every denominator that can vanish.
pub const EPSILON: f64 = 1e-12;

pub const POWER_MAX_ITERS: usize = 1000;
pub const POWER_REL_TOL: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry at {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Element-wise difference `self - other`.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::invalid(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.data.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        (0..self.rows).all(|r| {
            (r + 1..self.cols).all(|c| (self.get(r, c) - self.get(c, r)).abs() <= tol * scale)
        })
    }

    fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), v);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Subtracts each column's mean from that column.
pub fn center_rows(m: &Matrix) -> Result<Matrix> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::invalid("cannot center an empty matrix"));
    }
    let mut means = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (mean, v) in means.iter_mut().zip(m.row(r)) {
            *mean += v;
        }
    }
    let n = m.rows as f64;
    means.iter_mut().for_each(|s| *s /= n);

    let mut out = m.clone();
    for r in 0..m.rows {
        let row = &mut out.data[r * m.cols..(r + 1) * m.cols];
        for (v, mean) in row.iter_mut().zip(&means) {
            *v -= mean;
        }
    }
    Ok(out)
}

/// Unbiased sample covariance `XᵀX / (n-1)` of an already-centered matrix.
pub fn covariance(centered: &Matrix) -> Result<Matrix> {
    let (n, d) = (centered.rows, centered.cols);
    if n < 2 {
        return Err(Error::DegenerateCovariance { rows: n });
    }
    let mut c = Matrix::zeros(d, d);
    for r in 0..n {
        let row = centered.row(r);
        for i in 0..d {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            let out = &mut c.data[i * d..(i + 1) * d];
            for j in i..d {
                out[j] += xi * row[j];
            }
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    for i in 0..d {
        for j in i..d {
            let v = c.data[i * d + j] * scale;
            c.data[i * d + j] = v;
            c.data[j * d + i] = v;
        }
    }
    Ok(c)
}

/// Result of a dominant-eigenvalue solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DominantEigen {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// The first run starts from the normalized all-ones vector. Unless its
/// estimate already exceeds half the trace (which certifies it is the
/// largest eigenvalue of a PSD matrix), a second run from a fixed
/// quasi-random vector guards against a start vector orthogonal to the
/// dominant eigenvector, and the larger estimate wins.
pub fn lambda_max(c: &Matrix) -> Result<DominantEigen> {
    if c.rows != c.cols {
        return Err(Error::invalid(format!(
            "lambda_max needs a square matrix, got {}x{}",
            c.rows, c.cols
        )));
    }
    if !c.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::invalid("lambda_max needs a symmetric matrix"));
    }
    let n = c.rows;
    if n == 0 {
        return Ok(DominantEigen {
            value: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    let ones = vec![1.0; n];
    let first = power_iterate(c, ones);
    let trace = c.trace();
    if first.value > 0.5 * trace * (1.0 + 1e-12) || trace <= 0.0 {
        return Ok(first);
    }

    // Weyl sequence: generic direction, reproducible across platforms.
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    let generic = (0..n)
        .map(|j| 0.5 + ((j as f64 + 1.0) * GOLDEN).fract())
        .collect();
    let second = power_iterate(c, generic);
    let best = if second.value > first.value {
        second
    } else {
        first
    };
    Ok(DominantEigen {
        value: best.value,
        iterations: first.iterations + second.iterations,
        converged: first.converged && second.converged,
    })
}

fn power_iterate(c: &Matrix, mut v: Vec<f64>) -> DominantEigen {
    let norm = norm2(&v);
    v.iter_mut().for_each(|x| *x /= norm);
    let mut w = vec![0.0; v.len()];
    let mut estimate = f64::NAN;

    for iter in 1..=POWER_MAX_ITERS {
        c.mul_vec_into(&v, &mut w);
        let rayleigh = dot(&v, &w);
        let wn = norm2(&w);
        if wn == 0.0 {
            return DominantEigen {
                value: 0.0,
                iterations: iter,
                converged: true,
            };
        }
        let done = (rayleigh - estimate).abs() <= POWER_REL_TOL * rayleigh.abs().max(f64::MIN_POSITIVE);
        estimate = rayleigh;
        if done {
            return DominantEigen {
                value: estimate.max(0.0),
                iterations: iter,
                converged: true,
            };
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
    }
    DominantEigen {
        value: estimate.max(0.0),
        iterations: POWER_MAX_ITERS,
        converged: false,
    }
}

pub fn frobenius(m: &Matrix) -> f64 {
    norm2(&m.data)
}

/// Cosine similarity with `EPSILON` added to the denominator, so a zero
/// vector has similarity 0 with everything.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let c = dot(a, b) / (norm2(a) * norm2(b) + EPSILON);
    Ok(c.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustStats {
    pub median: f64,
    /// Q75 - Q25 with type-7 quantiles.
    pub iqr: f64,
    /// Median absolute deviation from the median (unscaled).
    pub mad: f64,
}

pub fn robust_stats(xs: &[f64]) -> Result<RobustStats> {
    if xs.is_empty() {
        return Err(Error::invalid("robust statistics of an empty list"));
    }
    let sorted = sorted_copy(xs);
    let median = quantile_sorted(&sorted, 0.5);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let deviations: Vec<f64> = xs.iter().map(|x| (x - median).abs()).collect();
    let mad = quantile_sorted(&sorted_copy(&deviations), 0.5);
    Ok(RobustStats {
        median,
        iqr: iqr.max(0.0),
        mad,
    })
}

pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::invalid("median of an empty list"));
    }
    Ok(quantile_sorted(&sorted_copy(xs), 0.5))
}

fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Type-7 quantile (linear interpolation between order statistics).
/// At p = 0.5 this is the midpoint of the two middle values for even n.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}
