//! Dense symmetric linear algebra and the finite-difference gradient oracle.
//!
//! The eigensolver is a cyclic Jacobi sweep. It is slow for large matrices but
//! unconditionally stable and bit-reproducible, which is what the anchor basis
//! needs: identical features must give an identical principal basis.

use crate::error::{Error, Result};

/// Finite-difference step used by the gradient checks.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Eigenvalues closer than this are treated as tied and ordered by column index.
pub const EIGEN_TIE_TOLERANCE: f64 = 1e-12;

const JACOBI_RELATIVE_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// A square matrix whose entries are exactly symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl SymMatrix {
    /// Builds a matrix from row-major entries. Symmetry is checked bit-exactly.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("matrix dimension must be >= 1".into()));
        }
        if entries.len() != dim * dim {
            return Err(Error::InvalidInput(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        for u in 0..dim {
            for v in (u + 1)..dim {
                let (a, b) = (entries[u * dim + v], entries[v * dim + u]);
                if a != b && a.to_bits() != b.to_bits() {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not symmetric at ({u}, {v})"
                    )));
                }
            }
        }
        Ok(Self { dim, entries })
    }

    /// Builds a matrix from the upper triangle produced by `f(u, v)` for `u <= v`.
    pub fn from_upper(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(dim >= 1, "matrix dimension must be >= 1");
        let mut entries = vec![0.0; dim * dim];
        for u in 0..dim {
            for v in u..dim {
                let x = f(u, v);
                entries[u * dim + v] = x;
                entries[v * dim + u] = x;
            }
        }
        Self { dim, entries }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_upper(dim, |u, v| if u == v { 1.0 } else { 0.0 })
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_upper(dim, |_, _| 0.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.entries[u * self.dim + v]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|u| self.get(u, u)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|u| self.get(u, u)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Eigenvalues in descending order with matching orthonormal eigenvectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// Row-major `dim x dim`; column `i` pairs with `values[i]`.
    pub vectors: Vec<f64>,
    dim: usize,
}

impl EigenPairs {
    pub fn from_parts(dim: usize, values: Vec<f64>, vectors: Vec<f64>) -> Result<Self> {
        if values.len() != dim || vectors.len() != dim * dim {
            return Err(Error::InvalidInput("eigenpair shape mismatch".into()));
        }
        Ok(Self {
            values,
            vectors,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn vector_entry(&self, row: usize, col: usize) -> f64 {
        self.vectors[row * self.dim + col]
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.dim).map(|r| self.vector_entry(r, i)).collect()
    }

    /// `max |(QᵀQ − I)_ij|`.
    pub fn orthonormality_error(&self) -> f64 {
        let n = self.dim;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n)
                    .map(|r| self.vector_entry(r, i) * self.vector_entry(r, j))
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// `max |(S·Q − Q·Λ)_ij|` against the source matrix.
    pub fn residual(&self, source: &SymMatrix) -> f64 {
        let n = self.dim;
        let mut worst = 0.0f64;
        for r in 0..n {
            for i in 0..n {
                let sq: f64 = (0..n)
                    .map(|k| source.get(r, k) * self.vector_entry(k, i))
                    .sum();
                worst = worst.max((sq - self.vector_entry(r, i) * self.values[i]).abs());
            }
        }
        worst
    }

    /// `max |(QΛQᵀ − S)_ij|`.
    pub fn reconstruction_error(&self, source: &SymMatrix) -> f64 {
        let n = self.dim;
        let mut worst = 0.0f64;
        for u in 0..n {
            for v in 0..n {
                let x: f64 = (0..n)
                    .map(|i| self.vector_entry(u, i) * self.values[i] * self.vector_entry(v, i))
                    .sum();
                worst = worst.max((x - source.get(u, v)).abs());
            }
        }
        worst
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Output is deterministic: eigenvalues are sorted descending with near-ties
/// (`< EIGEN_TIE_TOLERANCE`) kept in original column order, and every
/// eigenvector is flipped so that its largest-magnitude component is positive.
pub fn sym_eigendecomposition(s: &SymMatrix) -> Result<EigenPairs> {
    if let Some(pos) = s.entries.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite matrix entry at ({}, {})",
            pos / s.dim,
            pos % s.dim
        )));
    }
    let n = s.dim;
    let mut a = s.entries.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let threshold = JACOBI_RELATIVE_TOLERANCE * s.frobenius_norm();
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a, n) <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let raw_values: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let order = descending_order(&raw_values);

    let mut values = Vec::with_capacity(n);
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        values.push(raw_values[src]);
        let column: Vec<f64> = (0..n).map(|r| v[r * n + src]).collect();
        let sign = canonical_sign(&column);
        for r in 0..n {
            vectors[r * n + dst] = sign * column[r];
        }
    }
    Ok(EigenPairs {
        values,
        vectors,
        dim: n,
    })
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[i * n + j] * a[i * n + j];
            }
        }
    }
    sum.sqrt()
}

/// Descending order of `values`; runs of values within the tie tolerance of
/// the run's leading value are reordered by original index.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    let mut start = 0;
    while start < order.len() {
        let lead = values[order[start]];
        let mut end = start + 1;
        while end < order.len() && (lead - values[order[end]]).abs() < EIGEN_TIE_TOLERANCE {
            end += 1;
        }
        order[start..end].sort_unstable();
        start = end;
    }
    order
}

/// +1 or -1 so that the largest-magnitude entry becomes positive. Magnitudes
/// within rounding of the maximum count as tied; the lowest index wins.
fn canonical_sign(column: &[f64]) -> f64 {
    let max = column.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let pivot = column
        .iter()
        .position(|x| x.abs() >= max - EIGEN_TIE_TOLERANCE)
        .unwrap_or(0);
    if column[pivot] < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Central-difference gradient `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        grad.push(central_difference(&mut f, &mut probe, i, h)?);
    }
    Ok(grad)
}

/// Central difference along a single coordinate. `probe` is restored on return.
pub fn central_difference<F>(f: &mut F, probe: &mut [f64], coordinate: usize, h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let original = probe[coordinate];
    probe[coordinate] = original + h;
    let plus = f(probe);
    probe[coordinate] = original - h;
    let minus = f(probe);
    probe[coordinate] = original;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::OracleFailure { coordinate });
    }
    Ok((plus - minus) / (2.0 * h))
}
