//! Matrix-valued exponential-polynomial kernels.
//!
//! A kernel is a finite sum `t ↦ Σ_j e^{a_j t} Σ_k C_{j,k} t^k` with square
//! coefficient matrices. The family is closed under differentiation, right
//! multiplication by a constant matrix and addition, which is everything the
//! rank recursions need, so all quantities such as `M_i(0)` are computed
//! exactly from coefficients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance under which two exponents are treated as equal.
pub const EXPONENT_MERGE_RTOL: f64 = 1e-12;

/// Max-abs threshold under which a coefficient matrix counts as zero.
pub const ZERO_TRIM_ATOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch: expected {expected}x{expected}, found {rows}x{cols}")]
    DimensionMismatch {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error(
        "derivative of order {order} at 0 is not in the column space of the kernel at 0 \
         (residual {residual:.3e} > {threshold:.3e})"
    )]
    Inapplicable {
        order: usize,
        residual: f64,
        threshold: f64,
    },
    #[error("invalid kernel literal: {0}")]
    InvalidLiteral(String),
}

/// One exponential block `e^{a t} Σ_k coeffs[k] t^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpPolyTerm {
    pub exponent: f64,
    pub coeffs: Vec<DMatrix<f64>>,
}

impl ExpPolyTerm {
    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpPolyKernel {
    dim: usize,
    terms: Vec<ExpPolyTerm>,
}

pub(crate) fn exponents_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= EXPONENT_MERGE_RTOL * (1.0 + a.abs().max(b.abs()))
}

fn is_negligible(c: &DMatrix<f64>) -> bool {
    c.iter().all(|v| v.abs() <= ZERO_TRIM_ATOL)
}

fn check_square(c: &DMatrix<f64>, dim: usize) -> Result<(), KernelError> {
    if c.nrows() != dim || c.ncols() != dim {
        return Err(KernelError::DimensionMismatch {
            expected: dim,
            rows: c.nrows(),
            cols: c.ncols(),
        });
    }
    Ok(())
}

impl ExpPolyKernel {
    /// Builds a kernel from raw terms and brings it to canonical form.
    pub fn new(dim: usize, terms: Vec<ExpPolyTerm>) -> Result<Self, KernelError> {
        for term in &terms {
            if !term.exponent.is_finite() {
                return Err(KernelError::InvalidLiteral(format!(
                    "non-finite exponent {}",
                    term.exponent
                )));
            }
            for c in &term.coeffs {
                check_square(c, dim)?;
            }
        }
        Ok(Self::canonical(dim, terms))
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: Vec::new(),
        }
    }

    /// The time-independent kernel `t ↦ c`.
    pub fn constant(c: DMatrix<f64>) -> Self {
        assert!(c.is_square(), "constant kernel needs a square matrix");
        let dim = c.nrows();
        Self::canonical(
            dim,
            vec![ExpPolyTerm {
                exponent: 0.0,
                coeffs: vec![c],
            }],
        )
    }

    /// `e^{a t} Σ_k coeffs[k] t^k`.
    pub fn exp_poly(exponent: f64, coeffs: Vec<DMatrix<f64>>) -> Result<Self, KernelError> {
        let dim = coeffs.first().map_or(0, |c| c.nrows());
        Self::new(dim, vec![ExpPolyTerm { exponent, coeffs }])
    }

    /// Scalar shorthand: `e^{a t} Σ_k c_k t^k` times the `dim`-dimensional identity.
    pub fn scalar(dim: usize, exponent: f64, coeffs: &[f64]) -> Self {
        let coeffs = coeffs
            .iter()
            .map(|&c| DMatrix::identity(dim, dim) * c)
            .collect();
        Self::canonical(dim, vec![ExpPolyTerm { exponent, coeffs }])
    }

    fn canonical(dim: usize, mut terms: Vec<ExpPolyTerm>) -> Self {
        terms.sort_by(|a, b| a.exponent.total_cmp(&b.exponent));
        let mut merged: Vec<ExpPolyTerm> = Vec::with_capacity(terms.len());
        for term in terms {
            match merged.last_mut() {
                Some(last) if exponents_match(last.exponent, term.exponent) => {
                    for (k, c) in term.coeffs.into_iter().enumerate() {
                        if k < last.coeffs.len() {
                            last.coeffs[k] += c;
                        } else {
                            last.coeffs.push(c);
                        }
                    }
                }
                _ => merged.push(term),
            }
        }
        for term in &mut merged {
            while term.coeffs.last().is_some_and(is_negligible) {
                term.coeffs.pop();
            }
        }
        merged.retain(|t| !t.coeffs.is_empty());
        Self { dim, terms: merged }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[ExpPolyTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// True when the kernel is a single time-independent matrix (or zero).
    pub fn is_constant(&self) -> bool {
        match self.terms.as_slice() {
            [] => true,
            [t] => t.coeffs.len() == 1 && exponents_match(t.exponent, 0.0),
            _ => false,
        }
    }

    /// Total number of scalar coefficients stored.
    pub fn coefficient_count(&self) -> usize {
        self.terms.iter().map(|t| t.coeffs.len()).sum::<usize>() * self.dim * self.dim
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            // Horner in t
            let mut poly = DMatrix::zeros(self.dim, self.dim);
            for c in term.coeffs.iter().rev() {
                poly *= t;
                poly += c;
            }
            out += poly * (term.exponent * t).exp();
        }
        out
    }

    pub fn differentiate(&self) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|term| {
                let a = term.exponent;
                let coeffs = (0..term.coeffs.len())
                    .map(|k| {
                        let mut c = &term.coeffs[k] * a;
                        if let Some(next) = term.coeffs.get(k + 1) {
                            c += next * (k as f64 + 1.0);
                        }
                        c
                    })
                    .collect();
                ExpPolyTerm {
                    exponent: a,
                    coeffs,
                }
            })
            .collect();
        Self::canonical(self.dim, terms)
    }

    /// Replaces every coefficient `C` by `C·x`.
    pub fn right_multiply(&self, x: &DMatrix<f64>) -> Result<Self, KernelError> {
        check_square(x, self.dim)?;
        let terms = self
            .terms
            .iter()
            .map(|term| ExpPolyTerm {
                exponent: term.exponent,
                coeffs: term.coeffs.iter().map(|c| c * x).collect(),
            })
            .collect();
        Ok(Self::canonical(self.dim, terms))
    }

    pub fn add(&self, other: &Self) -> Result<Self, KernelError> {
        if other.dim != self.dim {
            return Err(KernelError::DimensionMismatch {
                expected: self.dim,
                rows: other.dim,
                cols: other.dim,
            });
        }
        let terms = self.terms.iter().chain(&other.terms).cloned().collect();
        Ok(Self::canonical(self.dim, terms))
    }

    pub fn scale(&self, s: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|term| ExpPolyTerm {
                exponent: term.exponent,
                coeffs: term.coeffs.iter().map(|c| c * s).collect(),
            })
            .collect();
        Self::canonical(self.dim, terms)
    }

    /// Pointwise transpose `t ↦ K(t)ᵀ`.
    pub fn transpose(&self) -> Self {
        Self {
            dim: self.dim,
            terms: self
                .terms
                .iter()
                .map(|term| ExpPolyTerm {
                    exponent: term.exponent,
                    coeffs: term.coeffs.iter().map(|c| c.transpose()).collect(),
                })
                .collect(),
        }
    }

    /// Lifts a 1×1 kernel to `k(t)·I_dim`.
    pub fn expand_scalar(&self, dim: usize) -> Result<Self, KernelError> {
        if self.dim != 1 {
            return Err(KernelError::DimensionMismatch {
                expected: 1,
                rows: self.dim,
                cols: self.dim,
            });
        }
        let terms = self
            .terms
            .iter()
            .map(|term| ExpPolyTerm {
                exponent: term.exponent,
                coeffs: term
                    .coeffs
                    .iter()
                    .map(|c| DMatrix::identity(dim, dim) * c[(0, 0)])
                    .collect(),
            })
            .collect();
        Ok(Self::canonical(dim, terms))
    }

    /// `d^order K / dt^order` evaluated at `t = 0`.
    pub fn derivative_at_zero(&self, order: usize) -> DMatrix<f64> {
        let mut k = self.clone();
        for _ in 0..order {
            k = k.differentiate();
        }
        k.eval(0.0)
    }

    /// Least-squares `G` with `K(0)·G = K^{(order)}(0)`.
    ///
    /// Returns [`KernelError::Inapplicable`] when the residual exceeds
    /// `tol·(1 + |K^{(order)}(0)|_F)`.
    pub fn solve_g(&self, order: usize, tol: f64) -> Result<DMatrix<f64>, KernelError> {
        assert!(order >= 1, "solve_g needs order >= 1");
        let base = self.eval(0.0);
        let target = self.derivative_at_zero(order);
        let g = pseudo_inverse(&base) * &target;
        let residual = (&base * &g - &target).norm();
        let threshold = tol * (1.0 + target.norm());
        if residual > threshold {
            return Err(KernelError::Inapplicable {
                order,
                residual,
                threshold,
            });
        }
        Ok(g)
    }

    /// Entrywise comparison of canonical forms.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.dim == other.dim
            && self.terms.len() == other.terms.len()
            && self.terms.iter().zip(&other.terms).all(|(a, b)| {
                exponents_match(a.exponent, b.exponent)
                    && a.coeffs.len() == b.coeffs.len()
                    && a
                        .coeffs
                        .iter()
                        .zip(&b.coeffs)
                        .all(|(x, y)| (x - y).amax() <= tol)
            })
    }

    /// Flattened view as `(exponent, degree, coefficient)` triples.
    pub fn basis(&self) -> impl Iterator<Item = (f64, usize, &DMatrix<f64>)> {
        self.terms.iter().flat_map(|term| {
            term.coeffs
                .iter()
                .enumerate()
                .map(move |(k, c)| (term.exponent, k, c))
        })
    }
}

/// Moore–Penrose pseudo-inverse with a relative singular-value cutoff.
pub(crate) fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return m.transpose();
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = 1e-12 * smax * m.nrows().max(m.ncols()) as f64;
    if smax == 0.0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    svd.pseudo_inverse(cutoff)
        .expect("svd computed with both factors")
}

/// Coefficient list of one term in a kernel literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoeffsLiteral {
    /// `[c0, c1, ...]`, each expanded to `c·I`.
    Scalar(Vec<f64>),
    /// `[[[row-major]], ...]`, one matrix per polynomial degree.
    Matrices(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermLiteral {
    pub a: f64,
    pub coeffs: CoeffsLiteral,
}

/// Configuration-file representation: an array of `{ "a": .., "coeffs": .. }`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KernelLiteral(pub Vec<TermLiteral>);

impl KernelLiteral {
    pub fn to_kernel(&self, dim: usize) -> Result<ExpPolyKernel, KernelError> {
        let mut terms = Vec::with_capacity(self.0.len());
        for t in &self.0 {
            let coeffs = match &t.coeffs {
                CoeffsLiteral::Scalar(cs) => cs
                    .iter()
                    .map(|&c| DMatrix::identity(dim, dim) * c)
                    .collect(),
                CoeffsLiteral::Matrices(ms) => ms
                    .iter()
                    .map(|rows| matrix_from_rows(rows))
                    .collect::<Result<Vec<_>, _>>()?,
            };
            terms.push(ExpPolyTerm {
                exponent: t.a,
                coeffs,
            });
        }
        ExpPolyKernel::new(dim, terms)
    }

    pub fn from_kernel(kernel: &ExpPolyKernel) -> Self {
        Self(
            kernel
                .terms()
                .iter()
                .map(|t| TermLiteral {
                    a: t.exponent,
                    coeffs: CoeffsLiteral::Matrices(t.coeffs.iter().map(matrix_to_rows).collect()),
                })
                .collect(),
        )
    }
}

/// Row-major nested array to matrix; rejects ragged input.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, KernelError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(KernelError::InvalidLiteral("ragged matrix rows".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(KernelError::InvalidLiteral("non-finite matrix entry".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
