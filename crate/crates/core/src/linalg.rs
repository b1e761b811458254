//! Symmetric matrix utilities: eigendecomposition, spectral powers with
//! pseudoinverse semantics, and the control matrices used by the SL schemes.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// General dense matrix. Used for controls that need not be symmetric.
pub type Matrix = DMatrix<f64>;

/// A symmetric matrix. Symmetry is enforced on construction by averaging
/// with the transpose, so `entries[(i, j)] == entries[(j, i)]` bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::invalid(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::invalid("symmetric matrix must have dim >= 1"));
        }
        Ok(Self::symmetrized(m))
    }

    /// Builds from a square matrix assumed to be nonempty; `(m + mᵀ)/2`.
    pub(crate) fn symmetrized(mut m: Matrix) -> Self {
        let d = m.nrows();
        for i in 0..d {
            for j in (i + 1)..d {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("matrix rows must all have length d"));
        }
        Self::new(Matrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix(Matrix::identity(d, d))
    }

    pub fn zeros(d: usize) -> Self {
        SymMatrix(Matrix::zeros(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(Matrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn scaled_identity(d: usize, s: f64) -> Self {
        SymMatrix(Matrix::identity(d, d) * s)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| (0..self.dim()).map(|j| self.0[(i, j)]).collect())
            .collect()
    }

    /// `A S Aᵀ`, symmetrized.
    pub fn congruence(&self, a: &Matrix) -> SymMatrix {
        SymMatrix::symmetrized(a * &self.0 * a.transpose())
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(&self.0 * s)
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order and
/// eigenvectors stored as orthonormal columns.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl SpectralDecomposition {
    /// `V diag(f(λ)) Vᵀ`, symmetrized.
    pub fn apply<F: Fn(f64) -> f64>(&self, f: F) -> SymMatrix {
        let d = self.eigenvalues.len();
        let mut scaled = self.eigenvectors.clone();
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            let fk = f(lam);
            for i in 0..d {
                scaled[(i, k)] *= fk;
            }
        }
        SymMatrix::symmetrized(&scaled * self.eigenvectors.transpose())
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.apply(|l| l)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        *self.eigenvalues.last().expect("dim >= 1")
    }
}

pub fn spectral_decompose(s: &SymMatrix) -> Result<SpectralDecomposition> {
    if !s.is_finite() {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let d = s.dim();
    if d == 1 {
        return Ok(SpectralDecomposition {
            eigenvalues: vec![s.get(0, 0)],
            eigenvectors: Matrix::identity(1, 1),
        });
    }
    let eig = SymmetricEigen::new(s.0.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let eigenvectors = Matrix::from_fn(d, d, |i, k| eig.eigenvectors[(i, order[k])]);
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Default clipping threshold for an operator with top eigenvalue `lambda_max`.
pub fn default_clip_tol(lambda_max: f64) -> f64 {
    1e-12 * lambda_max.abs().max(1.0)
}

fn is_integer(p: f64) -> bool {
    p.fract() == 0.0
}

/// Scalar power with pseudoinverse semantics: `0^p := 0` for `p <= 0`.
fn pinv_pow(lam: f64, p: f64) -> f64 {
    if lam == 0.0 {
        0.0
    } else if p == 1.0 {
        lam
    } else if p == 0.5 {
        lam.sqrt()
    } else {
        lam.powf(p)
    }
}

/// `S^p` through the eigenvalues. Eigenvalues in `[-clip_tol, clip_tol]` are
/// treated as zero, and zero eigenvalues map to zero for every `p` (so
/// `p = -1` is the Moore-Penrose pseudoinverse and `p = 0` the projector onto
/// the range).
pub fn psd_power(s: &SymMatrix, p: f64, clip_tol: f64) -> Result<SymMatrix> {
    if !p.is_finite() {
        return Err(Error::invalid("power must be finite"));
    }
    if !(clip_tol >= 0.0) {
        return Err(Error::invalid("clip_tol must be nonnegative"));
    }
    if p == 1.0 && clip_tol == 0.0 {
        return Ok(s.clone());
    }
    let eig = spectral_decompose(s)?;
    let min = eig.min_eigenvalue();
    if min < -clip_tol && !is_integer(p) {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    Ok(eig.apply(|lam| {
        let lam = if lam.abs() <= clip_tol { 0.0 } else { lam };
        if lam < 0.0 {
            // only reachable for integer p
            lam.powi(p as i32)
        } else {
            pinv_pow(lam, p)
        }
    }))
}

/// `psd_power` with the default relative clipping threshold.
pub fn psd_power_auto(s: &SymMatrix, p: f64) -> Result<SymMatrix> {
    let eig = spectral_decompose(s)?;
    let tol = default_clip_tol(eig.max_eigenvalue());
    psd_power(s, p, tol)
}

/// `ln(exp(x) + exp(y))`.
fn log_add(x: f64, y: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return y;
    }
    if y == f64::NEG_INFINITY {
        return x;
    }
    let (hi, lo) = if x > y { (x, y) } else { (y, x) };
    hi + (lo - hi).exp().ln_1p()
}

/// `(Σ + δ^{1/α} I)^{-α}`, or the identity when `α = 0`.
///
/// Evaluated per eigenvalue in log space so that `δ^{1/α}` underflowing for
/// small `α` does not break the bound `‖C‖₂ ≤ 1/δ`.
pub fn regularized_control(sigma: &SymMatrix, alpha: f64, delta: f64) -> Result<SymMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!("delta must be positive, got {delta}")));
    }
    if alpha == 0.0 {
        return Ok(SymMatrix::identity(sigma.dim()));
    }
    let eig = spectral_decompose(sigma)?;
    let tol = default_clip_tol(eig.max_eigenvalue());
    let min = eig.min_eigenvalue();
    if min < -tol {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    let ln_shift = delta.ln() / alpha;
    Ok(eig.apply(|lam| {
        let ln_lam = if lam <= tol { f64::NEG_INFINITY } else { lam.ln() };
        let v = (-alpha * log_add(ln_lam, ln_shift)).exp();
        // rounding in exp/ln can overshoot 1/δ by an ulp
        v.min(1.0 / delta)
    }))
}

/// How pseudoinverse powers `(·)^{-1/2}` are evaluated in the extrapolation
/// control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PinvMode {
    /// `(X + δ² I)^{-1/2}`.
    Additive { delta: f64 },
    /// Clip eigenvalues below `clip_tol` to zero, then take the pseudoinverse power.
    Clip { clip_tol: f64 },
}

/// Controls of the extrapolation scheme:
/// `C = (Σ†)^{1/2}`, `D = Σ^{1/2} [(Σ^{1/2} Λ Σ^{1/2})†]^{1/2}`.
///
/// `D` is returned as a general matrix because it is only symmetric when
/// `Σ` and `Λ` commute.
pub fn extrapolation_control(
    sigma: &SymMatrix,
    lambda: &SymMatrix,
    mode: PinvMode,
) -> Result<(SymMatrix, Matrix)> {
    if sigma.dim() != lambda.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            sigma.dim(),
            lambda.dim()
        )));
    }
    let d = sigma.dim();
    let sig_eig = spectral_decompose(sigma)?;
    let sig_tol = default_clip_tol(sig_eig.max_eigenvalue());
    if sig_eig.min_eigenvalue() < -sig_tol {
        return Err(Error::NotPsd {
            min_eigenvalue: sig_eig.min_eigenvalue(),
        });
    }
    let clip = |l: f64, tol: f64| if l <= tol { 0.0 } else { l };
    let sig_half = sig_eig.apply(|l| clip(l, sig_tol).sqrt());
    let inner = lambda.congruence(sig_half.as_matrix());
    let inner_eig = spectral_decompose(&inner)?;
    let inner_tol = default_clip_tol(inner_eig.max_eigenvalue());
    if inner_eig.min_eigenvalue() < -inner_tol {
        return Err(Error::NotPsd {
            min_eigenvalue: inner_eig.min_eigenvalue(),
        });
    }
    let (c, inner_pow) = match mode {
        PinvMode::Additive { delta } => {
            if !(delta > 0.0) || !delta.is_finite() {
                return Err(Error::invalid(format!("delta must be positive, got {delta}")));
            }
            let d2 = delta * delta;
            (
                sig_eig.apply(|l| 1.0 / (clip(l, sig_tol) + d2).sqrt()),
                inner_eig.apply(|l| 1.0 / (clip(l, inner_tol) + d2).sqrt()),
            )
        }
        PinvMode::Clip { clip_tol } => {
            if !(clip_tol >= 0.0) {
                return Err(Error::invalid("clip_tol must be nonnegative"));
            }
            let inv_sqrt = |l: f64| {
                if l <= clip_tol {
                    0.0
                } else {
                    1.0 / l.sqrt()
                }
            };
            (sig_eig.apply(inv_sqrt), inner_eig.apply(inv_sqrt))
        }
    };
    debug_assert_eq!(c.dim(), d);
    let dmat = sig_half.as_matrix() * inner_pow.as_matrix();
    Ok((c, dmat))
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.singular_values().iter().fold(0.0_f64, |a, &b| a.max(b))
}
