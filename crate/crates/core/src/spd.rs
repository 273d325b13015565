//! Symmetric positive-definite matrices and the affine-invariant geometry on them.
//!
//! Every matrix function here goes through a full symmetric eigendecomposition:
//! the matrices we deal with are channel covariances (at most a few dozen
//! channels), so the decomposition is cheap and gives deterministic results.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use nalgebra::DMatrix as Matrix;

/// Absolute tolerance on `|m[i,j] - m[j,i]|` accepted as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Smallest admissible `min_eig / max_eig` ratio for an [`SpdMatrix`].
pub const EIGEN_FLOOR: f64 = 1e-12;

const EIG_EPS: f64 = 1e-15;
const EIG_MAX_ITER: usize = 10_000;

/// A validated symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpdRepr", into = "SpdRepr")]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    /// Validates symmetry and positive definiteness, then stores an exactly
    /// symmetrized copy.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&m)?;
        let m = symmetrize(&m);
        let eig = sym_eig(&m)?;
        let min = eig.values[0];
        let max = eig.values[eig.values.len() - 1];
        if min.is_nan() || min <= 0.0 || min < EIGEN_FLOOR * max {
            return Err(Error::NotPositiveDefinite(format!(
                "eigenvalues span [{min:e}, {max:e}]; smallest must exceed {EIGEN_FLOOR:e} x largest"
            )));
        }
        Ok(SpdMatrix(m))
    }

    pub fn identity(n: usize) -> Self {
        SpdMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Row-major constructor, mostly for tests and fixtures.
    pub fn from_row_slice(n: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::validation(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                entries.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, n, entries))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn eig(&self) -> SymEig {
        // Validated at construction, so the decomposition cannot fail on symmetry.
        sym_eig(&self.0).expect("validated SPD matrix decomposes")
    }

    pub fn sqrt(&self) -> DMatrix<f64> {
        self.eig().map(f64::sqrt)
    }

    pub fn inv_sqrt(&self) -> DMatrix<f64> {
        self.eig().map(|v| 1.0 / v.sqrt())
    }

    pub fn log(&self) -> DMatrix<f64> {
        self.eig().map(f64::ln)
    }

    pub fn inverse(&self) -> SpdMatrix {
        SpdMatrix(self.eig().map(|v| 1.0 / v))
    }

    pub fn powf(&self, t: f64) -> DMatrix<f64> {
        self.eig().map(|v| v.powf(t))
    }

    /// `W·self·Wᵀ` for an invertible `W`.
    pub fn congruence(&self, w: &DMatrix<f64>) -> Result<SpdMatrix> {
        if w.ncols() != self.dim() {
            return Err(Error::validation(format!(
                "congruence matrix has {} columns, expected {}",
                w.ncols(),
                self.dim()
            )));
        }
        SpdMatrix::new(w * &self.0 * w.transpose())
    }
}

impl AsRef<DMatrix<f64>> for SpdMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

#[derive(Serialize, Deserialize)]
struct SpdRepr {
    dim: usize,
    /// Row-major.
    entries: Vec<f64>,
}

impl TryFrom<SpdRepr> for SpdMatrix {
    type Error = Error;

    fn try_from(r: SpdRepr) -> Result<Self> {
        SpdMatrix::from_row_slice(r.dim, &r.entries)
    }
}

impl From<SpdMatrix> for SpdRepr {
    fn from(m: SpdMatrix) -> Self {
        let n = m.dim();
        let entries = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| m.0[(i, j)])
            .collect();
        SpdRepr { dim: n, entries }
    }
}

/// Symmetric eigendecomposition with eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors, one per column, matching `values`.
    pub vectors: DMatrix<f64>,
}

impl SymEig {
    /// Rebuilds `V·diag(f(λ))·Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, &v) in self.values.iter().enumerate() {
            let fv = f(v);
            scaled.column_mut(j).scale_mut(fv);
        }
        symmetrize(&(scaled * self.vectors.transpose()))
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::validation(format!(
            "expected a nonempty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    check_square(m)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("matrix has non-finite entries"));
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (m[(i, j)] - m[(j, i)]).abs();
            if gap > SYMMETRY_TOL {
                return Err(Error::validation(format!(
                    "matrix not symmetric: |m[{i},{j}] - m[{j},{i}]| = {gap:e}"
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
pub fn sym_eig(m: &DMatrix<f64>) -> Result<SymEig> {
    check_symmetric(m)?;
    let sym = symmetrize(m);
    let eig = SymmetricEigen::try_new(sym, EIG_EPS, EIG_MAX_ITER).ok_or_else(|| {
        Error::Numerical(format!(
            "symmetric eigendecomposition did not converge (n = {}, max |entry| = {:e})",
            m.nrows(),
            m.amax()
        ))
    })?;

    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEig { values, vectors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFn {
    Sqrt,
    InvSqrt,
    Log,
    Exp,
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
///
/// `Sqrt`, `InvSqrt` and `Log` require strictly positive eigenvalues; `Exp`
/// accepts any symmetric input.
pub fn matrix_fn(m: &DMatrix<f64>, f: MatrixFn) -> Result<DMatrix<f64>> {
    let eig = sym_eig(m)?;
    if f != MatrixFn::Exp {
        let min = eig.values[0];
        if min.is_nan() || min <= 0.0 {
            return Err(Error::Domain(format!(
                "{f:?} needs positive eigenvalues, smallest is {min:e}"
            )));
        }
    }
    Ok(match f {
        MatrixFn::Sqrt => eig.map(f64::sqrt),
        MatrixFn::InvSqrt => eig.map(|v| 1.0 / v.sqrt()),
        MatrixFn::Log => eig.map(f64::ln),
        MatrixFn::Exp => eig.map(f64::exp),
    })
}

fn check_same_dim(a: &SpdMatrix, b: &SpdMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Affine-invariant distance `‖log(A^{-1/2} B A^{-1/2})‖_F`.
pub fn riemannian_distance(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    check_same_dim(a, b)?;
    let isqrt = a.inv_sqrt();
    let inner = symmetrize(&(&isqrt * b.as_matrix() * &isqrt));
    let eig = sym_eig(&inner)?;
    let sum_sq: f64 = eig
        .values
        .iter()
        .map(|&v| {
            let l = v.ln();
            l * l
        })
        .sum();
    Ok(sum_sq.sqrt())
}

/// Point at fraction `t` along the geodesic from `a` to `b`:
/// `A^{1/2} (A^{-1/2} B A^{-1/2})^t A^{1/2}`.
pub fn geodesic(a: &SpdMatrix, b: &SpdMatrix, t: f64) -> Result<SpdMatrix> {
    check_same_dim(a, b)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::validation(format!(
            "geodesic parameter {t} outside [0, 1]"
        )));
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let eig = a.eig();
    let sqrt = eig.map(f64::sqrt);
    let isqrt = eig.map(|v| 1.0 / v.sqrt());
    let inner = symmetrize(&(&isqrt * b.as_matrix() * &isqrt));
    let inner_t = sym_eig(&inner)?.map(|v| v.powf(t));
    SpdMatrix::new(symmetrize(&(&sqrt * inner_t * &sqrt)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetOptions {
    /// Stop once the Frobenius norm of the tangent-space mean drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FrechetOptions {
    fn default() -> Self {
        FrechetOptions {
            tol: 1e-9,
            max_iter: 50,
        }
    }
}

/// Fréchet (Karcher) mean under the affine-invariant metric.
///
/// Fixed-point iteration started from the arithmetic mean. Fails with
/// [`Error::Convergence`] instead of returning an unconverged estimate.
pub fn frechet_mean(ms: &[SpdMatrix], opts: FrechetOptions) -> Result<SpdMatrix> {
    let first = ms
        .first()
        .ok_or_else(|| Error::validation("Fréchet mean of an empty set"))?;
    let n = first.dim();
    if let Some(bad) = ms.iter().find(|m| m.dim() != n) {
        return Err(Error::validation(format!(
            "dimension mismatch in Fréchet mean: {} vs {n}",
            bad.dim()
        )));
    }
    if ms.len() == 1 {
        return Ok(first.clone());
    }

    let count = ms.len() as f64;
    let arith = ms
        .iter()
        .fold(DMatrix::zeros(n, n), |acc, m| acc + m.as_matrix())
        / count;
    let mut mean = SpdMatrix::new(symmetrize(&arith))?;

    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let eig = mean.eig();
        let sqrt = eig.map(f64::sqrt);
        let isqrt = eig.map(|v| 1.0 / v.sqrt());

        let mut tangent = DMatrix::zeros(n, n);
        for m in ms {
            let whitened = symmetrize(&(&isqrt * m.as_matrix() * &isqrt));
            tangent += matrix_fn(&whitened, MatrixFn::Log)?;
        }
        tangent /= count;

        residual = tangent.norm();
        if residual < opts.tol {
            return Ok(mean);
        }
        let step = matrix_fn(&tangent, MatrixFn::Exp)?;
        mean = SpdMatrix::new(symmetrize(&(&sqrt * step * &sqrt)))?;
    }
    Err(Error::Convergence {
        iterations: opts.max_iter,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut impl Rng, n: usize) -> SpdMatrix {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SpdMatrix::new(symmetrize(
            &(&a * a.transpose() + DMatrix::identity(n, n) * 0.5),
        ))
        .unwrap()
    }

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn identity_eig() {
        let eig = sym_eig(&DMatrix::identity(3, 3)).unwrap();
        assert!(eig.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let gram = eig.vectors.transpose() * &eig.vectors;
        assert!(close(&gram, &DMatrix::identity(3, 3), 1e-12));
    }

    #[test]
    fn diagonal_eig_sorted() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let eig = sym_eig(&m).unwrap();
        assert_eq!(eig.values.as_slice(), &[1.0, 4.0]);
        assert!((eig.vectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((eig.vectors[(0, 1)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-2.0..2.0));
            let s = symmetrize(&a);
            let eig = sym_eig(&s).unwrap();
            assert!(close(&eig.map(|v| v), &s, 1e-8));
            let gram = eig.vectors.transpose() * &eig.vectors;
            assert!(close(&gram, &DMatrix::identity(8, 8), 1e-8));
            assert!(eig.values.as_slice().windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn non_symmetric_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(sym_eig(&m), Err(Error::Validation(_))));
        assert!(matches!(SpdMatrix::new(m), Err(Error::Validation(_))));
    }

    #[test]
    fn indefinite_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            SpdMatrix::new(m),
            Err(Error::NotPositiveDefinite(_))
        ));
        // Ill-conditioned beyond the eigenvalue floor.
        assert!(SpdMatrix::from_diagonal(&[1.0, 1e-13]).is_err());
    }

    #[test]
    fn matrix_functions_on_diagonals() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let s = matrix_fn(&m, MatrixFn::Sqrt).unwrap();
        assert!(close(
            &s,
            &DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]),
            1e-14
        ));
        let l = matrix_fn(&DMatrix::identity(4, 4), MatrixFn::Log).unwrap();
        assert!(l.norm() < 1e-15);
        let is = matrix_fn(&m, MatrixFn::InvSqrt).unwrap();
        assert!((is[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            matrix_fn(&m, MatrixFn::Log),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            matrix_fn(&m, MatrixFn::Sqrt),
            Err(Error::Domain(_))
        ));
        assert!(matrix_fn(&m, MatrixFn::Exp).is_ok());
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = random_spd(&mut rng, 6);
            let back = matrix_fn(&a.log(), MatrixFn::Exp).unwrap();
            assert!(close(&back, a.as_matrix(), 1e-8));
        }
    }

    #[test]
    fn distance_closed_forms() {
        let a = SpdMatrix::identity(2);
        assert_eq!(riemannian_distance(&a, &a).unwrap(), 0.0);
        let e2 = std::f64::consts::E.powi(2);
        let b = SpdMatrix::from_diagonal(&[e2, e2]).unwrap();
        let d = riemannian_distance(&a, &b).unwrap();
        assert!((d - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn distance_dimension_mismatch() {
        let r = riemannian_distance(&SpdMatrix::identity(2), &SpdMatrix::identity(3));
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn geodesic_endpoints_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(&mut rng, 4);
        let b = random_spd(&mut rng, 4);
        assert_eq!(geodesic(&a, &b, 0.0).unwrap(), a);
        assert_eq!(geodesic(&a, &b, 1.0).unwrap(), b);
        let g = geodesic(
            &SpdMatrix::from_diagonal(&[4.0]).unwrap(),
            &SpdMatrix::from_diagonal(&[16.0]).unwrap(),
            0.5,
        )
        .unwrap();
        assert!((g.as_matrix()[(0, 0)] - 8.0).abs() < 1e-12);
        assert!(geodesic(&a, &b, 1.5).is_err());
        assert!(geodesic(&a, &b, -0.1).is_err());
    }

    #[test]
    fn frechet_singleton_and_commuting() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(&mut rng, 3);
        assert_eq!(
            frechet_mean(std::slice::from_ref(&a), FrechetOptions::default()).unwrap(),
            a
        );

        let x = SpdMatrix::from_diagonal(&[1.0, 4.0]).unwrap();
        let y = SpdMatrix::from_diagonal(&[4.0, 1.0]).unwrap();
        let m = frechet_mean(&[x, y], FrechetOptions::default()).unwrap();
        assert!(close(
            m.as_matrix(),
            &DMatrix::from_diagonal_element(2, 2, 2.0),
            1e-9
        ));
    }

    #[test]
    fn frechet_two_points_is_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_spd(&mut rng, 8);
        let b = random_spd(&mut rng, 8);
        let m = frechet_mean(&[a.clone(), b.clone()], FrechetOptions::default()).unwrap();
        let mid = geodesic(&a, &b, 0.5).unwrap();
        assert!(close(m.as_matrix(), mid.as_matrix(), 1e-6));
    }

    #[test]
    fn frechet_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ms: Vec<_> = (0..5).map(|_| random_spd(&mut rng, 4)).collect();
        let opts = FrechetOptions {
            tol: 0.0,
            max_iter: 3,
        };
        match frechet_mean(&ms, opts) {
            Err(Error::Convergence {
                iterations,
                residual,
            }) => {
                assert_eq!(iterations, 3);
                assert!(residual.is_finite());
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
        assert!(frechet_mean(&[], FrechetOptions::default()).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_spd(&mut rng, 3);
        let json = serde_json::to_string(&a).unwrap();
        let back: SpdMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
        let bad = r#"{"dim":2,"entries":[1.0,2.0,2.0,1.0]}"#;
        assert!(serde_json::from_str::<SpdMatrix>(bad).is_err());
    }
}
