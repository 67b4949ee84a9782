//! Dense linear algebra: SVD with explicit rank handling, pseudo-inverses,
//! null-space projectors, Kronecker products, and matrix CSV I/O.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Upper bound on the entries of any dense Kronecker product we materialize.
pub const DEFAULT_KRON_CAP: usize = 1 << 27;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("SVD did not converge")]
    SvdNoConvergence,
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{rows}x{cols} product exceeds the cap of {cap} entries")]
    TooLarge { rows: usize, cols: usize, cap: usize },
    #[error("singular linear system")]
    Singular,
    #[error("malformed matrix CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// How singular values are classified as zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankTol {
    /// `sigma <= tol * sigma_max`
    Relative(f64),
    /// `sigma <= tol`
    Absolute(f64),
    /// `sigma <= tol * max(1, sigma_max)`. Behaves like `Relative` for
    /// well-scaled matrices but refuses to invert pure rounding noise.
    Scaled(f64),
}

impl Default for RankTol {
    fn default() -> Self {
        RankTol::Relative(1e-10)
    }
}

impl RankTol {
    pub fn threshold(self, sigma_max: f64) -> f64 {
        match self {
            RankTol::Relative(t) => t * sigma_max,
            RankTol::Absolute(t) => t,
            RankTol::Scaled(t) => t * sigma_max.max(1.0),
        }
    }
}

/// Full SVD `M = U diag(s) V^T` with `U` m×m and `V` n×n.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    /// Descending, length `min(m, n)`.
    pub s: Vec<f64>,
    pub v: Matrix,
    pub rank: usize,
    pub threshold: f64,
}

impl SvdFactors {
    pub fn sigma_max(&self) -> f64 {
        self.s.first().copied().unwrap_or(0.0)
    }

    /// Orthonormal basis of the row space (first `rank` columns of V).
    pub fn row_basis(&self) -> Matrix {
        self.v.columns(0, self.rank).into_owned()
    }

    /// Orthonormal basis of the null space.
    pub fn null_basis(&self) -> Matrix {
        let n = self.v.ncols();
        self.v.columns(self.rank, n - self.rank).into_owned()
    }
}

pub fn ensure_finite(m: &Matrix) -> Result<()> {
    for (j, col) in m.column_iter().enumerate() {
        for (i, x) in col.iter().enumerate() {
            if !x.is_finite() {
                return Err(LinalgError::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

fn to_faer(m: &Matrix) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn svd(m: &Matrix, tol: RankTol) -> Result<SvdFactors> {
    ensure_finite(m)?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(SvdFactors {
            u: Matrix::identity(rows, rows),
            s: Vec::new(),
            v: Matrix::identity(cols, cols),
            rank: 0,
            threshold: 0.0,
        });
    }
    let f = to_faer(m).svd().map_err(|_| LinalgError::SvdNoConvergence)?;
    let (fu, fv, fs) = (f.U(), f.V(), f.S().column_vector());
    let u = Matrix::from_fn(rows, rows, |i, j| fu[(i, j)]);
    let v = Matrix::from_fn(cols, cols, |i, j| fv[(i, j)]);
    let s: Vec<f64> = (0..rows.min(cols)).map(|i| fs[i]).collect();
    let sigma_max = s.first().copied().unwrap_or(0.0);
    // Cheap guard against a silently inaccurate decomposition.
    let k = s.len();
    let mut us = u.columns(0, k).into_owned();
    for (j, mut col) in us.column_iter_mut().enumerate() {
        col *= s[j];
    }
    let err = (us * v.columns(0, k).transpose() - m).amax();
    if err > 1e-10 * sigma_max.max(1.0) * (rows.max(cols) as f64).sqrt() {
        return Err(LinalgError::SvdNoConvergence);
    }
    let threshold = tol.threshold(sigma_max);
    let rank = s.iter().take_while(|&&x| x > threshold).count();
    Ok(SvdFactors {
        u,
        s,
        v,
        rank,
        threshold,
    })
}

/// Descending singular values.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    ensure_finite(m)?;
    if m.is_empty() {
        return Ok(Vec::new());
    }
    to_faer(m)
        .singular_values()
        .map_err(|_| LinalgError::SvdNoConvergence)
}

pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    Ok(singular_values(m)?.into_iter().fold(0.0, f64::max))
}

pub fn pinv(m: &Matrix, tol: RankTol) -> Result<Matrix> {
    let f = svd(m, tol)?;
    Ok(pinv_from(&f))
}

pub fn pinv_from(f: &SvdFactors) -> Matrix {
    let r = f.rank;
    let mut vr = f.v.columns(0, r).into_owned();
    for (j, mut col) in vr.column_iter_mut().enumerate() {
        col /= f.s[j];
    }
    vr * f.u.columns(0, r).transpose()
}

/// `I - M^+ M`, the orthogonal projector onto the null space of `M`.
pub fn null_projector(m: &Matrix, tol: RankTol) -> Result<Matrix> {
    let f = svd(m, tol)?;
    Ok(null_projector_from(&f))
}

pub fn null_projector_from(f: &SvdFactors) -> Matrix {
    let n = f.v.nrows();
    let vr = f.row_basis();
    Matrix::identity(n, n) - &vr * vr.transpose()
}

pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    kron_capped(a, b, DEFAULT_KRON_CAP)
}

pub fn kron_capped(a: &Matrix, b: &Matrix, cap: usize) -> Result<Matrix> {
    let rows = a.nrows() * b.nrows();
    let cols = a.ncols() * b.ncols();
    if rows.saturating_mul(cols) > cap {
        return Err(LinalgError::TooLarge { rows, cols, cap });
    }
    Ok(a.kronecker(b))
}

pub fn kron_all(factors: &[Matrix], cap: usize) -> Result<Matrix> {
    let mut out = Matrix::identity(1, 1);
    for f in factors {
        out = kron_capped(&out, f, cap)?;
    }
    Ok(out)
}

/// `(A ⊗ B) M` without forming the Kronecker product.
pub fn kron_matmul(a: &Matrix, b: &Matrix, m: &Matrix) -> Result<Matrix> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    if m.nrows() != ac * bc {
        return Err(LinalgError::DimensionMismatch {
            op: "kron_matmul",
            left: (ar * br, ac * bc),
            right: m.shape(),
        });
    }
    let bt = b.transpose();
    let mut out = Matrix::zeros(ar * br, m.ncols());
    for c in 0..m.ncols() {
        // Column c reshaped so that y[j, l] = m[j * bc + l, c].
        let y = Matrix::from_fn(ac, bc, |j, l| m[(j * bc + l, c)]);
        let z = a * y * &bt;
        for i in 0..ar {
            for k in 0..br {
                out[(i * br + k, c)] = z[(i, k)];
            }
        }
    }
    Ok(out)
}

/// `M (A ⊗ B)` without forming the Kronecker product.
pub fn matmul_kron(m: &Matrix, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Ok(kron_matmul(&a.transpose(), &b.transpose(), &m.transpose())?.transpose())
}

pub fn fmt_f64(x: f64) -> String {
    // Debug formatting is the shortest string that round-trips exactly.
    format!("{x:?}")
}

pub fn write_matrix_csv<W: Write>(m: &Matrix, w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for i in 0..m.nrows() {
        wr.write_record(m.row(i).iter().map(|&x| fmt_f64(x)))
            .map_err(|e| LinalgError::Csv(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(r: R) -> Result<Matrix> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut data = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| LinalgError::Csv(e.to_string()))?;
        let expected = *ncols.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(LinalgError::Csv(format!(
                "row {i} has {} fields, expected {expected}",
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            let x: f64 = field
                .parse()
                .map_err(|_| LinalgError::Csv(format!("bad number {field:?} at ({i}, {j})")))?;
            data.push(x);
        }
        nrows += 1;
    }
    let ncols = ncols.unwrap_or(0);
    let m = Matrix::from_row_slice(nrows, ncols, &data);
    ensure_finite(&m)?;
    Ok(m)
}

pub fn save_matrix(m: &Matrix, path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_matrix_csv(m, std::io::BufWriter::new(f))
}

pub fn load_matrix(path: &std::path::Path) -> Result<Matrix> {
    read_matrix_csv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn max_abs(m: &Matrix) -> f64 {
        m.iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
    }

    fn arb_matrix(max_dim: usize) -> impl Strategy<Value = Matrix> {
        (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
            prop::collection::vec(-2.0..2.0f64, r * c)
                .prop_map(move |v| Matrix::from_row_slice(r, c, &v))
        })
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let f = svd(&Matrix::zeros(2, 2), RankTol::default()).unwrap();
        assert_eq!(f.rank, 0);
        assert_eq!(pinv(&Matrix::zeros(2, 2), RankTol::default()).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn tiny_singular_value_is_dropped() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 1e-16]));
        let f = svd(&m, RankTol::Relative(1e-12)).unwrap();
        assert_eq!(f.rank, 1);
    }

    #[test]
    fn scaled_tolerance_ignores_noise() {
        let m = Matrix::from_row_slice(2, 2, &[1e-17, 0.0, 0.0, 3e-18]);
        assert_eq!(svd(&m, RankTol::Relative(1e-10)).unwrap().rank, 2);
        assert_eq!(svd(&m, RankTol::Scaled(1e-10)).unwrap().rank, 0);
    }

    #[test]
    fn nan_is_rejected() {
        let mut m = Matrix::identity(3, 3);
        m[(1, 2)] = f64::NAN;
        assert!(matches!(
            svd(&m, RankTol::default()),
            Err(LinalgError::NonFinite { row: 1, col: 2 })
        ));
    }

    #[test]
    fn rectangular_factors_are_full() {
        let wide = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        for m in [wide.clone(), wide.transpose()] {
            let f = svd(&m, RankTol::default()).unwrap();
            let (r, c) = m.shape();
            assert_eq!(f.u.shape(), (r, r));
            assert_eq!(f.v.shape(), (c, c));
            assert!(max_abs(&(f.u.transpose() * &f.u - Matrix::identity(r, r))) < 1e-12);
            assert!(max_abs(&(f.v.transpose() * &f.v - Matrix::identity(c, c))) < 1e-12);
            let mut s = Matrix::zeros(r, c);
            for (i, &x) in f.s.iter().enumerate() {
                s[(i, i)] = x;
            }
            assert!(max_abs(&(&f.u * s * f.v.transpose() - &m)) < 1e-12);
        }
    }

    #[test]
    fn kron_matches_definition() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = Matrix::from_row_slice(2, 3, &[0.0, 1.0, 2.0, -1.0, 0.5, 0.25]);
        let k = kron(&a, &b).unwrap();
        assert_eq!(k.shape(), (4, 6));
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    for q in 0..3 {
                        assert_eq!(k[(i * 2 + p, j * 3 + q)], a[(i, j)] * b[(p, q)]);
                    }
                }
            }
        }
        assert!(matches!(
            kron_capped(&a, &b, 10),
            Err(LinalgError::TooLarge { rows: 4, cols: 6, cap: 10 })
        ));
    }

    #[test]
    fn kron_matmul_matches_dense() {
        let a = Matrix::from_fn(3, 2, |i, j| (i as f64) - 0.7 * j as f64);
        let b = Matrix::from_fn(2, 4, |i, j| 0.3 * i as f64 + (j as f64).sin());
        let m = Matrix::from_fn(8, 3, |i, j| ((i * 3 + j) as f64).cos());
        let dense = kron(&a, &b).unwrap() * &m;
        assert!(max_abs(&(kron_matmul(&a, &b, &m).unwrap() - dense)) < 1e-12);
        let l = Matrix::from_fn(5, 6, |i, j| ((i + 2 * j) as f64).sin());
        let dense = &l * kron(&a, &b).unwrap();
        assert!(max_abs(&(matmul_kron(&l, &a, &b).unwrap() - dense)) < 1e-12);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = Matrix::from_row_slice(2, 3, &[0.1, 1e-300, -3.0, 1.0 / 3.0, 2.5e17, 0.0]);
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        let back = read_matrix_csv(&buf[..]).unwrap();
        assert_eq!(back, m);
        assert!(read_matrix_csv("1,2\n3\n".as_bytes()).is_err());
        assert!(read_matrix_csv("1,x\n".as_bytes()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn penrose_conditions(m in arb_matrix(6)) {
            let p = pinv(&m, RankTol::default()).unwrap();
            let scale = 1.0 + max_abs(&m) * max_abs(&m);
            prop_assert!(max_abs(&(&m * &p * &m - &m)) < 1e-9 * scale);
            prop_assert!(max_abs(&(&p * &m * &p - &p)) < 1e-9 * (1.0 + max_abs(&p)).powi(2));
            let mp = &m * &p;
            let pm = &p * &m;
            prop_assert!(max_abs(&(&mp - mp.transpose())) < 1e-9 * scale);
            prop_assert!(max_abs(&(&pm - pm.transpose())) < 1e-9 * scale);
        }

        #[test]
        fn projector_is_idempotent_and_annihilates(m in arb_matrix(6)) {
            let p = null_projector(&m, RankTol::default()).unwrap();
            prop_assert!(max_abs(&(&p * &p - &p)) < 1e-10);
            prop_assert!(max_abs(&(&p - p.transpose())) < 1e-12);
            prop_assert!(max_abs(&(&m * &p)) < 1e-9 * (1.0 + max_abs(&m)));
        }

        #[test]
        fn factors_reconstruct_singular_input(
            a in prop::collection::vec(-1.0..1.0f64, 24),
            b in prop::collection::vec(-1.0..1.0f64, 24),
        ) {
            let l = Matrix::from_row_slice(6, 4, &a);
            let m = &l * Matrix::from_row_slice(4, 6, &b) - l.column(0) * l.column(0).transpose();
            let f = svd(&m, RankTol::default()).unwrap();
            let s = Matrix::from_diagonal(&Vector::from_vec(f.s.clone()));
            prop_assert!(max_abs(&(&f.u * s * f.v.transpose() - &m)) < 1e-12);
            let p = pinv_from(&f);
            prop_assert!(max_abs(&(&m * &p * &m - &m)) < 1e-9);
        }

        #[test]
        fn rank_deficient_products_have_expected_rank(
            a in prop::collection::vec(-1.0..1.0f64, 12),
            b in prop::collection::vec(-1.0..1.0f64, 12),
        ) {
            // (4x3)(3x4) has rank at most 3.
            let m = Matrix::from_row_slice(4, 3, &a) * Matrix::from_row_slice(3, 4, &b);
            let f = svd(&m, RankTol::Relative(1e-10)).unwrap();
            prop_assert!(f.rank <= 3);
        }
    }
}
