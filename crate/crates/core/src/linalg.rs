//! Dense row-major `f64` matrices and the handful of kernels the editor needs.
//!
//! Every reduction runs in a fixed loop order so results are bit-reproducible
//! across calls and threads.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// `A · B`, accumulating over the inner index in ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `Aᵀ · B` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_tn {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &aki) in a_row.iter().enumerate() {
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `A · Bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

/// Dot product with four interleaved accumulators, combined in a fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Lower-triangular Cholesky factor `L` with `M = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    pub fn factor(m: &Matrix) -> Result<Self> {
        let n = m.rows;
        if m.cols != n {
            return Err(Error::Shape(format!(
                "cholesky needs a square matrix, got {}x{}",
                m.rows, m.cols
            )));
        }
        if !m.is_finite() {
            return Err(Error::NonFinite("cholesky input"));
        }
        for i in 0..n {
            for j in 0..i {
                if (m.get(i, j) - m.get(j, i)).abs() > 1e-12 {
                    return Err(Error::Shape(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = m.get(j, j);
            for k in 0..j {
                let v = l.get(j, k);
                diag -= v * v;
            }
            if diag <= 0.0 || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    index: j,
                    value: diag,
                });
            }
            let ljj = diag.sqrt();
            l.set(j, j, ljj);
            for i in (j + 1)..n {
                let mut s = m.get(i, j);
                let (ri, rj) = (i * n, j * n);
                for k in 0..j {
                    s -= l.data[ri + k] * l.data[rj + k];
                }
                l.set(i, j, s / ljj);
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Solves `M·X = B` by forward then backward substitution.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.lower.rows;
        if b.rows != n {
            return Err(Error::Shape(format!(
                "right-hand side has {} rows, system has {n}",
                b.rows
            )));
        }
        let l = &self.lower;
        let mut x = b.clone();
        let w = b.cols;
        // L·Y = B
        for i in 0..n {
            for k in 0..i {
                let lik = l.get(i, k);
                if lik != 0.0 {
                    for c in 0..w {
                        x.data[i * w + c] -= lik * x.data[k * w + c];
                    }
                }
            }
            let lii = l.get(i, i);
            for c in 0..w {
                x.data[i * w + c] /= lii;
            }
        }
        // Lᵀ·X = Y
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = l.get(k, i);
                if lki != 0.0 {
                    for c in 0..w {
                        x.data[i * w + c] -= lki * x.data[k * w + c];
                    }
                }
            }
            let lii = l.get(i, i);
            for c in 0..w {
                x.data[i * w + c] /= lii;
            }
        }
        Ok(x)
    }

    /// Cheap lower bound on the 2-norm condition number: `(max Lᵢᵢ / min Lᵢᵢ)²`.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.lower.rows;
        if n == 0 {
            return 1.0;
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = self.lower.get(i, i);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (hi / lo).powi(2)
    }
}

/// Solves `M·X = B` for symmetric positive-definite `M`.
pub fn solve_spd(m: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !b.is_finite() {
        return Err(Error::NonFinite("solve_spd right-hand side"));
    }
    Cholesky::factor(m)?.solve(b)
}

/// Result of a ridge solve together with its conditioning telemetry.
#[derive(Debug, Clone)]
pub struct RidgeSolution {
    pub delta: Matrix,
    pub condition_estimate: f64,
}

/// Minimizer of `‖H·Δ − V‖² + ‖Δ‖²`, i.e. `Δ = (HᵀH + I)⁻¹ HᵀV`.
pub fn ridge_update(h: &Matrix, v: &Matrix) -> Result<Matrix> {
    ridge_solve(h, v).map(|s| s.delta)
}

pub fn ridge_solve(h: &Matrix, v: &Matrix) -> Result<RidgeSolution> {
    if h.rows == 0 || v.rows == 0 {
        return Err(Error::EmptyBatch("ridge update needs at least one row"));
    }
    if h.rows != v.rows {
        return Err(Error::Shape(format!(
            "H has {} rows but V has {}",
            h.rows, v.rows
        )));
    }
    if !h.is_finite() || !v.is_finite() {
        return Err(Error::NonFinite("ridge inputs"));
    }
    let mut gram = matmul_tn(h, h)?;
    let d = gram.rows;
    for i in 0..d {
        gram.data[i * d + i] += 1.0;
    }
    let rhs = matmul_tn(h, v)?;
    let chol = Cholesky::factor(&gram)?;
    let delta = chol.solve(&rhs)?;
    Ok(RidgeSolution {
        delta,
        condition_estimate: chol.condition_estimate(),
    })
}

/// First-order optimality residual `‖Hᵀ(HΔ − V) + Δ‖_F` of the ridge objective.
pub fn ridge_residual(h: &Matrix, v: &Matrix, delta: &Matrix) -> Result<f64> {
    let fit = matmul(h, delta)?.sub(v)?;
    let grad = matmul_tn(h, &fit)?.add(delta)?;
    Ok(grad.frobenius_norm())
}

/// Tolerance the optimality residual must meet: `1e-8·(‖H‖_F‖V‖_F + 1)`.
pub fn ridge_tolerance(h: &Matrix, v: &Matrix) -> f64 {
    1e-8 * (h.frobenius_norm() * v.frobenius_norm() + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// Gauss-Jordan inverse with partial pivoting.
    fn gauss_jordan_inverse(m: &Matrix) -> Matrix {
        let n = m.rows();
        let mut a = m.clone();
        let mut inv = Matrix::identity(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| a.get(x, col).abs().total_cmp(&a.get(y, col).abs()))
                .unwrap();
            for j in 0..n {
                let (t1, t2) = (a.get(col, j), a.get(pivot, j));
                a.set(col, j, t2);
                a.set(pivot, j, t1);
                let (t1, t2) = (inv.get(col, j), inv.get(pivot, j));
                inv.set(col, j, t2);
                inv.set(pivot, j, t1);
            }
            let p = a.get(col, col);
            for j in 0..n {
                a.set(col, j, a.get(col, j) / p);
                inv.set(col, j, inv.get(col, j) / p);
            }
            for r in 0..n {
                if r != col {
                    let f = a.get(r, col);
                    for j in 0..n {
                        a.set(r, j, a.get(r, j) - f * a.get(col, j));
                        inv.set(r, j, inv.get(r, j) - f * inv.get(col, j));
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(3, 2, &mut rng);
        assert_eq!(matmul(&Matrix::identity(3), &b).unwrap(), b);
        let b2 = random(2, 2, &mut rng);
        assert_eq!(matmul(&Matrix::zeros(2, 2), &b2).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(5, 4, &mut rng);
        let b = random(4, 3, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive(&a, &b);
        assert_eq!(fast.as_slice(), slow.as_slice());
        assert_eq!(matmul_tn(&a.transpose(), &b).unwrap().as_slice(), slow.as_slice());
    }

    #[test]
    fn matmul_shape_error() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn solve_spd_simple_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random(3, 2, &mut rng);
        assert_eq!(solve_spd(&Matrix::identity(3), &b).unwrap(), b);
        let two = Matrix::identity(3).scale(2.0);
        let x = solve_spd(&two, &Matrix::identity(3)).unwrap();
        assert!(x.sub(&Matrix::identity(3).scale(0.5)).unwrap().max_abs() <= 1e-15);
    }

    #[test]
    fn solve_spd_matches_gauss_jordan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(6, 4, &mut rng);
        let mut m = matmul_tn(&a, &a).unwrap();
        for i in 0..4 {
            m.set(i, i, m.get(i, i) + 1.0);
        }
        let b = random(4, 3, &mut rng);
        let x = solve_spd(&m, &b).unwrap();
        let oracle = matmul(&gauss_jordan_inverse(&m), &b).unwrap();
        assert!(x.sub(&oracle).unwrap().max_abs() <= 1e-9);
        let resid = matmul(&m, &x).unwrap().sub(&b).unwrap().frobenius_norm();
        assert!(resid <= 1e-9 * (m.frobenius_norm() * b.frobenius_norm() + 1.0));
    }

    #[test]
    fn solve_spd_rejects_indefinite() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, -1.0]]).unwrap();
        match solve_spd(&m, &Matrix::identity(2)) {
            Err(Error::NotPositiveDefinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ridge_zero_target_and_identity_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random(7, 4, &mut rng);
        assert_eq!(ridge_update(&h, &Matrix::zeros(7, 3)).unwrap(), Matrix::zeros(4, 3));

        let v = random(4, 4, &mut rng);
        let delta = ridge_update(&Matrix::identity(4), &v).unwrap();
        assert!(delta.sub(&v.scale(0.5)).unwrap().max_abs() <= 1e-15);
    }

    #[test]
    fn ridge_matches_gradient_descent_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random(8, 4, &mut rng);
        let v = random(8, 3, &mut rng);
        let delta = ridge_update(&h, &v).unwrap();

        // Plain gradient descent on ‖HΔ − V‖² + ‖Δ‖² with step 1/L.
        let gram = matmul_tn(&h, &h).unwrap();
        let lipschitz = 2.0 * (gram.frobenius_norm() + 1.0);
        let step = 1.0 / lipschitz;
        let mut x = Matrix::zeros(4, 3);
        for _ in 0..20_000 {
            let fit = matmul(&h, &x).unwrap().sub(&v).unwrap();
            let grad = matmul_tn(&h, &fit).unwrap().add(&x).unwrap().scale(2.0);
            x = x.sub(&grad.scale(step)).unwrap();
        }
        assert!(delta.sub(&x).unwrap().max_abs() <= 1e-6);
    }

    #[test]
    fn ridge_errors() {
        assert!(matches!(
            ridge_update(&Matrix::zeros(0, 3), &Matrix::zeros(0, 2)),
            Err(Error::EmptyBatch(_))
        ));
        assert!(matches!(
            ridge_update(&Matrix::zeros(3, 3), &Matrix::zeros(2, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn operations_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random(9, 5, &mut rng);
        let v = random(9, 2, &mut rng);
        let a = ridge_update(&h, &v).unwrap();
        let b = ridge_update(&h, &v).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    proptest::proptest! {
        #[test]
        fn ridge_optimality_holds(
            seed in 0u64..10_000,
            n in proptest::sample::select(vec![1usize, 4, 64]),
            d in proptest::sample::select(vec![1usize, 8, 48]),
            dp in 1usize..17,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random(n, d, &mut rng).scale(3.0);
            let v = random(n, dp, &mut rng);
            let delta = ridge_update(&h, &v).unwrap();
            let r = ridge_residual(&h, &v, &delta).unwrap();
            proptest::prop_assert!(r <= ridge_tolerance(&h, &v), "residual {r}");
        }

        #[test]
        fn solve_then_multiply_reproduces_rhs(seed in 0u64..10_000, n in 1usize..12, w in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(n + 2, n, &mut rng);
            let mut m = matmul_tn(&a, &a).unwrap();
            for i in 0..n {
                m.set(i, i, m.get(i, i) + 0.5);
            }
            let b = random(n, w, &mut rng);
            let x = solve_spd(&m, &b).unwrap();
            let resid = matmul(&m, &x).unwrap().sub(&b).unwrap().frobenius_norm();
            proptest::prop_assert!(resid <= 1e-9 * (m.frobenius_norm() * b.frobenius_norm() + 1.0));
        }
    }
}
