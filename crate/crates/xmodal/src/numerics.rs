//! Dense vector/matrix primitives: pooling, matrix-vector products, cosine
//! similarity, and a finite-difference gradient checker.
//!
//! Everything computes in f64 even though embedding files store f32; the extra
//! precision keeps the gradient checks tight.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

/// Row-major dense matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Panics if the dimensions are
    /// empty or do not match the data length.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "all rows must have identical length");
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// y = M x for a column vector x of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// y = M^T g for a vector g of length `rows`.
    pub fn matvec_transpose(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.rows, "matvec_transpose dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &gr) in g.iter().enumerate() {
            axpy(&mut out, gr, self.row(r));
        }
        out
    }

    /// M += u v^T (outer-product accumulation, used by backward passes).
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows, "add_outer row dimension mismatch");
        assert_eq!(v.len(), self.cols, "add_outer col dimension mismatch");
        for (r, &scale) in u.iter().enumerate() {
            axpy(self.row_mut(r), scale, v);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// out += alpha * x
pub fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Column-wise mean of a T x F matrix: component j is the average of column j.
pub fn mean_pool(seq: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; seq.cols()];
    for r in 0..seq.rows() {
        axpy(&mut out, 1.0, seq.row(r));
    }
    let inv = 1.0 / seq.rows() as f64;
    for v in &mut out {
        *v *= inv;
    }
    out
}

/// Cosine similarity with the degenerate (zero-norm) case mapped to 0.
///
/// Returns the similarity and a flag that is true when either vector has zero
/// norm. Zero vectors happen legitimately early in training (ReLU adapters can
/// emit them), so this is a defined result rather than an error.
pub fn cosine_similarity_flagged(a: &[f64], b: &[f64]) -> (f64, bool) {
    assert_eq!(a.len(), b.len(), "cosine dimension mismatch");
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    (dot(a, b) / (na * nb), false)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    cosine_similarity_flagged(a, b).0
}

/// Gradient of cosine_similarity(a, b) with respect to `a`.
///
/// Zero when either vector is degenerate, matching the defined-zero similarity.
pub fn cosine_gradient_wrt_a(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return vec![0.0; a.len()];
    }
    let s = dot(a, b) / (na * nb);
    let inv_ab = 1.0 / (na * nb);
    let inv_aa = s / (na * na);
    a.iter()
        .zip(b)
        .map(|(ai, bi)| bi * inv_ab - ai * inv_aa)
        .collect()
}

/// Compares an analytic gradient against central finite differences.
///
/// Uses a per-coordinate step h = 1e-4 * max(1, |x_i|) and returns
/// max_i |g_num - g_an| / max(1, |g_num|, |g_an|).
pub fn check_gradient<F>(
    mut f: F,
    x: &[f64],
    analytic_grad: &[f64],
) -> Result<f64, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic_grad.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut max_err: f64 = 0.0;
    for i in 0..x.len() {
        let h = 1e-4 * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let f_plus = f(&probe);
        probe[i] = x[i] - h;
        let f_minus = f(&probe);
        probe[i] = x[i];
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(NumericsError::NumericalFailure(format!(
                "non-finite function value near coordinate {i}"
            )));
        }
        let g_num = (f_plus - f_minus) / (2.0 * h);
        let g_an = analytic_grad[i];
        let err = (g_num - g_an).abs() / g_num.abs().max(g_an.abs()).max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_pool_arithmetic_mean() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]);
        assert_eq!(mean_pool(&m), vec![2.0, 4.0]);
    }

    #[test]
    fn mean_pool_single_row_is_identity() {
        let m = Matrix::from_rows(&[vec![7.0, 7.0, 7.0]]);
        assert_eq!(mean_pool(&m), vec![7.0, 7.0, 7.0]);
    }

    #[test]
    fn mean_pool_matches_summation_oracle() {
        // Brute-force oracle: sum each column with a plain accumulator loop.
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| next()).collect()).collect();
        let m = Matrix::from_rows(&rows);
        let pooled = mean_pool(&m);
        for j in 0..3 {
            let mut sum = 0.0;
            for row in &rows {
                sum += row[j];
            }
            assert!((pooled[j] - sum / 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn cosine_self_similarity_is_one() {
        let v = [3.0, 4.0];
        assert!((cosine_similarity(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_direct_evaluation() {
        // dot = 4, norms sqrt(5)*sqrt(5) = 5
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_flagged_zero() {
        let (s, degenerate) = cosine_similarity_flagged(&[0.0, 0.0], &[1.0, 2.0]);
        assert_eq!(s, 0.0);
        assert!(degenerate);
        let (s, degenerate) = cosine_similarity_flagged(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(s, 0.0);
        assert!(degenerate);
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let a = [0.3, -1.2, 0.7];
        let b = [1.1, 0.4, -0.9];
        let grad = cosine_gradient_wrt_a(&a, &b);
        let err = check_gradient(|x| cosine_similarity(x, &b), &a, &grad).unwrap();
        assert!(err < 1e-6, "cosine gradient error {err}");
    }

    #[test]
    fn check_gradient_quadratic() {
        let x = [1.0, -2.0];
        let analytic = [2.0, -4.0];
        let err = check_gradient(|v| dot(v, v), &x, &analytic).unwrap();
        assert!(err < 1e-6, "quadratic error {err}");
    }

    #[test]
    fn check_gradient_constant() {
        let x = [0.5, 2.5, -1.0];
        let analytic = [0.0; 3];
        let err = check_gradient(|_| 42.0, &x, &analytic).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn check_gradient_rejects_non_finite() {
        let x = [1.0];
        let res = check_gradient(|_| f64::NAN, &x, &[0.0]);
        assert!(matches!(res, Err(NumericsError::NumericalFailure(_))));
    }

    #[test]
    fn matvec_transpose_agrees_with_direct() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let g = [10.0, 100.0];
        assert_eq!(m.matvec_transpose(&g), vec![410.0, 520.0, 630.0]);
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_bounded(
            (a, b) in (1usize..8).prop_flat_map(|n| (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(-10.0f64..10.0, n),
            )),
        ) {
            let s_ab = cosine_similarity(&a, &b);
            let s_ba = cosine_similarity(&b, &a);
            prop_assert_eq!(s_ab, s_ba);
            prop_assert!(s_ab.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn cosine_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 3),
            b in proptest::collection::vec(-10.0f64..10.0, 3),
            c in 0.001f64..1000.0,
        ) {
            let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
            let s1 = cosine_similarity(&a, &b);
            let s2 = cosine_similarity(&scaled, &b);
            prop_assert!((s1 - s2).abs() < 1e-9);
        }

        #[test]
        fn mean_pool_is_linear(
            rows_a in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 3),
            rows_b in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 3),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let a = Matrix::from_rows(&rows_a);
            let b = Matrix::from_rows(&rows_b);
            let combined_rows: Vec<Vec<f64>> = rows_a
                .iter()
                .zip(&rows_b)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| alpha * x + beta * y).collect())
                .collect();
            let combined = Matrix::from_rows(&combined_rows);
            let lhs = mean_pool(&combined);
            let pa = mean_pool(&a);
            let pb = mean_pool(&b);
            for j in 0..4 {
                prop_assert!((lhs[j] - (alpha * pa[j] + beta * pb[j])).abs() < 1e-9);
            }
        }
    }
}
