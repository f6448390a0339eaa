//! Dense row-major matrices, activations, the softmax cross-entropy loss,
//! the Adam optimizer and a central finite-difference gradient oracle.
//!
//! Everything here is plain `f64` arithmetic over owned buffers. Gradients in
//! the rest of the crate are derived by hand and checked against
//! [`finite_difference_gradient`].

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{CfcbmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CfcbmError::Dimension(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. Panics on ragged input; meant
    /// for literals in tests and small fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(CfcbmError::dims("hadamard", self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(CfcbmError::dims(
                "transposed matmul",
                (self.cols, self.rows),
                other.shape(),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &bj) in dst.iter_mut().zip(b) {
                    *d += ai * bj;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(CfcbmError::dims(
                "matmul with transpose",
                self.shape(),
                (other.cols, other.rows),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for j in 0..other.rows {
                out.data[r * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(CfcbmError::dims("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let dst = &mut out.data[r * b.cols..(r + 1) * b.cols];
        for (k, &aik) in a.row(r).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (d, &bkj) in dst.iter_mut().zip(b.row(k)) {
                *d += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Logistic function, evaluated on the branch that never exponentiates a
/// positive number.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Cross-entropy of `softmax(logits)` against `label`, plus its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(CfcbmError::Index(format!(
            "label {label} with {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_norm = max + sum_exp.ln();
    let loss = log_norm - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&l| (l - log_norm).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state for a single parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        AdamState {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step_count: 0,
            config,
        }
    }
}

pub fn adam_step(params: &mut Matrix, grads: &Matrix, state: &mut AdamState) -> Result<()> {
    if params.shape() != grads.shape() {
        return Err(CfcbmError::dims(
            "adam gradient",
            params.shape(),
            grads.shape(),
        ));
    }
    if params.shape() != state.first_moment.shape() {
        return Err(CfcbmError::dims(
            "adam moments",
            params.shape(),
            state.first_moment.shape(),
        ));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Central differences `(f(x + h·e) − f(x − h·e)) / 2h`, one coordinate at a time.
pub fn finite_difference_gradient(f: impl Fn(&Matrix) -> f64, at: &Matrix, h: f64) -> Matrix {
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows, at.cols);
    for i in 0..at.data.len() {
        let x = at.data[i];
        probe.data[i] = x + h;
        let plus = f(&probe);
        probe.data[i] = x - h;
        let minus = f(&probe);
        probe.data[i] = x;
        grad.data[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        let zero = Matrix::from_rows(&[[0.0], [0.0]]);
        assert_eq!(matmul(&a, &zero).unwrap(), zero);
        let b = Matrix::from_rows(&[[5.0], [6.0]]);
        assert_eq!(
            matmul(&a, &b).unwrap(),
            Matrix::from_rows(&[[17.0], [39.0]])
        );
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("2x3 vs 2x3"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]]);
        let b = Matrix::from_rows(&[[2.0, 1.0], [0.0, -1.0]]);
        assert_eq!(a.t_matmul(&b).unwrap(), matmul(&a.transpose(), &b).unwrap());
        let c = Matrix::from_rows(&[[1.0, 1.0, 1.0], [2.0, 0.0, -1.0]]);
        assert_eq!(a.matmul_t(&c).unwrap(), matmul(&a, &c.transpose()).unwrap());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-15);
        let s = sigmoid_scalar(-50.0);
        assert!(s > 0.0 && s <= 1e-20);
        let m = sigmoid(&Matrix::from_rows(&[[700.0, -700.0]]));
        assert!(m.is_finite());
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = softmax_cross_entropy(&[0.3; 4], 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        let (loss, grad) = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));

        let (_, grad) = softmax_cross_entropy(&[1.0, 1.0], 0).unwrap();
        assert!((grad[0] + 0.5).abs() < 1e-15 && (grad[1] - 0.5).abs() < 1e-15);

        assert!(matches!(
            softmax_cross_entropy(&[1.0, 1.0], 2),
            Err(CfcbmError::Index(_))
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0]]);
        let before = p.clone();
        let mut st = AdamState::new(1, 2, AdamConfig::with_lr(0.1));
        adam_step(&mut p, &Matrix::zeros(1, 2), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.first_moment, Matrix::zeros(1, 2));
        assert_eq!(st.second_moment, Matrix::zeros(1, 2));
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let lr = 0.01;
        let mut p = Matrix::from_rows(&[[1.0, 1.0, 1.0]]);
        let g = Matrix::from_rows(&[[3.0, -0.002, 1e3]]);
        let mut st = AdamState::new(1, 3, AdamConfig::with_lr(lr));
        adam_step(&mut p, &g, &mut st).unwrap();
        for (x, gi) in p.data().iter().zip(g.data()) {
            let moved = x - 1.0;
            assert!((moved + lr * gi.signum()).abs() < lr * 1e-4, "{moved}");
        }
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut p = Matrix::from_rows(&[[0.0, 0.0]]);
        let g = Matrix::from_rows(&[[0.5, -2.0]]);
        let mut st = AdamState::new(1, 2, AdamConfig::with_lr(1e-3));
        adam_step(&mut p, &g, &mut st).unwrap();
        let first = p.clone();
        adam_step(&mut p, &g, &mut st).unwrap();
        assert!(first[(0, 0)] < 0.0 && p[(0, 0)] < first[(0, 0)]);
        assert!(first[(0, 1)] > 0.0 && p[(0, 1)] > first[(0, 1)]);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let mut st = AdamState::new(2, 2, AdamConfig::with_lr(0.1));
        assert!(matches!(
            adam_step(&mut p, &Matrix::zeros(1, 2), &mut st),
            Err(CfcbmError::Dimension(_))
        ));
    }

    #[test]
    fn finite_difference_examples() {
        let at = Matrix::from_rows(&[[1.0, 2.0]]);
        let g = finite_difference_gradient(|m| m.data().iter().map(|x| x * x).sum(), &at, 1e-5);
        assert!((g[(0, 0)] - 2.0).abs() < 1e-6 && (g[(0, 1)] - 4.0).abs() < 1e-6);

        let g = finite_difference_gradient(|_| 7.0, &at, 1e-5);
        assert_eq!(g, Matrix::zeros(1, 2));

        let at = Matrix::from_rows(&[[3.0, 5.0]]);
        let g = finite_difference_gradient(|m| m[(0, 0)] * m[(0, 1)], &at, 1e-5);
        assert!((g[(0, 0)] - 5.0).abs() < 1e-6 && (g[(0, 1)] - 3.0).abs() < 1e-6);
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_matches_triple_loop(a in matrix(7, 5), b in matrix(5, 3)) {
            let fast = matmul(&a, &b).unwrap();
            let slow = naive(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn cross_entropy_is_nonnegative_and_gradient_sums_to_zero(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
            pick in 0usize..1000,
        ) {
            let label = pick % logits.len();
            let (loss, grad) = softmax_cross_entropy(&logits, label).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn sigmoid_stays_in_open_unit_interval(x in -30.0f64..30.0) {
            let s = sigmoid_scalar(x);
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
