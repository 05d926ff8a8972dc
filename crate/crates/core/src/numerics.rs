//! Dense vectors and matrices, activations, and the finite-difference
//! gradient used to check every analytic backward pass.
//!
//! Matrices are row-major. A parameter matrix that maps an input space into
//! the multimodal space is stored as `(input_dim x m)` and applied as
//! `M^T x` (see [`Matrix::tmatvec`]).

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector<T> {
    values: Vec<T>,
}

impl<T: Scalar> Vector<T> {
    /// Wraps `values`; rejects an empty sequence.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("vector"));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![T::zero(); dim],
        }
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Self {
            values: values.iter().map(|&x| T::lit(x)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.values.iter()
    }

    pub fn norm(&self) -> T {
        dot_slice(&self.values, &self.values).sqrt()
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(mismatch("add", self.dim(), other.dim()));
        }
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn scale(&self, k: T) -> Self {
        Self {
            values: self.values.iter().map(|&x| x * k).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Vector<U> {
        Vector {
            values: self.values.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(values: Vec<T>) -> Self {
        Self { values }
    }
}

impl<T> Index<usize> for Vector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.values[i]
    }
}

impl<T> IndexMut<usize> for Vector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.values[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(mismatch(
                "matrix",
                format!("{rows}x{cols}={} values", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(mismatch("matrix row", cols, format!("{} in row {i}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self> {
        let rows: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| T::lit(x)).collect())
            .collect();
        Self::from_rows(&rows)
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.cols {
            return Err(mismatch("push_row", self.cols, row.len()));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// `M x`.
    pub fn matvec(&self, x: &Vector<T>) -> Result<Vector<T>> {
        if self.cols != x.dim() {
            return Err(mismatch(
                "matvec",
                format!("x.dim == {} (matrix is {}x{})", self.cols, self.rows, self.cols),
                x.dim(),
            ));
        }
        let mut out = vec![T::zero(); self.rows];
        matvec_into(self, x.as_slice(), &mut out);
        Ok(out.into())
    }

    /// `M^T x`: maps an input-space vector through a `(input_dim x m)` matrix.
    pub fn tmatvec(&self, x: &Vector<T>) -> Result<Vector<T>> {
        if self.rows != x.dim() {
            return Err(mismatch(
                "tmatvec",
                format!("x.dim == {} (matrix is {}x{})", self.rows, self.rows, self.cols),
                x.dim(),
            ));
        }
        let mut out = vec![T::zero(); self.cols];
        tmatvec_acc(self, x.as_slice(), &mut out);
        Ok(out.into())
    }

    pub fn column_sums(&self) -> Vector<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in self.row_iter() {
            axpy(T::one(), r, &mut out);
        }
        out.into()
    }

    pub fn row_norms(&self) -> Vec<T> {
        self.row_iter().map(|r| dot_slice(r, r).sqrt()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

// Slice kernels. Callers guarantee matching lengths.

#[inline]
pub fn dot_slice<T: Scalar>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = M x`
pub fn matvec_into<T: Scalar>(m: &Matrix<T>, x: &[T], out: &mut [T]) {
    for (o, r) in out.iter_mut().zip(m.row_iter()) {
        *o = dot_slice(r, x);
    }
}

/// `out += M^T x`
pub fn tmatvec_acc<T: Scalar>(m: &Matrix<T>, x: &[T], out: &mut [T]) {
    for (&xi, r) in x.iter().zip(m.row_iter()) {
        if xi != T::zero() {
            axpy(xi, r, out);
        }
    }
}

/// `M += x y^T`
pub fn outer_acc<T: Scalar>(m: &mut Matrix<T>, x: &[T], y: &[T]) {
    let cols = m.cols;
    for (i, &xi) in x.iter().enumerate() {
        if xi != T::zero() {
            axpy(xi, y, &mut m.data[i * cols..(i + 1) * cols]);
        }
    }
}

pub fn dot<T: Scalar>(x: &Vector<T>, y: &Vector<T>) -> Result<T> {
    if x.dim() != y.dim() {
        return Err(mismatch("dot", x.dim(), y.dim()));
    }
    Ok(dot_slice(x.as_slice(), y.as_slice()))
}

pub fn matvec<T: Scalar>(m: &Matrix<T>, x: &Vector<T>) -> Result<Vector<T>> {
    m.matvec(x)
}

/// `z u^T`
pub fn outer<T: Scalar>(z: &Vector<T>, u: &Vector<T>) -> Matrix<T> {
    let mut m = Matrix::zeros(z.dim(), u.dim());
    outer_acc(&mut m, z.as_slice(), u.as_slice());
    m
}

/// Max-subtracted softmax over a slice, written into `out`.
pub fn softmax_into<T: Scalar>(s: &[T], out: &mut [T]) {
    let max = s.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(s) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax<T: Scalar>(s: &Vector<T>) -> Result<Vector<T>> {
    if s.dim() == 0 {
        return Err(Error::Empty("softmax"));
    }
    let mut out = vec![T::zero(); s.dim()];
    softmax_into(s.as_slice(), &mut out);
    Ok(out.into())
}

/// Backward through softmax: given `p = softmax(a)` and `dL/dp`, returns `dL/da`.
pub fn softmax_backward<T: Scalar>(p: &[T], dp: &[T]) -> Vec<T> {
    let inner = dot_slice(p, dp);
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - inner)).collect()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Index of the maximum; exact ties resolve to the lowest index.
pub fn argmax_first_slice<T: Scalar>(x: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in x.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn argmax_first<T: Scalar>(x: &Vector<T>) -> Result<usize> {
    argmax_first_slice(x.as_slice()).ok_or(Error::Empty("argmax_first"))
}

/// Central finite-difference gradient of `f` at `x0`.
pub fn central_fd_gradient<T, F>(mut f: F, x0: &[T], h: T) -> Result<Vector<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    if h <= T::zero() {
        return Err(Error::OutOfRange {
            op: "central_fd_gradient",
            value: h.as_f64(),
            range: "h > 0",
        });
    }
    let mut x = x0.to_vec();
    let mut grad = Vec::with_capacity(x0.len());
    for j in 0..x0.len() {
        x[j] = x0[j] + h;
        let plus = f(&x);
        x[j] = x0[j] - h;
        let minus = f(&x);
        x[j] = x0[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { index: j });
        }
        grad.push((plus - minus) / (h + h));
    }
    Ok(grad.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector<f64> {
        Vector::from_f64(x)
    }

    #[test]
    fn matvec_examples() {
        let i2 = Matrix::<f64>::identity(2);
        assert_eq!(i2.matvec(&v(&[3.0, 4.0])).unwrap(), v(&[3.0, 4.0]));
        let null = Matrix::from_f64_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(null.matvec(&v(&[0.0, 1.0])).unwrap(), v(&[0.0, 0.0]));
        let m = Matrix::from_f64_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&v(&[1.0, 1.0])).unwrap(), v(&[3.0, 7.0]));
    }

    #[test]
    fn matvec_rejects_mismatch() {
        let m = Matrix::<f64>::zeros(2, 3);
        let err = m.matvec(&v(&[1.0, 2.0])).unwrap_err();
        assert!(err.to_string().contains("2x3"), "{err}");
    }

    #[test]
    fn tmatvec_is_transpose() {
        let m = Matrix::from_f64_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.tmatvec(&v(&[1.0, 1.0])).unwrap(), v(&[5.0, 7.0, 9.0]));
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(dot(&v(&[2.0, 3.0]), &v(&[2.0, 3.0])).unwrap(), 13.0);
        assert_eq!(dot(&v(&[2.5, -3.0]), &Vector::zeros(2)).unwrap(), 0.0);
        assert!(dot(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn outer_examples() {
        assert_eq!(
            outer(&v(&[1.0]), &v(&[5.0, 6.0])),
            Matrix::from_f64_rows(&[&[5.0, 6.0]]).unwrap()
        );
        assert_eq!(
            outer(&v(&[0.5, 0.5]), &v(&[0.0, 1.0])),
            Matrix::from_f64_rows(&[&[0.0, 0.5], &[0.0, 0.5]]).unwrap()
        );
        assert_eq!(outer(&v(&[0.0, 0.0]), &v(&[7.0, -1.0])), Matrix::zeros(2, 2));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&v(&[0.0, 0.0])).unwrap(), v(&[0.5, 0.5]));
        assert_eq!(softmax(&v(&[-812.5])).unwrap(), v(&[1.0]));
        let p = softmax(&v(&[2f64.ln(), 0.0])).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&Vector::<f64>::zeros(0)).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(50.0f64) - 1.0).abs() < 1e-12);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_first(&v(&[0.1, 0.9, 0.0])).unwrap(), 1);
        assert_eq!(argmax_first(&v(&[0.5, 0.5])).unwrap(), 0);
        assert_eq!(argmax_first(&v(&[3.0, 1.0, 3.0])).unwrap(), 0);
        assert!(argmax_first(&Vector::<f64>::zeros(0)).is_err());
    }

    #[test]
    fn fd_examples() {
        let g = central_fd_gradient(|x: &[f64]| x[0] * x[0] + x[1] * x[1], &[1.0, 2.0], 1e-5)
            .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = central_fd_gradient(|_: &[f64]| 3.0, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, Vector::zeros(3));
        let g = central_fd_gradient(|x: &[f64]| sigmoid(x[0]), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-10);
    }

    #[test]
    fn fd_reports_offending_index() {
        let err = central_fd_gradient(
            |x: &[f64]| if x[1] > 2.0 { f64::NAN } else { x[0] },
            &[0.0, 2.0],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
        assert!(central_fd_gradient(|x: &[f64]| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let a = [0.3, -1.2, 2.0];
        let w = [0.7, -0.4, 1.1];
        let loss = |a: &[f64]| {
            let mut p = [0.0; 3];
            softmax_into(a, &mut p);
            dot_slice(&p, &w)
        };
        let mut p = [0.0; 3];
        softmax_into(&a, &mut p);
        let analytic = softmax_backward(&p, &w);
        let numeric = central_fd_gradient(loss, &a, 1e-5).unwrap();
        for j in 0..3 {
            assert!((analytic[j] - numeric[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn works_in_f32() {
        let m = Matrix::<f32>::from_f64_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&Vector::from_f64(&[1.0, 1.0])).unwrap().as_slice(), &[3.0f32, 7.0]);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    fn vec_strategy(max: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 1..=max)
    }

    fn unit_strategy(max: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 1..=max)
    }

    proptest! {
        #[test]
        fn softmax_normalizes(s in vec_strategy(64)) {
            let p = softmax(&Vector::from(s)).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0 && x <= 1.0));
        }

        #[test]
        fn softmax_shift_invariant(s in vec_strategy(64), k in -100.0f64..100.0) {
            let p = softmax(&Vector::from(s.clone())).unwrap();
            let shifted: Vec<f64> = s.iter().map(|x| x + k).collect();
            let q = softmax(&Vector::from(shifted)).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn identity_and_distributivity(x in unit_strategy(16), seed in any::<u64>()) {
            let n = x.len();
            let xv = Vector::from(x);
            prop_assert_eq!(Matrix::identity(n).matvec(&xv).unwrap(), xv.clone());
            let y: Vector<f64> = (0..n).map(|i| ((seed >> (i % 60)) & 0xff) as f64 / 17.0 - 7.0).collect::<Vec<_>>().into();
            let m: Matrix<f64> = Matrix::from_row_major(n, n, (0..n * n).map(|i| ((i * 37 + 11) % 23) as f64 / 5.0 - 2.0).collect()).unwrap();
            let lhs = m.matvec(&xv.add(&y).unwrap()).unwrap();
            let rhs = m.matvec(&xv).unwrap().add(&m.matvec(&y).unwrap()).unwrap();
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn outer_column_sums(z in unit_strategy(12), u in unit_strategy(12)) {
            let z = Vector::from(z);
            let u = Vector::from(u);
            let sums = outer(&z, &u).column_sums();
            let zsum = z.sum();
            for (j, &s) in sums.iter().enumerate() {
                prop_assert!((s - zsum * u[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_preserves_argmax(s in vec_strategy(32)) {
            let sv = Vector::from(s);
            let p = softmax(&sv).unwrap();
            let a = argmax_first(&sv).unwrap();
            let b = argmax_first(&p).unwrap();
            // distinct scores that collapse to equal probabilities are not a
            // monotonicity violation
            prop_assert!(a == b || p[a] == p[b]);
        }
    }
}
