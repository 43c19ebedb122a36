//! Dense row-major matrices, sized for desk-scale MLP training.
//!
//! Shapes are checked on every binary op. In debug builds the constructors
//! also assert that no NaN/Inf slips through.

use crate::scalar::Scalar;

/// Dense row-major 2-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix2D<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix2D<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix2D { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        let m = Matrix2D { rows, cols, data };
        m.debug_assert_finite();
        m
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        assert!(!rows.is_empty(), "from_rows: empty");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Matrix2D::from_vec(rows.len(), cols, data)
    }

    /// 1x1 matrix holding a single scalar.
    pub fn scalar(v: S) -> Self {
        Matrix2D::from_vec(1, 1, vec![v])
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> S {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar matrix");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Matrix2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Matrix2D {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Elementwise a*self + b*other.
    pub fn lincomb(&self, a: S, other: &Self, b: S) -> Self {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| k * v)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    /// self (n x k) * other (k x m) -> n x m.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + a * b;
                }
            }
        }
        Matrix2D { rows: n, cols: m, data: out }
    }

    /// self^T (k x n)^T * other (n x m) -> k x m, without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul row mismatch");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![S::zero(); k * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let b_row = &other.data[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let out_row = &mut out[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + a * b;
                }
            }
        }
        Matrix2D { rows: k, cols: m, data: out }
    }

    /// self (n x k) * other^T (m x k)^T -> n x m.
    pub fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t column mismatch");
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&a, &b) in a_row.iter().zip(b_row.iter()) {
                    acc = acc + a * b;
                }
                out[i * m + j] = acc;
            }
        }
        Matrix2D { rows: n, cols: m, data: out }
    }

    /// Add a 1 x cols row vector to every row.
    pub fn add_row_broadcast(&self, row: &Self) -> Self {
        assert_eq!(row.rows, 1, "broadcast operand must be a row vector");
        assert_eq!(row.cols, self.cols, "broadcast width mismatch");
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[i * self.cols + j] = out.data[i * self.cols + j] + row.data[j];
            }
        }
        out
    }

    /// Sum of each column as a 1 x cols row vector.
    pub fn column_sums(&self) -> Self {
        let mut out = vec![S::zero(); self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] = out[j] + self.data[i * self.cols + j];
            }
        }
        Matrix2D { rows: 1, cols: self.cols, data: out }
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> S {
        assert!(!self.data.is_empty(), "mean of empty matrix");
        self.sum() / S::from_usize(self.data.len()).unwrap()
    }

    pub fn dot(&self, other: &Self) -> S {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(S::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Select a contiguous row range as a new matrix.
    pub fn row_range(&self, from: usize, to: usize) -> Self {
        assert!(from <= to && to <= self.rows, "row_range out of bounds");
        Matrix2D {
            rows: to - from,
            cols: self.cols,
            data: self.data[from * self.cols..to * self.cols].to_vec(),
        }
    }

    /// Select rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix2D { rows: idx.len(), cols: self.cols, data }
    }

    /// Stack two matrices with equal column counts vertically.
    pub fn vstack(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "vstack column mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix2D { rows: self.rows + other.rows, cols: self.cols, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn debug_assert_finite(&self) {
        debug_assert!(self.is_finite(), "non-finite value in matrix");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix2D::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_products_agree_with_explicit() {
        let a = Matrix2D::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Matrix2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        // a^T * (a*b) computed both ways
        let ab = a.matmul(&b);
        let direct = a.t_matmul(&ab);
        let mut at_rows = Vec::new();
        for j in 0..a.cols() {
            at_rows.push((0..a.rows()).map(|i| a.get(i, j)).collect::<Vec<f64>>());
        }
        let at = Matrix2D::from_rows(&at_rows);
        assert_eq!(direct, at.matmul(&ab));

        let mt = ab.matmul_t(&b.row_range(0, 2));
        assert_eq!(mt.shape(), (2, 2));
    }

    #[test]
    fn broadcast_and_reductions() {
        let m = Matrix2D::from_rows(&[vec![1.0_f64, 2.0], vec![3.0, 4.0]]);
        let b = Matrix2D::from_vec(1, 2, vec![10.0, 20.0]);
        let s = m.add_row_broadcast(&b);
        assert_eq!(s.as_slice(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(m.column_sums().as_slice(), &[4.0, 6.0]);
        assert_eq!(m.mean(), 2.5);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn shape_mismatch_panics() {
        let a = Matrix2D::<f64>::zeros(2, 2);
        let b = Matrix2D::<f64>::zeros(3, 2);
        let _ = a.add(&b);
    }
}
