//! Dense row-major `f64` arrays.
//!
//! Everything learnable in this crate lives in a [`Tensor`]: hidden states,
//! gate weights, latent means and variances, the noise-to-hidden matrix.
//! Shapes are kept as an explicit `Vec<usize>`; most operations view a
//! tensor as `(rows, cols)` where `cols` is the last axis and `rows` the
//! product of the others, which covers vectors, matrices, and the batched
//! per-row quaternion blocks used by the kinematic loss.

/// Dense array with shape metadata. `product(shape) == data.len()` always.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// New tensor from shape and row-major data.
    ///
    /// Panics if the element count does not match the shape; constructing a
    /// tensor with inconsistent metadata is a caller bug, not a runtime
    /// condition.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// 2-D tensor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value; panics if not scalar.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Last axis length (1 for scalars with shape `[1]`).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `r` of the `(rows, cols)` view.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// `out = a @ b` for row-major `a: (m,k)` and `b: (k,n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    // ikj order: the inner loop runs over contiguous rows of b and out.
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    out
}

/// `out = a^T @ b` for `a: (k,m)`, `b: (k,n)` without materializing `a^T`.
pub fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
    out
}

/// `out = a @ b^T` for `a: (m,k)`, `b: (n,k)` without materializing `b^T`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] @ [[1],[1]] = [[3],[7]]
        let out = matmul(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2, 1);
        assert_eq!(out, vec![3.0, 7.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // (2,3) or (3,2)
        let b = vec![2.0, 1.0, -1.0, 0.0, 3.0, 5.0];
        // a^T @ b with a as (3,2): equals matmul of a_t (2,3) by b (3,2)
        let a_t = vec![a[0], a[2], a[4], a[1], a[3], a[5]];
        assert_eq!(matmul_at_b(&a, &b, 3, 2, 2), matmul(&a_t, &b, 2, 3, 2));
        // a @ b^T with a (2,3), b (2,3)
        let b_t = vec![b[0], b[3], b[1], b[4], b[2], b[5]];
        assert_eq!(matmul_a_bt(&a, &b, 2, 3, 2), matmul(&a, &b_t, 2, 3, 2));
    }

    #[test]
    #[should_panic]
    fn shape_data_mismatch_panics() {
        let _ = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn rows_cols_view() {
        let t = Tensor::matrix(3, 4, (0..12).map(|x| x as f64).collect());
        assert_eq!(t.rows(), 3);
        assert_eq!(t.cols(), 4);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0, 7.0]);
        let v = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(v.rows(), 1);
        assert_eq!(v.cols(), 2);
    }
}
