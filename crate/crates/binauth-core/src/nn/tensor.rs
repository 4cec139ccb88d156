//! Dense row-major f64 matrix plus the handful of kernels the models need.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NnError;

/// Row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Uniform(-scale, scale) init, used for fresh weight matrices.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::ShapeMismatch {
                context: "Tensor2::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// self += other, elementwise.
    pub fn add_assign(&mut self, other: &Tensor2) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self += scale * other, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor2, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// y = self · x  (matrix-vector).
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (r, out) in y.iter_mut().enumerate() {
            *out = dot(self.row(r), x);
        }
    }

    /// y += self · x.
    pub fn matvec_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (r, out) in y.iter_mut().enumerate() {
            *out += dot(self.row(r), x);
        }
    }

    /// y += selfᵀ · x, i.e. accumulate x-weighted sum of rows.
    pub fn matvec_t_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (r, &w) in x.iter().enumerate() {
            if w != 0.0 {
                axpy(w, self.row(r), y);
            }
        }
    }

    /// self += outer(u, v): rank-1 update, self[r][c] += u[r]*v[c].
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            if ur != 0.0 {
                axpy(ur, v, self.row_mut(r));
            }
        }
    }

    /// C = A · selfᵀ for row-major A (m×k) against self (n×k); C is m×n.
    ///
    /// Both operands are read along contiguous rows. When self is large
    /// (decoder-sized) the loop order flips so self streams through memory
    /// once per call instead of once per row of A.
    pub fn matmul_nt(&self, a: &Tensor2, c: &mut Tensor2) {
        debug_assert_eq!(a.cols, self.cols);
        debug_assert_eq!(c.rows, a.rows);
        debug_assert_eq!(c.cols, self.rows);
        if self.data.len() > 1 << 15 {
            for j in 0..self.rows {
                let brow = self.row(j);
                for i in 0..a.rows {
                    c.data[i * self.rows + j] = dot(a.row(i), brow);
                }
            }
        } else {
            for i in 0..a.rows {
                let arow = a.row(i);
                let crow = c.row_mut(i);
                for (j, out) in crow.iter_mut().enumerate() {
                    *out = dot(arow, self.row(j));
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators so LLVM can keep the FMA pipes busy.
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let k = i * 4;
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// y += alpha * x.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// c += aᵀ · b for row-major a (steps × m) and b (steps × n); c is m × n.
///
/// This accumulates a whole chunk's worth of rank-1 gradient updates in one
/// pass, touching each output row once instead of once per time step.
pub fn acc_t_ab(a: &Tensor2, b: &Tensor2, c: &mut Tensor2) {
    let steps = a.rows();
    debug_assert_eq!(b.rows(), steps);
    debug_assert_eq!(c.rows(), a.cols());
    debug_assert_eq!(c.cols(), b.cols());
    let m = a.cols();
    for i in 0..m {
        let crow = c.row_mut(i);
        for t in 0..steps {
            let w = a.data()[t * m + i];
            if w != 0.0 {
                axpy(w, b.row(t), crow);
            }
        }
    }
}

/// c += a · b for row-major a (steps × k) and b (k × n); c is steps × n.
///
/// Iterates b's rows in the outer loop so a large b streams through memory
/// once per call rather than once per step.
pub fn acc_ab(a: &Tensor2, b: &Tensor2, c: &mut Tensor2) {
    let steps = a.rows();
    let k = a.cols();
    debug_assert_eq!(b.rows(), k);
    debug_assert_eq!(c.rows(), steps);
    debug_assert_eq!(c.cols(), b.cols());
    for kk in 0..k {
        let brow = b.row(kk);
        for t in 0..steps {
            let w = a.data()[t * k + kk];
            if w != 0.0 {
                axpy(w, brow, c.row_mut(t));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matvec_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Tensor2::uniform(5, 9, 1.0, &mut rng);
        let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; 5];
        m.matvec(&x, &mut y);
        for r in 0..5 {
            let naive: f64 = (0..9).map(|c| m.row(r)[c] * x[c]).sum();
            assert!((y[r] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_nt_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor2::uniform(6, 7, 1.0, &mut rng);
        let b = Tensor2::uniform(4, 7, 1.0, &mut rng);
        let mut c = Tensor2::zeros(6, 4);
        b.matmul_nt(&a, &mut c);
        for i in 0..6 {
            for j in 0..4 {
                let naive: f64 = (0..7).map(|k| a.row(i)[k] * b.row(j)[k]).sum();
                assert!((c.row(i)[j] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_accumulations_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = Tensor2::uniform(5, 3, 1.0, &mut rng);
        let b = Tensor2::uniform(5, 4, 1.0, &mut rng);
        let mut c = Tensor2::uniform(3, 4, 1.0, &mut rng);
        let base = c.clone();
        acc_t_ab(&a, &b, &mut c);
        for i in 0..3 {
            for j in 0..4 {
                let naive: f64 = (0..5).map(|t| a.row(t)[i] * b.row(t)[j]).sum();
                assert!((c.row(i)[j] - base.row(i)[j] - naive).abs() < 1e-12);
            }
        }

        let k = Tensor2::uniform(3, 4, 1.0, &mut rng);
        let mut c2 = Tensor2::uniform(5, 4, 1.0, &mut rng);
        let base2 = c2.clone();
        acc_ab(&a, &k, &mut c2);
        for t in 0..5 {
            for j in 0..4 {
                let naive: f64 = (0..3).map(|x| a.row(t)[x] * k.row(x)[j]).sum();
                assert!((c2.row(t)[j] - base2.row(t)[j] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outer_and_transpose_matvec() {
        let mut m = Tensor2::zeros(3, 2);
        m.add_outer(&[1.0, 2.0, 3.0], &[10.0, 20.0]);
        assert_eq!(m.row(2), &[30.0, 60.0]);
        let mut y = vec![0.0; 2];
        m.matvec_t_acc(&[1.0, 1.0, 1.0], &mut y);
        assert!((y[0] - 60.0).abs() < 1e-12);
        assert!((y[1] - 120.0).abs() < 1e-12);
    }
}
