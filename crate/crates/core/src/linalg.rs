//! Dense row-major matrices and the handful of kernels the crate needs.
//!
//! Everything here accumulates in a fixed element order that does not depend
//! on batch size or thread count, so single-sample and batched evaluations of
//! the same quantity are bit-identical. That exactness is load-bearing: score
//! streaming, pruning equivalence, and rerun determinism all assert `==` on
//! floats.

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// W·x for W of shape (rows × cols), x of length cols.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|j| dot(self.row(j), x)).collect()
    }

    /// Wᵀ·y for y of length rows.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "matvec_t dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for j in 0..self.rows {
            let yj = y[j];
            for (o, &w) in out.iter_mut().zip(self.row(j)) {
                *o += yj * w;
            }
        }
        out
    }

    /// Σ|w| over all entries.
    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn add_in_place(&mut self, other: &Matrix) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn linf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
}

pub fn linf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (&x, &y)| m.max((x - y).abs()))
}

/// Batch affine map: each row i of the output is W·X.row(i) + b.
///
/// Per-element accumulation order equals [`Matrix::matvec`], so a batch of
/// one reproduces the single-sample path exactly.
pub fn affine_batch(w: &Matrix, b: &[f64], x: &Matrix) -> Matrix {
    assert_eq!(x.cols, w.cols, "affine_batch input dim mismatch");
    assert_eq!(b.len(), w.rows, "affine_batch bias dim mismatch");
    let mut out = Matrix::zeros(x.rows, w.rows);
    for i in 0..x.rows {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for j in 0..w.rows {
            oi[j] = dot(w.row(j), xi) + b[j];
        }
    }
    out
}

/// Interval affine map with weight splitting: the new lower bound takes lower
/// inputs through positive weights and upper inputs through negative weights,
/// and symmetrically for the new upper bound. Writes into the provided output
/// rows.
pub fn interval_affine_into(
    w: &Matrix,
    b: &[f64],
    lo: &[f64],
    hi: &[f64],
    out_lo: &mut [f64],
    out_hi: &mut [f64],
) {
    debug_assert_eq!(lo.len(), w.cols);
    debug_assert_eq!(hi.len(), w.cols);
    for j in 0..w.rows {
        let wr = w.row(j);
        let mut acc_lo = 0.0;
        let mut acc_hi = 0.0;
        for k in 0..w.cols {
            let wv = wr[k];
            if wv >= 0.0 {
                acc_lo += wv * lo[k];
                acc_hi += wv * hi[k];
            } else {
                acc_lo += wv * hi[k];
                acc_hi += wv * lo[k];
            }
        }
        out_lo[j] = acc_lo + b[j];
        out_hi[j] = acc_hi + b[j];
    }
}

/// Single-sample interval affine map.
pub fn interval_affine_vec(w: &Matrix, b: &[f64], lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut out_lo = vec![0.0; w.rows];
    let mut out_hi = vec![0.0; w.rows];
    interval_affine_into(w, b, lo, hi, &mut out_lo, &mut out_hi);
    (out_lo, out_hi)
}

/// Batched interval affine map; row i of the outputs is the single-sample
/// result for row i of the inputs, bit for bit.
pub fn interval_affine_batch(
    w: &Matrix,
    b: &[f64],
    lo: &Matrix,
    hi: &Matrix,
) -> (Matrix, Matrix) {
    assert_eq!(lo.cols, w.cols, "interval_affine_batch dim mismatch");
    assert_eq!(lo.rows, hi.rows);
    assert_eq!(lo.cols, hi.cols);
    let mut out_lo = Matrix::zeros(lo.rows, w.rows);
    let mut out_hi = Matrix::zeros(lo.rows, w.rows);
    for i in 0..lo.rows {
        let (mut l, mut h) = (vec![0.0; w.rows], vec![0.0; w.rows]);
        interval_affine_into(w, b, lo.row(i), hi.row(i), &mut l, &mut h);
        out_lo.row_mut(i).copy_from_slice(&l);
        out_hi.row_mut(i).copy_from_slice(&h);
    }
    (out_lo, out_hi)
}
