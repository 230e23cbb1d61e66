//! Minimal dense linear algebra for the toy model. Row-major `f32` storage,
//! no BLAS; the shapes here are small enough that naive loops are fine and
//! keep the arithmetic bit-for-bit reproducible across platforms.

// ============================================================================
// Matrix
// ============================================================================

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Matrix {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `y = A x`, accumulating each row's dot product in f32 in index order.
    pub fn matvec(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut y = vec![0.0f32; self.rows];
        for (r, out) in y.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0f32;
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            *out = acc;
        }
        y
    }
}

// ============================================================================
// Vector ops
// ============================================================================

/// RMS normalization: `x / sqrt(mean(x^2) + eps)` with `eps = 1e-6`.
pub fn rms_normalize(x: &mut [f32]) {
    let n = x.len().max(1) as f32;
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / n;
    let inv = 1.0 / (mean_sq + 1e-6).sqrt();
    for v in x.iter_mut() {
        *v *= inv;
    }
}

pub fn relu(x: &mut [f32]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn add_assign(x: &mut [f32], y: &[f32]) {
    assert_eq!(x.len(), y.len());
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Index of the maximum element; ties resolve to the lowest index.
pub fn argmax(x: &[f32]) -> usize {
    assert!(!x.is_empty());
    let mut best = 0;
    for (i, v) in x.iter().enumerate().skip(1) {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest elements, highest value first; equal values
/// resolve to the lower index first.
pub fn top_k(x: &[f32], k: usize) -> Vec<usize> {
    assert!(k <= x.len());
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

// ============================================================================
// Tests
// ============================================================================
