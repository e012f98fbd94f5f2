//! Dense row-major 2-D `f32` tensors and the handful of row-wise kernels the
//! model needs.

use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape/data mismatch");
        Self { rows, cols, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · w` where `w` is `[cols × w.cols]`.
    pub fn matmul(&self, w: &Tensor) -> Tensor {
        assert_eq!(self.cols, w.rows, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(self.rows, w.cols);
        let inner = self.cols;
        let wc = w.cols;
        par::for_each_row(&mut out.data, wc, inner * wc, |i, orow| {
            let xrow = &self.data[i * inner..(i + 1) * inner];
            for (k, &a) in xrow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let wrow = &w.data[k * wc..(k + 1) * wc];
                for (o, &b) in orow.iter_mut().zip(wrow) {
                    *o += a * b;
                }
            }
        });
        out
    }

    /// `self · wᵀ` where `w` is `[w.rows × cols]`.
    pub fn matmul_t(&self, w: &Tensor) -> Tensor {
        assert_eq!(self.cols, w.cols, "matmul_t inner dimension mismatch");
        let mut out = Tensor::zeros(self.rows, w.rows);
        let inner = self.cols;
        let wr = w.rows;
        par::for_each_row(&mut out.data, wr, inner * wr, |i, orow| {
            let xrow = &self.data[i * inner..(i + 1) * inner];
            for (j, o) in orow.iter_mut().enumerate() {
                let wrow = &w.data[j * inner..(j + 1) * inner];
                *o = dot(xrow, wrow);
            }
        });
        out
    }

    /// `selfᵀ · g` accumulated into `acc` (`[cols × g.cols]`).
    pub fn t_matmul_acc(&self, g: &Tensor, acc: &mut [f32]) {
        assert_eq!(self.rows, g.rows);
        assert_eq!(acc.len(), self.cols * g.cols);
        let gc = g.cols;
        for r in 0..self.rows {
            let xrow = self.row(r);
            let grow = g.row(r);
            for (k, &a) in xrow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let arow = &mut acc[k * gc..(k + 1) * gc];
                for (o, &b) in arow.iter_mut().zip(grow) {
                    *o += a * b;
                }
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                if a == b {
                    0.0
                } else {
                    (a - b).abs()
                }
            })
            .fold(0.0, f32::max)
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of one row. `-inf` entries map to exactly 0.
pub fn softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Temperature-scaled softmax; `temperature` must be positive.
pub fn softmax_t(row: &[f32], temperature: f32) -> Vec<f32> {
    if temperature == 1.0 {
        return softmax(row);
    }
    let scaled: Vec<f32> = row.iter().map(|&x| x / temperature).collect();
    softmax(&scaled)
}

/// `log softmax`, computed in `f64` via log-sum-exp.
pub fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row
        .iter()
        .map(|&x| (x as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|&x| x as f64 - lse).collect()
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
