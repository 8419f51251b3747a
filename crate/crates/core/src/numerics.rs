//! Dense float32 linear algebra and the nonlinear primitives the model and
//! the decomposition are built from.
//!
//! Storage is always `f32`, row-major. Every reduction (dot products, norms,
//! softmax normalizers) accumulates in `f64` with a fixed lane layout, so
//! results are bit-reproducible regardless of how the compiler vectorizes.

use crate::error::{Error, Result};

/// Added inside the RMS square root.
pub const DEFAULT_EPS: f32 = 1e-5;

/// Lower bound applied to probabilities before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major `rows x cols` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension(format!(
                "shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Product `self · other` for `self: m x k`, `other: k x n`.
    pub fn matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let bt = other.transpose();
        Ok(matmul_nt(self, &bt))
    }

    pub fn transpose(&self) -> Tensor2D {
        Tensor2D::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }
}

/// `f64`-accumulated dot product with eight independent lanes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] as f64 * y[i] as f64;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `W · x` for `W: m x k`.
pub fn matvec(w: &Tensor2D, x: &[f32]) -> Result<Vec<f32>> {
    if w.cols != x.len() {
        return Err(Error::Dimension(format!(
            "matvec {}x{} by vector of {}",
            w.rows,
            w.cols,
            x.len()
        )));
    }
    Ok((0..w.rows).map(|r| dot(w.row(r), x) as f32).collect())
}

/// `X · Wᵀ` for `X: t x k`, `W: m x k`. Rows of the result are `W · x_t`.
pub fn matmul_nt(x: &Tensor2D, w: &Tensor2D) -> Tensor2D {
    assert_eq!(x.cols, w.cols, "matmul_nt inner dimension");
    let mut out = Tensor2D::zeros(x.rows, w.rows);
    for t in 0..x.rows {
        let xr = x.row(t);
        let orow = out.row_mut(t);
        for (o, r) in orow.iter_mut().zip(0..w.rows) {
            *o = dot(w.row(r), xr) as f32;
        }
    }
    out
}

/// `sqrt(mean(x²) + eps)` in `f64`.
pub fn rms(x: &[f32], eps: f32) -> f64 {
    (dot(x, x) / x.len() as f64 + eps as f64).sqrt()
}

/// RMSNorm: `x_i · gamma_i / sqrt(mean(x²) + eps)`.
pub fn rms_norm(x: &[f32], gamma: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::Dimension("rms_norm of empty vector".into()));
    }
    if x.len() != gamma.len() {
        return Err(Error::Dimension(format!(
            "rms_norm input {} vs gamma {}",
            x.len(),
            gamma.len()
        )));
    }
    if eps < 0.0 {
        return Err(Error::Input(format!("negative eps {eps}")));
    }
    let r = rms(x, eps);
    if r == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    Ok(x.iter()
        .zip(gamma)
        .map(|(xi, gi)| (*xi as f64 * *gi as f64 / r) as f32)
        .collect())
}

/// Softmax with max subtraction, normalized in `f64`.
pub fn softmax_stable(logits: &[f32]) -> Result<Vec<f32>> {
    Ok(softmax_f64(&logits.iter().map(|x| *x as f64).collect::<Vec<_>>())?
        .into_iter()
        .map(|p| p as f32)
        .collect())
}

pub fn softmax_f64(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Dimension("softmax of empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `-ln probs[gold]` with probabilities floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f32], gold: usize) -> Result<f64> {
    let p = probs.get(gold).ok_or_else(|| {
        Error::Index(format!("gold label {gold} for {} classes", probs.len()))
    })?;
    Ok(-(*p as f64).max(PROB_FLOOR).ln())
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the minimum; ties go to the lowest index.
pub fn argmin<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Sample mean and (n-1) standard deviation; the deviation is absent below
/// two samples.
pub fn mean_sd(values: &[f64]) -> (f64, Option<f64>) {
    if values.is_empty() {
        return (f64::NAN, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, Some((ss / (n - 1.0)).sqrt()))
}
