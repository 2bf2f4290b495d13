use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Dense row-major matrix of f64 values.
///
/// Scalars are `1x1`, row vectors `1xn`, column vectors `nx1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Gaussian init, row-major draw order (determinism depends on it).
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Tensor { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Config(format!(
                "matmul dimension mismatch: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }

    pub(crate) fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &self.data)
            .expect("tensor buffer matches its shape")
    }

    pub(crate) fn view_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut self.data)
            .expect("tensor buffer matches its shape")
    }
}

/// `out = a @ b`, shapes already checked by the caller.
pub(crate) fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    general_mat_mul(1.0, &a.view(), &b.view(), 0.0, &mut out.view_mut());
}

/// `out += a @ b` (gradient accumulation path).
pub(crate) fn matmul_acc(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, out: &mut Tensor) {
    general_mat_mul(1.0, &a, &b, 1.0, &mut out.view_mut());
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Max-subtracted softmax over a slice.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Config("softmax on empty input".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Negative log-likelihood of `target` under softmax of `logits`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Config(format!(
            "cross_entropy target {} out of range for {} logits",
            target,
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[target])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_one_by_one() {
        let a = Tensor::scalar(2.0);
        let b = Tensor::scalar(3.0);
        assert_eq!(a.matmul(&b).unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_two_by_two() {
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_dimension_mismatch_is_config_error() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_uniform_inputs() {
        let p = softmax(&[3.7, 3.7, 3.7, 3.7]).unwrap();
        for &v in &p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_single_element() {
        assert_eq!(softmax(&[42.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_two_zero() {
        // e^2/(e^2+1) by hand.
        let p = softmax(&[2.0, 0.0]).unwrap();
        assert!((p[0] - 0.8808).abs() < 1e-4);
        assert!((p[1] - 0.1192).abs() < 1e-4);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_is_config_error() {
        assert!(matches!(softmax(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_perfect_prediction() {
        // Overwhelming margin on the target drives the loss to ~0.
        let loss = cross_entropy(&[200.0, 0.0], 0).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let v = 7;
        let logits = vec![0.3; v];
        let loss = cross_entropy(&logits, 4).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_hand_value() {
        // -ln(e/(e+1)) = ln(1 + e^-1)
        let loss = cross_entropy(&[1.0, 0.0], 0).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        assert!(matches!(cross_entropy(&[0.0, 1.0], 2), Err(Error::Config(_))));
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().get(2, 1), 6.0);
    }
}
