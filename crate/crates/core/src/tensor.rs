//! Dense 64-bit tensors in row-major order.
//!
//! All graph operations and plain evaluation paths go through the kernels
//! defined here, so any two routes that compute the same quantity do so with
//! the same floating-point operation order.

use crate::error::{Error, Result};

/// A dense multi-dimensional array of `f64` values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidTensor(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} implies {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Number of rows when viewed as a matrix (rank 2) or a single row (rank 1).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Number of columns in the matrix view.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Rows `0..keep` of a matrix; used to strip batch padding.
    pub fn first_rows(&self, keep: usize) -> Tensor {
        assert_eq!(self.rank(), 2);
        assert!(keep >= 1 && keep <= self.shape[0]);
        let c = self.shape[1];
        Tensor {
            shape: vec![keep, c],
            data: self.data[..keep * c].to_vec(),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs_name: "lhs".into(),
            rhs_name: "rhs".into(),
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Kernels. Pure functions of their inputs with a fixed operation order.
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x * c).collect(),
    }
}

/// `acc += c * x`, elementwise.
pub fn axpy_into(acc: &mut Tensor, c: f64, x: &Tensor) {
    debug_assert_eq!(acc.shape, x.shape);
    for (a, v) in acc.data.iter_mut().zip(&x.data) {
        *a += c * v;
    }
}

pub fn add_into(acc: &mut Tensor, x: &Tensor) {
    debug_assert_eq!(acc.shape, x.shape);
    for (a, v) in acc.data.iter_mut().zip(&x.data) {
        *a += v;
    }
}

/// Matrix product `a (m×k) · b (k×n)`. Rank-1 inputs are treated as a single row.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k1) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k1 != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs_name: "lhs".into(),
            rhs_name: "rhs".into(),
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k1..(i + 1) * k1];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let shape = if a.rank() == 1 && b.rank() == 1 {
        vec![n]
    } else if a.rank() == 1 {
        vec![n]
    } else {
        vec![m, n]
    };
    Ok(Tensor { shape, data: out })
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k1) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k1 != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs_name: "lhs".into(),
            rhs_name: "rhs(transposed)".into(),
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k1..(i + 1) * k1];
        for j in 0..n {
            let brow = &b.data[j * k1..(j + 1) * k1];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k1, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k1 != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs_name: "lhs(transposed)".into(),
            rhs_name: "rhs".into(),
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for kk in 0..k1 {
        let arow = &a.data[kk * m..(kk + 1) * m];
        let brow = &b.data[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Adds a rank-1 bias to every row of a matrix.
pub fn add_row_broadcast(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = a.cols();
    if bias.rank() != 1 || bias.len() != c {
        return Err(Error::ShapeMismatch {
            op: "add_row_broadcast",
            lhs_name: "matrix".into(),
            rhs_name: "bias".into(),
            lhs: a.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let mut out = a.clone();
    for i in 0..a.rows() {
        let row = &mut out.data[i * c..(i + 1) * c];
        for (o, &b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn relu(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
    }
}

pub fn tanh(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x.tanh()).collect(),
    }
}

pub fn exp(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x.exp()).collect(),
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-row statistics used by layer normalization and its gradient.
pub fn layer_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Layer normalization over the last dimension with learnable gain and bias.
pub fn layer_norm(a: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = a.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs_name: "input".into(),
            rhs_name: "gain/bias".into(),
            lhs: a.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(a.shape());
    for i in 0..a.rows() {
        let row = a.row(i);
        let (mean, rstd) = layer_norm_stats(row);
        let orow = &mut out.data[i * c..(i + 1) * c];
        for j in 0..c {
            orow[j] = (row[j] - mean) * rstd * gain.data[j] + bias.data[j];
        }
    }
    Ok(out)
}

/// Numerically stable log-softmax over the last dimension.
pub fn log_softmax(a: &Tensor) -> Tensor {
    let c = a.cols();
    let mut out = Tensor::zeros(a.shape());
    for i in 0..a.rows() {
        let row = a.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        let orow = &mut out.data[i * c..(i + 1) * c];
        for j in 0..c {
            orow[j] = row[j] - lse;
        }
    }
    out
}

/// Stable softmax over the last dimension.
pub fn softmax(a: &Tensor) -> Tensor {
    let mut out = log_softmax(a);
    for v in out.data.iter_mut() {
        *v = v.exp();
    }
    out
}

/// log(Σ exp(xs)) with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    mx + xs.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln()
}

/// Two-argument log-sum-exp for dynamic-programming recursions.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_extents() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn matmul_shapes_and_values() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 3], vec![2.0, 1.0, 0.0, -1.0, 3.0, 5.0]).unwrap();
        // a · bᵀ via explicit transpose
        let mut bt = Tensor::zeros(&[3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                bt.data_mut()[j * 2 + i] = b.at2(i, j);
            }
        }
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &bt).unwrap());

        let c = Tensor::from_vec(&[2, 4], (0..8).map(|v| v as f64).collect()).unwrap();
        let mut at = Tensor::zeros(&[3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                at.data_mut()[j * 2 + i] = a.at2(i, j);
            }
        }
        assert_eq!(matmul_tn(&a, &c).unwrap(), matmul(&at, &c).unwrap());
    }

    #[test]
    fn matmul_shape_mismatch_is_structured() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        match matmul(&a, &b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let ls = log_softmax(&a);
        for i in 0..2 {
            let s: f64 = ls.row(i).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let a = Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let p = softmax(&a);
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_add_handles_neg_infinity() {
        assert_eq!(log_add(f64::NEG_INFINITY, -3.0), -3.0);
        assert_eq!(log_add(-3.0, f64::NEG_INFINITY), -3.0);
        let v = log_add(-700.0, -701.0);
        assert!(v.is_finite());
        assert!((v - (-700.0 + (1.0f64 + (-1.0f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let a = Tensor::from_vec(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 10.0]).unwrap();
        let gain = Tensor::filled(&[4], 1.0);
        let bias = Tensor::zeros(&[4]);
        let out = layer_norm(&a, &gain, &bias).unwrap();
        for i in 0..2 {
            let row = out.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
