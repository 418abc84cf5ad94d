//! Dense row-major `f64` tensors and the forward kernels used by the graph.
//!
//! All reductions run in ascending index order so results are reproducible
//! bit-for-bit across runs and platforms.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn num_rows(&self) -> usize {
        self.data
            .len()
            .checked_div(self.last_dim())
            .unwrap_or_else(|| self.shape[..self.shape.len() - 1].iter().product())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum of all entries in ascending index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn matrix_dims(&self, op: &'static str, other: &Tensor) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self · other` for `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul", other)?;
        if other.rank() != 2 || other.shape[0] != k {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let n = other.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let c_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ` for `[m×k] · [n×k]ᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul_nt", other)?;
        if other.rank() != 2 || other.shape[1] != k {
            return Err(Error::shape("matmul_nt", &self.shape, &other.shape));
        }
        let n = other.shape[0];
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.push(acc);
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other` for `[k×m]ᵀ · [k×n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.matrix_dims("matmul_tn", other)?;
        if other.rank() != 2 || other.shape[0] != k {
            return Err(Error::shape("matmul_tn", &self.shape, &other.shape));
        }
        let n = other.shape[1];
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let c_row = &mut out[i * n..(i + 1) * n];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", &self.shape, &[]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() != 2 || start + len > self.shape[0] {
            return Err(Error::shape("slice_rows", &self.shape, &[start, len]));
        }
        let d = self.shape[1];
        Ok(Tensor {
            shape: vec![len, d],
            data: self.data[start * d..(start + len) * d].to_vec(),
        })
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() != 2 || start + len > self.shape[1] {
            return Err(Error::shape("slice_cols", &self.shape, &[start, len]));
        }
        let (m, d) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * d + start..i * d + start + len]);
        }
        Ok(Tensor {
            shape: vec![m, len],
            data: out,
        })
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyAxis { op: "concat_rows" })?;
        let d = first.last_dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != 2 || p.shape[1] != d {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, d],
            data,
        })
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyAxis { op: "concat_cols" })?;
        let m = first.shape[0];
        for p in parts {
            if p.rank() != 2 || p.shape[0] != m {
                return Err(Error::shape("concat_cols", &first.shape, &p.shape));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor {
            shape: vec![m, total],
            data,
        })
    }

    /// Adds a length-`d` vector to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let d = self.last_dim();
        if bias.len() != d || bias.rank() != 1 {
            return Err(Error::shape("add_row", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(d.max(1)) {
            for (x, b) in row.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(out)
    }
}

/// Row-wise layer normalization over the last axis (population variance).
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_with_stats(x, gamma, beta, eps)?.0)
}

/// Layer norm that also returns the normalized rows and per-row `1/σ` for backward.
pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let d = x.last_dim();
    if d == 0 || x.rank() == 0 {
        return Err(Error::EmptyAxis { op: "layer_norm" });
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let mut out = Vec::with_capacity(x.len());
    let mut normed = Vec::with_capacity(x.len());
    let mut rstds = Vec::with_capacity(x.num_rows());
    for row in x.data.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        rstds.push(rstd);
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mean) * rstd;
            normed.push(xh);
            out.push(xh * gamma.data[j] + beta.data[j]);
        }
    }
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        Tensor {
            shape: x.shape.clone(),
            data: normed,
        },
        rstds,
    ))
}

/// Softmax over the last axis with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    if d > 0 {
        for row in x.data.chunks(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for &v in row {
                let e = libm::exp(v - max);
                total += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= total;
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Exact (erf-based) GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Arithmetic mean along `axis`, dropping that axis.
///
/// Each output entry is `lo + Σ(v - lo) / count` over the sorted values, where
/// `lo` is the smallest. The result therefore does not depend on the order of
/// slices along the axis, and a stack of identical slices returns that slice
/// exactly.
pub fn mean_over_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape("mean_over_axis", x.shape(), &[axis]));
    }
    let count = x.shape[axis];
    if count == 0 {
        return Err(Error::EmptyAxis { op: "mean_over_axis" });
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * inner);
    let mut column = vec![0.0; count];
    for o in 0..outer {
        for i in 0..inner {
            for (k, c) in column.iter_mut().enumerate() {
                *c = x.data[(o * count + k) * inner + i];
            }
            out.push(order_free_mean(&mut column));
        }
    }
    let mut shape = x.shape.clone();
    shape.remove(axis);
    Ok(Tensor { shape, data: out })
}

pub(crate) fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let lo = values[0];
    let mut acc = 0.0;
    for &v in values.iter() {
        acc += v - lo;
    }
    lo + acc / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&b).unwrap(), b);
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, naive_matmul(&a, &b));
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        let z = Tensor::zeros(&[2, 2]).matmul(&Tensor::ones(&[2, 5])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_variants_match_transposes() {
        let mut rng = crate::numcore::Rng::new(3);
        let a = rng.normal_tensor(&[4, 3], 1.0);
        let b = rng.normal_tensor(&[5, 3], 1.0);
        let nt = a.matmul_nt(&b).unwrap();
        assert_eq!(nt, naive_matmul(&a, &b.transpose().unwrap()));
        let c = rng.normal_tensor(&[4, 2], 1.0);
        let tn = a.matmul_tn(&c).unwrap();
        assert_eq!(tn, naive_matmul(&a.transpose().unwrap(), &c));
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let y = layer_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 0.0).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        for (got, want) in y.data().iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((y.data()[0] + 1.22474).abs() < 1e-5);

        let beta = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let c = layer_norm(&Tensor::full(&[3], 7.25), &Tensor::ones(&[3]), &beta, 1e-5).unwrap();
        assert_eq!(c, beta);

        // direct formula
        let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        let y = layer_norm(&x, &Tensor::full(&[4], 2.0), &Tensor::ones(&[4]), 1e-5).unwrap();
        let mean = 2.5;
        let var = (2.25 + 0.25 + 0.25 + 2.25) / 4.0;
        for (i, v) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            let want = 2.0 * (v - mean) / (var + 1e-5f64).sqrt() + 1.0;
            assert!((y.data()[i] - want).abs() < 1e-12);
        }
        assert!(matches!(
            layer_norm(
                &Tensor::zeros(&[2, 0]),
                &Tensor::zeros(&[0]),
                &Tensor::zeros(&[0]),
                1e-5
            ),
            Err(Error::EmptyAxis { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&Tensor::vector(vec![0.0, 0.0])).data(), &[0.5, 0.5]);
        assert_eq!(softmax(&Tensor::vector(vec![1000.0, 1000.0])).data(), &[0.5, 0.5]);
        let y = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((y.data()[i] - v.exp() / z).abs() < 1e-12);
        }
        assert!((y.data()[0] - 0.09003).abs() < 1e-5);
        assert!((y.data()[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(30.0) - 30.0).abs() < 1e-12);
        // Φ(1) = 0.841344746...
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn mean_over_axis_examples() {
        let one = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mean_over_axis(&one, 0).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        let stack = Tensor::new(vec![2, 2, 2], vec![1.0, 3.0, 2.0, 4.0, 3.0, 5.0, 4.0, 6.0]).unwrap();
        let m = mean_over_axis(&stack, 0).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[2.0, 4.0, 3.0, 5.0]);

        let mut rng = crate::numcore::Rng::new(11);
        let x = rng.normal_tensor(&[3, 2, 2], 1.0);
        for axis in 0..3 {
            let got = mean_over_axis(&x, axis).unwrap();
            let s = x.shape();
            let mut idx = 0;
            for a in 0..s[0] {
                for b in 0..s[1] {
                    for c in 0..s[2] {
                        let coords = [a, b, c];
                        if coords[axis] != 0 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for k in 0..s[axis] {
                            let mut cc = coords;
                            cc[axis] = k;
                            acc += x.data()[(cc[0] * s[1] + cc[1]) * s[2] + cc[2]];
                        }
                        assert!((got.data()[idx] - acc / s[axis] as f64).abs() < 1e-12);
                        idx += 1;
                    }
                }
            }
        }
        assert!(matches!(
            mean_over_axis(&Tensor::zeros(&[0, 3]), 0),
            Err(Error::EmptyAxis { .. })
        ));
    }

    #[test]
    fn mean_of_identical_slices_is_exact() {
        let v = [0.1, 0.7, -3.3];
        let mut data = Vec::new();
        for _ in 0..7 {
            data.extend_from_slice(&v);
        }
        let m = mean_over_axis(&Tensor::new(vec![7, 3], data).unwrap(), 0).unwrap();
        assert_eq!(m.data(), &v);
    }
}
