//! Dense row-major `f64` tensors and the handful of operations the layers need.
//!
//! Layers do their inner loops on slices through the `kernels` helpers; the
//! `Tensor`-level functions are the checked public surface.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const TENSOR_MAGIC: &[u8; 4] = b"MFT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// One-dimensional tensor owning `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("Tensor::from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// `self += s * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_scaled", &self.shape, &other.shape));
        }
        kernels::axpy(s, &other.data, &mut self.data);
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Serializes as `MFT1`, u32 rank, u32 dims, little-endian f64 payload.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.shape.len() + 8 * self.data.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn encoded_len(&self) -> usize {
        8 + 4 * self.shape.len() + 8 * self.data.len()
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated tensor: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let rank = read_u32(r).map_err(fmt)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r).map_err(fmt)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(fmt)?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let t = Tensor::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after tensor", bytes.len())));
        }
        Ok(t)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Standard matrix product of `a: [m×k]` and `b: [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip != 0.0 {
                kernels::axpy(aip, &b.data[p * n..(p + 1) * n], out_row);
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `w: [rows×cols]` times `x: [cols]`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.len() != w.shape[1] {
        return Err(Error::shape("matvec", &w.shape, &x.shape));
    }
    let mut out = vec![0.0; w.shape[0]];
    kernels::matvec(&w.data, w.shape[1], &x.data, &mut out);
    Ok(Tensor::vector(out))
}

/// Numerically safe logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// In-place softmax of one slice with max subtraction.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Softmax over every slice along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Usage(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut out = x.clone();
    let mut lane = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = x.data[(o * len + j) * inner + i];
            }
            softmax_in_place(&mut lane);
            for (j, v) in lane.iter().enumerate() {
                out.data[(o * len + j) * inner + i] = *v;
            }
        }
    }
    Ok(out)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Joins `a` and `b` along `axis`; `a`'s entries come first.
///
/// An empty rank-1 tensor is accepted as a neutral element on either side.
pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    if b.is_empty() && b.rank() == 1 {
        return Ok(a.clone());
    }
    if a.is_empty() && a.rank() == 1 {
        return Ok(b.clone());
    }
    let compatible = a.rank() == b.rank()
        && axis < a.rank()
        && a.shape
            .iter()
            .zip(&b.shape)
            .enumerate()
            .all(|(d, (x, y))| d == axis || x == y);
    if !compatible {
        return Err(Error::shape("concat", &a.shape, &b.shape));
    }
    let (outer, la, inner) = split_axis(&a.shape, axis);
    let lb = b.shape[axis];
    let mut data = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data[o * la * inner..(o + 1) * la * inner]);
        data.extend_from_slice(&b.data[o * lb * inner..(o + 1) * lb * inner]);
    }
    let mut shape = a.shape.clone();
    shape[axis] = la + lb;
    Ok(Tensor { shape, data })
}

/// I.i.d. draws from `[-scale, scale]`.
pub fn init_uniform(rng: &mut Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("init scale must be positive, got {scale}")));
    }
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-scale, scale)).collect();
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Slice-level building blocks for the layer implementations.
pub(crate) mod kernels {
    /// `y += a * x`
    #[inline]
    pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += a * xi;
        }
    }

    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// `out = W x` for row-major `W` with `cols` columns.
    pub fn matvec(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
            *o = dot(row, x);
        }
    }

    /// `dx += Wᵀ dy`.
    pub fn matvec_t_acc(w: &[f64], cols: usize, dy: &[f64], dx: &mut [f64]) {
        for (g, row) in dy.iter().zip(w.chunks_exact(cols)) {
            if *g != 0.0 {
                axpy(*g, row, dx);
            }
        }
    }

    /// `dW += dy ⊗ x`.
    pub fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
        let cols = x.len();
        for (g, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
            if *g != 0.0 {
                axpy(*g, x, row);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        Tensor::matrix(m, n, out).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let x = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &x).unwrap(), x);
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = Tensor::zeros(&[2, 1]);
        assert_eq!(matmul(&a, &z).unwrap(), z);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = init_uniform(&mut rng, &[5, 7], 1.0).unwrap();
        let b = init_uniform(&mut rng, &[7, 3], 1.0).unwrap();
        let got = matmul(&a, &b).unwrap();
        assert_eq!(got.shape(), &[5, 3]);
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch_and_names_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_associative() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let a = init_uniform(&mut rng, &[3, 4], 1.0).unwrap();
            let b = init_uniform(&mut rng, &[4, 2], 1.0).unwrap();
            let c = init_uniform(&mut rng, &[2, 5], 1.0).unwrap();
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
            }
        }
    }

    #[test]
    fn activations_at_zero() {
        assert_eq!(sigmoid(&Tensor::vector(vec![0.0])).data(), &[0.5]);
        assert_eq!(tanh(&Tensor::vector(vec![0.0])).data(), &[0.0]);
        let s = softmax(&Tensor::vector(vec![0.0; 3]), 0).unwrap();
        for p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_symmetry() {
        let mut x = -30.0;
        while x <= 30.0 {
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() <= 1e-12);
            x += 0.37;
        }
    }

    #[test]
    fn softmax_rows_and_columns() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        let rows = softmax(&x, 1).unwrap();
        for r in 0..2 {
            assert!((rows.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let cols = softmax(&x, 0).unwrap();
        for c in 0..3 {
            let s = cols.data()[c] + cols.data()[3 + c];
            assert!((s - 1.0).abs() <= 1e-12);
        }
        // huge logits stay finite thanks to max subtraction
        let big = softmax(&Tensor::vector(vec![1000.0, 1001.0]), 0).unwrap();
        assert!(big.is_finite());
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = Rng::new(9);
        let x = init_uniform(&mut rng, &[6], 4.0).unwrap();
        let shifted = x.map(|v| v + 17.5);
        let a = softmax(&x, 0).unwrap();
        let b = softmax(&shifted, 0).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn concat_cases() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0]);
        assert_eq!(concat(&a, &b, 0).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(concat(&a, &Tensor::vector(vec![]), 0).unwrap(), a);

        let text = Tensor::zeros(&[320]);
        let image = Tensor::zeros(&[4096]);
        assert_eq!(concat(&text, &image, 0).unwrap().shape(), &[4416]);

        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let n = Tensor::matrix(2, 1, vec![9.0, 8.0]).unwrap();
        let joined = concat(&m, &n, 1).unwrap();
        assert_eq!(joined.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        assert!(concat(&m, &n, 0).is_err());
    }

    #[test]
    fn init_uniform_range_and_determinism() {
        let a = init_uniform(&mut Rng::new(1), &[20, 20], 0.3).unwrap();
        let b = init_uniform(&mut Rng::new(1), &[20, 20], 0.3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(a.data().iter().all(|x| x.abs() <= 0.3));
        assert!(init_uniform(&mut Rng::new(1), &[2], 0.0).is_err());
    }

    #[test]
    fn init_uniform_mean_is_centered() {
        let n = 1_000_000;
        let scale = 2.0;
        let t = init_uniform(&mut Rng::new(2024), &[n], scale).unwrap();
        let mean = t.sum() / n as f64;
        let bound = 3.0 * scale / (3.0 * n as f64).sqrt();
        assert!(mean.abs() <= bound, "mean {mean} bound {bound}");
    }

    #[test]
    fn binary_layout() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.5]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"MFT1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), t.encoded_len());
        assert_eq!(Tensor::from_bytes(&bytes).unwrap(), t);
        assert!(Tensor::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn ops_leave_inputs_untouched() {
        let a = Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let before = a.clone();
        let _ = matmul(&a, &a).unwrap();
        let _ = sigmoid(&a);
        let _ = softmax(&a, 1).unwrap();
        let _ = concat(&a, &a, 0).unwrap();
        assert_eq!(a, before);
    }
}
