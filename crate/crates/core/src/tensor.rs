//! Dense row-major `f64` tensors.

use std::fmt;

use crate::par;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("reduction over an empty tensor or axis")]
    EmptyReduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::LengthMismatch { len: data.len(), shape });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
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

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Size of the leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per leading index.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Gathers leading-axis rows into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let n = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2("transpose")?;
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

    fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: self.shape.clone(),
            right: other.shape.clone(),
        };
        let (m, k) = self.dims2("matmul").map_err(|_| mismatch())?;
        let (k2, n) = other.dims2("matmul").map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        if n > 0 {
            matmul_into(&self.data, &other.data, &mut out, k, n);
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn elementwise(&self, op: ElemOp, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let f = match op {
            ElemOp::Add => |a: f64, b: f64| a + b,
            ElemOp::Sub => |a: f64, b: f64| a - b,
            ElemOp::Mul => |a: f64, b: f64| a * b,
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Scalar broadcast form of [`elementwise`](Self::elementwise).
    pub fn elementwise_scalar(&self, op: ElemOp, s: f64) -> Tensor {
        match op {
            ElemOp::Add => self.map(|x| x + s),
            ElemOp::Sub => self.map(|x| x - s),
            ElemOp::Mul => self.scale(s),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(ElemOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(ElemOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(ElemOp::Mul, other)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// In-place `self += s * other`.
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_scaled",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn reduce(&self, op: ReduceOp, axis: Option<usize>) -> Result<Tensor, TensorError> {
        let Some(axis) = axis else {
            if self.data.is_empty() {
                return Err(TensorError::EmptyReduction);
            }
            return Ok(Tensor::scalar(reduce_slice(op, self.data.iter().copied())));
        };
        if axis >= self.rank() {
            return Err(TensorError::BadAxis {
                axis,
                rank: self.rank(),
            });
        }
        let len = self.shape[axis];
        if len == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                data.push(reduce_slice(op, (0..len).map(|j| self.data[base + j * inner])));
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data })
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.batch())
            .map(|i| {
                let r = self.row(i);
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn reduce_slice(op: ReduceOp, it: impl Iterator<Item = f64>) -> f64 {
    match op {
        ReduceOp::Sum => it.sum(),
        ReduceOp::Mean => {
            let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            s / n as f64
        }
        ReduceOp::Max => it.fold(f64::NEG_INFINITY, f64::max),
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, rows of `out` computed independently.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
    par::for_each_chunk_mut(out, n, |i, orow| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let b = Tensor::new(vec![3, 5], (0..15).map(|x| x as f64 - 7.0).collect()).unwrap();
        let c = Tensor::zeros(&[2, 3]).matmul(&b).unwrap();
        assert_eq!(c, Tensor::zeros(&[2, 5]));
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.scale(0.0).data(), &[0.0, 0.0]);
        let c = Tensor::from_vec(vec![2.0, 3.0]);
        let d = Tensor::from_vec(vec![4.0, 5.0]);
        assert_eq!(c.mul(&d).unwrap().data(), &[8.0, 15.0]);
        assert_eq!(d.sub(&c).unwrap().data(), &[2.0, 2.0]);
        assert!(a.add(&Tensor::zeros(&[3])).is_err());
        assert_eq!(a.elementwise_scalar(ElemOp::Add, 1.0).data(), &[2.0, 3.0]);
    }

    #[test]
    fn reductions() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(t.reduce(ReduceOp::Sum, None).unwrap().data(), &[6.0]);
        let t = Tensor::from_vec(vec![2.0, 4.0]);
        assert_eq!(t.reduce(ReduceOp::Mean, None).unwrap().data(), &[3.0]);
        let t = Tensor::from_rows(&[&[1.0, 5.0], &[3.0, 2.0]]).unwrap();
        assert_eq!(t.reduce(ReduceOp::Max, Some(1)).unwrap().data(), &[5.0, 3.0]);
        assert_eq!(t.reduce(ReduceOp::Sum, Some(0)).unwrap().data(), &[4.0, 7.0]);
    }

    #[test]
    fn reduction_errors() {
        let t = Tensor::from_vec(vec![]);
        assert_eq!(t.reduce(ReduceOp::Mean, None).unwrap_err(), TensorError::EmptyReduction);
        let t = Tensor::zeros(&[2, 0]);
        assert_eq!(
            t.reduce(ReduceOp::Mean, Some(1)).unwrap_err(),
            TensorError::EmptyReduction
        );
        assert!(matches!(
            Tensor::zeros(&[2]).reduce(ReduceOp::Sum, Some(1)),
            Err(TensorError::BadAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn reshape_needs_equal_count() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(t.clone().reshape(&[3, 2]).is_ok());
        assert!(t.reshape(&[4, 2]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    fn mat(m: usize, n: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, m * n).prop_map(move |d| Tensor::new(vec![m, n], d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in mat(3, 4), b in mat(4, 5), c in mat(5, 2)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().chain(right.data()).fold(1.0f64, |m, x| m.max(x.abs()));
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn scale_by_one_is_bitwise_identity(v in proptest::collection::vec(any::<f64>(), 0..50)) {
            let t = Tensor::from_vec(v);
            let s = t.scale(1.0);
            for (a, b) in t.data().iter().zip(s.data()) {
                prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
            }
        }
    }
}
