//! Dense row-major tensors and the numeric kernels the rest of the crate
//! builds on.
//!
//! Every kernel is single-threaded and reduces in a fixed order: along the
//! reduced axis from index 0 upwards, batch entries in ascending order. Given
//! identical inputs the results are bitwise reproducible.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (verification).
pub trait Scalar: Float + Debug + Display + Default + Sum + Send + Sync + 'static {
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` over strided row-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: the slices cover every element addressed by the
                // strides above (checked by the caller's shape logic and the
                // length assertion), and `c` does not alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense n-dimensional array, row-major and contiguous.
///
/// `shape.iter().product() == data.len()` always holds; a scalar has the
/// empty shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || k == 0 || k > padded || !(padded - k).is_multiple_of(stride) {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape("new", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(!shape.contains(&0), "zero-sized dimension in {shape:?}");
        let data = vec![value; numel(&shape)];
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if self.shape.is_empty() || start >= end || end > self.shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} of {:?}", self.shape),
            ));
        }
        let row = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * row..end * row].to_vec(),
        })
    }

    /// Gathers rows of the leading axis in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(Error::shape("select_rows", "scalar has no rows"));
        }
        let row = numel(&self.shape[1..]);
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::shape(
                    "select_rows",
                    format!("row {r} out of range for {:?}", self.shape),
                ));
            }
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: T) -> Self {
        self.map(|v| v + c)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::of(self.data.len() as f64)
    }

    pub fn max_all(&self) -> T {
        self.data
            .iter()
            .fold(T::neg_infinity(), |acc, &v| if v > acc { v } else { acc })
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape.len() {
            Err(Error::shape(op, format!("axis {axis} out of range for {:?}", self.shape)))
        } else {
            Ok(())
        }
    }

    fn reduce_axis(&self, axis: usize, op: &'static str, f: impl Fn(&mut dyn Iterator<Item = T>) -> T) -> Result<Self> {
        self.check_axis(axis, op)?;
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut it = (0..n).map(|k| self.data[base + k * inner]);
                data.push(f(&mut it));
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data })
    }

    /// Sum along `axis`; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, "sum_axis", &|it: &mut dyn Iterator<Item = T>| {
            it.fold(T::zero(), |a, v| a + v)
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let n = T::of(self.shape.get(axis).copied().unwrap_or(1) as f64);
        Ok(self.sum_axis(axis)?.map(|v| v / n))
    }

    pub fn max_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, "max_axis", &|it: &mut dyn Iterator<Item = T>| {
            it.fold(T::neg_infinity(), |a, v| if v > a { v } else { a })
        })
    }

    /// Index of the largest entry along `axis`; the lowest index wins ties.
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>> {
        self.check_axis(axis, "argmax")?;
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut best = 0;
                for k in 1..n {
                    if self.data[base + k * inner] > self.data[base + best * inner] {
                        best = k;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    /// `log Σ exp` along `axis`, computed with max subtraction.
    pub fn log_sum_exp(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, "log_sum_exp", &|it: &mut dyn Iterator<Item = T>| {
            let vals: Vec<T> = it.collect();
            let m = vals.iter().fold(T::neg_infinity(), |a, &v| if v > a { v } else { a });
            let s = vals.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
            m + s.ln()
        })
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis, "log_softmax")?;
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut data = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..n {
                    let v = self.data[base + k * inner];
                    if v > m {
                        m = v;
                    }
                }
                let mut s = T::zero();
                for k in 0..n {
                    s = s + (self.data[base + k * inner] - m).exp();
                }
                let lse = m + s.ln();
                for k in 0..n {
                    data[base + k * inner] = self.data[base + k * inner] - lse;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis, "softmax")?;
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut data = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..n {
                    let v = self.data[base + k * inner];
                    if v > m {
                        m = v;
                    }
                }
                let mut s = T::zero();
                for k in 0..n {
                    let e = (self.data[base + k * inner] - m).exp();
                    data[base + k * inner] = e;
                    s = s + e;
                }
                for k in 0..n {
                    data[base + k * inner] = data[base + k * inner] / s;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// `op(self) · op(other)` for rank-2 operands, with optional transposes.
    pub fn matmul_t(&self, other: &Self, trans_a: bool, trans_b: bool) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("rank-2 operands required, got {:?} and {:?}", self.shape, other.shape),
            ));
        }
        let (ar, ac) = (self.shape[0], self.shape[1]);
        let (br, bc) = (other.shape[0], other.shape[1]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?}{} x {:?}{}",
                    self.shape,
                    if trans_a { "ᵀ" } else { "" },
                    other.shape,
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), &self.data, rsa, csa, &other.data, rsb, csb, T::zero(), &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    /// Adds `bias[c]` to every entry whose axis-1 index is `c`.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        if self.rank() < 2 || bias.rank() != 1 || bias.shape[0] != self.shape[1] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match axis 1 of {:?}", bias.shape, self.shape),
            ));
        }
        let (outer, c, inner) = split_axis(&self.shape, 1);
        let mut data = self.data.clone();
        for o in 0..outer {
            for ch in 0..c {
                let b = bias.data[ch];
                let base = (o * c + ch) * inner;
                for v in &mut data[base..base + inner] {
                    *v = *v + b;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Sums over every axis except axis 1 (the adjoint of [`Tensor::add_bias`]).
    pub fn bias_grad(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::shape("bias_grad", format!("rank >= 2 required, got {:?}", self.shape)));
        }
        let (outer, c, inner) = split_axis(&self.shape, 1);
        let mut out = vec![T::zero(); c];
        for o in 0..outer {
            for (ch, acc) in out.iter_mut().enumerate() {
                let base = (o * c + ch) * inner;
                for &v in &self.data[base..base + inner] {
                    *acc = *acc + v;
                }
            }
        }
        Ok(Tensor {
            shape: vec![c],
            data: out,
        })
    }

    /// Repeats a rank-1 tensor along every axis of `shape` except axis 1.
    pub fn broadcast_axis1(&self, shape: &[usize]) -> Result<Self> {
        if self.rank() != 1 || shape.len() < 2 || shape[1] != self.shape[0] {
            return Err(Error::shape(
                "broadcast_axis1",
                format!("{:?} cannot broadcast to {shape:?}", self.shape),
            ));
        }
        Tensor::zeros(shape.to_vec()).add_bias(self)
    }

    fn conv_dims(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<(usize, usize)> {
        if x_shape.len() != 4 || w_shape.len() != 4 || x_shape[1] != w_shape[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {x_shape:?} incompatible with kernel {w_shape:?}"),
            ));
        }
        let oh = conv_out(x_shape[2], w_shape[2], stride, pad);
        let ow = conv_out(x_shape[3], w_shape[3], stride, pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {:?} stride {stride} padding {pad} gives non-integral output on {:?}",
                    &w_shape[2..],
                    &x_shape[2..]
                ),
            )),
        }
    }

    /// Cross-correlation of `x[B×C×H×W]` with `w[O×C×kh×kw]`, plus an
    /// optional per-output-channel bias.
    pub fn conv2d(&self, w: &Self, bias: Option<&Self>, stride: usize, pad: usize) -> Result<Self> {
        let (oh, ow) = Self::conv_dims(&self.shape, &w.shape, stride, pad)?;
        let geom = ConvGeom::new(&self.shape, &w.shape, stride, pad, oh, ow);
        let mut out = vec![T::zero(); geom.b * geom.o * geom.ohw()];
        let mut cols = vec![T::zero(); geom.ckk() * geom.ohw()];
        for b in 0..geom.b {
            geom.im2col(&self.data[b * geom.chw()..(b + 1) * geom.chw()], &mut cols);
            let dst = &mut out[b * geom.o * geom.ohw()..(b + 1) * geom.o * geom.ohw()];
            let k = geom.ckk() as isize;
            let n = geom.ohw() as isize;
            T::gemm(geom.o, geom.ckk(), geom.ohw(), T::one(), &w.data, k, 1, &cols, n, 1, T::zero(), dst);
        }
        let y = Tensor {
            shape: vec![geom.b, geom.o, oh, ow],
            data: out,
        };
        match bias {
            Some(bias) => y.add_bias(bias),
            None => Ok(y),
        }
    }

    /// Adjoint of [`Tensor::conv2d`] with respect to its input: maps an
    /// output-shaped `g[B×O×H'×W']` back to `B×C×H×W`.
    pub fn conv2d_input_grad(&self, w: &Self, stride: usize, pad: usize, input_hw: (usize, usize)) -> Result<Self> {
        if self.rank() != 4 || w.rank() != 4 || self.shape[1] != w.shape[0] {
            return Err(Error::shape(
                "conv2d_input_grad",
                format!("gradient {:?} incompatible with kernel {:?}", self.shape, w.shape),
            ));
        }
        let x_shape = [self.shape[0], w.shape[1], input_hw.0, input_hw.1];
        let (oh, ow) = Self::conv_dims(&x_shape, &w.shape, stride, pad)?;
        if (oh, ow) != (self.shape[2], self.shape[3]) {
            return Err(Error::shape(
                "conv2d_input_grad",
                format!("gradient spatial {:?} does not match input {input_hw:?}", &self.shape[2..]),
            ));
        }
        let geom = ConvGeom::new(&x_shape, &w.shape, stride, pad, oh, ow);
        let mut out = vec![T::zero(); geom.b * geom.chw()];
        let mut cols = vec![T::zero(); geom.ckk() * geom.ohw()];
        for b in 0..geom.b {
            let g = &self.data[b * geom.o * geom.ohw()..(b + 1) * geom.o * geom.ohw()];
            let ckk = geom.ckk() as isize;
            let n = geom.ohw() as isize;
            // cols = wᵀ · g
            T::gemm(geom.ckk(), geom.o, geom.ohw(), T::one(), &w.data, 1, ckk, g, n, 1, T::zero(), &mut cols);
            geom.col2im(&cols, &mut out[b * geom.chw()..(b + 1) * geom.chw()]);
        }
        Ok(Tensor {
            shape: x_shape.to_vec(),
            data: out,
        })
    }

    /// Adjoint of [`Tensor::conv2d`] with respect to its kernel:
    /// `Σ_b g_b · cols(x_b)ᵀ`, accumulated in batch order.
    pub fn conv2d_weight_grad(&self, g: &Self, stride: usize, pad: usize, kernel_hw: (usize, usize)) -> Result<Self> {
        if self.rank() != 4 || g.rank() != 4 || self.shape[0] != g.shape[0] {
            return Err(Error::shape(
                "conv2d_weight_grad",
                format!("input {:?} incompatible with gradient {:?}", self.shape, g.shape),
            ));
        }
        let w_shape = [g.shape[1], self.shape[1], kernel_hw.0, kernel_hw.1];
        let (oh, ow) = Self::conv_dims(&self.shape, &w_shape, stride, pad)?;
        if (oh, ow) != (g.shape[2], g.shape[3]) {
            return Err(Error::shape(
                "conv2d_weight_grad",
                format!("gradient spatial {:?} does not match output {:?}", &g.shape[2..], (oh, ow)),
            ));
        }
        let geom = ConvGeom::new(&self.shape, &w_shape, stride, pad, oh, ow);
        let mut out = vec![T::zero(); geom.o * geom.ckk()];
        let mut cols = vec![T::zero(); geom.ckk() * geom.ohw()];
        for b in 0..geom.b {
            geom.im2col(&self.data[b * geom.chw()..(b + 1) * geom.chw()], &mut cols);
            let gb = &g.data[b * geom.o * geom.ohw()..(b + 1) * geom.o * geom.ohw()];
            let n = geom.ohw() as isize;
            // out += g_b · colsᵀ
            T::gemm(geom.o, geom.ohw(), geom.ckk(), T::one(), gb, n, 1, &cols, 1, n, T::one(), &mut out);
        }
        Ok(Tensor {
            shape: w_shape.to_vec(),
            data: out,
        })
    }

    fn pool_dims(shape: &[usize], kernel: usize, stride: usize) -> Result<(usize, usize)> {
        if shape.len() != 4 {
            return Err(Error::shape("avgpool2d", format!("rank-4 input required, got {shape:?}")));
        }
        match (conv_out(shape[2], kernel, stride, 0), conv_out(shape[3], kernel, stride, 0)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::shape(
                "avgpool2d",
                format!("kernel {kernel} stride {stride} does not tile {:?}", &shape[2..]),
            )),
        }
    }

    /// Window mean over `kernel×kernel` windows with the given stride.
    pub fn avgpool2d(&self, kernel: usize, stride: usize) -> Result<Self> {
        let (oh, ow) = Self::pool_dims(&self.shape, kernel, stride)?;
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let inv = T::one() / T::of((kernel * kernel) as f64);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = T::zero();
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            s = s + src[(oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out.push(s * inv);
                }
            }
        }
        Ok(Tensor {
            shape: vec![b, c, oh, ow],
            data: out,
        })
    }

    /// Adjoint of [`Tensor::avgpool2d`]: spreads each output gradient evenly
    /// over its window.
    pub fn avgpool2d_backward(&self, kernel: usize, stride: usize, input_shape: &[usize]) -> Result<Self> {
        let (oh, ow) = Self::pool_dims(input_shape, kernel, stride)?;
        if self.shape != [input_shape[0], input_shape[1], oh, ow] {
            return Err(Error::shape(
                "avgpool2d_backward",
                format!("gradient {:?} does not match pooled {input_shape:?}", self.shape),
            ));
        }
        let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let inv = T::one() / T::of((kernel * kernel) as f64);
        let mut out = vec![T::zero(); b * c * h * w];
        for plane in 0..b * c {
            let dst = &mut out[plane * h * w..(plane + 1) * h * w];
            let g = &self.data[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = g[oy * ow + ox] * inv;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = (oy * stride + ky) * w + ox * stride + kx;
                            dst[idx] = dst[idx] + v;
                        }
                    }
                }
            }
        }
        Ok(Tensor {
            shape: input_shape.to_vec(),
            data: out,
        })
    }

    /// Mean over the spatial axes: `B×C×H×W → B×C`.
    pub fn global_avgpool(&self) -> Result<Self> {
        if self.rank() != 4 {
            return Err(Error::shape("global_avgpool", format!("rank-4 input required, got {:?}", self.shape)));
        }
        let (b, c) = (self.shape[0], self.shape[1]);
        let hw = self.shape[2] * self.shape[3];
        let inv = T::one() / T::of(hw as f64);
        let data = self
            .data
            .chunks(hw)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        Ok(Tensor {
            shape: vec![b, c],
            data,
        })
    }

    /// Adjoint of [`Tensor::global_avgpool`].
    pub fn global_avgpool_backward(&self, hw: (usize, usize)) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape(
                "global_avgpool_backward",
                format!("rank-2 gradient required, got {:?}", self.shape),
            ));
        }
        let n = hw.0 * hw.1;
        let inv = T::one() / T::of(n as f64);
        let mut data = Vec::with_capacity(self.data.len() * n);
        for &g in &self.data {
            data.extend(std::iter::repeat_n(g * inv, n));
        }
        Ok(Tensor {
            shape: vec![self.shape[0], self.shape[1], hw.0, hw.1],
            data,
        })
    }
}

/// Index bookkeeping shared by the im2col-based convolution kernels.
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize, oh: usize, ow: usize) -> Self {
        ConvGeom {
            b: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            kh: w[2],
            kw: w[3],
            oh,
            ow,
            stride,
            pad,
        }
    }

    fn chw(&self) -> usize {
        self.c * self.h * self.w
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for output position (oy, ox) and kernel tap (ky, kx),
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let ohw = self.ohw();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, xx)) => x[(ch * self.h + y) * self.w + xx],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let ohw = self.ohw();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                let idx = (ch * self.h + y) * self.w + xx;
                                x[idx] = x[idx] + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
