//! Dense row-major tensors and the arithmetic kernels everything else
//! builds on.
//!
//! Storage is contiguous `f64`. Values are immutable after construction;
//! every kernel is a pure function. Reductions and dot products accumulate
//! in a fixed left-to-right index order, which makes results bit-identical
//! across runs, thread counts, and the `parallel` feature toggle.

use crate::error::{Error, Result};
use crate::par;

/// Dense row-major array of `f64`.
///
/// `product(shape) == data.len()` always holds. Values are expected to be
/// finite; operations that can produce non-finite output document it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// 1-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw values. Tensors flowing through kernels
    /// are treated as immutable; this exists for owners of parameter
    /// state (initialization, optimizer updates, test fixtures).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// Interprets the tensor as 2-D, returning `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Dim(format!("expected 2-D tensor, got {:?}", self.shape))),
        }
    }

    /// Reshape without copying; the element count must match.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dim(format!(
            "{op}: shapes differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// matmul

fn matmul_checked(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::Dim(format!(
            "matmul: inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    Ok((m, ka, n))
}

#[inline]
fn matmul_row(arow: &[f64], b: &[f64], n: usize, crow: &mut [f64]) {
    // i-k-j order: each output element accumulates over k left to right,
    // identical to a plain dot product.
    for (kk, &aik) in arow.iter().enumerate() {
        let brow = &b[kk * n..(kk + 1) * n];
        for (c, &bv) in crow.iter_mut().zip(brow) {
            *c += aik * bv;
        }
    }
}

/// Matrix product `[m×k]·[k×n] → [m×n]`, parallel over output rows when the
/// `parallel` feature is enabled.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_checked(a, b)?;
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    par::for_each_row_mut(&mut out, n, |i, crow| {
        matmul_row(&ad[i * k..(i + 1) * k], bd, n, crow);
    });
    Tensor::new(vec![m, n], out)
}

/// Always-sequential matrix product; bit-identical to [`matmul`].
pub fn matmul_seq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_checked(a, b)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        matmul_row(&a.data()[i * k..(i + 1) * k], b.data(), n, &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(vec![m, n], out)
}

/// `A·Bᵀ` for `A: [m×k]`, `B: [n×k]` → `[m×n]`.
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if ka != kb {
        return Err(Error::Dim(format!(
            "matmul_a_bt: inner dimensions differ: {:?} x {:?}ᵀ",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    par::for_each_row_mut(&mut out, n, |i, crow| {
        let arow = &ad[i * ka..(i + 1) * ka];
        for (j, c) in crow.iter_mut().enumerate() {
            let brow = &bd[j * ka..(j + 1) * ka];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *c = acc;
        }
    });
    Tensor::new(vec![m, n], out)
}

/// `Aᵀ·B` for `A: [m×k]`, `B: [m×n]` → `[k×n]`.
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ma, k) = a.dims2()?;
    let (mb, n) = b.dims2()?;
    if ma != mb {
        return Err(Error::Dim(format!(
            "matmul_at_b: outer dimensions differ: {:?}ᵀ x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; k * n];
    let (ad, bd) = (a.data(), b.data());
    par::for_each_row_mut(&mut out, n, |kk, crow| {
        for i in 0..ma {
            let aik = ad[i * k + kk];
            let brow = &bd[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aik * bv;
            }
        }
    });
    Tensor::new(vec![k, n], out)
}

// ---------------------------------------------------------------------------
// softmax

/// Row-wise softmax of a 2-D tensor, stabilized by subtracting each row's
/// maximum before exponentiation.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = a.data.clone();
    par::for_each_row_mut(&mut out, n, |_, row| {
        softmax_in_place(row);
    });
    Tensor::new(vec![m, n], out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

// ---------------------------------------------------------------------------
// reductions

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Square root of the sum of squares over the reduced axes.
    Frobenius,
}

/// Reduces `a` over `axes` (deduplicated, each < rank), dropping the reduced
/// axes from the shape. An empty `axes` list reduces over all axes to a
/// scalar. Accumulation follows ascending row-major input order; the empty
/// sum is 0.
pub fn reduce(a: &Tensor, kind: ReduceKind, axes: &[usize]) -> Result<Tensor> {
    let rank = a.shape.len();
    let mut reduce_axis = vec![false; rank];
    if axes.is_empty() {
        reduce_axis.iter_mut().for_each(|f| *f = true);
    } else {
        for &ax in axes {
            if ax >= rank {
                return Err(Error::Dim(format!(
                    "reduce: axis {ax} out of range for shape {:?}",
                    a.shape
                )));
            }
            reduce_axis[ax] = true;
        }
    }

    let out_shape: Vec<usize> = (0..rank)
        .filter(|i| !reduce_axis[*i])
        .map(|i| a.shape[i])
        .collect();
    let out_len: usize = out_shape.iter().product::<usize>().max(1);
    let reduced_count: usize = (0..rank)
        .filter(|i| reduce_axis[*i])
        .map(|i| a.shape[i])
        .product();

    if kind == ReduceKind::Mean && reduced_count == 0 {
        return Err(Error::Domain("reduce: mean over an empty slice".into()));
    }

    // out strides over the kept axes
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        if !reduce_axis[i] {
            out_strides[i] = acc;
            acc *= a.shape[i];
        }
    }

    let mut out = vec![0.0; out_len];
    let mut coord = vec![0usize; rank];
    for &v in a.data.iter() {
        let mut oi = 0;
        for i in 0..rank {
            oi += coord[i] * out_strides[i];
        }
        out[oi] += match kind {
            ReduceKind::Sum | ReduceKind::Mean => v,
            ReduceKind::Frobenius => v * v,
        };
        // advance row-major coordinate
        for i in (0..rank).rev() {
            coord[i] += 1;
            if coord[i] < a.shape[i] {
                break;
            }
            coord[i] = 0;
        }
    }

    match kind {
        ReduceKind::Mean => {
            let c = reduced_count as f64;
            out.iter_mut().for_each(|v| *v /= c);
        }
        ReduceKind::Frobenius => out.iter_mut().for_each(|v| *v = v.sqrt()),
        ReduceKind::Sum => {}
    }

    let shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    Tensor::new(shape, out)
}

// ---------------------------------------------------------------------------
// elementwise

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "sub")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "mul")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape.clone(), data)
}

/// Pointwise sign with `sign(0) = 0`.
pub fn sign(a: &Tensor) -> Tensor {
    let data = a.data.iter().map(|&v| sign_scalar(v)).collect();
    Tensor { shape: a.shape.clone(), data }
}

#[inline]
pub(crate) fn sign_scalar(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn abs(a: &Tensor) -> Tensor {
    let data = a.data.iter().map(|v| v.abs()).collect();
    Tensor { shape: a.shape.clone(), data }
}

/// Scalar broadcast multiply.
pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data = a.data.iter().map(|v| v * c).collect();
    Tensor { shape: a.shape.clone(), data }
}
