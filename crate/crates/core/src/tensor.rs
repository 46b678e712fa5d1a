//! Dense value types shared by every kernel in the crate.
//!
//! All containers are row-major and own their storage. `f32` is the public
//! element type; `f64` is supported throughout so that verifiers can rerun a
//! pipeline in double precision.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element usable by the tensor kernels.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static
{
    /// Short dtype name recorded in reports.
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the given shapes and strides must be in
    /// bounds of the corresponding pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self * rhs` through the blocked GEMM.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm(
            self.rows,
            self.cols,
            rhs.cols,
            MatRef::row_major(&self.data, self.cols),
            MatRef::row_major(&rhs.data, rhs.cols),
            T::zero(),
            MatMut::row_major(&mut out.data, rhs.cols),
        );
        Ok(out)
    }

    /// `selfᵀ * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != rhs.rows {
            return Err(Error::shape(format!(
                "transposed matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        gemm(
            self.cols,
            self.rows,
            rhs.cols,
            MatRef::col_major(&self.data, self.cols),
            MatRef::row_major(&rhs.data, rhs.cols),
            T::zero(),
            MatMut::row_major(&mut out.data, rhs.cols),
        );
        Ok(out)
    }

    /// `self * rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.cols {
            return Err(Error::shape(format!(
                "matmul {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        gemm(
            self.rows,
            self.cols,
            rhs.rows,
            MatRef::row_major(&self.data, self.cols),
            MatRef::col_major(&rhs.data, rhs.cols),
            T::zero(),
            MatMut::row_major(&mut out.data, rhs.rows),
        );
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }

    pub fn cast<U: Element>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: cast_slice(&self.data),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Borrowed strided matrix operand.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major view with `ld` elements per row.
    pub fn row_major(data: &'a [T], ld: usize) -> Self {
        Self {
            data,
            rs: ld,
            cs: 1,
        }
    }

    /// Transposed view of a row-major buffer with `ld` elements per row.
    pub fn col_major(data: &'a [T], ld: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: ld,
        }
    }
}

pub struct MatMut<'a, T> {
    data: &'a mut [T],
    rs: usize,
    cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn row_major(data: &'a mut [T], ld: usize) -> Self {
        Self {
            data,
            rs: ld,
            cs: 1,
        }
    }
}

fn max_offset(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// `c = a * b + beta * c` for an `m x k` by `k x n` product.
///
/// Panics if a view is too small for the requested shape.
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: MatMut<'_, T>,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            for col in 0..n {
                let v = &mut c.data[r * c.rs + col * c.cs];
                *v = *v * beta;
            }
        }
        return;
    }
    assert!(
        max_offset(m, k, a.rs, a.cs) < a.data.len(),
        "gemm: lhs view out of bounds"
    );
    assert!(
        max_offset(k, n, b.rs, b.cs) < b.data.len(),
        "gemm: rhs view out of bounds"
    );
    assert!(
        max_offset(m, n, c.rs, c.cs) < c.data.len(),
        "gemm: output view out of bounds"
    );
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Rank-4 tensor in `(batch, channel, height, width)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    /// Builds a tensor, rejecting a length mismatch or any non-finite value.
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "tensor {dims:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f([b, c, h, w]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// Wraps computed data, failing if anything overflowed to NaN/Inf.
    pub(crate) fn from_computed(dims: [usize; 4], data: Vec<T>, op: &'static str) -> Result<Self> {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(b, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `C*H*W` slab of one batch item.
    pub fn item(&self, b: usize) -> &[T] {
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[b * stride..(b + 1) * stride]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum; used for skip connections.
    pub fn add(&self, other: &Tensor4<T>) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "add {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Self::from_computed(self.dims, data, "tensor add")
    }

    pub fn max_abs_diff(&self, other: &Tensor4<T>) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different shapes");
        max_abs_diff(&self.data, &other.data)
    }

    pub fn cast<U: Element>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: cast_slice(&self.data),
        }
    }
}

/// Token sequence batch in `(batch, length, model_dim)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqTensor<T = f32> {
    batch: usize,
    len: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Element> SeqTensor<T> {
    pub fn new(batch: usize, len: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != batch * len * dim {
            return Err(Error::shape(format!(
                "sequence ({batch}, {len}, {dim}) needs {} values, got {}",
                batch * len * dim,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sequence construction"));
        }
        Ok(Self {
            batch,
            len,
            dim,
            data,
        })
    }

    pub fn zeros(batch: usize, len: usize, dim: usize) -> Self {
        Self {
            batch,
            len,
            dim,
            data: vec![T::zero(); batch * len * dim],
        }
    }

    pub(crate) fn from_computed(
        batch: usize,
        len: usize,
        dim: usize,
        data: Vec<T>,
        op: &'static str,
    ) -> Result<Self> {
        debug_assert_eq!(data.len(), batch * len * dim);
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(Self {
            batch,
            len,
            dim,
            data,
        })
    }

    /// Stacks per-item `len x dim` matrices into one batch.
    pub fn from_items(items: Vec<Matrix<T>>) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::shape("empty sequence batch"));
        };
        let (len, dim) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(items.len() * len * dim);
        for m in &items {
            if m.rows() != len || m.cols() != dim {
                return Err(Error::shape("sequence items differ in shape"));
            }
            data.extend_from_slice(m.data());
        }
        Self::from_computed(items.len(), len, dim, data, "sequence stack")
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn token(&self, b: usize, t: usize) -> &[T] {
        let start = (b * self.len + t) * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    pub fn token_mut(&mut self, b: usize, t: usize) -> &mut [T] {
        let start = (b * self.len + t) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// Copy of one batch item as a `len x dim` matrix.
    pub fn item(&self, b: usize) -> Matrix<T> {
        let stride = self.len * self.dim;
        Matrix {
            rows: self.len,
            cols: self.dim,
            data: self.data[b * stride..(b + 1) * stride].to_vec(),
        }
    }

    pub fn add(&self, other: &SeqTensor<T>) -> Result<Self> {
        if (self.batch, self.len, self.dim) != (other.batch, other.len, other.dim) {
            return Err(Error::shape("sequence add on different shapes"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Self::from_computed(self.batch, self.len, self.dim, data, "sequence add")
    }

    pub fn max_abs_diff(&self, other: &SeqTensor<T>) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }
}

pub fn max_abs_diff<T: Element>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_diff on different lengths");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn cast_slice<T: Element, U: Element>(src: &[T]) -> Vec<U> {
    src.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect()
}
