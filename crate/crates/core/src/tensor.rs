//! Dense 4-D tensors in batch, channel, height, width order.
//!
//! Data is stored row-major with width varying fastest, so a single
//! `(n, c)` plane is one contiguous run of `h * w` values. The same order is
//! used for every on-disk format in this crate.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element type. Implemented for `f32` (training and inference) and
/// `f64` (finite-difference gradient checking).
pub trait Real:
    Float
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` on strided storage.
    ///
    /// # Safety
    /// Strides and extents must describe memory inside the provided pointers.
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
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix product `C = alpha * op(A) * op(B) + beta * C`.
///
/// `op(A)` is `m x k` and `op(B)` is `k x n`. When `trans_a` is set, `a` holds
/// the `k x m` matrix; likewise for `b`. When `beta` is zero the previous
/// contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made with these strides.
    unsafe {
        T::gemm_raw(
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

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl fmt::Debug for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("zero extent in ({n},{c},{h},{w})")));
        }
        n.checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .filter(|&len| len <= isize::MAX as usize / 8)
            .ok_or_else(|| Error::Shape(format!("({n},{c},{h},{w}) is too large")))?;
        Ok(Shape4 { n, c, h, w })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one `h x w` plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    #[inline]
    pub fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn with_batch(&self, n: usize) -> Result<Self> {
        Shape4::new(n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape4,
    data: Vec<T>,
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let mut list = f.debug_list();
        list.entries(self.data.iter().take(SHOWN));
        if self.data.len() > SHOWN {
            list.entry(&format_args!("... {} more", self.data.len() - SHOWN));
        }
        list.finish()
    }
}

/// Which singleton pattern the right-hand side of a broadcast uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// `(n, c, 1, 1)`: one value per channel.
    Channel,
    /// `(n, 1, h, w)`: one value per position.
    Spatial,
}

impl<T: Real> Tensor<T> {
    pub fn filled(shape: Shape4, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} values do not fill {:?}",
                data.len(),
                shape
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Tensor { shape, data })
    }

    /// Unchecked constructor for kernels whose output is finite whenever the
    /// input is.
    pub(crate) fn from_parts(shape: Shape4, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Tensor { shape, data }
    }

    /// Builds a tensor from a closure over `(n, c, h, w)` coordinates.
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for in-place accumulation.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// The `c * h * w` values of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.item();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let len = self.shape.plane();
        let start = (n * self.shape.c + c) * len;
        &self.data[start..start + len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: other.shape,
            });
        }
        Ok(())
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// `(n, c, h, w)` to `(n, c*h*w, 1, 1)`; the element order is unchanged.
    pub fn flatten(&self) -> Self {
        Tensor {
            shape: Shape4 {
                n: self.shape.n,
                c: self.shape.item(),
                h: 1,
                w: 1,
            },
            data: self.data.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn broadcast_kind(&self, rhs: Shape4) -> Result<Broadcast> {
        let a = self.shape;
        if rhs == a {
            Ok(Broadcast::Same)
        } else if rhs.n == a.n && rhs.c == a.c && rhs.h == 1 && rhs.w == 1 {
            Ok(Broadcast::Channel)
        } else if rhs.n == a.n && rhs.c == 1 && rhs.h == a.h && rhs.w == a.w {
            Ok(Broadcast::Spatial)
        } else {
            Err(Error::Broadcast { lhs: a, rhs })
        }
    }

    /// Elementwise product where `b` may be a per-channel `(n,c,1,1)` or a
    /// per-position `(n,1,h,w)` map. The result has `self`'s shape.
    pub fn broadcast_mul(&self, b: &Self) -> Result<Self> {
        let kind = self.broadcast_kind(b.shape)?;
        let s = self.shape;
        let plane = s.plane();
        let mut out = self.data.clone();
        match kind {
            Broadcast::Same => {
                for (o, &v) in out.iter_mut().zip(&b.data) {
                    *o *= v;
                }
            }
            Broadcast::Channel => {
                for (chunk, &g) in out.chunks_mut(plane).zip(&b.data) {
                    for o in chunk {
                        *o *= g;
                    }
                }
            }
            Broadcast::Spatial => {
                for n in 0..s.n {
                    let map = b.item(n);
                    for chunk in out[n * s.item()..(n + 1) * s.item()].chunks_mut(plane) {
                        for (o, &g) in chunk.iter_mut().zip(map) {
                            *o *= g;
                        }
                    }
                }
            }
        }
        Ok(Tensor { shape: s, data: out })
    }

    /// Sums `self * other` down to `target`, which must be a broadcast shape of
    /// `self`. This is the adjoint of [`Tensor::broadcast_mul`] with respect to
    /// its map argument.
    pub fn mul_reduce(&self, other: &Self, target: Shape4) -> Result<Self> {
        self.check_same(other)?;
        let kind = self.broadcast_kind(target)?;
        let s = self.shape;
        let plane = s.plane();
        let mut out = vec![T::zero(); target.len()];
        match kind {
            Broadcast::Same => {
                for ((o, &a), &b) in out.iter_mut().zip(&self.data).zip(&other.data) {
                    *o = a * b;
                }
            }
            Broadcast::Channel => {
                for (i, o) in out.iter_mut().enumerate() {
                    let range = i * plane..(i + 1) * plane;
                    *o = self.data[range.clone()]
                        .iter()
                        .zip(&other.data[range])
                        .map(|(&a, &b)| a * b)
                        .sum();
                }
            }
            Broadcast::Spatial => {
                for n in 0..s.n {
                    let dst = &mut out[n * plane..(n + 1) * plane];
                    for c in 0..s.c {
                        let start = (n * s.c + c) * plane;
                        let a = &self.data[start..start + plane];
                        let b = &other.data[start..start + plane];
                        for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                            *d += x * y;
                        }
                    }
                }
            }
        }
        Ok(Tensor {
            shape: target,
            data: out,
        })
    }

    /// True iff `|a_i - b_i| <= abs_tol + rel_tol * |b_i|` for every element.
    pub fn allclose(&self, other: &Self, rel_tol: f64, abs_tol: f64) -> Result<bool> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).all(|(&a, &b)| {
            let (a, b) = (a.as_f64(), b.as_f64());
            (a - b).abs() <= abs_tol + rel_tol * b.abs()
        }))
    }

    /// Largest `|a_i - b_i|`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Concatenates two tensors along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        let (a, b) = (self.shape, other.shape);
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::ShapeMismatch {
                expected: a,
                actual: b,
            });
        }
        let shape = Shape4::new(a.n, a.c + b.c, a.h, a.w)?;
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..a.n {
            data.extend_from_slice(self.item(n));
            data.extend_from_slice(other.item(n));
        }
        Ok(Tensor { shape, data })
    }

    /// Splits off the first `c` channels; inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, c: usize) -> Result<(Self, Self)> {
        let s = self.shape;
        if c == 0 || c >= s.c {
            return Err(Error::Invalid(format!("cannot split {} channels at {c}", s.c)));
        }
        let first = Shape4::new(s.n, c, s.h, s.w)?;
        let second = Shape4::new(s.n, s.c - c, s.h, s.w)?;
        let mut a = Vec::with_capacity(first.len());
        let mut b = Vec::with_capacity(second.len());
        for n in 0..s.n {
            let item = self.item(n);
            a.extend_from_slice(&item[..first.item()]);
            b.extend_from_slice(&item[first.item()..]);
        }
        Ok((
            Tensor {
                shape: first,
                data: a,
            },
            Tensor {
                shape: second,
                data: b,
            },
        ))
    }

    /// Stacks same-shaped single-item tensors into one batch.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("cannot stack zero tensors".into()))?;
        let per = first.shape;
        let mut data = Vec::with_capacity(per.len() * items.len());
        for t in items {
            if t.shape != per {
                return Err(Error::ShapeMismatch {
                    expected: per,
                    actual: t.shape,
                });
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape4::new(per.n * items.len(), per.c, per.h, per.w)?,
            data,
        })
    }
}
