use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

/// Scalar type of a tensor. `f64` is used for oracles and gradient checks,
/// `f32` for training.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

/// Dense row-major tensor.
///
/// Rank-3 tensors are feature maps laid out as `[height, width, channels]`;
/// convolution kernels are `[out, kh, kw, in]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(invalid(format!("tensor extents must be >= 1, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape("zip_map", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.same_shape("axpy", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape("dot", other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // ---- feature-map helpers (rank 3, [h, w, c]) ----

    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            s => Err(invalid(format!("expected a [h, w, c] feature map, got {s:?}"))),
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let (w, c) = (self.shape[1], self.shape[2]);
        let o = (y * w + x) * c;
        &self.data[o..o + c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let (w, c) = (self.shape[1], self.shape[2]);
        let o = (y * w + x) * c;
        &mut self.data[o..o + c]
    }

    #[inline]
    pub fn at3(&self, y: usize, x: usize, ch: usize) -> T {
        self.data[(y * self.shape[1] + x) * self.shape[2] + ch]
    }

    /// Concatenate feature maps along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_channels: no inputs"))?;
        let (h, w, _) = first.hwc()?;
        let mut total = 0;
        for p in parts {
            let (ph, pw, pc) = p.hwc()?;
            if (ph, pw) != (h, w) {
                return Err(Error::Shape {
                    op: "concat_channels",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for p in parts {
                let c = p.shape[2];
                data.extend_from_slice(&p.data[px * c..(px + 1) * c]);
            }
        }
        Self::from_vec(&[h, w, total], data)
    }

    /// Split channels into `[0, at)` and `[at, c)`. Either side may be empty,
    /// in which case `None` is returned for it.
    pub fn split_channels(&self, at: usize) -> Result<(Option<Self>, Option<Self>)> {
        let (h, w, c) = self.hwc()?;
        if at > c {
            return Err(invalid(format!("split_channels: split point {at} exceeds {c} channels")));
        }
        let take = |lo: usize, hi: usize| -> Option<Self> {
            if lo == hi {
                return None;
            }
            let mut data = Vec::with_capacity(h * w * (hi - lo));
            for px in 0..h * w {
                data.extend_from_slice(&self.data[px * c + lo..px * c + hi]);
            }
            Some(Self {
                shape: vec![h, w, hi - lo],
                data,
            })
        };
        Ok((take(0, at), take(at, c)))
    }

    /// Channel slice `[lo, hi)` of a feature map.
    pub fn channel_slice(&self, lo: usize, hi: usize) -> Result<Self> {
        let (h, w, c) = self.hwc()?;
        if lo >= hi || hi > c {
            return Err(invalid(format!("channel_slice: bad range {lo}..{hi} of {c}")));
        }
        let mut data = Vec::with_capacity(h * w * (hi - lo));
        for px in 0..h * w {
            data.extend_from_slice(&self.data[px * c + lo..px * c + hi]);
        }
        Ok(Self {
            shape: vec![h, w, hi - lo],
            data,
        })
    }

    /// Add `src` into channels `[lo, lo + src.c)` of `self`.
    pub fn add_into_channels(&mut self, lo: usize, src: &Self) -> Result<()> {
        let (h, w, c) = self.hwc()?;
        let (sh, sw, sc) = src.hwc()?;
        if (sh, sw) != (h, w) || lo + sc > c {
            return Err(Error::Shape {
                op: "add_into_channels",
                lhs: self.shape.clone(),
                rhs: src.shape.clone(),
            });
        }
        for px in 0..h * w {
            let dst = &mut self.data[px * c + lo..px * c + lo + sc];
            for (d, &s) in dst.iter_mut().zip(&src.data[px * sc..(px + 1) * sc]) {
                *d += s;
            }
        }
        Ok(())
    }
}

/// Dot product with four independent accumulators. The summation order is
/// fixed, so results are reproducible run to run.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    for i in 0..chunks {
        let o = i * 4;
        s0 += a[o] * b[o];
        s1 += a[o + 1] * b[o + 1];
        s2 += a[o + 2] * b[o + 2];
        s3 += a[o + 3] * b[o + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// Dot product evaluated as if in twice the working precision (error-free
/// products via fused multiply-add, compensated summation). The result is
/// accurate to a few ulps unless the sum cancels almost completely.
#[inline]
pub fn dot_accurate<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let (mut sum, mut comp) = (T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let p = x * y;
        let p_err = x.mul_add(y, -p);
        let t = sum + p;
        let z = t - sum;
        comp += (sum - (t - z)) + (p - z) + p_err;
        sum = t;
    }
    sum + comp
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
