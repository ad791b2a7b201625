//! Dense row-major tensors and the scalar arithmetic shared by every kernel.
//!
//! Kernels are generic over [`Scalar`] so the same code path runs in FP32
//! (working precision) and FP64 (oracles, finite differences).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type usable by the kernels.
///
/// `Packed` is the score/index word used for arg-top-k: an unsigned integer
/// whose natural order is (score descending is larger, then lower index is
/// larger). FP32 packs into `u64`; FP64 needs `u128`.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    type Packed: Ord + Copy + Default + Debug + Send + Sync;

    const NAME: &'static str;

    fn erf(self) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn pack(self, index: u32) -> Self::Packed;
    fn unpack(word: Self::Packed) -> (Self, u32);

    /// Number of 32-bit memory words a packed entry occupies.
    const PACKED_WORDS: usize;
}

/// Order-preserving map from FP32 bits to `u32`: flip the sign bit of
/// non-negatives, flip every bit of negatives.
#[inline]
pub fn f32_to_ordered(v: f32) -> u32 {
    let bits = v.to_bits();
    if bits & 0x8000_0000 == 0 {
        bits ^ 0x8000_0000
    } else {
        !bits
    }
}

#[inline]
pub fn ordered_to_f32(key: u32) -> f32 {
    let bits = if key & 0x8000_0000 != 0 { key ^ 0x8000_0000 } else { !key };
    f32::from_bits(bits)
}

#[inline]
pub fn f64_to_ordered(v: f64) -> u64 {
    let bits = v.to_bits();
    if bits & (1 << 63) == 0 {
        bits ^ (1 << 63)
    } else {
        !bits
    }
}

#[inline]
pub fn ordered_to_f64(key: u64) -> f64 {
    let bits = if key & (1 << 63) != 0 { key ^ (1 << 63) } else { !key };
    f64::from_bits(bits)
}

impl Scalar for f32 {
    type Packed = u64;
    const NAME: &'static str = "f32";
    const PACKED_WORDS: usize = 2;

    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn pack(self, index: u32) -> u64 {
        ((f32_to_ordered(self) as u64) << 32) | (!index) as u64
    }
    #[inline]
    fn unpack(word: u64) -> (f32, u32) {
        (ordered_to_f32((word >> 32) as u32), !(word as u32))
    }
}

impl Scalar for f64 {
    type Packed = u128;
    const NAME: &'static str = "f64";
    const PACKED_WORDS: usize = 4;

    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn pack(self, index: u32) -> u128 {
        ((f64_to_ordered(self) as u128) << 64) | (!index) as u128
    }
    #[inline]
    fn unpack(word: u128) -> (f64, u32) {
        (ordered_to_f64((word >> 64) as u64), !(word as u32))
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::default(); n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, buffer has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| {
                debug_assert!(*i < usize::MAX);
                i * s
            })
            .sum()
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.as_f64()))
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Transpose of a 2-D tensor (materialized).
    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(&[n, m], out)
    }

    pub fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Shape(format!("{op}: expected a 2-D tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Matrix product of `a[m×k]` and `b[k×n]`, accumulating in element order.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul: inner dimensions differ ({m}x{k} · {k2}x{n})"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::from_vec(&[m, n], out)
}

/// `out[m×n] = a[m×k] · b[k×n]` on raw row-major slices.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.iter_mut().for_each(|v| *v = T::zero());
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ` (rows of `b` dotted with rows of `a`).
pub fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Exact (erf-based) GELU: `x·Φ(x)`.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of exact GELU: `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::Shape(format!("softmax: axis {axis} out of range for {:?}", x.shape())));
    }
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut lane = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, v) in lane.iter_mut().enumerate() {
                *v = data[base + j * inner];
            }
            softmax_in_place(&mut lane);
            for (j, v) in lane.iter().enumerate() {
                data[base + j * inner] = *v;
            }
        }
    }
    Ok(out)
}

/// Softmax of a single lane. Entries equal to `-inf` get probability zero.
pub fn softmax_in_place<T: Scalar>(lane: &mut [T]) {
    let max = lane.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if max == T::neg_infinity() {
        let u = T::one() / T::from_f64(lane.len() as f64);
        lane.iter_mut().for_each(|v| *v = u);
        return;
    }
    let mut sum = T::zero();
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in lane.iter_mut() {
        *v = *v / sum;
    }
}

/// Largest elementwise absolute difference.
pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_diff: length mismatch");
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

/// `‖a − b‖∞ / ‖b‖∞`, with `b` the reference. Falls back to the absolute
/// error when the reference is identically zero.
pub fn rel_err<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let scale = b.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
    let diff = max_abs_diff(a, b);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::<f32>::eye(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![0.0f32, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a: Tensor<f32> = rng.normal_tensor(&[7, 5], 1.0);
        let b: Tensor<f32> = rng.normal_tensor(&[5, 3], 1.0);
        let c = matmul(&a, &b).unwrap();
        let oracle = naive_matmul(&a.cast::<f64>().into_vec(), &b.cast::<f64>().into_vec(), 7, 5, 3);
        let c64: Vec<f64> = c.data().iter().map(|&v| v as f64).collect();
        assert!(max_abs_diff(&c64, &oracle) < 1e-6);
    }

    #[test]
    fn matmul_associative() {
        let mut rng = Rng::new(11);
        let a: Tensor<f64> = rng.normal_tensor(&[4, 3], 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[3, 5], 1.0);
        let c: Tensor<f64> = rng.normal_tensor(&[5, 2], 1.0);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert!(max_abs_diff(left.data(), right.data()) < 1e-5);
    }

    #[test]
    fn nt_matches_transpose() {
        let mut rng = Rng::new(3);
        let a: Tensor<f64> = rng.normal_tensor(&[3, 4], 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[5, 4], 1.0);
        let mut out = vec![0.0; 15];
        matmul_nt_into(a.data(), b.data(), &mut out, 3, 4, 5);
        let reference = matmul(&a, &b.transpose().unwrap()).unwrap();
        assert!(max_abs_diff(&out, reference.data()) < 1e-12);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        assert!((gelu_scalar(10.0f32) - 10.0).abs() < 1e-6);
        // Φ(1) = 0.8413447460685429
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn gelu_global_minimum_scan() {
        let mut min = f64::INFINITY;
        let mut x = -10.0;
        while x <= 10.0 {
            min = min.min(gelu_scalar(x));
            assert!(gelu_scalar(x) + 1.0 > 0.0);
            x += 1e-4;
        }
        assert!(min >= -0.17, "min {min}");
        assert!(min < -0.169);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
        assert_eq!(gelu_grad_scalar(0.0f64), 0.5);
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::from_vec(&[3], vec![0.0f64; 3]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::from_vec(&[2], vec![f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(softmax(&x, 0).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_matches_fp64_oracle() {
        let mut rng = Rng::new(5);
        let x: Tensor<f32> = rng.normal_tensor(&[4], 2.0);
        let s = softmax(&x, 0).unwrap();
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let denom: f64 = xs.iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = xs.iter().map(|v| v.exp() / denom).collect();
        let s64: Vec<f64> = s.data().iter().map(|&v| v as f64).collect();
        assert!(max_abs_diff(&s64, &oracle) < 1e-6);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let s = softmax(&x, 1).unwrap();
        let row0: f64 = s.data()[..3].iter().sum();
        assert!((row0 - 1.0).abs() < 1e-12);
        let s0 = softmax(&x, 0).unwrap();
        for j in 0..3 {
            assert!((s0.data()[j] + s0.data()[3 + j] - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn ordered_encoding_roundtrip_and_order() {
        let vals = [f32::NEG_INFINITY, -3.5, -1e-30, -0.0, 0.0, 1e-30, 2.0, f32::INFINITY];
        for w in vals.windows(2) {
            assert!(f32_to_ordered(w[0]) < f32_to_ordered(w[1]));
        }
        for &v in &vals {
            assert_eq!(ordered_to_f32(f32_to_ordered(v)).to_bits(), v.to_bits());
        }
        let (s, i) = f32::unpack(1.25f32.pack(17));
        assert_eq!((s, i), (1.25, 17));
        let (s, i) = f64::unpack((-7.5f64).pack(3));
        assert_eq!((s, i), (-7.5, 3));
    }

    #[test]
    fn tensor_invariants() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4]);
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(t.len(), 24);
        assert!(Tensor::from_vec(&[2, 2], vec![1.0f32; 3]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
            let mut a = v.clone();
            let mut b: Vec<f64> = v.iter().map(|x| x + c).collect();
            softmax_in_place(&mut a);
            softmax_in_place(&mut b);
            let sum: f64 = a.iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-6);
            proptest::prop_assert!(a.iter().all(|&p| p >= 0.0));
            proptest::prop_assert!(max_abs_diff(&a, &b) < 1e-12);
        }

        #[test]
        fn packed_order_is_score_then_low_index(a in -1e6f32..1e6, b in -1e6f32..1e6, i in 0u32..1000, j in 0u32..1000) {
            if a > b {
                proptest::prop_assert!(a.pack(i) > b.pack(j));
            }
            if i < j {
                proptest::prop_assert!(a.pack(i) > a.pack(j));
            }
        }
    }
}
