//! Dense row-major tensors over a fixed-width float element, plus the seeded
//! generator every stochastic component draws from.
//!
//! Layout conventions: feature maps are `channels x height x width`,
//! convolution kernels are `out_channels x in_channels x kh x kw`, batches add
//! a leading extent. All data is a flat row-major buffer; reshape is free.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage width of a tensor element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    Double,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Single => write!(f, "single"),
            Precision::Double => write!(f, "double"),
        }
    }
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for f32 {}
    impl Sealed for f64 {}
}

/// Tensor element: `f32` for training, `f64` for gradient-check paths.
pub trait Element:
    sealed::Sealed
    + Copy
    + PartialOrd
    + PartialEq
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn standard_normal(rng: &mut ChaCha8Rng) -> Self;
}

impl Element for f32 {
    const PRECISION: Precision = Precision::Single;
    const BYTES: usize = 4;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
    fn standard_normal(rng: &mut ChaCha8Rng) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::Double;
    const BYTES: usize = 8;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
    fn standard_normal(rng: &mut ChaCha8Rng) -> Self {
        rng.sample(StandardNormal)
    }
}

/// Ordered list of positive extents.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(Vec<usize>);

impl Shape {
    /// Panics if any extent is zero or the list is empty; shapes come from
    /// validated specs, so a bad extent is a programming error.
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        let dims = dims.into();
        assert!(!dims.is_empty(), "shape must have at least one extent");
        assert!(dims.iter().all(|&d| d >= 1), "shape extents must be >= 1");
        Shape(dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn count(&self) -> usize {
        self.0.iter().product()
    }

    /// `channels x height x width` accessor; errors if the rank is not 3.
    pub fn as_chw(&self) -> Result<(usize, usize, usize)> {
        match self.0.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            _ => Err(Error::ShapeMismatch {
                op: "as_chw",
                expected: "rank-3 shape".into(),
                got: self.to_string(),
            }),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{}", d)?;
        }
        write!(f, "]")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Dense tensor. Construction validates length and finiteness; after that the
/// only mutation paths are the explicit in-place methods used by optimizers.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: &Shape) -> Self {
        Tensor {
            data: vec![E::ZERO; shape.count()],
            shape: shape.clone(),
        }
    }

    pub fn filled(shape: &Shape, value: E) -> Self {
        Tensor {
            data: vec![value; shape.count()],
            shape: shape.clone(),
        }
    }

    /// Rejects length mismatches and non-finite entries.
    pub fn from_vec(shape: &Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                expected: format!("{} elements for {}", shape.count(), shape),
                got: format!("{} elements", data.len()),
            });
        }
        let t = Tensor {
            shape: shape.clone(),
            data,
        };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub fn from_fn(shape: &Shape, mut f: impl FnMut(usize) -> E) -> Self {
        Tensor {
            data: (0..shape.count()).map(|i| f(i)).collect(),
            shape: shape.clone(),
        }
    }

    /// Wraps an internally produced buffer without the finiteness scan;
    /// policing happens at op boundaries, not inside hot loops.
    pub(crate) fn from_raw(shape: &Shape, data: Vec<E>) -> Self {
        debug_assert_eq!(data.len(), shape.count());
        Tensor {
            shape: shape.clone(),
            data,
        }
    }

    /// I.i.d. standard-normal entries drawn from `rng`.
    pub fn randn(shape: &Shape, rng: &mut Rng) -> Self {
        Tensor {
            data: (0..shape.count()).map(|_| rng.normal()).collect(),
            shape: shape.clone(),
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// In-place access for optimizers and builders.
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Same data, different extents; counts must agree. Data is preserved
    /// bitwise.
    pub fn reshape(&self, shape: &Shape) -> Result<Self> {
        if shape.count() != self.shape.count() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: format!("{} elements", self.shape.count()),
                got: format!("{} for {}", shape.count(), shape),
            });
        }
        Ok(Tensor {
            shape: shape.clone(),
            data: self.data.clone(),
        })
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                expected: self.shape.to_string(),
                got: other.shape.to_string(),
            })
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&self, factor: E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a * factor).collect(),
        }
    }

    /// `self += alpha * other`; optimizer update primitive.
    pub fn add_scaled_inplace(&mut self, alpha: E, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_scaled_inplace")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Inner product accumulated in double precision.
    pub fn dot_f64(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.to_f64() * b.to_f64())
            .sum())
    }

    pub fn norm_sq_f64(&self) -> f64 {
        self.data.iter().map(|&a| a.to_f64() * a.to_f64()).sum()
    }

    pub fn max_abs_f64(&self) -> f64 {
        self.data
            .iter()
            .map(|&a| a.to_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * E::BYTES);
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(shape: &Shape, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != shape.count() * E::BYTES {
            return Err(Error::Checkpoint(format!(
                "blob length {} does not match {} x {} bytes",
                bytes.len(),
                shape.count(),
                E::BYTES
            )));
        }
        let data = bytes.chunks_exact(E::BYTES).map(E::read_le).collect();
        Ok(Tensor {
            shape: shape.clone(),
            data,
        })
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} ", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} elements]", self.data.len())
        }
    }
}

/// Returns `sum_i (alpha * a_i - b_i)^2`, accumulated in double precision.
pub fn axpy_norms<E: Element>(a: &Tensor<E>, b: &Tensor<E>, alpha: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "axpy_norms",
            expected: a.shape().to_string(),
            got: b.shape().to_string(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = alpha * x.to_f64() - y.to_f64();
            d * d
        })
        .sum())
}

/// Seeded, reproducible generator. A fixed seed reproduces the identical draw
/// sequence; `position` counts draws made so far.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
    draws: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a, enough to separate named streams.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
            draws: 0,
        }
    }

    /// Independent named stream derived from `seed`; lets one experiment seed
    /// fan out into init/data/probe streams that never interleave.
    pub fn for_stream(seed: u64, label: &str) -> Self {
        Rng::new(splitmix64(seed ^ label_hash(label)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.draws
    }

    pub fn normal<E: Element>(&mut self) -> E {
        self.draws += 1;
        E::standard_normal(&mut self.inner)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.draws += 1;
        self.inner.random_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.draws += 1;
        self.inner.random_range(0..n)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform(0.0, 1.0) < p
    }

    /// Fisher-Yates.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(dims: &[usize]) -> Shape {
        Shape::new(dims.to_vec())
    }

    #[test]
    fn zeros_matches_definition() {
        let t = Tensor::<f64>::zeros(&sh(&[2, 2]));
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::<f64>::zeros(&sh(&[1]));
        assert_eq!(t.data(), &[0.0]);
        let t = Tensor::<f64>::zeros(&sh(&[3, 1, 1]));
        assert_eq!(t.data(), &[0.0; 3]);
    }

    #[test]
    fn randn_same_seed_is_bitwise_identical() {
        let mut r1 = Rng::new(7);
        let mut r2 = Rng::new(7);
        let a = Tensor::<f64>::randn(&sh(&[64]), &mut r1);
        let b = Tensor::<f64>::randn(&sh(&[64]), &mut r2);
        assert_eq!(a.data(), b.data());
        assert_eq!(r1.position(), 64);
    }

    #[test]
    fn randn_moments_near_standard_normal() {
        let mut rng = Rng::new(42);
        let n = 1_000_000usize;
        let t = Tensor::<f64>::randn(&sh(&[n]), &mut rng);
        let mean = t.data().iter().sum::<f64>() / n as f64;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 0.01, "mean {mean}");
        assert!((0.99..=1.01).contains(&var), "var {var}");
    }

    #[test]
    fn named_streams_differ() {
        let mut a = Rng::for_stream(3, "init");
        let mut b = Rng::for_stream(3, "data");
        let xa: f64 = a.normal();
        let xb: f64 = b.normal();
        assert_ne!(xa, xb);
    }

    #[test]
    fn axpy_norms_examples() {
        let a = Tensor::<f64>::from_vec(&sh(&[2]), vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::zeros(&sh(&[2]));
        assert_eq!(axpy_norms(&a, &a, 1.0).unwrap(), 0.0);
        assert_eq!(axpy_norms(&a, &b, 1.0).unwrap(), 5.0);
        let c = Tensor::<f64>::zeros(&sh(&[3]));
        assert!(axpy_norms(&a, &c, 1.0).is_err());
    }

    #[test]
    fn axpy_norms_matches_scalar_loop_oracle() {
        let mut rng = Rng::new(11);
        let a = Tensor::<f64>::randn(&sh(&[10_000]), &mut rng);
        let b = Tensor::<f64>::randn(&sh(&[10_000]), &mut rng);
        let alpha = 0.37;
        let mut oracle = 0.0f64;
        for i in 0..a.len() {
            let d = alpha * a.data()[i] - b.data()[i];
            oracle += d * d;
        }
        let got = axpy_norms(&a, &b, alpha).unwrap();
        let rel = (got - oracle).abs() / oracle.abs().max(1e-300);
        assert!(rel <= 1e-12, "rel {rel}");
    }

    #[test]
    fn reshape_round_trip_is_bitwise() {
        let mut rng = Rng::new(5);
        let t = Tensor::<f32>::randn(&sh(&[3, 4, 5]), &mut rng);
        let back = t
            .reshape(&sh(&[60]))
            .unwrap()
            .reshape(&sh(&[5, 4, 3]))
            .unwrap()
            .reshape(&sh(&[3, 4, 5]))
            .unwrap();
        assert_eq!(t.data(), back.data());
        assert!(t.reshape(&sh(&[7])).is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Tensor::<f64>::from_vec(&sh(&[2]), vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::<f64>::from_vec(&sh(&[2]), vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn le_bytes_round_trip() {
        let mut rng = Rng::new(9);
        let t = Tensor::<f32>::randn(&sh(&[17]), &mut rng);
        let bytes = t.to_le_bytes();
        let back = Tensor::<f32>::from_le_bytes(t.shape(), &bytes).unwrap();
        assert_eq!(t.data(), back.data());
    }
}
