//! Dense rank-4 tensors in (batch, channel, height, width) layout.
//!
//! `Tensor4<T>` is the universal value type of the engine: feature maps,
//! convolution kernels, biases, gate maps and fusion logits are all rank-4
//! arrays, row-major in (n, c, h, w) order. Scalars live in (1,1,1,1).

use std::fmt;

use crate::error::{CoreError, Result};

/// Scalar precision tag carried by checkpoints and run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// 32-bit floats: training runs.
    Bits32,
    /// 64-bit floats: gradient checking (finite differences are unreliable at 32-bit).
    Bits64,
}

impl Precision {
    pub fn bits(self) -> u8 {
        match self {
            Precision::Bits32 => 32,
            Precision::Bits64 => 64,
        }
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            32 => Ok(Precision::Bits32),
            64 => Ok(Precision::Bits64),
            other => Err(CoreError::InvalidArgument(format!(
                "unsupported precision tag {other}, expected 32 or 64"
            ))),
        }
    }
}

/// Floating-point element type of the engine. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy + PartialOrd + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn add(self, rhs: Self) -> Self;
    fn sub(self, rhs: Self) -> Self;
    fn mul(self, rhs: Self) -> Self;
    fn div(self, rhs: Self) -> Self;
    fn neg(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, rhs: Self) -> Self;
    fn minimum(self, rhs: Self) -> Self;

    /// Little-endian byte encoding used by the checkpoint format.
    fn write_le(self, out: &mut Vec<u8>);
    /// Inverse of [`Scalar::write_le`]; `bytes.len()` must equal the scalar width.
    fn read_le(bytes: &[u8]) -> Self;
    /// Scalar width in bytes.
    const BYTE_WIDTH: usize;
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr, $width:expr) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;
            const BYTE_WIDTH: usize = $width;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline(always)]
            fn add(self, rhs: Self) -> Self {
                self + rhs
            }
            #[inline(always)]
            fn sub(self, rhs: Self) -> Self {
                self - rhs
            }
            #[inline(always)]
            fn mul(self, rhs: Self) -> Self {
                self * rhs
            }
            #[inline(always)]
            fn div(self, rhs: Self) -> Self {
                self / rhs
            }
            #[inline(always)]
            fn neg(self) -> Self {
                -self
            }
            #[inline(always)]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline(always)]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline(always)]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline(always)]
            fn maximum(self, rhs: Self) -> Self {
                <$t>::max(self, rhs)
            }
            #[inline(always)]
            fn minimum(self, rhs: Self) -> Self {
                <$t>::min(self, rhs)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("scalar byte width"))
            }
        }
    };
}

impl_scalar!(f32, Precision::Bits32, 4);
impl_scalar!(f64, Precision::Bits64, 8);

/// Shape of a rank-4 tensor: (batch, channel, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_tuple(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 real array. `data.len() == n*c*h*w`, row-major (n,c,h,w).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T: Scalar> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    /// Builds a tensor from raw data, validating length and finiteness.
    pub fn new(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(CoreError::Dimension(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.len()
            )));
        }
        if shape.is_empty() {
            return Err(CoreError::InvalidArgument(format!(
                "all shape dimensions must be positive, got {shape}"
            )));
        }
        let t = Tensor4 { shape, data };
        t.check_finite("Tensor4::new")?;
        Ok(t)
    }

    /// Internal constructor for op kernels; skips the finite scan.
    pub(crate) fn from_parts(shape: Shape4, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Tensor4 { shape, data }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn filled(shape: Shape4, v: T) -> Self {
        Tensor4 {
            shape,
            data: vec![v; shape.len()],
        }
    }

    /// A (1,1,1,1) tensor holding one value.
    pub fn scalar(v: T) -> Self {
        Tensor4::filled(Shape4::new(1, 1, 1, 1), v)
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Errors with `context` if any entry is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CoreError::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts element type, rounding through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Largest absolute entry; 0 for the degenerate case.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }
}
