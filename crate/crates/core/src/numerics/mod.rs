//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Every model computation in this crate is recorded on a [`Graph`]: each
//! operation appends a node holding its output value and enough saved state
//! to push gradients back to its inputs. [`Graph::backward`] walks the tape
//! in reverse. All operations check their outputs for NaN/Inf and fail with
//! the operation name instead of propagating non-finite values.
//!
//! The engine is generic over [`Real`], implemented for `f32` (training) and
//! `f64` (gradient verification).

mod gradcheck;
mod graph;
mod ops;

pub use gradcheck::{
    analytic_gradients, compare_gradients, grad_check, numeric_gradients, GradReport, FD_STEP,
};
pub use ops::AttentionSpec;
pub use graph::{Graph, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type usable by the engine.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    /// `c = alpha * a * b (+ c when accumulate)` over strided views.
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        la: Layout,
        b: &[Self],
        lb: Layout,
        c: &mut [Self],
        lc: Layout,
        accumulate: bool,
    );

    /// Dense row-major `c = a' * b' (+ c)`, where `'` is an optional
    /// transpose; `a'` is `m×k` and `b'` is `k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    ) {
        let la = if trans_a { Layout::new(0, 1, m) } else { Layout::new(0, k, 1) };
        let lb = if trans_b { Layout::new(0, 1, k) } else { Layout::new(0, n, 1) };
        Self::gemm_raw(m, k, n, Self::one(), a, la, b, lb, c, Layout::new(0, n, 1), accumulate);
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                la: Layout,
                b: &[Self],
                lb: Layout,
                c: &mut [Self],
                lc: Layout,
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(la.fits(m, k, a.len()), "gemm: a view out of bounds");
                assert!(lb.fits(k, n, b.len()), "gemm: b view out of bounds");
                assert!(lc.fits(m, n, c.len()), "gemm: c view out of bounds");
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: `fits` checked that every addressed element lies
                // inside its slice; `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr().add(la.off),
                        la.rs as isize,
                        la.cs as isize,
                        b.as_ptr().add(lb.off),
                        lb.rs as isize,
                        lb.cs as isize,
                        beta,
                        c.as_mut_ptr().add(lc.off),
                        lc.rs as isize,
                        lc.cs as isize,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Offset and strides of a matrix view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub const fn new(off: usize, rs: usize, cs: usize) -> Self {
        Self { off, rs, cs }
    }

    fn fits(&self, rows: usize, cols: usize, len: usize) -> bool {
        rows == 0 || cols == 0 || self.off + (rows - 1) * self.rs + (cols - 1) * self.cs < len
    }
}

/// Global precision setting of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Shaped, row-major array of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&x| T::from_f64_lossy(x)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub(crate) fn from_parts(data: Vec<T>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if all_finite(&self.data) {
            return Ok(());
        }
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::NonFinite { op, index }),
            None => Ok(()),
        }
    }
}

/// Branch-free scan: `x - x` is zero for finite `x` and NaN otherwise, and
/// eight independent lanes let the loop vectorize.
pub(crate) fn all_finite<T: Real>(xs: &[T]) -> bool {
    let mut acc = [T::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            acc[i] = acc[i] + (c[i] - c[i]);
        }
    }
    let tail = chunks.remainder().iter().fold(T::zero(), |a, &x| a + (x - x));
    acc.iter().fold(tail, |a, &x| a + x) == T::zero()
}
