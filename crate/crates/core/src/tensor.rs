//! Dense row-major numeric helpers shared by the model, registration and metrics code.
//!
//! Everything operates on flat slices with explicit shapes. Matrix products go
//! through `matrixmultiply`, which is single-threaded and therefore bitwise
//! deterministic for a fixed input.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type usable by the model. Implemented for `f32`
/// (training) and `f64` (gradient verification).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety contract
    /// Strides must describe in-bounds views of the given slices; this is
    /// checked by `gemm` before dispatch.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
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
        rsc: isize,
        csc: isize,
    );

    /// Elementwise `exp`. The `f32` implementation uses a vectorisable
    /// polynomial (relative error below 2e-7 on the clamped range).
    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|v| *v = v.exp());
    }

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path, $exp:path) => {
        impl Scalar for $t {
            fn exp_in_place(xs: &mut [Self]) {
                $exp(xs)
            }

            fn gemm_raw(
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
                rsc: isize,
                csc: isize,
            ) {
                // SAFETY: `gemm` verifies that every view stays inside its slice.
                unsafe {
                    $f(
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
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, exp_f32_slice);
impl_scalar!(f64, matrixmultiply::dgemm, exp_f64_slice);

fn exp_f64_slice(xs: &mut [f64]) {
    xs.iter_mut().for_each(|v| *v = v.exp());
}

/// Cody-Waite range reduction plus a degree-6 minimax-style Taylor polynomial.
fn exp_f32_slice(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const MAGIC: f32 = 12_582_912.0;
    for v in xs.iter_mut() {
        let x = v.max(-87.0).min(88.0);
        // Round to nearest via the 1.5 * 2^23 trick; the low mantissa bits of
        // `k` then hold the integer exponent. Both steps vectorise.
        let k = x * LOG2E + MAGIC;
        let n = k - MAGIC;
        let ni = k.to_bits().wrapping_sub(MAGIC.to_bits());
        let r = (x - n * LN2_HI) - n * LN2_LO;
        let p = 1.0
            + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
        let scale = f32::from_bits(ni.wrapping_add(127) << 23);
        *v = p * scale;
    }
}

/// A strided, read-only matrix view into a flat slice.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self { data, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `out = a * b` (when `accumulate` is false) or `out += a * b`.
/// `out` is written with row stride `out_rs` and unit column stride.
pub fn gemm<T: Scalar>(a: View<'_, T>, b: View<'_, T>, out: &mut [T], out_rs: usize, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.rows == 0 || a.cols == 0 || a.last_index() < a.data.len(), "lhs view out of bounds");
    assert!(b.rows == 0 || b.cols == 0 || b.last_index() < b.data.len(), "rhs view out of bounds");
    assert!((m - 1) * out_rs + n <= out.len(), "output view out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                out[r * out_rs..r * out_rs + n].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        return;
    }
    T::gemm_raw(
        m,
        k,
        n,
        T::one(),
        a.data,
        a.rs as isize,
        a.cs as isize,
        b.data,
        b.rs as isize,
        b.cs as isize,
        beta,
        out,
        out_rs as isize,
        1,
    );
}

/// `y = x * w + bias` for `x: [rows, in]`, `w: [in, out]`.
pub fn linear<T: Scalar>(x: &[T], rows: usize, w: &[T], bias: Option<&[T]>, in_dim: usize, out_dim: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out_dim];
    if let Some(b) = bias {
        for r in 0..rows {
            y[r * out_dim..(r + 1) * out_dim].copy_from_slice(b);
        }
    }
    gemm(View::new(x, rows, in_dim), View::new(w, in_dim, out_dim), &mut y, out_dim, bias.is_some());
    y
}

/// Backward pass of [`linear`]: accumulates `dw`, `dbias` and returns `dx`
/// (or skips it when `want_dx` is false).
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    rows: usize,
    w: &[T],
    dy: &[T],
    in_dim: usize,
    out_dim: usize,
    dw: &mut [T],
    dbias: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    gemm(View::new(x, rows, in_dim).t(), View::new(dy, rows, out_dim), dw, out_dim, true);
    if let Some(db) = dbias {
        for r in 0..rows {
            for (acc, v) in db.iter_mut().zip(&dy[r * out_dim..(r + 1) * out_dim]) {
                *acc += *v;
            }
        }
    }
    if want_dx {
        let mut dx = vec![T::zero(); rows * in_dim];
        gemm(View::new(dy, rows, out_dim), View::new(w, in_dim, out_dim).t(), &mut dx, in_dim, false);
        Some(dx)
    } else {
        None
    }
}

/// Numerically stable in-place softmax over one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    row.iter_mut().for_each(|v| *v -= max);
    T::exp_in_place(row);
    let sum: T = row.iter().copied().sum();
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044715;

/// `tanh(c (x + a x^3))` for every element, computed through `exp`.
fn gelu_tanh<T: Scalar>(pre: &[T]) -> Vec<T> {
    let (c, a, two) = (T::c(GELU_C), T::c(GELU_A), T::c(2.0));
    let mut t: Vec<T> = pre.iter().map(|&x| (two * c * (x + a * x * x * x)).max(T::c(-80.0)).min(T::c(80.0))).collect();
    T::exp_in_place(&mut t);
    t.iter_mut().for_each(|e| *e = T::one() - two / (*e + T::one()));
    t
}

/// Slice version of [`gelu`].
pub fn gelu_slice<T: Scalar>(pre: &[T]) -> Vec<T> {
    let half = T::c(0.5);
    let mut t = gelu_tanh(pre);
    for (tv, &x) in t.iter_mut().zip(pre) {
        *tv = half * x * (T::one() + *tv);
    }
    t
}

/// Multiplies `grad` by the derivative of [`gelu_slice`] at `pre`.
pub fn gelu_backward_in_place<T: Scalar>(pre: &[T], grad: &mut [T]) {
    let (c, a, half, three) = (T::c(GELU_C), T::c(GELU_A), T::c(0.5), T::c(3.0));
    let t = gelu_tanh(pre);
    for ((g, &x), &tv) in grad.iter_mut().zip(pre).zip(&t) {
        *g *= half * (T::one() + tv) + half * x * (T::one() - tv * tv) * c * (T::one() + three * a * x * x);
    }
}

/// Tanh-approximated GELU and its derivative.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::c(0.797_884_560_802_865_4);
    let a = T::c(0.044715);
    let half = T::c(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::c(0.797_884_560_802_865_4);
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * a * x * x)
}
