//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Network math is written once against [`Scalar`]. Training and inference
//! instantiate it with `f32` or `f64` (the [`Real`] types); the critic's
//! gradient-penalty parameter gradient instantiates it with [`Dual`] to get an
//! exact Hessian-vector product without a second backward graph.

use std::fmt::{self, Debug, Display};
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumAssignOps, One, Zero};

/// Element type for tensors and network parameters.
pub trait Scalar:
    Copy + Send + Sync + Debug + Default + PartialEq + Num + NumAssignOps + Neg<Output = Self> + 'static
{
    fn of(v: f64) -> Self;
    /// Primal value. Branching decisions (activations, `abs`) look only at this.
    fn real(self) -> f64;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;

    fn is_finite(self) -> bool {
        self.real().is_finite()
    }

    /// `c = a * b` or `c += a * b` on strided views.
    fn gemm(a: MatRef<'_, Self>, b: MatRef<'_, Self>, c: MatMut<'_, Self>, accumulate: bool);
}

/// Plain floating point types usable for parameters, optimizer state and
/// persisted tensors.
pub trait Real: Scalar + Float + FromPrimitive + Display {
    /// Tag written into checkpoint manifests.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

/// Read-only strided matrix view. Strides are in elements.
#[derive(Clone, Copy)]
pub struct MatRef<'a, S> {
    data: &'a [S],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

/// Mutable strided matrix view.
pub struct MatMut<'a, S> {
    data: &'a mut [S],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "matrix view {rows}x{cols} (rs={rs}, cs={cs}) exceeds buffer of {len}");
    }
}

impl<'a, S> MatRef<'a, S> {
    pub fn new(data: &'a [S], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        check_extent(data.len(), rows, cols, rs, cs);
        Self { data, rows, cols, rs, cs }
    }

    /// Contiguous row-major matrix.
    pub fn row_major(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self::new(data, rows, cols, cols, 1)
    }

    /// Transposed view of a contiguous row-major `rows x cols` buffer.
    pub fn row_major_t(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self::new(data, cols, rows, 1, cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> &S {
        &self.data[r * self.rs + c * self.cs]
    }
}

impl<'a, S> MatMut<'a, S> {
    pub fn new(data: &'a mut [S], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        check_extent(data.len(), rows, cols, rs, cs);
        Self { data, rows, cols, rs, cs }
    }

    pub fn row_major(data: &'a mut [S], rows: usize, cols: usize) -> Self {
        Self::new(data, rows, cols, cols, 1)
    }
}

fn check_gemm_dims<S>(a: &MatRef<'_, S>, b: &MatRef<'_, S>, c: &MatMut<'_, S>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!(a.rows, c.rows, "gemm output rows mismatch");
    assert_eq!(b.cols, c.cols, "gemm output cols mismatch");
}

macro_rules! real_impl {
    ($t:ty, $gemm:path, $tag:literal) => {
        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn real(self) -> f64 {
                self as f64
            }
            #[inline]
            fn tanh(self) -> Self {
                Float::tanh(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                Float::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                Float::abs(self)
            }

            fn gemm(a: MatRef<'_, Self>, b: MatRef<'_, Self>, c: MatMut<'_, Self>, accumulate: bool) {
                check_gemm_dims(&a, &b, &c);
                if c.rows == 0 || c.cols == 0 {
                    return;
                }
                let beta: $t = if accumulate { 1.0 } else { 0.0 };
                if a.cols == 0 {
                    if !accumulate {
                        for r in 0..c.rows {
                            for k in 0..c.cols {
                                c.data[r * c.rs + k * c.cs] = 0.0;
                            }
                        }
                    }
                    return;
                }
                // SAFETY: every view was bounds-checked against its buffer on
                // construction, and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        a.rows,
                        a.cols,
                        b.cols,
                        1.0,
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
        }

        impl Real for $t {
            const DTYPE: &'static str = $tag;
            const BYTES: usize = std::mem::size_of::<$t>();

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

real_impl!(f32, matrixmultiply::sgemm, "f32");
real_impl!(f64, matrixmultiply::dgemm, "f64");

/// First-order dual number `re + eps·ε` with `ε² = 0`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub eps: T,
}

impl<T: Real> Dual<T> {
    pub fn new(re: T, eps: T) -> Self {
        Self { re, eps }
    }

    pub fn constant(re: T) -> Self {
        Self { re, eps: T::zero() }
    }
}

impl<T: Real> Display for Dual<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}ε", self.re, self.eps)
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.eps + o.eps)
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.eps - o.eps)
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl<T: Real> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = T::one() / o.re;
        Self::new(self.re * inv, (self.eps * o.re - self.re * o.eps) * inv * inv)
    }
}

impl<T: Real> Rem for Dual<T> {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        // d/da (a mod b) = 1, d/db = -trunc(a / b)
        let q = (self.re / o.re).trunc();
        Self::new(self.re % o.re, self.eps - q * o.eps)
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.re, -self.eps)
    }
}

macro_rules! dual_assign {
    ($tr:ident, $m:ident, $op:tt) => {
        impl<T: Real> $tr for Dual<T> {
            #[inline]
            fn $m(&mut self, o: Self) {
                *self = *self $op o;
            }
        }
    };
}

dual_assign!(AddAssign, add_assign, +);
dual_assign!(SubAssign, sub_assign, -);
dual_assign!(MulAssign, mul_assign, *);
dual_assign!(DivAssign, div_assign, /);
dual_assign!(RemAssign, rem_assign, %);

impl<T: Real> Zero for Dual<T> {
    fn zero() -> Self {
        Self::constant(T::zero())
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.eps.is_zero()
    }
}

impl<T: Real> One for Dual<T> {
    fn one() -> Self {
        Self::constant(T::one())
    }
}

impl<T: Real> Num for Dual<T> {
    type FromStrRadixErr = <T as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        T::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<T: Real> Scalar for Dual<T> {
    fn of(v: f64) -> Self {
        Self::constant(T::of(v))
    }

    fn real(self) -> f64 {
        self.re.real()
    }

    fn tanh(self) -> Self {
        let t = Float::tanh(self.re);
        Self::new(t, (T::one() - t * t) * self.eps)
    }

    fn sqrt(self) -> Self {
        let s = Float::sqrt(self.re);
        Self::new(s, self.eps / (s + s))
    }

    fn abs(self) -> Self {
        if self.re < T::zero() {
            -self
        } else {
            self
        }
    }

    fn is_finite(self) -> bool {
        Float::is_finite(self.re) && Float::is_finite(self.eps)
    }

    /// Splits into three real products: `re = A.re B.re`,
    /// `eps = A.re B.eps + A.eps B.re`.
    fn gemm(a: MatRef<'_, Self>, b: MatRef<'_, Self>, c: MatMut<'_, Self>, accumulate: bool) {
        check_gemm_dims(&a, &b, &c);
        let (ar, ae) = split_ref(&a);
        let (br, be) = split_ref(&b);
        let (rows, cols) = (c.rows, c.cols);
        let (rs, cs) = (c.rs * 2, c.cs * 2);
        let flat = flatten_mut(c.data);
        T::gemm(ar, br, MatMut::new(flat, rows, cols, rs, cs), accumulate);
        T::gemm(ar, be, MatMut::new(&mut flat[1..], rows, cols, rs, cs), accumulate);
        T::gemm(ae, br, MatMut::new(&mut flat[1..], rows, cols, rs, cs), true);
    }
}

fn flatten<T: Real>(d: &[Dual<T>]) -> &[T] {
    // SAFETY: `Dual<T>` is `repr(C)` with two `T` fields and no padding.
    unsafe { std::slice::from_raw_parts(d.as_ptr() as *const T, d.len() * 2) }
}

fn flatten_mut<T: Real>(d: &mut [Dual<T>]) -> &mut [T] {
    // SAFETY: see `flatten`.
    unsafe { std::slice::from_raw_parts_mut(d.as_mut_ptr() as *mut T, d.len() * 2) }
}

fn split_ref<'a, T: Real>(m: &MatRef<'a, Dual<T>>) -> (MatRef<'a, T>, MatRef<'a, T>) {
    let flat = flatten(m.data);
    let re = MatRef::new(flat, m.rows, m.cols, m.rs * 2, m.cs * 2);
    let eps = MatRef::new(&flat[1..], m.rows, m.cols, m.rs * 2, m.cs * 2);
    (re, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_and_accumulates() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![1.0; m * n];
        f64::gemm(MatRef::row_major(&a, m, k), MatRef::row_major(&b, k, n), MatMut::row_major(&mut c, m, n), true);
        let want = naive(&a, &b, m, k, n);
        for (got, w) in c.iter().zip(&want) {
            assert!((got - (w + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_views() {
        let a = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let mut c = vec![0.0f32; 9];
        // a^T a : 3x3
        f32::gemm(MatRef::row_major_t(&a, 2, 3), MatRef::row_major(&a, 2, 3), MatMut::row_major(&mut c, 3, 3), false);
        assert_eq!(c, vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn dual_gemm_is_product_rule() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<Dual<f64>> = (0..m * k).map(|i| Dual::new(i as f64 * 0.5, (i as f64).sin())).collect();
        let b: Vec<Dual<f64>> = (0..k * n).map(|i| Dual::new(1.0 - i as f64 * 0.25, (i as f64).cos())).collect();
        let mut c = vec![Dual::<f64>::zero(); m * n];
        Dual::gemm(MatRef::row_major(&a, m, k), MatRef::row_major(&b, k, n), MatMut::row_major(&mut c, m, n), false);
        for i in 0..m {
            for j in 0..n {
                let mut want = Dual::<f64>::zero();
                for p in 0..k {
                    want += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j].re - want.re).abs() < 1e-12);
                assert!((c[i * n + j].eps - want.eps).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dual_elementary_derivatives() {
        let x = Dual::new(0.3f64, 1.0);
        assert!((Scalar::tanh(x).eps - (1.0 - 0.3f64.tanh().powi(2))).abs() < 1e-15);
        assert!((Scalar::sqrt(x).eps - 0.5 / 0.3f64.sqrt()).abs() < 1e-12);
        assert_eq!(Scalar::abs(-x).eps, 1.0);
        assert!(((x / Dual::new(2.0, 0.0)).eps - 0.5).abs() < 1e-15);
    }
}
