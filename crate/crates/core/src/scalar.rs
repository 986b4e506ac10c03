//! Scalar abstraction for the numeric core.
//!
//! All tensor math is generic over [`Scalar`], instantiated as `f64` for
//! training (see the crate-root aliases) and as [`F16`] to emulate half
//! precision when demonstrating attention-score overflow.

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

/// Floating-point scalar usable by the tensor engine.
pub trait Scalar:
    Float + FromPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    /// Convert an `f64` constant into this scalar type.
    fn cst(x: f64) -> Self {
        Self::from_f64(x).expect("constant not representable")
    }

    /// Lossy view as `f64` (used for logging and metrics).
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Largest finite value representable in binary16.
pub const F16_MAX: f64 = 65504.0;

/// Round an `f64` to the nearest representable binary16 value.
///
/// Magnitudes strictly above 65504 saturate to signed infinity; everything
/// else rounds to nearest (ties to even), including subnormals.
pub fn round_to_f16(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let a = x.abs();
    if a > F16_MAX {
        return f64::INFINITY.copysign(x);
    }
    if a == 0.0 {
        return 0.0f64.copysign(x);
    }
    // Unbiased binary exponent of a (a is normal as f64 whenever a >= 2^-1022,
    // which holds for every nonzero f16-range input of interest; anything
    // tinier flushes to zero below).
    let e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    // f16 has a 10-bit mantissa; below 2^-14 the representable values are the
    // multiples of 2^-24.
    let quantum = if e < -14 {
        (-24f64).exp2()
    } else {
        ((e - 10) as f64).exp2()
    };
    let r = (a / quantum).round_ties_even() * quantum;
    r.copysign(x)
}

/// Software emulation of IEEE binary16 arithmetic on top of `f64`.
///
/// Every arithmetic result is immediately rounded back to the nearest
/// representable half-precision value, so overflow behaves as it would on
/// fp16 hardware.
#[derive(Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct F16(f64);

impl F16 {
    pub fn new(x: f64) -> Self {
        F16(round_to_f16(x))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl fmt::Debug for F16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F16({})", self.0)
    }
}

impl fmt::Display for F16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

macro_rules! f16_binop {
    ($trait:ident, $method:ident, $assign_trait:ident, $assign_method:ident, $op:tt) => {
        impl $trait for F16 {
            type Output = F16;
            fn $method(self, rhs: F16) -> F16 {
                F16::new(self.0 $op rhs.0)
            }
        }
        impl $assign_trait for F16 {
            fn $assign_method(&mut self, rhs: F16) {
                *self = *self $op rhs;
            }
        }
    };
}

f16_binop!(Add, add, AddAssign, add_assign, +);
f16_binop!(Sub, sub, SubAssign, sub_assign, -);
f16_binop!(Mul, mul, MulAssign, mul_assign, *);
f16_binop!(Div, div, DivAssign, div_assign, /);
f16_binop!(Rem, rem, RemAssign, rem_assign, %);

impl Neg for F16 {
    type Output = F16;
    fn neg(self) -> F16 {
        F16(-self.0)
    }
}

impl Zero for F16 {
    fn zero() -> Self {
        F16(0.0)
    }
    fn is_zero(&self) -> bool {
        self.0 == 0.0
    }
}

impl One for F16 {
    fn one() -> Self {
        F16(1.0)
    }
}

impl Num for F16 {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(str: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(str, radix).map(F16::new)
    }
}

impl ToPrimitive for F16 {
    fn to_i64(&self) -> Option<i64> {
        self.0.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.0)
    }
}

impl NumCast for F16 {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(F16::new)
    }
}

impl FromPrimitive for F16 {
    fn from_i64(n: i64) -> Option<Self> {
        Some(F16::new(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(F16::new(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(F16::new(n))
    }
}

/// Unary `Float` methods delegated to `f64` with a rounding step after.
macro_rules! f16_unary {
    ($($method:ident),*) => {
        $(fn $method(self) -> Self { F16::new(self.0.$method()) })*
    };
}

impl Float for F16 {
    fn nan() -> Self {
        F16(f64::NAN)
    }
    fn infinity() -> Self {
        F16(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        F16(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        F16(-0.0)
    }
    fn min_value() -> Self {
        F16(-F16_MAX)
    }
    fn min_positive_value() -> Self {
        F16((-14f64).exp2())
    }
    fn max_value() -> Self {
        F16(F16_MAX)
    }
    fn is_nan(self) -> bool {
        self.0.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.0.is_finite()
    }
    fn is_normal(self) -> bool {
        self.0.is_normal()
    }
    fn classify(self) -> std::num::FpCategory {
        self.0.classify()
    }
    fn is_sign_positive(self) -> bool {
        self.0.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.0.is_sign_negative()
    }
    fn signum(self) -> Self {
        F16(self.0.signum())
    }
    fn floor(self) -> Self {
        F16::new(self.0.floor())
    }
    fn ceil(self) -> Self {
        F16::new(self.0.ceil())
    }
    fn round(self) -> Self {
        F16::new(self.0.round())
    }
    fn trunc(self) -> Self {
        F16::new(self.0.trunc())
    }
    fn fract(self) -> Self {
        F16::new(self.0.fract())
    }
    fn abs(self) -> Self {
        F16(self.0.abs())
    }
    fn recip(self) -> Self {
        F16::new(self.0.recip())
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        // Emulated hardware has no fused op: round after each step.
        self * a + b
    }
    fn powi(self, n: i32) -> Self {
        F16::new(self.0.powi(n))
    }
    fn powf(self, n: Self) -> Self {
        F16::new(self.0.powf(n.0))
    }
    fn max(self, other: Self) -> Self {
        F16(self.0.max(other.0))
    }
    fn min(self, other: Self) -> Self {
        F16(self.0.min(other.0))
    }
    fn abs_sub(self, other: Self) -> Self {
        if self.0 <= other.0 {
            F16(0.0)
        } else {
            self - other
        }
    }
    fn hypot(self, other: Self) -> Self {
        F16::new(self.0.hypot(other.0))
    }
    fn atan2(self, other: Self) -> Self {
        F16::new(self.0.atan2(other.0))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.0.integer_decode()
    }
    fn epsilon() -> Self {
        F16((-10f64).exp2())
    }
    f16_unary!(
        sqrt, exp, exp2, ln, log2, log10, cbrt, sin, cos, tan, asin, acos, atan, exp_m1, ln_1p,
        sinh, cosh, tanh, asinh, acosh, atanh
    );
    fn log(self, base: Self) -> Self {
        F16::new(self.0.log(base.0))
    }
    fn to_degrees(self) -> Self {
        F16::new(self.0.to_degrees())
    }
    fn to_radians(self) -> Self {
        F16::new(self.0.to_radians())
    }
}

impl Scalar for F16 {}
