//! Forward-mode dual numbers as a tape element, for exact directional
//! derivatives of the whole model.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};

use num_dual::{Dual64, DualNum};
use num_traits::{Float, Num, NumCast, One, ToPrimitive, Zero};
use xflab_core::tensor::{DType, Element};

/// Comparisons look at the real part only, so control flow follows the
/// primal computation exactly.
#[derive(Clone, Copy, Debug)]
pub struct Fwd(pub Dual64);

impl Fwd {
    pub fn new(re: f64, eps: f64) -> Self {
        Fwd(Dual64::new(re, eps))
    }

    pub fn re(self) -> f64 {
        self.0.re
    }

    pub fn eps(self) -> f64 {
        self.0.eps
    }

    fn real(re: f64) -> Self {
        Fwd::new(re, 0.0)
    }
}

impl Default for Fwd {
    fn default() -> Self {
        Fwd::real(0.0)
    }
}

impl PartialEq for Fwd {
    fn eq(&self, other: &Self) -> bool {
        self.0.re == other.0.re
    }
}

impl PartialOrd for Fwd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.0.re.partial_cmp(&other.0.re)
    }
}

impl fmt::Display for Fwd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}ε", self.0.re, self.0.eps)
    }
}

macro_rules! binop {
    ($tr:ident, $f:ident) => {
        impl $tr for Fwd {
            type Output = Fwd;
            fn $f(self, rhs: Fwd) -> Fwd {
                Fwd(self.0.$f(rhs.0))
            }
        }
    };
}
binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);
binop!(Div, div);

impl Rem for Fwd {
    type Output = Fwd;
    fn rem(self, rhs: Fwd) -> Fwd {
        // d/dx (x mod y) = 1 away from the jumps.
        Fwd::new(self.0.re % rhs.0.re, self.0.eps)
    }
}

impl Neg for Fwd {
    type Output = Fwd;
    fn neg(self) -> Fwd {
        Fwd(-self.0)
    }
}

impl Zero for Fwd {
    fn zero() -> Self {
        Fwd::real(0.0)
    }
    fn is_zero(&self) -> bool {
        self.0.re == 0.0
    }
}

impl One for Fwd {
    fn one() -> Self {
        Fwd::real(1.0)
    }
}

impl Num for Fwd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Fwd::real)
    }
}

impl ToPrimitive for Fwd {
    fn to_i64(&self) -> Option<i64> {
        self.0.re.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.0.re.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.0.re)
    }
}

impl NumCast for Fwd {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Fwd::real)
    }
}

macro_rules! unary {
    ($($f:ident),*) => {
        $(fn $f(self) -> Self { Fwd(DualNum::$f(&self.0)) })*
    };
}

macro_rules! piecewise_constant {
    ($($f:ident),*) => {
        $(fn $f(self) -> Self { Fwd::real(self.0.re.$f()) })*
    };
}

impl Float for Fwd {
    fn nan() -> Self {
        Fwd::real(f64::NAN)
    }
    fn infinity() -> Self {
        Fwd::real(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Fwd::real(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Fwd::real(-0.0)
    }
    fn min_value() -> Self {
        Fwd::real(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Fwd::real(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        Fwd::real(f64::EPSILON)
    }
    fn max_value() -> Self {
        Fwd::real(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.0.re.is_nan() || self.0.eps.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.0.re.is_infinite() || self.0.eps.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.0.re.is_finite() && self.0.eps.is_finite()
    }
    fn is_normal(self) -> bool {
        self.0.re.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.0.re.classify()
    }
    piecewise_constant!(floor, ceil, round, trunc, signum);
    fn fract(self) -> Self {
        Fwd::new(self.0.re.fract(), self.0.eps)
    }
    fn abs(self) -> Self {
        if self.0.re < 0.0 {
            -self
        } else {
            self
        }
    }
    fn is_sign_positive(self) -> bool {
        self.0.re.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.0.re.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    unary!(recip, sqrt, exp, exp2, ln, log2, log10, cbrt, sin, cos, tan, asin, acos, atan);
    unary!(exp_m1, ln_1p, sinh, cosh, tanh, asinh, acosh, atanh);
    fn powi(self, n: i32) -> Self {
        Fwd(DualNum::powi(&self.0, n))
    }
    fn powf(self, n: Self) -> Self {
        if n.0.eps == 0.0 {
            Fwd(DualNum::powf(&self.0, n.0.re))
        } else {
            (n * self.ln()).exp()
        }
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn max(self, other: Self) -> Self {
        if other.0.re > self.0.re || self.0.re.is_nan() {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if other.0.re < self.0.re || self.0.re.is_nan() {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self.0.re <= other.0.re {
            Fwd::zero()
        } else {
            self - other
        }
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn atan2(self, other: Self) -> Self {
        Fwd(DualNum::atan2(&self.0, other.0))
    }
    fn sin_cos(self) -> (Self, Self) {
        let (s, c) = DualNum::sin_cos(&self.0);
        (Fwd(s), Fwd(c))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.0.re.integer_decode()
    }
}

impl Element for Fwd {
    // Never serialized; the tag only satisfies the trait.
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        Fwd::real(v)
    }

    fn as_f64(self) -> f64 {
        self.0.re
    }

    fn to_bits_u64(self) -> u64 {
        self.0.re.to_bits()
    }

    fn write_le(self, _out: &mut Vec<u8>) {
        unimplemented!("dual numbers are not serialized")
    }

    fn read_le(_bytes: &[u8]) -> Self {
        unimplemented!("dual numbers are not serialized")
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        accumulate: bool,
    ) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = Fwd::zero();
                for p in 0..k {
                    let x = a[(i as isize * rsa + p as isize * csa) as usize];
                    let y = b[(p as isize * rsb + j as isize * csb) as usize];
                    acc = acc + x * y;
                }
                let out = &mut c[i * n + j];
                *out = if accumulate { *out + acc } else { acc };
            }
        }
    }
}
