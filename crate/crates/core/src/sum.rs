//! Compensated (Neumaier) summation.
//!
//! Every quadratic sum that feeds an exact identity goes through
//! [`CompensatedSum`]; plain `f64` accumulation leaves residuals of order
//! `n * eps` which is visible at the 1e-10 level for `n = 10^4`.

use std::fmt::Debug;
use std::iter::FromIterator;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use twofloat::TwoFloat;

/// Running sum with a Neumaier error term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub const fn new() -> Self {
        Self { sum: 0.0, comp: 0.0 }
    }

    #[inline(always)]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        // Branch-free select keeps the hot loop vectorisable.
        let big = self.sum.abs() >= x.abs();
        let lost = if big { (self.sum - t) + x } else { (x - t) + self.sum };
        self.comp += lost;
        self.sum = t;
    }

    #[inline(always)]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl AddAssign<f64> for CompensatedSum {
    #[inline(always)]
    fn add_assign(&mut self, rhs: f64) {
        self.add(rhs);
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated sum of an iterator of terms.
pub fn csum<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    terms.into_iter().collect::<CompensatedSum>().value()
}

/// Scalar type for path sums: `f64` with compensated accumulation, or
/// [`DoubleDouble`] where products and sums carry ~32 digits.
pub trait Real:
    Copy
    + Debug
    + Default
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    type Acc: Debug + Clone + Default;

    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `a * b`, exact for double-double.
    fn prod(a: f64, b: f64) -> Self;
    fn abs(self) -> Self;
    fn accumulate(acc: &mut Self::Acc, x: Self);
    fn total(acc: &Self::Acc) -> Self;
}

impl Real for f64 {
    type Acc = CompensatedSum;

    #[inline(always)]
    fn of(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline(always)]
    fn prod(a: f64, b: f64) -> Self {
        a * b
    }

    #[inline(always)]
    fn abs(self) -> Self {
        f64::abs(self)
    }

    #[inline(always)]
    fn accumulate(acc: &mut CompensatedSum, x: f64) {
        acc.add(x);
    }

    #[inline(always)]
    fn total(acc: &CompensatedSum) -> f64 {
        acc.value()
    }
}

/// Double-double scalar: [`TwoFloat`] with a quotient accurate to ~1e-32.
///
/// `TwoFloat` division is only `f64`-accurate, which alone leaves
/// residuals near `1e-16 * S` in the exact decompositions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoubleDouble(pub TwoFloat);

impl DoubleDouble {
    pub fn hi(self) -> f64 {
        self.0.hi()
    }

    pub fn lo(self) -> f64 {
        self.0.lo()
    }
}

impl Add for DoubleDouble {
    type Output = Self;

    #[inline(always)]
    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

impl Sub for DoubleDouble {
    type Output = Self;

    #[inline(always)]
    fn sub(self, rhs: Self) -> Self {
        Self(self.0 - rhs.0)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;

    #[inline(always)]
    fn mul(self, rhs: Self) -> Self {
        Self(self.0 * rhs.0)
    }
}

impl Div for DoubleDouble {
    type Output = Self;

    /// Long division: each partial quotient removes ~53 bits of remainder.
    fn div(self, rhs: Self) -> Self {
        let b = rhs.0;
        let q1 = self.0.hi() / b.hi();
        let r = self.0 - b * q1;
        let q2 = r.hi() / b.hi();
        let r = r - b * q2;
        let q3 = r.hi() / b.hi();
        Self(TwoFloat::new_add(q1, q2) + q3)
    }
}

impl Neg for DoubleDouble {
    type Output = Self;

    #[inline(always)]
    fn neg(self) -> Self {
        Self(-self.0)
    }
}

impl Real for DoubleDouble {
    type Acc = DoubleDouble;

    #[inline(always)]
    fn of(x: f64) -> Self {
        Self(TwoFloat::from(x))
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self.0.hi() + self.0.lo()
    }

    #[inline(always)]
    fn prod(a: f64, b: f64) -> Self {
        Self(TwoFloat::new_mul(a, b))
    }

    #[inline(always)]
    fn abs(self) -> Self {
        Self(self.0.abs())
    }

    #[inline(always)]
    fn accumulate(acc: &mut DoubleDouble, x: DoubleDouble) {
        *acc = *acc + x;
    }

    #[inline(always)]
    fn total(acc: &DoubleDouble) -> DoubleDouble {
        *acc
    }
}
