//! Closed-form cost model of a leveled LSM-tree with a compaction buffer,
//! and a simulator to check it against.
//!
//! The closed forms are generic over the scalar so they can be evaluated
//! exactly (see [`Rational`]) or in floating point.

mod sim;

use std::fmt::Debug;

use num_traits::Num;

use crate::error::{Error, Result};

pub use sim::{simulate_compaction, SimConfig, SimLevel, SimReport, SimStrategy};

/// Any number type the closed forms can be evaluated in.
pub trait Scalar: Num + Clone + PartialOrd + Debug {}

impl<T: Num + Clone + PartialOrd + Debug> Scalar for T {}

/// Exact arithmetic for the closed forms.
pub type Rational = num_rational::BigRational;

/// Converts a small integer into any scalar.
pub fn scalar<T: Scalar>(n: u64) -> T {
    let two = T::one() + T::one();
    let mut out = T::zero();
    for bit in (0..64).rev() {
        out = out * two.clone();
        if n >> bit & 1 == 1 {
            out = out + T::one();
        }
    }
    out
}

fn pow<T: Scalar>(base: &T, exp: u32) -> T {
    (0..exp).fold(T::one(), |acc, _| acc * base.clone())
}

/// Inputs of the write-rate model.
#[derive(Debug, Clone, PartialEq)]
pub struct LsmModelParams<T> {
    /// Ingest rate, bytes per unit time.
    pub w0: T,
    /// Memtable capacity S0 in bytes.
    pub s0: T,
    /// Size ratio r.
    pub r: u32,
    /// Number of on-disk levels k.
    pub k: u32,
}

impl<T: Scalar> LsmModelParams<T> {
    pub fn new(w0: T, s0: T, r: u32, k: u32) -> Result<Self> {
        let p = LsmModelParams { w0, s0, r, k };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 2 {
            return Err(Error::Domain(format!("size ratio must be at least 2, got {}", self.r)));
        }
        if self.k < 1 {
            return Err(Error::Domain("need at least one on-disk level".into()));
        }
        if !(self.w0 > T::zero() && self.s0 > T::zero()) {
            return Err(Error::Domain("w0 and S0 must be positive".into()));
        }
        Ok(())
    }

    fn ratio(&self) -> T {
        scalar(self.r as u64)
    }

    /// S_i = S0 * r^i.
    pub fn level_size(&self, i: u32) -> T {
        self.s0.clone() * pow(&self.ratio(), i)
    }
}

/// Fraction of level `i` rewritten per unit time: U_i = U_0 / r^i with
/// U_0 = (1 + r) w0 / S0. Level 0 is the memtable.
pub fn level_update_rate<T: Scalar>(p: &LsmModelParams<T>, i: u32) -> Result<T> {
    p.validate()?;
    if i > p.k {
        return Err(Error::Domain(format!("level {i} is below the last level {}", p.k)));
    }
    let r = p.ratio();
    let u0 = (T::one() + r.clone()) * p.w0.clone() / p.s0.clone();
    Ok(u0 / pow(&r, i))
}

/// Update rate of buffer level `i`: U_i / (1 + r) above the last level.
/// The last level is not buffered, so its rate is U_k itself.
pub fn buffer_update_rate<T: Scalar>(p: &LsmModelParams<T>, i: u32) -> Result<T> {
    if i < 1 {
        return Err(Error::Domain("buffer levels start at 1".into()));
    }
    let u = level_update_rate(p, i)?;
    if i == p.k {
        return Ok(u);
    }
    Ok(u / (T::one() + p.ratio()))
}

/// Share of the on-disk data held by levels 1..k-1 when every level is
/// full: (r^(k-1) - 1) / (r^k - 1).
pub fn upper_levels_fraction<T: Scalar>(r: u32, k: u32) -> Result<T> {
    if r < 2 || k < 2 {
        return Err(Error::Domain(format!("need r >= 2 and k >= 2, got r={r} k={k}")));
    }
    let r: T = scalar(r as u64);
    Ok((pow(&r, k - 1) - T::one()) / (pow(&r, k) - T::one()))
}

/// Bytes written by compaction per unit time over all levels: k (1 + r) w0.
pub fn total_compaction_write_rate<T: Scalar>(p: &LsmModelParams<T>) -> T {
    scalar::<T>(p.k as u64) * (T::one() + p.ratio()) * p.w0.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::ToPrimitive;

    fn q(n: u64, d: u64) -> Rational {
        scalar::<Rational>(n) / scalar::<Rational>(d)
    }

    fn exact(r: u32, k: u32) -> LsmModelParams<Rational> {
        LsmModelParams::new(q(1, 1), q(1, 1), r, k).unwrap()
    }

    #[test]
    fn update_rates_evaluate_directly() {
        let p = exact(10, 3);
        assert_eq!(level_update_rate(&p, 0).unwrap(), q(11, 1));
        assert_eq!(level_update_rate(&p, 2).unwrap(), q(11, 100));
        assert!(level_update_rate(&p, 4).is_err());
        let f = LsmModelParams::new(1.0f64, 1.0, 10, 3).unwrap();
        assert!((level_update_rate(&f, 2).unwrap() - 0.11).abs() < 1e-12);
    }

    #[test]
    fn buffer_rates() {
        let p = exact(10, 3);
        for i in 1..3 {
            let ratio = buffer_update_rate(&p, i).unwrap() / level_update_rate(&p, i).unwrap();
            assert_eq!(ratio, q(1, 11));
        }
        assert_eq!(buffer_update_rate(&p, 3).unwrap(), level_update_rate(&p, 3).unwrap());
        assert!(buffer_update_rate(&p, 0).is_err());
        // the last two buffer levels refresh at nearly the same rate
        let ratio = buffer_update_rate(&p, 3).unwrap() / buffer_update_rate(&p, 2).unwrap();
        assert_eq!(ratio, q(11, 10));
    }

    #[test]
    fn upper_fraction() {
        assert_eq!(upper_levels_fraction::<Rational>(10, 3).unwrap(), q(99, 999));
        assert_eq!(upper_levels_fraction::<Rational>(2, 2).unwrap(), q(1, 3));
        assert!(upper_levels_fraction::<Rational>(1, 3).is_err());
        let f: f64 = upper_levels_fraction(10, 3).unwrap();
        assert!((f - 0.0990990).abs() < 1e-6);
    }

    #[test]
    fn write_rate() {
        assert_eq!(total_compaction_write_rate(&exact(10, 3)), q(33, 1));
        let p = LsmModelParams {
            w0: q(1, 1),
            s0: q(1, 1),
            r: 1,
            k: 1,
        };
        assert_eq!(total_compaction_write_rate(&p), q(2, 1));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(LsmModelParams::new(1.0, 1.0, 1, 3).is_err());
        assert!(LsmModelParams::new(0.0, 1.0, 4, 3).is_err());
        assert!(LsmModelParams::new(1.0, 1.0, 4, 0).is_err());
    }

    #[test]
    fn f32_works_too() {
        let p = LsmModelParams::new(1.0f32, 1.0, 4, 3).unwrap();
        assert!((level_update_rate(&p, 1).unwrap() - 1.25).abs() < 1e-6);
        assert_eq!(q(1, 3).to_f64().unwrap(), 1.0 / 3.0);
    }

    proptest::proptest! {
        #[test]
        fn adjacent_levels_differ_by_r(r in 2u32..17, k in 1u32..7, w in 1u64..1000, s in 1u64..1000) {
            let p = LsmModelParams::new(q(w, 7), q(s, 3), r, k).unwrap();
            for i in 0..k {
                let a = level_update_rate(&p, i).unwrap();
                let b = level_update_rate(&p, i + 1).unwrap();
                proptest::prop_assert_eq!(a / b, scalar::<Rational>(r as u64));
            }
            for i in 1..k {
                let d = buffer_update_rate(&p, i).unwrap() * (q(1, 1) + scalar::<Rational>(r as u64));
                proptest::prop_assert_eq!(d, level_update_rate(&p, i).unwrap());
            }
        }

        #[test]
        fn upper_levels_hold_less_than_one_over_r(r in 2u32..17, k in 2u32..7) {
            let f: Rational = upper_levels_fraction(r, k).unwrap();
            proptest::prop_assert!(f < q(1, r as u64));
        }
    }
}
