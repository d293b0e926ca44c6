//! Exact and high-precision arithmetic shared by the oracles and the
//! first-moment formula.
//!
//! Tilts λ are kept as small rationals so that λ ∈ {0,1} stays on exact
//! integer/rational paths. Fractional tilts need x^λ for integer or rational
//! x, which is computed as a q-th root of an exact power by Newton iteration
//! over rationals, with each iterate rounded to `PREC_BITS` significant bits.
//! Every rounding loses at most 2^(1-PREC_BITS) relative error and the root
//! is polished until successive iterates agree to that scale, so results
//! carry ~38 correct decimal digits, far beyond the 1e-10 comparisons the
//! verification suite makes.

use num_bigint::{BigInt, BigUint};
use num_rational::{BigRational, Ratio};
use num_traits::{One, Signed, ToPrimitive, Zero};
use std::str::FromStr;
use thiserror::Error;

/// Working precision for fractional-tilt arithmetic.
pub const PREC_BITS: u64 = 128;

#[derive(Debug, Error)]
pub enum LambdaError {
    #[error("cannot parse `{0}` as a tilt in [0,1]")]
    Parse(String),
    #[error("tilt {0} lies outside [0,1]")]
    OutOfRange(String),
}

/// A cluster-size tilt λ ∈ [0,1], held exactly as a reduced fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Lambda(Ratio<i64>);

impl Lambda {
    pub const ZERO: Lambda = Lambda(Ratio::new_raw(0, 1));
    pub const ONE: Lambda = Lambda(Ratio::new_raw(1, 1));

    pub fn new(numer: i64, denom: i64) -> Result<Lambda, LambdaError> {
        if denom == 0 {
            return Err(LambdaError::Parse(format!("{numer}/{denom}")));
        }
        let r = Ratio::new(numer, denom);
        if r < Ratio::zero() || r > Ratio::one() {
            return Err(LambdaError::OutOfRange(format!("{r}")));
        }
        Ok(Lambda(r))
    }

    /// Parses either a decimal like "0.25" or a fraction like "1/3".
    pub fn parse(text: &str) -> Result<Lambda, LambdaError> {
        let bad = || LambdaError::Parse(text.to_string());
        if text.contains('-') {
            return Err(LambdaError::OutOfRange(text.to_string()));
        }
        let r = if let Some((num, den)) = text.split_once('/') {
            let n = i64::from_str(num.trim()).map_err(|_| bad())?;
            let d = i64::from_str(den.trim()).map_err(|_| bad())?;
            if d == 0 {
                return Err(bad());
            }
            Ratio::new(n, d)
        } else if let Some((int, frac)) = text.split_once('.') {
            let int = if int.is_empty() { "0" } else { int };
            let whole = i64::from_str(int).map_err(|_| bad())?;
            if frac.is_empty() || frac.len() > 15 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let scale = 10i64.pow(frac.len() as u32);
            let part = i64::from_str(frac).map_err(|_| bad())?;
            Ratio::new(whole * scale + part, scale)
        } else {
            Ratio::from_integer(i64::from_str(text.trim()).map_err(|_| bad())?)
        };
        if r < Ratio::zero() || r > Ratio::one() {
            return Err(LambdaError::OutOfRange(text.to_string()));
        }
        Ok(Lambda(r))
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_one(&self) -> bool {
        self.0.is_one()
    }

    /// Exact on {0,1}; otherwise irrational in general.
    pub fn is_exact(&self) -> bool {
        self.is_zero() || self.is_one()
    }

    pub fn numer(&self) -> i64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i64 {
        *self.0.denom()
    }

    pub fn to_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }
}

impl std::fmt::Display for Lambda {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Rounds r to at most `bits` significant bits (relative error < 2^(1-bits)).
pub fn round_bits(r: &BigRational, bits: u64) -> BigRational {
    if r.is_zero() {
        return BigRational::zero();
    }
    let mag = r.numer().bits() as i64 - r.denom().bits() as i64;
    let shift = bits as i64 - mag;
    let one = BigInt::one();
    if shift >= 0 {
        let scaled = r * BigRational::from_integer(one.clone() << shift as u64);
        BigRational::new(scaled.round().to_integer(), one << shift as u64)
    } else {
        let scaled = r / BigRational::from_integer(one.clone() << (-shift) as u64);
        BigRational::from_integer(scaled.round().to_integer() << (-shift) as u64)
    }
}

/// q-th root of a positive rational by Newton iteration, correct to
/// `PREC_BITS` bits.
fn nth_root(x: &BigRational, q: u64) -> BigRational {
    assert!(q >= 1 && x.is_positive());
    if q == 1 {
        return x.clone();
    }
    // Seed at a power of two at least the root: 2^ceil(mag/q) with
    // mag an upper bound for log2 x.
    let mag = x.numer().bits() as i64 - x.denom().bits() as i64 + 1;
    let e = if mag >= 0 {
        (mag + q as i64 - 1) / q as i64
    } else {
        mag / q as i64
    };
    let one = BigInt::one();
    let mut y = if e >= 0 {
        BigRational::from_integer(one << e as u64)
    } else {
        BigRational::new(one, BigInt::one() << (-e) as u64)
    };
    let qi = BigRational::from_integer(BigInt::from(q));
    let qm1 = BigRational::from_integer(BigInt::from(q - 1));
    // Newton: y <- ((q-1)y + x / y^(q-1)) / q, rounded each step.
    let tol_shift = PREC_BITS - 2;
    loop {
        let mut ypow = BigRational::one();
        for _ in 0..q - 1 {
            ypow *= &y;
        }
        let next = round_bits(&((&qm1 * &y + x / &ypow) / &qi), PREC_BITS + 16);
        let delta = (&next - &y).abs();
        let done = delta * BigRational::from_integer(BigInt::one() << tol_shift) <= next;
        y = next;
        if done {
            return y;
        }
    }
}

/// x^λ for positive rational x, exact when λ ∈ {0,1}, otherwise correct to
/// ~PREC_BITS bits.
pub fn pow_lambda(x: &BigRational, lambda: Lambda) -> BigRational {
    assert!(x.is_positive(), "pow_lambda needs a positive base");
    if lambda.is_zero() {
        return BigRational::one();
    }
    if lambda.is_one() {
        return x.clone();
    }
    let p = lambda.numer() as u64;
    let q = lambda.denom() as u64;
    let mut xp = BigRational::one();
    for _ in 0..p {
        xp *= x;
    }
    nth_root(&xp, q)
}

/// Integer-base convenience wrapper.
pub fn pow_lambda_uint(x: &BigUint, lambda: Lambda) -> BigRational {
    pow_lambda(
        &BigRational::from_integer(BigInt::from(x.clone())),
        lambda,
    )
}

pub fn factorial(n: usize) -> BigUint {
    let mut acc = BigUint::one();
    for i in 2..=n {
        acc *= BigUint::from(i);
    }
    acc
}

/// total! / (parts_1! ... parts_r!); parts must sum to at most total, the
/// remainder is treated as one more block (so multiset coefficients come out
/// directly).
pub fn multinomial(total: usize, parts: &[usize]) -> BigUint {
    let used: usize = parts.iter().sum();
    assert!(used <= total, "multinomial parts exceed total");
    let mut acc = factorial(total);
    for &p in parts {
        acc /= factorial(p);
    }
    if used < total {
        acc /= factorial(total - used);
    }
    acc
}

pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    multinomial(n, &[k])
}

/// Exact rational -> f64 via 200-bit intermediate rounding.
pub fn rational_to_f64(r: &BigRational) -> f64 {
    if r.is_zero() {
        return 0.0;
    }
    let mag = r.numer().bits() as i64 - r.denom().bits() as i64;
    // Scale into f64 range, convert, unscale.
    let shift = 64i64 - mag;
    let scaled = if shift >= 0 {
        r * BigRational::from_integer(BigInt::one() << shift as u64)
    } else {
        r / BigRational::from_integer(BigInt::one() << (-shift) as u64)
    };
    let num = scaled.numer().to_f64().unwrap_or(f64::NAN);
    let den = scaled.denom().to_f64().unwrap_or(f64::NAN);
    (num / den) * 2f64.powi(-shift as i32)
}
