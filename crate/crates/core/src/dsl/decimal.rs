//! Fixed-point decimal with six fractional digits, backed by `i128`.

use std::cmp::Ordering;
use std::fmt;

pub const SCALE_DIGITS: u32 = 6;
pub const SCALE: i128 = 1_000_000;
/// Largest representable magnitude, in scaled units (10^20 whole units).
pub const MAX_SCALED: i128 = 100_000_000_000_000_000_000 * SCALE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecimalError {
    Overflow,
    DivisionByZero,
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Decimal(i128);

impl Decimal {
    pub const ZERO: Decimal = Decimal(0);

    fn checked(scaled: i128) -> Result<Decimal, DecimalError> {
        if scaled.abs() > MAX_SCALED {
            Err(DecimalError::Overflow)
        } else {
            Ok(Decimal(scaled))
        }
    }

    pub fn from_int(n: i64) -> Result<Decimal, DecimalError> {
        Self::checked(i128::from(n) * SCALE)
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Parse `[+-]digits[.digits]` with optional comma grouping of the
    /// integer part. Surrounding whitespace is ignored.
    pub fn parse(text: &str) -> Result<Decimal, DecimalError> {
        let canon = crate::answer::canonical_decimal(text.trim()).ok_or(DecimalError::Malformed)?;
        let (negative, body) = match canon.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, canon.as_str()),
        };
        let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
        // anything with more than 21 integer digits is beyond the limit
        if int_part.len() > 21 {
            return Err(DecimalError::Overflow);
        }
        let int_val: i128 = int_part.parse().map_err(|_| DecimalError::Malformed)?;
        let mut frac_digits: Vec<u8> = frac_part.bytes().map(|b| b - b'0').collect();
        let round_up = frac_digits.len() > SCALE_DIGITS as usize && frac_digits[SCALE_DIGITS as usize] >= 5;
        frac_digits.resize(SCALE_DIGITS as usize, 0);
        let mut frac_val: i128 = 0;
        for d in frac_digits {
            frac_val = frac_val * 10 + i128::from(d);
        }
        let mut scaled = int_val * SCALE + frac_val;
        if round_up {
            scaled += 1;
        }
        if negative {
            scaled = -scaled;
        }
        Self::checked(scaled)
    }

    pub fn add(self, other: Decimal) -> Result<Decimal, DecimalError> {
        Self::checked(self.0 + other.0)
    }

    pub fn sub(self, other: Decimal) -> Result<Decimal, DecimalError> {
        Self::checked(self.0 - other.0)
    }

    pub fn neg(self) -> Decimal {
        Decimal(-self.0)
    }

    pub fn mul(self, other: Decimal) -> Result<Decimal, DecimalError> {
        let product = self.0.checked_mul(other.0).ok_or(DecimalError::Overflow)?;
        Self::checked(div_round(product, SCALE))
    }

    pub fn div(self, other: Decimal) -> Result<Decimal, DecimalError> {
        if other.0 == 0 {
            return Err(DecimalError::DivisionByZero);
        }
        // |self| <= 1e26, so the widened numerator stays far below i128::MAX
        Self::checked(div_round(self.0 * SCALE, other.0))
    }

    /// Division by a whole count (used by `avg`).
    pub fn div_count(self, count: usize) -> Result<Decimal, DecimalError> {
        if count == 0 {
            return Err(DecimalError::DivisionByZero);
        }
        Self::checked(div_round(self.0, count as i128))
    }
}

/// `n / d` rounded half away from zero.
fn div_round(n: i128, d: i128) -> i128 {
    let q = n / d;
    let r = n % d;
    if 2 * r.abs() >= d.abs() {
        if (n < 0) != (d < 0) {
            q - 1
        } else {
            q + 1
        }
    } else {
        q
    }
}

impl PartialOrd<i128> for Decimal {
    fn partial_cmp(&self, other: &i128) -> Option<Ordering> {
        self.0.partial_cmp(&(other * SCALE))
    }
}

impl PartialEq<i128> for Decimal {
    fn eq(&self, other: &i128) -> bool {
        self.0 == other * SCALE
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let abs = self.0.unsigned_abs();
        let scale = SCALE as u128;
        let int = abs / scale;
        let frac = abs % scale;
        if self.0 < 0 {
            f.write_str("-")?;
        }
        write!(f, "{int}")?;
        if frac != 0 {
            let digits = format!("{frac:06}");
            write!(f, ".{}", digits.trim_end_matches('0'))?;
        }
        Ok(())
    }
}
