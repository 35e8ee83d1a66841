//! 16-bit fixed-point arithmetic.
//!
//! Values are stored as two's-complement `i16` with a declared [`QFormat`].
//! Products accumulate in 32-bit saturating accumulators at scale
//! `2^(fa + fb)` and are renormalized back to 16 bits with
//! round-to-nearest-even. All saturation is silent and counted in
//! [`OpCounter::saturations`].

use std::fmt;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Total stored bits for every value.
pub const WORD_BITS: u8 = 16;

/// Fixed-point format `Q<int_bits>.<frac_bits>`, with the sign bit counted in
/// `int_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "(u8, u8)", into = "(u8, u8)")]
pub struct QFormat {
    int_bits: u8,
    frac_bits: u8,
}

impl QFormat {
    /// Default activation format.
    pub const Q8_8: QFormat = QFormat {
        int_bits: 8,
        frac_bits: 8,
    };
    /// Default weight format.
    pub const Q2_14: QFormat = QFormat {
        int_bits: 2,
        frac_bits: 14,
    };

    pub fn new(int_bits: u8, frac_bits: u8) -> Result<Self> {
        if int_bits < 1 || u16::from(int_bits) + u16::from(frac_bits) != u16::from(WORD_BITS) {
            return Err(Error::config(format!(
                "Q{int_bits}.{frac_bits}: int_bits + frac_bits must be 16 with int_bits >= 1"
            )));
        }
        Ok(QFormat {
            int_bits,
            frac_bits,
        })
    }

    /// Builds the format with `frac_bits` fractional bits.
    pub fn with_frac(frac_bits: u8) -> Result<Self> {
        if frac_bits >= WORD_BITS {
            return Err(Error::config(format!("frac_bits {frac_bits} >= 16")));
        }
        Self::new(WORD_BITS - frac_bits, frac_bits)
    }

    pub fn int_bits(self) -> u8 {
        self.int_bits
    }

    pub fn frac_bits(self) -> u8 {
        self.frac_bits
    }

    /// Weight of one raw unit, `2^-frac_bits`.
    pub fn ulp(self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn max_value(self) -> f64 {
        i16::MAX as f64 * self.ulp()
    }

    pub fn min_value(self) -> f64 {
        i16::MIN as f64 * self.ulp()
    }
}

impl Default for QFormat {
    fn default() -> Self {
        QFormat::Q8_8
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.int_bits, self.frac_bits)
    }
}

impl std::str::FromStr for QFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim().trim_start_matches(['Q', 'q']);
        let (i, f) = body
            .split_once('.')
            .ok_or_else(|| Error::config(format!("bad Q-format {s:?}, expected e.g. Q8.8")))?;
        let int_bits = i
            .parse()
            .map_err(|_| Error::config(format!("bad Q-format {s:?}")))?;
        let frac_bits = f
            .parse()
            .map_err(|_| Error::config(format!("bad Q-format {s:?}")))?;
        QFormat::new(int_bits, frac_bits)
    }
}

impl TryFrom<(u8, u8)> for QFormat {
    type Error = Error;

    fn try_from((i, f): (u8, u8)) -> Result<Self> {
        QFormat::new(i, f)
    }
}

impl From<QFormat> for (u8, u8) {
    fn from(q: QFormat) -> Self {
        (q.int_bits, q.frac_bits)
    }
}

/// A single fixed-point value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QScalar {
    pub raw: i16,
    pub fmt: QFormat,
}

impl QScalar {
    pub fn from_raw(raw: i16, fmt: QFormat) -> Self {
        QScalar { raw, fmt }
    }

    pub fn to_f64(self) -> f64 {
        dequantize(self)
    }
}

/// Operation and diagnostic counters. One MAC counts as 2 Op.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub macs_executed: u64,
    pub macs_dense_equivalent: u64,
    pub adds: u64,
    pub comparisons: u64,
    /// Silent saturation events (quantize, accumulate and renormalize).
    pub saturations: u64,
}

impl OpCounter {
    pub fn total_ops(&self) -> u64 {
        2 * self.macs_executed + self.adds + self.comparisons
    }

    /// Op count a dense engine would have executed for the same work.
    pub fn dense_equivalent_ops(&self) -> u64 {
        2 * self.macs_dense_equivalent + self.adds + self.comparisons
    }

    /// `dense_equivalent / executed` as a fraction, `None` when nothing executed.
    pub fn efficiency(&self) -> Option<f64> {
        (self.macs_executed > 0)
            .then(|| self.macs_dense_equivalent as f64 / self.macs_executed as f64)
    }
}

impl AddAssign for OpCounter {
    fn add_assign(&mut self, o: Self) {
        self.macs_executed += o.macs_executed;
        self.macs_dense_equivalent += o.macs_dense_equivalent;
        self.adds += o.adds;
        self.comparisons += o.comparisons;
        self.saturations += o.saturations;
    }
}

impl std::iter::Sum for OpCounter {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut total = OpCounter::default();
        for c in iter {
            total += c;
        }
        total
    }
}

#[inline]
fn saturate_i16(v: i64, ops: &mut OpCounter) -> i16 {
    if v > i16::MAX as i64 {
        ops.saturations += 1;
        i16::MAX
    } else if v < i16::MIN as i64 {
        ops.saturations += 1;
        i16::MIN
    } else {
        v as i16
    }
}

#[inline]
fn saturate_i32(v: i64, ops: &mut OpCounter) -> i32 {
    if v > i32::MAX as i64 {
        ops.saturations += 1;
        i32::MAX
    } else if v < i32::MIN as i64 {
        ops.saturations += 1;
        i32::MIN
    } else {
        v as i32
    }
}

/// Round-to-nearest-even of `value * 2^frac_bits`, saturated to 16 bits.
pub fn quantize(value: f64, fmt: QFormat, ops: &mut OpCounter) -> QScalar {
    let scaled = (value * (fmt.frac_bits as f64).exp2()).round_ties_even();
    let raw = if scaled.is_nan() {
        0
    } else if scaled > i16::MAX as f64 {
        ops.saturations += 1;
        i16::MAX
    } else if scaled < i16::MIN as f64 {
        ops.saturations += 1;
        i16::MIN
    } else {
        scaled as i16
    };
    QScalar { raw, fmt }
}

pub fn dequantize(q: QScalar) -> f64 {
    q.raw as f64 * q.fmt.ulp()
}

/// `acc + a * b` with 32-bit saturation. Counts one executed MAC.
#[inline]
pub fn mac_accumulate(acc: i32, a: i16, b: i16, ops: &mut OpCounter) -> i32 {
    ops.macs_executed += 1;
    saturate_i32(acc as i64 + a as i64 * b as i64, ops)
}

/// Arithmetic shift right by `shift` with round-half-to-even.
#[inline]
pub fn shift_round_even(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    if shift >= 63 {
        return 0;
    }
    let q = v >> shift;
    let rem = v - (q << shift);
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Rescales a wide accumulator at scale `2^acc_frac` into `out`.
#[inline]
pub fn renormalize_wide(acc: i64, acc_frac: u32, out: QFormat, ops: &mut OpCounter) -> i16 {
    let out_frac = out.frac_bits as u32;
    let v = if acc_frac >= out_frac {
        shift_round_even(acc, acc_frac - out_frac)
    } else {
        let up = out_frac - acc_frac;
        // |acc| < 2^63 and up <= 15; overflow only matters past i16 range anyway.
        acc.checked_shl(up)
            .filter(|s| s >> up == acc)
            .unwrap_or(if acc < 0 { i64::MIN } else { i64::MAX })
    };
    saturate_i16(v, ops)
}

/// Rescales a 32-bit product accumulator of `a`-format by `b`-format values
/// into `out`, rounding ties to even and saturating.
pub fn renormalize(acc: i32, fmt_a: QFormat, fmt_b: QFormat, out: QFormat, ops: &mut OpCounter) -> QScalar {
    let acc_frac = fmt_a.frac_bits as u32 + fmt_b.frac_bits as u32;
    QScalar {
        raw: renormalize_wide(acc as i64, acc_frac, out, ops),
        fmt: out,
    }
}

/// Highest tensor rank; rank 4 holds conv weights `(out_c, in_c, kh, kw)`.
pub const MAX_RANK: usize = 4;

/// Dense fixed-point tensor. Canonical order is channel-major then row-major:
/// `index = c*(H*W) + y*W + x`. Rank-2 tensors are `(rows, cols)` row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QTensor {
    dims: Vec<usize>,
    fmt: QFormat,
    data: Vec<i16>,
}

impl QTensor {
    pub fn new(dims: Vec<usize>, fmt: QFormat, data: Vec<i16>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::shape(format!("rank {} not in 1..={MAX_RANK}", dims.len())));
        }
        let n = checked_product(&dims)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(QTensor { dims, fmt, data })
    }

    pub fn zeros(dims: Vec<usize>, fmt: QFormat) -> Result<Self> {
        let n = checked_product(&dims)?;
        Self::new(dims, fmt, vec![0; n])
    }

    pub fn vector(fmt: QFormat, data: Vec<i16>) -> Self {
        QTensor {
            dims: vec![data.len()],
            fmt,
            data,
        }
    }

    /// Quantizes real values into a tensor of the given shape.
    pub fn from_f64(dims: Vec<usize>, fmt: QFormat, values: &[f64], ops: &mut OpCounter) -> Result<Self> {
        let data = values.iter().map(|&v| quantize(v, fmt, ops).raw).collect();
        Self::new(dims, fmt, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn fmt(&self) -> QFormat {
        self.fmt
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i16] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<i16> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// `(C, H, W)`; lower ranks gain leading ones, rank 4 folds its two outer dims.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.dims[..] {
            [n] => (1, 1, n),
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            [a, b, h, w] => (a * b, h, w),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn get(&self, i: usize) -> QScalar {
        QScalar::from_raw(self.data[i], self.fmt)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        let ulp = self.fmt.ulp();
        self.data.iter().map(|&r| r as f64 * ulp).collect()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

pub(crate) fn checked_product(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("dims {dims:?} overflow")))
}
