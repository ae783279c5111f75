//! Software emulation of the FPU's floating-point formats.
//!
//! Values are carried as `f64` and are always exactly representable in the
//! format they belong to. Every write goes through [`quantize`], which rounds
//! to nearest with ties to even and handles subnormals and overflow per
//! format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FloatFormat {
    #[serde(rename = "fp64")]
    Fp64,
    #[serde(rename = "fp32")]
    Fp32,
    #[serde(rename = "fp16")]
    Fp16,
    #[serde(rename = "bf16")]
    Bf16,
    #[serde(rename = "fp8e4m3")]
    Fp8E4M3,
    #[serde(rename = "fp8e5m2")]
    Fp8E5M2,
}

/// Static description of a format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FormatInfo {
    pub format: FloatFormat,
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub bias: i32,
    /// Lanes per 64-bit FPU datapath.
    pub simd_lanes: u32,
}

impl FormatInfo {
    pub fn bit_width(&self) -> u32 {
        1 + self.exponent_bits + self.mantissa_bits
    }
}

impl FloatFormat {
    pub const ALL: [FloatFormat; 6] = [
        FloatFormat::Fp64,
        FloatFormat::Fp32,
        FloatFormat::Fp16,
        FloatFormat::Bf16,
        FloatFormat::Fp8E4M3,
        FloatFormat::Fp8E5M2,
    ];

    pub fn info(self) -> FormatInfo {
        let (e, m, lanes) = match self {
            FloatFormat::Fp64 => (11, 52, 1),
            FloatFormat::Fp32 => (8, 23, 2),
            FloatFormat::Fp16 => (5, 10, 4),
            FloatFormat::Bf16 => (8, 7, 4),
            FloatFormat::Fp8E4M3 => (4, 3, 8),
            FloatFormat::Fp8E5M2 => (5, 2, 8),
        };
        FormatInfo {
            format: self,
            exponent_bits: e,
            mantissa_bits: m,
            bias: (1 << (e - 1)) - 1,
            simd_lanes: lanes,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FloatFormat::Fp64 => "fp64",
            FloatFormat::Fp32 => "fp32",
            FloatFormat::Fp16 => "fp16",
            FloatFormat::Bf16 => "bf16",
            FloatFormat::Fp8E4M3 => "fp8e4m3",
            FloatFormat::Fp8E5M2 => "fp8e5m2",
        }
    }

    pub fn bit_width(self) -> u32 {
        self.info().bit_width()
    }

    pub fn bytes(self) -> usize {
        (self.bit_width() / 8) as usize
    }

    pub fn is_fp8(self) -> bool {
        matches!(self, FloatFormat::Fp8E4M3 | FloatFormat::Fp8E5M2)
    }

    /// E4M3 has no infinities and saturates on overflow.
    pub fn has_infinity(self) -> bool {
        self != FloatFormat::Fp8E4M3
    }

    pub fn max_finite(self) -> f64 {
        match self {
            FloatFormat::Fp64 => f64::MAX,
            FloatFormat::Fp32 => f32::MAX as f64,
            // 1.110 x 2^8; the all-ones mantissa at the top exponent is NaN.
            FloatFormat::Fp8E4M3 => 448.0,
            _ => {
                let info = self.info();
                let emax = (1i32 << info.exponent_bits) - 2 - info.bias;
                let m = info.mantissa_bits as i32;
                (2.0 - 2f64.powi(-m)) * 2f64.powi(emax)
            }
        }
    }

    /// Smallest positive subnormal.
    pub fn min_subnormal(self) -> f64 {
        let info = self.info();
        2f64.powi(1 - info.bias - info.mantissa_bits as i32)
    }

    /// Accumulator used when a run does not override it.
    pub fn default_accumulator(self) -> FloatFormat {
        match self {
            FloatFormat::Fp64 => FloatFormat::Fp64,
            FloatFormat::Fp32 | FloatFormat::Fp16 | FloatFormat::Bf16 => FloatFormat::Fp32,
            FloatFormat::Fp8E4M3 | FloatFormat::Fp8E5M2 => FloatFormat::Fp16,
        }
    }

    /// Precision used for softmax, normalization and activations: FP32 or wider.
    pub fn statistics_format(self) -> FloatFormat {
        if self == FloatFormat::Fp64 {
            FloatFormat::Fp64
        } else {
            FloatFormat::Fp32
        }
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FloatFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FloatFormat::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownFormat(s.to_string()))
    }
}

pub fn format_table() -> Vec<FormatInfo> {
    FloatFormat::ALL.iter().map(|f| f.info()).collect()
}

/// Round `x` to the nearest value representable in `fmt` (ties to even).
pub fn quantize(x: f64, fmt: FloatFormat) -> f64 {
    match fmt {
        FloatFormat::Fp64 => x,
        FloatFormat::Fp32 => x as f32 as f64,
        _ => quantize_small(x, fmt),
    }
}

fn quantize_small(x: f64, fmt: FloatFormat) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let sign = if x.is_sign_negative() { -1.0 } else { 1.0 };
    let a = x.abs();
    let max = fmt.max_finite();
    if a.is_infinite() {
        return sign
            * if fmt.has_infinity() {
                f64::INFINITY
            } else {
                max
            };
    }
    if a == 0.0 {
        return x;
    }
    let info = fmt.info();
    let emin = 1 - info.bias;
    let e = exponent_of(a).max(emin);
    // Scaling by a power of two is exact for every magnitude reachable here.
    let ulp = 2f64.powi(e - info.mantissa_bits as i32);
    let q = (a / ulp).round_ties_even() * ulp;
    if q > max {
        return sign
            * if fmt.has_infinity() {
                f64::INFINITY
            } else {
                max
            };
    }
    sign * q
}

/// floor(log2(a)) for finite positive `a`.
fn exponent_of(a: f64) -> i32 {
    let bits = a.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormal: far below every emulated format's range.
        -1075
    } else {
        biased - 1023
    }
}

/// Decode a raw bit pattern of a format narrower than 32 bits.
///
/// Independent of [`quantize`]; used for exhaustive enumeration checks.
pub fn decode_bits(fmt: FloatFormat, bits: u32) -> f64 {
    let info = fmt.info();
    assert!(
        info.bit_width() <= 16,
        "decode_bits supports 8- and 16-bit formats"
    );
    let m_bits = info.mantissa_bits;
    let e_bits = info.exponent_bits;
    let sign = if (bits >> (e_bits + m_bits)) & 1 == 1 {
        -1.0
    } else {
        1.0
    };
    let exp = ((bits >> m_bits) & ((1 << e_bits) - 1)) as i32;
    let man = (bits & ((1 << m_bits) - 1)) as f64;
    let exp_all_ones = (1 << e_bits) - 1;
    let scale = (1u64 << m_bits) as f64;
    if fmt == FloatFormat::Fp8E4M3 {
        if exp == exp_all_ones && man as u32 == (1 << m_bits) - 1 {
            return f64::NAN;
        }
    } else if exp == exp_all_ones {
        return if man == 0.0 {
            sign * f64::INFINITY
        } else {
            f64::NAN
        };
    }
    if exp == 0 {
        sign * (man / scale) * 2f64.powi(1 - info.bias)
    } else {
        sign * (1.0 + man / scale) * 2f64.powi(exp - info.bias)
    }
}

/// Every finite value of an 8- or 16-bit format, ascending, with a single zero.
pub fn enumerate_finite(fmt: FloatFormat) -> Vec<f64> {
    let n = 1u32 << fmt.bit_width();
    let mut v: Vec<f64> = (0..n)
        .map(|b| decode_bits(fmt, b))
        .filter(|x| x.is_finite())
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v
}

fn widening_supported(input: FloatFormat, acc: FloatFormat) -> bool {
    use FloatFormat::*;
    matches!(
        (input, acc),
        (Fp64, Fp64)
            | (Fp32, Fp32)
            | (Fp32, Fp64)
            | (Fp16 | Bf16, Fp32)
            | (Fp8E4M3 | Fp8E5M2, Fp16 | Fp32)
    )
}

/// Dot product with exact products and per-addition rounding to `acc_fmt`.
pub fn widening_dot(
    a: &[f64],
    b: &[f64],
    in_fmt: FloatFormat,
    acc_fmt: FloatFormat,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "dot lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if !widening_supported(in_fmt, acc_fmt) {
        return Err(Error::UnsupportedWidening {
            input: in_fmt,
            acc: acc_fmt,
        });
    }
    Ok(widening_dot_unchecked(a, b, acc_fmt))
}

#[inline]
pub(crate) fn widening_dot_unchecked(a: &[f64], b: &[f64], acc_fmt: FloatFormat) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| quantize(acc + x * y, acc_fmt))
}

pub(crate) fn check_widening(in_fmt: FloatFormat, acc_fmt: FloatFormat) -> Result<()> {
    if widening_supported(in_fmt, acc_fmt) || in_fmt == acc_fmt {
        Ok(())
    } else {
        Err(Error::UnsupportedWidening {
            input: in_fmt,
            acc: acc_fmt,
        })
    }
}
