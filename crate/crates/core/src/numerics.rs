//! Element types and rounding: BF16 emulation, per-tensor INT8 affine
//! quantization, a lookup-table SiLU and a rational tanh.
//!
//! Every reduction in the crate accumulates in `f32`. Only operands (on
//! read) and final stores are rounded to the operand element type.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum ElemType {
    F32,
    Bf16,
    Int8,
}

impl ElemType {
    pub const ALL: [ElemType; 3] = [ElemType::F32, ElemType::Bf16, ElemType::Int8];

    pub fn size_bytes(self) -> u64 {
        match self {
            ElemType::F32 => 4,
            ElemType::Bf16 => 2,
            ElemType::Int8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElemType::F32 => "fp32",
            ElemType::Bf16 => "bf16",
            ElemType::Int8 => "int8",
        }
    }
}

impl fmt::Display for ElemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElemType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" | "f32" => Ok(ElemType::F32),
            "bf16" => Ok(ElemType::Bf16),
            "int8" | "i8" => Ok(ElemType::Int8),
            other => Err(Error::Parse(format!("unknown element type `{other}`"))),
        }
    }
}

/// Round an `f32` to the nearest bfloat16 value (ties to even), returned
/// as an `f32` whose low 16 bits are zero. NaN stays NaN (quieted),
/// infinities pass through.
pub fn to_bf16(x: f32) -> f32 {
    let bits = x.to_bits();
    if x.is_nan() {
        return f32::from_bits((bits | 0x0040_0000) & 0xffff_0000);
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7fff + lsb) & 0xffff_0000;
    f32::from_bits(rounded)
}

/// Per-tensor affine INT8 parameters: `real = scale * (code - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    /// Map `[min, max]` onto codes `[-128, 127]`.
    pub fn from_range(min: f32, max: f32) -> Result<Self> {
        if !(max > min) {
            return Err(Error::DegenerateRange(min));
        }
        let scale = (max - min) / 255.0;
        let zero_point = (-128.0 - min / scale).round() as i32;
        Ok(Self { scale, zero_point })
    }

    /// Range covering every value in `data`, widened to include zero so
    /// that zero padding stays exactly representable.
    pub fn calibrate(data: &[f32]) -> Self {
        let (mut lo, mut hi) = (0.0f32, 0.0f32);
        for &v in data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        Self::from_range(lo, hi).expect("range is non-degenerate")
    }

    pub fn quantize(&self, x: f32) -> i8 {
        let code = (x / self.scale).round() as i64 + self.zero_point as i64;
        code.clamp(-128, 127) as i8
    }

    pub fn dequantize(&self, code: i8) -> f32 {
        self.scale * (code as i32 - self.zero_point) as f32
    }

    pub fn fake_quant(&self, x: f32) -> f32 {
        self.dequantize(self.quantize(x))
    }
}

pub fn quantize_int8(data: &[f32], min: f32, max: f32) -> Result<(Vec<i8>, QuantParams)> {
    let q = QuantParams::from_range(min, max)?;
    Ok((data.iter().map(|&x| q.quantize(x)).collect(), q))
}

pub fn dequantize_int8(codes: &[i8], q: QuantParams) -> Vec<f32> {
    codes.iter().map(|&c| q.dequantize(c)).collect()
}

/// How stored values are rounded for one tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rounding {
    F32,
    Bf16,
    Int8(QuantParams),
}

impl Rounding {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Rounding::F32 => x,
            Rounding::Bf16 => to_bf16(x),
            Rounding::Int8(q) => q.fake_quant(x),
        }
    }

    pub fn apply_slice(self, xs: &mut [f32]) {
        if self == Rounding::F32 {
            return;
        }
        for x in xs {
            *x = self.apply(*x);
        }
    }
}

/// A value tagged with its element type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scalar {
    pub value: f32,
    pub etype: ElemType,
    pub quant: Option<QuantParams>,
}

impl Scalar {
    pub fn fp32(value: f32) -> Self {
        Self { value, etype: ElemType::F32, quant: None }
    }

    pub fn bf16(value: f32) -> Self {
        Self { value: to_bf16(value), etype: ElemType::Bf16, quant: None }
    }

    pub fn int8(value: f32, q: QuantParams) -> Self {
        Self { value: q.fake_quant(value), etype: ElemType::Int8, quant: Some(q) }
    }
}

/// Sigmoid sampled on a uniform grid, linearly interpolated, clamped to
/// 0 below the domain and 1 above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiluLut {
    pub entries: Vec<f32>,
    pub lo: f32,
    pub hi: f32,
}

impl Default for SiluLut {
    fn default() -> Self {
        Self::new(512, 8.0)
    }
}

impl SiluLut {
    /// `size` samples at `-range + i * 2 range / size`; the sample at
    /// `i = size / 2` sits exactly on zero.
    pub fn new(size: usize, range: f32) -> Self {
        assert!(size >= 2 && size % 2 == 0, "LUT size must be even and >= 2");
        let step = 2.0 * range as f64 / size as f64;
        let entries = (0..size)
            .map(|i| {
                let x = -(range as f64) + i as f64 * step;
                (1.0 / (1.0 + (-x).exp())) as f32
            })
            .collect();
        Self { entries, lo: -range, hi: range }
    }

    fn step(&self) -> f32 {
        (self.hi - self.lo) / self.entries.len() as f32
    }

    /// Interpolated sigmoid.
    pub fn sigmoid(&self, x: f32) -> f32 {
        if x.is_nan() {
            return x;
        }
        if x < self.lo {
            return 0.0;
        }
        if x >= self.hi {
            return 1.0;
        }
        let pos = (x - self.lo) / self.step();
        let i = (pos.floor() as usize).min(self.entries.len() - 1);
        let frac = pos - i as f32;
        let a = self.entries[i];
        let b = self.entries.get(i + 1).copied().unwrap_or(1.0);
        a + (b - a) * frac
    }

    pub fn silu(&self, x: f32) -> f32 {
        x * self.sigmoid(x)
    }
}

/// `x * sigmoid(x)` through `lut`.
pub fn silu(x: f32, lut: &SiluLut) -> f32 {
    lut.silu(x)
}

const TANH_SATURATION: f32 = 6.0;

/// [7/6] Pade approximant of tanh, clamped to [-1, 1] and saturated to
/// exactly +/-1 beyond |x| = 6.
pub fn tanh_approx(x: f32) -> f32 {
    if x.is_nan() {
        return x;
    }
    if x > TANH_SATURATION {
        return 1.0;
    }
    if x < -TANH_SATURATION {
        return -1.0;
    }
    let x2 = x * x;
    let num = x * (135135.0 + x2 * (17325.0 + x2 * (378.0 + x2)));
    let den = 135135.0 + x2 * (62370.0 + x2 * (3150.0 + 28.0 * x2));
    (num / den).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Bit-level oracle written independently of `to_bf16`: inspect the
    /// discarded half and decide the rounding direction explicitly.
    fn bf16_oracle(x: f32) -> f32 {
        let bits = x.to_bits();
        let upper = bits >> 16;
        let lower = bits & 0xffff;
        let up = match lower.cmp(&0x8000) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => upper & 1 == 1,
        };
        f32::from_bits((if up { upper + 1 } else { upper }) << 16)
    }

    #[test]
    fn bf16_examples() {
        assert_eq!(to_bf16(1.0), 1.0);
        assert_eq!(to_bf16(0.0).to_bits(), 0.0f32.to_bits());
        assert_eq!(to_bf16(-0.0).to_bits(), (-0.0f32).to_bits());
        let pi = to_bf16(3.141_592_65);
        assert_eq!(pi, bf16_oracle(3.141_592_65));
        assert_eq!(pi, 3.140625);
        assert_eq!(pi.to_bits() & 0xffff, 0);
        assert!(to_bf16(f32::NAN).is_nan());
        assert_eq!(to_bf16(f32::INFINITY), f32::INFINITY);
        assert_eq!(to_bf16(f32::NEG_INFINITY), f32::NEG_INFINITY);
        // ties go to even
        assert_eq!(to_bf16(f32::from_bits(0x3f80_8000)), f32::from_bits(0x3f80_0000));
        assert_eq!(to_bf16(f32::from_bits(0x3f81_8000)), f32::from_bits(0x3f82_0000));
    }

    #[test]
    fn bf16_matches_half_crate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let x = f32::from_bits(rng.gen::<u32>());
            if !x.is_finite() {
                continue;
            }
            assert_eq!(to_bf16(x).to_bits(), half::bf16::from_f32(x).to_f32().to_bits(), "{x:e}");
            assert_eq!(to_bf16(x).to_bits(), bf16_oracle(x).to_bits());
        }
    }

    #[test]
    fn silu_examples() {
        let lut = SiluLut::default();
        assert_eq!(lut.entries.len(), 512);
        assert_eq!(lut.entries[256], 0.5);
        assert_eq!(silu(0.0, &lut), 0.0);
        assert_eq!(silu(20.0, &lut), 20.0);
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu(1.0, &lut) as f64 - expect).abs() <= 2e-3);
        assert!(lut.entries.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn silu_error_bound_on_dense_grid() {
        let lut = SiluLut::default();
        for i in 0..=10_000 {
            let x = -8.0 + 16.0 * i as f64 / 10_000.0;
            let exact = x / (1.0 + (-x).exp());
            let got = silu(x as f32, &lut) as f64;
            assert!((got - exact).abs() <= 2e-3 * x.abs().max(1.0), "x={x} got={got} exact={exact}");
        }
    }

    #[test]
    fn tanh_examples_and_bound() {
        assert_eq!(tanh_approx(0.0), 0.0);
        assert_eq!(tanh_approx(10.0), 1.0);
        assert_eq!(tanh_approx(-10.0), -1.0);
        assert!((tanh_approx(0.5) as f64 - 0.5f64.tanh()).abs() <= 1e-3);
        for i in 0..=12_000 {
            let x = -6.0 + i as f64 / 1000.0;
            assert!((tanh_approx(x as f32) as f64 - x.tanh()).abs() <= 1e-3, "x={x}");
        }
    }

    #[test]
    fn int8_examples() {
        let (codes, q) = quantize_int8(&[0.0; 8], -1.0, 1.0).unwrap();
        assert!(codes.iter().all(|&c| c as i32 == q.zero_point));
        assert!(dequantize_int8(&codes, q).iter().all(|&v| v == 0.0));

        let (codes, _) = quantize_int8(&[-3.0, 5.0], -3.0, 5.0).unwrap();
        assert_eq!(codes, vec![-128, 127]);

        assert!(matches!(quantize_int8(&[1.0], 2.0, 2.0), Err(Error::DegenerateRange(_))));
    }

    #[test]
    fn int8_round_trip_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-2.5f32..4.0)).collect();
        let (codes, q) = quantize_int8(&data, -2.5, 4.0).unwrap();
        let back = dequantize_int8(&codes, q);
        for (x, y) in data.iter().zip(&back) {
            // direct check against the affine formula
            let code = ((x / q.scale).round() as i32 + q.zero_point).clamp(-128, 127);
            assert_eq!(*y, q.scale * (code - q.zero_point) as f32);
            assert!((x - y).abs() <= q.scale / 2.0 + 1e-6, "{x} -> {y}");
        }
    }

    #[test]
    fn scalar_constructors_round() {
        assert_eq!(Scalar::bf16(3.141_592_65).value.to_bits() & 0xffff, 0);
        let q = QuantParams::from_range(-1.0, 1.0).unwrap();
        assert_eq!(Scalar::int8(0.3, q).quant, Some(q));
        assert_eq!(Scalar::fp32(0.1).value, 0.1);
    }

    proptest::proptest! {
        #[test]
        fn bf16_idempotent_and_monotone(a in proptest::num::f32::NORMAL, b in proptest::num::f32::NORMAL) {
            let ra = to_bf16(a);
            proptest::prop_assert_eq!(to_bf16(ra).to_bits(), ra.to_bits());
            if a <= b {
                proptest::prop_assert!(to_bf16(a) <= to_bf16(b));
            }
        }
    }
}
