//! Uniform affine weight quantization.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `code = clamp(floor(v / scale + 1/2) + zero_point, 0, 2^bits - 1)`,
/// `value = (code - zero_point) * scale`. 32 bits means pass-through.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    /// Empty for pass-through specs.
    pub codes: Vec<u32>,
    pub values: Vec<f64>,
    /// Whether the unclamped code fell inside the representable range;
    /// the straight-through gradient is zero where this is false.
    pub in_range: Vec<bool>,
}

impl QuantSpec {
    pub const PASS_THROUGH_BITS: u32 = 32;

    pub fn new(bits: u32, scale: f64, zero_point: i64) -> Result<Self> {
        if ![3, 4, 8, 16, 32].contains(&bits) {
            return Err(Error::Config(format!("unsupported bit-width {bits}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("quantization scale must be positive, got {scale}")));
        }
        Ok(QuantSpec {
            bits,
            scale,
            zero_point,
        })
    }

    pub fn pass_through() -> Self {
        QuantSpec {
            bits: Self::PASS_THROUGH_BITS,
            scale: 1.0,
            zero_point: 0,
        }
    }

    pub fn is_pass_through(&self) -> bool {
        self.bits >= Self::PASS_THROUGH_BITS
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    fn raw_code(&self, v: f64) -> f64 {
        (v / self.scale + 0.5).floor() + self.zero_point as f64
    }

    pub fn code(&self, v: f64) -> u32 {
        self.raw_code(v).clamp(0.0, self.max_code() as f64) as u32
    }

    pub fn dequantize(&self, code: u32) -> f64 {
        (code as i64 - self.zero_point) as f64 * self.scale
    }
}

pub fn quantize(values: &[f64], spec: &QuantSpec) -> Quantized {
    if spec.is_pass_through() {
        return Quantized {
            codes: Vec::new(),
            values: values.to_vec(),
            in_range: vec![true; values.len()],
        };
    }
    let max = spec.max_code() as f64;
    let mut out = Quantized {
        codes: Vec::with_capacity(values.len()),
        values: Vec::with_capacity(values.len()),
        in_range: Vec::with_capacity(values.len()),
    };
    for &v in values {
        let raw = spec.raw_code(v);
        let code = spec.code(v);
        out.codes.push(code);
        out.values.push(spec.dequantize(code));
        out.in_range.push((0.0..=max).contains(&raw));
    }
    out
}

/// Symmetric per-tensor calibration: `scale = max|v| / (2^(bits-1) - 1)` with the
/// zero point in the middle of the code range.
pub fn calibrate_quantspec(tensor: &Tensor, bits: u32) -> Result<QuantSpec> {
    if bits >= QuantSpec::PASS_THROUGH_BITS {
        return Ok(QuantSpec::pass_through());
    }
    let half = (1i64 << (bits - 1)) - 1;
    let max_abs = tensor.max_abs();
    let scale = if max_abs > 0.0 { max_abs / half as f64 } else { 1.0 };
    QuantSpec::new(bits, scale, half)
}
