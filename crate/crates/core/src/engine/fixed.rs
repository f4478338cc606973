use crate::error::{Error, Result};

pub const ACT_MIN: i32 = -128;
pub const ACT_MAX: i32 = 127;
pub const MAX_FRAC_BITS: i32 = 7;

/// 8-bit signed activations; element value is `data[i] · 2^-frac_bits`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedPointTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub frac_bits: i32,
}

impl FixedPointTensor {
    pub fn new(shape: &[usize], data: Vec<i8>, frac_bits: i32) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(FixedPointTensor { shape: shape.to_vec(), data, frac_bits })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        let s = (-self.frac_bits as f64).exp2();
        self.data.iter().map(|&v| v as f64 * s).collect()
    }
}

/// 32-bit integer sums; element value is `data[i] · 2^-frac_bits`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accumulator {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
    pub frac_bits: i32,
}

impl Accumulator {
    pub fn to_f64(&self) -> Vec<f64> {
        let s = (-self.frac_bits as f64).exp2();
        self.data.iter().map(|&v| v as f64 * s).collect()
    }
}

fn saturate(v: i64) -> i8 {
    v.clamp(ACT_MIN as i64, ACT_MAX as i64) as i8
}

/// `clamp(round_half_even(x · 2^f), −128, 127)`.
pub fn quantize_value(x: f64, f: i32) -> i8 {
    let scaled = (x * (f as f64).exp2()).round_ties_even();
    if scaled.is_nan() {
        0
    } else {
        scaled.clamp(ACT_MIN as f64, ACT_MAX as f64) as i8
    }
}

pub fn quantize_activations(shape: &[usize], x: &[f64], f: i32) -> Result<FixedPointTensor> {
    if !(0..=MAX_FRAC_BITS).contains(&f) {
        return Err(Error::Config(format!("activation frac bits must be in 0..=7, got {f}")));
    }
    FixedPointTensor::new(shape, x.iter().map(|&v| quantize_value(v, f)).collect(), f)
}

/// `v · 2^-s` rounded half to even (`s > 0`), or `v · 2^-s` exactly (`s ≤ 0`).
pub fn shift_round_half_even(v: i64, s: i32) -> i64 {
    if s <= 0 {
        return v << (-s).min(62);
    }
    if s >= 63 {
        return 0;
    }
    let q = v >> s;
    let rem = v - (q << s);
    let half = 1i64 << (s - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Rescales a wide value with `frac_in` fractional bits to 8 bits with `frac_out`.
pub fn requantize_value(v: i64, frac_in: i32, frac_out: i32) -> i8 {
    saturate(shift_round_half_even(v, frac_in - frac_out))
}

/// One arithmetic shift with round-half-to-even, then saturation.
pub fn requantize(acc: &Accumulator, frac_out: i32) -> FixedPointTensor {
    FixedPointTensor {
        shape: acc.shape.clone(),
        data: acc.data.iter().map(|&v| requantize_value(v as i64, acc.frac_bits, frac_out)).collect(),
        frac_bits: frac_out,
    }
}
