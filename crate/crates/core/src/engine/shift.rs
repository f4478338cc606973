//! Multiplier-free convolution.
//!
//! A filter with `k_i` terms is split into `k_i` single-term banks whose
//! outputs add up to the filter's output. Each bank weight is a sign and a
//! left-shift amount `exponent + e_offset` (`e_offset = −e_min`, so the
//! smallest exponent shifts by 0). The inner loop only loads, shifts,
//! negates and adds; the only multiplications are address computations
//! hoisted out of it.

use super::fixed::{Accumulator, FixedPointTensor, ACT_MIN};
use crate::error::{Error, Result};
use crate::nn::layers::ConvGeom;
use crate::quant::QuantizedLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftWeight {
    pub negative: bool,
    pub shift: u8,
    pub zero: bool,
}

/// One single-term slice of a source filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bank {
    pub source: usize,
    pub term: usize,
    pub weights: Vec<ShiftWeight>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftFilterBank {
    pub banks: Vec<Bank>,
    pub filter_count: usize,
    pub filter_len: usize,
    pub e_offset: i32,
    /// Largest number of banks any source filter owns.
    pub max_terms: usize,
}

impl ShiftFilterBank {
    pub fn banks_of(&self, source: usize) -> impl Iterator<Item = &Bank> {
        self.banks.iter().filter(move |b| b.source == source)
    }

    /// Largest possible accumulator magnitude for 8-bit inputs.
    pub fn accumulator_bound(&self) -> u64 {
        let max_shift = self.banks.iter().flat_map(|b| &b.weights).filter(|w| !w.zero).map(|w| w.shift).max().unwrap_or(0);
        let base = (self.filter_len * self.max_terms) as u64 * ((-ACT_MIN) as u64);
        1u64.checked_shl(max_shift as u32).and_then(|m| base.checked_mul(m)).unwrap_or(u64::MAX)
    }

    /// Rejects banks whose worst-case sum does not fit an `i32`.
    pub fn check_accumulator(&self) -> Result<()> {
        let bound = self.accumulator_bound();
        if bound > i32::MAX as u64 {
            return Err(Error::Config(format!("worst-case accumulator {bound} overflows 32 bits")));
        }
        Ok(())
    }
}

/// Splits every filter of `layer` into one bank per stored term.
pub fn decompose_filters(layer: &QuantizedLayer) -> ShiftFilterBank {
    let e_offset = -layer.range.e_min;
    let mut banks = Vec::new();
    for (source, f) in layer.filters.iter().enumerate() {
        for (term, codes) in f.terms.iter().enumerate() {
            let weights = codes
                .iter()
                .map(|c| ShiftWeight {
                    negative: c.sign() < 0,
                    shift: if c.is_zero() { 0 } else { (c.exponent() + e_offset) as u8 },
                    zero: c.is_zero(),
                })
                .collect();
            banks.push(Bank { source, term, weights });
        }
    }
    ShiftFilterBank {
        banks,
        filter_count: layer.filters.len(),
        filter_len: layer.filter_len(),
        e_offset,
        max_terms: layer.filters.iter().map(|f| f.k()).max().unwrap_or(0),
    }
}

/// Input widened to `i32` and zero padded.
struct Padded {
    data: Vec<i32>,
    h: usize,
    w: usize,
}

fn pad(a: &FixedPointTensor, g: &ConvGeom) -> Padded {
    let (h, w) = (g.in_h + 2 * g.padding, g.in_w + 2 * g.padding);
    let mut data = vec![0i32; g.in_c * h * w];
    for c in 0..g.in_c {
        for y in 0..g.in_h {
            let src = &a.data[(c * g.in_h + y) * g.in_w..][..g.in_w];
            let dst = &mut data[(c * h + y + g.padding) * w + g.padding..][..g.in_w];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s as i32);
        }
    }
    Padded { data, h, w }
}

/// Adds one bank's output plane into `out` (`out_h · out_w` values).
fn bank_conv(p: &Padded, g: &ConvGeom, bank: &Bank, out: &mut [i32]) {
    let k = g.kernel;
    let taps: Vec<(usize, u32, bool)> = bank
        .weights
        .iter()
        .enumerate()
        .filter(|(_, w)| !w.zero)
        .map(|(i, w)| {
            let (c, ky, kx) = (i / (k * k), (i / k) % k, i % k);
            ((c * p.h + ky) * p.w + kx, w.shift as u32, w.negative)
        })
        .collect();
    let (oh, ow) = (g.out_h(), g.out_w());
    for oy in 0..oh {
        for ox in 0..ow {
            let base = oy * g.stride * p.w + ox * g.stride;
            let mut acc = 0i32;
            for &(off, shift, negative) in &taps {
                let v = p.data[base + off] << shift;
                if negative {
                    acc -= v;
                } else {
                    acc += v;
                }
            }
            out[oy * ow + ox] += acc;
        }
    }
}

fn check(a: &FixedPointTensor, g: &ConvGeom, banks: &ShiftFilterBank) -> Result<()> {
    if a.shape != [g.in_c, g.in_h, g.in_w] || banks.filter_len != g.filter_len() || banks.filter_count != g.out_c {
        return Err(Error::Shape(format!(
            "input {:?} and {} filters of {} weights do not fit geometry {g:?}",
            a.shape, banks.filter_count, banks.filter_len
        )));
    }
    Ok(())
}

/// Integer convolution of one image `[c, h, w]`; the result has
/// `frac_bits = a.frac_bits + e_offset`. Pruned filters yield zero planes.
pub fn shift_conv2d(a: &FixedPointTensor, g: &ConvGeom, banks: &ShiftFilterBank) -> Result<Accumulator> {
    check(a, g, banks)?;
    let p = pad(a, g);
    let plane = g.out_h() * g.out_w();
    let mut data = vec![0i32; g.out_c * plane];
    for bank in &banks.banks {
        bank_conv(&p, g, bank, &mut data[bank.source * plane..(bank.source + 1) * plane]);
    }
    Ok(Accumulator { shape: vec![g.out_c, g.out_h(), g.out_w()], data, frac_bits: a.frac_bits + banks.e_offset })
}

/// Output plane of every bank separately, in bank order.
pub fn shift_conv2d_per_bank(a: &FixedPointTensor, g: &ConvGeom, banks: &ShiftFilterBank) -> Result<Vec<Vec<i32>>> {
    check(a, g, banks)?;
    let p = pad(a, g);
    let plane = g.out_h() * g.out_w();
    Ok(banks
        .banks
        .iter()
        .map(|b| {
            let mut out = vec![0i32; plane];
            bank_conv(&p, g, b, &mut out);
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{ExponentRange, PowerOfTwoCode, QuantizedFilter};

    fn single(filters: Vec<QuantizedFilter>, len: usize, e_max: i32) -> QuantizedLayer {
        QuantizedLayer { filter_shape: vec![len, 1, 1], range: ExponentRange::new(e_max, 4).unwrap(), filters }
    }

    fn geom(c: usize, out: usize) -> ConvGeom {
        ConvGeom { in_c: c, in_h: 1, in_w: 1, out_c: out, kernel: 1, stride: 1, padding: 0 }
    }

    #[test]
    fn half_weight_on_unit_input() {
        let layer = single(vec![QuantizedFilter { terms: vec![vec![PowerOfTwoCode::new(1, -1)]], len: 1 }], 1, 0);
        let banks = decompose_filters(&layer);
        let a = FixedPointTensor::new(&[1, 1, 1], vec![64], 6).unwrap();
        let acc = shift_conv2d(&a, &geom(1, 1), &banks).unwrap();
        assert_eq!(acc.to_f64(), vec![0.5]);
    }

    #[test]
    fn pruned_and_zero_filters() {
        let layer = single(vec![QuantizedFilter::empty(2), QuantizedFilter { terms: vec![vec![PowerOfTwoCode::ZERO; 2]], len: 2 }], 2, 0);
        let banks = decompose_filters(&layer);
        assert_eq!(banks.banks.len(), 1);
        let a = FixedPointTensor::new(&[2, 1, 1], vec![100, -7], 3).unwrap();
        assert_eq!(shift_conv2d(&a, &geom(2, 2), &banks).unwrap().data, vec![0, 0]);
    }

    #[test]
    fn two_term_filter_splits_into_two_banks() {
        let terms = vec![vec![PowerOfTwoCode::new(1, 0)], vec![PowerOfTwoCode::new(-1, -2)]];
        let layer = single(vec![QuantizedFilter { terms, len: 1 }], 1, 0);
        let banks = decompose_filters(&layer);
        assert_eq!(banks.banks.len(), 2);
        let a = FixedPointTensor::new(&[1, 1, 1], vec![40], 5).unwrap();
        let whole = shift_conv2d(&a, &geom(1, 1), &banks).unwrap();
        let parts = shift_conv2d_per_bank(&a, &geom(1, 1), &banks).unwrap();
        assert_eq!(whole.data[0], parts[0][0] + parts[1][0]);
        assert_eq!(whole.to_f64(), vec![40.0 / 32.0 * 0.75]);
    }

    #[test]
    fn overflow_is_detected() {
        let layer = QuantizedLayer {
            filter_shape: vec![4],
            range: ExponentRange::new(0, 8).unwrap(),
            filters: vec![QuantizedFilter { terms: vec![vec![PowerOfTwoCode::new(1, 0); 4]], len: 4 }],
        };
        assert!(decompose_filters(&layer).check_accumulator().is_err());
    }
}
