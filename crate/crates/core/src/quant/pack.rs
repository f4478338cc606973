//! Packed weight stream.
//!
//! ```text
//! offset  size          field
//! 0       4             magic "P2QW"
//! 4       1             version (1)
//! 5       4             layer count L, u32 LE
//!         per layer (table, L entries):
//!           4           filter count F, u32 LE
//!           1           filter rank R
//!           4·R         filter dims, u32 LE each
//!           1           e_max, i8
//!           1           code_bits
//!         per layer (body, table order):
//!           ⌈2F/8⌉      k_i, 2 bits per filter, MSB first, zero padded
//!           ⌈B/8⌉       term codes, code_bits each, MSB first: filter-major,
//!                       then term-major, then element-major; zero padded.
//!                       B = Σ_i k_i · filter_len · code_bits
//! ```
//!
//! Everything except the term-code sections counts as header; the code
//! sections are the model's weight storage.

use super::code::{ExponentRange, PowerOfTwoCode};
use super::filter::QuantizedFilter;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"P2QW";
pub const VERSION: u8 = 1;
/// Largest `k_i` the 2-bit field can hold.
pub const MAX_K: usize = 3;

/// All quantized filters of one conv/dense weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedLayer {
    /// Shape of a single filter (the weight shape minus its leading dimension).
    pub filter_shape: Vec<usize>,
    pub range: ExponentRange,
    pub filters: Vec<QuantizedFilter>,
}

impl QuantizedLayer {
    pub fn filter_len(&self) -> usize {
        self.filter_shape.iter().product()
    }

    pub fn code_bits_total(&self) -> u64 {
        self.filters.iter().map(|f| (f.k() * self.filter_len()) as u64).sum::<u64>() * self.range.code_bits as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QuantizedModel {
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    pub fn filter_count(&self) -> usize {
        self.layers.iter().map(|l| l.filters.len()).sum()
    }

    pub fn k_values(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().flat_map(|l| l.filters.iter().map(|f| f.k()))
    }

    pub fn mean_k(&self) -> f64 {
        let n = self.filter_count();
        if n == 0 {
            0.0
        } else {
            self.k_values().sum::<usize>() as f64 / n as f64
        }
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    used: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter { bytes: Vec::new(), used: 8 }
    }

    fn put(&mut self, value: u8, width: u32) {
        for b in (0..width).rev() {
            if self.used == 8 {
                self.bytes.push(0);
                self.used = 0;
            }
            let bit = (value >> b) & 1;
            *self.bytes.last_mut().unwrap() |= bit << (7 - self.used);
            self.used += 1;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn get(&mut self, width: u32) -> u8 {
        let mut v = 0u8;
        for _ in 0..width {
            let byte = self.bytes[self.pos / 8];
            v = (v << 1) | ((byte >> (7 - self.pos % 8)) & 1);
            self.pos += 1;
        }
        v
    }
}

fn k_section_len(filters: usize) -> usize {
    (2 * filters).div_ceil(8)
}

/// Serializes `model`; fails if any code falls outside its layer's range or
/// any `k_i` exceeds [`MAX_K`].
pub fn pack_weights(model: &QuantizedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&u32_field(model.layers.len(), "layer count")?.to_le_bytes());
    for layer in &model.layers {
        out.extend_from_slice(&u32_field(layer.filters.len(), "filter count")?.to_le_bytes());
        if layer.filter_shape.len() > u8::MAX as usize {
            return Err(Error::encoding("filter rank too large"));
        }
        out.push(layer.filter_shape.len() as u8);
        for &d in &layer.filter_shape {
            out.extend_from_slice(&u32_field(d, "filter dim")?.to_le_bytes());
        }
        let e_max = i8::try_from(layer.range.e_max).map_err(|_| Error::encoding(format!("e_max {} does not fit i8", layer.range.e_max)))?;
        if ExponentRange::new(layer.range.e_max, layer.range.code_bits)? != layer.range {
            return Err(Error::encoding("exponent range is not canonical for its code width"));
        }
        out.push(e_max as u8);
        out.push(layer.range.code_bits);
    }
    for layer in &model.layers {
        let mut ks = BitWriter::new();
        for f in &layer.filters {
            if f.k() > MAX_K {
                return Err(Error::encoding(format!("k_i = {} exceeds {MAX_K}", f.k())));
            }
            if f.len != layer.filter_len() || f.terms.iter().any(|t| t.len() != f.len) {
                return Err(Error::encoding("filter length does not match layer filter shape"));
            }
            ks.put(f.k() as u8, 2);
        }
        out.extend(ks.finish());
        let mut codes = BitWriter::new();
        for f in &layer.filters {
            for term in &f.terms {
                for c in term {
                    codes.put(c.to_bits(&layer.range)?, layer.range.code_bits as u32);
                }
            }
        }
        out.extend(codes.finish());
    }
    Ok(out)
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::encoding(format!("{what} {v} does not fit u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::encoding(format!("stream truncated at byte {} (need {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct LayerHeader {
    filters: usize,
    filter_shape: Vec<usize>,
    range: ExponentRange,
}

/// Parses a stream written by [`pack_weights`].
pub fn unpack_weights(bytes: &[u8]) -> Result<QuantizedModel> {
    Ok(parse(bytes)?.0)
}

/// Length of everything in a packed stream except the term-code sections.
pub fn header_len(bytes: &[u8]) -> Result<usize> {
    let (_, code_bytes) = parse(bytes)?;
    Ok(bytes.len() - code_bytes)
}

fn parse(bytes: &[u8]) -> Result<(QuantizedModel, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::encoding("bad magic, not a packed weight stream"));
    }
    let version = cur.u8()?;
    if version != VERSION {
        return Err(Error::Version { found: version as u32, expected: VERSION as u32 });
    }
    let layer_count = cur.u32()? as usize;
    let mut headers = Vec::new();
    for _ in 0..layer_count {
        let filters = cur.u32()? as usize;
        let rank = cur.u8()? as usize;
        let filter_shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let e_max = cur.u8()? as i8 as i32;
        let code_bits = cur.u8()?;
        headers.push(LayerHeader { filters, filter_shape, range: ExponentRange::new(e_max, code_bits)? });
    }
    let mut layers = Vec::with_capacity(layer_count);
    let mut code_bytes = 0;
    for h in headers {
        let ks_bytes = cur.take(k_section_len(h.filters))?;
        let mut kr = BitReader { bytes: ks_bytes, pos: 0 };
        let ks: Vec<usize> = (0..h.filters).map(|_| kr.get(2) as usize).collect();
        let len: usize = h.filter_shape.iter().product();
        let bits: usize = ks.iter().sum::<usize>() * len * h.range.code_bits as usize;
        let section = cur.take(bits.div_ceil(8))?;
        code_bytes += section.len();
        let mut r = BitReader { bytes: section, pos: 0 };
        let mut filters = Vec::with_capacity(h.filters);
        for &k in &ks {
            let mut terms = Vec::with_capacity(k);
            for _ in 0..k {
                let term = (0..len)
                    .map(|_| PowerOfTwoCode::from_bits(r.get(h.range.code_bits as u32), &h.range))
                    .collect::<Result<Vec<_>>>()?;
                terms.push(term);
            }
            filters.push(QuantizedFilter { terms, len });
        }
        layers.push(QuantizedLayer { filter_shape: h.filter_shape, range: h.range, filters });
    }
    if cur.pos != bytes.len() {
        return Err(Error::encoding(format!("{} trailing bytes after last layer", bytes.len() - cur.pos)));
    }
    Ok((QuantizedModel { layers }, code_bytes))
}

/// Weight storage of a packed stream in bits: `8 · (length − header)`.
pub fn packed_storage_bits(bytes: &[u8]) -> Result<u64> {
    Ok(8 * (bytes.len() - header_len(bytes)?) as u64)
}
