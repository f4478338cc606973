//! Power-of-two quantizer: log-domain rounding `R(x)`, the threshold-gated
//! per-filter recursion, and the packed weight encoding.

pub mod code;
pub mod filter;
pub mod pack;

pub use code::{log2_round, pow2, round_pow2, ExponentRange, PowerOfTwoCode, DEFAULT_CODE_BITS};
pub use filter::{
    dequantize, effective_k, fixed_k_quantize, l2_norm, quantize_filter, ungated_residuals, QuantizedFilter,
    ResidualTrace, Thresholds, TraceRound,
};
pub use pack::{header_len, pack_weights, packed_storage_bits, unpack_weights, QuantizedLayer, QuantizedModel, MAX_K};

use crate::error::{Error, Result};
use crate::nn::{Network, Params};
use crate::tensor::{Real, Tensor};

/// Picks the threshold vector for weight layer `layer` out of either one
/// shared vector or one vector per weight layer.
pub fn thresholds_for(thresholds: &[Thresholds], layer: usize) -> &Thresholds {
    if thresholds.len() == 1 {
        &thresholds[0]
    } else {
        &thresholds[layer]
    }
}

/// Quantizes every conv/dense weight tensor of `params`, one filter per
/// output channel (row), with the layer's exponent window derived from its
/// largest weight magnitude.
pub fn quantize_network<T: Real>(
    net: &Network,
    params: &Params<T>,
    thresholds: &[Thresholds],
    k: usize,
    code_bits: u8,
) -> Result<QuantizedModel> {
    let weight_slots: Vec<usize> = net.slots().iter().enumerate().filter(|(_, s)| s.is_filter_weight()).map(|(i, _)| i).collect();
    if thresholds.len() != 1 && thresholds.len() != weight_slots.len() {
        return Err(Error::Config(format!(
            "{} threshold vectors for {} weight layers",
            thresholds.len(),
            weight_slots.len()
        )));
    }
    if k > MAX_K {
        return Err(Error::Config(format!("k = {k} exceeds the supported maximum {MAX_K}")));
    }
    let mut layers = Vec::with_capacity(weight_slots.len());
    for (li, &slot) in weight_slots.iter().enumerate() {
        let t = thresholds_for(thresholds, li);
        if t.len() < k {
            return Err(Error::Config(format!("{} thresholds for k = {k}", t.len())));
        }
        let w = params.tensors[slot].data();
        let spec = &net.slots()[slot];
        let range = ExponentRange::for_weights(w, code_bits)?;
        let filters = w
            .chunks(spec.filter_len())
            .map(|f| quantize_filter(f, t, k, &range).0)
            .collect();
        layers.push(QuantizedLayer { filter_shape: spec.shape[1..].to_vec(), range, filters });
    }
    Ok(QuantizedModel { layers })
}

/// Replaces the weight tensors of `params` by the dequantized `model`.
pub fn apply_quantized<T: Real>(net: &Network, params: &Params<T>, model: &QuantizedModel) -> Result<Params<T>> {
    let mut out = params.clone();
    let weight_slots = net.slots().iter().enumerate().filter(|(_, s)| s.is_filter_weight());
    let mut count = 0;
    for ((slot, spec), layer) in weight_slots.zip(&model.layers) {
        if spec.shape[1..] != layer.filter_shape[..] || spec.filter_count() != layer.filters.len() {
            return Err(Error::Shape(format!("quantized layer does not match weight slot {slot} {:?}", spec.shape)));
        }
        let data: Vec<T> = layer.filters.iter().flat_map(dequantize::<T>).collect();
        out.tensors[slot] = Tensor::from_vec(&spec.shape, data)?;
        count += 1;
    }
    if count != model.layers.len() || count != net.slots().iter().filter(|s| s.is_filter_weight()).count() {
        return Err(Error::Shape("quantized model layer count does not match the network".into()));
    }
    Ok(out)
}
