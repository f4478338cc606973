//! Storage and per-inference operation counts, hardware proxies, and
//! accuracy/cost Pareto fronts.
//!
//! A weight with `k_i` terms costs `k_i` shifts and `k_i − 1` extra adds
//! per output position; every nonzero-term product also costs one
//! accumulation add. Storage counts conv/dense weights only; 1 MB is 10^6
//! bytes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, Owner, Role};
use crate::quant::{pack_weights, packed_storage_bits, QuantizedModel};

pub fn bits_to_mb(bits: u64) -> f64 {
    bits as f64 / 8.0 / 1e6
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// Weight-slot index in the network's parameter layout.
    pub slot: usize,
    pub label: String,
    pub weights: u64,
    /// Output positions each filter is applied at.
    pub positions: u64,
    pub macs: u64,
    pub storage_bits: u64,
    pub shifts: u64,
    pub extra_adds: u64,
    pub accumulate_adds: u64,
    pub multiplies: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub storage_bits: u64,
    pub macs: u64,
    pub shifts: u64,
    pub extra_adds: u64,
    pub accumulate_adds: u64,
    pub multiplies: u64,
    /// Multiplier (DSP) demand: one per multiply.
    pub dsp_proxy: u64,
    /// Shifter (LUT) demand: one per shift.
    pub lut_proxy: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    /// Extra plus accumulation adds.
    pub fn adds(&self) -> u64 {
        self.extra_adds + self.accumulate_adds
    }

    pub fn storage_mb(&self) -> f64 {
        bits_to_mb(self.storage_bits)
    }

    fn total(layers: Vec<LayerCost>) -> Self {
        let sum = |f: fn(&LayerCost) -> u64| layers.iter().map(f).sum::<u64>();
        let multiplies = sum(|l| l.multiplies);
        let shifts = sum(|l| l.shifts);
        CostReport {
            storage_bits: sum(|l| l.storage_bits),
            macs: sum(|l| l.macs),
            shifts,
            extra_adds: sum(|l| l.extra_adds),
            accumulate_adds: sum(|l| l.accumulate_adds),
            multiplies,
            dsp_proxy: multiplies,
            lut_proxy: shifts,
            layers,
        }
    }
}

/// `(slot, label, filter count, filter length, positions)` for every weight tensor.
fn weight_layers(net: &Network) -> Vec<(usize, String, u64, u64, u64)> {
    let plans = net.skip_plans();
    net.slots()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.role == Role::Weight)
        .map(|(i, s)| {
            let (label, positions) = match s.owner {
                Owner::Layer(l) => match net.conv_geom(l) {
                    Some(g) => (format!("conv{l}"), g.out_h() * g.out_w()),
                    None => (format!("dense{l}"), 1),
                },
                Owner::Projection(p) => {
                    let g = plans[p].2.expect("projection slot").0;
                    (format!("proj{p}"), g.out_h() * g.out_w())
                }
            };
            (i, label, s.filter_count() as u64, s.filter_len() as u64, positions as u64)
        })
        .collect()
}

/// Exact weight storage of the packed stream.
pub fn storage_bits(model: &QuantizedModel) -> Result<u64> {
    packed_storage_bits(&pack_weights(model)?)
}

/// Counts for a quantized model on `net`'s input shape.
pub fn op_counts(net: &Network, model: &QuantizedModel) -> Result<CostReport> {
    let layers = weight_layers(net);
    if layers.len() != model.layers.len() {
        return Err(Error::Config(format!("{} quantized layers for {} weight tensors", model.layers.len(), layers.len())));
    }
    let mut out = Vec::with_capacity(layers.len());
    for ((slot, label, filters, len, positions), q) in layers.into_iter().zip(&model.layers) {
        if q.filters.len() as u64 != filters || q.filter_len() as u64 != len {
            return Err(Error::Shape(format!("quantized layer does not match {label}")));
        }
        let mut c = LayerCost {
            slot,
            label,
            weights: filters * len,
            positions,
            macs: filters * len * positions,
            storage_bits: q.code_bits_total(),
            shifts: 0,
            extra_adds: 0,
            accumulate_adds: 0,
            multiplies: 0,
        };
        for f in &q.filters {
            let k = f.k() as u64;
            let per = len * positions;
            c.shifts += per * k;
            c.extra_adds += per * k.saturating_sub(1);
            c.accumulate_adds += per * (k >= 1) as u64;
        }
        out.push(c);
    }
    Ok(CostReport::total(out))
}

/// Full-precision or fixed-point baseline with `bits`-bit weights: one
/// multiply and one accumulation add per MAC.
pub fn baseline_cost(net: &Network, bits: u64) -> CostReport {
    let layers = weight_layers(net)
        .into_iter()
        .map(|(slot, label, filters, len, positions)| {
            let macs = filters * len * positions;
            LayerCost {
                slot,
                label,
                weights: filters * len,
                positions,
                macs,
                storage_bits: filters * len * bits,
                shifts: 0,
                extra_adds: 0,
                accumulate_adds: macs,
                multiplies: macs,
            }
        })
        .collect();
    CostReport::total(layers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub model_id: String,
    pub lambda: Vec<f64>,
    pub seed: u64,
    pub accuracy: f64,
    pub storage_bits: u64,
    pub shifts: u64,
    pub adds: u64,
    pub multiplies: u64,
    pub mean_k: f64,
}

impl ParetoPoint {
    pub fn new(model_id: &str, lambda: &[f64], seed: u64, accuracy: f64, cost: &CostReport, mean_k: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Input(format!("accuracy {accuracy} outside [0, 1]")));
        }
        Ok(ParetoPoint {
            model_id: model_id.to_string(),
            lambda: lambda.to_vec(),
            seed,
            accuracy,
            storage_bits: cost.storage_bits,
            shifts: cost.shifts,
            adds: cost.adds(),
            multiplies: cost.multiplies,
            mean_k,
        })
    }
}

/// Cost coordinate a front is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostAxis {
    Storage,
    Shifts,
}

impl CostAxis {
    pub fn of(&self, p: &ParetoPoint) -> u64 {
        match self {
            CostAxis::Storage => p.storage_bits,
            CostAxis::Shifts => p.shifts,
        }
    }
}

/// Points no other point beats on accuracy (higher) and cost (lower) at
/// once, stably sorted by ascending cost.
pub fn pareto_front(points: &[ParetoPoint], axis: CostAxis) -> Result<Vec<ParetoPoint>> {
    if points.is_empty() {
        return Err(Error::Input("pareto front of zero points".into()));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    // ascending cost, then descending accuracy; stable for exact ties
    order.sort_by(|&a, &b| {
        axis.of(&points[a]).cmp(&axis.of(&points[b])).then(points[b].accuracy.total_cmp(&points[a].accuracy))
    });
    let mut front: Vec<usize> = Vec::new();
    let mut best: Option<(u64, f64)> = None;
    for i in order {
        let (c, a) = (axis.of(&points[i]), points[i].accuracy);
        let dominated = match best {
            Some((bc, ba)) => ba > a || (ba == a && bc < c),
            None => false,
        };
        if !dominated {
            front.push(i);
            if best.map_or(true, |(_, ba)| a > ba) {
                best = Some((c, a));
            }
        }
    }
    Ok(front.into_iter().map(|i| points[i].clone()).collect())
}

pub const PARETO_HEADER: [&str; 10] =
    ["model_id", "lambda0", "lambda1", "seed", "accuracy", "storage_bits", "shifts", "adds", "multiplies", "mean_k"];

pub fn write_pareto_csv<W: Write>(out: W, points: &[ParetoPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(PARETO_HEADER).map_err(csv_err)?;
    for p in points {
        let lam = |j: usize| p.lambda.get(j).copied().unwrap_or(0.0).to_string();
        w.write_record([
            p.model_id.clone(),
            lam(0),
            lam(1),
            p.seed.to_string(),
            p.accuracy.to_string(),
            p.storage_bits.to_string(),
            p.shifts.to_string(),
            p.adds.to_string(),
            p.multiplies.to_string(),
            p.mean_k.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
