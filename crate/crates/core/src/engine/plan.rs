//! Export of a trained network to an integer inference plan, and the
//! calibration sidecar that goes with a packed weight stream.
//!
//! Between layers values travel as wide integers (`i64`) with one
//! fractional-bit count per channel. They are requantized to 8 bits only
//! where a conv/dense layer or a skip connection reads them ("points",
//! identified by the index of the layer they enter).
//!
//! Sidecar layout (all integers little endian):
//!
//! ```text
//! 0       4       magic "P2QC"
//! 4       4       version (1), u32
//!         4       point count P, u32
//!         5·P     per point: activation index u32, frac bits i8
//!         4       layer count L, u32
//!                 per layer: tag u8, then
//!                   0 (none)        -
//!                   1 (bias)        n u32, n × f32
//!                   2 (folded BN)   n u32, n × i8 sign, n × i8 exponent, n × f32 bias
//!                   3 (leaky)       u8 shift (255: zero slope)
//!         4       projection count S, u32
//!                 per projection: n u32, n × f32 bias
//! ```

use rayon::prelude::*;

use super::fixed::{quantize_value, requantize_value, FixedPointTensor, MAX_FRAC_BITS};
use super::shift::{decompose_filters, shift_conv2d, ShiftFilterBank};
use crate::error::{Error, Result};
use crate::nn::layers::{ConvGeom, BN_EPS};
use crate::nn::{Buffers, LayerSpec, Network, NetworkConfig, Params, Role};
use crate::quant::{log2_round, QuantizedModel};
use crate::tensor::Tensor;

pub const SIDECAR_MAGIC: &[u8; 4] = b"P2QC";
pub const SIDECAR_VERSION: u32 = 1;
/// Share of calibration activations that must fit without saturation.
pub const CALIBRATION_QUANTILE: f64 = 0.999;
const ZERO_SLOPE: u8 = u8::MAX;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    /// Conv or dense bias.
    Bias(Vec<f32>),
    /// Batch norm folded to `sign · 2^exp · x + bias` per channel (`sign` 0: constant `bias`).
    BnFold { sign: Vec<i8>, exp: Vec<i8>, bias: Vec<f32> },
    /// Leaky ReLU with negative slope `2^-shift` (`None`: slope 0).
    Leaky(Option<u8>),
}

/// Everything the integer engine needs besides the packed weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// `(activation index, frac bits)`, ascending by index.
    pub points: Vec<(u32, i8)>,
    pub layers: Vec<LayerParams>,
    pub projection_bias: Vec<Vec<f32>>,
}

impl Calibration {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = SIDECAR_MAGIC.to_vec();
        out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        for &(idx, f) in &self.points {
            out.extend_from_slice(&idx.to_le_bytes());
            out.push(f as u8);
        }
        let floats = |out: &mut Vec<u8>, v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            match layer {
                LayerParams::None => out.push(0),
                LayerParams::Bias(b) => {
                    out.push(1);
                    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
                    floats(&mut out, b);
                }
                LayerParams::BnFold { sign, exp, bias } => {
                    out.push(2);
                    out.extend_from_slice(&(bias.len() as u32).to_le_bytes());
                    out.extend(sign.iter().map(|&s| s as u8));
                    out.extend(exp.iter().map(|&e| e as u8));
                    floats(&mut out, bias);
                }
                LayerParams::Leaky(shift) => {
                    out.push(3);
                    out.push(shift.unwrap_or(ZERO_SLOPE));
                }
            }
        }
        out.extend_from_slice(&(self.projection_bias.len() as u32).to_le_bytes());
        for b in &self.projection_bias {
            out.extend_from_slice(&(b.len() as u32).to_le_bytes());
            floats(&mut out, b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != SIDECAR_MAGIC {
            return Err(Error::Encoding("calibration sidecar: bad magic".into()));
        }
        let version = r.u32()?;
        if version != SIDECAR_VERSION {
            return Err(Error::Version { found: version, expected: SIDECAR_VERSION });
        }
        let points = (0..r.u32()?).map(|_| Ok((r.u32()?, r.u8()? as i8))).collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::new();
        for _ in 0..r.u32()? {
            layers.push(match r.u8()? {
                0 => LayerParams::None,
                1 => {
                    let n = r.u32()? as usize;
                    LayerParams::Bias(r.f32s(n)?)
                }
                2 => {
                    let n = r.u32()? as usize;
                    let sign = r.take(n)?.iter().map(|&b| b as i8).collect();
                    let exp = r.take(n)?.iter().map(|&b| b as i8).collect();
                    LayerParams::BnFold { sign, exp, bias: r.f32s(n)? }
                }
                3 => LayerParams::Leaky(Some(r.u8()?).filter(|&s| s != ZERO_SLOPE)),
                tag => return Err(Error::Encoding(format!("calibration sidecar: unknown layer tag {tag} at byte {}", r.pos - 1))),
            });
        }
        let projection_bias = (0..r.u32()?)
            .map(|_| {
                let n = r.u32()? as usize;
                r.f32s(n)
            })
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Encoding(format!("calibration sidecar: {} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Calibration { points, layers, projection_bias })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Encoding(format!("calibration sidecar truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n.checked_mul(4).ok_or_else(|| Error::Encoding("length overflow".into()))?)?
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Activation between layers.
#[derive(Debug, Clone)]
enum Act {
    Float(Vec<f64>),
    Fixed(FixedPointTensor),
    /// `data[i] · 2^-fracs[i / plane]`.
    Wide { data: Vec<i64>, fracs: Vec<i32>, plane: usize },
}

impl Act {
    fn values(&self) -> Vec<f64> {
        match self {
            Act::Float(v) => v.clone(),
            Act::Fixed(t) => t.to_f64(),
            Act::Wide { data, fracs, plane } => {
                data.iter().enumerate().map(|(i, &v)| v as f64 * (-fracs[i / plane] as f64).exp2()).collect()
            }
        }
    }

    fn to_fixed(&self, shape: &[usize], f: i32) -> FixedPointTensor {
        let data = match self {
            Act::Float(v) => v.iter().map(|&x| quantize_value(x, f)).collect(),
            Act::Fixed(t) => t.data.iter().map(|&v| requantize_value(v as i64, t.frac_bits, f)).collect(),
            Act::Wide { data, fracs, plane } => {
                data.iter().enumerate().map(|(i, &v)| requantize_value(v, fracs[i / plane], f)).collect()
            }
        };
        FixedPointTensor { shape: shape.to_vec(), data, frac_bits: f }
    }

    fn into_wide(self, plane: usize) -> (Vec<i64>, Vec<i32>, usize) {
        match self {
            Act::Wide { data, fracs, plane } => (data, fracs, plane),
            Act::Fixed(t) => {
                let channels = t.data.len() / plane;
                (t.data.iter().map(|&v| v as i64).collect(), vec![t.frac_bits; channels], plane)
            }
            Act::Float(_) => unreachable!("float activations only enter requantization points"),
        }
    }
}

/// `round_half_even(x · 2^frac)`.
fn fixed_const(x: f32, frac: i32) -> i64 {
    (x as f64 * (frac as f64).exp2()).round_ties_even() as i64
}

#[derive(Debug, Clone)]
enum Step {
    Weighted { geom: ConvGeom, banks: ShiftFilterBank, bias: Vec<f32> },
    Bn { sign: Vec<i8>, exp: Vec<i8>, bias: Vec<f32> },
    Leaky(Option<u8>),
    Pool(usize),
    Flatten,
}

#[derive(Debug, Clone)]
struct ProjectionStep {
    geom: ConvGeom,
    banks: ShiftFilterBank,
    bias: Vec<f32>,
}

/// Immutable integer inference plan.
#[derive(Debug, Clone)]
pub struct EnginePlan {
    net: Network,
    steps: Vec<Step>,
    projections: Vec<Option<ProjectionStep>>,
    /// Frac bits per activation index that is a requantization point.
    frac: Vec<Option<i32>>,
    calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Activation indices that must be requantized to 8 bits.
pub fn requantization_points(net: &Network) -> Vec<usize> {
    let mut pts: Vec<usize> = net
        .config()
        .layers
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. }))
        .map(|(l, _)| l)
        .chain(net.config().skips.iter().map(|s| s.from))
        .chain(std::iter::once(0))
        .collect();
    pts.sort_unstable();
    pts.dedup();
    pts
}

fn dense_geom(in_features: usize, out_features: usize) -> ConvGeom {
    ConvGeom { in_c: in_features, in_h: 1, in_w: 1, out_c: out_features, kernel: 1, stride: 1, padding: 0 }
}

/// Power-of-two shift for a Leaky ReLU slope (`None` for slope 0).
pub fn leaky_shift(slope: f64) -> Result<Option<u8>> {
    if slope == 0.0 {
        return Ok(None);
    }
    if !(slope > 0.0 && slope <= 1.0) {
        return Err(Error::Config(format!("leaky slope {slope} cannot be a right shift")));
    }
    Ok(Some((-log2_round(slope)).min(62) as u8))
}

/// Folds eval-mode batch norm into `sign · 2^exp · x + bias` per channel.
/// The scale is rounded to a power of two and the bias keeps the
/// running mean mapped to `β`.
pub fn fold_batchnorm(gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32]) -> (Vec<i8>, Vec<i8>, Vec<f32>) {
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..gamma.len() {
        let s = gamma[c] as f64 / (var[c] as f64 + BN_EPS).sqrt();
        let (sign, exp) = if s == 0.0 { (0i8, 0i8) } else { (s.signum() as i8, log2_round(s.abs()).clamp(-100, 100) as i8) };
        let scale = sign as f64 * (exp as f64).exp2();
        out.0.push(sign);
        out.1.push(exp);
        out.2.push((beta[c] as f64 - scale * mean[c] as f64) as f32);
    }
    out
}

impl EnginePlan {
    /// Builds a plan from a network description, its packed weights and a sidecar.
    pub fn new(config: NetworkConfig, model: &QuantizedModel, calibration: Calibration) -> Result<Self> {
        let net = Network::new(config)?;
        let layers = &net.config().layers;
        if calibration.layers.len() != layers.len() {
            return Err(Error::Config(format!("sidecar describes {} layers, network has {}", calibration.layers.len(), layers.len())));
        }
        let weight_slots = net.slots().iter().filter(|s| s.role == Role::Weight).count();
        if model.layers.len() != weight_slots {
            return Err(Error::Config(format!("{} quantized layers for {weight_slots} weight tensors", model.layers.len())));
        }
        let mut qlayers = model.layers.iter();
        let mut steps = Vec::with_capacity(layers.len());
        for (l, (spec, lp)) in layers.iter().zip(&calibration.layers).enumerate() {
            let bad = || Error::Config(format!("sidecar entry for layer {l} ({}) has the wrong kind or size", spec.name()));
            let step = match (spec, lp) {
                (LayerSpec::Conv2d { out_channels, .. }, LayerParams::Bias(b)) if b.len() == *out_channels => {
                    let geom = net.conv_geom(l).unwrap();
                    Step::Weighted { geom, banks: Self::banks(qlayers.next().unwrap(), &geom, l)?, bias: b.clone() }
                }
                (LayerSpec::Dense { in_features, out_features }, LayerParams::Bias(b)) if b.len() == *out_features => {
                    let geom = dense_geom(*in_features, *out_features);
                    Step::Weighted { geom, banks: Self::banks(qlayers.next().unwrap(), &geom, l)?, bias: b.clone() }
                }
                (LayerSpec::Batchnorm { channels }, LayerParams::BnFold { sign, exp, bias })
                    if sign.len() == *channels && exp.len() == *channels && bias.len() == *channels =>
                {
                    Step::Bn { sign: sign.clone(), exp: exp.clone(), bias: bias.clone() }
                }
                (LayerSpec::LeakyRelu { .. }, LayerParams::Leaky(s)) => Step::Leaky(*s),
                (LayerSpec::Maxpool { size }, LayerParams::None) => Step::Pool(*size),
                (LayerSpec::Flatten, LayerParams::None) => Step::Flatten,
                _ => return Err(bad()),
            };
            steps.push(step);
        }
        let plans = net.skip_plans();
        if calibration.projection_bias.len() != plans.iter().filter(|p| p.2.is_some()).count() {
            return Err(Error::Config("sidecar projection count does not match the network".into()));
        }
        let mut proj_bias = calibration.projection_bias.iter();
        let mut projections = Vec::new();
        for (s, (_, _, proj)) in plans.iter().enumerate() {
            projections.push(match proj {
                None => None,
                Some((geom, _)) => {
                    let bias = proj_bias.next().unwrap().clone();
                    if bias.len() != geom.out_c {
                        return Err(Error::Config(format!("projection {s}: {} biases for {} channels", bias.len(), geom.out_c)));
                    }
                    Some(ProjectionStep { geom: *geom, banks: Self::banks(qlayers.next().unwrap(), geom, s)?, bias })
                }
            });
        }
        let mut frac = vec![None; layers.len() + 1];
        for &(idx, f) in &calibration.points {
            let f = f as i32;
            if idx as usize > layers.len() || !(0..=MAX_FRAC_BITS).contains(&f) {
                return Err(Error::Config(format!("invalid calibration point ({idx}, {f})")));
            }
            frac[idx as usize] = Some(f);
        }
        if let Some(p) = requantization_points(&net).into_iter().find(|&p| frac[p].is_none()) {
            return Err(Error::Config(format!("missing calibration for the activation entering layer {p}")));
        }
        Ok(EnginePlan { net, steps, projections, frac, calibration })
    }

    fn banks(layer: &crate::quant::QuantizedLayer, geom: &ConvGeom, at: usize) -> Result<ShiftFilterBank> {
        if layer.filter_len() != geom.filter_len() || layer.filters.len() != geom.out_c {
            return Err(Error::Config(format!("quantized weights do not match geometry {geom:?} (entry {at})")));
        }
        let banks = decompose_filters(layer);
        banks.check_accumulator()?;
        Ok(banks)
    }

    /// Folds BN, quantizes slopes and calibrates activation scales on
    /// `calib` (a batch `[N, c, h, w]`), one point at a time in layer order.
    pub fn export(
        net: &Network,
        params: &Params<f32>,
        buffers: &Buffers<f32>,
        model: &QuantizedModel,
        calib: &Tensor<f32>,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut bn = 0;
        for (l, spec) in net.config().layers.iter().enumerate() {
            let p = |i: usize| params.tensors[net.layer_slot(l).unwrap() + i].data();
            layers.push(match spec {
                LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => LayerParams::Bias(p(1).to_vec()),
                LayerSpec::Batchnorm { .. } => {
                    let (sign, exp, bias) =
                        fold_batchnorm(p(0), p(1), buffers.running_mean[bn].data(), buffers.running_var[bn].data());
                    bn += 1;
                    LayerParams::BnFold { sign, exp, bias }
                }
                LayerSpec::LeakyRelu { slope } => LayerParams::Leaky(leaky_shift(*slope)?),
                LayerSpec::Maxpool { .. } | LayerSpec::Flatten => LayerParams::None,
            });
        }
        let projection_bias =
            net.skip_plans().iter().filter_map(|(_, _, p)| p.map(|(_, w)| params.tensors[w + 1].data().to_vec())).collect();
        // Provisional fracs so the plan validates; calibrated below.
        let points = requantization_points(net).into_iter().map(|p| (p as u32, 0i8)).collect();
        let mut plan = EnginePlan::new(net.config().clone(), model, Calibration { points, layers, projection_bias })?;
        plan.calibrate(calib)?;
        Ok(plan)
    }

    fn calibrate(&mut self, calib: &Tensor<f32>) -> Result<()> {
        let images = self.split_images(calib)?;
        let mut acts: Vec<Act> = images.into_iter().map(Act::Float).collect();
        let mut sources: Vec<Vec<Option<FixedPointTensor>>> = vec![vec![None; self.steps.len() + 1]; acts.len()];
        for l in 0..self.steps.len() {
            if self.frac[l].is_some() {
                let mut mags: Vec<f64> = acts.iter().flat_map(|a| a.values()).map(f64::abs).collect();
                let f = calibrated_frac(&mut mags);
                self.frac[l] = Some(f);
                let shape = self.net.shape(l).to_vec();
                for (a, src) in acts.iter_mut().zip(&mut sources) {
                    let fixed = a.to_fixed(&shape, f);
                    src[l] = Some(fixed.clone());
                    *a = Act::Fixed(fixed);
                }
            }
            acts = acts
                .into_iter()
                .zip(&sources)
                .map(|(a, src)| self.step(l, a, src))
                .collect::<Result<_>>()?;
        }
        self.calibration.points = self.frac.iter().enumerate().filter_map(|(i, f)| f.map(|f| (i as u32, f as i8))).collect();
        Ok(())
    }

    fn split_images(&self, batch: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let shape = self.net.shape(0);
        if batch.shape().len() != 4 || batch.shape()[1..] != shape[..] || batch.shape()[0] == 0 {
            return Err(Error::Shape(format!("image batch {:?} does not match input [N, {shape:?}]", batch.shape())));
        }
        let len: usize = shape.iter().product();
        Ok(batch.data().chunks(len).map(|c| c.iter().map(|&v| v as f64).collect()).collect())
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calibration
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Runs layer `l` on `input`; `sources[p]` holds the 8-bit activation
    /// at every skip source `p < l` already passed.
    fn step(&self, l: usize, input: Act, sources: &[Option<FixedPointTensor>]) -> Result<Act> {
        let in_shape = self.net.shape(l);
        let plane_in = if in_shape.len() == 3 { in_shape[1] * in_shape[2] } else { 1 };
        let out = match &self.steps[l] {
            Step::Weighted { geom, banks, bias } => {
                let Act::Fixed(mut a) = input else { unreachable!("weighted layers read requantized input") };
                a.shape = vec![geom.in_c, geom.in_h, geom.in_w];
                let acc = shift_conv2d(&a, geom, banks)?;
                Self::with_bias(acc.data, acc.frac_bits, geom, bias)
            }
            Step::Bn { sign, exp, bias } => {
                let (mut data, mut fracs, plane) = input.into_wide(plane_in);
                for c in 0..sign.len() {
                    let vals = &mut data[c * plane..(c + 1) * plane];
                    match sign[c] {
                        0 => vals.iter_mut().for_each(|v| *v = 0),
                        s if s < 0 => vals.iter_mut().for_each(|v| *v = -*v),
                        _ => {}
                    }
                    fracs[c] -= exp[c] as i32;
                    let b = fixed_const(bias[c], fracs[c]);
                    vals.iter_mut().for_each(|v| *v += b);
                }
                Act::Wide { data, fracs, plane }
            }
            Step::Leaky(shift) => {
                let (mut data, mut fracs, plane) = input.into_wide(plane_in);
                match shift {
                    Some(s) => {
                        data.iter_mut().filter(|v| **v > 0).for_each(|v| *v <<= *s);
                        fracs.iter_mut().for_each(|f| *f += *s as i32);
                    }
                    None => data.iter_mut().filter(|v| **v < 0).for_each(|v| *v = 0),
                }
                Act::Wide { data, fracs, plane }
            }
            Step::Pool(size) => {
                let (data, fracs, _) = input.into_wide(plane_in);
                let (h, w) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (h / size, w / size);
                let mut out = Vec::with_capacity(fracs.len() * oh * ow);
                for c in 0..fracs.len() {
                    let src = &data[c * h * w..(c + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = i64::MIN;
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    m = m.max(src[(oy * size + dy) * w + ox * size + dx]);
                                }
                            }
                            out.push(m);
                        }
                    }
                }
                Act::Wide { data: out, fracs, plane: oh * ow }
            }
            Step::Flatten => {
                let (data, fracs, plane) = input.into_wide(plane_in);
                let fracs = fracs.iter().flat_map(|&f| std::iter::repeat(f).take(plane)).collect();
                Act::Wide { data, fracs, plane: 1 }
            }
        };
        let mut out = out;
        for (s, (from, to, _)) in self.net.skip_plans().into_iter().enumerate() {
            if to != l {
                continue;
            }
            let src = sources[from].as_ref().ok_or_else(|| Error::Usage(format!("skip source {from} not recorded")))?;
            let add = match &self.projections[s] {
                None => Act::Fixed(src.clone()),
                Some(p) => {
                    let acc = shift_conv2d(src, &p.geom, &p.banks)?;
                    Self::with_bias(acc.data, acc.frac_bits, &p.geom, &p.bias)
                }
            };
            out = Self::add(out, add, plane_of(self.net.shape(l + 1)));
        }
        Ok(out)
    }

    fn with_bias(acc: Vec<i32>, frac: i32, geom: &ConvGeom, bias: &[f32]) -> Act {
        let plane = geom.out_h() * geom.out_w();
        let data = acc.iter().enumerate().map(|(i, &v)| v as i64 + fixed_const(bias[i / plane], frac)).collect();
        Act::Wide { data, fracs: vec![frac; geom.out_c], plane }
    }

    /// Elementwise sum, aligning each channel to the finer of the two scales.
    fn add(a: Act, b: Act, plane: usize) -> Act {
        let (mut da, mut fa, plane) = a.into_wide(plane);
        let (db, fb, _) = b.into_wide(plane);
        for c in 0..fa.len() {
            let f = fa[c].max(fb[c]);
            let (sa, sb) = (f - fa[c], f - fb[c]);
            for i in c * plane..(c + 1) * plane {
                da[i] = (da[i] << sa) + (db[i] << sb);
            }
            fa[c] = f;
        }
        Act::Wide { data: da, fracs: fa, plane }
    }

    /// Integer pass over one image (`[c, h, w]` values).
    fn infer_one(&self, image: Vec<f64>) -> Result<(Vec<f64>, usize)> {
        let mut act = Act::Float(image);
        let mut sources = vec![None; self.steps.len() + 1];
        for l in 0..self.steps.len() {
            if let Some(f) = self.frac[l] {
                let fixed = act.to_fixed(self.net.shape(l), f);
                sources[l] = Some(fixed.clone());
                act = Act::Fixed(fixed);
            }
            act = self.step(l, act, &sources)?;
        }
        let (data, fracs, plane) = act.into_wide(1);
        let top = fracs.iter().copied().max().unwrap_or(0);
        let aligned: Vec<i128> = data.iter().enumerate().map(|(i, &v)| (v as i128) << (top - fracs[i / plane])).collect();
        let mut best = 0;
        for (i, v) in aligned.iter().enumerate() {
            if *v > aligned[best] {
                best = i;
            }
        }
        let scores = data.iter().enumerate().map(|(i, &v)| v as f64 * (-fracs[i / plane] as f64).exp2()).collect();
        Ok((scores, best))
    }

    /// Deterministic integer inference over a batch; images run in parallel.
    pub fn run_inference(&self, images: &Tensor<f32>) -> Result<InferenceOutput> {
        let imgs = self.split_images(images)?;
        let results: Vec<(Vec<f64>, usize)> = imgs.into_par_iter().map(|img| self.infer_one(img)).collect::<Result<_>>()?;
        let (scores, labels) = results.into_iter().unzip();
        Ok(InferenceOutput { scores, labels })
    }
}

fn plane_of(shape: &[usize]) -> usize {
    if shape.len() == 3 {
        shape[1] * shape[2]
    } else {
        1
    }
}

/// Largest `f ≤ 7` such that the calibration quantile of `|x|` fits in
/// 8 bits; 0 when even `f = 0` saturates.
fn calibrated_frac(mags: &mut [f64]) -> i32 {
    if mags.is_empty() {
        return MAX_FRAC_BITS;
    }
    mags.sort_unstable_by(|a, b| a.total_cmp(b));
    let idx = ((CALIBRATION_QUANTILE * mags.len() as f64).ceil() as usize).clamp(1, mags.len()) - 1;
    let q = mags[idx];
    (0..=MAX_FRAC_BITS).rev().find(|&f| q * (f as f64).exp2() <= 127.0).unwrap_or(0)
}
