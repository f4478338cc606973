use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::reg::{reg_grad, reg_loss, RegCoefficients};
use super::threshold::{threshold_grad, ThresholdGradOptions, ThresholdSum, Trajectory};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{adam_step, cross_entropy, AdamState, Buffers, Mode, Network, Params};
use crate::quant::{
    dequantize, fixed_k_quantize, quantize_filter, quantize_network, thresholds_for, ExponentRange, QuantizedModel,
    Thresholds, DEFAULT_CODE_BITS, MAX_K,
};
use crate::tensor::{argmax, Real, Tensor};

/// How weights are quantized in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Threshold-gated per-filter term count (learned `k_i ≤ k`).
    Flexible,
    /// Every filter uses exactly `k` terms (unconditional recursion).
    Fixed,
    /// No weight quantization.
    FullPrecision,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Flexible => "flexible",
            Scheme::Fixed => "fixed",
            Scheme::FullPrecision => "full-precision",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flexible" => Ok(Scheme::Flexible),
            "fixed" => Ok(Scheme::Fixed),
            "full-precision" => Ok(Scheme::FullPrecision),
            _ => Err(Error::Config(format!("unknown scheme {s:?} (flexible, fixed, full-precision)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdScope {
    /// One threshold vector shared by every layer.
    Global,
    /// One threshold vector per conv/dense layer.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub k: usize,
    pub lambda: RegCoefficients,
    pub tau: f64,
    pub threshold_sum: ThresholdSum,
    pub threshold_init: f64,
    pub threshold_scope: ThresholdScope,
    pub train_thresholds: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub code_bits: u8,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Flexible,
            k: 2,
            lambda: RegCoefficients(vec![0.0, 3e-5]),
            tau: 1.0,
            threshold_sum: ThresholdSum::AllRounds,
            threshold_init: 0.0,
            threshold_scope: ThresholdScope::Global,
            train_thresholds: true,
            lr: 1e-3,
            epochs: 60,
            batch_size: 128,
            clip_norm: 5.0,
            code_bits: DEFAULT_CODE_BITS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.scheme != Scheme::FullPrecision && !(1..=MAX_K).contains(&self.k) {
            return fail(format!("k must be in 1..={MAX_K}, got {}", self.k));
        }
        if self.lambda.len() != self.k {
            return fail(format!("{} regularization coefficients for k = {}", self.lambda.len(), self.k));
        }
        RegCoefficients::new(self.lambda.0.clone())?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.clip_norm >= 0.0) {
            return fail(format!("clip norm must be ≥ 0, got {}", self.clip_norm));
        }
        if self.threshold_init.is_nan() {
            return fail("threshold init is NaN".into());
        }
        ExponentRange::new(0, self.code_bits).map(|_| ())
    }

    /// Learning rate for `epoch` (0-based): ×0.1 from 50% and again from 75% of the run.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = [self.epochs / 2, self.epochs * 3 / 4].iter().filter(|&&m| m > 0 && epoch >= m).count();
        self.lr * 0.1f64.powi(passed as i32)
    }
}

/// Per-weight-layer quantization of one step.
struct LayerQuant {
    slot: usize,
    filter_len: usize,
    range: ExponentRange,
    k_values: Vec<usize>,
}

/// Loss components and gradients of one mini-batch.
#[derive(Debug, Clone)]
pub struct GradReport<T = f32> {
    pub l_ce: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub params: Vec<Tensor<T>>,
    pub thresholds: Vec<Vec<f64>>,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KStats {
    pub mean_k: f64,
    /// `histogram[j]` = number of filters with `k_i = j`.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub k: KStats,
    pub wall_secs: f64,
}

/// Full-precision master weights, thresholds, optimizer moments and counters.
#[derive(Debug, Clone)]
pub struct TrainState<T: Real = f32> {
    pub net: Network,
    pub config: TrainConfig,
    pub params: Params<T>,
    pub buffers: Buffers<T>,
    pub thresholds: Vec<Thresholds>,
    pub adam: AdamState<T>,
    pub adam_thresholds: AdamState<f64>,
    pub epoch: usize,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    /// Fresh state; parameters and the shuffling stream both derive from `config.seed`.
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = net.init_params::<T>(config.seed);
        let layers = net.slots().iter().filter(|s| s.is_filter_weight()).count();
        let copies = match config.threshold_scope {
            ThresholdScope::Global => 1,
            ThresholdScope::PerLayer => layers,
        };
        let thresholds = vec![Thresholds::filled(config.k, config.threshold_init); copies];
        let t_shapes: Vec<[usize; 1]> = thresholds.iter().map(|t| [t.len()]).collect();
        let t_shapes: Vec<&[usize]> = t_shapes.iter().map(|s| s.as_slice()).collect();
        Ok(TrainState {
            buffers: net.init_buffers(),
            adam: AdamState::for_params(&params.tensors),
            adam_thresholds: AdamState::new(&t_shapes),
            params,
            thresholds,
            net,
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_da7a),
            config,
        })
    }

    /// Replaces every threshold (e.g. `−∞` to pin all gates open).
    pub fn set_thresholds(&mut self, t: Thresholds) -> Result<()> {
        if t.len() != self.config.k || t.0.iter().any(|v| v.is_nan()) {
            return Err(Error::Config(format!("expected {} non-NaN thresholds", self.config.k)));
        }
        self.thresholds.iter_mut().for_each(|x| *x = t.clone());
        Ok(())
    }

    fn quantize_layers(&self) -> Result<(Params<T>, Vec<LayerQuant>)> {
        let cfg = &self.config;
        let mut out = self.params.clone();
        let mut layers = Vec::new();
        let weight_slots = self.net.slots().iter().enumerate().filter(|(_, s)| s.is_filter_weight());
        for (li, (slot, spec)) in weight_slots.enumerate() {
            let w = self.params.tensors[slot].data();
            let filter_len = spec.filter_len();
            let range = ExponentRange::for_weights(w, cfg.code_bits)?;
            let (q, k_values): (Vec<Vec<T>>, Vec<usize>) = match cfg.scheme {
                Scheme::Flexible => {
                    let t = thresholds_for(&self.thresholds, li);
                    w.par_chunks(filter_len)
                        .map(|f| {
                            let (qf, _) = quantize_filter(f, t, cfg.k, &range);
                            let k = qf.k();
                            (dequantize::<T>(&qf), k)
                        })
                        .unzip()
                }
                Scheme::Fixed => w.par_chunks(filter_len).map(|f| (fixed_k_quantize(f, cfg.k, &range), cfg.k)).unzip(),
                Scheme::FullPrecision => (vec![w.to_vec()], vec![0; spec.filter_count()]),
            };
            out.tensors[slot] = Tensor::from_vec(&spec.shape, q.concat())?;
            layers.push(LayerQuant { slot, filter_len, range, k_values });
        }
        Ok((out, layers))
    }

    /// The quantized weights `w^q` the forward pass would use right now.
    pub fn quantized_params(&self) -> Result<Params<T>> {
        Ok(self.quantize_layers()?.0)
    }

    /// Term-count statistics over every conv/dense filter.
    pub fn k_stats(&self) -> Result<KStats> {
        let (_, layers) = self.quantize_layers()?;
        Ok(k_stats(&layers, self.config.k))
    }

    /// Quantized model for export (all gates open under the fixed scheme).
    pub fn quantized_model(&self) -> Result<QuantizedModel> {
        let cfg = &self.config;
        match cfg.scheme {
            Scheme::Flexible => quantize_network(&self.net, &self.params, &self.thresholds, cfg.k, cfg.code_bits),
            Scheme::Fixed => {
                quantize_network(&self.net, &self.params, &[Thresholds::filled(cfg.k, f64::NEG_INFINITY)], cfg.k, cfg.code_bits)
            }
            Scheme::FullPrecision => Err(Error::Usage("a full-precision run has no quantized model".into())),
        }
    }

    /// Losses and gradients for one mini-batch, without updating anything.
    pub fn gradients(&self, images: &Tensor<T>, labels: &[usize]) -> Result<(GradReport<T>, Buffers<T>)> {
        let cfg = &self.config;
        let (wq, layers) = self.quantize_layers()?;
        let (logits, cache) = self.net.forward(&wq, &self.buffers, images, Mode::Train)?;
        let (l_ce, dlogits) = cross_entropy(&logits, labels)?;
        let l_ce = l_ce.as_f64();
        let quantized = cfg.scheme != Scheme::FullPrecision;
        let l_reg: f64 = if quantized {
            layers
                .iter()
                .map(|lq| reg_loss(self.params.tensors[lq.slot].data(), lq.filter_len, &cfg.lambda, cfg.k, &lq.range))
                .sum()
        } else {
            0.0
        };
        let l_total = l_ce + l_reg;
        if !l_total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss (L_CE = {l_ce}, L_reg = {l_reg}); {}", self.dump())));
        }
        let correct = logits.data().chunks(self.net.config().classes).zip(labels).filter(|(row, &l)| argmax(row) == l).count();

        let grads = self.net.backward(&wq, &self.buffers, &cache, &dlogits)?;
        // Straight-through: dL/dw = dL/dw^q.
        let mut params = grads.params;
        let mut t_grads = vec![vec![0.0; cfg.k]; self.thresholds.len()];
        if quantized {
            let opts = ThresholdGradOptions { tau: cfg.tau, trajectory: Trajectory::Hard, sum: cfg.threshold_sum };
            for (li, lq) in layers.iter().enumerate() {
                let w = self.params.tensors[lq.slot].data();
                if cfg.scheme == Scheme::Flexible && cfg.train_thresholds {
                    let t = thresholds_for(&self.thresholds, li);
                    let up = params[lq.slot].data();
                    let per_filter: Vec<Vec<f64>> = w
                        .par_chunks(lq.filter_len)
                        .zip(up.par_chunks(lq.filter_len))
                        .map(|(f, g)| threshold_grad(f, t, g, cfg.k, &lq.range, &opts))
                        .collect();
                    let target = if self.thresholds.len() == 1 { 0 } else { li };
                    for g in per_filter {
                        t_grads[target].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                reg_grad(w, lq.filter_len, &cfg.lambda, cfg.k, &lq.range, params[lq.slot].data_mut());
            }
        }
        let mut buffers = self.buffers.clone();
        self.net.update_running_stats(&mut buffers, &cache);
        Ok((GradReport { l_ce, l_reg, l_total, params, thresholds: t_grads, correct }, buffers))
    }

    /// One optimizer step on a mini-batch at learning rate `lr`.
    pub fn train_step(&mut self, images: &Tensor<T>, labels: &[usize], lr: f64) -> Result<GradReport<T>> {
        let (mut report, buffers) = self.gradients(images, labels)?;
        let clip = self.config.clip_norm;
        if clip > 0.0 {
            let norm = (report.params.iter().map(|g| g.sum_squares()).sum::<f64>()
                + report.thresholds.iter().flatten().map(|g| g * g).sum::<f64>())
            .sqrt();
            if norm > clip {
                let s = clip / norm;
                for g in &mut report.params {
                    g.data_mut().iter_mut().for_each(|v| *v *= T::lit(s));
                }
                report.thresholds.iter_mut().flatten().for_each(|v| *v *= s);
            }
        }
        if report.params.iter().any(|g| !g.is_finite()) || report.thresholds.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient; {}", self.dump())));
        }
        adam_step(&mut self.params.tensors, &report.params, &mut self.adam, lr)?;
        if self.config.scheme == Scheme::Flexible && self.config.train_thresholds {
            let mut t: Vec<Tensor<f64>> =
                self.thresholds.iter().map(|t| Tensor::from_vec(&[t.len()], t.0.clone())).collect::<Result<_>>()?;
            let g: Vec<Tensor<f64>> =
                report.thresholds.iter().map(|g| Tensor::from_vec(&[g.len()], g.clone())).collect::<Result<_>>()?;
            adam_step(&mut t, &g, &mut self.adam_thresholds, lr)?;
            for (dst, src) in self.thresholds.iter_mut().zip(t) {
                dst.0 = src.into_data();
            }
        }
        self.buffers = buffers;
        self.step += 1;
        Ok(report)
    }

    /// One pass over `train` in a seeded shuffled order, then evaluation on `test`.
    pub fn train_epoch(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<EpochMetrics> {
        let start = Instant::now();
        let lr = self.config.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut ce, mut reg, mut total, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(self.config.batch_size) {
            let (x, y) = train.batch(idx);
            let r = self.train_step(&x.cast(), &y, lr)?;
            let n = idx.len() as f64;
            ce += r.l_ce * n;
            reg += r.l_reg * n;
            total += r.l_total * n;
            correct += r.correct;
        }
        let n = train.len().max(1) as f64;
        let test_acc = test.map(|d| self.evaluate(d)).transpose()?;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            l_ce: ce / n,
            l_reg: reg / n,
            l_total: total / n,
            train_acc: correct as f64 / n,
            test_acc,
            k: self.k_stats()?,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        Ok(metrics)
    }

    /// Top-1 accuracy of the quantized network with running BN statistics.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        let preds = self.predict(data)?;
        Ok(preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count() as f64 / data.len().max(1) as f64)
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>> {
        let wq = self.quantized_params()?;
        predict(&self.net, &wq, &self.buffers, data, self.config.batch_size)
    }

    fn dump(&self) -> String {
        let norms: Vec<String> = self.params.tensors.iter().map(|t| format!("{:.4e}", t.sum_squares().sqrt())).collect();
        format!(
            "state dump: epoch {}, step {}, thresholds {:?}, parameter norms [{}]",
            self.epoch,
            self.step,
            self.thresholds.iter().map(|t| &t.0).collect::<Vec<_>>(),
            norms.join(", ")
        )
    }
}

/// Eval-mode class predictions in batches of `batch`.
pub fn predict<T: Real>(net: &Network, params: &Params<T>, buffers: &Buffers<T>, data: &Dataset, batch: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = data.batch(chunk);
        let (logits, _) = net.forward(params, buffers, &x.cast(), Mode::Eval)?;
        out.extend(logits.data().chunks(net.config().classes).map(argmax));
    }
    Ok(out)
}

fn k_stats(layers: &[LayerQuant], k: usize) -> KStats {
    let mut histogram = vec![0; k + 1];
    let mut sum = 0usize;
    let mut count = 0usize;
    for v in layers.iter().flat_map(|l| &l.k_values) {
        histogram[(*v).min(k)] += 1;
        sum += v;
        count += 1;
    }
    KStats { mean_k: if count == 0 { 0.0 } else { sum as f64 / count as f64 }, histogram }
}

/// Trains a fresh state for `config.epochs` epochs, reporting each epoch to `on_epoch`.
pub fn fit(
    net: &Network,
    config: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(TrainState<f32>, Vec<EpochMetrics>)> {
    let mut state = TrainState::new(net.clone(), config.clone())?;
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let m = state.train_epoch(train, test)?;
        on_epoch(&m);
        history.push(m);
    }
    Ok((state, history))
}
