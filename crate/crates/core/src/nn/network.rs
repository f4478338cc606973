use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LayerSpec, NetworkConfig};
use super::layers::{self, BnSaved, ConvGeom, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Who owns a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Layer(usize),
    /// The 1×1 projection of skip connection `n`.
    Projection(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub owner: Owner,
    pub role: Role,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    /// Conv and dense weights: the tensors that get quantized filter by filter.
    pub fn is_filter_weight(&self) -> bool {
        self.role == Role::Weight
    }

    /// Number of filters (leading dimension) in a weight slot.
    pub fn filter_count(&self) -> usize {
        self.shape[0]
    }

    pub fn filter_len(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

/// Strided 1×1 convolution (with bias) that reshapes a skip input to its target.
#[derive(Debug, Clone)]
struct Projection {
    geom: ConvGeom,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct SkipPlan {
    from: usize,
    to: usize,
    projection: Option<Projection>,
}

/// A validated [`NetworkConfig`] together with its activation shapes and
/// parameter layout.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    /// Per-sample activation shapes; `shapes[l]` enters layer `l`.
    shapes: Vec<Vec<usize>>,
    slots: Vec<ParamSlot>,
    /// Index of the first parameter slot of each layer.
    layer_slots: Vec<Option<usize>>,
    skips: Vec<SkipPlan>,
    bn_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T = f32> {
    pub tensors: Vec<Tensor<T>>,
}

/// Non-trainable batch-norm running statistics, one entry per BN layer in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffers<T = f32> {
    pub running_mean: Vec<Tensor<T>>,
    pub running_var: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    None,
    Bn(BnSaved<T>),
    Pool(Vec<usize>),
}

/// Everything backward needs from one forward call.
#[derive(Debug, Clone)]
pub struct Cache<T = f32> {
    batch: usize,
    mode: Mode,
    activations: Vec<Vec<T>>,
    layer: Vec<LayerCache<T>>,
    fingerprint: usize,
}

impl<T: Real> Cache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Per-BN-layer `(mean, biased variance, element count)` from a
    /// training-mode pass.
    pub fn bn_batch_stats(&self) -> Vec<(&[T], &[T], usize)> {
        self.layer
            .iter()
            .filter_map(|c| match c {
                LayerCache::Bn(s) => Some((s.mean.as_slice(), s.var.as_slice(), s.count)),
                _ => None,
            })
            .collect()
    }

    /// Activation entering layer `l` (flattened over the batch).
    pub fn activation(&self, l: usize) -> &[T] {
        &self.activations[l]
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        if config.layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        if config.input.iter().any(|&d| d == 0) {
            return Err(Error::config("input dimensions must be positive"));
        }
        let mut shapes = vec![config.input.to_vec()];
        let mut slots = Vec::new();
        let mut layer_slots = Vec::new();
        let mut bn_layers = Vec::new();
        for (l, spec) in config.layers.iter().enumerate() {
            let cur = shapes.last().unwrap().clone();
            let err = |msg: String| Error::config(format!("layer {l} ({}): {msg}", spec.name()));
            let next = match *spec {
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                    if cur.len() != 3 || cur[0] != in_channels {
                        return Err(err(format!("expects {in_channels} input channels, got shape {cur:?}")));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(err("kernel, stride and channel counts must be positive".into()));
                    }
                    if cur[1] + 2 * padding < kernel || cur[2] + 2 * padding < kernel {
                        return Err(err(format!("kernel {kernel} larger than padded input {cur:?}")));
                    }
                    layer_slots.push(Some(slots.len()));
                    slots.push(ParamSlot { owner: Owner::Layer(l), role: Role::Weight, shape: vec![out_channels, in_channels, kernel, kernel] });
                    slots.push(ParamSlot { owner: Owner::Layer(l), role: Role::Bias, shape: vec![out_channels] });
                    let g = ConvGeom { in_c: in_channels, in_h: cur[1], in_w: cur[2], out_c: out_channels, kernel, stride, padding };
                    vec![out_channels, g.out_h(), g.out_w()]
                }
                LayerSpec::Batchnorm { channels } => {
                    if cur.len() != 3 || cur[0] != channels {
                        return Err(err(format!("expects {channels} channels, got shape {cur:?}")));
                    }
                    layer_slots.push(Some(slots.len()));
                    slots.push(ParamSlot { owner: Owner::Layer(l), role: Role::Gamma, shape: vec![channels] });
                    slots.push(ParamSlot { owner: Owner::Layer(l), role: Role::Beta, shape: vec![channels] });
                    bn_layers.push(l);
                    cur
                }
                LayerSpec::LeakyRelu { slope } => {
                    if !slope.is_finite() || slope < 0.0 {
                        return Err(err(format!("invalid slope {slope}")));
                    }
                    layer_slots.push(None);
                    cur
                }
                LayerSpec::Maxpool { size } => {
                    if cur.len() != 3 || size == 0 || cur[1] < size || cur[2] < size {
                        return Err(err(format!("pool size {size} does not fit shape {cur:?}")));
                    }
                    layer_slots.push(None);
                    vec![cur[0], cur[1] / size, cur[2] / size]
                }
                LayerSpec::Flatten => {
                    layer_slots.push(None);
                    vec![cur.iter().product()]
                }
                LayerSpec::Dense { in_features, out_features } => {
                    if cur.len() != 1 || cur[0] != in_features {
                        return Err(err(format!("expects {in_features} features, got shape {cur:?}")));
                    }
                    if out_features == 0 {
                        return Err(err("no outputs".into()));
                    }
                    layer_slots.push(Some(slots.len()));
                    slots.push(ParamSlot { owner: Owner::Layer(l), role: Role::Weight, shape: vec![out_features, in_features] });
                    slots.push(ParamSlot { owner: Owner::Layer(l), role: Role::Bias, shape: vec![out_features] });
                    vec![out_features]
                }
            };
            shapes.push(next);
        }
        if shapes.last().unwrap() != &vec![config.classes] {
            return Err(Error::config(format!(
                "network output shape {:?} does not match {} classes",
                shapes.last().unwrap(),
                config.classes
            )));
        }

        let mut skips = Vec::new();
        for (s, skip) in config.skips.iter().enumerate() {
            if skip.from > skip.to || skip.to >= config.layers.len() {
                return Err(Error::config(format!("skip {s}: invalid range {}..={}", skip.from, skip.to)));
            }
            let src = &shapes[skip.from];
            let dst = &shapes[skip.to + 1];
            let projection = if src == dst {
                None
            } else {
                if src.len() != 3 || dst.len() != 3 {
                    return Err(Error::config(format!("skip {s}: cannot project {src:?} onto {dst:?}")));
                }
                let stride = src[1].div_ceil(dst[1]).max(1);
                let geom = ConvGeom { in_c: src[0], in_h: src[1], in_w: src[2], out_c: dst[0], kernel: 1, stride, padding: 0 };
                if geom.out_h() != dst[1] || geom.out_w() != dst[2] {
                    return Err(Error::config(format!("skip {s}: no strided 1×1 projection maps {src:?} onto {dst:?}")));
                }
                let weight = slots.len();
                slots.push(ParamSlot { owner: Owner::Projection(s), role: Role::Weight, shape: vec![dst[0], src[0], 1, 1] });
                slots.push(ParamSlot { owner: Owner::Projection(s), role: Role::Bias, shape: vec![dst[0]] });
                Some(Projection { geom, weight, bias: weight + 1 })
            };
            skips.push(SkipPlan { from: skip.from, to: skip.to, projection });
        }

        Ok(Network { config, shapes, slots, layer_slots, skips, bn_layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    /// Per-sample shape of the activation entering layer `l` (`l = layers.len()` is the output).
    pub fn shape(&self, l: usize) -> &[usize] {
        &self.shapes[l]
    }

    pub fn layer_slot(&self, l: usize) -> Option<usize> {
        self.layer_slots[l]
    }

    pub fn bn_layers(&self) -> &[usize] {
        &self.bn_layers
    }

    /// Geometry of conv layer `l`.
    pub fn conv_geom(&self, l: usize) -> Option<ConvGeom> {
        match self.config.layers[l] {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let s = &self.shapes[l];
                Some(ConvGeom { in_c: in_channels, in_h: s[1], in_w: s[2], out_c: out_channels, kernel, stride, padding })
            }
            _ => None,
        }
    }

    /// `(from, to, projection geometry and weight slot)` per skip connection.
    pub fn skip_plans(&self) -> Vec<(usize, usize, Option<(ConvGeom, usize)>)> {
        self.skips
            .iter()
            .map(|s| (s.from, s.to, s.projection.as_ref().map(|p| (p.geom, p.weight))))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Total number of conv/dense (including projection) weights.
    pub fn weight_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_filter_weight()).map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Kaiming-normal (fan-in) weights, zero biases, BN γ = 1 and β = 0.
    pub fn init_params<T: Real>(&self, seed: u64) -> Params<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .slots
            .iter()
            .map(|slot| match slot.role {
                Role::Weight => {
                    let fan_in = slot.filter_len() as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    let data = (0..slot.shape.iter().product::<usize>())
                        .map(|_| T::lit(normal.sample(&mut rng)))
                        .collect();
                    Tensor::from_vec(&slot.shape, data).expect("slot shape")
                }
                Role::Bias | Role::Beta => Tensor::zeros(&slot.shape),
                Role::Gamma => Tensor::filled(&slot.shape, T::one()),
            })
            .collect();
        Params { tensors }
    }

    pub fn init_buffers<T: Real>(&self) -> Buffers<T> {
        let shapes: Vec<usize> = self.bn_layers.iter().map(|&l| self.shapes[l][0]).collect();
        Buffers {
            running_mean: shapes.iter().map(|&c| Tensor::zeros(&[c])).collect(),
            running_var: shapes.iter().map(|&c| Tensor::filled(&[c], T::one())).collect(),
        }
    }

    pub fn check_params<T: Real>(&self, params: &Params<T>) -> Result<()> {
        if params.tensors.len() != self.slots.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                self.slots.len(),
                params.tensors.len()
            )));
        }
        for (i, (t, slot)) in params.tensors.iter().zip(&self.slots).enumerate() {
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::shape(format!("parameter {i}: expected {:?}, got {:?}", slot.shape, t.shape())));
            }
        }
        Ok(())
    }

    fn fingerprint<T: Real>(&self, params: &Params<T>) -> usize {
        params.tensors.iter().map(|t| t.data().as_ptr() as usize).fold(self.slots.len(), |a, p| a.rotate_left(7) ^ p)
    }

    /// Runs the network on `batch` (`[N, c, h, w]`), returning `[N, classes]` logits.
    pub fn forward<T: Real>(
        &self,
        params: &Params<T>,
        buffers: &Buffers<T>,
        batch: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        self.check_params(params)?;
        let n = match batch.shape().split_first() {
            Some((&n, rest)) if rest == self.shapes[0].as_slice() && n > 0 => n,
            _ => {
                return Err(Error::shape(format!(
                    "batch shape {:?} does not match input [N, {:?}]",
                    batch.shape(),
                    self.shapes[0]
                )))
            }
        };
        let p = |i: usize| params.tensors[i].data();
        let mut activations: Vec<Vec<T>> = Vec::with_capacity(self.shapes.len());
        activations.push(batch.data().to_vec());
        let mut layer_cache = Vec::with_capacity(self.config.layers.len());
        let mut bn_index = 0;
        for (l, spec) in self.config.layers.iter().enumerate() {
            let x = &activations[l];
            let out_len: usize = n * self.shapes[l + 1].iter().product::<usize>();
            let mut y = vec![T::zero(); out_len];
            let cache = match *spec {
                LayerSpec::Conv2d { .. } => {
                    let g = self.conv_geom(l).unwrap();
                    let s = self.layer_slots[l].unwrap();
                    layers::conv_forward(&g, n, x, p(s), p(s + 1), &mut y);
                    LayerCache::None
                }
                LayerSpec::Batchnorm { channels } => {
                    let s = self.layer_slots[l].unwrap();
                    let spatial = self.shapes[l][1] * self.shapes[l][2];
                    let c = match mode {
                        Mode::Train => LayerCache::Bn(layers::bn_forward_train(n, channels, spatial, x, p(s), p(s + 1), &mut y)),
                        Mode::Eval => {
                            layers::bn_forward_eval(
                                n,
                                channels,
                                spatial,
                                x,
                                p(s),
                                p(s + 1),
                                buffers.running_mean[bn_index].data(),
                                buffers.running_var[bn_index].data(),
                                &mut y,
                            );
                            LayerCache::None
                        }
                    };
                    bn_index += 1;
                    c
                }
                LayerSpec::LeakyRelu { slope } => {
                    layers::leaky_forward(T::lit(slope), x, &mut y);
                    LayerCache::None
                }
                LayerSpec::Maxpool { size } => {
                    let s = &self.shapes[l];
                    let mut arg = vec![0; out_len];
                    layers::maxpool_forward(n * s[0], s[1], s[2], size, x, &mut y, &mut arg);
                    LayerCache::Pool(arg)
                }
                LayerSpec::Flatten => {
                    y.copy_from_slice(x);
                    LayerCache::None
                }
                LayerSpec::Dense { in_features, out_features } => {
                    let s = self.layer_slots[l].unwrap();
                    layers::dense_forward(n, in_features, out_features, x, p(s), p(s + 1), &mut y);
                    LayerCache::None
                }
            };
            for skip in self.skips.iter().filter(|s| s.to == l) {
                let src = &activations[skip.from];
                match &skip.projection {
                    None => y.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
                    Some(proj) => {
                        let mut tmp = vec![T::zero(); out_len];
                        layers::conv_forward(&proj.geom, n, src, p(proj.weight), p(proj.bias), &mut tmp);
                        y.iter_mut().zip(&tmp).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite output from layer {l} ({})", spec.name())));
            }
            layer_cache.push(cache);
            activations.push(y);
        }
        let logits = Tensor::from_vec(&[n, self.config.classes], activations.last().unwrap().clone())?;
        Ok((
            logits,
            Cache { batch: n, mode, activations, layer: layer_cache, fingerprint: self.fingerprint(params) },
        ))
    }

    /// Backpropagates `logit_grad` through the pass recorded in `cache`.
    pub fn backward<T: Real>(
        &self,
        params: &Params<T>,
        buffers: &Buffers<T>,
        cache: &Cache<T>,
        logit_grad: &Tensor<T>,
    ) -> Result<Gradients<T>> {
        self.check_params(params)?;
        if cache.activations.len() != self.shapes.len() || cache.fingerprint != self.fingerprint(params) {
            return Err(Error::Usage("cache was not produced by a forward pass with these parameters".into()));
        }
        let n = cache.batch;
        if logit_grad.shape() != [n, self.config.classes] {
            return Err(Error::shape(format!(
                "logit gradient shape {:?}, expected [{n}, {}]",
                logit_grad.shape(),
                self.config.classes
            )));
        }
        let p = |i: usize| params.tensors[i].data();
        let mut grads: Vec<Tensor<T>> = self.slots.iter().map(|s| Tensor::zeros(&s.shape)).collect();
        let mut act_grads: Vec<Option<Vec<T>>> = vec![None; self.shapes.len()];
        act_grads[self.shapes.len() - 1] = Some(logit_grad.data().to_vec());
        let mut bn_index = self.bn_layers.len();

        for l in (0..self.config.layers.len()).rev() {
            let dy = act_grads[l + 1].take().unwrap_or_else(|| vec![T::zero(); cache.activations[l + 1].len()]);
            let x = &cache.activations[l];
            // Skip branches see the same output gradient.
            for skip in self.skips.iter().filter(|s| s.to == l) {
                let contrib = match &skip.projection {
                    None => dy.clone(),
                    Some(proj) => {
                        let mut dx = vec![T::zero(); cache.activations[skip.from].len()];
                        let (gw, rest) = grads.split_at_mut(proj.bias);
                        layers::conv_backward(
                            &proj.geom,
                            n,
                            &cache.activations[skip.from],
                            p(proj.weight),
                            &dy,
                            gw[proj.weight].data_mut(),
                            rest[0].data_mut(),
                            &mut dx,
                        );
                        dx
                    }
                };
                accumulate(&mut act_grads[skip.from], contrib);
            }
            let mut dx = vec![T::zero(); x.len()];
            match (&self.config.layers[l], &cache.layer[l]) {
                (LayerSpec::Conv2d { .. }, _) => {
                    let g = self.conv_geom(l).unwrap();
                    let s = self.layer_slots[l].unwrap();
                    let (gw, rest) = grads.split_at_mut(s + 1);
                    layers::conv_backward(&g, n, x, p(s), &dy, gw[s].data_mut(), rest[0].data_mut(), &mut dx);
                }
                (LayerSpec::Batchnorm { channels }, c) => {
                    bn_index -= 1;
                    let s = self.layer_slots[l].unwrap();
                    let spatial = self.shapes[l][1] * self.shapes[l][2];
                    let (gg, rest) = grads.split_at_mut(s + 1);
                    match (cache.mode, c) {
                        (Mode::Train, LayerCache::Bn(saved)) => layers::bn_backward_train(
                            n,
                            *channels,
                            spatial,
                            saved,
                            p(s),
                            &dy,
                            gg[s].data_mut(),
                            rest[0].data_mut(),
                            &mut dx,
                        ),
                        (Mode::Eval, _) => layers::bn_backward_eval(
                            n,
                            *channels,
                            spatial,
                            x,
                            p(s),
                            buffers.running_mean[bn_index].data(),
                            buffers.running_var[bn_index].data(),
                            &dy,
                            gg[s].data_mut(),
                            rest[0].data_mut(),
                            &mut dx,
                        ),
                        _ => return Err(Error::Usage("batch-norm cache missing".into())),
                    }
                }
                (LayerSpec::LeakyRelu { slope }, _) => layers::leaky_backward(T::lit(*slope), x, &dy, &mut dx),
                (LayerSpec::Maxpool { .. }, LayerCache::Pool(arg)) => layers::maxpool_backward(arg, &dy, &mut dx),
                (LayerSpec::Maxpool { .. }, _) => return Err(Error::Usage("max-pool cache missing".into())),
                (LayerSpec::Flatten, _) => dx.copy_from_slice(&dy),
                (LayerSpec::Dense { in_features, out_features }, _) => {
                    let s = self.layer_slots[l].unwrap();
                    let (gw, rest) = grads.split_at_mut(s + 1);
                    layers::dense_backward(n, *in_features, *out_features, x, p(s), &dy, gw[s].data_mut(), rest[0].data_mut(), &mut dx);
                }
            }
            accumulate(&mut act_grads[l], dx);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shapes[0]);
        let input = Tensor::from_vec(&shape, act_grads[0].take().unwrap())?;
        Ok(Gradients { params: grads, input })
    }

    /// Folds the batch statistics recorded in a training-mode cache into the
    /// running estimates (momentum 0.1, unbiased variance).
    pub fn update_running_stats<T: Real>(&self, buffers: &mut Buffers<T>, cache: &Cache<T>) {
        let m = T::lit(BN_MOMENTUM);
        for (i, (mean, var, count)) in cache.bn_batch_stats().into_iter().enumerate() {
            let unbias = if count > 1 { T::lit(count as f64 / (count - 1) as f64) } else { T::one() };
            for (r, &b) in buffers.running_mean[i].data_mut().iter_mut().zip(mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in buffers.running_var[i].data_mut().iter_mut().zip(var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}
