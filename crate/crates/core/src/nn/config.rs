use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Batchnorm {
        channels: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    /// Non-overlapping pooling window (stride equals `size`).
    Maxpool {
        size: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        LayerSpec::Conv2d { in_channels, out_channels, kernel: 3, stride, padding: 1 }
    }

    pub fn bn(channels: usize) -> Self {
        LayerSpec::Batchnorm { channels }
    }

    pub fn leaky() -> Self {
        LayerSpec::LeakyRelu { slope: DEFAULT_LEAKY_SLOPE }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Batchnorm { .. } => "batchnorm",
            LayerSpec::LeakyRelu { .. } => "leaky-relu",
            LayerSpec::Maxpool { .. } => "maxpool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Vgg,
    Resnet,
}

/// Residual connection: the activation entering layer `from` is added to the
/// output of layer `to`. A 1×1 projection is inserted when the shapes differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub id: String,
    pub style: Style,
    /// Per-sample input shape `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub skips: Vec<Skip>,
    pub classes: usize,
}

impl NetworkConfig {
    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Conv2d { .. })).count()
    }

    /// Largest number of convolutional filters in any layer.
    pub fn width(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &[
    "network-1",
    "network-2",
    "network-3",
    "network-4",
    "network-5",
    "network-6",
    "network-7",
    "network-8",
    "mnist-2conv",
];

/// Built-in network configurations.
///
/// `network-1` … `network-8` follow the depth/width/parameter budget of the
/// eight reference configurations (CIFAR-10: 1–3, SVHN: 4–5, CIFAR-100: 6–7,
/// downsampled ImageNet: 8). `mnist-2conv` is the small desk-scale network.
pub fn preset(name: &str) -> Result<NetworkConfig> {
    let cfg = match name {
        "network-1" => vgg(name, [3, 32, 32], &[16, 16, 32, 32, 32, 64, 64], &[1, 3, 4, 6], 10),
        "network-2" => resnet(name, [3, 32, 32], &[16, 32, 64, 128], 2, 10),
        "network-3" => vgg(name, [3, 32, 32], &[64, 128, 128, 256, 256, 512, 512], &[1, 3, 4, 6], 10),
        "network-4" => vgg(name, [3, 32, 32], &[16, 16, 32, 64], &[0, 1, 2, 3], 10),
        "network-5" => vgg(name, [3, 32, 32], &[16, 32, 64, 128], &[0, 1, 2, 3], 10),
        "network-6" => resnet(name, [3, 32, 32], &[16, 32, 64, 128], 2, 100),
        "network-7" => resnet(name, [3, 32, 32], &[32, 64, 128, 256], 2, 100),
        "network-8" => resnet(name, [3, 64, 64], &[32, 64, 192, 256], 1, 1000),
        "mnist-2conv" => vgg(name, [1, 28, 28], &[8, 16], &[0, 1], 10),
        other => return Err(Error::config(format!("unknown preset '{other}'"))),
    };
    Ok(cfg)
}

/// Stacked 3×3 convs, each followed by BN + Leaky ReLU; a 2×2 max-pool after
/// the conv indices listed in `pool_after`; one dense classifier.
pub fn vgg(
    id: &str,
    input: [usize; 3],
    widths: &[usize],
    pool_after: &[usize],
    classes: usize,
) -> NetworkConfig {
    let mut layers = Vec::new();
    let mut c = input[0];
    let (mut h, mut w) = (input[1], input[2]);
    for (i, &width) in widths.iter().enumerate() {
        layers.push(LayerSpec::conv3x3(c, width, 1));
        layers.push(LayerSpec::bn(width));
        layers.push(LayerSpec::leaky());
        if pool_after.contains(&i) {
            layers.push(LayerSpec::Maxpool { size: 2 });
            h /= 2;
            w /= 2;
        }
        c = width;
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { in_features: c * h * w, out_features: classes });
    NetworkConfig { id: id.to_string(), style: Style::Vgg, input, layers, skips: Vec::new(), classes }
}

/// ResNet with a 3×3 stem, one stage per entry of `widths` (`blocks` basic
/// blocks each, stride 2 at the start of every stage after the first), a
/// global max-pool and a dense classifier.
pub fn resnet(
    id: &str,
    input: [usize; 3],
    widths: &[usize],
    blocks: usize,
    classes: usize,
) -> NetworkConfig {
    let mut layers = vec![LayerSpec::conv3x3(input[0], widths[0], 1), LayerSpec::bn(widths[0]), LayerSpec::leaky()];
    let mut skips = Vec::new();
    let mut c = widths[0];
    let mut side = input[1];
    for (stage, &width) in widths.iter().enumerate() {
        for block in 0..blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let from = layers.len();
            layers.push(LayerSpec::conv3x3(c, width, stride));
            layers.push(LayerSpec::bn(width));
            layers.push(LayerSpec::leaky());
            layers.push(LayerSpec::conv3x3(width, width, 1));
            layers.push(LayerSpec::bn(width));
            skips.push(Skip { from, to: layers.len() - 1 });
            layers.push(LayerSpec::leaky());
            side = side.div_ceil(stride);
            c = width;
        }
    }
    layers.push(LayerSpec::Maxpool { size: side });
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { in_features: c, out_features: classes });
    NetworkConfig { id: id.to_string(), style: Style::Resnet, input, layers, skips, classes }
}
