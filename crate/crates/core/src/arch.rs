//! Declarative network specifications, the builders for the classifier /
//! residual backbone / detection head, and the runtime network that executes
//! them.

use rand::Rng;
use thiserror::Error;

use crate::nn::{
    conv_out_dim, maxpool_backward, maxpool_forward, softmax, Activation, ConvCache, ConvLayer,
    FcCache, FcLayer, PoolCache, ShapeError,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("invalid network spec: {0}")]
    Invalid(String),
    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: ShapeError,
    },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// One layer of a network, by configuration rather than by parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        batch_norm: bool,
        activation: Activation,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    FullyConnected {
        out_features: usize,
    },
    Softmax,
    /// Two 3x3 convolutions with an identity shortcut; a 1x1 projection is
    /// inserted when the channel count or stride changes.
    Residual {
        out_channels: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDef {
    pub name: String,
    pub spec: LayerSpec,
}

/// Ordered layer list with a fixed input shape (channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerDef>,
}

fn residual_out(c_in: usize, h: usize, w: usize, out_channels: usize, stride: usize) -> Result<(usize, usize, usize), ShapeError> {
    let _ = c_in;
    let oh = conv_out_dim(h, 3, 1, stride)?;
    let ow = conv_out_dim(w, 3, 1, stride)?;
    Ok((out_channels, oh, ow))
}

impl NetworkSpec {
    /// Output shape (channels, height, width) after every layer, in order.
    /// Fully connected layers collapse to (out, 1, 1).
    pub fn shape_chain(&self) -> Result<Vec<(String, (usize, usize, usize))>, SpecError> {
        let mut chain = Vec::with_capacity(self.layers.len());
        let (mut c, mut h, mut w) = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            let wrap = |source| SpecError::Layer {
                layer: layer.name.clone(),
                source,
            };
            match &layer.spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    h = conv_out_dim(h, kernel.0, *padding, *stride).map_err(wrap)?;
                    w = conv_out_dim(w, kernel.1, *padding, *stride).map_err(wrap)?;
                    c = *out_channels;
                }
                LayerSpec::MaxPool { size, stride } => {
                    h = conv_out_dim(h, *size, 0, *stride).map_err(wrap)?;
                    w = conv_out_dim(w, *size, 0, *stride).map_err(wrap)?;
                }
                LayerSpec::FullyConnected { out_features } => {
                    c = *out_features;
                    h = 1;
                    w = 1;
                }
                LayerSpec::Softmax => {
                    if i + 1 != self.layers.len() {
                        return Err(SpecError::Invalid(
                            "softmax is only supported as the final layer".into(),
                        ));
                    }
                }
                LayerSpec::Residual {
                    out_channels,
                    stride,
                } => {
                    let (nc, nh, nw) = residual_out(c, h, w, *out_channels, *stride).map_err(wrap)?;
                    c = nc;
                    h = nh;
                    w = nw;
                }
            }
            chain.push((layer.name.clone(), (c, h, w)));
        }
        Ok(chain)
    }

    pub fn output_dim(&self) -> Result<(usize, usize, usize), SpecError> {
        Ok(self
            .shape_chain()?
            .last()
            .map(|(_, s)| *s)
            .unwrap_or(self.input_shape))
    }

    /// Learnable parameters per layer: kernel + bias + BN scale/shift for
    /// convolutions, weights + bias for fully connected layers, zero for
    /// pooling and softmax.
    pub fn layer_param_counts(&self) -> Result<Vec<(String, usize)>, SpecError> {
        let mut counts = Vec::with_capacity(self.layers.len());
        let (mut c, mut h, mut w) = self.input_shape;
        for layer in &self.layers {
            let count = match &layer.spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    batch_norm,
                    ..
                } => {
                    out_channels * (c * kernel.0 * kernel.1 + 1)
                        + if *batch_norm { 2 * out_channels } else { 0 }
                }
                LayerSpec::MaxPool { .. } | LayerSpec::Softmax => 0,
                LayerSpec::FullyConnected { out_features } => {
                    let in_features = c * h * w;
                    in_features * out_features + out_features
                }
                LayerSpec::Residual {
                    out_channels,
                    stride,
                } => {
                    let oc = *out_channels;
                    let conv1 = oc * (c * 9 + 1) + 2 * oc;
                    let conv2 = oc * (oc * 9 + 1) + 2 * oc;
                    let proj = if c != oc || *stride != 1 {
                        oc * (c + 1) + 2 * oc
                    } else {
                        0
                    };
                    conv1 + conv2 + proj
                }
            };
            counts.push((layer.name.clone(), count));
            // advance the shape chain
            match &layer.spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    h = conv_out_dim(h, kernel.0, *padding, *stride)?;
                    w = conv_out_dim(w, kernel.1, *padding, *stride)?;
                    c = *out_channels;
                }
                LayerSpec::MaxPool { size, stride } => {
                    h = conv_out_dim(h, *size, 0, *stride)?;
                    w = conv_out_dim(w, *size, 0, *stride)?;
                }
                LayerSpec::FullyConnected { out_features } => {
                    c = *out_features;
                    h = 1;
                    w = 1;
                }
                LayerSpec::Softmax => {}
                LayerSpec::Residual {
                    out_channels,
                    stride,
                } => {
                    let (nc, nh, nw) = residual_out(c, h, w, *out_channels, *stride)?;
                    c = nc;
                    h = nh;
                    w = nw;
                }
            }
        }
        Ok(counts)
    }

    pub fn total_parameters(&self) -> Result<usize, SpecError> {
        Ok(self.layer_param_counts()?.iter().map(|(_, n)| n).sum())
    }

    /// Spec truncated just after the named layer, for tapping an intermediate
    /// feature map. Returns None when no layer has that name.
    pub fn truncated_at(&self, layer_name: &str) -> Option<NetworkSpec> {
        let idx = self.layers.iter().position(|l| l.name == layer_name)?;
        Some(NetworkSpec {
            name: format!("{}@{}", self.name, layer_name),
            input_shape: self.input_shape,
            layers: self.layers[..=idx].to_vec(),
        })
    }

    /// Plain-text form, one `key=value` per line; inverse of
    /// [`NetworkSpec::from_config_text`].
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("name={}\n", self.name));
        out.push_str(&format!(
            "input={}x{}x{}\n",
            self.input_shape.0, self.input_shape.1, self.input_shape.2
        ));
        for layer in &self.layers {
            let line = match &layer.spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    batch_norm,
                    activation,
                } => format!(
                    "layer={}:conv:{}:{}x{}:{}:{}:{}:{}",
                    layer.name,
                    out_channels,
                    kernel.0,
                    kernel.1,
                    stride,
                    padding,
                    u8::from(*batch_norm),
                    match activation {
                        Activation::None => "none",
                        Activation::Relu => "relu",
                    }
                ),
                LayerSpec::MaxPool { size, stride } => {
                    format!("layer={}:pool:{}:{}", layer.name, size, stride)
                }
                LayerSpec::FullyConnected { out_features } => {
                    format!("layer={}:fc:{}", layer.name, out_features)
                }
                LayerSpec::Softmax => format!("layer={}:softmax", layer.name),
                LayerSpec::Residual {
                    out_channels,
                    stride,
                } => format!("layer={}:res:{}:{}", layer.name, out_channels, stride),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn from_config_text(text: &str) -> Result<NetworkSpec, SpecError> {
        let mut name = String::new();
        let mut input_shape = None;
        let mut layers = Vec::new();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SpecError::Invalid(format!("bad config line: {line}")))?;
            match key {
                "name" => name = value.to_string(),
                "input" => {
                    let dims: Vec<usize> = value
                        .split('x')
                        .map(|v| v.parse::<usize>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| SpecError::Invalid(format!("bad input shape: {value}")))?;
                    if dims.len() != 3 {
                        return Err(SpecError::Invalid(format!("bad input shape: {value}")));
                    }
                    input_shape = Some((dims[0], dims[1], dims[2]));
                }
                "layer" => layers.push(parse_layer_line(value)?),
                other => return Err(SpecError::Invalid(format!("unknown key: {other}"))),
            }
        }
        Ok(NetworkSpec {
            name,
            input_shape: input_shape
                .ok_or_else(|| SpecError::Invalid("missing input shape".into()))?,
            layers,
        })
    }
}

fn parse_layer_line(value: &str) -> Result<LayerDef, SpecError> {
    let parts: Vec<&str> = value.split(':').collect();
    let bad = || SpecError::Invalid(format!("bad layer line: {value}"));
    if parts.len() < 2 {
        return Err(bad());
    }
    let name = parts[0].to_string();
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let spec = match parts[1] {
        "conv" => {
            if parts.len() != 8 {
                return Err(bad());
            }
            let (kh, kw) = parts[3].split_once('x').ok_or_else(bad)?;
            LayerSpec::Conv {
                out_channels: parse(parts[2])?,
                kernel: (parse(kh)?, parse(kw)?),
                stride: parse(parts[4])?,
                padding: parse(parts[5])?,
                batch_norm: parts[6] == "1",
                activation: match parts[7] {
                    "relu" => Activation::Relu,
                    "none" => Activation::None,
                    _ => return Err(bad()),
                },
            }
        }
        "pool" => LayerSpec::MaxPool {
            size: parse(parts.get(2).ok_or_else(bad)?)?,
            stride: parse(parts.get(3).ok_or_else(bad)?)?,
        },
        "fc" => LayerSpec::FullyConnected {
            out_features: parse(parts.get(2).ok_or_else(bad)?)?,
        },
        "softmax" => LayerSpec::Softmax,
        "res" => LayerSpec::Residual {
            out_channels: parse(parts.get(2).ok_or_else(bad)?)?,
            stride: parse(parts.get(3).ok_or_else(bad)?)?,
        },
        _ => return Err(bad()),
    };
    Ok(LayerDef { name, spec })
}

fn conv5(out_channels: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels,
        kernel: (5, 5),
        stride: 1,
        padding: 0,
        batch_norm: true,
        activation: Activation::Relu,
    }
}

/// The plate-classification stack: ten BN+ReLU convolutions (5x5 except the
/// final 2x2), four 2x2 max poolings, one fully connected layer and softmax,
/// over a 3x224x224 input.
pub fn build_classifier(num_classes: usize) -> Result<NetworkSpec, SpecError> {
    if num_classes < 2 {
        return Err(SpecError::Invalid(format!(
            "classifier needs at least 2 classes, got {num_classes}"
        )));
    }
    let mut layers = Vec::new();
    let mut conv_idx = 0;
    let mut pool_idx = 0;
    let mut push_conv = |layers: &mut Vec<LayerDef>, spec: LayerSpec| {
        conv_idx += 1;
        layers.push(LayerDef {
            name: format!("conv{conv_idx}"),
            spec,
        });
    };
    let mut push_pool = |layers: &mut Vec<LayerDef>| {
        pool_idx += 1;
        layers.push(LayerDef {
            name: format!("pool{pool_idx}"),
            spec: LayerSpec::MaxPool { size: 2, stride: 2 },
        });
    };

    for &width in &[32usize, 64, 96, 128] {
        push_conv(&mut layers, conv5(width));
        push_conv(&mut layers, conv5(width));
        push_pool(&mut layers);
    }
    push_conv(&mut layers, conv5(256));
    push_conv(
        &mut layers,
        LayerSpec::Conv {
            out_channels: 512,
            kernel: (2, 2),
            stride: 1,
            padding: 0,
            batch_norm: true,
            activation: Activation::Relu,
        },
    );
    layers.push(LayerDef {
        name: "fc1".into(),
        spec: LayerSpec::FullyConnected {
            out_features: num_classes,
        },
    });
    layers.push(LayerDef {
        name: "softmax".into(),
        spec: LayerSpec::Softmax,
    });

    let spec = NetworkSpec {
        name: format!("classifier{num_classes}"),
        input_shape: (3, 224, 224),
        layers,
    };
    spec.shape_chain()?;
    Ok(spec)
}

/// Width-reduced variant of the classifier stack for smaller inputs: each
/// pair of widths becomes conv5-conv5-pool, followed by a fully connected
/// layer and softmax. `widths.len()` must be even.
pub fn build_compact_classifier(
    input_size: usize,
    num_classes: usize,
    widths: &[usize],
) -> Result<NetworkSpec, SpecError> {
    if num_classes < 2 {
        return Err(SpecError::Invalid(format!(
            "classifier needs at least 2 classes, got {num_classes}"
        )));
    }
    if widths.is_empty() || widths.len() % 2 != 0 {
        return Err(SpecError::Invalid(
            "compact classifier needs an even, non-empty width list".into(),
        ));
    }
    let mut layers = Vec::new();
    for (g, pair) in widths.chunks(2).enumerate() {
        layers.push(LayerDef {
            name: format!("conv{}", 2 * g + 1),
            spec: conv5(pair[0]),
        });
        layers.push(LayerDef {
            name: format!("conv{}", 2 * g + 2),
            spec: conv5(pair[1]),
        });
        layers.push(LayerDef {
            name: format!("pool{}", g + 1),
            spec: LayerSpec::MaxPool { size: 2, stride: 2 },
        });
    }
    layers.push(LayerDef {
        name: "fc1".into(),
        spec: LayerSpec::FullyConnected {
            out_features: num_classes,
        },
    });
    layers.push(LayerDef {
        name: "softmax".into(),
        spec: LayerSpec::Softmax,
    });
    let spec = NetworkSpec {
        name: format!("compact{input_size}_{num_classes}"),
        input_shape: (3, input_size, input_size),
        layers,
    };
    spec.shape_chain()?;
    Ok(spec)
}

/// Sizing of the detector's final 1x1 convolution: filters = (C + 5) * A.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionHeadSpec {
    pub num_classes: usize,
    pub num_anchors: usize,
    pub grid_size: usize,
    pub filters: usize,
}

/// Head spec plus the raw-logit 1x1 convolution that produces it. The head
/// conv carries no batch norm and no activation; the decode transforms
/// consume raw logits.
pub fn build_detection_head(
    num_classes: usize,
    num_anchors: usize,
    grid_size: usize,
) -> Result<(DetectionHeadSpec, LayerSpec), SpecError> {
    if num_classes == 0 || num_anchors == 0 {
        return Err(SpecError::Invalid(
            "detection head needs C >= 1 and A >= 1".into(),
        ));
    }
    let filters = (num_classes + 5) * num_anchors;
    let head = DetectionHeadSpec {
        num_classes,
        num_anchors,
        grid_size,
        filters,
    };
    let conv = LayerSpec::Conv {
        out_channels: filters,
        kernel: (1, 1),
        stride: 1,
        padding: 0,
        batch_norm: false,
        activation: Activation::None,
    };
    Ok((head, conv))
}

/// Residual backbone configuration. The realized feature-map side is
/// input_size / downsample_factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channel_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub downsample_factor: usize,
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channel_widths: vec![16, 32, 64, 128],
            blocks_per_stage: vec![1, 1, 1, 1],
            downsample_factor: 16,
            input_size: 224,
        }
    }
}

impl BackboneConfig {
    pub fn grid_size(&self) -> Result<usize, SpecError> {
        if self.downsample_factor == 0 || self.input_size % self.downsample_factor != 0 {
            return Err(SpecError::Invalid(format!(
                "input {} is not a multiple of downsample factor {}",
                self.input_size, self.downsample_factor
            )));
        }
        Ok(self.input_size / self.downsample_factor)
    }
}

/// Residual feature extractor: a 3x3 stem followed by residual stages, with
/// stride-2 transitions placed to realize the configured downsample factor.
pub fn build_backbone(config: &BackboneConfig) -> Result<NetworkSpec, SpecError> {
    let stages = config.stage_channel_widths.len();
    if stages == 0 || config.blocks_per_stage.len() != stages {
        return Err(SpecError::Invalid(
            "stage widths and blocks-per-stage must be non-empty and equal length".into(),
        ));
    }
    if !config.downsample_factor.is_power_of_two() {
        return Err(SpecError::Invalid(format!(
            "downsample factor {} is not a power of two",
            config.downsample_factor
        )));
    }
    config.grid_size()?;
    let budget = config.downsample_factor.trailing_zeros() as usize;
    if budget > stages {
        return Err(SpecError::Invalid(format!(
            "downsample factor {} needs more than {} stages",
            config.downsample_factor, stages
        )));
    }

    let stem_stride = if budget == stages { 2 } else { 1 };
    let mut remaining = budget - usize::from(stem_stride == 2);
    let mut layers = vec![LayerDef {
        name: "stem".into(),
        spec: LayerSpec::Conv {
            out_channels: config.stage_channel_widths[0],
            kernel: (3, 3),
            stride: stem_stride,
            padding: 1,
            batch_norm: true,
            activation: Activation::Relu,
        },
    }];
    for (s, (&width, &blocks)) in config
        .stage_channel_widths
        .iter()
        .zip(config.blocks_per_stage.iter())
        .enumerate()
    {
        if blocks == 0 {
            return Err(SpecError::Invalid("blocks per stage must be >= 1".into()));
        }
        let stage_stride = if s > 0 && remaining > 0 {
            remaining -= 1;
            2
        } else {
            1
        };
        for b in 0..blocks {
            layers.push(LayerDef {
                name: format!("res{}_{}", s + 1, b + 1),
                spec: LayerSpec::Residual {
                    out_channels: width,
                    stride: if b == 0 { stage_stride } else { 1 },
                },
            });
        }
    }
    let spec = NetworkSpec {
        name: format!(
            "backbone{}x{}",
            config.input_size,
            config.stage_channel_widths.len()
        ),
        input_shape: (3, config.input_size, config.input_size),
        layers,
    };
    let (_, h, w) = spec.output_dim()?;
    let expect = config.input_size / config.downsample_factor;
    if h != expect || w != expect {
        return Err(SpecError::Invalid(format!(
            "realized grid {h}x{w} does not match input/downsample = {expect}"
        )));
    }
    Ok(spec)
}

/// Draw from N(0, sqrt(2 / fan_in)) via Box-Muller; He-style fan-in scaling.
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let u1: f64 = loop {
            let u: f64 = rng.gen();
            if u > 1e-300 {
                break u;
            }
        };
        let u2: f64 = rng.gen();
        *v = std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
    t
}

/// Two 3x3 BN convolutions with a shortcut; ReLU after the merge.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub projection: Option<ConvLayer>,
}

#[derive(Debug)]
pub struct ResidualCache {
    conv1: ConvCache,
    conv2: ConvCache,
    projection: Option<ConvCache>,
    relu_mask: Vec<bool>,
}

impl ResidualBlock {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let conv1 = ConvLayer::new(
            in_channels,
            out_channels,
            (3, 3),
            stride,
            1,
            true,
            Activation::Relu,
        );
        let conv2 = ConvLayer::new(
            out_channels,
            out_channels,
            (3, 3),
            1,
            1,
            true,
            Activation::None,
        );
        let projection = if in_channels != out_channels || stride != 1 {
            Some(ConvLayer::new(
                in_channels,
                out_channels,
                (1, 1),
                stride,
                0,
                true,
                Activation::None,
            ))
        } else {
            None
        };
        Self {
            conv1,
            conv2,
            projection,
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        for conv in [&mut self.conv1, &mut self.conv2]
            .into_iter()
            .chain(self.projection.as_mut())
        {
            let (kh, kw) = conv.kernel_size();
            let fan_in = conv.in_channels() * kh * kw;
            conv.kernel = he_normal(rng, conv.kernel.shape(), fan_in);
        }
    }

    pub fn learnable_count(&self) -> usize {
        self.conv1.learnable_count()
            + self.conv2.learnable_count()
            + self.projection.as_ref().map_or(0, |p| p.learnable_count())
    }

    pub fn forward_train(&mut self, input: &Tensor) -> Result<(Tensor, ResidualCache), ShapeError> {
        let (mid, c1) = self.conv1.forward_train(input)?;
        let (main, c2) = self.conv2.forward_train(&mid)?;
        let (shortcut, cp) = match &mut self.projection {
            Some(p) => {
                let (s, c) = p.forward_train(input)?;
                (s, Some(c))
            }
            None => (input.clone(), None),
        };
        let mut out = main;
        out.add_assign(&shortcut)?;
        let mut mask = vec![false; out.numel()];
        for (v, m) in out.data_mut().iter_mut().zip(mask.iter_mut()) {
            if *v > 0.0 {
                *m = true;
            } else {
                *v = 0.0;
            }
        }
        Ok((
            out,
            ResidualCache {
                conv1: c1,
                conv2: c2,
                projection: cp,
                relu_mask: mask,
            },
        ))
    }

    pub fn forward_infer(&self, input: &Tensor) -> Result<Tensor, ShapeError> {
        let mid = self.conv1.forward_infer(input)?;
        let main = self.conv2.forward_infer(&mid)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward_infer(input)?,
            None => input.clone(),
        };
        let mut out = main;
        out.add_assign(&shortcut)?;
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        cache: &ResidualCache,
        grad_out: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>), ShapeError> {
        let mut g = grad_out.clone();
        for (v, &m) in g.data_mut().iter_mut().zip(cache.relu_mask.iter()) {
            if !m {
                *v = 0.0;
            }
        }
        let (gmid, g2) = self.conv2.backward(&cache.conv2, &g)?;
        let (mut gin, g1) = self.conv1.backward(&cache.conv1, &gmid)?;
        let mut grads: Vec<Tensor> = Vec::new();
        let push = |grads: &mut Vec<Tensor>, g: crate::nn::ConvGrads| {
            grads.push(g.kernel);
            grads.push(g.bias);
            if let Some(s) = g.bn_scale {
                grads.push(s);
            }
            if let Some(s) = g.bn_shift {
                grads.push(s);
            }
        };
        push(&mut grads, g1);
        push(&mut grads, g2);
        match (&self.projection, &cache.projection) {
            (Some(p), Some(cp)) => {
                let (gproj_in, gp) = p.backward(cp, &g)?;
                gin.add_assign(&gproj_in)?;
                push(&mut grads, gp);
            }
            (None, None) => {
                gin.add_assign(&g)?;
            }
            _ => unreachable!("projection presence must match its cache"),
        }
        Ok((gin, grads))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        if let Some(p) = &self.projection {
            v.extend(p.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        if let Some(p) = &mut self.projection {
            v.extend(p.params_mut());
        }
        v
    }

    pub fn state_tensors(&self) -> Vec<&Tensor> {
        let mut v = self.conv1.state_tensors();
        v.extend(self.conv2.state_tensors());
        if let Some(p) = &self.projection {
            v.extend(p.state_tensors());
        }
        v
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.conv1.state_tensors_mut();
        v.extend(self.conv2.state_tensors_mut());
        if let Some(p) = &mut self.projection {
            v.extend(p.state_tensors_mut());
        }
        v
    }
}

#[derive(Clone)]
enum RuntimeKind {
    Conv(ConvLayer),
    Pool { size: usize, stride: usize },
    Fc(FcLayer),
    Softmax,
    Residual(ResidualBlock),
}

#[derive(Clone)]
struct RuntimeLayer {
    name: String,
    kind: RuntimeKind,
}

/// Per-layer forward caches for one training batch.
pub struct NetCache {
    caches: Vec<CacheKind>,
}

enum CacheKind {
    Conv(ConvCache),
    Pool(PoolCache),
    Fc(FcCache),
    Residual(ResidualCache),
}

/// Gradients for every learnable tensor, aligned with [`Network::parameters`].
pub struct NetGrads {
    grads: Vec<Tensor>,
}

impl NetGrads {
    pub fn flat(&self) -> Vec<&Tensor> {
        self.grads.iter().collect()
    }

    /// Sum of gradients, used to accumulate over loss terms.
    pub fn add_assign(&mut self, other: &NetGrads) -> Result<(), ShapeError> {
        if self.grads.len() != other.grads.len() {
            return Err(ShapeError::InvalidGeometry(
                "gradient list length mismatch".into(),
            ));
        }
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut() {
            g.scale(s);
        }
    }
}

/// Executable network: the spec plus its parameter tensors.
#[derive(Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    layers: Vec<RuntimeLayer>,
}

impl Network {
    /// Builds parameter tensors for `spec`, He-initialized from `rng`.
    pub fn initialize<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Self, SpecError> {
        let chain = spec.shape_chain()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let (mut c, mut h, mut w) = spec.input_shape;
        for (def, (_, out_shape)) in spec.layers.iter().zip(chain.iter()) {
            let kind = match &def.spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    batch_norm,
                    activation,
                } => {
                    let mut conv = ConvLayer::new(
                        c,
                        *out_channels,
                        *kernel,
                        *stride,
                        *padding,
                        *batch_norm,
                        *activation,
                    );
                    let fan_in = c * kernel.0 * kernel.1;
                    conv.kernel = he_normal(rng, conv.kernel.shape(), fan_in);
                    RuntimeKind::Conv(conv)
                }
                LayerSpec::MaxPool { size, stride } => RuntimeKind::Pool {
                    size: *size,
                    stride: *stride,
                },
                LayerSpec::FullyConnected { out_features } => {
                    let in_features = c * h * w;
                    let mut fc = FcLayer::new(in_features, *out_features);
                    fc.weights = he_normal(rng, fc.weights.shape(), in_features);
                    RuntimeKind::Fc(fc)
                }
                LayerSpec::Softmax => RuntimeKind::Softmax,
                LayerSpec::Residual {
                    out_channels,
                    stride,
                } => {
                    let mut block = ResidualBlock::new(c, *out_channels, *stride);
                    block.init(rng);
                    RuntimeKind::Residual(block)
                }
            };
            layers.push(RuntimeLayer {
                name: def.name.clone(),
                kind,
            });
            (c, h, w) = *out_shape;
        }
        Ok(Self { spec, layers })
    }

    pub fn learnable_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// Learnable tensors in layer order; the order is stable across calls and
    /// matches [`NetGrads::flat`].
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for layer in &self.layers {
            match &layer.kind {
                RuntimeKind::Conv(c) => v.extend(c.params()),
                RuntimeKind::Fc(f) => {
                    v.push(&f.weights);
                    v.push(&f.bias);
                }
                RuntimeKind::Residual(r) => v.extend(r.params()),
                RuntimeKind::Pool { .. } | RuntimeKind::Softmax => {}
            }
        }
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.kind {
                RuntimeKind::Conv(c) => v.extend(c.params_mut()),
                RuntimeKind::Fc(f) => {
                    v.push(&mut f.weights);
                    v.push(&mut f.bias);
                }
                RuntimeKind::Residual(r) => v.extend(r.params_mut()),
                RuntimeKind::Pool { .. } | RuntimeKind::Softmax => {}
            }
        }
        v
    }

    /// Learnable tensors plus BN running statistics, in checkpoint order.
    pub fn state_tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for layer in &self.layers {
            match &layer.kind {
                RuntimeKind::Conv(c) => v.extend(c.state_tensors()),
                RuntimeKind::Fc(f) => {
                    v.push(&f.weights);
                    v.push(&f.bias);
                }
                RuntimeKind::Residual(r) => v.extend(r.state_tensors()),
                RuntimeKind::Pool { .. } | RuntimeKind::Softmax => {}
            }
        }
        v
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.kind {
                RuntimeKind::Conv(c) => v.extend(c.state_tensors_mut()),
                RuntimeKind::Fc(f) => {
                    v.push(&mut f.weights);
                    v.push(&mut f.bias);
                }
                RuntimeKind::Residual(r) => v.extend(r.state_tensors_mut()),
                RuntimeKind::Pool { .. } | RuntimeKind::Softmax => {}
            }
        }
        v
    }

    /// Training forward pass. Runs every layer except a trailing softmax and
    /// returns the logits; pair with `softmax_cross_entropy` (classifier) or
    /// the detection loss.
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<(Tensor, NetCache), SpecError> {
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let wrap = |source| SpecError::Layer {
                layer: layer.name.clone(),
                source,
            };
            match &mut layer.kind {
                RuntimeKind::Conv(c) => {
                    let (out, cache) = c.forward_train(&x).map_err(wrap)?;
                    x = out;
                    caches.push(CacheKind::Conv(cache));
                }
                RuntimeKind::Pool { size, stride } => {
                    let (out, cache) = maxpool_forward(&x, *size, *stride).map_err(wrap)?;
                    x = out;
                    caches.push(CacheKind::Pool(cache));
                }
                RuntimeKind::Fc(f) => {
                    let (out, cache) = f.forward(&x).map_err(wrap)?;
                    x = out;
                    caches.push(CacheKind::Fc(cache));
                }
                RuntimeKind::Softmax => break,
                RuntimeKind::Residual(r) => {
                    let (out, cache) = r.forward_train(&x).map_err(wrap)?;
                    x = out;
                    caches.push(CacheKind::Residual(cache));
                }
            }
        }
        Ok((x, NetCache { caches }))
    }

    /// Inference pass over the full layer chain, including any softmax.
    pub fn forward_infer(&self, batch: &Tensor) -> Result<Tensor, SpecError> {
        Ok(self.forward_collect(batch)?.0)
    }

    /// Inference pass that also returns every intermediate activation keyed
    /// by layer name, for feature-map taps and shape audits.
    pub fn forward_collect(
        &self,
        batch: &Tensor,
    ) -> Result<(Tensor, Vec<(String, Tensor)>), SpecError> {
        let mut x = batch.clone();
        let mut taps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let wrap = |source| SpecError::Layer {
                layer: layer.name.clone(),
                source,
            };
            x = match &layer.kind {
                RuntimeKind::Conv(c) => c.forward_infer(&x).map_err(wrap)?,
                RuntimeKind::Pool { size, stride } => {
                    maxpool_forward(&x, *size, *stride).map_err(wrap)?.0
                }
                RuntimeKind::Fc(f) => f.forward(&x).map_err(wrap)?.0,
                RuntimeKind::Softmax => {
                    let batch_n = x.shape()[0];
                    let per = x.numel() / batch_n;
                    let flat = x.reshape(&[batch_n, per]).map_err(wrap)?;
                    softmax(&flat).map_err(wrap)?
                }
                RuntimeKind::Residual(r) => r.forward_infer(&x).map_err(wrap)?,
            };
            taps.push((layer.name.clone(), x.clone()));
        }
        Ok((x, taps))
    }

    /// Gradients of a scalar loss for every learnable tensor, given the
    /// gradient at the output produced by [`Network::forward_train`].
    pub fn backward(&self, cache: &NetCache, grad_out: &Tensor) -> Result<(Tensor, NetGrads), SpecError> {
        let mut g = grad_out.clone();
        let mut rev_grads: Vec<Vec<Tensor>> = Vec::with_capacity(cache.caches.len());
        for (layer, lcache) in self
            .layers
            .iter()
            .zip(cache.caches.iter())
            .rev()
        {
            let wrap = |source| SpecError::Layer {
                layer: layer.name.clone(),
                source,
            };
            match (&layer.kind, lcache) {
                (RuntimeKind::Conv(c), CacheKind::Conv(cc)) => {
                    let (gin, grads) = c.backward(cc, &g).map_err(wrap)?;
                    g = gin;
                    rev_grads.push(grads.flat().into_iter().cloned().collect());
                }
                (RuntimeKind::Pool { .. }, CacheKind::Pool(pc)) => {
                    g = maxpool_backward(pc, &g).map_err(wrap)?;
                    rev_grads.push(Vec::new());
                }
                (RuntimeKind::Fc(f), CacheKind::Fc(fc)) => {
                    let (gin, grads) = f.backward(fc, &g).map_err(wrap)?;
                    g = gin;
                    rev_grads.push(vec![grads.weights, grads.bias]);
                }
                (RuntimeKind::Residual(r), CacheKind::Residual(rc)) => {
                    let (gin, grads) = r.backward(rc, &g).map_err(wrap)?;
                    g = gin;
                    rev_grads.push(grads);
                }
                _ => {
                    return Err(SpecError::Invalid(format!(
                        "cache does not match layer {}",
                        layer.name
                    )))
                }
            }
        }
        let mut grads = Vec::new();
        for layer_grads in rev_grads.into_iter().rev() {
            grads.extend(layer_grads);
        }
        Ok((g, NetGrads { grads }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn classifier_parameter_golden_table() {
        let spec = build_classifier(9).unwrap();
        let counts = spec.layer_param_counts().unwrap();
        let expected = [
            ("conv1", 2496),
            ("conv2", 25696),
            ("pool1", 0),
            ("conv3", 51392),
            ("conv4", 102592),
            ("pool2", 0),
            ("conv5", 153888),
            ("conv6", 230688),
            ("pool3", 0),
            ("conv7", 307584),
            ("conv8", 409984),
            ("pool4", 0),
            ("conv9", 819968),
            ("conv10", 525824),
            ("fc1", 4617),
            ("softmax", 0),
        ];
        assert_eq!(counts.len(), expected.len());
        for ((name, count), (ename, ecount)) in counts.iter().zip(expected.iter()) {
            assert_eq!(name, ename);
            assert_eq!(count, ecount, "layer {name}");
        }
        assert_eq!(spec.total_parameters().unwrap(), 2_634_729);
    }

    #[test]
    fn classifier_shape_golden_table() {
        let spec = build_classifier(9).unwrap();
        let chain = spec.shape_chain().unwrap();
        let expected = [
            ("conv1", (32, 220, 220)),
            ("conv2", (32, 216, 216)),
            ("pool1", (32, 108, 108)),
            ("conv3", (64, 104, 104)),
            ("conv4", (64, 100, 100)),
            ("pool2", (64, 50, 50)),
            ("conv5", (96, 46, 46)),
            ("conv6", (96, 42, 42)),
            ("pool3", (96, 21, 21)),
            ("conv7", (128, 17, 17)),
            ("conv8", (128, 13, 13)),
            ("pool4", (128, 6, 6)),
            ("conv9", (256, 2, 2)),
            ("conv10", (512, 1, 1)),
            ("fc1", (9, 1, 1)),
            ("softmax", (9, 1, 1)),
        ];
        for ((name, shape), (ename, eshape)) in chain.iter().zip(expected.iter()) {
            assert_eq!(name, ename);
            assert_eq!(shape, eshape, "layer {name}");
        }
    }

    #[test]
    fn binary_classifier_differs_only_in_fc() {
        let nine = build_classifier(9).unwrap();
        let two = build_classifier(2).unwrap();
        let c9 = nine.layer_param_counts().unwrap();
        let c2 = two.layer_param_counts().unwrap();
        for ((n9, v9), (n2, v2)) in c9.iter().zip(c2.iter()) {
            assert_eq!(n9, n2);
            if n9 == "fc1" {
                assert_eq!(*v2, 512 * 2 + 2);
            } else {
                assert_eq!(v9, v2);
            }
        }
    }

    #[test]
    fn too_few_classes_rejected() {
        assert!(build_classifier(1).is_err());
    }

    #[test]
    fn empty_network_counts_zero() {
        let spec = NetworkSpec {
            name: "empty".into(),
            input_shape: (3, 8, 8),
            layers: Vec::new(),
        };
        assert_eq!(spec.total_parameters().unwrap(), 0);
    }

    #[test]
    fn head_filter_examples() {
        assert_eq!(build_detection_head(1, 90, 14).unwrap().0.filters, 540);
        assert_eq!(build_detection_head(1, 1, 14).unwrap().0.filters, 6);
        assert_eq!(build_detection_head(20, 5, 14).unwrap().0.filters, 125);
        assert!(build_detection_head(0, 5, 14).is_err());
    }

    #[test]
    fn default_backbone_grid_is_fourteen() {
        let spec = build_backbone(&BackboneConfig::default()).unwrap();
        let (_, h, w) = spec.output_dim().unwrap();
        assert_eq!((h, w), (14, 14));
    }

    #[test]
    fn single_stage_stride_one_preserves_dims() {
        let cfg = BackboneConfig {
            stage_channel_widths: vec![8],
            blocks_per_stage: vec![1],
            downsample_factor: 1,
            input_size: 32,
        };
        let spec = build_backbone(&cfg).unwrap();
        let (_, h, w) = spec.output_dim().unwrap();
        assert_eq!((h, w), (32, 32));
    }

    #[test]
    fn zeroed_residual_block_is_identity_on_nonnegative_input() {
        let mut block = ResidualBlock::new(4, 4, 1);
        // zero conv weights, BN shift 0/scale 1 on zero activations gives zero
        let input = Tensor::filled(&[1, 4, 6, 6], 0.5);
        let out = block.forward_infer(&input).unwrap();
        assert_eq!(out.data(), input.data());
        // forward_train path keeps the shortcut as well
        let (out, _) = block.forward_train(&input).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn classifier_forward_produces_normalized_probabilities() {
        let spec = build_compact_classifier(64, 6, &[2, 2, 4, 4, 4, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Network::initialize(spec, &mut rng).unwrap();
        let out = net.forward_infer(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(out.shape(), &[1, 6]);
        let sum: f64 = out.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(out.is_all_finite());
    }

    #[test]
    fn batch_dimension_is_preserved() {
        let spec = build_compact_classifier(64, 3, &[2, 2, 2, 2, 2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::initialize(spec, &mut rng).unwrap();
        for b in [1usize, 2, 5] {
            let out = net.forward_infer(&Tensor::zeros(&[b, 3, 64, 64])).unwrap();
            assert_eq!(out.shape()[0], b);
        }
    }

    #[test]
    fn runtime_activations_match_inferred_shapes() {
        let spec = build_classifier(9).unwrap();
        let chain = spec.shape_chain().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::initialize(spec, &mut rng).unwrap();
        let (_, taps) = net.forward_collect(&Tensor::zeros(&[1, 3, 224, 224])).unwrap();
        assert_eq!(taps.len(), chain.len());
        for ((tname, tensor), (cname, (c, h, w))) in taps.iter().zip(chain.iter()) {
            assert_eq!(tname, cname);
            let expect: usize = c * h * w;
            assert_eq!(tensor.numel(), expect, "layer {tname}");
        }
    }

    #[test]
    fn config_text_round_trip() {
        let spec = build_backbone(&BackboneConfig {
            stage_channel_widths: vec![8, 16],
            blocks_per_stage: vec![1, 2],
            downsample_factor: 4,
            input_size: 64,
        })
        .unwrap();
        let text = spec.to_config_text();
        let parsed = NetworkSpec::from_config_text(&text).unwrap();
        assert_eq!(spec, parsed);

        let cls = build_classifier(9).unwrap();
        let parsed = NetworkSpec::from_config_text(&cls.to_config_text()).unwrap();
        assert_eq!(cls, parsed);
    }

    #[test]
    fn truncation_taps_a_named_layer() {
        let spec = build_classifier(9).unwrap();
        let cut = spec.truncated_at("conv6").unwrap();
        assert_eq!(cut.layers.last().unwrap().name, "conv6");
        let (_, h, w) = cut.output_dim().unwrap();
        assert_eq!((h, w), (42, 42));
        assert!(spec.truncated_at("conv99").is_none());
    }
}
