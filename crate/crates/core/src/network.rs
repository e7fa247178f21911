//! Pruned U-Net generators, PatchGAN discriminators, parameter state and
//! checkpoints.
//!
//! A depth-`D` generator has `2D - 1` layers. Layers `1..D` halve the
//! resolution, layer `D` is the bottleneck (down and back up once), and
//! layer `D + j` concatenates layer `D + j - 1` with encoder layer `D - j`
//! before doubling. `D = 8` is the full-size network.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_on_tape, AttentionConfig};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::kernels::INSTANCE_NORM_EPS;
use crate::tensor::{Activation, ConvParams, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const FULL_DEPTH: usize = 8;
pub const DISCRIMINATOR_DEPTH: usize = 5;
const BASE_FILTERS: usize = 64;
const MAX_DOUBLINGS: u32 = 3;

/// Channel multiplier `num / den` in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WidthScale {
    pub num: u32,
    pub den: u32,
}

impl WidthScale {
    pub const FULL: WidthScale = WidthScale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        let s = WidthScale { num, den };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num == 0 || self.den == 0 || self.num > self.den {
            return Err(Error::Network(format!(
                "width scale {}/{} outside (0, 1]",
                self.num, self.den
            )));
        }
        Ok(())
    }

    /// `ceil(filters * num / den)`.
    pub fn apply(&self, filters: usize) -> usize {
        let (n, d) = (self.num as usize, self.den as usize);
        (filters * n).div_ceil(d)
    }
}

impl fmt::Display for WidthScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for WidthScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Network(format!("cannot parse width scale '{s}'"));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        WidthScale::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Generator,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// `(L_i, M) -> L_o`.
    Lbp,
    /// `(I_i, L_o, M) -> I_o`.
    Inpaint,
}

impl Role {
    pub fn in_channels(self) -> usize {
        match self {
            Role::Lbp => 2,
            Role::Inpaint => 5,
        }
    }

    pub fn out_channels(self) -> usize {
        match self {
            Role::Lbp => 1,
            Role::Inpaint => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOp {
    Activation(Activation),
    Conv(ConvParams),
    Deconv(ConvParams),
    InstanceNorm,
}

impl LayerOp {
    fn param_stem(&self) -> Option<&'static str> {
        match self {
            LayerOp::Conv(_) => Some("conv"),
            LayerOp::Deconv(_) => Some("deconv"),
            _ => None,
        }
    }
}

/// One row of a layer table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// 1-based.
    pub id: usize,
    /// When set, the layer input is `Cat(previous layer, this layer)`.
    pub concat_source: Option<usize>,
    /// Spatial attention on the (concatenated) input.
    pub attention: bool,
    pub ops: Vec<LayerOp>,
}

impl LayerSpec {
    pub fn conv(&self) -> Option<ConvParams> {
        self.ops.iter().find_map(|op| match op {
            LayerOp::Conv(p) => Some(*p),
            _ => None,
        })
    }

    pub fn deconv(&self) -> Option<ConvParams> {
        self.ops.iter().find_map(|op| match op {
            LayerOp::Deconv(p) => Some(*p),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub role: Option<Role>,
    pub in_channels: usize,
    pub width_scale: WidthScale,
    pub layers: Vec<LayerSpec>,
}

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: [usize; 4],
}

pub fn param_name(layer: usize, stem: &str, part: &str) -> String {
    format!("layer{layer:02}.{stem}.{part}")
}

impl NetworkSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: NetworkSpec = serde_json::from_str(s)
            .map_err(|e| Error::Network(format!("bad spec manifest: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn layer(&self, id: usize) -> Option<&LayerSpec> {
        id.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    pub fn attention_layer(&self) -> Option<usize> {
        self.layers.iter().find(|l| l.attention).map(|l| l.id)
    }

    /// Number of stride-2 halvings, which the input sides must be divisible by.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| l.conv().is_some()).count()
    }

    pub fn out_channels(&self) -> usize {
        self.layer_channels()
            .ok()
            .and_then(|c| c.last().copied())
            .unwrap_or(0)
    }

    /// Output channel count of every layer.
    pub fn layer_channels(&self) -> Result<Vec<usize>> {
        self.validate_structure()?;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut c = self.layer_input_channels(l, &out)?;
            for op in &l.ops {
                if let LayerOp::Conv(p) | LayerOp::Deconv(p) = op {
                    c = p.filters;
                }
            }
            out.push(c);
        }
        Ok(out)
    }

    fn layer_input_channels(&self, l: &LayerSpec, prev: &[usize]) -> Result<usize> {
        let mut c = if l.id == 1 {
            self.in_channels
        } else {
            prev[l.id - 2]
        };
        if let Some(s) = l.concat_source {
            c += prev[s - 1];
        }
        Ok(c)
    }

    pub fn param_shapes(&self) -> Result<Vec<ParamShape>> {
        self.validate_structure()?;
        let mut shapes = Vec::new();
        let mut outs: Vec<usize> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut c = self.layer_input_channels(l, &outs)?;
            for op in &l.ops {
                let (p, stem, weight) = match op {
                    LayerOp::Conv(p) => (p, "conv", [p.filters, c, p.kernel, p.kernel]),
                    LayerOp::Deconv(p) => (p, "deconv", [c, p.filters, p.kernel, p.kernel]),
                    _ => continue,
                };
                shapes.push(ParamShape {
                    name: param_name(l.id, stem, "weight"),
                    shape: weight,
                });
                shapes.push(ParamShape {
                    name: param_name(l.id, stem, "bias"),
                    shape: [1, p.filters, 1, 1],
                });
                c = p.filters;
            }
            outs.push(c);
        }
        Ok(shapes)
    }

    fn validate_structure(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Network("in_channels must be positive".into()));
        }
        self.width_scale.validate()?;
        if self.layers.is_empty() {
            return Err(Error::Network("network has no layers".into()));
        }
        let mut attention = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if l.id != i + 1 {
                return Err(Error::Network(format!(
                    "layer ids must run 1..n, found {} at position {}",
                    l.id,
                    i + 1
                )));
            }
            if let Some(s) = l.concat_source {
                if s == 0 || s >= l.id || l.id == 1 {
                    return Err(Error::Network(format!(
                        "layer {} concatenates layer {s}, which is not an earlier layer",
                        l.id
                    )));
                }
            }
            if l.attention {
                attention += 1;
                if self.kind != NetworkKind::Generator {
                    return Err(Error::Network(
                        "attention is only allowed in a generator".into(),
                    ));
                }
            }
            let mut stems = Vec::new();
            for op in &l.ops {
                if let LayerOp::Conv(p) | LayerOp::Deconv(p) = op {
                    p.validate()?;
                }
                if let Some(stem) = op.param_stem() {
                    if stems.contains(&stem) {
                        return Err(Error::Network(format!(
                            "layer {} has more than one {stem}",
                            l.id
                        )));
                    }
                    stems.push(stem);
                }
            }
        }
        if attention > 1 {
            return Err(Error::Network(format!(
                "{attention} attention layers; at most one is allowed"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.param_shapes().map(|_| ())
    }

    /// Output `(C, H, W)` of every layer for an `h x w` input.
    pub fn infer_shapes(&self, h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
        self.validate_structure()?;
        self.check_resolution(h, w)?;
        let mut out: Vec<[usize; 3]> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut s = if l.id == 1 {
                [self.in_channels, h, w]
            } else {
                out[l.id - 2]
            };
            if let Some(src) = l.concat_source {
                let o = out[src - 1];
                if o[1] != s[1] || o[2] != s[2] {
                    return Err(Error::Network(format!(
                        "layer {} concatenates {}x{} with {}x{}",
                        l.id, s[1], s[2], o[1], o[2]
                    )));
                }
                s[0] += o[0];
            }
            for op in &l.ops {
                let next = match op {
                    LayerOp::Conv(p) => p
                        .conv_out(s[1])
                        .zip(p.conv_out(s[2]))
                        .map(|(a, b)| [p.filters, a, b]),
                    LayerOp::Deconv(p) => p
                        .deconv_out(s[1])
                        .zip(p.deconv_out(s[2]))
                        .map(|(a, b)| [p.filters, a, b]),
                    _ => Some(s),
                };
                s = next.ok_or_else(|| {
                    Error::Network(format!(
                        "layer {} cannot process a {}x{} input",
                        l.id, s[1], s[2]
                    ))
                })?;
            }
            out.push(s);
        }
        Ok(out)
    }

    fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        if self.kind == NetworkKind::Generator {
            let unit = 1usize << self.depth();
            if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
                return Err(Error::Network(format!(
                    "resolution {h}x{w} is not divisible by 2^{} = {unit}",
                    self.depth()
                )));
            }
        }
        Ok(())
    }
}

/// Generator layout knobs. [`GeneratorOptions::full`] is the full-size table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorOptions {
    pub role: Role,
    pub depth: usize,
    pub width_scale: WidthScale,
    /// `None` disables attention.
    pub attention_layer: Option<usize>,
}

impl GeneratorOptions {
    pub fn full(role: Role) -> Self {
        Self::with_depth(role, FULL_DEPTH, WidthScale::FULL)
    }

    /// Depth 5 at 1/8 width, for 64x64 inputs.
    pub fn desk(role: Role) -> Self {
        Self::with_depth(role, 5, WidthScale { num: 1, den: 8 })
    }

    /// Attention, for the inpainting role, on the layer joined with encoder layer 3.
    pub fn with_depth(role: Role, depth: usize, width_scale: WidthScale) -> Self {
        let attention_layer = match role {
            Role::Inpaint => Some(default_attention_layer(depth)),
            Role::Lbp => None,
        };
        GeneratorOptions {
            role,
            depth,
            width_scale,
            attention_layer,
        }
    }
}

/// `2D - min(3, D - 1)`; 13 at full depth.
pub fn default_attention_layer(depth: usize) -> usize {
    2 * depth - 3.min(depth.saturating_sub(1))
}

fn encoder_filters(layer: usize) -> usize {
    BASE_FILTERS << (layer as u32 - 1).min(MAX_DOUBLINGS)
}

fn k4s2p1(filters: usize) -> ConvParams {
    ConvParams::new(filters, 4, 2, 1)
}

pub fn generator_spec(opts: &GeneratorOptions) -> Result<NetworkSpec> {
    let d = opts.depth;
    if d < 2 {
        return Err(Error::Network(format!(
            "generator depth must be at least 2, got {d}"
        )));
    }
    let sc = |f: usize| opts.width_scale.apply(f);
    let lrelu = LayerOp::Activation(Activation::LeakyRelu);
    let relu = LayerOp::Activation(Activation::Relu);
    // Deconv of layer D + j restores the channels of encoder layer D - j - 1.
    let deconv_filters = |j: usize| {
        if j + 1 < d {
            sc(encoder_filters(d - j - 1))
        } else {
            opts.role.out_channels()
        }
    };
    let mut layers = Vec::with_capacity(2 * d - 1);
    layers.push(LayerSpec {
        id: 1,
        concat_source: None,
        attention: false,
        ops: vec![LayerOp::Conv(k4s2p1(sc(encoder_filters(1))))],
    });
    for i in 2..d {
        layers.push(LayerSpec {
            id: i,
            concat_source: None,
            attention: false,
            ops: vec![
                lrelu,
                LayerOp::Conv(k4s2p1(sc(encoder_filters(i)))),
                LayerOp::InstanceNorm,
            ],
        });
    }
    layers.push(LayerSpec {
        id: d,
        concat_source: None,
        attention: false,
        ops: vec![
            lrelu,
            LayerOp::Conv(k4s2p1(sc(encoder_filters(d)))),
            relu,
            LayerOp::Deconv(k4s2p1(deconv_filters(0))),
            LayerOp::InstanceNorm,
        ],
    });
    for j in 1..d {
        let last = j + 1 == d;
        let tail = if last {
            LayerOp::Activation(Activation::Tanh)
        } else {
            LayerOp::InstanceNorm
        };
        layers.push(LayerSpec {
            id: d + j,
            concat_source: Some(d - j),
            attention: opts.attention_layer == Some(d + j),
            ops: vec![relu, LayerOp::Deconv(k4s2p1(deconv_filters(j))), tail],
        });
    }
    if let Some(a) = opts.attention_layer {
        if a <= d || a >= 2 * d {
            return Err(Error::Network(format!(
                "attention layer {a} is not a decoder layer ({}..={})",
                d + 1,
                2 * d - 1
            )));
        }
    }
    let spec = NetworkSpec {
        kind: NetworkKind::Generator,
        role: Some(opts.role),
        in_channels: opts.role.in_channels(),
        width_scale: opts.width_scale,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorOptions {
    pub in_channels: usize,
    pub depth: usize,
    pub width_scale: WidthScale,
}

impl DiscriminatorOptions {
    pub fn new(in_channels: usize, width_scale: WidthScale) -> Self {
        DiscriminatorOptions {
            in_channels,
            depth: DISCRIMINATOR_DEPTH,
            width_scale,
        }
    }
}

pub fn discriminator_spec(opts: &DiscriminatorOptions) -> Result<NetworkSpec> {
    let d = opts.depth;
    if d < 2 {
        return Err(Error::Network(format!(
            "discriminator depth must be at least 2, got {d}"
        )));
    }
    let lrelu = LayerOp::Activation(Activation::LeakyRelu);
    let mut layers = Vec::with_capacity(d);
    for i in 1..=d {
        let ops = if i == 1 {
            vec![LayerOp::Conv(k4s2p1(
                opts.width_scale.apply(encoder_filters(1)),
            ))]
        } else if i < d {
            vec![
                lrelu,
                LayerOp::Conv(k4s2p1(opts.width_scale.apply(encoder_filters(i)))),
                LayerOp::InstanceNorm,
            ]
        } else {
            vec![
                lrelu,
                LayerOp::Conv(k4s2p1(1)),
                LayerOp::Activation(Activation::Sigmoid),
            ]
        };
        layers.push(LayerSpec {
            id: i,
            concat_source: None,
            attention: false,
            ops,
        });
    }
    let spec = NetworkSpec {
        kind: NetworkKind::Discriminator,
        role: None,
        in_channels: opts.in_channels,
        width_scale: opts.width_scale,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Full-depth generator with freshly initialised parameters.
pub fn build_generator(
    role: Role,
    width_scale: WidthScale,
    seed: u64,
) -> Result<(NetworkSpec, ModelState)> {
    let spec = generator_spec(&GeneratorOptions::with_depth(role, FULL_DEPTH, width_scale))?;
    let state = ModelState::init(&spec, seed)?;
    Ok((spec, state))
}

/// Five-layer discriminator with freshly initialised parameters.
pub fn build_discriminator(
    width_scale: WidthScale,
    in_channels: usize,
    seed: u64,
) -> Result<(NetworkSpec, ModelState)> {
    let spec = discriminator_spec(&DiscriminatorOptions::new(in_channels, width_scale))?;
    let state = ModelState::init(&spec, seed)?;
    Ok((spec, state))
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelState {
    params: BTreeMap<String, Tensor>,
}

impl ModelState {
    /// Weights from `N(0, 0.02^2)`, zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for p in spec.param_shapes()? {
            let t = if p.name.ends_with(".bias") {
                Tensor::zeros(p.shape)
            } else {
                Tensor::randn(p.shape, INIT_STD, &mut rng)
            };
            params.insert(p.name, t);
        }
        Ok(ModelState { params })
    }

    pub fn from_params(spec: &NetworkSpec, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let s = ModelState { params };
        s.validate_against(spec)?;
        Ok(s)
    }

    pub fn validate_against(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes = spec.param_shapes()?;
        for p in &shapes {
            let t = self
                .params
                .get(&p.name)
                .ok_or_else(|| Error::Network(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.shape {
                return Err(Error::Network(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Network(format!(
                    "parameter {} is not finite",
                    p.name
                )));
            }
        }
        if self.params.len() != shapes.len() {
            let extra = self
                .params
                .keys()
                .find(|k| !shapes.iter().any(|p| &p.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Network(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Put every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Handles already on a tape, keyed by parameter name.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Network(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients keyed by parameter name; zero where none reached a parameter.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Network output plus every raw convolution / deconvolution output in
/// execution order.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub output: Var,
    pub features: Vec<Var>,
}

/// Run the network on the tape. `masks` feeds the attention layer and must be
/// empty exactly when the network has none.
pub fn forward(
    tape: &mut Tape,
    spec: &NetworkSpec,
    params: &BoundParams,
    input: Var,
    masks: &[Mask],
    attention: &AttentionConfig,
) -> Result<ForwardOutput> {
    let shape = tape.value(input).shape();
    if shape[1] != spec.in_channels {
        return Err(Error::Dimension {
            op: "forward",
            axis: "input channels",
            expected: spec.in_channels,
            actual: shape[1],
        });
    }
    spec.check_resolution(shape[2], shape[3])?;
    match (spec.attention_layer(), masks.is_empty()) {
        (Some(l), true) => {
            return Err(Error::Network(format!(
                "layer {l} has attention but no mask was given"
            )))
        }
        (None, false) => {
            return Err(Error::Network(
                "mask given to a network without attention".into(),
            ))
        }
        _ => {}
    }
    let mut outputs: Vec<Var> = Vec::with_capacity(spec.layers.len());
    let mut features = Vec::new();
    for l in &spec.layers {
        let mut x = if l.id == 1 { input } else { outputs[l.id - 2] };
        if let Some(s) = l.concat_source {
            x = tape.concat(x, outputs[s - 1])?;
        }
        if l.attention {
            x = attend_on_tape(tape, x, masks, attention)?;
        }
        for op in &l.ops {
            x = match *op {
                LayerOp::Activation(kind) => tape.activation(x, kind)?,
                LayerOp::InstanceNorm => tape.instance_norm(x, INSTANCE_NORM_EPS)?,
                LayerOp::Conv(p) => {
                    let w = params.var(&param_name(l.id, "conv", "weight"))?;
                    let b = params.var(&param_name(l.id, "conv", "bias"))?;
                    let y = tape.conv2d(x, w, b, p)?;
                    features.push(y);
                    y
                }
                LayerOp::Deconv(p) => {
                    let w = params.var(&param_name(l.id, "deconv", "weight"))?;
                    let b = params.var(&param_name(l.id, "deconv", "bias"))?;
                    let y = tape.conv_transpose2d(x, w, b, p)?;
                    features.push(y);
                    y
                }
            };
        }
        outputs.push(x);
    }
    Ok(ForwardOutput {
        output: *outputs.last().expect("validated non-empty"),
        features,
    })
}

/// Inference without gradients.
pub fn forward_eval(
    spec: &NetworkSpec,
    state: &ModelState,
    input: &Tensor,
    masks: &[Mask],
    attention: &AttentionConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = state.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let out = forward(&mut tape, spec, &params, x, masks, attention)?;
    Ok(tape.value(out.output).clone())
}

const MAGIC: &[u8; 4] = b"LBPI";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A network plus any auxiliary named tensors (e.g. optimizer moments).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub state: ModelState,
    pub extras: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, state: ModelState) -> Self {
        Checkpoint {
            spec,
            state,
            extras: BTreeMap::new(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.state.validate_against(&self.spec)?;
        if let Some(k) = self.extras.keys().find(|k| self.state.get(k).is_some()) {
            return Err(Error::Checkpoint(format!(
                "extra blob {k} shadows a parameter"
            )));
        }
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let manifest = self.spec.to_json();
        write_len(w, manifest.len())?;
        w.write_all(manifest.as_bytes())?;
        write_len(w, self.state.len() + self.extras.len())?;
        for (name, t) in self.state.iter().chain(self.extras.iter()) {
            write_len(w, name.len())?;
            w.write_all(name.as_bytes())?;
            for d in t.shape() {
                write_len(w, d)?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not an LBPI checkpoint".into()));
        }
        let version = read_u32(r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let n = read_u32(r, "manifest length")? as usize;
        let manifest = read_string(r, n, "manifest")?;
        let spec = NetworkSpec::from_json(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let expected: BTreeMap<String, [usize; 4]> = spec
            .param_shapes()?
            .into_iter()
            .map(|p| (p.name, p.shape))
            .collect();
        let count = read_u32(r, "blob count")?;
        let mut params = BTreeMap::new();
        let mut extras = BTreeMap::new();
        for _ in 0..count {
            let n = read_u32(r, "blob name length")? as usize;
            let name = read_string(r, n, "blob name")?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = read_u32(r, "blob shape")? as usize;
            }
            let len: usize = shape.iter().product();
            let mut bytes = vec![0u8; len * 8];
            read_exact(r, &mut bytes, &name)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::from_vec(shape, data)?;
            match expected.get(&name) {
                Some(&s) if s != shape => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {shape:?}, manifest expects {s:?}"
                    )))
                }
                Some(_) => {
                    params.insert(name, t);
                }
                None => {
                    extras.insert(name, t);
                }
            }
        }
        let state =
            ModelState::from_params(&spec, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint {
            spec,
            state,
            extras,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_len(w: &mut impl Write, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated checkpoint while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, n: usize, what: &str) -> Result<String> {
    let mut b = vec![0u8; n];
    read_exact(r, &mut b, what)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_scale_parse_and_ceil() {
        let s: WidthScale = "1/8".parse().unwrap();
        assert_eq!(s.apply(64), 8);
        assert_eq!(s.apply(1), 1);
        assert_eq!("3/7".parse::<WidthScale>().unwrap().apply(64), 28);
        assert_eq!(s.to_string(), "1/8");
        assert!("2/1".parse::<WidthScale>().is_err());
        assert!("0".parse::<WidthScale>().is_err());
    }

    #[test]
    fn default_attention_layers() {
        assert_eq!(default_attention_layer(8), 13);
        assert_eq!(default_attention_layer(5), 7);
        assert_eq!(default_attention_layer(3), 4);
    }

    #[test]
    fn desk_generator_shapes() {
        let spec = generator_spec(&GeneratorOptions::desk(Role::Inpaint)).unwrap();
        assert_eq!(spec.layers.len(), 9);
        let shapes = spec.infer_shapes(64, 64).unwrap();
        assert_eq!(shapes[4], [64, 4, 4]);
        assert_eq!(*shapes.last().unwrap(), [3, 64, 64]);
        assert!(spec.infer_shapes(48, 64).is_err());
        assert_eq!(spec.attention_layer(), Some(7));
        assert_eq!(spec.layer(7).unwrap().concat_source, Some(3));
    }

    #[test]
    fn attention_must_be_on_decoder() {
        let mut o = GeneratorOptions::desk(Role::Inpaint);
        o.attention_layer = Some(3);
        assert!(generator_spec(&o).is_err());
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = generator_spec(&GeneratorOptions::desk(Role::Inpaint)).unwrap();
        spec.layers[5].attention = true;
        assert!(spec.validate().is_err());
        let mut spec = generator_spec(&GeneratorOptions::desk(Role::Lbp)).unwrap();
        spec.layers[5].concat_source = Some(7);
        assert!(spec.validate().is_err());
        let mut d = discriminator_spec(&DiscriminatorOptions::new(3, WidthScale::FULL)).unwrap();
        d.layers[1].attention = true;
        assert!(d.validate().is_err());
    }

    #[test]
    fn forward_requires_mask_iff_attention() {
        let spec = generator_spec(&GeneratorOptions::with_depth(
            Role::Inpaint,
            2,
            WidthScale::new(1, 16).unwrap(),
        ))
        .unwrap();
        let state = ModelState::init(&spec, 1).unwrap();
        let x = Tensor::zeros([1, 5, 8, 8]);
        let cfg = AttentionConfig::default();
        assert!(forward_eval(&spec, &state, &x, &[], &cfg).is_err());
        let m = Mask::all_known(8, 8);
        assert_eq!(
            forward_eval(&spec, &state, &x, &[m.clone()], &cfg)
                .unwrap()
                .shape(),
            [1, 3, 8, 8]
        );
        let g1 = generator_spec(&GeneratorOptions::with_depth(
            Role::Lbp,
            2,
            WidthScale::new(1, 16).unwrap(),
        ))
        .unwrap();
        let s1 = ModelState::init(&g1, 1).unwrap();
        assert!(forward_eval(&g1, &s1, &Tensor::zeros([1, 2, 8, 8]), &[m], &cfg).is_err());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Checkpoint::read_from(&mut &b"NOPE\x01\0\0\0"[..]).is_err());
        let spec = discriminator_spec(&DiscriminatorOptions::new(
            1,
            WidthScale::new(1, 8).unwrap(),
        ))
        .unwrap();
        let ck = Checkpoint::new(spec.clone(), ModelState::init(&spec, 3).unwrap());
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(&mut buf.as_slice()).unwrap(), ck);
        buf.truncate(buf.len() - 3);
        match Checkpoint::read_from(&mut buf.as_slice()) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("truncated")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
